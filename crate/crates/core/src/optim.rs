//! Derivative-free Nelder–Mead simplex minimization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    pub max_iter: usize,
    /// Objective spread `f(worst) - f(best)` required for convergence.
    pub f_tol: f64,
    /// Vertex spread (max-norm distance to the best) required for
    /// convergence. Both tolerances must hold: a simplex straddling a
    /// minimum symmetrically has zero objective spread but is not done.
    pub x_tol: f64,
    /// Restarts used by threshold fitting.
    pub restarts: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        SimplexConfig {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            max_iter: 500,
            f_tol: 1e-6,
            x_tol: 1e-8,
            restarts: 3,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.reflection, self.expansion, self.contraction, self.shrink]
            .iter()
            .all(|c| *c > 0.0 && c.is_finite());
        if !positive || !(self.expansion > 1.0 && self.contraction < 1.0) || self.shrink >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "simplex coefficients {self:?} must be positive with expansion > 1 > contraction, shrink < 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

struct Vertex {
    x: Vec<f64>,
    f: f64,
}

fn eval<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> f64 {
    let v = f(x);
    // non-finite values after the start simplex are treated as infinitely bad
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Minimizes `objective` starting from `start`.
///
/// The initial simplex is `start` plus one vertex per coordinate, offset by
/// `max(0.05, 0.05 * |start_i|)`. Vertices are kept stably sorted, so on a
/// flat objective the start stays the best vertex.
pub fn nelder_mead<F>(mut objective: F, start: &[f64], config: &SimplexConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    let n = start.len();
    if n == 0 {
        return Err(Error::InvalidConfig("cannot minimize over zero dimensions".into()));
    }
    let mut simplex = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut x = start.to_vec();
        if i > 0 {
            x[i - 1] += f64::max(0.05, 0.05 * start[i - 1].abs());
        }
        let f = objective(&x);
        if !f.is_finite() {
            return Err(Error::InvalidStart);
        }
        simplex.push(Vertex { x, f });
    }

    let mut iterations = 0;
    loop {
        simplex.sort_by(|a, b| a.f.total_cmp(&b.f));
        let best = &simplex[0];
        let worst = &simplex[n];
        let f_spread = worst.f - best.f;
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.x.iter().zip(&best.x).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (f_spread < config.f_tol && x_spread < config.x_tol) || iterations >= config.max_iter {
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v.x[j]).sum::<f64>() / n as f64)
            .collect();
        let along =
            |t: f64, worst: &[f64]| -> Vec<f64> { centroid.iter().zip(worst).map(|(c, w)| c + t * (c - w)).collect() };

        let worst_x = simplex[n].x.clone();
        let f_worst = simplex[n].f;
        let f_best = simplex[0].f;
        let f_second = simplex[n - 1].f;

        let xr = along(config.reflection, &worst_x);
        let fr = eval(&mut objective, &xr);
        if fr < f_best {
            let xe = along(config.reflection * config.expansion, &worst_x);
            let fe = eval(&mut objective, &xe);
            simplex[n] = if fe < fr {
                Vertex { x: xe, f: fe }
            } else {
                Vertex { x: xr, f: fr }
            };
            continue;
        }
        if fr < f_second {
            simplex[n] = Vertex { x: xr, f: fr };
            continue;
        }
        // contraction: outside if the reflection improved on the worst, else inside
        let (xc, fc, accept_against) = if fr < f_worst {
            let xc = along(config.reflection * config.contraction, &worst_x);
            let fc = eval(&mut objective, &xc);
            (xc, fc, fr)
        } else {
            let xc = along(-config.contraction, &worst_x);
            let fc = eval(&mut objective, &xc);
            (xc, fc, f_worst)
        };
        if fc < accept_against {
            simplex[n] = Vertex { x: xc, f: fc };
            continue;
        }
        let best_x = simplex[0].x.clone();
        for v in simplex.iter_mut().skip(1) {
            for (xi, bi) in v.x.iter_mut().zip(&best_x) {
                *xi = bi + config.shrink * (*xi - bi);
            }
            v.f = eval(&mut objective, &v.x);
        }
    }
    let best = simplex.swap_remove(0);
    Ok(Minimum {
        x: best.x,
        value: best.f,
        iterations,
    })
}
