//! Anisotropy removal (centering, standardization, all-but-the-top) and
//! cosine relatedness scoring.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TransformKind, UsagePair};
use crate::store::{EmbeddingStore, VectorKey};

/// Columns with a population std below this are left unscaled.
pub const DEGENERATE_STD: f64 = 1e-12;
/// Vectors with an L2 norm at or below this count as zero.
pub const ZERO_NORM: f64 = 1e-9;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStats {
    pub kind: TransformKind,
    pub mean: Vec<f64>,
    /// Per-column scale; only populated for `standardize`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    /// Unit top principal direction; only populated for `abtt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<Vec<f64>>,
    pub fitted_on: usize,
}

impl TransformStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Identity stats of the given width.
    pub fn identity(dim: usize) -> Self {
        TransformStats {
            kind: TransformKind::None,
            mean: vec![0.0; dim],
            scale: None,
            principal: None,
            fitted_on: 0,
        }
    }

    /// Applies the transform to one vector.
    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut out: Vec<f64> = match self.kind {
            TransformKind::None => return Ok(x.to_vec()),
            _ => x.iter().zip(&self.mean).map(|(a, m)| a - m).collect(),
        };
        match self.kind {
            TransformKind::Standardize => {
                if let Some(scale) = &self.scale {
                    out.iter_mut().zip(scale).for_each(|(v, s)| *v /= s);
                }
            }
            TransformKind::Abtt => {
                if let Some(p) = &self.principal {
                    let proj: f64 = out.iter().zip(p).map(|(a, b)| a * b).sum();
                    out.iter_mut().zip(p).for_each(|(v, pi)| *v -= proj * pi);
                }
            }
            _ => {}
        }
        Ok(out)
    }
}

fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Dominant eigenvector of `centeredᵀ·centered / n`, computed by power
/// iteration without forming the covariance.
fn principal_direction(centered: &Array2<f64>) -> Result<Array1<f64>> {
    let n = centered.nrows() as f64;
    let dim = centered.ncols();
    let cov_mul = |v: &Array1<f64>| centered.t().dot(&centered.dot(v)) / n;

    let scale: f64 = centered.iter().map(|x| x * x).sum::<f64>() / n;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::DegenerateSpectrum);
    }

    // all-ones start; if it is orthogonal to the data, fall back to basis vectors
    let mut starts = vec![Array1::from_elem(dim, 1.0 / (dim as f64).sqrt())];
    starts.extend((0..dim).map(|i| {
        let mut e = Array1::zeros(dim);
        e[i] = 1.0;
        e
    }));
    let mut v = None;
    for start in starts {
        let w = cov_mul(&start);
        let norm = w.dot(&w).sqrt();
        if norm > 1e-12 * scale {
            v = Some(w / norm);
            break;
        }
    }
    let mut v = v.ok_or(Error::DegenerateSpectrum)?;

    for _ in 0..POWER_MAX_ITER {
        let w = cov_mul(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateSpectrum);
        }
        let next = w / norm;
        let change = (&next - &v).dot(&(&next - &v)).sqrt();
        v = next;
        if change < POWER_TOL {
            break;
        }
    }

    if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
    let norm = v.dot(&v).sqrt();
    Ok(v / norm)
}

/// Fits transform statistics on the rows of `matrix`.
pub fn fit_transform(kind: TransformKind, matrix: &Array2<f64>) -> Result<TransformStats> {
    let n = matrix.nrows();
    let needed = match kind {
        TransformKind::None => 0,
        TransformKind::Center => 1,
        TransformKind::Standardize | TransformKind::Abtt => 2,
    };
    if n < needed {
        return Err(Error::TooFewRows {
            what: "transform fit",
            needed,
            found: n,
        });
    }
    let mean = column_means(matrix);
    let mut stats = TransformStats {
        kind,
        mean: mean.to_vec(),
        scale: None,
        principal: None,
        fitted_on: n,
    };
    match kind {
        TransformKind::None | TransformKind::Center => {}
        TransformKind::Standardize => {
            let centered = matrix - &mean;
            let var = centered.mapv(|x| x * x).mean_axis(Axis(0)).unwrap_or_default();
            stats.scale = Some(
                var.iter()
                    .map(|v| {
                        let s = v.sqrt();
                        if s < DEGENERATE_STD {
                            1.0
                        } else {
                            s
                        }
                    })
                    .collect(),
            );
        }
        TransformKind::Abtt => {
            let centered = matrix - &mean;
            stats.principal = Some(principal_direction(&centered)?.to_vec());
        }
    }
    Ok(stats)
}

pub fn apply_transform(stats: &TransformStats, matrix: &Array2<f64>) -> Result<Array2<f64>> {
    if matrix.ncols() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            found: matrix.ncols(),
        });
    }
    if stats.kind == TransformKind::None {
        return Ok(matrix.clone());
    }
    let mean = ArrayView1::from(&stats.mean[..]);
    let mut out = matrix - &mean;
    match stats.kind {
        TransformKind::Standardize => {
            if let Some(scale) = &stats.scale {
                out /= &ArrayView1::from(&scale[..]);
            }
        }
        TransformKind::Abtt => {
            if let Some(p) = &stats.principal {
                let p = ArrayView1::from(&p[..]);
                for mut row in out.rows_mut() {
                    let proj = row.dot(&p);
                    row.scaled_add(-proj, &p);
                }
            }
        }
        _ => {}
    }
    Ok(out)
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= ZERO_NORM || nv <= ZERO_NORM {
        return Err(Error::ZeroVector { instance_id: None });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Relatedness of one pair after transforming both sides.
pub fn score_pair(store: &EmbeddingStore, stats: &TransformStats, instance_id: &str) -> Result<f64> {
    let [k1, k2] = VectorKey::pair(instance_id);
    let u = stats.apply_vector(&store.get_vector(&k1)?)?;
    let v = stats.apply_vector(&store.get_vector(&k2)?)?;
    cosine_score(&u, &v).map_err(|e| match e {
        Error::ZeroVector { .. } => Error::ZeroVector {
            instance_id: Some(instance_id.to_string()),
        },
        other => other,
    })
}

/// Scores every pair; the first failure aborts.
pub fn score_pairs(
    store: &EmbeddingStore,
    stats: &TransformStats,
    pairs: &[UsagePair],
) -> Result<BTreeMap<String, f64>> {
    pairs
        .iter()
        .map(|p| Ok((p.instance_id.clone(), score_pair(store, stats, &p.instance_id)?)))
        .collect()
}

/// Keys for both sides of every pair, in pair order.
pub fn pair_keys(pairs: &[UsagePair]) -> Vec<VectorKey> {
    pairs.iter().flat_map(|p| VectorKey::pair(&p.instance_id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn center_example() {
        let x = array![[1.0, 3.0], [3.0, 1.0]];
        let s = fit_transform(TransformKind::Center, &x).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert_eq!(apply_transform(&s, &x).unwrap(), array![[-1.0, 1.0], [1.0, -1.0]]);
    }

    #[test]
    fn standardize_degenerate_column() {
        let x = array![[0.0, 0.0], [2.0, 0.0]];
        let s = fit_transform(TransformKind::Standardize, &x).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.scale, Some(vec![1.0, 1.0]));
    }

    #[test]
    fn abtt_rank_one() {
        let x = array![[-1.0, -1.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let s = fit_transform(TransformKind::Abtt, &x).unwrap();
        let p = s.principal.clone().unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((p[0] - h).abs() < 1e-12 && (p[1] - h).abs() < 1e-12);
        let t = apply_transform(&s, &x).unwrap();
        for row in t.rows() {
            assert!(row.dot(&row).sqrt() < 1e-9);
        }
    }

    #[test]
    fn abtt_direction_orthogonal_to_ones() {
        // principal (1,-1)/√2 is orthogonal to the all-ones start
        let x = array![[1.0, -1.0], [-1.0, 1.0], [2.0, -2.0], [-2.0, 2.0]];
        let s = fit_transform(TransformKind::Abtt, &x).unwrap();
        let p = s.principal.unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((p[0] - h).abs() < 1e-9 && (p[1] + h).abs() < 1e-9);
    }

    #[test]
    fn fit_errors() {
        let one = array![[1.0, 2.0]];
        assert!(matches!(
            fit_transform(TransformKind::Standardize, &one),
            Err(Error::TooFewRows { needed: 2, .. })
        ));
        assert!(fit_transform(TransformKind::Center, &one).is_ok());
        let zeros = Array2::<f64>::zeros((3, 2));
        assert!(matches!(
            fit_transform(TransformKind::Abtt, &zeros),
            Err(Error::DegenerateSpectrum)
        ));
        let s = fit_transform(TransformKind::Center, &one).unwrap();
        assert!(matches!(
            apply_transform(&s, &array![[1.0, 2.0, 3.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn none_is_bitwise_identity() {
        let x = array![[0.1, -0.0], [f64::MIN_POSITIVE, 1e300]];
        let s = fit_transform(TransformKind::None, &x).unwrap();
        let y = apply_transform(&s, &x).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine_score(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn apply_vector_matches_matrix() {
        let x = array![[1.0, 2.0, 0.5], [3.0, -1.0, 2.0], [0.0, 0.0, 1.0], [2.0, 5.0, -3.0]];
        for kind in TransformKind::ALL {
            let s = fit_transform(kind, &x).unwrap();
            let m = apply_transform(&s, &x).unwrap();
            for (r, row) in x.rows().into_iter().enumerate() {
                let v = s.apply_vector(&row.to_vec()).unwrap();
                for (a, b) in v.iter().zip(m.row(r)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn standardize_self_fit_moments(x in matrix(12, 5)) {
            let s = fit_transform(TransformKind::Standardize, &x).unwrap();
            let t = apply_transform(&s, &x).unwrap();
            for c in 0..5 {
                let col = t.column(c);
                let mean = col.mean().unwrap();
                let std = (col.mapv(|v| (v - mean).powi(2)).mean().unwrap()).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_scale_invariant(u in prop::collection::vec(-5.0f64..5.0, 6),
                                  v in prop::collection::vec(-5.0f64..5.0, 6),
                                  a in 0.01f64..100.0, b in 0.01f64..100.0) {
            if let Ok(c) = cosine_score(&u, &v) {
                let us: Vec<f64> = u.iter().map(|x| x * a).collect();
                let vs: Vec<f64> = v.iter().map(|x| x * b).collect();
                prop_assert!((cosine_score(&us, &vs).unwrap() - c).abs() < 1e-12);
            }
        }

        #[test]
        fn center_preserves_differences(x in matrix(6, 4)) {
            let s = fit_transform(TransformKind::Center, &x).unwrap();
            let t = apply_transform(&s, &x).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let d0 = &x.row(i) - &x.row(j);
                    let d1 = &t.row(i) - &t.row(j);
                    for (a, b) in d0.iter().zip(d1.iter()) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn abtt_removes_principal_variance(x in matrix(10, 6)) {
            let s = fit_transform(TransformKind::Abtt, &x).unwrap();
            let p = ArrayView1::from(s.principal.as_ref().unwrap().as_slice()).to_owned();
            prop_assert!((p.dot(&p).sqrt() - 1.0).abs() < 1e-9);
            let t = apply_transform(&s, &x).unwrap();
            for row in t.rows() {
                prop_assert!(row.dot(&p).abs() < 1e-8);
            }
        }
    }
}
