//! Independent oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use disagree_kit::metrics::AlphaLevel;
use sha2::{Digest, Sha256};

pub const BIN: &str = env!("CARGO_BIN_EXE_disagree-kit");

/// Runs the binary; `Ok(stdout)` on exit code 0, otherwise `Err` with stderr.
pub fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "{args:?} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Exit code of a run.
pub fn cli_code(args: &[&str]) -> i32 {
    Command::new(BIN)
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap_or(-1)
}

/// SHA-256 of every file under `dir`, keyed by relative path. Manifests are
/// normalized first: the wall-clock timestamp is dropped and the run
/// directory is replaced by a placeholder. Every output a manifest lists
/// must exist.
pub fn output_digests(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let prefix = dir.display().to_string();
    walk(dir, dir, &prefix, &mut out)?;
    Ok(out)
}

fn walk(root: &Path, dir: &Path, prefix: &str, out: &mut BTreeMap<String, String>) -> Result<(), String> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, prefix, out)?;
            continue;
        }
        let rel = p.strip_prefix(root).unwrap().display().to_string();
        let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
        let bytes = if p.file_name().is_some_and(|n| n == "run_manifest.json") {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
            for o in v["outputs"].as_array().ok_or("manifest without outputs")? {
                let listed = p.parent().unwrap().join(o.as_str().unwrap());
                if !listed.exists() {
                    return Err(format!("{} lists missing output {}", p.display(), listed.display()));
                }
            }
            v.as_object_mut().unwrap().remove("timestamp_unix");
            v.to_string().replace(prefix, "<run>").into_bytes()
        } else {
            bytes
        };
        let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        out.insert(rel, digest);
    }
    Ok(())
}

fn delta(level: AlphaLevel, c: u8, k: u8, marginals: &[f64; 5]) -> f64 {
    if c == k {
        return 0.0;
    }
    match level {
        AlphaLevel::Nominal => 1.0,
        AlphaLevel::Interval => (c as f64 - k as f64).powi(2),
        AlphaLevel::Ordinal => {
            let (lo, hi) = (c.min(k) as usize, c.max(k) as usize);
            let between: f64 = (lo..=hi).map(|g| marginals[g]).sum();
            (between - (marginals[c as usize] + marginals[k as usize]) / 2.0).powi(2)
        }
    }
}

/// Krippendorff's alpha from pairwise disagreements over every pair of
/// values (categories 1..=4). `None` when undefined.
pub fn alpha_oracle(ratings: &[Vec<Option<u8>>], level: AlphaLevel) -> Option<f64> {
    let units: Vec<Vec<u8>> = ratings
        .iter()
        .map(|r| r.iter().flatten().copied().collect::<Vec<u8>>())
        .filter(|v| v.len() >= 2)
        .collect();
    if units.is_empty() {
        return None;
    }
    let mut marginals = [0.0f64; 5];
    for v in units.iter().flatten() {
        marginals[*v as usize] += 1.0;
    }
    let all: Vec<u8> = units.iter().flatten().copied().collect();
    let n = all.len() as f64;

    let mut observed = 0.0;
    for u in &units {
        let mut s = 0.0;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j {
                    s += delta(level, u[i], u[j], &marginals);
                }
            }
        }
        observed += s / (u.len() as f64 - 1.0);
    }
    observed /= n;

    let mut expected = 0.0;
    for i in 0..all.len() {
        for j in 0..all.len() {
            if i != j {
                expected += delta(level, all[i], all[j], &marginals);
            }
        }
    }
    expected /= n * (n - 1.0);
    if expected == 0.0 {
        return None;
    }
    Some(1.0 - observed / expected)
}

fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Spearman's rho as the Pearson correlation of naive average ranks.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
