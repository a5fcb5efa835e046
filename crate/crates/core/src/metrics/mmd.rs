//! RBF-kernel maximum mean discrepancy and its per-feature-plane average.
//!
//! Estimates are of the squared discrepancy, `E k(x,x') + E k(y,y') - 2 E k(x,y)`,
//! with `k(x, y) = exp(-||x - y||^2 / (2 h^2))`.

use serde::{Deserialize, Serialize};

use crate::diffnum::TensorR;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `h^2 = median(pooled pairwise squared distances) / 2`.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            estimator: Estimator::Biased,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_sq_dist(pooled: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    *m
}

/// Mean kernel value over all pairs, summed in sorted order so that the
/// result depends only on the multiset of pair values (bit-exact symmetry
/// and exact zero for identical sets).
fn mean_kernel(a: &[&[f64]], b: &[&[f64]], gamma: f64, skip_diag: bool) -> f64 {
    let mut vals = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if skip_diag && i == j {
                continue;
            }
            vals.push((-gamma * sq_dist(x, y)).exp());
        }
    }
    vals.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Squared-MMD estimate between two sample sets of equal-length vectors.
pub fn rbf_mmd<X: AsRef<[f64]>, Y: AsRef<[f64]>>(xs: &[X], ys: &[Y], cfg: &MmdConfig) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::arg("MMD needs non-empty sample sets"));
    }
    if cfg.estimator == Estimator::Unbiased && (xs.len() < 2 || ys.len() < 2) {
        return Err(Error::arg("unbiased MMD needs at least two samples per set"));
    }
    let x: Vec<&[f64]> = xs.iter().map(|v| v.as_ref()).collect();
    let y: Vec<&[f64]> = ys.iter().map(|v| v.as_ref()).collect();
    let dim = x[0].len();
    if x.iter().chain(&y).any(|v| v.len() != dim) {
        return Err(Error::shape("MMD samples must share one dimension"));
    }
    let h2 = match cfg.bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h * h,
        Bandwidth::Fixed(h) => return Err(Error::arg(format!("bandwidth must be > 0, got {h}"))),
        Bandwidth::Median => {
            let pooled: Vec<&[f64]> = x.iter().chain(&y).copied().collect();
            let med = median_sq_dist(&pooled);
            if med > 0.0 {
                med / 2.0
            } else {
                1.0
            }
        }
    };
    let gamma = 1.0 / (2.0 * h2);
    let unbiased = cfg.estimator == Estimator::Unbiased;
    let kxx = mean_kernel(&x, &x, gamma, unbiased);
    let kyy = mean_kernel(&y, &y, gamma, unbiased);
    let kxy = mean_kernel(&x, &y, gamma, false);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0))
}

/// Per-plane samples of a `[B, W, H, C]` feature batch: `planes[c][b]` is the
/// flattened `W x H` plane `c` of item `b`.
fn planes(features: &TensorR) -> Result<Vec<Vec<Vec<f64>>>> {
    let (b, w, h, c) = features.dims4()?;
    let mut out = vec![vec![Vec::with_capacity(w * h); b]; c];
    for bi in 0..b {
        for row in features.batch_item(bi).chunks_exact(c) {
            for (ci, v) in row.iter().enumerate() {
                out[ci][bi].push(*v);
            }
        }
    }
    Ok(out)
}

/// Average over feature planes of the per-plane MMD.
pub fn gmmd(features_a: &TensorR, features_b: &TensorR, cfg: &MmdConfig) -> Result<f64> {
    let (_, wa, ha, ca) = features_a.dims4()?;
    let (_, wb, hb, cb) = features_b.dims4()?;
    if ca != cb {
        return Err(Error::shape(format!("feature channel counts differ: {ca} vs {cb}")));
    }
    if (wa, ha) != (wb, hb) {
        return Err(Error::shape("feature planes must share spatial size"));
    }
    let pa = planes(features_a)?;
    let pb = planes(features_b)?;
    let mut total = 0.0;
    for (a, b) in pa.iter().zip(&pb) {
        total += rbf_mmd(a, b, cfg)?;
    }
    Ok(total / ca as f64)
}

/// Largest pairwise [`gmmd`] across per-source feature batches.
pub fn source_gap_diag(sources: &[TensorR], cfg: &MmdConfig) -> Result<f64> {
    if sources.len() < 2 {
        return Err(Error::arg("source gap needs at least two sources"));
    }
    let mut worst: f64 = 0.0;
    for i in 0..sources.len() {
        for j in i + 1..sources.len() {
            worst = worst.max(gmmd(&sources[i], &sources[j], cfg)?);
        }
    }
    Ok(worst)
}
