//! Pure building blocks around the convolutional pipeline: the modulus input
//! transform, the sensitive-feature scoring and weighted random dropout, and
//! the residual complex output.

use rand::Rng;

use crate::diffnum::{ops, ProjectionMode, TensorC, TensorR};
use crate::metrics::{project_power, BeamTensor};
use crate::{Error, Result};

/// Floor added to rectified scores so every feature keeps a positive drop probability.
pub const SCORE_FLOOR: f64 = 1e-8;

/// `(I*N) x (Q*M)` channel to a `Q x I x (M*N)` magnitude tensor:
/// `out[q, i, n*M + m] = |H[i*N + n, q*M + m]|`.
pub fn input_transform(h: &TensorC, ap_antennas: usize, user_antennas: usize) -> Result<TensorR> {
    let [rows, cols] = h.shape() else {
        return Err(Error::shape("channel must be 2-D"));
    };
    let (m, n) = (ap_antennas, user_antennas);
    if m == 0 || n == 0 || rows % n != 0 || cols % m != 0 {
        return Err(Error::shape(format!(
            "channel {rows}x{cols} is not divisible into {n}x{m} blocks"
        )));
    }
    let (users, aps) = (rows / n, cols / m);
    let mn = m * n;
    let mut out = vec![0.0; aps * users * mn];
    for (r, row) in h.data().chunks_exact(*cols).enumerate() {
        let (i, ni) = (r / n, r % n);
        for (col, z) in row.iter().enumerate() {
            let (q, mi) = (col / m, col % m);
            out[(q * users + i) * mn + ni * m + mi] = z.norm();
        }
    }
    TensorR::new(vec![aps, users, mn], out)
}

/// Cross-entropy of `softmax(W g + b)` against `label`; returns `(loss, logits)`.
pub fn discriminator_loss(g: &[f64], weights: &TensorR, bias: &TensorR, label: usize) -> Result<(f64, Vec<f64>)> {
    let x = TensorR::new(vec![1, g.len()], g.to_vec())?;
    let logits = ops::fc(&x, weights, bias)?;
    let (loss, _) = ops::softmax_xent(&logits, &[label])?;
    Ok((loss, logits.into_data()))
}

/// Contribution of each feature to the true-class logit: `W[label] * g`.
pub fn feature_scores(g: &[f64], weights: &TensorR, label: usize) -> Result<Vec<f64>> {
    let (t, c) = weights.dims2()?;
    if c != g.len() || label >= t {
        return Err(Error::shape(format!(
            "scores need {c} features and a label below {t}, got {} / {label}",
            g.len()
        )));
    }
    let row = &weights.data()[label * c..(label + 1) * c];
    Ok(row.iter().zip(g).map(|(w, x)| w * x).collect())
}

/// Drop probabilities from scores: rectify, add [`SCORE_FLOOR`], normalize.
pub fn drop_probs(scores: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = scores.iter().map(|v| v.max(0.0) + SCORE_FLOOR).collect();
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}

/// Mask zeroing the `c_dis` features with the largest keys.
pub fn mask_from_keys(keys: &[f64], c_dis: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    // descending keys; ties broken by index for determinism
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut mask = vec![1.0; keys.len()];
    for &c in order.iter().take(c_dis) {
        mask[c] = 0.0;
    }
    mask
}

/// Weighted random sampling without replacement of `c_dis` features to drop.
///
/// Keys are `r^(1/p)` with `r ~ U(0,1)`, compared as `ln(r) / p` to stay in range.
pub fn wrs_mask<R: Rng + ?Sized>(probs: &[f64], c_dis: usize, rng: &mut R) -> Result<Vec<f64>> {
    if c_dis >= probs.len().max(1) {
        return Err(Error::arg(format!(
            "cannot discard {c_dis} of {} features",
            probs.len()
        )));
    }
    let keys: Vec<f64> = probs
        .iter()
        .map(|p| {
            let r: f64 = rng.random::<f64>();
            // random() is in [0, 1); map 0 to the smallest positive value
            r.max(f64::MIN_POSITIVE).ln() / p
        })
        .collect();
    Ok(mask_from_keys(&keys, c_dis))
}

/// Zeroes planes of a `[B, W, H, C]` feature tensor by a `[B, C]` mask.
pub fn apply_mask(features: &TensorR, mask: &TensorR) -> Result<TensorR> {
    ops::channel_mask(features, mask)
}

/// Fixed map from the input's `M*N` channels to the `2M` output channels:
/// identity when they agree, otherwise a uniform channel average.
pub fn residual_matrix(ap_antennas: usize, user_antennas: usize) -> Option<TensorR> {
    let (cin, cout) = (ap_antennas * user_antennas, 2 * ap_antennas);
    (cin != cout).then(|| TensorR::filled(&[cin, cout], 1.0 / cin as f64))
}

/// `tanh(C_L + V_IM)` split into real and imaginary halves, then projected per AP.
/// Both tensors are `Q x I x 2M`.
pub fn assemble_output(c_last: &TensorR, v_im: &TensorR, p_max: f64, mode: ProjectionMode) -> Result<BeamTensor> {
    if c_last.shape() != v_im.shape() || c_last.rank() != 3 || !c_last.shape()[2].is_multiple_of(2) {
        return Err(Error::shape(format!(
            "output branches {:?} and {:?} must match as Q x I x 2M",
            c_last.shape(),
            v_im.shape()
        )));
    }
    let (q, i, c2) = (c_last.shape()[0], c_last.shape()[1], c_last.shape()[2]);
    let real: Vec<f64> = c_last
        .data()
        .iter()
        .zip(v_im.data())
        .map(|(a, b)| (a + b).tanh())
        .collect();
    let v = BeamTensor::from_real_layout(q, i, c2 / 2, &real)?;
    Ok(project_power(&v, p_max, mode))
}
