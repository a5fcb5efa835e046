use serde::{Deserialize, Serialize};

use crate::channel::CsiSample;
use crate::diffnum::TensorR;
use crate::hgnet::{forward, HGNetParams, Mode};
use crate::metrics::{source_gap_diag, MmdConfig};
use crate::{Error, Result};

/// Largest pairwise feature-plane MMD between channel classes, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdDiagReport {
    /// Class labels compared, in order.
    pub classes: Vec<usize>,
    pub samples_per_class: usize,
    /// Entry `l` is the source gap of layer `l + 1`'s features.
    pub layer_gaps: Vec<f64>,
}

/// Inference-mode features of every layer for a set of same-size samples.
pub fn class_features(params: &HGNetParams, samples: &[&CsiSample]) -> Result<Vec<TensorR>> {
    let trace = forward(params, samples, Mode::Infer, 0)?;
    Ok(trace.layers.into_iter().map(|l| l.features).collect())
}

/// Source-gap diagnostic over the hidden layers, using up to `per_class`
/// samples of each label present in `samples`.
pub fn mmd_diagnostic(
    params: &HGNetParams,
    samples: &[CsiSample],
    per_class: usize,
    cfg: &MmdConfig,
) -> Result<MmdDiagReport> {
    let mut classes: Vec<usize> = samples.iter().map(|s| s.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::arg("MMD diagnostic needs samples from at least two classes"));
    }
    let mut grouped: Vec<Vec<&CsiSample>> = classes
        .iter()
        .map(|&c| samples.iter().filter(|s| s.label == c).take(per_class).collect())
        .collect();
    let n = grouped.iter().map(Vec::len).min().unwrap_or(0);
    if n < 2 {
        return Err(Error::arg("each class needs at least two samples"));
    }
    grouped.iter_mut().for_each(|g| g.truncate(n));
    let per_class_features = grouped
        .iter()
        .map(|g| class_features(params, g))
        .collect::<Result<Vec<_>>>()?;
    let hidden = params.config.depth() - 1;
    let layer_gaps = (0..hidden)
        .map(|l| {
            let sources: Vec<TensorR> = per_class_features.iter().map(|f| f[l].clone()).collect();
            source_gap_diag(&sources, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MmdDiagReport {
        classes,
        samples_per_class: n,
        layer_gaps,
    })
}
