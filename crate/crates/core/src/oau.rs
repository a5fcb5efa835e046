//! Online adaptive updating: test-time descent of an entropy loss on the
//! beamformer output, touching only the batch-norm scales and shifts.
//!
//! Each step runs the network with frozen running statistics, measures
//! `sum |x ln x|` over the output magnitudes, and updates `gamma_l, beta_l`
//! with a fresh adaptive-moment optimizer. No linear solves are involved.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::CsiSample;
use crate::diffnum::{ops, Adam, GroupTag, TensorR};
use crate::hgnet::{build, HGNetParams, Objective, Pass};
use crate::metrics::{sum_rate_sample, BeamTensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetPolicy {
    /// Restore the trained affine values before every sample.
    #[default]
    PerSample,
    /// Carry adapted values from one sample to the next.
    Persistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OAUConfig {
    /// Update iterations `H`.
    pub iterations: usize,
    /// Step size `R`.
    pub learning_rate: f64,
    #[serde(default)]
    pub reset_policy: ResetPolicy,
}

impl Default for OAUConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            learning_rate: 1e-3,
            reset_policy: ResetPolicy::PerSample,
        }
    }
}

impl OAUConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("OAU learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// `sum |x ln x|` over entry magnitudes; entries below the floor count as zero.
pub fn entropy_loss(v: &BeamTensor) -> f64 {
    let t = TensorR::new(vec![1, v.aps(), v.users(), 2 * v.antennas()], v.to_real_layout()).expect("beam layout");
    ops::entropy(&t).expect("even channel count")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub h: usize,
    /// Loss at the start of iteration `h`.
    pub entropy: f64,
    /// Sum rate of the output the loss was measured on.
    pub sum_rate_bits: f64,
    /// Forward, backward and update time of this iteration.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub iterations: Vec<IterationRecord>,
    pub final_entropy: f64,
    pub final_sum_rate_bits: f64,
    pub touched_fraction: f64,
    pub total_wall_ms: f64,
    /// Set when adaptation stopped early on a non-finite loss.
    pub error: Option<String>,
}

fn evaluate(params: &HGNetParams, sample: &CsiSample) -> Result<(BeamTensor, f64)> {
    let mut g = build(
        params,
        &[sample],
        Pass::from(crate::hgnet::Mode::Infer),
        0,
        Objective::default(),
    )?;
    let v = g.trace.beams.pop().expect("one sample");
    let e = entropy_loss(&v);
    Ok((v, e))
}

/// Adapts a copy of `params` to one sample and returns the adapted output,
/// the per-iteration report and the adapted parameters.
pub fn adapt(
    params: &HGNetParams,
    cfg: &OAUConfig,
    sample: &CsiSample,
) -> Result<(BeamTensor, AdaptationReport, HGNetParams)> {
    cfg.validate()?;
    if !params.is_calibrated() {
        return Err(Error::arg("adaptation needs calibrated batch-norm statistics"));
    }
    let start = Instant::now();
    let mut current = params.clone();
    current.store.train_only(GroupTag::BnAffine);
    current.store.zero_grad();
    let mut adam = Adam::new(cfg.learning_rate);
    let objective = Objective {
        entropy: 1.0,
        ..Objective::default()
    };
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut error = None;
    for h in 1..=cfg.iterations {
        let t0 = Instant::now();
        let step = (|| -> Result<(f64, BeamTensor, HGNetParams)> {
            let g = build(&current, &[sample], Pass::from(crate::hgnet::Mode::Infer), 0, objective)?;
            let root = g.root.expect("entropy term");
            let grads = g.tape.backward(root, TensorR::scalar(1.0))?;
            let mut next = current.clone();
            next.store.zero_grad();
            grads.accumulate_into(&mut next.store);
            adam.step(&mut next.store)?;
            if next.store.groups().iter().any(|gr| !gr.values.all_finite()) {
                return Err(Error::Numeric("non-finite affine parameters".into()));
            }
            let mut beams = g.trace.beams;
            Ok((g.entropy, beams.pop().expect("one sample"), next))
        })();
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        match step {
            Ok((entropy, v, next)) => {
                iterations.push(IterationRecord {
                    h,
                    entropy,
                    sum_rate_bits: sum_rate_sample(sample, &v)?,
                    wall_ms,
                });
                current = next;
            }
            Err(e) => {
                error = Some(format!("iteration {h}: {e}"));
                break;
            }
        }
    }
    current.store.zero_grad();
    current.store.train_all();
    let (v, final_entropy) = evaluate(&current, sample)?;
    let report = AdaptationReport {
        iterations,
        final_entropy,
        final_sum_rate_bits: sum_rate_sample(sample, &v)?,
        touched_fraction: params.affine_fraction(),
        total_wall_ms: start.elapsed().as_secs_f64() * 1e3,
        error,
    };
    Ok((v, report, current))
}

/// Adapts over a sequence of samples under the configured reset policy.
pub fn adapt_all(
    params: &HGNetParams,
    cfg: &OAUConfig,
    samples: &[CsiSample],
) -> Result<Vec<(BeamTensor, AdaptationReport)>> {
    let mut carried = params.clone();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let base = match cfg.reset_policy {
            ResetPolicy::PerSample => params,
            ResetPolicy::Persistent => &carried,
        };
        let (v, report, adapted) = adapt(base, cfg, s)?;
        if cfg.reset_policy == ResetPolicy::Persistent {
            carried = adapted;
        }
        out.push((v, report));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub id: String,
    pub tag: GroupTag,
    pub max_abs_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub groups: Vec<GroupDelta>,
    /// Whether every running mean and variance is bit-identical.
    pub running_stats_identical: bool,
    /// BN affine values over all learnable values.
    pub touched_fraction: f64,
}

impl DeltaReport {
    /// True when only BN affine groups moved.
    pub fn respects_freeze(&self) -> bool {
        self.running_stats_identical
            && self
                .groups
                .iter()
                .all(|g| g.tag == GroupTag::BnAffine || g.max_abs_delta == 0.0)
    }
}

pub fn param_delta_report(before: &HGNetParams, after: &HGNetParams) -> Result<DeltaReport> {
    if !before.store.same_layout(&after.store) || before.running.len() != after.running.len() {
        return Err(Error::arg("parameter sets have different architectures"));
    }
    let groups = before
        .store
        .groups()
        .iter()
        .zip(after.store.groups())
        .map(|(a, b)| GroupDelta {
            id: a.id.clone(),
            tag: a.tag,
            max_abs_delta: a
                .values
                .data()
                .iter()
                .zip(b.values.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        })
        .collect();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let running_stats_identical = before
        .running
        .iter()
        .zip(&after.running)
        .all(|(a, b)| bits(&a.mean) == bits(&b.mean) && bits(&a.var) == bits(&b.var) && a.batches == b.batches);
    Ok(DeltaReport {
        groups,
        running_stats_identical,
        touched_fraction: before.affine_fraction(),
    })
}
