use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ensure_valid, HGNetConfig};
use super::module::{drop_probs, feature_scores, input_transform, residual_matrix, wrs_mask};
use crate::channel::CsiSample;
use crate::diffnum::{
    Activation, BnMode, GroupTag, ParamGroup, ParamId, ParamStore, RunningStats, Tape, TensorR, Var, BN_EPS,
};
use crate::metrics::{rate_loss_grad, BeamTensor};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Learnable values plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct HGNetParams {
    pub config: HGNetConfig,
    pub ap_antennas: usize,
    pub user_antennas: usize,
    pub p_max: f64,
    pub store: ParamStore,
    pub layers: Vec<LayerParams>,
    /// One discriminator per masked layer (all but the last).
    pub discriminators: Vec<DiscParams>,
    pub running: Vec<RunningStats>,
}

impl HGNetParams {
    /// Fresh parameters: He-normal kernels, unit BN scale, zero shifts.
    pub fn new(config: HGNetConfig, ap_antennas: usize, user_antennas: usize, p_max: f64) -> Result<Self> {
        ensure_valid(&config, ap_antennas)?;
        if user_antennas == 0 || !(p_max > 0.0) {
            return Err(Error::arg("user antennas and p_max must be positive"));
        }
        let mut r = rng::stream(config.train.seed, &[0x1417]);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut discriminators = Vec::new();
        let mut running = Vec::new();
        let mut cin = ap_antennas * user_antennas;
        let depth = config.depth();
        for (l, spec) in config.layers.iter().enumerate() {
            let fan_in = (spec.k_w * spec.k_h * cin) as f64;
            // tanh on the last layer: Xavier-style gain
            let gain = if l + 1 == depth { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            let kernel = TensorR::from_fn(&[spec.k_w, spec.k_h, cin, spec.c], |_| normal.sample(&mut r));
            layers.push(LayerParams {
                kernel: store.push(ParamGroup::new(format!("conv{l}.kernel"), GroupTag::Conv, kernel)),
                bias: store.push(ParamGroup::new(
                    format!("conv{l}.bias"),
                    GroupTag::Conv,
                    TensorR::zeros(&[spec.c]),
                )),
                gamma: store.push(ParamGroup::new(
                    format!("bn{l}.gamma"),
                    GroupTag::BnAffine,
                    TensorR::filled(&[spec.c], 1.0),
                )),
                beta: store.push(ParamGroup::new(
                    format!("bn{l}.beta"),
                    GroupTag::BnAffine,
                    TensorR::zeros(&[spec.c]),
                )),
            });
            running.push(RunningStats::new(spec.c));
            if l + 1 < depth {
                let normal = Normal::new(0.0, (1.0 / spec.c as f64).sqrt()).expect("positive std");
                let w = TensorR::from_fn(&[config.classes, spec.c], |_| normal.sample(&mut r));
                discriminators.push(DiscParams {
                    weight: store.push(ParamGroup::new(format!("disc{l}.weight"), GroupTag::Discriminator, w)),
                    bias: store.push(ParamGroup::new(
                        format!("disc{l}.bias"),
                        GroupTag::Discriminator,
                        TensorR::zeros(&[config.classes]),
                    )),
                });
            }
            cin = spec.c;
        }
        Ok(Self {
            config,
            ap_antennas,
            user_antennas,
            p_max,
            store,
            layers,
            discriminators,
            running,
        })
    }

    /// Share of all learnable values that are BN scales and shifts.
    pub fn affine_fraction(&self) -> f64 {
        self.store.count_tagged(GroupTag::BnAffine) as f64 / self.store.total_count() as f64
    }

    pub fn is_calibrated(&self) -> bool {
        self.running.iter().all(RunningStats::is_populated)
    }
}

/// Forward behavior: `Train` uses batch statistics and the dropout module,
/// `Infer` uses running statistics and keeps every feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Intermediates of one layer. Module fields are `None` where it is inactive.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `C_l`, `[B, Q, I, c_l]`.
    pub features: TensorR,
    /// `G_l`: masked features passed on.
    pub passed: TensorR,
    /// Pooled features `g_l`, `[B, c_l]`.
    pub pooled: Option<TensorR>,
    pub logits: Option<TensorR>,
    pub scores: Option<TensorR>,
    pub probs: Option<TensorR>,
    /// `[B, c_l]`, all ones in inference.
    pub mask: TensorR,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub beams: Vec<BeamTensor>,
}

/// Weights of the scalar terms summed into the graph root.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Objective {
    /// Negative mean sum rate.
    pub rate: f64,
    /// Sum over layers of the discriminator cross-entropies.
    pub adversarial: f64,
    /// Entropy of the output beams.
    pub entropy: f64,
}

pub(crate) struct Pass {
    pub bn: BnMode,
    pub module: bool,
}

impl From<Mode> for Pass {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => Pass {
                bn: BnMode::Train,
                module: true,
            },
            Mode::Infer => Pass {
                bn: BnMode::Infer,
                module: false,
            },
        }
    }
}

pub(crate) struct Graph {
    pub tape: Tape,
    pub root: Option<Var>,
    pub trace: ForwardTrace,
    /// Mean negative sum rate, when requested.
    pub rate_loss: f64,
    /// Summed discriminator losses, when the module ran.
    pub disc_loss: f64,
    pub entropy: f64,
    pub batch_stats: Vec<crate::diffnum::BatchStats>,
}

fn check_batch(params: &HGNetParams, samples: &[&CsiSample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::arg("empty batch"))?;
    let (q, i) = (first.aps, first.users);
    for s in samples {
        if (s.aps, s.users) != (q, i) {
            return Err(Error::shape("all samples of a batch must share (Q, I)"));
        }
        if (s.ap_antennas, s.user_antennas) != (params.ap_antennas, params.user_antennas) {
            return Err(Error::shape(format!(
                "sample has {}x{} antennas, network expects {}x{}",
                s.ap_antennas, s.user_antennas, params.ap_antennas, params.user_antennas
            )));
        }
    }
    Ok((q, i))
}

fn stack_inputs(params: &HGNetParams, samples: &[&CsiSample], q: usize, i: usize) -> Result<TensorR> {
    let mn = params.ap_antennas * params.user_antennas;
    let mut data = Vec::with_capacity(samples.len() * q * i * mn);
    for s in samples {
        data.extend_from_slice(input_transform(&s.h, params.ap_antennas, params.user_antennas)?.data());
    }
    TensorR::new(vec![samples.len(), q, i, mn], data)
}

/// Records the network on a fresh tape.
pub(crate) fn build(
    params: &HGNetParams,
    samples: &[&CsiSample],
    pass: Pass,
    mask_seed: u64,
    objective: Objective,
) -> Result<Graph> {
    let (q, i) = check_batch(params, samples)?;
    let cfg = &params.config;
    let b = samples.len();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    if pass.module && objective.adversarial != 0.0 {
        if let Some(l) = labels.iter().find(|&&l| l >= cfg.classes) {
            return Err(Error::arg(format!(
                "label {l} outside the {} training classes",
                cfg.classes
            )));
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(stack_inputs(params, samples, q, i)?)?;
    let v_im = match residual_matrix(params.ap_antennas, params.user_antennas) {
        Some(mat) => tape.channel_mix(x, mat)?,
        None => x,
    };
    let depth = cfg.depth();
    let mut h = x;
    let mut traces = Vec::with_capacity(depth);
    let mut disc_terms = Vec::new();
    let mut batch_stats = Vec::with_capacity(depth);
    for (l, (spec, lp)) in cfg.layers.iter().zip(&params.layers).enumerate() {
        let k = tape.param(&params.store, lp.kernel)?;
        let bias = tape.param(&params.store, lp.bias)?;
        let conv = tape.conv2d(h, k, bias, spec.geometry())?;
        let gamma = tape.param(&params.store, lp.gamma)?;
        let beta = tape.param(&params.store, lp.beta)?;
        let (bn, stats) = tape.batchnorm(conv, gamma, beta, pass.bn, &params.running[l], BN_EPS)?;
        batch_stats.push(stats);
        let last = l + 1 == depth;
        let act = tape.activation(bn, if last { Activation::Tanh } else { Activation::Relu })?;
        let c = spec.c;
        if last || !pass.module {
            let value = tape.value(act).clone();
            traces.push(LayerTrace {
                passed: value.clone(),
                features: value,
                pooled: None,
                logits: None,
                scores: None,
                probs: None,
                mask: TensorR::filled(&[b, c], 1.0),
            });
            h = act;
            continue;
        }
        let dp = params.discriminators[l];
        let pooled = tape.gap(act)?;
        let reversed = tape.grl(pooled, cfg.grl_lambda)?;
        let w = tape.param(&params.store, dp.weight)?;
        let wb = tape.param(&params.store, dp.bias)?;
        let logits = tape.fc(reversed, w, wb)?;
        if objective.adversarial != 0.0 {
            disc_terms.push(tape.softmax_xent(logits, &labels)?);
        }
        let g = tape.value(pooled).clone();
        let weights = &params.store.get(dp.weight).values;
        let c_dis = cfg.discard_count(l);
        let mut scores = Vec::with_capacity(b * c);
        let mut probs = Vec::with_capacity(b * c);
        let mut mask = Vec::with_capacity(b * c);
        for (bi, &label) in labels.iter().enumerate() {
            let row = &g.data()[bi * c..(bi + 1) * c];
            let s = feature_scores(row, weights, label.min(cfg.classes - 1))?;
            let p = drop_probs(&s);
            let mut r = rng::stream(mask_seed, &[bi as u64, l as u64]);
            mask.extend(wrs_mask(&p, c_dis, &mut r)?);
            scores.extend(s);
            probs.extend(p);
        }
        let mask = TensorR::new(vec![b, c], mask)?;
        let passed = tape.channel_mask(act, mask.clone())?;
        traces.push(LayerTrace {
            features: tape.value(act).clone(),
            passed: tape.value(passed).clone(),
            pooled: Some(g),
            logits: Some(tape.value(logits).clone()),
            scores: Some(TensorR::new(vec![b, c], scores)?),
            probs: Some(TensorR::new(vec![b, c], probs)?),
            mask,
        });
        h = passed;
    }
    let summed = tape.add(h, v_im)?;
    let squashed = tape.activation(summed, Activation::Tanh)?;
    let out = tape.power_project(squashed, params.p_max, cfg.projection)?;

    let (m, slab) = (params.ap_antennas, q * i * 2 * params.ap_antennas);
    let beams = tape
        .value(out)
        .data()
        .chunks_exact(slab)
        .map(|chunk| BeamTensor::from_real_layout(q, i, m, chunk))
        .collect::<Result<Vec<_>>>()?;

    let mut terms = Vec::new();
    let mut rate_loss = 0.0;
    if objective.rate != 0.0 {
        let mut grad = Vec::with_capacity(b * slab);
        for (s, v) in samples.iter().zip(&beams) {
            let (loss, g) = rate_loss_grad(&s.h, v, s.noise_power)?;
            rate_loss += loss / b as f64;
            grad.extend(g.to_real_layout().iter().map(|d| d / b as f64));
        }
        let shape = tape.value(out).shape().to_vec();
        let node = tape.external(out, rate_loss, TensorR::new(shape, grad)?)?;
        terms.push((node, objective.rate));
    }
    let mut disc_loss = 0.0;
    for &d in &disc_terms {
        disc_loss += tape.value(d).data()[0];
        terms.push((d, objective.adversarial));
    }
    let mut entropy = 0.0;
    if objective.entropy != 0.0 {
        let node = tape.entropy(out)?;
        entropy = tape.value(node).data()[0];
        terms.push((node, objective.entropy));
    }
    let root = if terms.is_empty() {
        None
    } else {
        Some(tape.weighted_sum(&terms)?)
    };
    Ok(Graph {
        tape,
        root,
        trace: ForwardTrace { layers: traces, beams },
        rate_loss,
        disc_loss,
        entropy,
        batch_stats,
    })
}

/// Runs the network on a batch sharing one `(Q, I)`.
///
/// `mask_seed` drives the per-sample dropout streams in train mode.
pub fn forward(params: &HGNetParams, samples: &[&CsiSample], mode: Mode, mask_seed: u64) -> Result<ForwardTrace> {
    Ok(build(params, samples, mode.into(), mask_seed, Objective::default())?.trace)
}

/// Inference-mode beamformer for one sample.
pub fn infer(params: &HGNetParams, sample: &CsiSample) -> Result<BeamTensor> {
    let mut trace = forward(params, &[sample], Mode::Infer, 0)?;
    Ok(trace.beams.pop().expect("one beam per sample"))
}

/// Recomputes the running statistics as the average of per-batch statistics
/// over `samples`, with the dropout module off and all parameters fixed.
pub fn calibrate(params: &mut HGNetParams, samples: &[CsiSample], batch_size: usize) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::DegenerateBatch(samples.len()));
    }
    let refs: Vec<&CsiSample> = samples.iter().collect();
    let mut fresh: Vec<RunningStats> = params.running.iter().map(|r| RunningStats::new(r.mean.len())).collect();
    for chunk in batches(&refs, batch_size.max(2)) {
        let graph = build(
            params,
            chunk,
            Pass {
                bn: BnMode::Train,
                module: false,
            },
            0,
            Objective::default(),
        )?;
        for (rs, st) in fresh.iter_mut().zip(&graph.batch_stats) {
            rs.accumulate(&st.mean, &st.var, st.batch);
        }
    }
    params.running = fresh;
    Ok(())
}

/// Consecutive batches of `size`; a trailing remainder of one item joins the previous batch.
pub(crate) fn batches<T>(items: &[T], size: usize) -> Vec<&[T]> {
    let mut out: Vec<&[T]> = Vec::new();
    let mut start = 0;
    while start < items.len() {
        let mut end = (start + size).min(items.len());
        if items.len() - end == 1 {
            end = items.len();
        }
        out.push(&items[start..end]);
        start = end;
    }
    out
}
