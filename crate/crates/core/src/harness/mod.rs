//! Experiment orchestration: one JSON spec drives data generation, training,
//! evaluation of every method on every size/channel cell, OAU sweeps,
//! timing, and report emission.

mod bench;
mod diag;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{gen_samples, load_dataset, ChannelModel, CsiSample, PeriodSpec, ScenarioConfig, Split};
use crate::hgnet::{
    ensure_valid, infer, load_checkpoint, save_checkpoint, train, HGNetConfig, HGNetParams, TrainReport,
};
use crate::metrics::{max_power_ratio, sum_rate_sample, BeamTensor};
use crate::oau::{adapt_all, OAUConfig};
use crate::rng;
use crate::wmmse::{mrt_baseline, wmmse_solve, WmmseConfig};
use crate::{Error, Result};

pub use bench::{bench_timing, hardware_descriptor, TimingStats, MIN_REPETITIONS};
pub use diag::{class_features, mmd_diagnostic, MmdDiagReport};
pub use report::{emit_report, parse_report, render_report, ReportFormat, ResultRow};

pub const SPEC_VERSION: u32 = 1;

/// Tolerance on the per-AP budget when re-checking emitted beams.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wmmse,
    Mrt,
    Hgnet,
    /// HGNet trained without the high-generalization module.
    HgnetNoG,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wmmse => "wmmse",
            Method::Mrt => "mrt",
            Method::Hgnet => "hgnet",
            Method::HgnetNoG => "hgnet_no_g",
        }
    }

    pub fn needs_training(self) -> bool {
        matches!(self, Method::Hgnet | Method::HgnetNoG)
    }
}

fn default_version() -> u32 {
    SPEC_VERSION
}

fn default_eval_samples() -> usize {
    50
}

fn default_models() -> Vec<ChannelModel> {
    ChannelModel::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Training periods and physical constants.
    pub scenario: ScenarioConfig,
    pub net: HGNetConfig,
    #[serde(default)]
    pub oau: OAUConfig,
    #[serde(default)]
    pub wmmse: WmmseConfig,
    pub baselines: Vec<Method>,
    /// `(Q, I)` evaluation sizes.
    pub eval_sizes: Vec<(usize, usize)>,
    #[serde(default = "default_models")]
    pub eval_models: Vec<ChannelModel>,
    /// Test samples per size and channel cell.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// OAU iteration counts to sweep; empty skips adaptation.
    #[serde(default)]
    pub h_sweep: Vec<usize>,
    /// Dataset directory to train from instead of generating in memory.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Checkpoint to load instead of training the full HGNet.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for the report and trained checkpoints.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::Config(format!("unsupported spec version {}", self.version)));
        }
        self.scenario.validate()?;
        self.oau.validate()?;
        self.wmmse.validate()?;
        if self.baselines.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.eval_sizes.is_empty() || self.eval_sizes.iter().any(|&(q, i)| q == 0 || i == 0) {
            return Err(Error::Config("eval sizes must be non-empty and positive".into()));
        }
        if self.eval_samples == 0 || self.eval_models.is_empty() {
            return Err(Error::Config(
                "need at least one evaluation sample and channel model".into(),
            ));
        }
        if self.needs_training() {
            ensure_valid(&self.net, self.scenario.ap_antennas)?;
            self.net.train.validate()?;
        }
        for p in [&self.data_dir, &self.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn needs_training(&self) -> bool {
        self.baselines.iter().any(|m| m.needs_training())
    }
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub training: Vec<(Method, TrainReport)>,
}

/// Training samples of `scenario`, from `data_dir` when given.
pub fn training_samples(scenario: &ScenarioConfig, data_dir: Option<&Path>) -> Result<Vec<CsiSample>> {
    if let Some(dir) = data_dir {
        return Ok(load_dataset(dir)?.train);
    }
    let labels = scenario.class_labels();
    let mut out = Vec::new();
    for (pi, spec) in scenario.periods.iter().enumerate() {
        if spec.sample_count == 0 {
            continue;
        }
        let label = labels.iter().position(|&m| m == spec.channel_model).unwrap_or(0);
        out.extend(gen_samples(scenario, pi, Split::Train, spec.sample_count, label)?);
    }
    Ok(out)
}

/// Test samples for one `(Q, I, model)` cell, drawn from streams disjoint
/// from the training periods.
pub fn eval_samples(
    scenario: &ScenarioConfig,
    aps: usize,
    users: usize,
    model: ChannelModel,
    count: usize,
) -> Result<Vec<CsiSample>> {
    let mut spec = PeriodSpec::new(aps, users, model, 0, count);
    if let Some(p) = scenario.periods.iter().find(|p| p.channel_model == model) {
        spec.rice_factor = p.rice_factor;
        spec.paths = p.paths;
    }
    let cell = ScenarioConfig {
        periods: vec![spec],
        seed: rng::derive_seed(scenario.seed, &[0xE7A1, aps as u64, users as u64, model as u64]),
        ..scenario.clone()
    };
    gen_samples(&cell, 0, Split::Test, count, 0)
}

/// Trains a network for `method` on `samples` with the spec's config.
pub fn train_method(
    spec: &ExperimentSpec,
    method: Method,
    samples: &[CsiSample],
) -> Result<(HGNetParams, TrainReport)> {
    let classes = samples.iter().map(|s| s.label).max().map_or(0, |l| l + 1);
    let mut cfg = match method {
        Method::HgnetNoG => spec.net.clone().without_module(),
        _ => spec.net.clone(),
    };
    if cfg.classes < classes {
        return Err(Error::Config(format!(
            "net has {} classes but the training data has {classes}",
            cfg.classes
        )));
    }
    cfg.input_size = samples.first().map(|s| (s.aps, s.users)).unwrap_or(cfg.input_size);
    let sc = &spec.scenario;
    let mut params = HGNetParams::new(cfg, sc.ap_antennas, sc.user_antennas, sc.p_max)?;
    let report = train(&mut params, samples)?;
    Ok((params, report))
}

fn checked(v: BeamTensor, p_max: f64, method: &str) -> Result<BeamTensor> {
    let r = max_power_ratio(&v, p_max);
    if r > 1.0 + FEASIBILITY_TOL || !v.all_finite() {
        return Err(Error::Numeric(format!(
            "{method} emitted an infeasible beamformer (power ratio {r})"
        )));
    }
    Ok(v)
}

fn stats(rates: &[f64]) -> (f64, f64) {
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = if rates.len() > 1 {
        rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Sum rates and mean wall time of `method` over `samples`.
pub fn evaluate<F>(samples: &[CsiSample], p_max: f64, name: &str, mut solve: F) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&CsiSample) -> Result<BeamTensor>,
{
    let mut rates = Vec::with_capacity(samples.len());
    let mut wall = 0.0;
    for s in samples {
        let t0 = Instant::now();
        let v = solve(s)?;
        wall += t0.elapsed().as_secs_f64();
        rates.push(sum_rate_sample(s, &checked(v, p_max, name)?)?);
    }
    Ok((rates, wall / samples.len() as f64))
}

fn row(
    method: &str,
    model: ChannelModel,
    q: usize,
    i: usize,
    h: Option<usize>,
    rates: &[f64],
    wall: f64,
    seed: u64,
) -> ResultRow {
    let (mean, std) = stats(rates);
    ResultRow {
        method: method.into(),
        channel_model: model.name().into(),
        aps: q,
        users: i,
        h,
        mean_sum_rate: mean,
        std_sum_rate: std,
        mean_wall_s: wall,
        samples: rates.len(),
        seed,
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let sc = &spec.scenario;
    let mut nets: Vec<(Method, HGNetParams)> = Vec::new();
    let mut training = Vec::new();
    if spec.needs_training() {
        let needs_data = spec
            .baselines
            .iter()
            .any(|&m| m == Method::HgnetNoG || (m == Method::Hgnet && spec.checkpoint.is_none()));
        let samples = if needs_data {
            training_samples(sc, spec.data_dir.as_deref())?
        } else {
            Vec::new()
        };
        for &m in spec.baselines.iter().filter(|m| m.needs_training()) {
            let params = match (&spec.checkpoint, m) {
                (Some(ckpt), Method::Hgnet) => load_checkpoint(ckpt)?,
                _ => {
                    let (p, report) = train_method(spec, m, &samples)?;
                    training.push((m, report));
                    if let Some(dir) = &spec.output {
                        std::fs::create_dir_all(dir)?;
                        save_checkpoint(&p, &dir.join(format!("{}.ckpt", m.name())))?;
                    }
                    p
                }
            };
            nets.push((m, params));
        }
    }

    let mut rows = Vec::new();
    for &(q, i) in &spec.eval_sizes {
        for &model in &spec.eval_models {
            let samples = eval_samples(sc, q, i, model, spec.eval_samples)?;
            for &m in &spec.baselines {
                let (rates, wall) = match m {
                    Method::Wmmse => evaluate(&samples, sc.p_max, m.name(), |s| {
                        Ok(wmmse_solve(s, sc.p_max, &spec.wmmse)?.v)
                    })?,
                    Method::Mrt => evaluate(&samples, sc.p_max, m.name(), |s| mrt_baseline(s, sc.p_max))?,
                    _ => {
                        let params = &nets.iter().find(|(k, _)| *k == m).expect("trained above").1;
                        evaluate(&samples, sc.p_max, m.name(), |s| infer(params, s))?
                    }
                };
                rows.push(row(m.name(), model, q, i, None, &rates, wall, sc.seed));
            }
            if let Some((_, params)) = nets.iter().find(|(k, _)| *k == Method::Hgnet) {
                for &h in &spec.h_sweep {
                    let cfg = OAUConfig {
                        iterations: h,
                        ..spec.oau.clone()
                    };
                    let t0 = Instant::now();
                    let adapted = adapt_all(params, &cfg, &samples)?;
                    let wall = t0.elapsed().as_secs_f64() / samples.len() as f64;
                    let mut rates = Vec::with_capacity(samples.len());
                    for ((v, _), s) in adapted.into_iter().zip(&samples) {
                        rates.push(sum_rate_sample(s, &checked(v, sc.p_max, "hgnet_oau")?)?);
                    }
                    rows.push(row("hgnet_oau", model, q, i, Some(h), &rates, wall, sc.seed));
                }
            }
        }
    }
    Ok(ExperimentOutcome { rows, training })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(baselines: Vec<Method>) -> ExperimentSpec {
        let mut scenario = ScenarioConfig {
            pathloss_exponent: 0.0,
            seed: 3,
            ..ScenarioConfig::default()
        };
        for m in [ChannelModel::Multipath, ChannelModel::Rayleigh] {
            scenario.periods.push(PeriodSpec::new(3, 3, m, 8, 0));
        }
        let mut net = HGNetConfig::uniform(3, 8, 2, 2, (3, 3));
        net.train.batch_size = 8;
        net.train.epochs = 2;
        ExperimentSpec {
            version: SPEC_VERSION,
            scenario,
            net,
            oau: OAUConfig::default(),
            wmmse: WmmseConfig::default(),
            baselines,
            eval_sizes: vec![(3, 3), (4, 4)],
            eval_models: vec![ChannelModel::Rician],
            eval_samples: 3,
            h_sweep: vec![0, 2],
            data_dir: None,
            checkpoint: None,
            output: None,
        }
    }

    #[test]
    fn baseline_only_path_trains_nothing() {
        let out = run_experiment(&spec(vec![Method::Wmmse, Method::Mrt])).unwrap();
        assert!(out.training.is_empty());
        assert_eq!(out.rows.len(), 4);
        assert!(out.rows.iter().all(|r| r.samples == 3 && r.h.is_none()));
    }

    #[test]
    fn full_run_is_deterministic_and_sweeps_h() {
        let s = spec(vec![Method::Hgnet, Method::HgnetNoG, Method::Mrt]);
        let a = run_experiment(&s).unwrap();
        let b = run_experiment(&s).unwrap();
        let strip = |rows: &[ResultRow]| rows.iter().map(ResultRow::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&a.rows), strip(&b.rows));
        assert_eq!(a.training.len(), 2);
        // per cell: 3 methods + 2 sweep values
        assert_eq!(a.rows.len(), 2 * 5);
        let hs: Vec<Option<usize>> = a.rows.iter().filter(|r| r.method == "hgnet_oau").map(|r| r.h).collect();
        assert_eq!(hs, vec![Some(0), Some(2), Some(0), Some(2)]);
    }

    #[test]
    fn spec_json_round_trip_and_errors() {
        let s = spec(vec![Method::Wmmse]);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(ExperimentSpec::from_json(&text).unwrap(), s);
        let mut bad = s.clone();
        bad.checkpoint = Some("/nonexistent/net.ckpt".into());
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = s;
        bad.eval_sizes.clear();
        assert!(bad.validate().is_err());
    }
}
