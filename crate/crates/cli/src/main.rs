use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use hgbeam::channel::{gen_dataset, load_dataset, CsiSample};
use hgbeam::harness::{
    bench_timing, eval_samples, hardware_descriptor, mmd_diagnostic, render_report, run_experiment, train_method,
    ExperimentSpec, Method, ReportFormat,
};
use hgbeam::hgnet::{infer, load_checkpoint, save_checkpoint, HGNetParams};
use hgbeam::metrics::MmdConfig;
use hgbeam::oau::{adapt, OAUConfig};
use hgbeam::wmmse::{mrt_baseline, wmmse_solve};

#[derive(Parser)]
#[command(name = "hgbeam", version, about = "Cell-free MIMO beamforming laboratory")]
struct Cli {
    /// Overrides the scenario and training seeds of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output format of tables printed to stdout.
    #[arg(long, global = true, default_value = "csv")]
    format: ReportFormat,
    /// Worker threads for data generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario's train/test channel sets into a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train HGNet on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the configured methods with a trained checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated QxI sizes; defaults to the config's.
        #[arg(long, value_delimiter = ',', value_parser = parse_size)]
        sizes: Vec<(usize, usize)>,
    },
    /// Sweep the number of online adaptation iterations.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "H-sweep", value_delimiter = ',', default_value = "0,5,10,15,20")]
        h_sweep: Vec<usize>,
    },
    /// Per-sample latency of every method at the config's evaluation sizes.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Trained network to time; trains one from the config when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// Per-layer domain-gap diagnostic of a trained network.
    MmdDiag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (q, i) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected QxI, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    let (q, i) = (parse(q)?, parse(i)?);
    if q == 0 || i == 0 {
        return Err(format!("{s:?}: sizes must be positive"));
    }
    Ok((q, i))
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        spec.scenario.seed = s;
        spec.net.train.seed = s;
    }
    Ok(spec)
}

fn table<T: Serialize>(rows: &[T], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows)? + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
    })
}

#[derive(Serialize)]
struct ManifestRow {
    period: usize,
    split: String,
    channel_model: String,
    aps: usize,
    users: usize,
    count: usize,
    file: String,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    sum_rate: f64,
    disc_loss: f64,
}

#[derive(Serialize)]
struct GapRow {
    layer: usize,
    source_gap: f64,
    samples_per_class: usize,
}

#[derive(Serialize)]
struct TimingRow {
    method: String,
    aps: usize,
    users: usize,
    instances: usize,
    repetitions: usize,
    median_s: f64,
    mean_s: f64,
    std_s: f64,
    min_s: f64,
    max_s: f64,
    hardware: String,
}

fn trained_net(spec: &ExperimentSpec, ckpt: Option<&Path>) -> Result<HGNetParams> {
    if let Some(p) = ckpt {
        return Ok(load_checkpoint(p)?);
    }
    let samples = hgbeam::harness::training_samples(&spec.scenario, spec.data_dir.as_deref())?;
    Ok(train_method(spec, Method::Hgnet, &samples)?.0)
}

fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let format = cli.format;
    match cli.command {
        Command::GenData { config, out } => {
            let spec = load_spec(&config, cli.seed)?;
            let manifest = gen_dataset(&spec.scenario, &out)?;
            let rows: Vec<ManifestRow> = manifest
                .files
                .iter()
                .map(|f| ManifestRow {
                    period: f.period,
                    split: format!("{:?}", f.split).to_lowercase(),
                    channel_model: f.channel_model.name().into(),
                    aps: f.aps,
                    users: f.users,
                    count: f.count,
                    file: f.file.clone(),
                })
                .collect();
            table(&rows, format)
        }
        Command::Train { config, data, out } => {
            let spec = load_spec(&config, cli.seed)?;
            let dataset = load_dataset(&data)?;
            if dataset.train.is_empty() {
                bail!("{} has no training samples", data.display());
            }
            let (params, report) = train_method(&spec, Method::Hgnet, &dataset.train)?;
            save_checkpoint(&params, &out)?;
            let rows: Vec<EpochRow> = (0..report.epoch_loss.len())
                .map(|e| EpochRow {
                    epoch: e,
                    loss: report.epoch_loss[e],
                    sum_rate: report.epoch_rate[e],
                    disc_loss: report.epoch_disc[e],
                })
                .collect();
            table(&rows, format)
        }
        Command::Eval { config, ckpt, sizes } => {
            let mut spec = load_spec(&config, cli.seed)?;
            spec.checkpoint = Some(ckpt);
            spec.h_sweep.clear();
            if !sizes.is_empty() {
                spec.eval_sizes = sizes;
            }
            let out = run_experiment(&spec)?;
            Ok(render_report(&out.rows, format)?)
        }
        Command::Adapt { config, ckpt, h_sweep } => {
            let mut spec = load_spec(&config, cli.seed)?;
            spec.checkpoint = Some(ckpt);
            spec.baselines = vec![Method::Hgnet];
            spec.h_sweep = h_sweep;
            let out = run_experiment(&spec)?;
            Ok(render_report(&out.rows, format)?)
        }
        Command::Bench {
            config,
            ckpt,
            repetitions,
        } => {
            let spec = load_spec(&config, cli.seed)?;
            let sc = &spec.scenario;
            let net = if spec.needs_training() {
                Some(trained_net(&spec, ckpt.as_deref().or(spec.checkpoint.as_deref()))?)
            } else {
                None
            };
            let hw = hardware_descriptor();
            let mut rows = Vec::new();
            for &(q, i) in &spec.eval_sizes {
                let model = spec.eval_models[0];
                let samples: Vec<CsiSample> = eval_samples(sc, q, i, model, spec.eval_samples)?;
                let mut timed = |name: &str, stats: hgbeam::harness::TimingStats| {
                    rows.push(TimingRow {
                        method: name.into(),
                        aps: q,
                        users: i,
                        instances: stats.instances,
                        repetitions: stats.repetitions,
                        median_s: stats.median_s,
                        mean_s: stats.mean_s,
                        std_s: stats.std_s,
                        min_s: stats.min_s,
                        max_s: stats.max_s,
                        hardware: hw.clone(),
                    })
                };
                for &m in &spec.baselines {
                    let stats = match m {
                        Method::Wmmse => bench_timing(
                            m.name(),
                            |s| wmmse_solve(s, sc.p_max, &spec.wmmse).map(drop),
                            &samples,
                            repetitions,
                        )?,
                        Method::Mrt => {
                            bench_timing(m.name(), |s| mrt_baseline(s, sc.p_max).map(drop), &samples, repetitions)?
                        }
                        Method::Hgnet | Method::HgnetNoG => {
                            let p = net.as_ref().expect("trained above");
                            bench_timing(m.name(), |s| infer(p, s).map(drop), &samples, repetitions)?
                        }
                    };
                    timed(m.name(), stats);
                }
                if let Some(p) = &net {
                    for &h in &spec.h_sweep {
                        let cfg = OAUConfig {
                            iterations: h,
                            ..spec.oau.clone()
                        };
                        let stats = bench_timing("hgnet_oau", |s| adapt(p, &cfg, s).map(drop), &samples, repetitions)?;
                        timed(&format!("hgnet_oau_h{h}"), stats);
                    }
                }
            }
            table(&rows, format)
        }
        Command::MmdDiag { ckpt, data, per_class } => {
            let params = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let samples = if dataset.test.is_empty() {
                &dataset.train
            } else {
                &dataset.test
            };
            let (q, i) = params.config.input_size;
            let same_size: Vec<CsiSample> = samples.iter().filter(|s| (s.aps, s.users) == (q, i)).cloned().collect();
            let pool = if same_size.is_empty() {
                samples.clone()
            } else {
                same_size
            };
            let report = mmd_diagnostic(&params, &pool, per_class, &MmdConfig::default())?;
            let rows: Vec<GapRow> = report
                .layer_gaps
                .iter()
                .enumerate()
                .map(|(l, &g)| GapRow {
                    layer: l + 1,
                    source_gap: g,
                    samples_per_class: report.samples_per_class,
                })
                .collect();
            table(&rows, format)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
