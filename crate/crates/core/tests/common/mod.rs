#![allow(dead_code)]

use hgbeam::channel::{gen_samples, ChannelModel, CsiSample, PeriodSpec, ScenarioConfig, Split};
use hgbeam::diffnum::{
    grad_check, Activation, BnMode, ConvGeometry, ProjectionMode, RunningStats, Tape, TensorC, TensorR, Var,
};
use hgbeam::hgnet::{input_transform, rate_loss_grad};
use hgbeam::metrics::BeamTensor;
use hgbeam::rng;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// One finite-difference comparison.
pub struct GradCase {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn normal(shape: &[usize], r: &mut rng::Rng) -> TensorR {
    TensorR::from_fn(shape, |_| StandardNormal.sample(r))
}

fn away_from_zero(shape: &[usize], r: &mut rng::Rng) -> TensorR {
    TensorR::from_fn(shape, |_| {
        let v: f64 = r.random_range(0.2..1.5);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn check<F>(name: &str, seed: u64, tolerance: f64, inputs: Vec<TensorR>, build: F) -> GradCase
where
    F: Fn(&mut Tape, &[Var]) -> hgbeam::Result<Var>,
{
    let report = grad_check(build, &inputs, tolerance, seed).unwrap_or_else(|e| panic!("{name}: {e}"));
    GradCase {
        name: format!("{name}#{seed}"),
        worst: report.worst(),
        tolerance,
    }
}

/// Same-size scenario with no path loss, so channel entries are O(1).
pub fn flat_scenario(q: usize, i: usize, models: &[ChannelModel], per_model: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        periods: models
            .iter()
            .map(|&m| PeriodSpec::new(q, i, m, per_model, per_model))
            .collect(),
        pathloss_exponent: 0.0,
        seed,
        ..ScenarioConfig::default()
    }
}

pub fn flat_samples(q: usize, i: usize, count: usize, seed: u64) -> Vec<CsiSample> {
    let sc = flat_scenario(q, i, &[ChannelModel::Rayleigh], count, seed);
    gen_samples(&sc, 0, Split::Train, count, 0).unwrap()
}

/// Mean negative sum rate of a `[B, Q, I, 2M]` beam batch, recorded as an
/// external node.
pub fn rate_node(tape: &mut Tape, beams: Var, samples: &[CsiSample]) -> hgbeam::Result<Var> {
    let value = tape.value(beams).clone();
    let (b, q, i, c2) = value.dims4()?;
    let m = c2 / 2;
    let per = q * i * c2;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(value.len());
    for (bi, s) in samples.iter().enumerate().take(b) {
        let v = BeamTensor::from_real_layout(q, i, m, &value.data()[bi * per..(bi + 1) * per])?;
        let (l, g) = rate_loss_grad(&s.h, &v, s.noise_power)?;
        loss += l / b as f64;
        grad.extend(g.to_real_layout().into_iter().map(|x| x / b as f64));
    }
    tape.external(beams, loss, TensorR::new(value.shape().to_vec(), grad)?)
}

/// Every differentiable op on a few seeded random inputs, plus the rate loss
/// and a conv/BN/residual/projection pipeline ending in it.
pub fn gradient_cases(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut r = rng::stream(seed, &[0x6C]);
        let r = &mut r;
        let tol = OP_TOLERANCE;

        out.push(check(
            "conv2d_same",
            seed,
            tol,
            vec![normal(&[2, 4, 3, 3], r), normal(&[3, 3, 3, 2], r), normal(&[2], r)],
            |t, v| t.conv2d(v[0], v[1], v[2], ConvGeometry::same3()),
        ));
        out.push(check(
            "conv2d_strided",
            seed,
            tol,
            vec![normal(&[1, 5, 4, 2], r), normal(&[3, 2, 2, 3], r), normal(&[3], r)],
            |t, v| {
                t.conv2d(
                    v[0],
                    v[1],
                    v[2],
                    ConvGeometry {
                        stride: (2, 1),
                        padding: (1, 0),
                    },
                )
            },
        ));
        out.push(check(
            "batchnorm_train",
            seed,
            tol,
            vec![normal(&[3, 2, 2, 3], r), normal(&[3], r), normal(&[3], r)],
            |t, v| {
                Ok(
                    t.batchnorm(v[0], v[1], v[2], BnMode::Train, &RunningStats::new(3), 1e-5)?
                        .0,
                )
            },
        ));
        let running = RunningStats {
            mean: vec![0.3, -0.2, 0.1],
            var: vec![0.8, 1.7, 0.5],
            batches: 1,
        };
        out.push(check(
            "batchnorm_infer",
            seed,
            tol,
            vec![normal(&[2, 2, 2, 3], r), normal(&[3], r), normal(&[3], r)],
            move |t, v| Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Infer, &running, 1e-5)?.0),
        ));
        out.push(check(
            "relu",
            seed,
            tol,
            vec![away_from_zero(&[1, 2, 2, 3], r)],
            |t, v| t.activation(v[0], Activation::Relu),
        ));
        out.push(check("tanh", seed, tol, vec![normal(&[1, 2, 2, 3], r)], |t, v| {
            t.activation(v[0], Activation::Tanh)
        }));
        // the reversal is not a derivative of the forward map; lambda = -1 is
        // the pass-through whose tape gradient must match finite differences
        out.push(check("grl_passthrough", seed, tol, vec![normal(&[2, 3], r)], |t, v| {
            t.grl(v[0], -1.0)
        }));
        out.push(check("gap", seed, tol, vec![normal(&[2, 3, 2, 4], r)], |t, v| {
            t.gap(v[0])
        }));
        out.push(check(
            "fc",
            seed,
            tol,
            vec![normal(&[3, 4], r), normal(&[2, 4], r), normal(&[2], r)],
            |t, v| t.fc(v[0], v[1], v[2]),
        ));
        let mask = TensorR::from_fn(&[2, 3], |k| if k % 3 == 1 { 0.0 } else { 1.0 });
        out.push(check(
            "channel_mask",
            seed,
            tol,
            vec![normal(&[2, 2, 2, 3], r)],
            move |t, v| t.channel_mask(v[0], mask.clone()),
        ));
        let mix = normal(&[4, 2], r);
        out.push(check(
            "channel_mix",
            seed,
            tol,
            vec![normal(&[1, 2, 2, 4], r)],
            move |t, v| t.channel_mix(v[0], mix.clone()),
        ));
        out.push(check(
            "add",
            seed,
            tol,
            vec![normal(&[1, 2, 2, 2], r), normal(&[1, 2, 2, 2], r)],
            |t, v| t.add(v[0], v[1]),
        ));
        out.push(check(
            "weighted_sum",
            seed,
            tol,
            vec![normal(&[3, 4], r), normal(&[1, 2, 2, 4], r)],
            |t, v| {
                let a = t.softmax_xent(v[0], &[0, 3, 1])?;
                let b = t.entropy(v[1])?;
                t.weighted_sum(&[(a, 0.7), (b, -1.3)])
            },
        ));
        out.push(check("softmax_xent", seed, tol, vec![normal(&[3, 4], r)], |t, v| {
            t.softmax_xent(v[0], &[0, 2, 3])
        }));
        for mode in [ProjectionMode::Exact, ProjectionMode::PaperLiteral] {
            out.push(check(
                &format!("power_project_{mode:?}"),
                seed,
                tol,
                vec![normal(&[2, 3, 2, 4], r)],
                move |t, v| t.power_project(v[0], 6.0, mode),
            ));
        }
        out.push(check(
            "entropy",
            seed,
            tol,
            vec![away_from_zero(&[1, 2, 3, 4], r)],
            |t, v| t.entropy(v[0]),
        ));

        let samples = flat_samples(3, 2, 2, seed);
        let beams = normal(&[2, 3, 2, 4], r);
        let s2 = samples.clone();
        out.push(check("rate_loss", seed, tol, vec![beams], move |t, v| {
            rate_node(t, v[0], &s2)
        }));

        out.push(end_to_end(seed, &samples, r));
    }
    out
}

fn end_to_end(seed: u64, samples: &[CsiSample], r: &mut rng::Rng) -> GradCase {
    let (q, i, m, n) = (3, 2, 2, 2);
    let mut x = Vec::new();
    for s in samples {
        x.extend_from_slice(input_transform(&s.h, m, n).unwrap().data());
    }
    let x = TensorR::new(vec![samples.len(), q, i, m * n], x).unwrap();
    let width = 3;
    let scale = |t: TensorR, s: f64| TensorR::from_fn(t.shape(), |k| t.data()[k] * s);
    let inputs = vec![
        x,
        scale(normal(&[3, 3, m * n, width], r), 0.4),
        normal(&[width], r),
        normal(&[width], r),
        normal(&[width], r),
        scale(normal(&[3, 3, width, 2 * m], r), 0.4),
        normal(&[2 * m], r),
    ];
    let samples = samples.to_vec();
    check("end_to_end_rate", seed, END_TO_END_TOLERANCE, inputs, move |t, v| {
        let c1 = t.conv2d(v[0], v[1], v[2], ConvGeometry::same3())?;
        let (b1, _) = t.batchnorm(c1, v[3], v[4], BnMode::Train, &RunningStats::new(width), 1e-5)?;
        let a1 = t.activation(b1, Activation::Relu)?;
        let c2 = t.conv2d(a1, v[5], v[6], ConvGeometry::same3())?;
        let sum = t.add(c2, v[0])?;
        let y = t.activation(sum, Activation::Tanh)?;
        let p = t.power_project(y, 1.0, ProjectionMode::Exact)?;
        rate_node(t, p, &samples)
    })
}

/// Inclusion probabilities of successive sampling without replacement with
/// selection weights `p`, by enumerating every ordered draw.
pub fn enumerate_inclusion(p: &[f64], k: usize) -> Vec<f64> {
    fn walk(p: &[f64], k: usize, taken: &mut Vec<usize>, prob: f64, out: &mut [f64]) {
        if taken.len() == k {
            for &t in taken.iter() {
                out[t] += prob;
            }
            return;
        }
        let rest: f64 = (0..p.len()).filter(|j| !taken.contains(j)).map(|j| p[j]).sum();
        for j in 0..p.len() {
            if taken.contains(&j) {
                continue;
            }
            taken.push(j);
            walk(p, k, taken, prob * p[j] / rest, out);
            taken.pop();
        }
    }
    let mut out = vec![0.0; p.len()];
    walk(p, k, &mut Vec::new(), 1.0, &mut out);
    out
}

/// Scalar single-user link `h`, `v` with the given noise.
pub fn siso_sample(h: Complex64, noise: f64) -> CsiSample {
    CsiSample::new(TensorC::new(vec![1, 1], vec![h]).unwrap(), 1, 1, 1, 1)
        .unwrap()
        .with_noise(noise)
}
