use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::geometry::{pathloss_beta, place_nodes, steering_vector};
use super::{ChannelModel, CsiSample, PeriodSpec, ScenarioConfig, Split};
use crate::diffnum::TensorC;
use crate::rng::{self, Rng as StreamRng};
use crate::Result;

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn uniform_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2)
}

/// `out += weight * a_r(arrival) a_t(departure)^H`.
fn add_outer(out: &mut [Complex64], m: usize, weight: Complex64, arrival: f64, departure: f64, n: usize) {
    let ar = steering_vector(arrival, n);
    let at = steering_vector(departure, m);
    for (r, a) in ar.data().iter().enumerate() {
        for (col, t) in at.data().iter().enumerate() {
            out[r * m + col] += weight * a * t.conj();
        }
    }
}

/// Geometric multipath link `N x M`: `beta * sum_p g_p/sqrt(P) a_r(phi_p) a_t(psi_p)^H`.
pub fn gen_multipath<R: Rng + ?Sized>(beta: f64, n: usize, m: usize, paths: usize, rng: &mut R) -> TensorC {
    let mut out = vec![Complex64::new(0.0, 0.0); n * m];
    let norm = 1.0 / (paths as f64).sqrt();
    for _ in 0..paths {
        let g = complex_normal(rng);
        let arrival = uniform_angle(rng);
        let departure = uniform_angle(rng);
        add_outer(&mut out, m, g * (beta * norm), arrival, departure, n);
    }
    TensorC::new(vec![n, m], out).expect("link shape")
}

/// Rician link `N x M` with Rice factor `eps` (zero gives Rayleigh fading).
pub fn gen_rician<R: Rng + ?Sized>(beta: f64, n: usize, m: usize, eps: f64, rng: &mut R) -> TensorC {
    let (los_w, nlos_w) = if eps.is_infinite() {
        (1.0, 0.0)
    } else {
        ((eps / (eps + 1.0)).sqrt(), (1.0 / (eps + 1.0)).sqrt())
    };
    let arrival = uniform_angle(rng);
    let departure = uniform_angle(rng);
    let mut out: Vec<Complex64> = (0..n * m).map(|_| complex_normal(rng) * (beta * nlos_w)).collect();
    if los_w > 0.0 {
        add_outer(&mut out, m, Complex64::new(beta * los_w, 0.0), arrival, departure, n);
    }
    TensorC::new(vec![n, m], out).expect("link shape")
}

/// Independent stream for sample `index` of `split` in `period`.
pub fn sample_stream(seed: u64, period: usize, split: Split, index: usize) -> StreamRng {
    rng::stream(seed, &[period as u64, split as u64, index as u64])
}

/// Draws one full `(I*N) x (Q*M)` channel for a period.
pub fn gen_sample(
    scenario: &ScenarioConfig,
    period: usize,
    spec: &PeriodSpec,
    split: Split,
    index: usize,
    label: usize,
) -> Result<CsiSample> {
    let (q_n, i_n) = (spec.aps, spec.users);
    let (m, n) = (scenario.ap_antennas, scenario.user_antennas);
    let mut r = sample_stream(scenario.seed, period, split, index);
    let geo = place_nodes(q_n, i_n, scenario.area_side, &mut r);
    let cols = q_n * m;
    let mut h = vec![Complex64::new(0.0, 0.0); i_n * n * cols];
    for i in 0..i_n {
        for q in 0..q_n {
            let beta = pathloss_beta(geo.distance(q, i), scenario.pathloss_exponent);
            let link = match spec.channel_model {
                ChannelModel::Multipath => gen_multipath(beta, n, m, spec.paths, &mut r),
                ChannelModel::Rayleigh | ChannelModel::Rician => gen_rician(beta, n, m, spec.effective_rice(), &mut r),
            };
            for rr in 0..n {
                let dst = (i * n + rr) * cols + q * m;
                h[dst..dst + m].copy_from_slice(&link.data()[rr * m..(rr + 1) * m]);
            }
        }
    }
    let mut s = CsiSample::new(TensorC::new(vec![i_n * n, cols], h)?, q_n, i_n, m, n)?
        .with_noise(scenario.noise_power)
        .with_label(label);
    s.period_index = period;
    Ok(s)
}

/// Generates `count` samples in parallel; output is identical to serial generation.
pub fn gen_samples(
    scenario: &ScenarioConfig,
    period: usize,
    split: Split,
    count: usize,
    label: usize,
) -> Result<Vec<CsiSample>> {
    let spec = &scenario.periods[period];
    (0..count)
        .into_par_iter()
        .map(|k| gen_sample(scenario, period, spec, split, k, label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{singular_values, to_mat};

    #[test]
    fn single_path_is_rank_one() {
        let h = gen_multipath(1.0, 3, 4, 1, &mut rng::stream(1, &[]));
        let s = singular_values(&to_mat(&h).unwrap());
        assert!(s[1] < 1e-12 * s[0]);
    }

    #[test]
    fn zero_fading_zero_matrix() {
        let h = gen_multipath(0.0, 2, 2, 6, &mut rng::stream(1, &[]));
        assert!(h.data().iter().all(|z| z.norm() == 0.0));
        let h = gen_rician(0.0, 2, 2, 2.0, &mut rng::stream(1, &[]));
        assert!(h.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn multipath_second_moment() {
        let (n, m, draws) = (2, 3, 100_000);
        let mut r = rng::stream(21, &[]);
        let vals: Vec<f64> = (0..draws)
            .map(|_| gen_multipath(1.0, n, m, 6, &mut r).frobenius_sq())
            .collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let sigma = (var / draws as f64).sqrt();
        assert!((mean - (n * m) as f64).abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn rayleigh_entry_variance_is_one() {
        let draws = 100_000;
        let mut r = rng::stream(22, &[]);
        let vals: Vec<f64> = (0..draws)
            .map(|_| gen_rician(1.0, 1, 1, 0.0, &mut r).data()[0].norm_sqr())
            .collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        assert!((mean - 1.0).abs() < 3.0 * (var / draws as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn rice_3db_los_fraction() {
        let eps = super::super::rice_3db();
        assert!((eps - 1.995).abs() < 1e-3);
        assert!((eps / (eps + 1.0) - 0.666).abs() < 1e-3);
    }

    #[test]
    fn huge_rice_factor_is_rank_one() {
        let h = gen_rician(1.0, 3, 4, 1e9, &mut rng::stream(4, &[]));
        let s = singular_values(&to_mat(&h).unwrap());
        assert!(s[1] < 1e-3 * s[0]);
    }

    #[test]
    fn sample_block_layout_and_determinism() {
        let mut sc = ScenarioConfig::default();
        sc.periods.push(PeriodSpec::new(3, 2, ChannelModel::Rayleigh, 2, 0));
        let a = gen_sample(&sc, 0, &sc.periods[0], Split::Train, 1, 0).unwrap();
        let b = gen_sample(&sc, 0, &sc.periods[0], Split::Train, 1, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.h.shape(), &[4, 6]);
        let par = gen_samples(&sc, 0, Split::Train, 2, 0).unwrap();
        assert_eq!(par[1], a);
    }
}
