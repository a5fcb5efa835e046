//! Weighted-MMSE sum-rate baseline under per-AP power budgets, plus a
//! maximum-ratio reference.
//!
//! Each outer iteration refreshes the MMSE receive filters `u_i`, the MSE
//! weights `w_i = 1 / e_i`, and then minimizes the convex weighted-MSE
//! surrogate over the beams. The beam step runs block-coordinate sweeps over
//! APs; AP `q`'s block solves `(A_qq + mu_q I) v_i^q = c_i^q` with its own
//! multiplier `mu_q`, found by bisection so the AP meets its budget.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::CsiSample;
use crate::linalg::{chol, dominant_right_singular, CMat, CVec};
use crate::metrics::{project_power, sum_rate_sample, user_channel, BeamTensor, ProjectionMode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmmseConfig {
    pub max_iters: usize,
    /// Relative sum-rate change that ends the outer loop.
    pub rate_tol: f64,
    /// Relative power tolerance of the multiplier bisection.
    pub bisection_tol: f64,
    pub bisection_max_steps: usize,
    /// Block-coordinate sweeps over APs per beam update.
    pub inner_sweeps: usize,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rate_tol: 1e-5,
            bisection_tol: 1e-9,
            bisection_max_steps: 200,
            inner_sweeps: 8,
        }
    }
}

impl WmmseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rate_tol > 0.0) || !(self.bisection_tol > 0.0) {
            return Err(Error::Config(
                "WMMSE needs max_iters >= 1 and positive tolerances".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WmmseSolution {
    pub v: BeamTensor,
    /// Sum rate of the initial point followed by one entry per iteration.
    pub trace: Vec<f64>,
}

impl WmmseSolution {
    pub fn sum_rate(&self) -> f64 {
        *self.trace.last().expect("trace has the initial point")
    }
}

/// Beams along each user's dominant right singular direction, scaled to an
/// equal share of the network budget and then projected per AP.
pub fn mrt_baseline(sample: &CsiSample, p_max: f64) -> Result<BeamTensor> {
    let (q_n, i_n, m) = (sample.aps, sample.users, sample.ap_antennas);
    let mut v = BeamTensor::zeros(q_n, i_n, m);
    let share = (q_n as f64 * p_max / i_n as f64).sqrt();
    for i in 0..i_n {
        let h_i = user_channel(&sample.h, i, sample.user_antennas)?;
        let d = dominant_right_singular(&h_i) * Complex64::new(share, 0.0);
        v.set_user_vector(i, &d);
    }
    Ok(project_power(&v, p_max, ProjectionMode::Exact))
}

/// Solution of one AP block for a given multiplier, via the eigenbasis of `A_qq`.
struct ApBlock {
    eig_vals: Vec<f64>,
    eig_vecs: CMat,
    /// `E^H c_i` per user.
    rotated: Vec<CVec>,
}

impl ApBlock {
    fn new(a_qq: &CMat, c: Vec<CVec>) -> Self {
        let eig = SymmetricEigen::new(a_qq.clone());
        let eig_vals = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
        let rotated = c.iter().map(|ci| eig.eigenvectors.adjoint() * ci).collect();
        Self {
            eig_vals,
            eig_vecs: eig.eigenvectors,
            rotated,
        }
    }

    fn coeff(&self, k: usize, mu: f64) -> f64 {
        let d = self.eig_vals[k] + mu;
        if d > 1e-300 {
            1.0 / d
        } else {
            0.0
        }
    }

    fn power(&self, mu: f64) -> f64 {
        let mut p = 0.0;
        for r in &self.rotated {
            for (k, z) in r.iter().enumerate() {
                let s = self.coeff(k, mu);
                p += z.norm_sqr() * s * s;
            }
        }
        p
    }

    fn beams(&self, mu: f64) -> Vec<CVec> {
        self.rotated
            .iter()
            .map(|r| {
                let scaled = CVec::from_iterator(r.len(), r.iter().enumerate().map(|(k, z)| z * self.coeff(k, mu)));
                &self.eig_vecs * scaled
            })
            .collect()
    }

    /// Smallest multiplier (up to tolerance, on the feasible side) meeting the budget.
    fn multiplier(&self, p_max: f64, cfg: &WmmseConfig) -> f64 {
        // with a (near-)singular A_qq and an unreachable component the mu = 0
        // solution is unbounded; treat tiny eigenvalues with nonzero load as infeasible
        let singular_load = self.rotated.iter().any(|r| {
            r.iter()
                .enumerate()
                .any(|(k, z)| self.eig_vals[k] <= 1e-14 && z.norm_sqr() > 0.0)
        });
        if !singular_load && self.power(0.0) <= p_max {
            return 0.0;
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut steps = 0;
        while self.power(hi) > p_max && steps < cfg.bisection_max_steps {
            lo = hi;
            hi *= 2.0;
            steps += 1;
        }
        for _ in 0..cfg.bisection_max_steps {
            let mid = 0.5 * (lo + hi);
            let p = self.power(mid);
            if p > p_max {
                lo = mid;
            } else {
                hi = mid;
                if p >= p_max * (1.0 - cfg.bisection_tol) {
                    break;
                }
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        hi
    }
}

fn finite(v: &BeamTensor, iteration: usize) -> Result<()> {
    if v.all_finite() {
        Ok(())
    } else {
        Err(Error::NumericAt {
            iteration,
            message: "non-finite beamformer".into(),
        })
    }
}

pub fn wmmse_solve(sample: &CsiSample, p_max: f64, cfg: &WmmseConfig) -> Result<WmmseSolution> {
    cfg.validate()?;
    if !(p_max > 0.0) || !(sample.noise_power > 0.0) {
        return Err(Error::arg("p_max and noise power must be > 0"));
    }
    if !sample.h.all_finite() {
        return Err(Error::Numeric("channel has non-finite entries".into()));
    }
    let (q_n, i_n, m, n) = (sample.aps, sample.users, sample.ap_antennas, sample.user_antennas);
    let noise = sample.noise_power;
    if sample.h.data().iter().all(|z| z.norm_sqr() == 0.0) {
        return Ok(WmmseSolution {
            v: BeamTensor::zeros(q_n, i_n, m),
            trace: vec![0.0],
        });
    }
    let channels: Vec<CMat> = (0..i_n).map(|i| user_channel(&sample.h, i, n)).collect::<Result<_>>()?;
    let adjoints: Vec<CMat> = channels.iter().map(|h| h.adjoint()).collect();
    let mut v = mrt_baseline(sample, p_max)?;
    let mut trace = vec![sum_rate_sample(sample, &v)?];

    for iter in 1..=cfg.max_iters {
        let beams: Vec<CVec> = (0..i_n).map(|j| v.user_vector(j)).collect();
        let dim = q_n * m;
        let mut a = CMat::zeros(dim, dim);
        let mut b: Vec<CVec> = Vec::with_capacity(i_n);
        for i in 0..i_n {
            let recv: Vec<CVec> = beams.iter().map(|vj| &channels[i] * vj).collect();
            let mut t = CMat::identity(n, n) * Complex64::new(noise, 0.0);
            for r in &recv {
                t += r * r.adjoint();
            }
            let u = chol(&t)
                .map_err(|e| Error::NumericAt {
                    iteration: iter,
                    message: e.to_string(),
                })?
                .solve(&recv[i]);
            let e = (Complex64::new(1.0, 0.0) - (u.adjoint() * &recv[i])[(0, 0)]).re;
            let w = 1.0 / e.max(1e-300);
            let hu = &adjoints[i] * &u;
            a += &hu * hu.adjoint() * Complex64::new(w, 0.0);
            b.push(hu * Complex64::new(w, 0.0));
        }

        for _ in 0..cfg.inner_sweeps {
            for q in 0..q_n {
                let a_qq = a.view((q * m, q * m), (m, m)).into_owned();
                let c: Vec<CVec> = (0..i_n)
                    .map(|i| {
                        let vi = v.user_vector(i);
                        let mut ci = b[i].rows(q * m, m).into_owned();
                        let full = a.rows(q * m, m) * &vi;
                        let own = &a_qq * vi.rows(q * m, m);
                        ci -= full - own;
                        ci
                    })
                    .collect();
                let block = ApBlock::new(&a_qq, c);
                let mu = block.multiplier(p_max, cfg);
                for (i, vq) in block.beams(mu).into_iter().enumerate() {
                    v.block_mut(q, i).copy_from_slice(vq.as_slice());
                }
            }
        }
        finite(&v, iter)?;
        let rate = sum_rate_sample(sample, &v).map_err(|e| Error::NumericAt {
            iteration: iter,
            message: e.to_string(),
        })?;
        let prev = *trace.last().unwrap();
        trace.push(rate);
        if (rate - prev).abs() <= cfg.rate_tol * prev.abs().max(1e-12) {
            break;
        }
    }
    Ok(WmmseSolution { v, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_sample, ChannelModel, PeriodSpec, ScenarioConfig, Split};
    use crate::diffnum::TensorC;
    use crate::metrics::max_power_ratio;

    fn sample(q: usize, i: usize, model: ChannelModel, seed: u64) -> CsiSample {
        let sc = ScenarioConfig {
            periods: vec![PeriodSpec::new(q, i, model, 1, 0)],
            pathloss_exponent: 0.0,
            seed,
            ..ScenarioConfig::default()
        };
        gen_sample(&sc, 0, &sc.periods[0], Split::Train, 0, 0).unwrap()
    }

    #[test]
    fn zero_channel_terminates_with_zero_rate() {
        let s = CsiSample::new(TensorC::zeros(&[4, 4]), 2, 2, 2, 2).unwrap();
        let sol = wmmse_solve(&s, 1.0, &WmmseConfig::default()).unwrap();
        assert_eq!(sol.trace, vec![0.0]);
        assert_eq!(sol.v.total_power(), 0.0);
        assert_eq!(mrt_baseline(&s, 1.0).unwrap().total_power(), 0.0);
    }

    #[test]
    fn trace_is_monotone_and_feasible() {
        for (k, model) in ChannelModel::ALL.iter().enumerate() {
            let s = sample(4, 4, *model, 30 + k as u64);
            let sol = wmmse_solve(&s, 1.0, &WmmseConfig::default()).unwrap();
            for w in sol.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-6, "{model}: {:?}", w);
            }
            assert!(max_power_ratio(&sol.v, 1.0) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn single_user_single_ap_matches_mrt() {
        let s = sample(1, 1, ChannelModel::Rayleigh, 77);
        let sol = wmmse_solve(&s, 1.0, &WmmseConfig::default()).unwrap();
        let h = user_channel(&s.h, 0, 2).unwrap();
        let d = dominant_right_singular(&h);
        let v = sol.v.user_vector(0);
        let cos = (d.adjoint() * &v)[(0, 0)].norm() / v.norm();
        assert!(cos > 0.999, "cos {cos}");
        assert!((v.norm_squared() - 1.0).abs() < 1e-6);
    }
}
