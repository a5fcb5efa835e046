//! Exact sum-rate evaluation, per-AP power accounting and projection, and
//! kernel two-sample domain-gap estimators.

mod mmd;
mod rate;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffnum::TensorC;
use crate::linalg::CVec;
use crate::{Error, Result};

pub use crate::diffnum::ProjectionMode;
pub use mmd::{gmmd, rbf_mmd, source_gap_diag, Bandwidth, Estimator, MmdConfig};
pub use rate::{rate_loss_grad, sum_rate, sum_rate_sample, user_channel, user_rate};

/// Complex beamformers `Q x I x M`; entry `(q, i, :)` is AP `q`'s beam for user `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamTensor {
    v: TensorC,
}

impl BeamTensor {
    pub fn zeros(aps: usize, users: usize, antennas: usize) -> Self {
        Self {
            v: TensorC::zeros(&[aps, users, antennas]),
        }
    }

    pub fn from_tensor(v: TensorC) -> Result<Self> {
        if v.shape().len() != 3 {
            return Err(Error::shape(format!(
                "beam tensor must be Q x I x M, got {:?}",
                v.shape()
            )));
        }
        Ok(Self { v })
    }

    /// Builds from the real layout `Q x I x 2M` (real parts then imaginary parts).
    pub fn from_real_layout(aps: usize, users: usize, antennas: usize, real: &[f64]) -> Result<Self> {
        if real.len() != aps * users * 2 * antennas {
            return Err(Error::shape("real beam layout length mismatch"));
        }
        let data = real
            .chunks_exact(2 * antennas)
            .flat_map(|row| (0..antennas).map(move |k| Complex64::new(row[k], row[antennas + k])))
            .collect();
        Ok(Self {
            v: TensorC::new(vec![aps, users, antennas], data)?,
        })
    }

    pub fn to_real_layout(&self) -> Vec<f64> {
        let m = self.antennas();
        self.v
            .data()
            .chunks_exact(m)
            .flat_map(|row| {
                row.iter()
                    .map(|z| z.re)
                    .chain(row.iter().map(|z| z.im))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn aps(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn users(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn antennas(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn tensor(&self) -> &TensorC {
        &self.v
    }

    pub fn get(&self, q: usize, i: usize, m: usize) -> Complex64 {
        self.v.data()[(q * self.users() + i) * self.antennas() + m]
    }

    pub fn set(&mut self, q: usize, i: usize, m: usize, z: Complex64) {
        let (u, a) = (self.users(), self.antennas());
        self.v.data_mut()[(q * u + i) * a + m] = z;
    }

    /// AP `q`'s block for user `i`.
    pub fn block(&self, q: usize, i: usize) -> &[Complex64] {
        let a = self.antennas();
        let start = (q * self.users() + i) * a;
        &self.v.data()[start..start + a]
    }

    pub fn block_mut(&mut self, q: usize, i: usize) -> &mut [Complex64] {
        let (u, a) = (self.users(), self.antennas());
        let start = (q * u + i) * a;
        &mut self.v.data_mut()[start..start + a]
    }

    /// Stacked beam of user `i` over all APs (`Q*M` entries).
    pub fn user_vector(&self, i: usize) -> CVec {
        let (q_n, a) = (self.aps(), self.antennas());
        CVec::from_iterator(q_n * a, (0..q_n).flat_map(|q| self.block(q, i).iter().copied()))
    }

    pub fn set_user_vector(&mut self, i: usize, v: &CVec) {
        let a = self.antennas();
        for q in 0..self.aps() {
            for m in 0..a {
                self.set(q, i, m, v[q * a + m]);
            }
        }
    }

    pub fn total_power(&self) -> f64 {
        self.v.frobenius_sq()
    }

    pub fn all_finite(&self) -> bool {
        self.v.all_finite()
    }

    /// Permutes the user axis: new user `k` is old user `perm[k]`.
    pub fn permute_users(&self, perm: &[usize]) -> BeamTensor {
        let mut out = BeamTensor::zeros(self.aps(), self.users(), self.antennas());
        for q in 0..self.aps() {
            for (k, &src) in perm.iter().enumerate() {
                out.block_mut(q, k).copy_from_slice(self.block(q, src));
            }
        }
        out
    }
}

/// `sum_i ||v_i^q||^2` for AP `q`.
pub fn per_ap_power(v: &BeamTensor, q: usize) -> f64 {
    (0..v.users())
        .map(|i| v.block(q, i).iter().map(|z| z.norm_sqr()).sum::<f64>())
        .sum()
}

/// Rescales every AP whose power exceeds `p_max`.
pub fn project_power(v: &BeamTensor, p_max: f64, mode: ProjectionMode) -> BeamTensor {
    let mut out = v.clone();
    for q in 0..v.aps() {
        let s = mode.scale(per_ap_power(v, q), p_max);
        if s != 1.0 {
            for i in 0..v.users() {
                out.block_mut(q, i).iter_mut().for_each(|z| *z *= s);
            }
        }
    }
    out
}

/// Largest per-AP power relative to the budget.
pub fn max_power_ratio(v: &BeamTensor, p_max: f64) -> f64 {
    (0..v.aps()).map(|q| per_ap_power(v, q) / p_max).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_beam(q: usize, i: usize, m: usize, scale: f64, seed: u64) -> BeamTensor {
        let mut r = rng::stream(seed, &[]);
        let data = (0..q * i * m)
            .map(|_| Complex64::new(r.random_range(-scale..scale), r.random_range(-scale..scale)))
            .collect();
        BeamTensor::from_tensor(TensorC::new(vec![q, i, m], data).unwrap()).unwrap()
    }

    #[test]
    fn power_accounting() {
        assert_eq!(per_ap_power(&BeamTensor::zeros(2, 2, 2), 0), 0.0);
        let mut v = BeamTensor::zeros(1, 1, 2);
        let s = 1.0 / 2f64.sqrt();
        v.set(0, 0, 0, Complex64::new(s, 0.0));
        v.set(0, 0, 1, Complex64::new(s, 0.0));
        assert!((per_ap_power(&v, 0) - 1.0).abs() < 1e-15);
        let w = random_beam(3, 4, 2, 1.0, 8);
        let sum: f64 = (0..3).map(|q| per_ap_power(&w, q)).sum();
        assert!((sum - w.total_power()).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let mut v = BeamTensor::zeros(1, 1, 1);
        v.set(0, 0, 0, Complex64::new(0.5f64.sqrt(), 0.0));
        assert_eq!(project_power(&v, 1.0, ProjectionMode::Exact), v);
        v.set(0, 0, 0, Complex64::new(2.0, 0.0));
        let e = project_power(&v, 1.0, ProjectionMode::Exact);
        assert!((per_ap_power(&e, 0) - 1.0).abs() < 1e-15);
        let l = project_power(&v, 1.0, ProjectionMode::PaperLiteral);
        assert!((per_ap_power(&l, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn real_layout_round_trip() {
        let v = random_beam(2, 3, 2, 1.0, 4);
        let back = BeamTensor::from_real_layout(2, 3, 2, &v.to_real_layout()).unwrap();
        assert_eq!(back, v);
        let r = BeamTensor::from_real_layout(1, 1, 1, &[1.0, 2.0]).unwrap();
        assert_eq!(r.get(0, 0, 0), Complex64::new(1.0, 2.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projection_is_feasible(seed in any::<u64>(), scale in 0.01f64..10.0, literal in any::<bool>()) {
            let mode = if literal { ProjectionMode::PaperLiteral } else { ProjectionMode::Exact };
            let v = random_beam(3, 3, 2, scale, seed);
            let p = project_power(&v, 1.0, mode);
            prop_assert!(max_power_ratio(&p, 1.0) <= 1.0 + 1e-12);
        }
    }
}
