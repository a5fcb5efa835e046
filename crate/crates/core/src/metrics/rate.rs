use std::f64::consts::LN_2;

use num_complex::Complex64;

use super::BeamTensor;
use crate::channel::CsiSample;
use crate::diffnum::TensorC;
use crate::linalg::{chol, ln_det_hpd, CMat, CVec};
use crate::{Error, Result};

/// Rows of user `i` (`N x Q*M`) from the stacked channel.
pub fn user_channel(h: &TensorC, i: usize, user_antennas: usize) -> Result<CMat> {
    let (rows, cols) = match h.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::shape(format!("channel must be 2-D, got {s:?}"))),
    };
    if (i + 1) * user_antennas > rows {
        return Err(Error::shape(format!("user {i} outside {rows} channel rows")));
    }
    let start = i * user_antennas * cols;
    Ok(CMat::from_row_slice(
        user_antennas,
        cols,
        &h.data()[start..start + user_antennas * cols],
    ))
}

fn check(h: &TensorC, v: &BeamTensor, noise: f64) -> Result<usize> {
    if !(noise > 0.0) {
        return Err(Error::arg("noise power must be > 0"));
    }
    if !h.all_finite() || !v.all_finite() {
        return Err(Error::Numeric("non-finite channel or beamformer".into()));
    }
    let [rows, cols] = h.shape() else {
        return Err(Error::shape("channel must be 2-D"));
    };
    if cols % v.aps() != 0 || cols / v.aps() != v.antennas() {
        return Err(Error::shape(format!(
            "channel has {cols} columns, beams are {} APs x {} antennas",
            v.aps(),
            v.antennas()
        )));
    }
    if rows % v.users() != 0 {
        return Err(Error::shape("channel rows are not a multiple of the user count"));
    }
    Ok(rows / v.users())
}

/// Received signal vectors `H_i v_j` for every user `j`.
fn received(h_i: &CMat, v: &BeamTensor) -> Vec<CVec> {
    (0..v.users()).map(|j| h_i * v.user_vector(j)).collect()
}

fn covariance(recv: &[CVec], skip: Option<usize>, noise: f64, n: usize) -> CMat {
    let mut k = CMat::identity(n, n) * Complex64::new(noise, 0.0);
    for (j, a) in recv.iter().enumerate() {
        if Some(j) != skip {
            k += a * a.adjoint();
        }
    }
    k
}

/// Rate of user `i` in bits/s/Hz:
/// `log2 det(I + H_i v_i v_i^H H_i^H (sum_{j!=i} H_i v_j v_j^H H_i^H + noise I)^-1)`.
///
/// The determinant is evaluated as `1 + a^H K^-1 a` with `a = H_i v_i`.
pub fn user_rate(h_i: &CMat, v: &BeamTensor, i: usize, noise: f64) -> Result<f64> {
    if !(noise > 0.0) {
        return Err(Error::arg("noise power must be > 0"));
    }
    if h_i.ncols() != v.aps() * v.antennas() {
        return Err(Error::shape("user channel width does not match beam tensor"));
    }
    if h_i.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) || !v.all_finite() {
        return Err(Error::Numeric("non-finite channel or beamformer".into()));
    }
    let recv = received(h_i, v);
    let k = covariance(&recv, Some(i), noise, h_i.nrows());
    let solved = chol(&k)?.solve(&recv[i]);
    let quad = (recv[i].adjoint() * solved)[(0, 0)].re;
    Ok((1.0 + quad.max(0.0)).log2())
}

pub fn sum_rate(h: &TensorC, v: &BeamTensor, noise: f64) -> Result<f64> {
    let n = check(h, v, noise)?;
    (0..v.users())
        .map(|i| user_rate(&user_channel(h, i, n)?, v, i, noise))
        .sum()
}

pub fn sum_rate_sample(sample: &CsiSample, v: &BeamTensor) -> Result<f64> {
    sum_rate(&sample.h, v, sample.noise_power)
}

/// Negative sum rate and its gradient w.r.t. every beam entry.
///
/// With `T_i = noise I + sum_j H_i v_j v_j^H H_i^H` and `K_i = T_i - H_i v_i v_i^H H_i^H`
/// the rate is `(ln det T_i - ln det K_i) / ln 2`, and
/// `dR/dconj(v_j) = (1/ln 2) sum_i H_i^H (T_i^-1 - [j != i] K_i^-1) H_i v_j`.
/// The returned gradient stores `dL/dRe + j dL/dIm` per entry.
pub fn rate_loss_grad(h: &TensorC, v: &BeamTensor, noise: f64) -> Result<(f64, BeamTensor)> {
    let n = check(h, v, noise)?;
    let users = v.users();
    let vecs: Vec<CVec> = (0..users).map(|j| v.user_vector(j)).collect();
    let mut rate = 0.0;
    let mut wirt: Vec<CVec> = (0..users).map(|_| CVec::zeros(vecs[0].len())).collect();
    for i in 0..users {
        let h_i = user_channel(h, i, n)?;
        let recv: Vec<CVec> = vecs.iter().map(|vj| &h_i * vj).collect();
        let t = covariance(&recv, None, noise, n);
        let k = covariance(&recv, Some(i), noise, n);
        rate += (ln_det_hpd(&t)? - ln_det_hpd(&k)?) / LN_2;
        let t_inv = chol(&t)?.inverse();
        let k_inv = chol(&k)?.inverse();
        let h_adj = h_i.adjoint();
        for j in 0..users {
            let inner = if j == i {
                &t_inv * &recv[j]
            } else {
                &t_inv * &recv[j] - &k_inv * &recv[j]
            };
            wirt[j] += &h_adj * inner;
        }
    }
    let mut grad = BeamTensor::zeros(v.aps(), users, v.antennas());
    for (j, w) in wirt.iter().enumerate() {
        // L = -R; dL/dRe = -2 Re(dR/dconj v), dL/dIm = -2 Im(dR/dconj v)
        let g = w.map(|z| -2.0 * z / LN_2);
        grad.set_user_vector(j, &g);
    }
    if !rate.is_finite() {
        return Err(Error::Numeric("sum rate is not finite".into()));
    }
    Ok((-rate, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use crate::rng;
    use rand::Rng;

    fn rand_c(r: &mut impl Rng) -> Complex64 {
        c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
    }

    fn random_instance(q: usize, i: usize, m: usize, n: usize, seed: u64) -> (TensorC, BeamTensor) {
        let mut r = rng::stream(seed, &[]);
        let h = TensorC::new(vec![i * n, q * m], (0..i * n * q * m).map(|_| rand_c(&mut r)).collect()).unwrap();
        let v = BeamTensor::from_tensor(
            TensorC::new(vec![q, i, m], (0..q * i * m).map(|_| rand_c(&mut r)).collect()).unwrap(),
        )
        .unwrap();
        (h, v)
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    fn det_oracle(mut a: Vec<Vec<Complex64>>) -> Complex64 {
        let n = a.len();
        let mut det = c(1.0, 0.0);
        for col in 0..n {
            let p = (col..n)
                .max_by(|&x, &y| a[x][col].norm().partial_cmp(&a[y][col].norm()).unwrap())
                .unwrap();
            if p != col {
                a.swap(p, col);
                det = -det;
            }
            det *= a[col][col];
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for k in col..n {
                    let t = a[col][k];
                    a[r][k] -= f * t;
                }
            }
        }
        det
    }

    fn inverse_oracle(a: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let n = a.len();
        let mut aug: Vec<Vec<Complex64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) }));
                r
            })
            .collect();
        for col in 0..n {
            let p = (col..n)
                .max_by(|&x, &y| aug[x][col].norm().partial_cmp(&aug[y][col].norm()).unwrap())
                .unwrap();
            aug.swap(p, col);
            let piv = aug[col][col];
            aug[col].iter_mut().for_each(|z| *z /= piv);
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    for k in 0..2 * n {
                        let t = aug[col][k];
                        aug[r][k] -= f * t;
                    }
                }
            }
        }
        aug.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// Direct evaluation of the log-det rate with hand-rolled complex arithmetic.
    fn rate_oracle(h: &TensorC, v: &BeamTensor, i: usize, n: usize, noise: f64) -> f64 {
        let cols = h.shape()[1];
        let hrow = |r: usize, k: usize| h.data()[(i * n + r) * cols + k];
        let a: Vec<Vec<Complex64>> = (0..v.users())
            .map(|j| {
                let vj = v.user_vector(j);
                (0..n).map(|r| (0..cols).map(|k| hrow(r, k) * vj[k]).sum()).collect()
            })
            .collect();
        let outer = |x: &[Complex64]| -> Vec<Vec<Complex64>> {
            (0..n).map(|r| (0..n).map(|s| x[r] * x[s].conj()).collect()).collect()
        };
        let mut k = vec![vec![c(0.0, 0.0); n]; n];
        for (r, row) in k.iter_mut().enumerate() {
            row[r] = c(noise, 0.0);
        }
        for (j, aj) in a.iter().enumerate() {
            if j != i {
                let o = outer(aj);
                for r in 0..n {
                    for s in 0..n {
                        k[r][s] += o[r][s];
                    }
                }
            }
        }
        let kinv = inverse_oracle(&k);
        let sig = outer(&a[i]);
        let mut m = vec![vec![c(0.0, 0.0); n]; n];
        for r in 0..n {
            for s in 0..n {
                m[r][s] = if r == s { c(1.0, 0.0) } else { c(0.0, 0.0) };
                for t in 0..n {
                    m[r][s] += sig[r][t] * kinv[t][s];
                }
            }
        }
        det_oracle(m).re.log2()
    }

    #[test]
    fn siso_closed_form() {
        let h = TensorC::new(vec![1, 1], vec![c(1.0, 0.0)]).unwrap();
        let mut v = BeamTensor::zeros(1, 1, 1);
        v.set(0, 0, 0, c(1.0, 0.0));
        assert_eq!(sum_rate(&h, &v, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn zero_beams_zero_rate() {
        let (h, _) = random_instance(2, 3, 2, 2, 1);
        let v = BeamTensor::zeros(2, 3, 2);
        for i in 0..3 {
            assert_eq!(user_rate(&user_channel(&h, i, 2).unwrap(), &v, i, 1.0).unwrap(), 0.0);
        }
        assert_eq!(sum_rate(&h, &v, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn matches_dense_oracle() {
        for seed in 0..20 {
            let (h, v) = random_instance(2, 2, 2, 2, seed);
            for i in 0..2 {
                let got = user_rate(&user_channel(&h, i, 2).unwrap(), &v, i, 0.7).unwrap();
                let want = rate_oracle(&h, &v, i, 2, 0.7);
                assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn single_user_sum_equals_user_rate() {
        let (h, v) = random_instance(3, 1, 2, 2, 5);
        let u = user_rate(&user_channel(&h, 0, 2).unwrap(), &v, 0, 1.0).unwrap();
        assert_eq!(sum_rate(&h, &v, 1.0).unwrap(), u);
    }

    #[test]
    fn user_permutation_leaves_sum_unchanged() {
        let (h, v) = random_instance(2, 3, 2, 2, 6);
        let perm = [2, 0, 1];
        // permute channel rows consistently
        let cols = h.shape()[1];
        let mut data = Vec::new();
        for &src in &perm {
            data.extend_from_slice(&h.data()[src * 2 * cols..(src + 1) * 2 * cols]);
        }
        let hp = TensorC::new(h.shape().to_vec(), data).unwrap();
        let a = sum_rate(&h, &v, 1.0).unwrap();
        let b = sum_rate(&hp, &v.permute_users(&perm), 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn unitary_receive_rotation_invariance() {
        let (h, v) = random_instance(2, 2, 2, 2, 9);
        let theta: f64 = 0.37;
        let u = CMat::from_row_slice(
            2,
            2,
            &[
                c(theta.cos(), 0.0),
                c(0.0, theta.sin()),
                c(0.0, theta.sin()),
                c(theta.cos(), 0.0),
            ],
        );
        for i in 0..2 {
            let h_i = user_channel(&h, i, 2).unwrap();
            let a = user_rate(&h_i, &v, i, 1.0).unwrap();
            let b = user_rate(&(&u * &h_i), &v, i, 1.0).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let (h, mut v) = random_instance(1, 1, 1, 1, 2);
        v.set(0, 0, 0, c(f64::NAN, 0.0));
        assert!(matches!(sum_rate(&h, &v, 1.0), Err(Error::Numeric(_))));
    }

    fn fd_check(h: &TensorC, v: &BeamTensor, noise: f64) -> f64 {
        let (_, g) = rate_loss_grad(h, v, noise).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        let scale = g
            .tensor()
            .data()
            .iter()
            .map(|z| z.re.abs().max(z.im.abs()))
            .fold(0.0, f64::max)
            * 1e-3
            + 1e-10;
        for q in 0..v.aps() {
            for i in 0..v.users() {
                for m in 0..v.antennas() {
                    for part in 0..2 {
                        let d = if part == 0 { c(step, 0.0) } else { c(0.0, step) };
                        let mut p = v.clone();
                        p.set(q, i, m, v.get(q, i, m) + d);
                        let mut mi = v.clone();
                        mi.set(q, i, m, v.get(q, i, m) - d);
                        let fd = (-sum_rate(h, &p, noise).unwrap() + sum_rate(h, &mi, noise).unwrap()) / (2.0 * step);
                        let an = if part == 0 {
                            g.get(q, i, m).re
                        } else {
                            g.get(q, i, m).im
                        };
                        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(scale));
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (h, v) = random_instance(2, 2, 2, 2, 100 + seed);
            let err = fd_check(&h, &v, 0.5);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn origin_is_stationary_but_not_a_maximum() {
        let (h, _) = random_instance(2, 2, 2, 2, 3);
        let v = BeamTensor::zeros(2, 2, 2);
        let (loss, g) = rate_loss_grad(&h, &v, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        // every gradient term carries a factor v_j, so the origin is stationary
        assert_eq!(g.total_power(), 0.0);
        // a one-sided finite step still increases the rate (signal term is second order)
        let mut p = v.clone();
        p.set(0, 0, 0, c(1e-3, 0.0));
        assert!(sum_rate(&h, &p, 1.0).unwrap() > 0.0);
        let (_, g2) = rate_loss_grad(&h, &p, 1.0).unwrap();
        assert!(g2.total_power() > 0.0);
    }

    #[test]
    fn vanishing_sinr_limit() {
        let (h, v) = random_instance(2, 2, 2, 2, 4);
        let (l1, g1) = rate_loss_grad(&h, &v, 1e8).unwrap();
        assert!(l1.abs() < 1e-6);
        assert!(g1.total_power().sqrt() < 1e-6);
    }
}
