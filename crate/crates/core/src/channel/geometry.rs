use num_complex::Complex64;
use rand::Rng;

use crate::diffnum::TensorC;

/// Distances are clamped to this before the power law is applied.
pub const D_MIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub aps: Vec<(f64, f64)>,
    pub users: Vec<(f64, f64)>,
}

impl Geometry {
    pub fn distance(&self, ap: usize, user: usize) -> f64 {
        let (a, u) = (self.aps[ap], self.users[user]);
        (a.0 - u.0).hypot(a.1 - u.1)
    }
}

/// Uniform drop of `aps` APs then `users` users over `[0, side]^2`.
pub fn place_nodes<R: Rng + ?Sized>(aps: usize, users: usize, side: f64, rng: &mut R) -> Geometry {
    let mut draw = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.random::<f64>() * side, rng.random::<f64>() * side))
            .collect()
    };
    let aps = draw(aps);
    let users = draw(users);
    Geometry { aps, users }
}

/// Half-wavelength ULA response, entry `m` is `exp(j pi m sin(angle))`.
pub fn steering_vector(angle: f64, count: usize) -> TensorC {
    let s = angle.sin();
    let data = (0..count)
        .map(|m| Complex64::from_polar(1.0, std::f64::consts::PI * m as f64 * s))
        .collect();
    TensorC::new(vec![count, 1], data).expect("column vector")
}

/// Amplitude coefficient `max(d, D_MIN)^(-alpha/2)`.
pub fn pathloss_beta(distance: f64, alpha: f64) -> f64 {
    distance.max(D_MIN).powf(-alpha / 2.0)
}
