//! Reverse-mode versus central finite-difference comparison.

use rand::Rng as _;

use super::{Tape, TensorR, Var};
use crate::rng;
use crate::Result;

/// Central-difference step for 64-bit arithmetic.
pub const FD_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ArgReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub args: Vec<ArgReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.args.iter().all(|a| a.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.args.iter().fold(0.0, |m, a| m.max(a.max_rel_error))
    }
}

/// Relative error of one component, measured against the larger of the two
/// magnitudes with a floor tied to the argument's gradient scale.
pub fn rel_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(scale);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Checks the gradient of `build` w.r.t. every input tensor.
///
/// `build` records a graph on a fresh tape from the given input vars and
/// returns its output. Non-scalar outputs are contracted with a fixed random
/// projection so one backward pass covers every output component.
pub fn grad_check<F>(build: F, inputs: &[TensorR], tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |vals: &[TensorR]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = vals.iter().map(|v| tape.input(v.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs)?;
    let out_shape = tape.value(out).shape().to_vec();
    let mut r = rng::stream(seed, &[0xFD]);
    let proj = TensorR::from_fn(&out_shape, |_| r.random_range(-1.0..1.0));
    let contract = |t: &Tape, o: Var| t.value(o).dot(&proj);
    let grads = tape.backward(out, proj.clone())?;
    // central differences cannot resolve slopes below roughly eps |f| / step;
    // an absolute error within ten times that noise always passes, so exactly
    // zero gradients are not judged on roundoff
    let noise = f64::EPSILON * contract(&tape, out).abs().max(1.0) / FD_STEP;
    let resolution = 10.0 * noise / tolerance;

    let mut args = Vec::with_capacity(inputs.len());
    for (ai, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[ai])
            .cloned()
            .unwrap_or_else(|| TensorR::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut vals = inputs.to_vec();
            vals[ai].data_mut()[k] += FD_STEP;
            let (tp, _, op) = run(&vals)?;
            let plus = contract(&tp, op);
            vals[ai].data_mut()[k] -= 2.0 * FD_STEP;
            let (tm, _, om) = run(&vals)?;
            let minus = contract(&tm, om);
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let scale = (1e-3 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(resolution);
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            max_rel = max_rel.max(rel_error(*a, *n, scale));
            max_abs = max_abs.max((a - n).abs());
        }
        args.push(ArgReport {
            index: ai,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { args, tolerance })
}
