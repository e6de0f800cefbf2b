//! Central finite-difference checks against the tape's analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{NetworkParams, ParamId};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::matrix::Matrix;

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error seen over the checked coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries passed over because a ReLU or max-pool kink lay inside the stencil.
    pub skipped: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }
}

/// Checks `f` with respect to every entry of every input matrix. Entries with
/// a kink inside the stencil are counted in `skipped` instead.
pub fn check_inputs<'p>(inputs: &[Matrix], f: impl Fn(&mut Tape<'p>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let eval = |xs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.input(m.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.input(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss);
    let mut report = GradReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut xs = inputs.to_vec();
    for (j, v) in vars.iter().enumerate() {
        let zero = Matrix::zeros(inputs[j].rows(), inputs[j].cols());
        let analytic = grads.get(*v).unwrap_or(&zero).clone();
        for e in 0..inputs[j].data().len() {
            let wide = central_difference(&mut xs, j, e, FD_STEP, &eval)?;
            let narrow = central_difference(&mut xs, j, e, FD_STEP / 2.0, &eval)?;
            if kinked(wide, narrow) {
                report.skipped += 1;
                continue;
            }
            report.record(analytic.data()[e], wide);
        }
    }
    Ok(report)
}

fn central_difference(xs: &mut [Matrix], j: usize, e: usize, h: f64, eval: &impl Fn(&[Matrix]) -> Result<f64>) -> Result<f64> {
    let orig = xs[j].data()[e];
    xs[j].data_mut()[e] = orig + h;
    let plus = eval(xs)?;
    xs[j].data_mut()[e] = orig - h;
    let minus = eval(xs)?;
    xs[j].data_mut()[e] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Central differences at `h` and `h/2` agree to `O(h²)` where `f` is smooth.
fn kinked(wide: f64, narrow: f64) -> bool {
    (wide - narrow).abs() > 1e-6 * wide.abs().max(narrow.abs()) + 1e-9
}

/// Checks `f` with respect to up to `per_tensor` randomly chosen entries of each parameter tensor.
///
/// A whole network is piecewise smooth, and any of its many ReLU and max-pool
/// kinks may fall inside a stencil. Such entries are counted in `skipped` and
/// replaced by other entries of the tensor.
pub fn check_params<R: Rng>(
    params: &NetworkParams,
    per_tensor: usize,
    rng: &mut R,
    f: impl for<'a> Fn(&mut Tape<'a>, &'a NetworkParams) -> Result<Var>,
) -> Result<GradReport> {
    let mut store = params.clone();
    store.zero_grads();
    let grads = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &store)?;
        tape.backward(loss)
    };
    grads.accumulate_into(&mut store);
    let eval = |p: &NetworkParams| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };
    let mut report = GradReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for t in 0..store.len() {
        let id = ParamId(t);
        let n = store.get(id).values.data().len();
        let want = per_tensor.min(n);
        let mut done = 0;
        for e in sample(rng, n, n.min(4 * want.max(1))) {
            if done == want {
                break;
            }
            let analytic = store.get(id).grads.data()[e];
            let orig = store.get(id).values.data()[e];
            let mut central = |h: f64| -> Result<f64> {
                store.get_mut(id).values.data_mut()[e] = orig + h;
                let plus = eval(&store)?;
                store.get_mut(id).values.data_mut()[e] = orig - h;
                let minus = eval(&store)?;
                store.get_mut(id).values.data_mut()[e] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let (wide, narrow) = (central(FD_STEP)?, central(FD_STEP / 2.0)?);
            if kinked(wide, narrow) {
                report.skipped += 1;
                continue;
            }
            report.record(analytic, wide);
            done += 1;
        }
    }
    Ok(report)
}
