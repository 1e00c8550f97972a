//! Central finite-difference gradient checking in `f64`.
//!
//! Used by the verification suites to compare tape gradients against numeric
//! derivatives of the same forward function.

use super::{Graph, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-6)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `f` w.r.t. every input with central differences
/// of step `h`. `f` must build a scalar loss from the given leaf variables.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(*var);
        let mut numeric = vec![0.0; inputs[slot].len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = inputs[slot].data()[i];
            work[slot].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[slot].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[slot].data_mut()[i] = orig;
            *num = (plus - minus) / (2.0 * h);
        }
        relative_errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheck { relative_errors })
}

/// Same check as [`check_gradients`], but w.r.t. every tensor of a parameter store.
/// `f` builds a scalar loss on the supplied graph.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.param_grads(loss)?
    };
    let mut work = store.clone();
    let mut relative_errors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let len = store.get(id).len();
        let mut numeric = vec![0.0; len];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            *num = (plus - minus) / (2.0 * h);
        }
        let zeros = vec![0.0; len];
        let a = analytic.get(id).map_or(zeros.as_slice(), |t| t.data());
        relative_errors.push(relative_error(a, &numeric));
    }
    Ok(GradCheck { relative_errors })
}

/// Norm-wise relative error. The floor on the scale compares gradients that are
/// identically zero, such as attention key biases, on absolute error.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1.0e-3)
}
