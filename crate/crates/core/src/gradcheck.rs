//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check: one relative error per input, measured as
/// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-10)`.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences of step `step`. `f` builds a scalar from the registered input
/// variables.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::detached();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[idx].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[idx].len() {
            let x0 = inputs[idx].data()[k];
            probe[idx].data_mut()[k] = x0 + step;
            let up = eval(&probe)?;
            probe[idx].data_mut()[k] = x0 - step;
            let down = eval(&probe)?;
            probe[idx].data_mut()[k] = x0;
            numeric.push((up - down) / (2.0 * step));
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic.iter().copied())
            .max(norm(numeric.iter().copied()))
            .max(1e-10);
        rel_errors.push(diff / scale);
    }
    Ok(GradCheck { rel_errors })
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|x| x * x).sum::<f64>().sqrt()
}
