//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it is used to validate.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input `|analytic - numeric| / max(|analytic|, |numeric|)`
    /// measured in the L2 norm.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Norms below this are treated as zero gradients.
const NORM_FLOOR: f64 = 1e-6;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against
/// central differences with the given step.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf is trainable"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(Error::domain("gradcheck", "non-finite objective"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
        }
        numeric.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }

    let mut max_rel_error = 0.0;
    let mut worst_input = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let diff: Vec<f64> = a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect();
        let denom = l2(a.data()).max(l2(n.data())).max(NORM_FLOOR);
        let rel = l2(&diff) / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_input = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_input,
        analytic,
        numeric,
    })
}
