use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `p <- p - lr * grad(p)` for every parameter, then zeroes the gradients.
///
/// Parameters missing from `grads` are left untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &mut ParamSet, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for (name, p) in params.iter_mut() {
        let Ok(g) = grads.get_mut(name) else {
            continue;
        };
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data_mut().iter_mut()) {
            *pv -= lr * *gv;
            *gv = 0.0;
        }
    }
    Ok(())
}

/// Elementwise projection onto `[0, 1]`. Applied outside the tape.
pub fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

pub fn clamp01_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}
