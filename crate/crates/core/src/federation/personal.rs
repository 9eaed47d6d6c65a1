use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, MultimodalSample};
use crate::diffcore::{ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelArch, ModelParams};

/// Elementwise aggregation weights for the encoder part. The classifier
/// always takes the global parameters, so it has no weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalWeights {
    pub encoder: ParamSet,
}

impl PersonalWeights {
    pub fn ones_like(encoder: &ParamSet) -> Self {
        Self {
            encoder: encoder
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::ones(t.shape())))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.encoder.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    /// Smallest and largest weight.
    pub fn range(&self) -> (f64, f64) {
        self.encoder
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        let n = self.encoder.num_elements().max(1) as f64;
        self.encoder.iter().flat_map(|(_, t)| t.data().iter()).sum::<f64>() / n
    }
}

/// `(1 - w) * local + w * global`, exact at `w = 0` and `w = 1`.
fn blend(local: &ParamSet, global: &ParamSet, w: &ParamSet) -> Result<ParamSet> {
    global
        .iter()
        .map(|(name, g)| {
            let l = local.get(name)?;
            let w = w.get(name)?;
            if l.shape() != g.shape() || w.shape() != g.shape() {
                return Err(Error::shape("personal aggregation", l.shape(), g.shape()));
            }
            let data = l
                .data()
                .iter()
                .zip(g.data())
                .zip(w.data())
                .map(|((&l, &g), &w)| (1.0 - w) * l + w * g)
                .collect();
            Ok((name.clone(), Tensor::new(g.shape().to_vec(), data)?))
        })
        .collect()
}

/// One weight step: `w <- clamp01(w - lr_w * grad * (global - local))`.
pub fn update_weights(
    w: &mut PersonalWeights,
    grad: &ParamSet,
    global: &ParamSet,
    local: &ParamSet,
    lr_w: f64,
) -> Result<()> {
    for (name, wt) in w.encoder.iter_mut() {
        let (g, gl, lo) = (grad.get(name)?, global.get(name)?, local.get(name)?);
        if g.shape() != wt.shape() || gl.shape() != wt.shape() || lo.shape() != wt.shape() {
            return Err(Error::shape("update_weights", wt.shape(), g.shape()));
        }
        for (((wv, &gv), &glv), &lov) in wt
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(gl.data())
            .zip(lo.data())
        {
            *wv = (*wv - lr_w * gv * (glv - lov)).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

/// Learns `w` on labeled data for `passes` epochs and returns the blended
/// starting point `[(1 - w) θ_i + w θ_G, θ_Gc]` with the updated weights.
#[allow(clippy::too_many_arguments)]
pub fn personal_aggregation<R: Rng + ?Sized>(
    arch: &ModelArch,
    global: &ModelParams,
    local: &ModelParams,
    mut weights: PersonalWeights,
    labeled: &[MultimodalSample],
    lr_w: f64,
    passes: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<(ModelParams, PersonalWeights)> {
    if labeled.is_empty() {
        return Err(Error::Data("personalized aggregation needs labeled data".into()));
    }
    global.check_same_layout(local)?;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for _ in 0..passes {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let batch = make_batch(&chunk.iter().map(|&i| &labeled[i]).collect::<Vec<_>>())?;
            let candidate = ModelParams {
                encoder: blend(&local.encoder, &global.encoder, &weights.encoder)?,
                classifier: global.classifier.clone(),
            };
            let tape = Tape::new();
            let bound = BoundModel::bind(&tape, &candidate, true, false);
            let loss = arch.loss(&tape, &bound, &batch)?;
            tape.backward(loss)?;
            let grad = bound.encoder.grads(&tape);
            update_weights(&mut weights, &grad, &global.encoder, &local.encoder, lr_w)?;
        }
    }
    let init = ModelParams {
        encoder: blend(&local.encoder, &global.encoder, &weights.encoder)?,
        classifier: global.classifier.clone(),
    };
    Ok((init, weights))
}
