use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aggregate::fedprox_penalty;
use super::personal::PersonalWeights;
use super::{Method, RunConfig};
use crate::alignment::align_loss;
use crate::data::{make_batch, ClientSplit, MultimodalSample};
use crate::diffcore::{sgd_step, Tape};
use crate::error::Result;
use crate::model::{BoundModel, ModelArch, ModelParams};
use crate::seed::derive_seed;

pub(crate) const STREAM_PERSONAL: u64 = 1;
const STREAM_ALIGN: u64 = 2;
const STREAM_SUPERVISED: u64 = 3;

/// Everything one client owns between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub local: ModelParams,
    pub weights: PersonalWeights,
    pub split: ClientSplit,
    pub seed: u64,
}

impl ClientState {
    pub fn new(id: usize, init: &ModelParams, split: ClientSplit, seed: u64) -> Self {
        Self {
            id,
            local: init.clone(),
            weights: PersonalWeights::ones_like(&init.encoder),
            split,
            seed,
        }
    }

    pub(crate) fn rng(&self, round: usize, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[round as u64, stream]))
    }
}

fn epochs<'a>(
    data: &'a [MultimodalSample],
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<&'a MultimodalSample>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    for _ in 0..epochs {
        order.shuffle(rng);
        out.extend(
            order
                .chunks(batch_size)
                .map(|c| c.iter().map(|&i| &data[i]).collect::<Vec<_>>()),
        );
    }
    out
}

/// Phase 1 (alignment methods only): `R` epochs of the alignment loss over
/// the unlabeled set, updating the encoder part. Phase 2: `R` epochs of
/// cross-entropy over the labeled set, plus the proximal term for FedProx,
/// updating everything.
pub fn client_local_training(
    arch: &ModelArch,
    client: &ClientState,
    init: ModelParams,
    cfg: &RunConfig,
    round: usize,
) -> Result<ModelParams> {
    let mut params = init;
    let anchor = (cfg.method == Method::Fedprox && cfg.fedprox_mu > 0.0).then(|| params.clone());

    if cfg.method.uses_alignment() && cfg.local_epochs > 0 {
        let unlabeled = &client.split.unlabeled;
        if unlabeled.len() < 2 {
            log::warn!(
                "client {}: {} unlabeled samples, skipping alignment",
                client.id,
                unlabeled.len()
            );
        } else {
            let mut rng = client.rng(round, STREAM_ALIGN);
            for batch in epochs(unlabeled, cfg.local_epochs, cfg.batch_size, &mut rng) {
                // contrastive terms need a negative
                if batch.len() < 2 {
                    continue;
                }
                let batch = make_batch(&batch)?;
                let tape = Tape::new();
                let enc = params.encoder.bind(&tape, true);
                let feats = arch.encode(&tape, &enc, &batch.inputs)?;
                let loss = align_loss(&tape, &feats, &cfg.align)?;
                tape.backward(loss)?;
                if cfg.align_lr() > 0.0 {
                    sgd_step(&mut params.encoder, &mut enc.grads(&tape), cfg.align_lr())?;
                }
            }
        }
    }

    let mut rng = client.rng(round, STREAM_SUPERVISED);
    for batch in epochs(&client.split.labeled, cfg.local_epochs, cfg.batch_size, &mut rng) {
        let batch = make_batch(&batch)?;
        let tape = Tape::new();
        let bound = BoundModel::bind(&tape, &params, true, true);
        let mut loss = arch.loss(&tape, &bound, &batch)?;
        if let Some(anchor) = &anchor {
            loss = tape.add(loss, fedprox_penalty(&tape, &bound, anchor, cfg.fedprox_mu)?)?;
        }
        tape.backward(loss)?;
        if cfg.lr > 0.0 {
            let mut g = bound.grads(&tape);
            sgd_step(&mut params.encoder, &mut g.encoder, cfg.lr)?;
            sgd_step(&mut params.classifier, &mut g.classifier, cfg.lr)?;
        }
    }
    Ok(params)
}
