//! Synthetic multimodal data, non-IID client partitioning and per-client
//! labeled/unlabeled/test splits.

mod io;
mod partition;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::encoders::ModalityShape;
use crate::seed::derive_seed;
use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, DatasetHeader};
pub use partition::{dirichlet_partition, dirichlet_partition_indices};
pub use split::{split_client_data, ClientSplit, TEST_FRACTION};
pub use synthetic::{apply_client_shift, generate_synthetic, SyntheticSpec};

/// One example: a tensor per modality and an optional class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub inputs: Vec<Tensor>,
    pub label: Option<usize>,
}

impl MultimodalSample {
    pub fn label(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::Data("sample has no label".into()))
    }
}

/// Per-modality inputs stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks samples into a batch. Labels are kept only if every sample has one.
pub fn make_batch(samples: &[&MultimodalSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let modalities = first.inputs.len();
    let inputs = (0..modalities)
        .map(|m| {
            let items: Vec<&Tensor> = samples.iter().map(|s| &s.inputs[m]).collect();
            Tensor::stack(&items)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = samples.iter().map(|s| s.label).collect::<Option<Vec<_>>>();
    Ok(Batch { inputs, labels })
}

fn default_modalities() -> Vec<ModalityShape> {
    vec![
        ModalityShape::Image {
            channels: 1,
            height: 10,
            width: 10,
        },
        ModalityShape::Sequence {
            steps: 6,
            features: 4,
        },
        ModalityShape::Tabular { features: 10 },
    ]
}

/// Synthetic federated benchmark: the generator settings plus how the data
/// is spread over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub modalities: Vec<ModalityShape>,
    pub shared_strength: f64,
    pub noise_scale: f64,
    pub latent_dim: usize,
    pub clients: usize,
    pub beta: f64,
    pub label_ratio: f64,
    pub min_client_samples: usize,
    /// Strength of the per-client input distortion (0 disables it).
    pub client_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            samples_per_class: 200,
            modalities: default_modalities(),
            shared_strength: 0.7,
            noise_scale: 0.25,
            latent_dim: 8,
            clients: 8,
            beta: 0.5,
            label_ratio: 0.2,
            min_client_samples: 10,
            client_shift: 0.25,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            modalities: self.modalities.clone(),
            shared_strength: self.shared_strength,
            noise_scale: self.noise_scale,
            latent_dim: self.latent_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec(0).validate()?;
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.client_shift >= 0.0) || !self.client_shift.is_finite() {
            return Err(Error::Config(format!(
                "client_shift must be finite and >= 0, got {}",
                self.client_shift
            )));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "label_ratio must lie in (0, 1], got {}",
                self.label_ratio
            )));
        }
        Ok(())
    }
}

/// Generates, partitions and splits the benchmark for `seed`.
pub fn build_clients(cfg: &DataConfig, seed: u64) -> Result<Vec<ClientSplit>> {
    cfg.validate()?;
    let samples = generate_synthetic(&cfg.synthetic_spec(derive_seed(seed, &[SEED_DATA])))?;
    let parts = dirichlet_partition(
        &samples,
        cfg.clients,
        cfg.beta,
        cfg.min_client_samples,
        derive_seed(seed, &[SEED_PARTITION]),
    )?;
    parts
        .into_iter()
        .enumerate()
        .map(|(i, mut part)| {
            let i = i as u64;
            apply_client_shift(&mut part, cfg.client_shift, derive_seed(seed, &[SEED_SHIFT, i]))?;
            split_client_data(part, cfg.label_ratio, derive_seed(seed, &[SEED_SPLIT, i]))
        })
        .collect()
}

const SEED_DATA: u64 = 1;
const SEED_PARTITION: u64 = 2;
const SEED_SPLIT: u64 = 3;
const SEED_SHIFT: u64 = 4;
