//! The full multimodal classifier: one encoder per modality, fusion, and a
//! linear head, with its parameters split into encoder and classifier parts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::diffcore::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::encoders::{decompose, EncoderSpec, ModalityFeatures, ModalityShape};
use crate::error::{Error, Result};
use crate::fusion::{fuse_variant, FusionMode, FusionParams};

/// `[θ_e, θ_c]`: every encoder plus the fusion projections, and the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: ParamSet,
    pub classifier: ParamSet,
}

impl ModelParams {
    pub fn check_same_layout(&self, other: &ModelParams) -> Result<()> {
        self.encoder.check_same_layout(&other.encoder)?;
        self.classifier.check_same_layout(&other.classifier)
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.encoder
            .first_non_finite()
            .or_else(|| self.classifier.first_non_finite())
    }

    pub fn num_elements(&self) -> usize {
        self.encoder.num_elements() + self.classifier.num_elements()
    }
}

/// Encoder and head handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundParams,
    pub classifier: BoundParams,
}

impl BoundModel {
    pub fn bind(tape: &Tape, params: &ModelParams, train_encoder: bool, train_classifier: bool) -> Self {
        Self {
            encoder: params.encoder.bind(tape, train_encoder),
            classifier: params.classifier.bind(tape, train_classifier),
        }
    }

    pub fn grads(&self, tape: &Tape) -> ModelParams {
        ModelParams {
            encoder: self.encoder.grads(tape),
            classifier: self.classifier.grads(tape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArch {
    encoders: Vec<EncoderSpec>,
    d: usize,
    num_classes: usize,
    fusion: FusionMode,
}

impl ModelArch {
    /// `hidden[m]` overrides the default hidden sizes of modality `m`.
    pub fn new(
        modalities: &[ModalityShape],
        hidden: &[Option<Vec<usize>>],
        d: usize,
        num_classes: usize,
        fusion: FusionMode,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        let encoders = modalities
            .iter()
            .enumerate()
            .map(|(m, shape)| {
                let h = hidden
                    .get(m)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| shape.default_hidden());
                EncoderSpec::new(*shape, h, 2 * d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoders,
            d,
            num_classes,
            fusion,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fusion(&self) -> FusionMode {
        self.fusion
    }

    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn fused_width(&self) -> usize {
        self.fusion.fused_width(self.d, self.encoders.len())
    }

    fn prefix(&self, m: usize) -> String {
        format!("enc{m}.{}", self.encoders[m].shape().kind_name())
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut encoder = ParamSet::new();
        for (m, spec) in self.encoders.iter().enumerate() {
            spec.init_params(&self.prefix(m), rng, &mut encoder);
        }
        if self.fusion.uses_attention() {
            let bound = 1.0 / (self.d as f64).sqrt();
            for name in ["fusion.wq", "fusion.wk", "fusion.wv"] {
                encoder.insert(name, Tensor::uniform(&[self.d, self.d], bound, rng));
            }
        }
        let width = self.fused_width();
        let bound = 1.0 / (width as f64).sqrt();
        let mut classifier = ParamSet::new();
        classifier.insert("cls.w", Tensor::uniform(&[width, self.num_classes], bound, rng));
        classifier.insert("cls.b", Tensor::uniform(&[self.num_classes], bound, rng));
        ModelParams {
            encoder,
            classifier,
        }
    }

    /// Per-modality features for batched inputs.
    pub fn encode(&self, tape: &Tape, enc: &BoundParams, inputs: &[Tensor]) -> Result<Vec<ModalityFeatures>> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::Data(format!(
                "batch has {} modalities, model expects {}",
                inputs.len(),
                self.encoders.len()
            )));
        }
        self.encoders
            .iter()
            .zip(inputs)
            .enumerate()
            .map(|(m, (spec, x))| {
                let x = tape.constant(x.clone());
                decompose(tape, spec.encode(tape, enc, &self.prefix(m), x)?)
            })
            .collect()
    }

    pub fn fuse(&self, tape: &Tape, enc: &BoundParams, feats: &[ModalityFeatures]) -> Result<Var> {
        let params = if self.fusion.uses_attention() {
            Some(FusionParams {
                wq: enc.get("fusion.wq")?,
                wk: enc.get("fusion.wk")?,
                wv: enc.get("fusion.wv")?,
            })
        } else {
            None
        };
        fuse_variant(tape, feats, self.fusion, params.as_ref())
    }

    /// Fused features `[B, F]`.
    pub fn fused(&self, tape: &Tape, enc: &BoundParams, inputs: &[Tensor]) -> Result<Var> {
        let feats = self.encode(tape, enc, inputs)?;
        self.fuse(tape, enc, &feats)
    }

    /// Class logits `[B, C]`.
    pub fn logits(&self, tape: &Tape, model: &BoundModel, inputs: &[Tensor]) -> Result<Var> {
        let f = self.fused(tape, &model.encoder, inputs)?;
        crate::encoders::classify(
            tape,
            f,
            model.classifier.get("cls.w")?,
            model.classifier.get("cls.b")?,
        )
    }

    /// Mean cross-entropy on a labeled batch.
    pub fn loss(&self, tape: &Tape, model: &BoundModel, batch: &Batch) -> Result<Var> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("supervised loss on an unlabeled batch".into()))?;
        let logits = self.logits(tape, model, &batch.inputs)?;
        tape.cross_entropy(logits, labels)
    }

    /// Arg-max class per sample (ties go to the lower index).
    pub fn predict(&self, params: &ModelParams, inputs: &[Tensor]) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let model = BoundModel::bind(&tape, params, false, false);
        let logits = tape.value(self.logits(&tape, &model, inputs)?);
        let c = self.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fused feature rows for inputs, without recording gradients.
    pub fn embed(&self, params: &ModelParams, inputs: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::new();
        let enc = params.encoder.bind(&tape, false);
        let f = self.fused(&tape, &enc, inputs)?;
        Ok(tape.value(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> Vec<ModalityShape> {
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

    fn inputs(b: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            Tensor::randn(&[b, 1, 10, 10], rng),
            Tensor::randn(&[b, 6, 4], rng),
            Tensor::randn(&[b, 10], rng),
        ]
    }

    #[test]
    fn parameter_layout() {
        let arch = ModelArch::new(&shapes(), &[], 8, 5, FusionMode::Full).unwrap();
        let p = arch.init(&mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<&String> = p.encoder.names().collect();
        assert!(names.iter().any(|n| *n == "enc0.image.conv1.w"));
        assert!(names.iter().any(|n| *n == "enc1.sequence.lstm.wh"));
        assert!(names.iter().any(|n| *n == "enc2.tabular.w1"));
        assert!(names.iter().any(|n| *n == "fusion.wq"));
        assert_eq!(p.classifier.get("cls.w").unwrap().shape(), &[8 + 3 * 8, 5]);

        let concat = ModelArch::new(&shapes(), &[], 8, 5, FusionMode::Concat).unwrap();
        let p = concat.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.encoder.get("fusion.wq").is_err());
        assert_eq!(p.classifier.get("cls.w").unwrap().shape(), &[48, 5]);
    }

    #[test]
    fn logits_and_predictions_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = inputs(4, &mut rng);
        for mode in FusionMode::ALL {
            let arch = ModelArch::new(&shapes(), &[], 4, 3, mode).unwrap();
            let p = arch.init(&mut rng);
            let tape = Tape::new();
            let m = BoundModel::bind(&tape, &p, true, true);
            assert_eq!(tape.shape(arch.logits(&tape, &m, &x).unwrap()), vec![4, 3]);
            let pred = arch.predict(&p, &x).unwrap();
            assert_eq!(pred.len(), 4);
            assert!(pred.iter().all(|&c| c < 3));
            assert_eq!(arch.embed(&p, &x).unwrap().shape(), &[4, arch.fused_width()]);
        }
    }

    #[test]
    fn wrong_modality_count_rejected() {
        let arch = ModelArch::new(&shapes(), &[], 4, 3, FusionMode::Full).unwrap();
        let p = arch.init(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(arch.predict(&p, &[Tensor::zeros(&[2, 10])]).is_err());
    }
}
