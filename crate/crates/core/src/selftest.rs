//! Quick installation check: a handful of exact identities and one gradient
//! check through the whole model, small enough to finish in about a second.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{align_loss, contrastive_loss, jsd, AlignConfig, Bandwidth};
use crate::data::{make_batch, MultimodalSample};
use crate::diffcore::{check_gradients, BoundParams, ParamSet, Tape, Tensor};
use crate::encoders::{decompose, ModalityShape};
use crate::error::{Error, Result};
use crate::federation::{naive_init, personal_aggregation, PersonalWeights};
use crate::fusion::FusionMode;
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{BoundModel, ModelArch};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn tiny_arch(fusion: FusionMode) -> Result<ModelArch> {
    let shapes = [
        ModalityShape::Image {
            channels: 1,
            height: 10,
            width: 10,
        },
        ModalityShape::Sequence { steps: 3, features: 2 },
        ModalityShape::Tabular { features: 3 },
    ];
    ModelArch::new(&shapes, &[Some(vec![2, 2]), Some(vec![2]), Some(vec![3])], 2, 3, fusion)
}

fn tiny_samples(n: usize, rng: &mut ChaCha8Rng) -> Vec<MultimodalSample> {
    (0..n)
        .map(|i| MultimodalSample {
            inputs: vec![
                Tensor::randn(&[1, 10, 10], rng),
                Tensor::randn(&[3, 2], rng),
                Tensor::randn(&[3], rng),
            ],
            label: Some(i % 3),
        })
        .collect()
}

fn full_model_gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = tiny_arch(FusionMode::Full)?;
    let params = arch.init(&mut rng);
    let samples = tiny_samples(3, &mut rng);
    let batch = make_batch(&samples.iter().collect::<Vec<_>>())?;
    let names: Vec<(bool, String)> = params
        .encoder
        .names()
        .map(|n| (true, n.clone()))
        .chain(params.classifier.names().map(|n| (false, n.clone())))
        .collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|(enc, n)| {
            let set: &ParamSet = if *enc { &params.encoder } else { &params.classifier };
            set.get(n).cloned()
        })
        .collect::<Result<_>>()?;
    let cfg = AlignConfig {
        bandwidth: Bandwidth::Fixed(1.5),
        ..AlignConfig::default()
    };
    let check = check_gradients(&inputs, 1e-6, |tape, vars| {
        let pick = |want: bool| -> BoundParams {
            names
                .iter()
                .zip(vars)
                .filter(|((enc, _), _)| *enc == want)
                .map(|((_, n), &v)| (n.clone(), v))
                .collect()
        };
        let model = BoundModel {
            encoder: pick(true),
            classifier: pick(false),
        };
        let feats = arch.encode(tape, &model.encoder, &batch.inputs)?;
        let align = align_loss(tape, &feats, &cfg)?;
        let ce = arch.loss(tape, &model, &batch)?;
        tape.add(align, ce)
    })?;
    if check.max_rel_error < 1e-4 {
        Ok(format!("max relative error {:.2e}", check.max_rel_error))
    } else {
        Err(Error::Backward(format!(
            "relative error {:.2e} on `{}`",
            check.max_rel_error, names[check.worst_input].1
        )))
    }
}

fn aggregation_reduces_to_global() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = tiny_arch(FusionMode::Full)?;
    let global = arch.init(&mut rng);
    let local = arch.init(&mut rng);
    let labeled = tiny_samples(4, &mut rng);
    let w = PersonalWeights::ones_like(&global.encoder);
    let (init, _) = personal_aggregation(&arch, &global, &local, w, &labeled, 1.0, 0, 2, &mut rng)?;
    if init == naive_init(&global) {
        Ok("bitwise equal".into())
    } else {
        Err(Error::Backward("personalized init differs from the global model".into()))
    }
}

fn alignment_identities() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let feats = (0..3)
        .map(|_| decompose(&tape, tape.constant(Tensor::randn(&[3, 4], &mut rng))))
        .collect::<Result<Vec<_>>>()?;
    let cfg = AlignConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..AlignConfig::default()
    };
    let a = tape.item(align_loss(&tape, &feats, &cfg)?);
    let c = tape.item(contrastive_loss(&tape, &feats, cfg.tau)?);
    if a != c {
        return Err(Error::Backward(format!("align {a} vs contrastive {c}")));
    }
    let x = tape.constant(Tensor::randn(&[4], &mut rng));
    let self_div = tape.item(jsd(&tape, x, x)?);
    if self_div.abs() > 1e-12 {
        return Err(Error::Backward(format!("jsd(x, x) = {self_div}")));
    }
    Ok("exact".into())
}

fn metrics_example() -> Result<String> {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 2]])?;
    let m = Metrics::from_confusion(&cm)?;
    // recalls 3/4 and 1; precisions 1 and 2/3
    let f1 = (2.0 * 0.75 / 1.75 + 2.0 * (2.0 / 3.0) / (5.0 / 3.0)) / 2.0;
    if m.oa == 5.0 / 6.0 && m.ba == 0.875 && (m.f1 - f1).abs() < 1e-15 {
        Ok(format!("oa {:.4} ba {:.4} f1 {:.4}", m.oa, m.ba, m.f1))
    } else {
        Err(Error::Backward(format!("unexpected metrics {m:?}")))
    }
}

type Check = fn() -> Result<String>;

/// Runs every check; never panics.
pub fn run_selftest() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 4] = [
        ("full model gradients", full_model_gradients),
        ("personalized init with unit weights", aggregation_reduces_to_global),
        ("alignment identities", alignment_identities),
        ("metrics example", metrics_example),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
