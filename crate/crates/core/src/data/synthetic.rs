use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MultimodalSample;
use crate::diffcore::Tensor;
use crate::encoders::ModalityShape;
use crate::error::{Error, Result};

/// Rank of the spatial pattern each image channel is rendered from.
const IMAGE_RANK: usize = 4;

/// Generator settings for the synthetic multimodal benchmark.
///
/// Each sample mixes a per-class latent with a per-sample latent,
/// `u = rho * class + (1 - rho) * private`, and every modality renders `u`
/// through its own fixed linear map before independent Gaussian noise is
/// added. With `rho = 1` all samples of a class share one signal; with
/// `rho = 0` inputs carry no class information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub modalities: Vec<ModalityShape>,
    pub shared_strength: f64,
    pub noise_scale: f64,
    pub latent_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.samples_per_class == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "samples_per_class and latent_dim must be positive".into(),
            ));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("need at least one modality".into()));
        }
        if self.modalities.iter().any(|m| m.numel() == 0) {
            return Err(Error::Config("modality with a zero dimension".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_strength) {
            return Err(Error::Config(format!(
                "shared_strength must lie in [0, 1], got {}",
                self.shared_strength
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fixed linear map from the latent space to one modality's raw input.
struct Renderer {
    shape: ModalityShape,
    /// `[signal_len, latent_dim]`
    mix: Tensor,
    /// Image only: row and column profiles per `(channel, rank)` pair.
    spatial: Vec<(Vec<f64>, Vec<f64>)>,
}

fn unit_profile(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = Tensor::randn(&[len], rng).into_data();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    // unit norm scaled so an outer product has O(1) entries
    let scale = (len as f64).sqrt() / norm;
    v.into_iter().map(|x| x * scale).collect()
}

impl Renderer {
    fn new(shape: ModalityShape, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let signal_len = match shape {
            ModalityShape::Image { channels, .. } => channels * IMAGE_RANK,
            ModalityShape::Sequence { features, .. } => features,
            ModalityShape::Tabular { features } => features,
        };
        let mix = Tensor::randn(&[signal_len, latent], rng).map(|v| v / (latent as f64).sqrt());
        let spatial = match shape {
            ModalityShape::Image {
                channels,
                height,
                width,
            } => (0..channels * IMAGE_RANK)
                .map(|_| (unit_profile(height, rng), unit_profile(width, rng)))
                .collect(),
            _ => Vec::new(),
        };
        Self {
            shape,
            mix,
            spatial,
        }
    }

    fn signal(&self, u: &[f64]) -> Vec<f64> {
        let latent = u.len();
        (0..self.mix.shape()[0])
            .map(|r| {
                let row = &self.mix.data()[r * latent..(r + 1) * latent];
                row.iter().zip(u).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn render(&self, u: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let s = self.signal(u);
        let dims = self.shape.dims();
        let clean: Vec<f64> = match self.shape {
            ModalityShape::Tabular { .. } => s,
            ModalityShape::Sequence { steps, .. } => s.repeat(steps),
            ModalityShape::Image {
                channels,
                height,
                width,
            } => {
                let mut img = vec![0.0; channels * height * width];
                for c in 0..channels {
                    let plane = &mut img[c * height * width..(c + 1) * height * width];
                    for k in 0..IMAGE_RANK {
                        let amp = s[c * IMAGE_RANK + k];
                        let (rows, cols) = &self.spatial[c * IMAGE_RANK + k];
                        for (y, ry) in rows.iter().enumerate() {
                            for (x, cx) in cols.iter().enumerate() {
                                plane[y * width + x] += amp * ry * cx / IMAGE_RANK as f64;
                            }
                        }
                    }
                }
                img
            }
        };
        let eps = Tensor::randn(&dims, rng);
        let data = clean
            .iter()
            .zip(eps.data())
            .map(|(c, e)| c + noise * e)
            .collect();
        Tensor::from_parts(dims, data)
    }
}

/// Generates `num_classes * samples_per_class` labeled samples, ordered by
/// class. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<MultimodalSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = spec.latent_dim;
    let class_latents: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| Tensor::randn(&[latent], &mut rng).into_data())
        .collect();
    let renderers: Vec<Renderer> = spec
        .modalities
        .iter()
        .map(|&m| Renderer::new(m, latent, &mut rng))
        .collect();
    let rho = spec.shared_strength;
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, class) in class_latents.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let private = Tensor::randn(&[latent], &mut rng).into_data();
            let u: Vec<f64> = class
                .iter()
                .zip(&private)
                .map(|(c, p)| rho * c + (1.0 - rho) * p)
                .collect();
            let inputs = renderers
                .iter()
                .map(|r| r.render(&u, spec.noise_scale, &mut rng))
                .collect();
            out.push(MultimodalSample {
                inputs,
                label: Some(label),
            });
        }
    }
    Ok(out)
}

/// Applies one client's input distortion in place: every modality gets a
/// fixed elementwise gain `1 + strength * g` and offset `strength * o`, with
/// `g, o ~ N(0, 1)` drawn once from `seed`. `strength = 0` is a no-op.
pub fn apply_client_shift(samples: &mut [MultimodalSample], strength: f64, seed: u64) -> Result<()> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::Config(format!("client shift must be finite and >= 0, got {strength}")));
    }
    let Some(first) = samples.first() else {
        return Ok(());
    };
    if strength == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps: Vec<(Tensor, Tensor)> = first
        .inputs
        .iter()
        .map(|t| {
            let gain = Tensor::randn(t.shape(), &mut rng).map(|g| 1.0 + strength * g);
            let offset = Tensor::randn(t.shape(), &mut rng).map(|o| strength * o);
            (gain, offset)
        })
        .collect();
    for s in samples.iter_mut() {
        for (x, (gain, offset)) in s.inputs.iter_mut().zip(&maps) {
            if x.shape() != gain.shape() {
                return Err(Error::shape("client shift", x.shape(), gain.shape()));
            }
            for ((v, g), o) in x.data_mut().iter_mut().zip(gain.data()).zip(offset.data()) {
                *v = *v * g + o;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(rho: f64, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 5,
            samples_per_class: 200,
            modalities: vec![
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
            ],
            shared_strength: rho,
            noise_scale: noise,
            latent_dim: 8,
            seed: 42,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&spec(0.7, 0.5)).unwrap();
        let b = generate_synthetic(&spec(0.7, 0.5)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(0.7, 0.5);
        other.seed = 43;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn full_sharing_without_noise_is_constant_per_class() {
        let data = generate_synthetic(&spec(1.0, 0.0)).unwrap();
        for class in 0..5 {
            let members: Vec<_> = data.iter().filter(|s| s.label == Some(class)).collect();
            for s in &members[1..] {
                assert_eq!(s.inputs, members[0].inputs);
            }
        }
    }

    #[test]
    fn shapes_follow_modalities() {
        let data = generate_synthetic(&spec(0.5, 1.0)).unwrap();
        assert_eq!(data.len(), 1000);
        assert_eq!(data[0].inputs[0].shape(), &[1, 10, 10]);
        assert_eq!(data[0].inputs[1].shape(), &[6, 4]);
        assert_eq!(data[0].inputs[2].shape(), &[10]);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(0.5, 1.0);
        s.num_classes = 1;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(1.5, 1.0);
        s.shared_strength = 1.5;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn client_shift_is_a_fixed_affine_map() {
        let mut a = generate_synthetic(&spec(0.7, 0.5)).unwrap();
        let orig = a.clone();
        apply_client_shift(&mut a, 0.0, 1).unwrap();
        assert_eq!(a, orig);
        apply_client_shift(&mut a, 0.5, 1).unwrap();
        assert_ne!(a, orig);
        // same gain and offset for every sample: differences scale by the gain
        let (d0, d1) = (&orig[0].inputs[0], &orig[1].inputs[0]);
        let (s0, s1) = (&a[0].inputs[0], &a[1].inputs[0]);
        let mut b = orig.clone();
        apply_client_shift(&mut b, 0.5, 1).unwrap();
        assert_eq!(a, b);
        for i in 0..d0.numel() {
            let (dx, sx) = (d0.data()[i] - d1.data()[i], s0.data()[i] - s1.data()[i]);
            if dx.abs() > 1e-9 {
                let gain = sx / dx;
                let offset = s0.data()[i] - gain * d0.data()[i];
                assert!((s1.data()[i] - (gain * d1.data()[i] + offset)).abs() < 1e-9);
            }
        }
        assert!(apply_client_shift(&mut b, -1.0, 1).is_err());
    }
}
