//! Modality-specific encoders, the aligned/context feature split, and the
//! linear classifier head.
//!
//! Every encoder maps a batch to `[B, 2d]` features. The first `d` columns
//! are the aligned half, the remaining `d` the context half.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Raw input layout of one modality (per sample, without the batch axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModalityShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Sequence {
        steps: usize,
        features: usize,
    },
    Tabular {
        features: usize,
    },
}

impl ModalityShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ModalityShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            ModalityShape::Sequence { steps, features } => vec![steps, features],
            ModalityShape::Tabular { features } => vec![features],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModalityShape::Image { .. } => "image",
            ModalityShape::Sequence { .. } => "sequence",
            ModalityShape::Tabular { .. } => "tabular",
        }
    }

    /// Hidden sizes used when a config does not name any.
    pub fn default_hidden(&self) -> Vec<usize> {
        match self {
            ModalityShape::Image { .. } => vec![4, 8],
            ModalityShape::Sequence { .. } => vec![16],
            ModalityShape::Tabular { .. } => vec![32],
        }
    }
}

/// Architecture of one modality encoder.
///
/// `hidden` holds the two conv channel counts for images, the LSTM state
/// width for sequences, and the MLP hidden width for tabular inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    shape: ModalityShape,
    hidden: Vec<usize>,
    output_dim: usize,
}

const KERNEL: usize = 3;

/// Spatial extent after one valid 3x3 convolution and a 2x2 pool.
fn conv_pool(extent: usize) -> Option<usize> {
    extent.checked_sub(KERNEL - 1).map(|e| e / 2).filter(|&e| e > 0)
}

impl EncoderSpec {
    pub fn new(shape: ModalityShape, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        if output_dim == 0 || !output_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "encoder output width must be even and positive, got {output_dim}"
            )));
        }
        if shape.dims().contains(&0) || hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized encoder dimension in {shape:?} / hidden {hidden:?}"
            )));
        }
        let expected = match shape {
            ModalityShape::Image { height, width, .. } => {
                let h = conv_pool(height).and_then(conv_pool);
                let w = conv_pool(width).and_then(conv_pool);
                if h.is_none() || w.is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "image {height}x{width} too small for two conv3x3+pool2 stages"
                    )));
                }
                2
            }
            ModalityShape::Sequence { steps, .. } => {
                if steps == 0 {
                    return Err(Error::InvalidArgument("sequence needs T >= 1".into()));
                }
                1
            }
            ModalityShape::Tabular { .. } => 1,
        };
        if hidden.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{} encoder expects {expected} hidden sizes, got {hidden:?}",
                shape.kind_name()
            )));
        }
        Ok(Self {
            shape,
            hidden,
            output_dim,
        })
    }

    pub fn shape(&self) -> &ModalityShape {
        &self.shape
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn flat_image_width(&self) -> usize {
        match self.shape {
            ModalityShape::Image { height, width, .. } => {
                let h = conv_pool(height).and_then(conv_pool).unwrap_or(0);
                let w = conv_pool(width).and_then(conv_pool).unwrap_or(0);
                self.hidden[1] * h * w
            }
            _ => 0,
        }
    }

    /// Parameter names and shapes, each with its initialization fan-in.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let out = self.output_dim;
        match self.shape {
            ModalityShape::Tabular { features } => {
                let h = self.hidden[0];
                vec![
                    ("w1", vec![features, h], features),
                    ("b1", vec![h], features),
                    ("w2", vec![h, out], h),
                    ("b2", vec![out], h),
                ]
            }
            ModalityShape::Image { channels, .. } => {
                let (c1, c2) = (self.hidden[0], self.hidden[1]);
                let fan1 = channels * KERNEL * KERNEL;
                let fan2 = c1 * KERNEL * KERNEL;
                let flat = self.flat_image_width();
                vec![
                    ("conv1.w", vec![c1, channels, KERNEL, KERNEL], fan1),
                    ("conv1.b", vec![c1, 1, 1], fan1),
                    ("conv2.w", vec![c2, c1, KERNEL, KERNEL], fan2),
                    ("conv2.b", vec![c2, 1, 1], fan2),
                    ("fc.w", vec![flat, out], flat),
                    ("fc.b", vec![out], flat),
                ]
            }
            ModalityShape::Sequence { features, .. } => {
                let h = self.hidden[0];
                // gates see [x_t, h_{t-1}]
                let fan = features + h;
                vec![
                    ("lstm.wx", vec![features, 4 * h], fan),
                    ("lstm.wh", vec![h, 4 * h], fan),
                    ("lstm.b", vec![4 * h], fan),
                    ("fc.w", vec![h, out], h),
                    ("fc.b", vec![out], h),
                ]
            }
        }
    }

    /// Adds uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) parameters under
    /// `prefix`. The LSTM forget-gate bias starts at 1.
    pub fn init_params<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R, into: &mut ParamSet) {
        for (name, shape, fan_in) in self.layout() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::uniform(&shape, bound, rng);
            if name == "lstm.b" {
                let h = self.hidden[0];
                t.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
            into.insert(format!("{prefix}.{name}"), t);
        }
    }

    /// Encodes a batch `[B, ...shape]` into `[B, 2d]` features.
    pub fn encode(&self, tape: &Tape, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let p = |name: &str| params.get(&format!("{prefix}.{name}"));
        match self.shape {
            ModalityShape::Tabular { .. } => {
                encode_tabular(tape, x, p("w1")?, p("b1")?, p("w2")?, p("b2")?)
            }
            ModalityShape::Image { .. } => encode_image(
                tape,
                x,
                &ImageParams {
                    conv1: (p("conv1.w")?, p("conv1.b")?),
                    conv2: (p("conv2.w")?, p("conv2.b")?),
                    fc: (p("fc.w")?, p("fc.b")?),
                },
            ),
            ModalityShape::Sequence { .. } => encode_sequence(
                tape,
                x,
                &SequenceParams {
                    wx: p("lstm.wx")?,
                    wh: p("lstm.wh")?,
                    b: p("lstm.b")?,
                    fc: (p("fc.w")?, p("fc.b")?),
                },
            ),
        }
    }
}

fn affine(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.add(tape.matmul(x, w)?, b)
}

/// Two affine layers with a ReLU between: `[B, p] -> [B, 2d]`.
pub fn encode_tabular(tape: &Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let (sx, sw) = (tape.shape(x), tape.shape(w1));
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(Error::shape("encode_tabular", &sx, &sw));
    }
    let h = tape.relu(affine(tape, x, w1, b1)?);
    affine(tape, h, w2, b2)
}

pub struct ImageParams {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub fc: (Var, Var),
}

/// Two conv3x3 + ReLU + maxpool2 stages, flatten, affine: `[B, C, H, W] -> [B, 2d]`.
pub fn encode_image(tape: &Tape, x: Var, p: &ImageParams) -> Result<Var> {
    let sx = tape.shape(x);
    if sx.len() != 4 {
        return Err(Error::shape("encode_image", &sx, &tape.shape(p.conv1.0)));
    }
    let stage = |input: Var, (w, b): (Var, Var)| -> Result<Var> {
        let conv = tape.add(tape.conv2d(input, w)?, b)?;
        tape.max_pool2d(tape.relu(conv))
    };
    let h = stage(stage(x, p.conv1)?, p.conv2)?;
    let s = tape.shape(h);
    let flat = tape.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
    let (sf, sw) = (tape.shape(flat), tape.shape(p.fc.0));
    if sf[1] != sw[0] {
        return Err(Error::shape("encode_image", &sf, &sw));
    }
    affine(tape, flat, p.fc.0, p.fc.1)
}

pub struct SequenceParams {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub fc: (Var, Var),
}

/// Single-layer LSTM (gate order input, forget, cell, output) from a zero
/// initial state; the final hidden state goes through one affine layer.
pub fn encode_sequence(tape: &Tape, x: Var, p: &SequenceParams) -> Result<Var> {
    let sx = tape.shape(x);
    let sw = tape.shape(p.wx);
    if sx.len() != 3 || sw.len() != 2 || sx[2] != sw[0] {
        return Err(Error::shape("encode_sequence", &sx, &sw));
    }
    let (batch, steps, features) = (sx[0], sx[1], sx[2]);
    if steps == 0 {
        return Err(Error::InvalidArgument("encode_sequence: T = 0".into()));
    }
    let hidden = sw[1] / 4;
    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[batch, hidden]));
    for t in 0..steps {
        let xt = tape.reshape(tape.slice(x, 1, t, t + 1)?, &[batch, features])?;
        let gates = tape.add(
            tape.add(tape.matmul(xt, p.wx)?, tape.matmul(h, p.wh)?)?,
            p.b,
        )?;
        let gate = |k: usize| tape.slice(gates, 1, k * hidden, (k + 1) * hidden);
        let i = tape.sigmoid(gate(0)?);
        let f = tape.sigmoid(gate(1)?);
        let g = tape.tanh(gate(2)?);
        let o = tape.sigmoid(gate(3)?);
        c = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
        h = tape.mul(o, tape.tanh(c))?;
    }
    affine(tape, h, p.fc.0, p.fc.1)
}

/// Tape handles for one modality's full feature and its two halves.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFeatures {
    pub full: Var,
    pub aligned: Var,
    pub context: Var,
}

/// Splits `[B, 2d]` features into aligned `[:, 0:d]` and context `[:, d:2d]`.
pub fn decompose(tape: &Tape, z: Var) -> Result<ModalityFeatures> {
    let s = tape.shape(z);
    if s.len() != 2 || !s[1].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "decompose needs [B, 2d] features, got {s:?}"
        )));
    }
    let d = s[1] / 2;
    Ok(ModalityFeatures {
        full: z,
        aligned: tape.slice(z, 1, 0, d)?,
        context: tape.slice(z, 1, d, 2 * d)?,
    })
}

/// Linear classifier `[B, F] -> [B, C]`.
pub fn classify(tape: &Tape, f: Var, w: Var, b: Var) -> Result<Var> {
    let (sf, sw) = (tape.shape(f), tape.shape(w));
    if sf.len() != 2 || sw.len() != 2 || sf[1] != sw[0] {
        return Err(Error::shape("classify", &sf, &sw));
    }
    affine(tape, f, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn odd_output_width_rejected() {
        let shape = ModalityShape::Tabular { features: 3 };
        assert!(EncoderSpec::new(shape, vec![4], 5).is_err());
    }

    #[test]
    fn tiny_image_rejected_at_construction() {
        let shape = ModalityShape::Image {
            channels: 1,
            height: 8,
            width: 8,
        };
        assert!(EncoderSpec::new(shape, vec![2, 2], 4).is_err());
        let shape = ModalityShape::Image {
            channels: 1,
            height: 10,
            width: 10,
        };
        assert!(EncoderSpec::new(shape, vec![2, 2], 4).is_ok());
    }

    #[test]
    fn tabular_zero_weights_give_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3]));
        let w1 = tape.constant(Tensor::zeros(&[3, 4]));
        let b1 = tape.constant(Tensor::zeros(&[4]));
        let w2 = tape.constant(Tensor::zeros(&[4, 6]));
        let b2 = tape.constant(Tensor::zeros(&[6]));
        let out = encode_tabular(&tape, x, w1, b1, w2, b2).unwrap();
        assert_eq!(tape.value(out), Tensor::zeros(&[2, 6]));
    }

    #[test]
    fn tabular_hand_computed() {
        // x = [1, -2]; W1 = I (2x2), b1 = [0, 1] -> relu([1, -1]) = [1, 0]
        // W2 = [[1, 2, 0, 0], [5, 5, 5, 5]], b2 = [0, 0, 0, 1] -> [1, 2, 0, 1]
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, -2.0]));
        let w1 = tape.constant(Tensor::identity(2));
        let b1 = tape.constant(t(&[2], &[0.0, 1.0]));
        let w2 = tape.constant(t(&[2, 4], &[1.0, 2.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0]));
        let b2 = tape.constant(t(&[4], &[0.0, 0.0, 0.0, 1.0]));
        let out = encode_tabular(&tape, x, w1, b1, w2, b2).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn tabular_batch_of_32() {
        let spec = EncoderSpec::new(ModalityShape::Tabular { features: 5 }, vec![8], 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        spec.init_params("m", &mut rng, &mut ps);
        let tape = Tape::new();
        let bound = ps.bind(&tape, false);
        let x = tape.constant(Tensor::randn(&[32, 5], &mut rng));
        let out = spec.encode(&tape, &bound, "m", x).unwrap();
        assert_eq!(tape.shape(out), vec![32, 32]);
    }

    /// Brute-force sliding-window cross-correlation.
    fn xcorr(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..h - 2 {
            for x in 0..w - 2 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += img[(y + ky) * w + x + kx] * k[ky * 3 + kx];
                    }
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window() {
        let img: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let k = [1.0, 0.0, -1.0, 2.0, 0.5, -2.0, 1.0, 0.0, -1.0];
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4, 4], &img));
        let kv = tape.constant(t(&[1, 1, 3, 3], &k));
        let out = tape.conv2d(x, kv).unwrap();
        let expect = xcorr(&img, 4, 4, &k);
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn image_spec() -> EncoderSpec {
        let shape = ModalityShape::Image {
            channels: 1,
            height: 10,
            width: 11,
        };
        EncoderSpec::new(shape, vec![2, 3], 6).unwrap()
    }

    #[test]
    fn image_zero_input_zero_bias_gives_zero() {
        let spec = image_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        spec.init_params("img", &mut rng, &mut ps);
        for (name, t) in ps.iter_mut() {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::new();
        let bound = ps.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[3, 1, 10, 11]));
        let out = spec.encode(&tape, &bound, "img", x).unwrap();
        assert_eq!(tape.value(out), Tensor::zeros(&[3, 6]));
    }

    #[test]
    fn image_output_width_fixed() {
        for (h, w) in [(10, 10), (14, 12), (21, 17)] {
            let shape = ModalityShape::Image {
                channels: 2,
                height: h,
                width: w,
            };
            let spec = EncoderSpec::new(shape, vec![2, 2], 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut ps = ParamSet::new();
            spec.init_params("i", &mut rng, &mut ps);
            let tape = Tape::new();
            let bound = ps.bind(&tape, false);
            let x = tape.constant(Tensor::randn(&[2, 2, h, w], &mut rng));
            let out = spec.encode(&tape, &bound, "i", x).unwrap();
            assert_eq!(tape.shape(out), vec![2, 8]);
        }
    }

    fn zero_lstm(tape: &Tape, p: usize, h: usize, out: usize, fc_b: &[f64]) -> SequenceParams {
        SequenceParams {
            wx: tape.constant(Tensor::zeros(&[p, 4 * h])),
            wh: tape.constant(Tensor::zeros(&[h, 4 * h])),
            b: tape.constant(Tensor::zeros(&[4 * h])),
            fc: (
                tape.constant(Tensor::ones(&[h, out])),
                tape.constant(t(&[out], fc_b)),
            ),
        }
    }

    #[test]
    fn lstm_single_zero_step_is_affine_of_zero() {
        let tape = Tape::new();
        let p = zero_lstm(&tape, 2, 3, 2, &[0.5, -0.5]);
        let x = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let out = encode_sequence(&tape, x, &p).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -0.5]);
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn lstm_matches_unrolled_recurrence() {
        // hidden 2, input 1, two steps; gates [i0 i1 f0 f1 g0 g1 o0 o1]
        let wx = [0.5, -0.3, 0.2, 0.1, 0.9, -0.7, 0.4, 0.3];
        let wh = [
            0.1, 0.0, -0.2, 0.3, 0.5, 0.1, 0.0, -0.1, //
            0.2, 0.1, 0.0, -0.4, -0.3, 0.6, 0.2, 0.0,
        ];
        let b = [0.0, 0.1, 1.0, 1.0, -0.1, 0.2, 0.0, 0.05];
        let xs = [0.8, -1.2];
        let (mut h, mut c) = ([0.0f64; 2], [0.0f64; 2]);
        for &x in &xs {
            let mut z = [0.0; 8];
            for k in 0..8 {
                z[k] = x * wx[k] + h[0] * wh[k] + h[1] * wh[8 + k] + b[k];
            }
            let mut nh = [0.0; 2];
            for u in 0..2 {
                let (i, f, g, o) = (sig(z[u]), sig(z[2 + u]), z[4 + u].tanh(), sig(z[6 + u]));
                c[u] = f * c[u] + i * g;
                nh[u] = o * c[u].tanh();
            }
            h = nh;
        }
        let tape = Tape::new();
        let p = SequenceParams {
            wx: tape.constant(t(&[1, 8], &wx)),
            wh: tape.constant(t(&[2, 8], &wh)),
            b: tape.constant(t(&[8], &b)),
            fc: (tape.constant(Tensor::identity(2)), tape.constant(Tensor::zeros(&[2]))),
        };
        let x = tape.constant(t(&[1, 2, 1], &xs));
        let out = encode_sequence(&tape, x, &p).unwrap();
        let got = tape.value(out);
        assert!((got.data()[0] - h[0]).abs() < 1e-14);
        assert!((got.data()[1] - h[1]).abs() < 1e-14);
    }

    #[test]
    fn lstm_gradient_through_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            Tensor::randn(&[2, 3, 2], &mut rng),
            Tensor::uniform(&[2, 12], 0.5, &mut rng),
            Tensor::uniform(&[3, 12], 0.5, &mut rng),
            Tensor::uniform(&[12], 0.5, &mut rng),
            Tensor::uniform(&[3, 4], 0.5, &mut rng),
            Tensor::uniform(&[4], 0.5, &mut rng),
        ];
        let r = check_gradients(&inputs, 1e-5, |tape, v| {
            let p = SequenceParams {
                wx: v[1],
                wh: v[2],
                b: v[3],
                fc: (v[4], v[5]),
            };
            let out = encode_sequence(tape, v[0], &p)?;
            Ok(tape.sum_all(tape.square(out)?))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_steps_rejected() {
        let shape = ModalityShape::Sequence {
            steps: 0,
            features: 2,
        };
        assert!(EncoderSpec::new(shape, vec![2], 4).is_err());
    }

    #[test]
    fn decompose_halves() {
        let tape = Tape::new();
        let z = tape.leaf(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let f = decompose(&tape, z).unwrap();
        assert_eq!(tape.value(f.aligned).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(f.context).data(), &[3.0, 4.0]);
        let back = tape.concat(&[f.aligned, f.context], 1).unwrap();
        assert_eq!(tape.value(back), tape.value(z));
        tape.backward(tape.sum_all(f.aligned)).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);

        let odd = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(decompose(&tape, odd).is_err());
    }

    #[test]
    fn classify_examples() {
        let tape = Tape::new();
        let f = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 3], &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]));
        let b = tape.constant(t(&[3], &[0.5, 0.0, 0.0]));
        let logits = classify(&tape, f, w, b).unwrap();
        assert_eq!(tape.value(logits).data(), &[1.5, 2.0, 0.0]);

        let zw = tape.constant(Tensor::zeros(&[2, 4]));
        let zb = tape.constant(Tensor::zeros(&[4]));
        let logits = classify(&tape, f, zw, zb).unwrap();
        let loss = tape.cross_entropy(logits, &[3]).unwrap();
        assert!((tape.item(loss) - 4f64.ln()).abs() < 1e-15);

        let bad = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(classify(&tape, f, bad, zb).is_err());
    }
}
