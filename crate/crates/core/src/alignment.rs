//! Unsupervised modality alignment: cross-modal contrastive consistency on
//! aligned halves, HSIC independence between the halves of each modality,
//! and a Jensen-Shannon term over context halves.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::encoders::ModalityFeatures;
use crate::error::{Error, Result};

/// Gaussian kernel width for HSIC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance within the batch, recomputed per call and
    /// treated as a constant.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub tau: f64,
    pub lambda1: f64,
    /// Weight on the JSD term. Negative values reward divergence.
    pub lambda2: f64,
    pub bandwidth: Bandwidth,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda1: 1.0,
            lambda2: -0.1,
            bandwidth: Bandwidth::Median,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) {
                return Err(Error::Config(format!("kernel bandwidth must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn batch_rows(tape: &Tape, feats: &[ModalityFeatures]) -> Result<usize> {
    let first = feats
        .first()
        .ok_or_else(|| Error::InvalidArgument("no modalities".into()))?;
    let rows = tape.shape(first.aligned)[0];
    for f in feats {
        if tape.shape(f.aligned)[0] != rows {
            return Err(Error::shape(
                "alignment",
                &tape.shape(first.aligned),
                &tape.shape(f.aligned),
            ));
        }
    }
    Ok(rows)
}

/// Rows scaled to unit L2 norm; a zero row is an error.
fn normalize_rows(tape: &Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let sq = tape.sum(tape.square(x)?, 1)?;
    if tape.with_value(sq, |t| t.data().contains(&0.0)) {
        return Err(Error::domain("cosine_similarity", "zero-norm feature row"));
    }
    let norm = tape.reshape(tape.sqrt(sq)?, &[s[0], 1])?;
    tape.div(x, norm)
}

/// Per-anchor InfoNCE summed over anchors and ordered modality pairs.
///
/// For pair `(m, n)` and anchor `j` the positive is `sim(a_j^m, a_j^n)` and
/// the denominator sums `exp(sim(a_j^m, a_k^n) / tau)` over `k != j`.
pub fn contrastive_loss(tape: &Tape, feats: &[ModalityFeatures], tau: f64) -> Result<Var> {
    if feats.len() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two modalities".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let n = batch_rows(tape, feats)?;
    if n < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs a batch of at least 2 (no negatives)".into(),
        ));
    }
    let unit: Vec<Var> = feats
        .iter()
        .map(|f| normalize_rows(tape, f.aligned))
        .collect::<Result<_>>()?;
    let eye = tape.constant(Tensor::identity(n));
    let off_diag = tape.constant(Tensor::ones(&[n, n]).zip_map(&Tensor::identity(n), |a, b| a - b)?);
    // cosine <= 1, so logits <= 1/tau; shifting by that bound keeps exp finite.
    let shift = 1.0 / tau;
    let mut total: Option<Var> = None;
    for (m, &um) in unit.iter().enumerate() {
        for (k, &un) in unit.iter().enumerate() {
            if m == k {
                continue;
            }
            let logits = tape.scale(tape.matmul(um, tape.transpose(un)?)?, 1.0 / tau);
            let positive = tape.sum(tape.mul(logits, eye)?, 1)?;
            let shifted = tape.exp(tape.add_scalar(logits, -shift));
            let denom = tape.log(tape.sum(tape.mul(shifted, off_diag)?, 1)?)?;
            let per_anchor = tape.sub(tape.add_scalar(denom, shift), positive)?;
            let term = tape.sum_all(per_anchor);
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("at least one ordered pair"))
}

/// Median pairwise Euclidean distance between rows (`i < j`).
pub fn median_distance(x: &Tensor) -> f64 {
    let n = x.shape()[0];
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

fn resolve_sigma(tape: &Tape, x: Var, bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(s) if s > 0.0 => Ok(s),
        Bandwidth::Fixed(s) => Err(Error::InvalidArgument(format!(
            "hsic: bandwidth must be > 0, got {s}"
        ))),
        Bandwidth::Median => {
            let med = tape.with_value(x, median_distance);
            // Identical rows: any width yields the same constant kernel.
            Ok(if med > 0.0 { med } else { 1.0 })
        }
    }
}

/// `K[i][j] = exp(-|x_i - x_j|^2 / (2 sigma^2))` over rows.
fn gaussian_kernel(tape: &Tape, x: Var, sigma: f64) -> Result<Var> {
    let s = tape.shape(x);
    let (n, d) = (s[0], s[1]);
    let a = tape.reshape(x, &[n, 1, d])?;
    let b = tape.reshape(x, &[1, n, d])?;
    let dist = tape.sum(tape.square(tape.sub(a, b)?)?, 2)?;
    Ok(tape.exp(tape.scale(dist, -1.0 / (2.0 * sigma * sigma))))
}

/// Biased HSIC estimator `Tr(K_P H K_Q H) / (n - 1)^2` with Gaussian kernels
/// over the `n` rows and `H = I - 1/n`.
pub fn hsic(tape: &Tape, p: Var, q: Var, bw: Bandwidth) -> Result<Var> {
    let (sp, sq) = (tape.shape(p), tape.shape(q));
    if sp.len() != 2 || sq.len() != 2 || sp[0] != sq[0] {
        return Err(Error::shape("hsic", &sp, &sq));
    }
    let n = sp[0];
    if n < 2 {
        return Err(Error::InvalidArgument("hsic needs at least 2 rows".into()));
    }
    let kp = gaussian_kernel(tape, p, resolve_sigma(tape, p, bw)?)?;
    let kq = gaussian_kernel(tape, q, resolve_sigma(tape, q, bw)?)?;
    let centering = Tensor::identity(n).map(|v| v - 1.0 / n as f64);
    let h = tape.constant(centering);
    let a = tape.matmul(kp, h)?;
    let b = tape.matmul(kq, h)?;
    // Tr(A B) = sum(A .* B^T)
    let trace = tape.sum_all(tape.mul(a, tape.transpose(b)?)?);
    Ok(tape.scale(trace, 1.0 / ((n - 1) as f64).powi(2)))
}

/// Sum over modalities of `hsic(aligned, context)` on the batch.
pub fn hsic_loss(tape: &Tape, feats: &[ModalityFeatures], bw: Bandwidth) -> Result<Var> {
    let mut total: Option<Var> = None;
    for f in feats {
        let term = hsic(tape, f.aligned, f.context, bw)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no modalities".into()))
}

/// `0.5 * (KL(P || M) + KL(M || Q))` with `M = (P + Q) / 2`, where `P` and
/// `Q` are the softmax distributions of the two raw vectors. Written exactly
/// in this form, so it is not symmetric in its arguments.
pub fn jsd(tape: &Tape, p_vec: Var, q_vec: Var) -> Result<Var> {
    let (sp, sq) = (tape.shape(p_vec), tape.shape(q_vec));
    if sp.len() != 1 || sp != sq {
        return Err(Error::shape("jsd", &sp, &sq));
    }
    let d = sp[0];
    let p = tape.reshape(p_vec, &[1, d])?;
    let q = tape.reshape(q_vec, &[1, d])?;
    tape.pairwise_jsd(p, q)
}

/// Diversity loss plus the number of `jsd` terms it summed.
pub fn jsd_loss_counted(tape: &Tape, feats: &[ModalityFeatures]) -> Result<(Var, usize)> {
    if feats.len() < 2 {
        return Err(Error::InvalidArgument(
            "jsd loss needs at least two modalities".into(),
        ));
    }
    batch_rows(tape, feats)?;
    let mut total: Option<Var> = None;
    let mut terms = 0;
    for (m, fm) in feats.iter().enumerate() {
        for (n, fn_) in feats.iter().enumerate() {
            if m == n {
                continue;
            }
            let term = tape.pairwise_jsd(fm.context, fn_.context)?;
            terms += tape.shape(fm.context)[0] * tape.shape(fn_.context)[0];
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    Ok((total.expect("at least one ordered pair"), terms))
}

/// Sum of `jsd(c_j^m, c_k^n)` over all sample pairs and ordered modality
/// pairs `m != n`.
pub fn jsd_loss(tape: &Tape, feats: &[ModalityFeatures]) -> Result<Var> {
    jsd_loss_counted(tape, feats).map(|(v, _)| v)
}

/// `L_con + lambda1 * L_hsic + lambda2 * L_jsd`. Zero-weighted terms are
/// not evaluated.
pub fn align_loss(tape: &Tape, feats: &[ModalityFeatures], cfg: &AlignConfig) -> Result<Var> {
    cfg.validate()?;
    let mut loss = contrastive_loss(tape, feats, cfg.tau)?;
    if cfg.lambda1 != 0.0 {
        let h = hsic_loss(tape, feats, cfg.bandwidth)?;
        loss = tape.add(loss, tape.scale(h, cfg.lambda1))?;
    }
    if cfg.lambda2 != 0.0 {
        let j = jsd_loss(tape, feats)?;
        loss = tape.add(loss, tape.scale(j, cfg.lambda2))?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use crate::encoders::decompose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats_from(tape: &Tape, zs: &[Tensor]) -> Vec<ModalityFeatures> {
        zs.iter()
            .map(|z| decompose(tape, tape.constant(z.clone())).unwrap())
            .collect()
    }

    // the divergence written out with primitive ops
    fn composed_pairwise_jsd(tape: &Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (sp, sq) = (tape.shape(p_logits), tape.shape(q_logits));
        let (bp, bq, d) = (sp[0], sq[0], sp[1]);
        let p = tape.reshape(tape.softmax(p_logits, 1)?, &[bp, 1, d])?;
        let log_p = tape.reshape(tape.log_softmax(p_logits, 1)?, &[bp, 1, d])?;
        let q = tape.reshape(tape.softmax(q_logits, 1)?, &[1, bq, d])?;
        let log_q = tape.reshape(tape.log_softmax(q_logits, 1)?, &[1, bq, d])?;
        let mix = tape.scale(tape.add(p, q)?, 0.5);
        let log_mix = tape.log(mix)?;
        let kl_p_mix = tape.sum_all(tape.mul(p, tape.sub(log_p, log_mix)?)?);
        let kl_mix_q = tape.sum_all(tape.mul(mix, tape.sub(log_mix, log_q)?)?);
        Ok(tape.scale(tape.add(kl_p_mix, kl_mix_q)?, 0.5))
    }

    #[test]
    fn fused_matches_composed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (bp, bq, d) in [(1, 1, 3), (3, 2, 4), (4, 4, 2)] {
            let tape = Tape::new();
            let p = tape.leaf(Tensor::randn(&[bp, d], &mut rng).map(|v| 3.0 * v));
            let q = tape.leaf(Tensor::randn(&[bq, d], &mut rng));
            let fused = tape.pairwise_jsd(p, q).unwrap();
            let composed = composed_pairwise_jsd(&tape, p, q).unwrap();
            let (a, b) = (tape.item(fused), tape.item(composed));
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        let check = check_gradients(
            &[Tensor::randn(&[3, 4], &mut rng), Tensor::randn(&[2, 4], &mut rng)],
            1e-6,
            |t, v| t.pairwise_jsd(v[0], v[1]),
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn contrastive_prefers_matching_positives() {
        // aligned parts (first 2 cols): orthonormal across samples, equal across modalities
        let tape = Tape::new();
        let z = Tensor::matrix(&[vec![1.0, 0.0, 0.3, 0.1], vec![0.0, 1.0, 0.2, 0.4]]).unwrap();
        let swapped = Tensor::matrix(&[vec![0.0, 1.0, 0.3, 0.1], vec![1.0, 0.0, 0.2, 0.4]]).unwrap();
        let good = contrastive_loss(&tape, &feats_from(&tape, &[z.clone(), z.clone()]), 0.1).unwrap();
        let bad = contrastive_loss(&tape, &feats_from(&tape, &[z, swapped]), 0.1).unwrap();
        assert!(tape.item(good) < tape.item(bad));
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 6], &mut rng)).collect();
        let scaled: Vec<Tensor> = zs.iter().map(|z| z.map(|v| 7.5 * v)).collect();
        let tape = Tape::new();
        let a = tape.item(contrastive_loss(&tape, &feats_from(&tape, &zs), 0.2).unwrap());
        let b = tape.item(contrastive_loss(&tape, &feats_from(&tape, &scaled), 0.2).unwrap());
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn contrastive_needs_two_rows_and_two_modalities() {
        let tape = Tape::new();
        let one = Tensor::ones(&[1, 4]);
        assert!(contrastive_loss(&tape, &feats_from(&tape, &[one.clone(), one]), 0.1).is_err());
        let two = Tensor::ones(&[2, 4]);
        assert!(contrastive_loss(&tape, &feats_from(&tape, &[two]), 0.1).is_err());
    }

    #[test]
    fn hsic_constant_rows_is_zero() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(&[5, 3], 0.7));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = tape.constant(Tensor::randn(&[5, 3], &mut rng));
        for bw in [Bandwidth::Median, Bandwidth::Fixed(1.0)] {
            assert!(tape.item(hsic(&tape, p, q, bw).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn hsic_self_is_nonnegative_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let tape = Tape::new();
            let p = tape.constant(Tensor::randn(&[6, 3], &mut rng));
            let q = tape.constant(Tensor::randn(&[6, 3], &mut rng));
            assert!(tape.item(hsic(&tape, p, p, Bandwidth::Median).unwrap()) >= 0.0);
            let pq = tape.item(hsic(&tape, p, q, Bandwidth::Median).unwrap());
            let qp = tape.item(hsic(&tape, q, p, Bandwidth::Median).unwrap());
            assert!((pq - qp).abs() <= 1e-10);
        }
    }

    #[test]
    fn hsic_errors() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[1, 2]));
        assert!(hsic(&tape, one, one, Bandwidth::Median).is_err());
        let p = tape.constant(Tensor::ones(&[3, 2]));
        assert!(hsic(&tape, p, p, Bandwidth::Fixed(0.0)).is_err());
    }

    #[test]
    fn jsd_of_identical_inputs_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5], &mut rng));
        assert!(tape.item(jsd(&tape, x, x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn jsd_loss_zero_when_contexts_identical_and_counts_terms() {
        let tape = Tape::new();
        let row = [0.1, -0.2, 0.5, 0.3, 0.7, -1.0];
        let z = Tensor::matrix(&[row.to_vec(), row.to_vec(), row.to_vec()]).unwrap();
        let feats = feats_from(&tape, &[z.clone(), z.clone(), z]);
        let (loss, terms) = jsd_loss_counted(&tape, &feats).unwrap();
        assert!(tape.item(loss).abs() < 1e-12);
        assert_eq!(terms, 3 * 3 * 3 * 2);
        assert!(jsd_loss(&tape, &feats[..1]).is_err());
    }

    #[test]
    fn align_loss_with_zero_weights_is_contrastive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 6], &mut rng)).collect();
        let tape = Tape::new();
        let feats = feats_from(&tape, &zs);
        let cfg = AlignConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..AlignConfig::default()
        };
        let a = tape.item(align_loss(&tape, &feats, &cfg).unwrap());
        let c = tape.item(contrastive_loss(&tape, &feats, cfg.tau).unwrap());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn jsd_finite_for_extreme_logits() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![2000.0, 0.0, -2000.0]).unwrap());
        let q = tape.leaf(Tensor::vector(vec![-2000.0, 0.0, 2000.0]).unwrap());
        let j = jsd(&tape, p, q).unwrap();
        assert!(tape.item(j).is_finite());
        tape.backward(j).unwrap();
        assert!(tape.grad(p).unwrap().is_finite() && tape.grad(q).unwrap().is_finite());
    }

    #[test]
    fn align_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[3, 4], &mut rng)).collect();
        let cfg = AlignConfig {
            bandwidth: Bandwidth::Fixed(1.5),
            ..AlignConfig::default()
        };
        let r = check_gradients(&inputs, 1e-5, |tape, vars| {
            let feats: Vec<_> = vars.iter().map(|&v| decompose(tape, v)).collect::<Result<_>>()?;
            align_loss(tape, &feats, &cfg)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
