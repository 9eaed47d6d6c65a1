//! Attention fusion over aligned features plus context concatenation, the
//! ablation fusion variants, and the supervised classification loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::encoders::{classify, ModalityFeatures};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Attended aligned part concatenated with every context half.
    #[default]
    Full,
    /// All full features side by side, no decomposition.
    Concat,
    /// Attended aligned part only.
    AlignedOnly,
    /// Elementwise sum of the full features.
    Add,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Full,
        FusionMode::Concat,
        FusionMode::AlignedOnly,
        FusionMode::Add,
    ];

    /// Classifier input width for `modalities` encoders with half-width `d`.
    pub fn fused_width(self, d: usize, modalities: usize) -> usize {
        match self {
            FusionMode::Full => d + modalities * d,
            FusionMode::Concat => 2 * d * modalities,
            FusionMode::AlignedOnly => d,
            FusionMode::Add => 2 * d,
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::AlignedOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::Concat => "concat",
            FusionMode::AlignedOnly => "aligned_only",
            FusionMode::Add => "add",
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shared `d x d` query/key/value maps.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// `q = W_q a`, `k = W_k a`, `v = W_v a` for every modality, with row
/// vectors: `q = a W_q^T`.
pub fn qkv_project(tape: &Tape, aligned: &[Var], params: &FusionParams) -> Result<Vec<Projection>> {
    let map = |x: Var, w: Var| -> Result<Var> {
        let (sx, sw) = (tape.shape(x), tape.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sw[1] || sx[1] != sw[1] {
            return Err(Error::shape("qkv_project", &sx, &sw));
        }
        tape.matmul(x, tape.transpose(w)?)
    };
    aligned
        .iter()
        .map(|&a| {
            Ok(Projection {
                q: map(a, params.wq)?,
                k: map(a, params.wk)?,
                v: map(a, params.wv)?,
            })
        })
        .collect()
}

/// For each source modality `m`, a `[B, M]` matrix whose row `j` is
/// `softmax_n(q_j^m . k_j^n / sqrt(d))`.
pub fn attention_weights(tape: &Tape, proj: &[Projection]) -> Result<Vec<Var>> {
    let first = proj
        .first()
        .ok_or_else(|| Error::InvalidArgument("attention over zero modalities".into()))?;
    let s = tape.shape(first.q);
    let (batch, d) = (s[0], s[1]);
    let scale = 1.0 / (d as f64).sqrt();
    proj.iter()
        .map(|pm| {
            let scores = proj
                .iter()
                .map(|pn| {
                    let dot = tape.sum(tape.mul(pm.q, pn.k)?, 1)?;
                    tape.reshape(dot, &[batch, 1])
                })
                .collect::<Result<Vec<_>>>()?;
            let scores = tape.scale(tape.concat(&scores, 1)?, scale);
            tape.softmax(scores, 1)
        })
        .collect()
}

/// `sum_{m,n} a^{mn} v^n`, one `[B, d]` block.
fn attend(tape: &Tape, weights: &[Var], proj: &[Projection]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &a in weights {
        for (n, pn) in proj.iter().enumerate() {
            let w = tape.slice(a, 1, n, n + 1)?;
            let term = tape.mul(w, pn.v)?;
            acc = Some(match acc {
                Some(s) => tape.add(s, term)?,
                None => term,
            });
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("attention over zero modalities".into()))
}

/// Attended aligned block `[B, d]` for the given modality features.
pub fn attended_part(tape: &Tape, feats: &[ModalityFeatures], params: &FusionParams) -> Result<Var> {
    let aligned: Vec<Var> = feats.iter().map(|f| f.aligned).collect();
    let proj = qkv_project(tape, &aligned, params)?;
    let weights = attention_weights(tape, &proj)?;
    attend(tape, &weights, &proj)
}

/// `CONCAT(sum_{m,n} a^{mn} v^n, z^{1c}, ..., z^{Mc})`: `[B, d + M d]`.
pub fn fuse(tape: &Tape, feats: &[ModalityFeatures], params: &FusionParams) -> Result<Var> {
    let mut parts = vec![attended_part(tape, feats, params)?];
    parts.extend(feats.iter().map(|f| f.context));
    tape.concat(&parts, 1)
}

/// Fused feature under the chosen strategy. `params` may be `None` for
/// modes that do not use attention.
pub fn fuse_variant(
    tape: &Tape,
    feats: &[ModalityFeatures],
    mode: FusionMode,
    params: Option<&FusionParams>,
) -> Result<Var> {
    if feats.is_empty() {
        return Err(Error::InvalidArgument("fusion over zero modalities".into()));
    }
    let need = || {
        params.ok_or_else(|| Error::InvalidArgument(format!("{mode} fusion needs Q/K/V params")))
    };
    match mode {
        FusionMode::Full => fuse(tape, feats, need()?),
        FusionMode::AlignedOnly => attended_part(tape, feats, need()?),
        FusionMode::Concat => {
            let full: Vec<Var> = feats.iter().map(|f| f.full).collect();
            tape.concat(&full, 1)
        }
        FusionMode::Add => {
            let mut acc = feats[0].full;
            for f in &feats[1..] {
                let (sa, sb) = (tape.shape(acc), tape.shape(f.full));
                if sa != sb {
                    return Err(Error::shape("add fusion", &sa, &sb));
                }
                acc = tape.add(acc, f.full)?;
            }
            Ok(acc)
        }
    }
}

/// Mean cross-entropy of the classifier on fused features.
pub fn classification_loss(tape: &Tape, fused: Var, labels: &[usize], w: Var, b: Var) -> Result<Var> {
    let logits = classify(tape, fused, w, b)?;
    tape.cross_entropy(logits, labels)
}
