use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::partition::apportion;
use super::MultimodalSample;
use crate::error::{Error, Result};

/// Share of a client's samples held out for testing (a 4:1 train/test split).
pub const TEST_FRACTION: f64 = 0.2;

/// A client's local data.
///
/// `unlabeled` samples have their label stripped; the true labels are kept
/// aside in `unlabeled_truth` for diagnostics and never reach training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientSplit {
    pub labeled: Vec<MultimodalSample>,
    pub unlabeled: Vec<MultimodalSample>,
    pub unlabeled_truth: Vec<usize>,
    pub test: Vec<MultimodalSample>,
}

impl ClientSplit {
    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.test.len()
    }
}

/// Takes `k` items from the groups, proportionally per group. Returns
/// `(taken, rest)`, each in group order.
fn stratified_take(groups: &[Vec<usize>], k: usize) -> (Vec<usize>, Vec<usize>) {
    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    let quotas = apportion(k, &sizes);
    let mut taken = Vec::new();
    let mut rest = Vec::new();
    for (g, &q) in groups.iter().zip(&quotas) {
        taken.extend_from_slice(&g[..q]);
        rest.extend_from_slice(&g[q..]);
    }
    (taken, rest)
}

fn group_by_label(idx: &[usize], labels: &[usize], stratify: bool) -> Vec<Vec<usize>> {
    if !stratify {
        return vec![idx.to_vec()];
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); classes];
    for &i in idx {
        groups[labels[i]].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Splits labeled samples into labeled-train, unlabeled-train and test sets:
/// 20% test, then `label_ratio` of the training part keeps its labels.
/// Stratified by class unless some class has fewer than two samples.
pub fn split_client_data(
    samples: Vec<MultimodalSample>,
    label_ratio: f64,
    seed: u64,
) -> Result<ClientSplit> {
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label_ratio must lie in (0, 1], got {label_ratio}"
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "{n} samples cannot form nonempty train and test sets"
        )));
    }
    let labels = samples
        .iter()
        .map(MultimodalSample::label)
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut counts = std::collections::BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let stratify = counts.values().all(|&c| c >= 2);
    if !stratify {
        log::info!("client has a class with < 2 samples; using an unstratified split");
    }

    let n_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1);
    let (test, train) = stratified_take(&group_by_label(&order, &labels, stratify), n_test);
    let n_train = train.len();
    let n_labeled = ((n_train as f64 * label_ratio).round() as usize).clamp(1, n_train);
    let (labeled, unlabeled) =
        stratified_take(&group_by_label(&train, &labels, stratify), n_labeled);

    let take = |idx: &[usize]| -> Vec<MultimodalSample> {
        idx.iter().map(|&i| samples[i].clone()).collect()
    };
    let unlabeled_truth = unlabeled.iter().map(|&i| labels[i]).collect();
    let mut unlabeled_samples = take(&unlabeled);
    for s in &mut unlabeled_samples {
        s.label = None;
    }
    Ok(ClientSplit {
        labeled: take(&labeled),
        unlabeled: unlabeled_samples,
        unlabeled_truth,
        test: take(&test),
    })
}
