use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::MultimodalSample;
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 10_000;

/// Splits `total` into integer counts proportional to `weights`
/// (largest-remainder rounding, ties to the lower index).
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet(beta: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet beta {beta}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // tiny beta can underflow every draw
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|d| d / sum).collect());
        }
    }
}

/// Assigns sample indices to `clients` by drawing, per class, client
/// proportions from `Dirichlet(beta, ..., beta)`.
///
/// The whole draw is repeated until every client holds at least
/// `min_per_client` samples (at least one).
pub fn dirichlet_partition_indices(
    labels: &[usize],
    clients: usize,
    beta: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    let min = min_per_client.max(1);
    if labels.len() < clients * min {
        return Err(Error::Data(format!(
            "{} samples cannot give {clients} clients {min} each",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let props = dirichlet(beta, clients, &mut rng)?;
            let mut start = 0;
            for (client, count) in apportion(shuffled.len(), &props).into_iter().enumerate() {
                parts[client].extend_from_slice(&shuffled[start..start + count]);
                start += count;
            }
        }
        if parts.iter().all(|p| p.len() >= min) {
            parts.iter_mut().for_each(|p| p.sort_unstable());
            return Ok(parts);
        }
    }
    Err(Error::Data(format!(
        "no partition with >= {min} samples per client after {MAX_ATTEMPTS} draws; \
         use a larger beta or fewer clients"
    )))
}

/// Partitions labeled samples across clients; see [`dirichlet_partition_indices`].
pub fn dirichlet_partition(
    samples: &[MultimodalSample],
    clients: usize,
    beta: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<MultimodalSample>>> {
    let labels = samples
        .iter()
        .map(MultimodalSample::label)
        .collect::<Result<Vec<_>>>()?;
    let parts = dirichlet_partition_indices(&labels, clients, beta, min_per_client, seed)?;
    Ok(parts
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| samples[i].clone()).collect())
        .collect())
}
