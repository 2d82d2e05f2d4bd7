use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 100;

/// Assignment of every training example to exactly one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Client id for each example index.
    pub assignment: Vec<usize>,
    /// Draws discarded because some client came out empty.
    pub resamples: usize,
}

impl PartitionPlan {
    /// Example indices per client, each list in ascending order.
    pub fn shards(&self) -> Vec<Vec<usize>> {
        let mut shards = vec![Vec::new(); self.n_clients];
        for (i, &c) in self.assignment.iter().enumerate() {
            shards[c].push(i);
        }
        shards
    }

    /// `counts[client][class]`.
    pub fn class_counts(&self, labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; n_classes]; self.n_clients];
        for (&c, &y) in self.assignment.iter().zip(labels) {
            counts[c][y] += 1;
        }
        counts
    }
}

/// Label-skewed split: for each class, client shares are drawn from a
/// symmetric Dirichlet(`alpha`) and that class's examples are dealt out in
/// those proportions. A draw leaving any client empty is discarded and the
/// random stream continues; after 100 discarded draws this fails.
pub fn partition_dirichlet(labels: &[usize], n_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if labels.len() < n_clients {
        return Err(Error::Partition(format!(
            "{} examples cannot cover {n_clients} clients",
            labels.len()
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Partition(format!("alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let by_class: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for attempt in 0..MAX_ATTEMPTS {
        let mut assignment = vec![usize::MAX; labels.len()];
        let mut sizes = vec![0usize; n_clients];
        let mut degenerate = false;
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total.is_finite() && total > 0.0) {
                degenerate = true;
                continue;
            }
            let mut cumulative = 0.0;
            let mut start = 0;
            for (client, &g) in draws.iter().enumerate() {
                cumulative += g / total;
                let end = if client + 1 == n_clients {
                    members.len()
                } else {
                    ((cumulative * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                for &i in &members[start..end] {
                    assignment[i] = client;
                }
                sizes[client] += end - start;
                start = end;
            }
        }
        if !degenerate && sizes.iter().all(|&s| s > 0) {
            return Ok(PartitionPlan {
                n_clients,
                alpha,
                seed,
                assignment,
                resamples: attempt,
            });
        }
    }
    Err(Error::Partition(format!(
        "every one of {MAX_ATTEMPTS} draws left a client empty"
    )))
}
