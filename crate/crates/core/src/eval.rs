//! Evaluation pipeline: reconstruction error, K-means on selected columns,
//! and partition-agreement scores (ARI, NMI).

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, StreamRng};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Mean over rows of the squared Euclidean reconstruction error.
pub fn msre(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "msre",
            lhs: x.shape(),
            rhs: x_hat.shape(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::Data("msre of an empty matrix".into()));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / x.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Number of clusters (the class count of the dataset).
    pub k: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_cluster_iters")]
    pub max_iters: usize,
    /// Stop a restart when the inertia improvement falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_restarts() -> usize {
    10
}
fn default_cluster_iters() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-4
}

impl ClusterConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        ClusterConfig {
            k,
            restarts: default_restarts(),
            max_iters: default_cluster_iters(),
            tol: default_tol(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::Config(
                "k, restarts and max_iters must be at least 1".into(),
            ));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::Config("tol must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Index of the winning restart.
    pub restart: usize,
    /// Per-restart inertia trace, one value per Lloyd iteration.
    pub histories: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(x: &Matrix, centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(x.rows());
    let mut inertia = 0.0;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(row, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels.push(best);
        inertia += best_d;
    }
    (labels, inertia)
}

/// Repairs empty clusters by seizing, for each, the point currently
/// farthest from its assigned centroid.
fn repair_empty(
    x: &Matrix,
    centroids: &[Vec<f64>],
    labels: &mut [usize],
    k: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far_i = 0;
        let mut far_d = -1.0;
        for i in 0..x.rows() {
            if counts[labels[i]] <= 1 {
                continue;
            }
            let d = sq_dist(x.row(i), &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far_i = i;
            }
        }
        labels[far_i] = empty;
    }
}

fn means(x: &Matrix, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = x.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for (sum, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for s in sum.iter_mut() {
                *s /= c as f64;
            }
        }
    }
    sums
}

fn kmeanspp_seed(x: &Matrix, k: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(x.row(rng.random_range(0..n)).to_vec());
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                r -= d;
                if r <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for i in 0..n {
            min_d2[i] = min_d2[i].min(sq_dist(x.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from given centroids; returns labels, final inertia
/// and the inertia after each assignment step.
fn lloyd(
    x: &Matrix,
    mut centroids: Vec<Vec<f64>>,
    k: usize,
    max_iters: usize,
    tol: f64,
) -> (Vec<usize>, f64, Vec<f64>) {
    let mut history = Vec::new();
    let mut labels = vec![0usize; x.rows()];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iters {
        let (mut new_labels, _) = assign(x, &centroids);
        repair_empty(x, &centroids, &mut new_labels, k);
        centroids = means(x, &new_labels, k);
        let (final_labels, new_inertia) = {
            // inertia measured against the updated centroids
            let mut total = 0.0;
            for (i, &l) in new_labels.iter().enumerate() {
                total += sq_dist(x.row(i), &centroids[l]);
            }
            (new_labels, total)
        };
        history.push(new_inertia);
        let improved = inertia - new_inertia;
        labels = final_labels;
        inertia = new_inertia;
        if improved < tol {
            break;
        }
    }
    (labels, inertia, history)
}

/// K-means++ with Lloyd refinement over independent restarts; the lowest
/// final inertia wins, ties by restart index. Deterministic per seed.
pub fn kmeans(x: &Matrix, cfg: &ClusterConfig) -> Result<KmeansResult> {
    cfg.validate()?;
    if x.rows() < cfg.k {
        return Err(Error::Data(format!(
            "cannot form {} clusters from {} instances",
            cfg.k,
            x.rows()
        )));
    }
    let mut best: Option<KmeansResult> = None;
    let mut histories = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut rng = stream_rng(cfg.seed, r as u64);
        let centroids = kmeanspp_seed(x, cfg.k, &mut rng);
        let (labels, inertia, history) = lloyd(x, centroids, cfg.k, cfg.max_iters, cfg.tol);
        histories.push(history);
        let better = match &best {
            None => true,
            Some(b) => inertia < b.inertia,
        };
        if better {
            best = Some(KmeansResult {
                labels,
                inertia,
                restart: r,
                histories: Vec::new(),
            });
        }
    }
    let mut out = best.expect("at least one restart");
    out.histories = histories;
    Ok(out)
}

fn check_labels(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "label lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Data("need at least 2 labeled points".into()));
    }
    Ok(())
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand Index via the contingency table; 1 for identical
/// partitions, 0 expected under independence. Degenerate cases where the
/// expected index equals the maximum index return 1 (total agreement).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_labels(a, b)?;
    let (table, rows, cols) = contingency(a, b);
    let n = a.len() as f64;
    let sum_ij: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.iter().map(|&v| choose2(v)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom.abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / denom)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the marginal
/// entropies (natural log); 0 when both partitions are trivial.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_labels(a, b)?;
    let (table, rows, cols) = contingency(a, b);
    let n = a.len() as f64;
    let ha = entropy(&rows, n);
    let hb = entropy(&cols, n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += (nij / n) * ((n * nij) / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok(mi / (0.5 * (ha + hb)))
}

/// Fraction of the deduplicated selection that hits planted signal
/// features.
pub fn recovery_precision(dedup: &[usize], signal: &[usize]) -> f64 {
    if dedup.is_empty() {
        return 0.0;
    }
    let sig: BTreeSet<usize> = signal.iter().copied().collect();
    let hits = dedup.iter().filter(|i| sig.contains(i)).count();
    hits as f64 / dedup.len() as f64
}

/// Clusters the task restricted to the deduplicated selected columns and
/// scores the result against the task's labels.
pub fn evaluate_selection(
    task: &TaskDataset,
    indices: &[usize],
    cfg: &ClusterConfig,
) -> Result<(f64, f64)> {
    let labels = task
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("task `{}` has no labels", task.task_id)))?;
    let dedup: Vec<usize> = {
        let mut v = indices.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if dedup.is_empty() {
        return Err(Error::Data("empty selection".into()));
    }
    let x = task.x.gather_cols(&dedup)?;
    let result = kmeans(&x, cfg)?;
    Ok((ari(labels, &result.labels)?, nmi(labels, &result.labels)?))
}
