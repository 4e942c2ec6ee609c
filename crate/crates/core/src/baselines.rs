//! Non-learned selectors: Laplacian Score over a kNN heat-kernel graph,
//! plus random and top-variance selectors as harness floors.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{sample_indices, StreamRng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsConfig {
    pub k_neighbors: usize,
    /// Heat-kernel bandwidth t in exp(-d^2 / t).
    pub heat_t: f64,
}

impl LsConfig {
    pub fn validate(&self, n_instances: usize) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if self.k_neighbors >= n_instances {
            return Err(Error::Config(format!(
                "k_neighbors={} needs more than {} instances",
                self.k_neighbors, n_instances
            )));
        }
        if !(self.heat_t.is_finite() && self.heat_t > 0.0) {
            return Err(Error::Config("heat_t must be positive".into()));
        }
        Ok(())
    }
}

/// Heat-kernel bandwidth candidates of the evaluation protocol.
pub const LS_HEAT_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
/// Neighbor-count candidates for LS on the target support alone (LS-T).
pub const LS_T_NEIGHBORS: [usize; 3] = [1, 3, 5];
/// Neighbor count for LS on support plus pooled sources (LS-ST).
pub const LS_ST_NEIGHBORS: usize = 5;

/// Grid of LS configurations for one protocol, dropping neighbor counts
/// that the instance count cannot support.
pub fn ls_grid(neighbors: &[usize], n_instances: usize) -> Vec<LsConfig> {
    let mut out = Vec::new();
    for &k in neighbors {
        if k >= n_instances {
            continue;
        }
        for &t in &LS_HEAT_GRID {
            out.push(LsConfig {
                k_neighbors: k,
                heat_t: t,
            });
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Symmetric kNN heat-kernel graph: an edge exists when either endpoint is
/// among the k nearest neighbors of the other. Returns the weight matrix
/// and per-node degrees.
pub fn laplacian_graph(x: &Matrix, cfg: &LsConfig) -> Result<(Matrix, Vec<f64>)> {
    let n = x.rows();
    cfg.validate(n)?;
    let mut d2 = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(x.row(i), x.row(j));
            d2.set(i, j, d);
            d2.set(j, i, d);
        }
    }
    let mut neighbor = vec![vec![false; n]; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d2.get(i, a).total_cmp(&d2.get(i, b)).then(a.cmp(&b)));
        for &j in order.iter().take(cfg.k_neighbors) {
            neighbor[i][j] = true;
        }
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && (neighbor[i][j] || neighbor[j][i]) {
                w.set(i, j, (-d2.get(i, j) / cfg.heat_t).exp());
            }
        }
    }
    let degrees: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    Ok((w, degrees))
}

/// Laplacian Score per feature; smaller means more relevant. A feature
/// with a degenerate variance denominator scores +inf (ranked last).
pub fn laplacian_score(x: &Matrix, cfg: &LsConfig) -> Result<Vec<f64>> {
    let (w, degrees) = laplacian_graph(x, cfg)?;
    let n = x.rows();
    let total_degree: f64 = degrees.iter().sum();
    let mut scores = Vec::with_capacity(x.cols());
    for r in 0..x.cols() {
        let f: Vec<f64> = (0..n).map(|i| x.get(i, r)).collect();
        let weighted_mean = if total_degree > 0.0 {
            f.iter().zip(&degrees).map(|(v, d)| v * d).sum::<f64>() / total_degree
        } else {
            0.0
        };
        let ft: Vec<f64> = f.iter().map(|v| v - weighted_mean).collect();
        let den: f64 = ft.iter().zip(&degrees).map(|(v, d)| v * v * d).sum();
        if den < 1e-12 {
            scores.push(f64::INFINITY);
            continue;
        }
        // f'Lf = f'Df - f'Wf
        let fwf: f64 = (0..n)
            .map(|i| ft[i] * (0..n).map(|j| w.get(i, j) * ft[j]).sum::<f64>())
            .sum();
        scores.push((den - fwf) / den);
    }
    Ok(scores)
}

/// Indices of the K best scores; `ascending` orders smaller-is-better.
/// Ties break toward the lower index; the result is in rank order.
pub fn select_by_score(scores: &[f64], k: usize, ascending: bool) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "cannot select {k} of {} features",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in selection".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = scores[a].total_cmp(&scores[b]);
        if ascending { cmp } else { cmp.reverse() }.then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Uniform K-subset of the features, in sorted order.
pub fn random_select(rng: &mut StreamRng, m: usize, k: usize) -> Result<Vec<usize>> {
    if k > m {
        return Err(Error::Config(format!("cannot select {k} of {m} features")));
    }
    let mut picked = sample_indices(rng, m, k);
    picked.sort_unstable();
    Ok(picked)
}

/// Sample variance per feature (N-1 denominator; 0 for a single row).
pub fn feature_variances(x: &Matrix) -> Vec<f64> {
    let n = x.rows();
    (0..x.cols())
        .map(|j| {
            if n < 2 {
                return 0.0;
            }
            let mean: f64 = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
            (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect()
}

/// Top-K features by sample variance.
pub fn variance_select(x: &Matrix, k: usize) -> Result<Vec<usize>> {
    select_by_score(&feature_variances(x), k, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    fn random_matrix(seed: u64, n: usize, m: usize) -> Matrix {
        let mut rng = stream_rng(seed, 0);
        Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn cfg() -> LsConfig {
        LsConfig {
            k_neighbors: 3,
            heat_t: 1.0,
        }
    }

    #[test]
    fn graph_is_symmetric_with_zero_laplacian_row_sums() {
        let x = random_matrix(0, 10, 6);
        let (w, degrees) = laplacian_graph(&x, &cfg()).unwrap();
        for i in 0..10 {
            assert_eq!(w.get(i, i), 0.0);
            for j in 0..10 {
                assert_eq!(w.get(i, j), w.get(j, i));
            }
            // row sum of L = D - W is degree minus weight sum
            let row_sum: f64 = (0..10).map(|j| w.get(i, j)).sum();
            assert_abs_diff_eq!(degrees[i] - row_sum, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_feature_scores_infinite() {
        let mut x = random_matrix(1, 8, 3);
        for i in 0..8 {
            x.set(i, 1, 0.42);
        }
        let scores = laplacian_score(&x, &cfg()).unwrap();
        assert!(scores[1].is_infinite());
        assert!(scores[0].is_finite() && scores[2].is_finite());
    }

    #[test]
    fn duplicated_columns_share_a_score() {
        let base = random_matrix(2, 9, 2);
        let x = base.concat_cols(&base.slice_cols(0, 1).unwrap()).unwrap();
        let scores = laplacian_score(&x, &cfg()).unwrap();
        assert_eq!(scores[0], scores[2]);
    }

    #[test]
    fn scores_match_dense_formula_recomputation() {
        let x = random_matrix(3, 10, 6);
        let c = cfg();
        let scores = laplacian_score(&x, &c).unwrap();
        let (w, degrees) = laplacian_graph(&x, &c).unwrap();
        let n = 10;
        let total: f64 = degrees.iter().sum();
        for r in 0..6 {
            let f: Vec<f64> = (0..n).map(|i| x.get(i, r)).collect();
            let mu = f.iter().zip(&degrees).map(|(v, d)| v * d).sum::<f64>() / total;
            let ft: Vec<f64> = f.iter().map(|v| v - mu).collect();
            let mut num = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let l = if i == j { degrees[i] } else { 0.0 } - w.get(i, j);
                    num += ft[i] * l * ft[j];
                }
            }
            let den: f64 = (0..n).map(|i| ft[i] * ft[i] * degrees[i]).sum();
            assert_abs_diff_eq!(scores[r], num / den, epsilon = 1e-9);
        }
    }

    #[test]
    fn scores_are_instance_order_invariant() {
        let x = random_matrix(4, 12, 5);
        let scores = laplacian_score(&x, &cfg()).unwrap();
        let perm = [7, 2, 9, 0, 4, 11, 1, 8, 3, 10, 5, 6];
        let shuffled = x.gather_rows(&perm).unwrap();
        let scores_p = laplacian_score(&shuffled, &cfg()).unwrap();
        for (a, b) in scores.iter().zip(&scores_p) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let x = random_matrix(5, 4, 2);
        assert!(laplacian_score(&x, &LsConfig { k_neighbors: 0, heat_t: 1.0 }).is_err());
        assert!(laplacian_score(&x, &LsConfig { k_neighbors: 4, heat_t: 1.0 }).is_err());
        assert!(laplacian_score(&x, &LsConfig { k_neighbors: 2, heat_t: 0.0 }).is_err());
        assert_eq!(ls_grid(&LS_T_NEIGHBORS, 4).len(), 8);
        assert_eq!(ls_grid(&[LS_ST_NEIGHBORS], 100).len(), 4);
    }

    #[test]
    fn select_by_score_orders_and_breaks_ties_low() {
        assert_eq!(select_by_score(&[3.0, 1.0, 2.0], 2, true).unwrap(), vec![1, 2]);
        assert_eq!(
            select_by_score(&[3.0, 1.0, 2.0], 3, true).unwrap(),
            vec![1, 2, 0]
        );
        assert_eq!(select_by_score(&[1.0, 1.0, 2.0], 1, true).unwrap(), vec![0]);
        assert_eq!(select_by_score(&[1.0, 1.0, 2.0], 1, false).unwrap(), vec![2]);
        assert_eq!(
            select_by_score(&[f64::INFINITY, 5.0], 2, true).unwrap(),
            vec![1, 0]
        );
        assert!(select_by_score(&[1.0], 2, true).is_err());
        assert!(select_by_score(&[f64::NAN], 1, true).is_err());
    }

    #[test]
    fn variance_selection_matches_brute_force() {
        let x = random_matrix(6, 15, 4);
        let vars = feature_variances(&x);
        for (j, &v) in vars.iter().enumerate() {
            let col: Vec<f64> = (0..15).map(|i| x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 15.0;
            let brute = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 14.0;
            assert_abs_diff_eq!(v, brute, epsilon = 1e-12);
        }
        let mut x2 = Matrix::filled(6, 3, 0.5);
        for i in 0..6 {
            x2.set(i, 1, i as f64);
        }
        assert_eq!(variance_select(&x2, 1).unwrap(), vec![1]);
    }

    #[test]
    fn random_select_is_reproducible_and_bounded() {
        let mut rng = stream_rng(7, 0);
        let a = random_select(&mut rng, 10, 4).unwrap();
        let mut rng = stream_rng(7, 0);
        let b = random_select(&mut rng, 10, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut sorted = a.clone();
        sorted.dedup();
        assert_eq!(sorted, a);
        assert!(a.iter().all(|&i| i < 10));
        assert!(random_select(&mut rng, 3, 4).is_err());
    }
}
