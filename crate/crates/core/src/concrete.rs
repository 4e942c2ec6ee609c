//! Concrete (Gumbel-softmax) relaxation of discrete feature selection.
//!
//! A selector row over M features is sampled as
//! `z = softmax((log_alpha + g) / tau)` with g standard Gumbel noise. As
//! `tau -> 0` the row approaches a one-hot vector at the argmax of the noisy
//! logits; as `tau -> inf` it approaches the uniform vector. Training anneals
//! the temperature geometrically from `t0` down to `t1` and test-time
//! selection drops the noise and takes the argmax per row.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use crate::tape::{softmax_rows, NodeId, Tape};
use rand::RngExt;

/// One Gumbel noise draw, `k x m`, shared by every query instance of an
/// episode.
#[derive(Debug, Clone)]
pub struct GumbelDraw {
    pub g: Matrix,
}

/// Maps a uniform sample to a standard Gumbel sample. The input is clamped
/// to [1e-12, 1 - 1e-12] so the output is always finite.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Samples a `k x m` matrix of independent standard Gumbel variates.
pub fn gumbel_sample(rng: &mut StreamRng, k: usize, m: usize) -> GumbelDraw {
    let g = Matrix::from_fn(k, m, |_, _| gumbel_from_uniform(rng.random::<f64>()));
    GumbelDraw { g }
}

/// The zero draw used by the noise-free ablations.
pub fn gumbel_zero(k: usize, m: usize) -> GumbelDraw {
    GumbelDraw {
        g: Matrix::zeros(k, m),
    }
}

/// Differentiable Concrete sample on a tape: perturbs the `log_alpha` node
/// with the fixed draw `g` and applies the tempered row softmax.
pub fn concrete_sample(
    tape: &mut Tape,
    log_alpha: NodeId,
    g: &GumbelDraw,
    tau: f64,
) -> Result<NodeId> {
    if tape.value(log_alpha).shape() != g.g.shape() {
        return Err(Error::ShapeMismatch {
            op: "concrete_sample",
            lhs: tape.value(log_alpha).shape(),
            rhs: g.g.shape(),
        });
    }
    let noise = tape.leaf(g.g.clone())?;
    let perturbed = tape.add(log_alpha, noise)?;
    tape.softmax_rows(perturbed, tau)
}

/// Non-differentiable Concrete sample for inspection and tests.
pub fn concrete_sample_plain(log_alpha: &Matrix, g: &GumbelDraw, tau: f64) -> Result<Matrix> {
    if log_alpha.shape() != g.g.shape() {
        return Err(Error::ShapeMismatch {
            op: "concrete_sample",
            lhs: log_alpha.shape(),
            rhs: g.g.shape(),
        });
    }
    softmax_rows(&log_alpha.add(&g.g)?, tau)
}

/// Geometric temperature schedule from `t0` at iteration 0 down to `t1` at
/// iteration `total_iters`, with exact endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSchedule {
    t0: f64,
    t1: f64,
    total_iters: usize,
}

impl AnnealSchedule {
    /// `t0` and `t1` must be positive and finite. `t0 == t1` yields a
    /// constant schedule, which is how fixed-temperature runs are encoded.
    pub fn new(t0: f64, t1: f64, total_iters: usize) -> Result<Self> {
        if !(t0.is_finite() && t0 > 0.0 && t1.is_finite() && t1 > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be positive and finite, got t0={t0}, t1={t1}"
            )));
        }
        Ok(AnnealSchedule { t0, t1, total_iters })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    /// Temperature at iteration `i`. Errors if `i > total_iters`. The
    /// endpoints return `t0` and `t1` exactly; interior points follow
    /// `t0 * (t1 / t0)^(i / total_iters)`.
    pub fn tau_at(&self, i: usize) -> Result<f64> {
        if i > self.total_iters {
            return Err(Error::Config(format!(
                "iteration {i} past schedule end {}",
                self.total_iters
            )));
        }
        if i == 0 {
            return Ok(self.t0);
        }
        if i == self.total_iters {
            return Ok(self.t1);
        }
        let frac = i as f64 / self.total_iters as f64;
        Ok(self.t0 * (self.t1 / self.t0).powf(frac))
    }
}

/// Per-row argmax of the logits, ties broken toward the lowest index.
/// Errors if any entry is non-finite.
pub fn hard_select(log_alpha: &Matrix) -> Result<Vec<usize>> {
    if !log_alpha.is_finite() {
        return Err(Error::NonFinite { op: "hard_select" });
    }
    if log_alpha.cols() == 0 {
        return Err(Error::Config("hard_select on zero-width logits".into()));
    }
    let mut out = Vec::with_capacity(log_alpha.rows());
    for i in 0..log_alpha.rows() {
        let row = log_alpha.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gumbel_at_half_matches_frozen_value() {
        assert_abs_diff_eq!(
            gumbel_from_uniform(0.5),
            0.36651292058166432,
            epsilon = 1e-15
        );
    }

    #[test]
    fn gumbel_is_finite_at_clamped_extremes() {
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
        assert!(gumbel_from_uniform(f64::MIN_POSITIVE).is_finite());
    }

    #[test]
    fn gumbel_mean_approximates_euler_gamma() {
        let mut rng = stream_rng(42, 0);
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| gumbel_from_uniform(rng.random::<f64>()))
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(mean, 0.5772156649015329, epsilon = 0.01);
    }

    #[test]
    fn concrete_zero_noise_matches_frozen_softmax() {
        let log_alpha = Matrix::row_vector(vec![0.3, -0.2, 0.1]);
        let z = concrete_sample_plain(&log_alpha, &gumbel_zero(1, 3), 1.0).unwrap();
        let expect = [
            0.41232668557957835,
            0.25008877662170523,
            0.3375845377987164,
        ];
        for (a, e) in z.data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn tape_and_plain_samples_agree() {
        let log_alpha = Matrix::from_fn(2, 4, |i, j| (i as f64) - 0.3 * j as f64);
        let mut rng = stream_rng(3, 0);
        let g = gumbel_sample(&mut rng, 2, 4);
        let plain = concrete_sample_plain(&log_alpha, &g, 0.7).unwrap();
        let mut t = Tape::new();
        let la = t.leaf(log_alpha).unwrap();
        let z = concrete_sample(&mut t, la, &g, 0.7).unwrap();
        assert_eq!(t.value(z), &plain);
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let log_alpha = Matrix::row_vector(vec![2.0, 0.0, -1.0]);
        let z = concrete_sample_plain(&log_alpha, &gumbel_zero(1, 3), 1e-3).unwrap();
        assert!(z.get(0, 0) > 1.0 - 1e-9);
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        let log_alpha = Matrix::row_vector(vec![2.0, 0.0, -1.0]);
        let z = concrete_sample_plain(&log_alpha, &gumbel_zero(1, 3), 1e6).unwrap();
        for &v in z.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn anneal_endpoints_exact_and_midpoint_frozen() {
        let s = AnnealSchedule::new(10.0, 0.01, 1000).unwrap();
        assert_eq!(s.tau_at(0).unwrap(), 10.0);
        assert_eq!(s.tau_at(1000).unwrap(), 0.01);
        assert_abs_diff_eq!(s.tau_at(500).unwrap(), 0.31622776601683794, epsilon = 1e-15);
    }

    #[test]
    fn anneal_monotone_and_bounded() {
        let s = AnnealSchedule::new(10.0, 0.01, 137).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=137 {
            let t = s.tau_at(i).unwrap();
            assert!(t <= prev && t >= 0.01 && t <= 10.0);
            prev = t;
        }
    }

    #[test]
    fn anneal_errors_past_end_and_on_bad_temps() {
        let s = AnnealSchedule::new(10.0, 0.01, 10).unwrap();
        assert!(s.tau_at(11).is_err());
        assert!(AnnealSchedule::new(0.0, 0.01, 10).is_err());
        assert!(AnnealSchedule::new(10.0, -1.0, 10).is_err());
    }

    #[test]
    fn constant_schedule_for_fixed_temperature_runs() {
        let s = AnnealSchedule::new(0.5, 0.5, 100).unwrap();
        for i in [0, 1, 50, 99, 100] {
            assert_eq!(s.tau_at(i).unwrap(), 0.5);
        }
    }

    #[test]
    fn hard_select_breaks_ties_low() {
        let la = Matrix::from_rows(&[vec![1.0, 3.0, 3.0], vec![-1.0, -1.0, -2.0]]).unwrap();
        assert_eq!(hard_select(&la).unwrap(), vec![1, 0]);
    }

    #[test]
    fn hard_select_rejects_non_finite() {
        let la = Matrix::row_vector(vec![1.0, f64::NAN]);
        assert!(hard_select(&la).is_err());
    }

    #[test]
    fn hard_select_invariant_to_shift_and_positive_scale() {
        let la = Matrix::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]).unwrap();
        let base = hard_select(&la).unwrap();
        let shifted = la.map(|v| 2.5 * v + 7.0);
        assert_eq!(hard_select(&shifted).unwrap(), base);
    }

    proptest! {
        #[test]
        fn concrete_rows_are_simplex_points(
            vals in proptest::collection::vec(-20.0f64..20.0, 8),
            tau in 0.05f64..20.0,
            seed in 0u64..1000,
        ) {
            let log_alpha = Matrix::from_vec(2, 4, vals).unwrap();
            let mut rng = stream_rng(seed, 0);
            let g = gumbel_sample(&mut rng, 2, 4);
            let z = concrete_sample_plain(&log_alpha, &g, tau).unwrap();
            for i in 0..2 {
                let s: f64 = z.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(z.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn anneal_stays_within_bounds(
            t0 in 0.01f64..100.0,
            t1 in 0.001f64..0.009,
            iters in 1usize..5000,
            at in 0usize..5000,
        ) {
            let s = AnnealSchedule::new(t0, t1, iters).unwrap();
            if at <= iters {
                let tau = s.tau_at(at).unwrap();
                prop_assert!(tau <= t0 + 1e-12 && tau >= t1 - 1e-12);
            }
        }
    }
}
