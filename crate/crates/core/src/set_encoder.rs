//! Permutation-invariant support-set encoders.
//!
//! Two deep-sets encoders condition the model on the support set S:
//!
//! - the alpha encoder produces the selector logits for slot k,
//!   `log_alpha(k) = g_phi2([sum_{x in S} f_phi1(x), pi_k])`, where f_phi1 is
//!   a one-hidden-layer ReLU map applied per instance, the sum pools over
//!   instances, pi_k is a learned slot embedding and g_phi2 is affine;
//! - the r encoder produces the decoder context
//!   `r(S) = g_psi2(sum_{x in S} f_psi1(x))` with the same shape and an
//!   affine g_psi2.
//!
//! Sum pooling makes both encoders invariant to the order of support
//! instances, and the tape's `sum_rows` accumulates each column in sorted
//! value order, so the invariance is exact rather than merely up to float
//! reassociation.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use crate::tape::{NodeId, Tape};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Weights of both set encoders and the slot embeddings.
///
/// Shapes, with M features, width H, T-dimensional slot embeddings, K slots
/// and an R-dimensional decoder context:
/// `phi1_w: M x H`, `phi1_b: 1 x H`, `phi2_w: (H + T) x M`, `phi2_b: 1 x M`,
/// `psi1_w: M x H`, `psi1_b: 1 x H`, `psi2_w: H x R`, `psi2_b: 1 x R`,
/// `pi: K x T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEncoderParams {
    pub phi1_w: Matrix,
    pub phi1_b: Matrix,
    pub phi2_w: Matrix,
    pub phi2_b: Matrix,
    pub psi1_w: Matrix,
    pub psi1_b: Matrix,
    pub psi2_w: Matrix,
    pub psi2_b: Matrix,
    pub pi: Matrix,
}

/// Uniform Glorot init over (-sqrt(6/(fan_in+fan_out)), +...).
pub(crate) fn glorot(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

impl SetEncoderParams {
    /// Glorot-uniform weights, zero biases, slot embeddings from
    /// 0.1 * N(0,1) so the K logit rows differ from the first step.
    ///
    /// The alpha-side instance encoder starts from paired +/- identity
    /// columns (one pair per feature, as many as the width allows, the rest
    /// Glorot). Each pair rectifies one feature's positive and negative
    /// deviations, so "this coordinate moved in this support set" is
    /// linearly readable by the logit head from the first step; with a
    /// random mixing init that cue is smeared across every unit and the
    /// head tends to memorize the training tasks instead of learning the
    /// general rule. The logit head starts from Glorot noise plus a
    /// diagonal readout of those pairs (see HEAD_DIAG_PRIOR).
    pub fn init(
        rng: &mut StreamRng,
        m: usize,
        k: usize,
        hidden: usize,
        t_dim: usize,
        r_dim: usize,
    ) -> Self {
        let normal = |rng: &mut StreamRng| -> f64 { StandardNormal.sample(rng) };
        let pairs = (hidden / 2).min(m);
        let mixed = glorot(rng, m, hidden);
        let phi1_w = Matrix::from_fn(m, hidden, |i, j| {
            if j < pairs {
                if i == j { 1.0 } else { 0.0 }
            } else if j < 2 * pairs {
                if i == j - pairs { -1.0 } else { 0.0 }
            } else {
                mixed.get(i, j)
            }
        });
        let head = glorot(rng, hidden + t_dim, m);
        let phi2_w = Matrix::from_fn(hidden + t_dim, m, |i, j| {
            let diag = j < pairs && (i == j || i == pairs + j);
            head.get(i, j) + if diag { HEAD_DIAG_PRIOR } else { 0.0 }
        });
        SetEncoderParams {
            phi1_w,
            phi1_b: Matrix::zeros(1, hidden),
            phi2_w,
            phi2_b: Matrix::zeros(1, m),
            psi1_w: glorot(rng, m, hidden),
            psi1_b: Matrix::zeros(1, hidden),
            psi2_w: glorot(rng, hidden, r_dim),
            psi2_b: Matrix::zeros(1, r_dim),
            pi: Matrix::from_fn(k, t_dim, |_, _| 0.1 * normal(rng)),
        }
    }
}

/// Tape handles for one bound copy of the encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundSetEncoder {
    pub phi1_w: NodeId,
    pub phi1_b: NodeId,
    pub phi2_w: NodeId,
    pub phi2_b: NodeId,
    pub psi1_w: NodeId,
    pub psi1_b: NodeId,
    pub psi2_w: NodeId,
    pub psi2_b: NodeId,
    pub pi: NodeId,
}

pub fn bind(tape: &mut Tape, params: &SetEncoderParams) -> Result<BoundSetEncoder> {
    Ok(BoundSetEncoder {
        phi1_w: tape.leaf(params.phi1_w.clone())?,
        phi1_b: tape.leaf(params.phi1_b.clone())?,
        phi2_w: tape.leaf(params.phi2_w.clone())?,
        phi2_b: tape.leaf(params.phi2_b.clone())?,
        psi1_w: tape.leaf(params.psi1_w.clone())?,
        psi1_b: tape.leaf(params.psi1_b.clone())?,
        psi2_w: tape.leaf(params.psi2_w.clone())?,
        psi2_b: tape.leaf(params.psi2_b.clone())?,
        pi: tape.leaf(params.pi.clone())?,
    })
}

fn check_support(tape: &Tape, support: NodeId, w: NodeId, tape_name: &'static str) -> Result<()> {
    let s = tape.value(support);
    if s.rows() == 0 {
        return Err(Error::Data("empty support set".into()));
    }
    if s.cols() != tape.value(w).rows() {
        return Err(Error::ShapeMismatch {
            op: tape_name,
            lhs: s.shape(),
            rhs: tape.value(w).shape(),
        });
    }
    Ok(())
}

/// Sum-pooled per-instance features: `sum_rows(relu(S * w + b))`, a 1 x H row.
fn pool(tape: &mut Tape, support: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let lin = tape.matmul(support, w)?;
    let lin = tape.add_row(lin, b)?;
    let act = tape.relu(lin)?;
    tape.sum_rows(act)
}

/// Fixed gain on the selector logit head. Adam steps every parameter at
/// roughly the learning rate no matter how small its raw gradient is, so an
/// unscaled head lets early noise gradients race the logits apart and freeze
/// the softmax before the reconstruction signal has had time to accumulate.
/// Damping the head keeps the logit drift slow against the unit-scale Gumbel
/// noise, which preserves exploration through most of the anneal.
const LOGIT_GAIN: f64 = 0.02;

/// Initial weight tying each feature's rectified-deviation pair to its own
/// logit, on top of the random head. Gradient descent on the head alone
/// favors rank-one logit patterns (every episode shifts a whole column the
/// same way through the nonnegative pooled activations), which reproduces
/// the average training task instead of reacting to the support set. The
/// prior puts "a coordinate that moves in this support earns its own logit"
/// into the head at init, so training only has to rescale that readout
/// rather than discover it against the rank-one pull.
const HEAD_DIAG_PRIOR: f64 = 3.0;

/// Selector logits for every slot at once, as a K x M node.
pub fn encode_alpha_all(
    tape: &mut Tape,
    support: NodeId,
    enc: &BoundSetEncoder,
) -> Result<NodeId> {
    check_support(tape, support, enc.phi1_w, "encode_alpha")?;
    let k = tape.value(enc.pi).rows();
    let pooled = pool(tape, support, enc.phi1_w, enc.phi1_b)?;
    let rep = tape.repeat_rows(pooled, k)?;
    let cat = tape.concat_cols(rep, enc.pi)?;
    let lin = tape.matmul(cat, enc.phi2_w)?;
    let lin = tape.add_row(lin, enc.phi2_b)?;
    tape.scale(lin, LOGIT_GAIN)
}

/// Selector logits for slot `k` only, as a 1 x M node.
pub fn encode_alpha(
    tape: &mut Tape,
    support: NodeId,
    enc: &BoundSetEncoder,
    k: usize,
) -> Result<NodeId> {
    let slots = tape.value(enc.pi).rows();
    if k >= slots {
        return Err(Error::Config(format!("slot {k} out of range for {slots} slots")));
    }
    check_support(tape, support, enc.phi1_w, "encode_alpha")?;
    let pooled = pool(tape, support, enc.phi1_w, enc.phi1_b)?;
    let pi_k = tape.slice_rows(enc.pi, k, 1)?;
    let cat = tape.concat_cols(pooled, pi_k)?;
    let lin = tape.matmul(cat, enc.phi2_w)?;
    let lin = tape.add_row(lin, enc.phi2_b)?;
    tape.scale(lin, LOGIT_GAIN)
}

/// Decoder context `r(S)`, a 1 x R node.
pub fn encode_r(tape: &mut Tape, support: NodeId, enc: &BoundSetEncoder) -> Result<NodeId> {
    check_support(tape, support, enc.psi1_w, "encode_r")?;
    let pooled = pool(tape, support, enc.psi1_w, enc.psi1_b)?;
    let lin = tape.matmul(pooled, enc.psi2_w)?;
    tape.add_row(lin, enc.psi2_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn tiny_params(seed: u64) -> SetEncoderParams {
        let mut rng = stream_rng(seed, 0);
        SetEncoderParams::init(&mut rng, 5, 3, 4, 6, 1)
    }

    fn encode_all_values(params: &SetEncoderParams, support: &Matrix) -> (Matrix, Matrix) {
        let mut t = Tape::new();
        let enc = bind(&mut t, params).unwrap();
        let s = t.leaf(support.clone()).unwrap();
        let la = encode_alpha_all(&mut t, s, &enc).unwrap();
        let r = encode_r(&mut t, s, &enc).unwrap();
        (t.value(la).clone(), t.value(r).clone())
    }

    #[test]
    fn permutation_of_support_is_bitwise_invariant() {
        let params = tiny_params(11);
        let support = Matrix::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.173).sin());
        let (la, r) = encode_all_values(&params, &support);
        for perm in [[1usize, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
            let permuted = support.gather_rows(&perm).unwrap();
            let (la_p, r_p) = encode_all_values(&params, &permuted);
            assert_eq!(la.data(), la_p.data());
            assert_eq!(r.data(), r_p.data());
        }
    }

    #[test]
    fn per_slot_encoding_matches_batched_rows() {
        let params = tiny_params(5);
        let support = Matrix::from_fn(3, 5, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64));
        let (all, _) = encode_all_values(&params, &support);
        for k in 0..3 {
            let mut t = Tape::new();
            let enc = bind(&mut t, &params).unwrap();
            let s = t.leaf(support.clone()).unwrap();
            let row = encode_alpha(&mut t, s, &enc, k).unwrap();
            assert_eq!(t.value(row).data(), all.slice_rows(k, 1).unwrap().data());
        }
    }

    #[test]
    fn distinct_slot_embeddings_give_distinct_logit_rows() {
        let params = tiny_params(7);
        let support = Matrix::from_fn(2, 5, |i, j| (i + j) as f64 * 0.05);
        let (all, _) = encode_all_values(&params, &support);
        for a in 0..all.rows() {
            for b in (a + 1)..all.rows() {
                assert_ne!(all.row(a), all.row(b));
            }
        }
    }

    #[test]
    fn empty_support_is_an_error() {
        let params = tiny_params(1);
        let mut t = Tape::new();
        let enc = bind(&mut t, &params).unwrap();
        let s = t.leaf(Matrix::zeros(0, 5)).unwrap();
        assert!(encode_alpha_all(&mut t, s, &enc).is_err());
        assert!(encode_r(&mut t, s, &enc).is_err());
    }

    #[test]
    fn out_of_range_slot_is_an_error() {
        let params = tiny_params(2);
        let mut t = Tape::new();
        let enc = bind(&mut t, &params).unwrap();
        let s = t.leaf(Matrix::zeros(2, 5)).unwrap();
        assert!(encode_alpha(&mut t, s, &enc, 3).is_err());
    }
}
