//! The support-conditioned Concrete selector with task-conditioned decoder.
//!
//! Forward pass for one episode (support S, query X, temperature tau, one
//! Gumbel draw per episode):
//!
//! 1. selector logits `log_alpha`, either from the alpha set encoder (K x M,
//!    conditioned on S) or from a free K x M parameter (the CAE ablations);
//! 2. relaxed selection `z = softmax((log_alpha + g) / tau)` row by row;
//! 3. selected values `u = X z^T` (each query row dotted with each selector
//!    row);
//! 4. decoder input `[u, r(S)]` when the r context is on, else `u`;
//! 5. reconstruction through two hidden ReLU layers and the output
//!    activation.
//!
//! At test time [`select`] drops the noise and takes the argmax of each
//! logit row, and [`reconstruct_selected`] feeds the actual query columns at
//! the selected indices through the same decoder.

use crate::concrete::{concrete_sample, hard_select, GumbelDraw};
use crate::data::{NormStats, UnlabeledTask};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use crate::set_encoder::{self, BoundSetEncoder, SetEncoderParams};
use crate::tape::{NodeId, Tape};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Activation applied to the decoder output, matched to the data range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// For data normalized to [0, 1].
    #[default]
    Sigmoid,
    /// For data in [-1, 1].
    Tanh,
    /// Unbounded output.
    None,
}

/// Architecture hyperparameters. `validate` is called by every entry point
/// that takes a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature count M.
    pub m: usize,
    /// Selected-feature budget K (number of Concrete slots).
    pub k: usize,
    /// Set-encoder hidden width H.
    pub hidden: usize,
    /// Slot-embedding dimension T.
    pub t_dim: usize,
    /// Decoder-context dimension R.
    pub r_dim: usize,
    /// Decoder hidden width W (depth is fixed at 2).
    pub decoder_width: usize,
    pub output_activation: OutputActivation,
    /// Condition the selector logits on the support set.
    pub use_alpha_context: bool,
    /// Concatenate r(S) to the decoder input.
    pub use_r_context: bool,
}

impl ModelConfig {
    /// Defaults for a dataset with `m` features and budget `k`: width 64/32
    /// (encoder/decoder) up to 1024 features, 512/256 above.
    pub fn for_shape(m: usize, k: usize) -> Self {
        let big = m > 1024;
        ModelConfig {
            m,
            k,
            hidden: if big { 512 } else { 64 },
            t_dim: 300,
            r_dim: 1,
            decoder_width: if big { 256 } else { 32 },
            output_activation: OutputActivation::Sigmoid,
            use_alpha_context: true,
            use_r_context: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!(
                "k must satisfy 1 <= k <= m, got k={} with m={}",
                self.k, self.m
            )));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("t_dim", self.t_dim),
            ("r_dim", self.r_dim),
            ("decoder_width", self.decoder_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Decoder input dimension: K, plus R when the r context is on.
    pub fn decoder_input_dim(&self) -> usize {
        self.k + if self.use_r_context { self.r_dim } else { 0 }
    }
}

/// Decoder weights: two hidden ReLU layers and an affine output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

/// All trainable parameters.
///
/// `free_log_alpha` is present exactly when `use_alpha_context` is false; it
/// then replaces the alpha encoder as the source of the selector logits.
/// The encoder struct is always present (the r context may still be on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: SetEncoderParams,
    pub decoder: DecoderParams,
    pub free_log_alpha: Option<Matrix>,
    /// Input centering row (1 x M), fitted once on source data with
    /// [`fit_center`] and subtracted from everything that enters the
    /// network. Raw inputs sit almost entirely on a constant offset, and
    /// pooled set features built from them barely move across tasks;
    /// centering removes the offset so the encoders see task structure
    /// instead. Never trained, and reconstruction targets stay in data
    /// scale.
    pub center: Matrix,
}

impl ModelParams {
    /// Fresh parameters: Glorot-uniform weights, zero biases, slot
    /// embeddings 0.1 * N(0,1) and, for free-logit variants, logits from
    /// U(-0.01, 0.01).
    pub fn init(rng: &mut StreamRng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder =
            SetEncoderParams::init(rng, cfg.m, cfg.k, cfg.hidden, cfg.t_dim, cfg.r_dim);
        let d_in = cfg.decoder_input_dim();
        let w = cfg.decoder_width;
        let decoder = DecoderParams {
            w1: set_encoder::glorot(rng, d_in, w),
            b1: Matrix::zeros(1, w),
            w2: set_encoder::glorot(rng, w, w),
            b2: Matrix::zeros(1, w),
            w3: set_encoder::glorot(rng, w, cfg.m),
            b3: Matrix::zeros(1, cfg.m),
        };
        let free_log_alpha = if cfg.use_alpha_context {
            None
        } else {
            Some(Matrix::from_fn(cfg.k, cfg.m, |_, _| {
                rng.random_range(-0.01..=0.01)
            }))
        };
        Ok(ModelParams {
            encoder,
            decoder,
            free_log_alpha,
            center: Matrix::zeros(1, cfg.m),
        })
    }

    /// Named parameter groups in a fixed order (the Adam state and gradient
    /// collection are aligned with this order).
    pub fn groups(&self) -> Vec<(&'static str, &Matrix)> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut out = vec![
            ("phi1_w", &e.phi1_w),
            ("phi1_b", &e.phi1_b),
            ("phi2_w", &e.phi2_w),
            ("phi2_b", &e.phi2_b),
            ("psi1_w", &e.psi1_w),
            ("psi1_b", &e.psi1_b),
            ("psi2_w", &e.psi2_w),
            ("psi2_b", &e.psi2_b),
            ("pi", &e.pi),
            ("dec_w1", &d.w1),
            ("dec_b1", &d.b1),
            ("dec_w2", &d.w2),
            ("dec_b2", &d.b2),
            ("dec_w3", &d.w3),
            ("dec_b3", &d.b3),
        ];
        if let Some(fla) = &self.free_log_alpha {
            out.push(("free_log_alpha", fla));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let mut out = vec![
            ("phi1_w", &mut e.phi1_w),
            ("phi1_b", &mut e.phi1_b),
            ("phi2_w", &mut e.phi2_w),
            ("phi2_b", &mut e.phi2_b),
            ("psi1_w", &mut e.psi1_w),
            ("psi1_b", &mut e.psi1_b),
            ("psi2_w", &mut e.psi2_w),
            ("psi2_b", &mut e.psi2_b),
            ("pi", &mut e.pi),
            ("dec_w1", &mut d.w1),
            ("dec_b1", &mut d.b1),
            ("dec_w2", &mut d.w2),
            ("dec_b2", &mut d.b2),
            ("dec_w3", &mut d.w3),
            ("dec_b3", &mut d.b3),
        ];
        if let Some(fla) = &mut self.free_log_alpha {
            out.push(("free_log_alpha", fla));
        }
        out
    }

    /// Checks group shapes against a config and that every entry is finite.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d_in = cfg.decoder_input_dim();
        let expect: Vec<(&'static str, (usize, usize))> = vec![
            ("phi1_w", (cfg.m, cfg.hidden)),
            ("phi1_b", (1, cfg.hidden)),
            ("phi2_w", (cfg.hidden + cfg.t_dim, cfg.m)),
            ("phi2_b", (1, cfg.m)),
            ("psi1_w", (cfg.m, cfg.hidden)),
            ("psi1_b", (1, cfg.hidden)),
            ("psi2_w", (cfg.hidden, cfg.r_dim)),
            ("psi2_b", (1, cfg.r_dim)),
            ("pi", (cfg.k, cfg.t_dim)),
            ("dec_w1", (d_in, cfg.decoder_width)),
            ("dec_b1", (1, cfg.decoder_width)),
            ("dec_w2", (cfg.decoder_width, cfg.decoder_width)),
            ("dec_b2", (1, cfg.decoder_width)),
            ("dec_w3", (cfg.decoder_width, cfg.m)),
            ("dec_b3", (1, cfg.m)),
            ("free_log_alpha", (cfg.k, cfg.m)),
        ];
        if cfg.use_alpha_context != self.free_log_alpha.is_none() {
            return Err(Error::Config(
                "free_log_alpha must be present exactly when use_alpha_context is false".into(),
            ));
        }
        for (name, m) in self.groups() {
            let want = expect
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| *s)
                .expect("group name known");
            if m.shape() != want {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    m.shape(),
                    want
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite { op: "checkpoint" });
            }
        }
        if self.center.shape() != (1, cfg.m) {
            return Err(Error::Config(format!(
                "parameter center has shape {:?}, config expects {:?}",
                self.center.shape(),
                (1, cfg.m)
            )));
        }
        if !self.center.is_finite() {
            return Err(Error::NonFinite { op: "checkpoint" });
        }
        Ok(())
    }
}

/// Fits the input centering row to the per-feature mean over every row of
/// `tasks`, in place. Call once on the source tasks before training;
/// fine-tuning keeps the stored row so the input convention never shifts.
pub fn fit_center(params: &mut ModelParams, tasks: &[UnlabeledTask]) -> Result<()> {
    let m = params.center.cols();
    let mut sums = vec![0.0; m];
    let mut count = 0usize;
    for t in tasks {
        if t.x.cols() != m {
            return Err(Error::ShapeMismatch {
                op: "fit_center",
                lhs: t.x.shape(),
                rhs: (t.x.rows(), m),
            });
        }
        for i in 0..t.x.rows() {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += t.x.get(i, j);
            }
        }
        count += t.x.rows();
    }
    if count == 0 {
        return Err(Error::Data("no rows to fit the input center on".into()));
    }
    params.center = Matrix::from_fn(1, m, |_, j| sums[j] / count as f64);
    if !params.center.is_finite() {
        return Err(Error::NonFinite { op: "fit_center" });
    }
    Ok(())
}

/// `x` with the centering row subtracted from every row.
fn centered(x: &Matrix, center: &Matrix) -> Result<Matrix> {
    x.add_row_broadcast(&center.map(|v| -v))
}

/// Tape handles for one bound copy of all parameters.
pub struct BoundModel {
    pub enc: BoundSetEncoder,
    pub dec_w1: NodeId,
    pub dec_b1: NodeId,
    pub dec_w2: NodeId,
    pub dec_b2: NodeId,
    pub dec_w3: NodeId,
    pub dec_b3: NodeId,
    pub free_log_alpha: Option<NodeId>,
    /// Input centering row, kept as plain data (not a tape node).
    pub center: Matrix,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Result<Self> {
        Ok(BoundModel {
            enc: set_encoder::bind(tape, &params.encoder)?,
            center: params.center.clone(),
            dec_w1: tape.leaf(params.decoder.w1.clone())?,
            dec_b1: tape.leaf(params.decoder.b1.clone())?,
            dec_w2: tape.leaf(params.decoder.w2.clone())?,
            dec_b2: tape.leaf(params.decoder.b2.clone())?,
            dec_w3: tape.leaf(params.decoder.w3.clone())?,
            dec_b3: tape.leaf(params.decoder.b3.clone())?,
            free_log_alpha: match &params.free_log_alpha {
                Some(m) => Some(tape.leaf(m.clone())?),
                None => None,
            },
        })
    }

    /// Gradients per group, aligned with [`ModelParams::groups`]. Groups the
    /// loss does not touch come back as zeros.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<(&'static str, Matrix)> {
        let e = &self.enc;
        let mut ids = vec![
            ("phi1_w", e.phi1_w),
            ("phi1_b", e.phi1_b),
            ("phi2_w", e.phi2_w),
            ("phi2_b", e.phi2_b),
            ("psi1_w", e.psi1_w),
            ("psi1_b", e.psi1_b),
            ("psi2_w", e.psi2_w),
            ("psi2_b", e.psi2_b),
            ("pi", e.pi),
            ("dec_w1", self.dec_w1),
            ("dec_b1", self.dec_b1),
            ("dec_w2", self.dec_w2),
            ("dec_b2", self.dec_b2),
            ("dec_w3", self.dec_w3),
            ("dec_b3", self.dec_b3),
        ];
        if let Some(fla) = self.free_log_alpha {
            ids.push(("free_log_alpha", fla));
        }
        ids.into_iter()
            .map(|(name, id)| (name, tape.grad_or_zeros(id)))
            .collect()
    }
}

/// Nodes of interest from one forward pass.
pub struct Forward {
    /// N_Q x M reconstruction.
    pub recon: NodeId,
    /// The query leaf (reconstruction target).
    pub query: NodeId,
    /// K x M relaxed selection.
    pub z: NodeId,
    /// K x M selector logits.
    pub log_alpha: NodeId,
}

fn decode(tape: &mut Tape, bound: &BoundModel, input: NodeId) -> Result<NodeId> {
    let h1 = tape.matmul(input, bound.dec_w1)?;
    let h1 = tape.add_row(h1, bound.dec_b1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, bound.dec_w2)?;
    let h2 = tape.add_row(h2, bound.dec_b2)?;
    let h2 = tape.relu(h2)?;
    let out = tape.matmul(h2, bound.dec_w3)?;
    tape.add_row(out, bound.dec_b3)
}

fn activate(tape: &mut Tape, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    match cfg.output_activation {
        OutputActivation::Sigmoid => tape.sigmoid(x),
        OutputActivation::Tanh => tape.tanh(x),
        OutputActivation::None => Ok(x),
    }
}

/// Appends r(S) to every row of `u` when the r context is on.
fn decoder_input(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    u: NodeId,
    support: Option<NodeId>,
) -> Result<NodeId> {
    if !cfg.use_r_context {
        return Ok(u);
    }
    let support = support.ok_or_else(|| Error::Data("r context needs a support set".into()))?;
    let r = set_encoder::encode_r(tape, support, &bound.enc)?;
    let n = tape.value(u).rows();
    let rep = tape.repeat_rows(r, n)?;
    tape.concat_cols(u, rep)
}

fn check_episode(cfg: &ModelConfig, support: &Matrix, query: &Matrix) -> Result<()> {
    cfg.validate()?;
    if query.rows() == 0 {
        return Err(Error::Data("empty query set".into()));
    }
    if query.cols() != cfg.m {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: query.shape(),
            rhs: (query.rows(), cfg.m),
        });
    }
    let needs_support = cfg.use_alpha_context || cfg.use_r_context;
    if needs_support {
        if support.rows() == 0 {
            return Err(Error::Data("empty support set".into()));
        }
        if support.cols() != cfg.m {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: support.shape(),
                rhs: query.shape(),
            });
        }
    }
    Ok(())
}

/// Differentiable episode forward pass. The same Gumbel draw is shared by
/// every query row of the episode.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    support: &Matrix,
    query: &Matrix,
    g: &GumbelDraw,
    tau: f64,
) -> Result<Forward> {
    check_episode(cfg, support, query)?;
    if g.g.shape() != (cfg.k, cfg.m) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: g.g.shape(),
            rhs: (cfg.k, cfg.m),
        });
    }
    let needs_support = cfg.use_alpha_context || cfg.use_r_context;
    let support_id = if needs_support {
        Some(tape.leaf(centered(support, &bound.center)?)?)
    } else {
        None
    };
    let query_id = tape.leaf(query.clone())?;
    let query_centered = tape.leaf(centered(query, &bound.center)?)?;

    let log_alpha = if cfg.use_alpha_context {
        set_encoder::encode_alpha_all(tape, support_id.expect("support bound"), &bound.enc)?
    } else {
        bound
            .free_log_alpha
            .ok_or_else(|| Error::Config("variant without alpha context needs free_log_alpha".into()))?
    };
    let z = concrete_sample(tape, log_alpha, g, tau)?;
    let zt = tape.transpose(z)?;
    let u = tape.matmul(query_centered, zt)?;
    let dec_in = decoder_input(tape, bound, cfg, u, support_id)?;
    let lin = decode(tape, bound, dec_in)?;
    let recon = activate(tape, cfg, lin)?;
    Ok(Forward {
        recon,
        query: query_id,
        z,
        log_alpha,
    })
}

/// Test-time hard selection: one feature index per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Argmax feature per slot, length K.
    pub indices: Vec<usize>,
    /// Sorted unique indices.
    pub dedup: Vec<usize>,
    /// The logits behind the selection.
    pub log_alpha: Matrix,
}

/// Noise-free selection from a support set (or from the free logits for
/// variants without the alpha context, which then ignore `support`).
pub fn select(params: &ModelParams, cfg: &ModelConfig, support: &Matrix) -> Result<SelectionResult> {
    cfg.validate()?;
    let log_alpha = if cfg.use_alpha_context {
        if support.rows() == 0 {
            return Err(Error::Data("empty support set".into()));
        }
        if support.cols() != cfg.m {
            return Err(Error::ShapeMismatch {
                op: "select",
                lhs: support.shape(),
                rhs: (support.rows(), cfg.m),
            });
        }
        let mut tape = Tape::new();
        let enc = set_encoder::bind(&mut tape, &params.encoder)?;
        let s = tape.leaf(centered(support, &params.center)?)?;
        let la = set_encoder::encode_alpha_all(&mut tape, s, &enc)?;
        tape.value(la).clone()
    } else {
        params
            .free_log_alpha
            .clone()
            .ok_or_else(|| Error::Config("variant without alpha context needs free_log_alpha".into()))?
    };
    let indices = hard_select(&log_alpha)?;
    let mut dedup = indices.clone();
    dedup.sort_unstable();
    dedup.dedup();
    Ok(SelectionResult {
        indices,
        dedup,
        log_alpha,
    })
}

/// Reconstructs `query` from its columns at the hard-selected indices,
/// through the same decoder as [`forward`].
pub fn reconstruct_selected(
    params: &ModelParams,
    cfg: &ModelConfig,
    support: &Matrix,
    query: &Matrix,
    selection: &SelectionResult,
) -> Result<Matrix> {
    check_episode(cfg, support, query)?;
    if selection.indices.len() != cfg.k {
        return Err(Error::Config(format!(
            "selection has {} slots, config expects {}",
            selection.indices.len(),
            cfg.k
        )));
    }
    for &j in &selection.indices {
        if j >= cfg.m {
            return Err(Error::Config(format!(
                "selected index {j} out of range for {} features",
                cfg.m
            )));
        }
    }
    let u_val = centered(query, &params.center)?.gather_cols(&selection.indices)?;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params)?;
    let support_id = if cfg.use_r_context {
        Some(tape.leaf(centered(support, &params.center)?)?)
    } else {
        None
    };
    let u = tape.leaf(u_val)?;
    let dec_in = decoder_input(&mut tape, &bound, cfg, u, support_id)?;
    let lin = decode(&mut tape, &bound, dec_in)?;
    let out = activate(&mut tape, cfg, lin)?;
    Ok(tape.value(out).clone())
}

/// Model variant toggles, parsed from names like `ours`, `cae`,
/// `ours_no_r`, `ours_no_alpha`, `ours_no_noise`, `cae_no_noise`,
/// `ours_fixed_tau(0.01)`, `cae_fixed_tau(1)` and `cae_st`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub use_alpha_context: bool,
    pub use_r_context: bool,
    /// Train at this constant temperature instead of annealing.
    pub fixed_tau: Option<f64>,
    /// Perturb logits with Gumbel noise during training.
    pub use_noise: bool,
    /// Fine-tune on the target support before evaluation (CAE-ST protocol).
    pub fine_tune: bool,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        let (base, tau) = match name.find('(') {
            Some(p) => {
                let inner = name[p..]
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("malformed variant `{name}`")))?;
                let tau: f64 = inner
                    .parse()
                    .map_err(|_| Error::Config(format!("bad temperature in variant `{name}`")))?;
                if !(tau.is_finite() && tau > 0.0) {
                    return Err(Error::Config(format!("bad temperature in variant `{name}`")));
                }
                (&name[..p], Some(tau))
            }
            None => (name, None),
        };
        let mut v = Variant {
            name: name.to_string(),
            use_alpha_context: true,
            use_r_context: true,
            fixed_tau: None,
            use_noise: true,
            fine_tune: false,
        };
        match base {
            "ours" => {}
            "ours_no_r" => v.use_r_context = false,
            "ours_no_alpha" => v.use_alpha_context = false,
            "cae" => {
                v.use_alpha_context = false;
                v.use_r_context = false;
            }
            "ours_no_noise" => v.use_noise = false,
            "cae_no_noise" => {
                v.use_alpha_context = false;
                v.use_r_context = false;
                v.use_noise = false;
            }
            "ours_fixed_tau" => v.fixed_tau = Some(tau.unwrap_or(0.01)),
            "cae_fixed_tau" => {
                v.use_alpha_context = false;
                v.use_r_context = false;
                v.fixed_tau = Some(tau.unwrap_or(0.01));
            }
            "cae_st" => {
                v.use_alpha_context = false;
                v.use_r_context = false;
                v.fine_tune = true;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant `{name}` (expected ours, ours_no_r, ours_no_alpha, cae, \
                     ours_no_noise, cae_no_noise, ours_fixed_tau(t), cae_fixed_tau(t) or cae_st)"
                )))
            }
        }
        if tau.is_some() && v.fixed_tau.is_none() {
            return Err(Error::Config(format!(
                "variant `{base}` takes no temperature argument"
            )));
        }
        Ok(v)
    }

    /// Applies the architecture toggles to a config.
    pub fn configure(&self, cfg: &mut ModelConfig) {
        cfg.use_alpha_context = self.use_alpha_context;
        cfg.use_r_context = self.use_r_context;
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: JSON with a mandatory version field, the config, the
/// variant name, the normalization stats the model was trained with, and
/// every parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub variant: String,
    pub config: ModelConfig,
    pub norm: Option<NormStats>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&body).map_err(|e| Error::json(path, e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        ckpt.params.validate(&ckpt.config)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concrete::gumbel_zero;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            m: 5,
            k: 2,
            hidden: 4,
            t_dim: 3,
            r_dim: 1,
            decoder_width: 4,
            output_activation: OutputActivation::Sigmoid,
            use_alpha_context: true,
            use_r_context: true,
        }
    }

    fn run_forward(cfg: &ModelConfig, params: &ModelParams, support: &Matrix, query: &Matrix) -> Matrix {
        let mut t = Tape::new();
        let bound = BoundModel::bind(&mut t, params).unwrap();
        let f = forward(&mut t, &bound, cfg, support, query, &gumbel_zero(cfg.k, cfg.m), 1.0).unwrap();
        t.value(f.recon).clone()
    }

    #[test]
    fn forward_shapes_and_range() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(0, 0);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let support = Matrix::from_fn(3, 5, |i, j| ((i * j) as f64 * 0.3).cos() * 0.5 + 0.5);
        let query = Matrix::from_fn(7, 5, |i, j| ((i + j) as f64 * 0.21).sin() * 0.5 + 0.5);
        let recon = run_forward(&cfg, &params, &support, &query);
        assert_eq!(recon.shape(), (7, 5));
        assert!(recon.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn peaked_logits_pass_query_column_through() {
        // Free logits peaked at features 3 and 1; at tau = 0.01 the relaxed
        // selection is numerically one-hot, so u must equal those columns.
        let mut cfg = tiny_cfg();
        cfg.use_alpha_context = false;
        cfg.use_r_context = false;
        let mut rng = stream_rng(1, 0);
        let mut params = ModelParams::init(&mut rng, &cfg).unwrap();
        let mut fla = Matrix::zeros(2, 5);
        fla.set(0, 3, 40.0);
        fla.set(1, 1, 40.0);
        params.free_log_alpha = Some(fla);
        let query = Matrix::from_fn(4, 5, |i, j| (i * 5 + j) as f64 / 25.0);

        let mut t = Tape::new();
        let bound = BoundModel::bind(&mut t, &params).unwrap();
        let f = forward(
            &mut t,
            &bound,
            &cfg,
            &Matrix::zeros(0, 5),
            &query,
            &gumbel_zero(2, 5),
            0.01,
        )
        .unwrap();
        let zt = t.value(f.z).transpose();
        let u = query.matmul(&zt).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(u.get(i, 0), query.get(i, 3), epsilon = 1e-6);
            assert_abs_diff_eq!(u.get(i, 1), query.get(i, 1), epsilon = 1e-6);
        }
    }

    #[test]
    fn cae_variant_ignores_support_bitwise() {
        let mut cfg = tiny_cfg();
        cfg.use_alpha_context = false;
        cfg.use_r_context = false;
        let mut rng = stream_rng(2, 0);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let query = Matrix::from_fn(3, 5, |i, j| (i + j) as f64 / 9.0);
        let s1 = Matrix::from_fn(2, 5, |i, j| (i * j) as f64);
        let s2 = Matrix::from_fn(4, 5, |i, j| -((i + 2 * j) as f64));
        let r1 = run_forward(&cfg, &params, &s1, &query);
        let r2 = run_forward(&cfg, &params, &s2, &query);
        assert_eq!(r1.data(), r2.data());
        let sel1 = select(&params, &cfg, &s1).unwrap();
        let sel2 = select(&params, &cfg, &s2).unwrap();
        assert_eq!(sel1, sel2);
    }

    #[test]
    fn select_is_deterministic_and_dedups() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(3, 0);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let support = Matrix::from_fn(2, 5, |i, j| (i as f64 - j as f64) * 0.1);
        let a = select(&params, &cfg, &support).unwrap();
        let b = select(&params, &cfg, &support).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices.len(), 2);
        let mut sorted = a.dedup.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, a.dedup);
    }

    #[test]
    fn duplicate_logit_rows_dedup_to_one() {
        let mut cfg = tiny_cfg();
        cfg.use_alpha_context = false;
        cfg.use_r_context = false;
        let mut rng = stream_rng(4, 0);
        let mut params = ModelParams::init(&mut rng, &cfg).unwrap();
        let row = vec![0.1, 0.9, 0.3, 0.2, 0.0];
        params.free_log_alpha =
            Some(Matrix::from_rows(&[row.clone(), row]).unwrap());
        let sel = select(&params, &cfg, &Matrix::zeros(0, 5)).unwrap();
        assert_eq!(sel.indices, vec![1, 1]);
        assert_eq!(sel.dedup, vec![1]);
    }

    #[test]
    fn perfect_autoencoder_fixture_reconstructs_exactly() {
        // K = M, identity-like decoder, no output activation: the model is
        // an exact autoencoder, so the train MSRE is 0.
        let m = 4;
        let cfg = ModelConfig {
            m,
            k: m,
            hidden: 3,
            t_dim: 2,
            r_dim: 1,
            decoder_width: m,
            output_activation: OutputActivation::None,
            use_alpha_context: false,
            use_r_context: false,
        };
        let mut rng = stream_rng(5, 0);
        let mut params = ModelParams::init(&mut rng, &cfg).unwrap();
        params.free_log_alpha = Some(Matrix::from_fn(m, m, |i, j| if i == j { 40.0 } else { 0.0 }));
        let eye = |r: usize, c: usize| Matrix::from_fn(r, c, |i, j| if i == j { 1.0 } else { 0.0 });
        params.decoder = DecoderParams {
            w1: eye(m, m),
            b1: Matrix::filled(1, m, 1.0),
            w2: eye(m, m),
            b2: Matrix::zeros(1, m),
            w3: eye(m, m),
            b3: Matrix::filled(1, m, -1.0),
        };
        let query = Matrix::from_fn(6, m, |i, j| ((i * m + j) as f64) / 24.0);
        let mut t = Tape::new();
        let bound = BoundModel::bind(&mut t, &params).unwrap();
        let f = forward(&mut t, &bound, &cfg, &Matrix::zeros(0, m), &query, &gumbel_zero(m, m), 0.01).unwrap();
        let q = t.leaf(query.clone()).unwrap();
        let loss = t.mse(q, f.recon).unwrap();
        assert!(t.value(loss).get(0, 0) < 1e-3);

        // and the hard-selection path reproduces the soft one-hot limit
        let sel = select(&params, &cfg, &Matrix::zeros(0, m)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);
        let recon = reconstruct_selected(&params, &cfg, &Matrix::zeros(0, m), &query, &sel).unwrap();
        for (a, b) in recon.data().iter().zip(t.value(f.recon).data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn mismatched_feature_counts_are_errors() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(6, 0);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let support = Matrix::zeros(2, 4);
        assert!(select(&params, &cfg, &support).is_err());
        let sel = SelectionResult {
            indices: vec![0, 9],
            dedup: vec![0, 9],
            log_alpha: Matrix::zeros(2, 5),
        };
        let good_support = Matrix::zeros(2, 5);
        let query = Matrix::zeros(3, 5);
        assert!(reconstruct_selected(&params, &cfg, &good_support, &query, &sel).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_budgets() {
        let mut cfg = tiny_cfg();
        cfg.k = 6;
        assert!(cfg.validate().is_err());
        cfg.k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(7, 0);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            variant: "ours".into(),
            config: cfg,
            norm: None,
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        ckpt.save(&dir.path().join("model2.json")).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(dir.path().join("model2.json")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_shapes() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(8, 0);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");

        let mut bad = Checkpoint {
            version: 99,
            variant: "ours".into(),
            config: cfg.clone(),
            norm: None,
            params: params.clone(),
        };
        bad.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        bad.version = CHECKPOINT_VERSION;
        bad.params.decoder.w3 = Matrix::zeros(2, 2);
        bad.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn variant_parsing() {
        let v = Variant::parse("ours").unwrap();
        assert!(v.use_alpha_context && v.use_r_context && v.use_noise);
        let v = Variant::parse("ours_no_alpha").unwrap();
        assert!(!v.use_alpha_context && v.use_r_context);
        let v = Variant::parse("cae_fixed_tau(0.5)").unwrap();
        assert!(!v.use_alpha_context && !v.use_r_context);
        assert_eq!(v.fixed_tau, Some(0.5));
        let v = Variant::parse("ours_fixed_tau").unwrap();
        assert_eq!(v.fixed_tau, Some(0.01));
        let v = Variant::parse("cae_st").unwrap();
        assert!(v.fine_tune);
        assert!(Variant::parse("nope").is_err());
        assert!(Variant::parse("ours(0.1)").is_err());
        assert!(Variant::parse("ours_fixed_tau(x)").is_err());
    }
}
