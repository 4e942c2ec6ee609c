//! Episodic training: minimize the expected query reconstruction error over
//! sampled (task, support, query) episodes with Adam and geometric
//! temperature annealing, early-stopping on a frozen validation bank.

use crate::concrete::{gumbel_sample, gumbel_zero, AnnealSchedule, GumbelDraw};
use crate::data::UnlabeledTask;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward, BoundModel, ModelConfig, ModelParams};
use crate::rng::{sample_indices, stream_rng, RNG_NAME};
use crate::tape::Tape;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// RNG stream ids, all derived from the one training seed.
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL_BANK: u64 = 2;
const STREAM_FINE_TUNE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Support size N_S per episode.
    #[serde(default = "default_n_support")]
    pub n_support: usize,
    /// Query size N_Q per episode (N_S + N_Q = 64 by default).
    #[serde(default = "default_n_query")]
    pub n_query: usize,
    /// Maximum iterations I.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Anneal start temperature; a fixed-temperature run sets t0 = t1.
    #[serde(default = "default_t0")]
    pub t0: f64,
    /// Anneal end temperature, also the validation temperature.
    #[serde(default = "default_t1")]
    pub t1: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Iterations between validation passes.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Validation passes without improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Episodes in the frozen validation bank.
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    /// Gumbel noise on the selector logits during training.
    #[serde(default = "default_use_noise")]
    pub use_noise: bool,
    /// Train on a random fraction of the source tasks (1.0 = all).
    #[serde(default = "default_task_subsample")]
    pub task_subsample: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_support() -> usize {
    2
}
fn default_n_query() -> usize {
    62
}
fn default_max_iters() -> usize {
    50_000
}
fn default_t0() -> f64 {
    10.0
}
fn default_t1() -> f64 {
    0.01
}
fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_interval() -> usize {
    500
}
fn default_patience() -> usize {
    10
}
fn default_val_episodes() -> usize {
    50
}
fn default_use_noise() -> bool {
    true
}
fn default_task_subsample() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_support: default_n_support(),
            n_query: default_n_query(),
            max_iters: default_max_iters(),
            t0: default_t0(),
            t1: default_t1(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            eval_interval: default_eval_interval(),
            patience: default_patience(),
            val_episodes: default_val_episodes(),
            use_noise: default_use_noise(),
            task_subsample: default_task_subsample(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_support == 0 || self.n_query == 0 {
            return Err(Error::Config(
                "n_support and n_query must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("eval_interval", self.eval_interval),
            ("patience", self.patience),
            ("val_episodes", self.val_episodes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.task_subsample.is_finite() && 0.0 < self.task_subsample && self.task_subsample <= 1.0)
        {
            return Err(Error::Config("task_subsample must be in (0, 1]".into()));
        }
        AnnealSchedule::new(self.t0, self.t1, self.max_iters.max(1))?;
        Ok(())
    }

    fn schedule(&self) -> Result<AnnealSchedule> {
        AnnealSchedule::new(self.t0, self.t1, self.max_iters.max(1))
    }
}

/// Adam with bias correction, one moment pair per parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(Matrix, Matrix)>,
}

impl AdamState {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let moments = params
            .groups()
            .iter()
            .map(|(_, p)| {
                (
                    Matrix::zeros(p.rows(), p.cols()),
                    Matrix::zeros(p.rows(), p.cols()),
                )
            })
            .collect();
        AdamState {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must be aligned with [`ModelParams::groups`].
    pub fn step(&mut self, params: &mut ModelParams, grads: &[(&'static str, Matrix)]) -> Result<()> {
        let mut groups = params.groups_mut();
        if groups.len() != grads.len() || groups.len() != self.moments.len() {
            return Err(Error::Config(format!(
                "gradient groups ({}) do not match parameter groups ({})",
                grads.len(),
                groups.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((name, p), (gname, g)), (m, v)) in
            groups.iter_mut().zip(grads).zip(&mut self.moments)
        {
            if name != gname {
                return Err(Error::Config(format!(
                    "gradient group `{gname}` does not match parameter group `{name}`"
                )));
            }
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter group `{name}`"
                )));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One frozen validation episode: fixed rows and a fixed Gumbel draw.
#[derive(Debug, Clone)]
pub struct ValEpisode {
    pub support: Matrix,
    pub query: Matrix,
    pub gumbel: GumbelDraw,
}

/// Frozen episode bank for early stopping.
#[derive(Debug, Clone)]
pub struct ValBank {
    pub episodes: Vec<ValEpisode>,
}

/// Pre-samples `val_episodes` episodes from the given tasks (validation
/// tasks when available, else sources), freezing rows and Gumbel draws.
pub fn build_val_bank(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    tasks: &[UnlabeledTask],
) -> Result<ValBank> {
    if tasks.is_empty() {
        return Err(Error::Data("no tasks to build a validation bank from".into()));
    }
    check_task_sizes(tcfg, tasks)?;
    let mut rng = stream_rng(tcfg.seed, STREAM_VAL_BANK);
    let mut episodes = Vec::with_capacity(tcfg.val_episodes);
    for _ in 0..tcfg.val_episodes {
        let task = &tasks[rng.random_range(0..tasks.len())];
        let ep = task.sample_episode(&mut rng, tcfg.n_support, tcfg.n_query)?;
        let (support, query) = ep.materialize(task.x)?;
        let gumbel = if tcfg.use_noise {
            gumbel_sample(&mut rng, mcfg.k, mcfg.m)
        } else {
            gumbel_zero(mcfg.k, mcfg.m)
        };
        episodes.push(ValEpisode {
            support,
            query,
            gumbel,
        });
    }
    Ok(ValBank { episodes })
}

fn episode_loss(
    params: &ModelParams,
    mcfg: &ModelConfig,
    support: &Matrix,
    query: &Matrix,
    gumbel: &GumbelDraw,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params)?;
    let f = forward(&mut tape, &bound, mcfg, support, query, gumbel, tau)?;
    let loss = tape.mse(f.query, f.recon)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Mean MSRE over the bank at the end temperature. Deterministic for fixed
/// params.
pub fn validate_bank(params: &ModelParams, mcfg: &ModelConfig, tcfg: &TrainConfig, bank: &ValBank) -> Result<f64> {
    if bank.episodes.is_empty() {
        return Err(Error::Data("validation bank is empty".into()));
    }
    let mut total = 0.0;
    for ep in &bank.episodes {
        total += episode_loss(params, mcfg, &ep.support, &ep.query, &ep.gumbel, tcfg.t1)?;
    }
    Ok(total / bank.episodes.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub tau: f64,
    pub train_loss: Option<f64>,
    pub val_msre: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations_run: usize,
    pub best_val_msre: f64,
    /// Iterations completed when the best snapshot was taken.
    pub best_iteration: usize,
    pub stop_reason: StopReason,
    /// Mean train loss per 100-iteration window.
    pub loss_curve: Vec<f64>,
    /// (iterations completed, validation MSRE) per validation pass.
    pub val_curve: Vec<(usize, f64)>,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub rng: String,
}

impl TrainReport {
    /// Equality ignoring the wall-time field, for determinism checks.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.iterations_run == other.iterations_run
            && self.best_val_msre == other.best_val_msre
            && self.best_iteration == other.best_iteration
            && self.stop_reason == other.stop_reason
            && self.loss_curve == other.loss_curve
            && self.val_curve == other.val_curve
            && self.seed == other.seed
            && self.rng == other.rng
    }
}

fn check_task_sizes(tcfg: &TrainConfig, tasks: &[UnlabeledTask]) -> Result<()> {
    let need = tcfg.n_support + tcfg.n_query;
    for task in tasks {
        if task.x.rows() < need {
            return Err(Error::Data(format!(
                "task `{}` has {} instances, episodes need {need}",
                task.task_id,
                task.x.rows()
            )));
        }
    }
    Ok(())
}

fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Trains `params` episodically and returns the best-validation snapshot.
///
/// The validation bank is drawn from `val_tasks` when non-empty, else from
/// the sources. The log closure is called once before training (validation
/// of the initial parameters), once per iteration, and once per validation
/// pass.
pub fn train<F>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sources: &[UnlabeledTask],
    val_tasks: &[UnlabeledTask],
    params: ModelParams,
    mut log: F,
) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(&LogRow) -> Result<()>,
{
    let start = Instant::now();
    mcfg.validate()?;
    tcfg.validate()?;
    params.validate(mcfg)?;
    if sources.is_empty() {
        return Err(Error::Data("no source tasks".into()));
    }
    check_task_sizes(tcfg, sources)?;
    let sched = tcfg.schedule()?;
    let mut rng = stream_rng(tcfg.seed, STREAM_TRAIN);

    let train_tasks: Vec<UnlabeledTask> = if tcfg.task_subsample < 1.0 {
        let count = ((tcfg.task_subsample * sources.len() as f64).ceil() as usize)
            .clamp(1, sources.len());
        let mut picked = sample_indices(&mut rng, sources.len(), count);
        picked.sort_unstable();
        picked.into_iter().map(|i| sources[i]).collect()
    } else {
        sources.to_vec()
    };

    let bank = build_val_bank(
        mcfg,
        tcfg,
        if val_tasks.is_empty() { sources } else { val_tasks },
    )?;

    let mut params = params;
    let baseline = validate_bank(&params, mcfg, tcfg, &bank)?;
    log(&LogRow {
        iteration: 0,
        tau: sched.t0(),
        train_loss: None,
        val_msre: Some(baseline),
    })?;
    let mut best = params.clone();
    let mut best_val = baseline;
    let mut best_iteration = 0;
    let mut val_curve = vec![(0, baseline)];
    let mut evals_since_best = 0usize;
    let mut stop_reason = StopReason::MaxIters;

    let mut adam = AdamState::new(&params, tcfg);
    let mut losses = Vec::with_capacity(tcfg.max_iters.min(1 << 20));
    let mut iterations_run = 0;

    for i in 0..tcfg.max_iters {
        let tau = sched.tau_at(i)?;
        let task = &train_tasks[rng.random_range(0..train_tasks.len())];
        let ep = task.sample_episode(&mut rng, tcfg.n_support, tcfg.n_query)?;
        let (support, query) = ep.materialize(task.x)?;
        let gumbel = if tcfg.use_noise {
            gumbel_sample(&mut rng, mcfg.k, mcfg.m)
        } else {
            gumbel_zero(mcfg.k, mcfg.m)
        };

        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params)?;
        let f = forward(&mut tape, &bound, mcfg, &support, &query, &gumbel, tau)?;
        let loss = tape.mse(f.query, f.recon)?;
        let loss_value = tape.value(loss).get(0, 0);
        tape.backward(loss)?;
        let grads = bound.collect_grads(&tape);
        adam.step(&mut params, &grads)?;
        losses.push(loss_value);
        iterations_run = i + 1;
        log(&LogRow {
            iteration: i,
            tau,
            train_loss: Some(loss_value),
            val_msre: None,
        })?;

        if iterations_run % tcfg.eval_interval == 0 {
            // TEMP diagnostic, remove before release
            if std::env::var("FEWSEL_DIAG").is_ok() {
                let s0 = &train_tasks[0];
                let probe = Matrix::from_fn(2, s0.x.cols(), |r, c| s0.x.get(r, c));
                if let Ok(sel) = crate::model::select(&params, mcfg, &probe) {
                    let la = &sel.log_alpha;
                    let mut gap = 0.0;
                    for k in 0..la.rows() {
                        let mut mx = f64::NEG_INFINITY;
                        let mut sum = 0.0;
                        for j in 0..la.cols() {
                            mx = mx.max(la.get(k, j));
                            sum += la.get(k, j);
                        }
                        gap += mx - sum / la.cols() as f64;
                    }
                    eprintln!(
                        "DIAG iter={iterations_run} tau={tau:.3} src0_picks={:?} gap={:.2}",
                        sel.indices,
                        gap / la.rows() as f64
                    );
                }
            }
            let val = validate_bank(&params, mcfg, tcfg, &bank)?;
            val_curve.push((iterations_run, val));
            log(&LogRow {
                iteration: i,
                tau,
                train_loss: None,
                val_msre: Some(val),
            })?;
            if val < best_val {
                best_val = val;
                best = params.clone();
                best_iteration = iterations_run;
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= tcfg.patience {
                    stop_reason = StopReason::EarlyStop;
                    break;
                }
            }
        }
    }

    if iterations_run > 0 && iterations_run % tcfg.eval_interval != 0 {
        let val = validate_bank(&params, mcfg, tcfg, &bank)?;
        val_curve.push((iterations_run, val));
        log(&LogRow {
            iteration: iterations_run - 1,
            tau: sched.tau_at(iterations_run - 1)?,
            train_loss: None,
            val_msre: Some(val),
        })?;
        if val < best_val {
            best_val = val;
            best = params.clone();
            best_iteration = iterations_run;
        }
    }

    let report = TrainReport {
        iterations_run,
        best_val_msre: best_val,
        best_iteration,
        stop_reason,
        loss_curve: window_means(&losses, 100),
        val_curve,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: tcfg.seed,
        rng: RNG_NAME.to_string(),
    };
    Ok((best, report))
}

/// Continues Adam on reconstruction of the target support against itself
/// (the support doubles as query; no held-out rows exist at test time),
/// at the fixed end temperature. Used by the CAE-ST protocol.
pub fn fine_tune(
    params: &ModelParams,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    support: &Matrix,
    iters: usize,
) -> Result<ModelParams> {
    mcfg.validate()?;
    tcfg.validate()?;
    params.validate(mcfg)?;
    if support.rows() == 0 {
        return Err(Error::Data("empty support set".into()));
    }
    let mut rng = stream_rng(tcfg.seed, STREAM_FINE_TUNE);
    let mut params = params.clone();
    let mut adam = AdamState::new(&params, tcfg);
    for _ in 0..iters {
        let gumbel = if tcfg.use_noise {
            gumbel_sample(&mut rng, mcfg.k, mcfg.m)
        } else {
            gumbel_zero(mcfg.k, mcfg.m)
        };
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &params)?;
        let f = forward(&mut tape, &bound, mcfg, support, support, &gumbel, tcfg.t1)?;
        let loss = tape.mse(f.query, f.recon)?;
        tape.backward(loss)?;
        let grads = bound.collect_grads(&tape);
        adam.step(&mut params, &grads)?;
    }
    Ok(params)
}

/// Default fine-tuning iteration count of the CAE-ST protocol.
pub const FINE_TUNE_ITERS: usize = 1000;
