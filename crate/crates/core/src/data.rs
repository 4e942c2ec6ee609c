//! Task collections, CSV/manifest IO, normalization, episode sampling and
//! the synthetic multi-task benchmark generator.
//!
//! A collection is a set of tasks sharing one feature count M, split by
//! role into source, validation and target tasks. Training only ever sees
//! [`UnlabeledTask`] views; labels exist for evaluation.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{sample_indices, stream_rng, StreamRng};
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Val,
    Target,
}

/// One task: N instances by M features, labels held out of training.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_count: Option<usize>,
    pub role: Role,
}

/// Label-stripped view of a task; the only form the trainer accepts.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledTask<'a> {
    pub task_id: &'a str,
    pub x: &'a Matrix,
}

impl TaskDataset {
    pub fn unlabeled(&self) -> UnlabeledTask<'_> {
        UnlabeledTask {
            task_id: &self.task_id,
            x: &self.x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub tasks: Vec<TaskDataset>,
    pub class_count: Option<usize>,
}

impl Collection {
    /// The shared feature count.
    pub fn m(&self) -> Result<usize> {
        self.tasks
            .first()
            .map(|t| t.x.cols())
            .ok_or_else(|| Error::Data("collection has no tasks".into()))
    }

    pub fn by_role(&self, role: Role) -> Vec<&TaskDataset> {
        self.tasks.iter().filter(|t| t.role == role).collect()
    }

    pub fn find(&self, id: &str) -> Option<&TaskDataset> {
        self.tasks.iter().find(|t| t.task_id == id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    path: String,
    role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tasks: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_count: Option<usize>,
}

/// Reads one task CSV: a header row, numeric columns, and optionally a
/// trailing column named `label` with integer class ids.
pub fn read_task_csv(path: &Path, task_id: &str) -> Result<(Matrix, Option<Vec<usize>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!(
                "task `{task_id}`: cannot open {}",
                path.display()
            )),
            _ => Error::csv(path, e),
        })?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let has_label = headers.iter().last() == Some("label");
    let feat_cols = headers.len() - usize::from(has_label);
    if feat_cols == 0 {
        return Err(Error::Data(format!(
            "task `{task_id}`: no feature columns in {}",
            path.display()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::Data(format!(
                "task `{task_id}`: ragged row {} in {}",
                i + 1,
                path.display()
            )),
            _ => Error::csv(path, e),
        })?;
        let mut row = Vec::with_capacity(feat_cols);
        for (j, field) in record.iter().take(feat_cols).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "task `{task_id}`: non-numeric value `{field}` at row {}, column {} of {}",
                    i + 1,
                    j,
                    path.display()
                ))
            })?;
            row.push(v);
        }
        if has_label {
            let field = record.iter().last().unwrap_or("");
            let l: usize = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "task `{task_id}`: non-integer label `{field}` at row {} of {}",
                    i + 1,
                    path.display()
                ))
            })?;
            labels.push(l);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "task `{task_id}`: no data rows in {}",
            path.display()
        )));
    }
    let x = Matrix::from_rows(&rows)?;
    Ok((x, has_label.then_some(labels)))
}

/// Writes a task CSV (shortest round-trip float formatting, so a read back
/// reproduces every value exactly).
pub fn write_task_csv(path: &Path, x: &Matrix, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != x.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                l.len(),
                x.rows()
            )));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("f{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for i in 0..x.rows() {
        let mut record: Vec<String> = x.row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(l) = labels {
            record.push(l[i].to_string());
        }
        w.write_record(&record).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads every task named by a JSON manifest; CSV paths are resolved
/// relative to the manifest's directory. All tasks must agree on M.
pub fn load_collection(manifest_path: &Path) -> Result<Collection> {
    let body = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&body).map_err(|e| Error::json(manifest_path, e))?;
    if manifest.tasks.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no tasks",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut first: Option<(String, usize)> = None;
    for entry in &manifest.tasks {
        let path = base.join(&entry.path);
        let (x, labels) = read_task_csv(&path, &entry.id)?;
        match &first {
            None => first = Some((entry.id.clone(), x.cols())),
            Some((first_id, m)) if x.cols() != *m => {
                return Err(Error::Data(format!(
                    "task `{first_id}` has {m} features but task `{}` has {}",
                    entry.id,
                    x.cols()
                )))
            }
            _ => {}
        }
        tasks.push(TaskDataset {
            task_id: entry.id.clone(),
            x,
            labels,
            class_count: manifest.class_count,
            role: entry.role,
        });
    }
    Ok(Collection {
        tasks,
        class_count: manifest.class_count,
    })
}

/// Writes `<id>.csv` per task plus `manifest.json`; returns the manifest
/// path.
pub fn write_collection(collection: &Collection, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(collection.tasks.len());
    for task in &collection.tasks {
        let file = format!("{}.csv", task.task_id);
        write_task_csv(&dir.join(&file), &task.x, task.labels.as_deref())?;
        entries.push(ManifestEntry {
            id: task.task_id.clone(),
            path: file,
            role: task.role,
        });
    }
    let manifest = Manifest {
        tasks: entries,
        class_count: collection.class_count,
    };
    let path = dir.join("manifest.json");
    let mut body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    body.push('\n');
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Minmax01,
    None,
}

/// Per-feature min-max statistics, fitted on source tasks only (a target
/// support of a handful of rows would give degenerate statistics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(sources: &[&Matrix]) -> Result<NormStats> {
        let m = sources
            .first()
            .map(|x| x.cols())
            .ok_or_else(|| Error::Data("no source tasks to fit normalization on".into()))?;
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for x in sources {
            if x.cols() != m {
                return Err(Error::ShapeMismatch {
                    op: "norm_fit",
                    lhs: x.shape(),
                    rhs: (x.rows(), m),
                });
            }
            for i in 0..x.rows() {
                for (j, v) in x.row(i).iter().enumerate() {
                    min[j] = min[j].min(*v);
                    max[j] = max[j].max(*v);
                }
            }
        }
        if min.iter().any(|v| !v.is_finite()) || max.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("cannot fit normalization on empty tasks".into()));
        }
        Ok(NormStats { min, max })
    }

    /// (x - min) / (max - min) per feature; constant features map to 0.
    /// Values outside the source range are allowed to leave [0, 1].
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.min.len() {
            return Err(Error::ShapeMismatch {
                op: "norm_apply",
                lhs: x.shape(),
                rhs: (x.rows(), self.min.len()),
            });
        }
        let scale: Vec<f64> = self
            .min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| {
                let range = hi - lo;
                if range > 0.0 {
                    1.0 / range
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.min[j]) * scale[j]
        }))
    }
}

/// Fits stats on `Role::Source` tasks and rescales every task in place.
/// `NormMode::None` leaves the collection untouched and returns `None`.
pub fn normalize_collection(
    collection: &mut Collection,
    mode: NormMode,
) -> Result<Option<NormStats>> {
    match mode {
        NormMode::None => Ok(None),
        NormMode::Minmax01 => {
            let sources: Vec<&Matrix> = collection
                .tasks
                .iter()
                .filter(|t| t.role == Role::Source)
                .map(|t| &t.x)
                .collect();
            let stats = NormStats::fit(&sources)?;
            for task in &mut collection.tasks {
                task.x = stats.apply(&task.x)?;
            }
            Ok(Some(stats))
        }
    }
}

/// One sampled (support, query) split of a task's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

impl Episode {
    /// Materializes the support and query matrices from the task's data.
    pub fn materialize(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((
            x.gather_rows(&self.support_rows)?,
            x.gather_rows(&self.query_rows)?,
        ))
    }
}

/// Uniform disjoint support/query sample over `n_rows` rows.
pub fn sample_episode(
    rng: &mut StreamRng,
    task_id: &str,
    n_rows: usize,
    n_support: usize,
    n_query: usize,
) -> Result<Episode> {
    if n_support == 0 || n_query == 0 {
        return Err(Error::Config(
            "support and query sizes must be at least 1".into(),
        ));
    }
    if n_rows < n_support + n_query {
        return Err(Error::Data(format!(
            "task `{task_id}` has {n_rows} instances, episode needs {}",
            n_support + n_query
        )));
    }
    let picked = sample_indices(rng, n_rows, n_support + n_query);
    Ok(Episode {
        task_id: task_id.to_string(),
        support_rows: picked[..n_support].to_vec(),
        query_rows: picked[n_support..].to_vec(),
    })
}

impl UnlabeledTask<'_> {
    pub fn sample_episode(
        &self,
        rng: &mut StreamRng,
        n_support: usize,
        n_query: usize,
    ) -> Result<Episode> {
        sample_episode(rng, self.task_id, self.x.rows(), n_support, n_query)
    }
}

/// Class displacement of signal features around their center.
const SIGNAL_AMP: f64 = 0.2;
/// Redundant features move at half the signal amplitude.
const REDUNDANT_AMP: f64 = 0.05;
/// Instance-factor amplitude, as a multiple of noise_std. Zero noise
/// therefore also freezes the factors, leaving within-class instances
/// identical on signal coordinates.
const FACTOR_RATIO: f64 = 1.9;
const CENTER: f64 = 0.5;
const DRAW_ATTEMPTS: usize = 10_000;
const SET_ATTEMPTS: usize = 100;

/// Synthetic benchmark configuration.
///
/// Feature semantics are global: every feature j keeps one center across
/// all tasks and belongs to the fixed factor group `j % signal_count`.
/// Each instance draws one latent value per group; a task expresses a
/// group's latent only on the single signal feature it planted in that
/// group. Which feature per group is the signal is what varies across
/// tasks, so selection must adapt per task while the decoder can reuse
/// the same group-to-output wiring everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Source task count D.
    #[serde(default = "default_source_tasks")]
    pub source_tasks: usize,
    #[serde(default = "default_val_tasks")]
    pub val_tasks: usize,
    /// Feature count M.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Planted signal features per task.
    #[serde(default = "default_signal_count")]
    pub signal_count: usize,
    /// Instances N per task.
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    /// Noise on signal features; non-signal features use half of it.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_source_tasks() -> usize {
    6
}
fn default_val_tasks() -> usize {
    2
}
fn default_m() -> usize {
    20
}
fn default_signal_count() -> usize {
    5
}
fn default_instances() -> usize {
    120
}
fn default_class_count() -> usize {
    2
}
fn default_noise_std() -> f64 {
    0.1
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            source_tasks: default_source_tasks(),
            val_tasks: default_val_tasks(),
            m: default_m(),
            signal_count: default_signal_count(),
            instances: default_instances(),
            class_count: default_class_count(),
            noise_std: default_noise_std(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_tasks == 0 {
            return Err(Error::Config("source_tasks must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.signal_count == 0 || self.signal_count > self.m {
            return Err(Error::Config(format!(
                "signal_count must satisfy 1 <= signal_count <= m, got {} with m={}",
                self.signal_count, self.m
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.instances < self.class_count {
            return Err(Error::Config(format!(
                "instances={} cannot cover {} classes",
                self.instances, self.class_count
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        let adjacent_gap = SIGNAL_AMP * (2.0 / (self.class_count as f64 - 1.0))
            * (self.signal_count as f64).sqrt();
        let within_std = self.noise_std * (1.0 + FACTOR_RATIO * FACTOR_RATIO).sqrt();
        if 4.0 * within_std > adjacent_gap {
            return Err(Error::Config(format!(
                "noise_std={} breaks class separation: adjacent centroids are {:.4} apart on the signal subspace but within-class spread is {:.4} per coordinate, need a 4x margin",
                self.noise_std, adjacent_gap, within_std
            )));
        }
        Ok(())
    }

    /// Features eligible to carry signal: the first `min(m, 2*signal_count)`
    /// coordinates. Everything past them is never planted, so tasks differ
    /// only inside a small arena and selection has to resolve which arena
    /// member is live rather than relearn the arena itself.
    pub(crate) fn signal_arena(&self) -> usize {
        self.m.min(2 * self.signal_count)
    }

    /// Factor group of an arena feature j: groups are fixed across tasks
    /// and stride the arena, so a group holds at most two features.
    pub(crate) fn group_of(&self, j: usize) -> usize {
        debug_assert!(j < self.signal_arena());
        j % self.signal_count
    }

    /// Per-class factor level, evenly spaced over [-1, 1].
    pub(crate) fn class_shift(&self, label: usize) -> f64 {
        2.0 * label as f64 / (self.class_count as f64 - 1.0) - 1.0
    }
}

/// Ground-truth feature roles of one generated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Planted signal features (class centroids differ only here).
    pub signal: Vec<usize>,
    /// Fixed nonlinear functions of a signal feature, plus noise.
    pub redundant: Vec<usize>,
    /// Pure i.i.d. noise around the feature's global center.
    pub noise: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub collection: Collection,
    /// Truth per task id, for recovery-precision scoring.
    pub truth: BTreeMap<String, SynthTruth>,
}

impl SynthOutput {
    pub fn target_truth(&self) -> &SynthTruth {
        self.truth.get("target").expect("target task generated")
    }
}

fn group_members(cfg: &SynthConfig, g: usize) -> Vec<usize> {
    (0..cfg.signal_arena())
        .filter(|&j| j % cfg.signal_count == g)
        .collect()
}

/// Number of distinct signal sets (one feature per group).
fn set_combinations(cfg: &SynthConfig) -> usize {
    (0..cfg.signal_count)
        .map(|g| group_members(cfg, g).len())
        .fold(1usize, |acc, n| acc.saturating_mul(n))
}

/// Draws a signal set with one feature per factor group.
fn draw_set(rng: &mut StreamRng, cfg: &SynthConfig) -> Vec<usize> {
    let mut set: Vec<usize> = (0..cfg.signal_count)
        .map(|g| {
            let members = group_members(cfg, g);
            members[rng.random_range(0..members.len())]
        })
        .collect();
    set.sort_unstable();
    set
}

/// Draws the target's signal set: it must differ from every other task's
/// set so adaptation is actually required.
fn draw_target_set(
    rng: &mut StreamRng,
    cfg: &SynthConfig,
    taken: &[Vec<usize>],
) -> Result<Vec<usize>> {
    // distinctness is vacuous when only one signal set exists
    let unique = set_combinations(cfg) == 1;
    for _ in 0..DRAW_ATTEMPTS {
        let set = draw_set(rng, cfg);
        if !unique && taken.iter().any(|s| *s == set) {
            continue;
        }
        return Ok(set);
    }
    Err(Error::Data(format!(
        "could not draw a held-out target signal set (m={}, signal_count={}): every admissible set is already used by another task",
        cfg.m, cfg.signal_count
    )))
}

/// Draws a source task's signal set from features with remaining
/// capacity, one per factor group. Capacities spread the source sets
/// evenly, so every feature is a selection target for some training task.
fn draw_capped_set(
    rng: &mut StreamRng,
    cfg: &SynthConfig,
    capacity: &mut [usize],
) -> Result<Vec<usize>> {
    let mut set = Vec::with_capacity(cfg.signal_count);
    for g in 0..cfg.signal_count {
        let candidates: Vec<usize> = group_members(cfg, g)
            .into_iter()
            .filter(|&j| capacity[j] > 0)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Data(format!(
                "capacity dead end while spreading source signal sets (m={}, signal_count={})",
                cfg.m, cfg.signal_count
            )));
        }
        let j = candidates[rng.random_range(0..candidates.len())];
        capacity[j] -= 1;
        set.push(j);
    }
    set.sort_unstable();
    Ok(set)
}

struct RedundantMap {
    src: usize,
    a: f64,
    b: f64,
}

fn generate_task(
    rng: &mut StreamRng,
    cfg: &SynthConfig,
    task_id: &str,
    role: Role,
    centers: &[f64],
    signal: &[usize],
) -> (TaskDataset, SynthTruth) {
    let m = cfg.m;
    let is_signal: Vec<bool> = {
        let mut v = vec![false; m];
        for &j in signal {
            v[j] = true;
        }
        v
    };
    let non_signal: Vec<usize> = (0..m).filter(|j| !is_signal[*j]).collect();
    // Which half is redundant is itself task-specific, so no coordinate is
    // informative across every task. Features inside the signal arena are
    // skipped while enough outside features exist, so a dormant arena
    // feature never mirrors a live one.
    let mut redundant: Vec<usize> = {
        let outside: Vec<usize> = non_signal
            .iter()
            .copied()
            .filter(|&j| j >= cfg.signal_arena())
            .collect();
        let want = non_signal.len() / 2;
        let pool: &[usize] = if outside.len() >= want { &outside } else { &non_signal };
        let picked = sample_indices(rng, pool.len(), want);
        picked.into_iter().map(|i| pool[i]).collect()
    };
    redundant.sort_unstable();
    let noise: Vec<usize> = non_signal
        .iter()
        .copied()
        .filter(|j| !redundant.contains(j))
        .collect();

    let mut maps: BTreeMap<usize, RedundantMap> = BTreeMap::new();
    for &j in &redundant {
        maps.insert(
            j,
            RedundantMap {
                src: signal[rng.random_range(0..signal.len())],
                a: rng.random_range(0.5..2.0),
                b: rng.random_range(-0.5..0.5),
            },
        );
    }

    let factor_std = FACTOR_RATIO * cfg.noise_std;
    let mut x = Matrix::zeros(cfg.instances, m);
    let mut labels = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let label = i % cfg.class_count;
        labels.push(label);
        let latents: Vec<f64> = (0..cfg.signal_count)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                factor_std * n
            })
            .collect();
        for j in 0..m {
            let n: f64 = rng.sample(StandardNormal);
            let v = if is_signal[j] {
                centers[j]
                    + SIGNAL_AMP * cfg.class_shift(label)
                    + latents[cfg.group_of(j)]
                    + cfg.noise_std * n
            } else if maps.contains_key(&j) {
                // full-strength noise keeps redundant copies strictly worse
                // than the signal they mirror
                centers[j] + cfg.noise_std * n
            } else {
                centers[j] + 0.5 * cfg.noise_std * n
            };
            x.set(i, j, v);
        }
        for (&j, map) in &maps {
            let dev = (x.get(i, map.src) - centers[map.src]) / SIGNAL_AMP;
            let v = x.get(i, j) + REDUNDANT_AMP * (map.a * dev + map.b).tanh();
            x.set(i, j, v);
        }
    }
    (
        TaskDataset {
            task_id: task_id.to_string(),
            x,
            labels: Some(labels),
            class_count: Some(cfg.class_count),
            role,
        },
        SynthTruth {
            signal: signal.to_vec(),
            redundant,
            noise,
        },
    )
}

/// Generates source, validation and target tasks with planted signal sets.
///
/// Global structure: every feature j has a fixed center in the mid-band
/// and a fixed factor group, and every class has a fixed level in [-1, 1].
/// A task draws one signal feature per group (groups pair up the first
/// 2*signal_count features); only those features carry
/// the class level (times +-0.2) and the instance's group latent. Half of
/// the non-signal features add a fixed tanh map of one of the task's
/// signal features, the rest are pure noise. Source sets are drawn under
/// per-feature capacities so that together they spread evenly over every
/// group. The target's signal set is resampled until it matches no other
/// task's (except when only one admissible set exists).
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let centers: Vec<f64> = vec![CENTER; cfg.m];

    let mut spec: Vec<(String, Role)> = Vec::new();
    for d in 0..cfg.source_tasks {
        spec.push((format!("source_{d}"), Role::Source));
    }
    for v in 0..cfg.val_tasks {
        spec.push((format!("val_{v}"), Role::Val));
    }
    spec.push(("target".into(), Role::Target));

    // capacity-balanced drawing can dead-end (leftover slots clumped on
    // too few features), so redraw all sets together until it works
    let mut found = None;
    let mut last_err = None;
    for _ in 0..SET_ATTEMPTS {
        let mut taken: Vec<Vec<usize>> = Vec::new();
        let capacity_of = |j: usize| {
            if j >= cfg.signal_arena() {
                return 0;
            }
            let size = group_members(cfg, cfg.group_of(j)).len();
            cfg.source_tasks.div_ceil(size)
        };
        let mut capacity: Vec<usize> = (0..cfg.m).map(capacity_of).collect();
        let mut ok = true;
        for (_, role) in &spec {
            let drawn = match role {
                Role::Source => draw_capped_set(&mut rng, cfg, &mut capacity),
                Role::Val => Ok(draw_set(&mut rng, cfg)),
                Role::Target => draw_target_set(&mut rng, cfg, &taken),
            };
            match drawn {
                Ok(set) => taken.push(set),
                Err(e) => {
                    last_err = Some(e);
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            found = Some(taken);
            break;
        }
    }
    let Some(sets) = found else {
        return Err(last_err.expect("at least one attempt"));
    };

    let mut tasks = Vec::new();
    let mut truth = BTreeMap::new();
    for ((id, role), signal) in spec.into_iter().zip(sets) {
        let (task, t) = generate_task(&mut rng, cfg, &id, role, &centers, &signal);
        truth.insert(id, t);
        tasks.push(task);
    }
    Ok(SynthOutput {
        collection: Collection {
            tasks,
            class_count: Some(cfg.class_count),
        },
        truth,
    })
}

/// Writes the truth map as JSON next to the generated CSVs.
pub fn write_truth(truth: &BTreeMap<String, SynthTruth>, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(truth).map_err(|e| Error::json(path, e))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<BTreeMap<String, SynthTruth>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::json(path, e))
}
