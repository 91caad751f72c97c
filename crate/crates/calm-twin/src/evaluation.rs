//! Baselines, forecast metrics, and the experiment harness.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::death_time;
use crate::encoder::{load_checkpoint, EncoderError, EncoderPair};
use crate::io::{self, IoError};
use crate::llm::{GroundTruthOracle, LlmBackend, NearestContextMock, RemoteChatBackend, RemoteConfig};
use crate::model::{ModelError, SimulationConfig, TimeStep, Trajectory};
use crate::rng::derive_seed;
use crate::simulator::{
    simulate, simulate_ensemble_stats, ReplayPolicy, SelectionMode, SimulateError,
    SimulateOptions,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation: {detail}")]
    Validation { detail: String },
    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

fn stride_of(steps: &[TimeStep]) -> i64 {
    if steps.len() >= 2 {
        steps[steps.len() - 1].time - steps[steps.len() - 2].time
    } else {
        1
    }
}

/// Repeats the last observed state for the whole horizon.
pub fn baseline_constant(history: &Trajectory, horizon: usize) -> Trajectory {
    let last = history.steps.last().cloned();
    let stride = stride_of(&history.steps);
    let steps = match last {
        None => Vec::new(),
        Some(last) => (1..=horizon)
            .map(|k| TimeStep {
                time: last.time + stride * k as i64,
                state: last.state.clone(),
                action: BTreeMap::new(),
            })
            .collect(),
    };
    Trajectory::new(format!("{}-constant", history.id), steps)
}

fn flatten_states(steps: &[TimeStep]) -> Option<Vec<f64>> {
    let names: Vec<&String> = steps.first()?.state.keys().collect();
    let mut out = Vec::with_capacity(steps.len() * names.len());
    for step in steps {
        for name in &names {
            out.push(*step.state.get(*name)?);
        }
    }
    Some(out)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Candidates with enough steps, sorted by state-history distance
/// (ties to the lower dataset index).
fn ranked_neighbours(
    history: &Trajectory,
    dataset: &[Trajectory],
    horizon: usize,
) -> Result<Vec<(usize, f64)>, EvalError> {
    let length = history.len();
    let target = flatten_states(&history.steps).ok_or_else(|| EvalError::ShapeMismatch {
        detail: "history has inconsistent state keys".into(),
    })?;
    let mut scored = Vec::new();
    for (index, candidate) in dataset.iter().enumerate() {
        if candidate.len() < length + horizon {
            continue;
        }
        let Some(flat) = flatten_states(&candidate.steps[..length]) else {
            continue;
        };
        if flat.len() != target.len() {
            continue;
        }
        scored.push((index, euclidean(&target, &flat)));
    }
    if scored.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Nearest neighbour by Euclidean distance on the state history; the
/// neighbour's future is the prediction, verbatim.
pub fn baseline_1nn(
    history: &Trajectory,
    dataset: &[Trajectory],
    horizon: usize,
) -> Result<Trajectory, EvalError> {
    let ranked = ranked_neighbours(history, dataset, horizon)?;
    let (index, _) = ranked[0];
    let neighbour = &dataset[index];
    let future = neighbour.steps[history.len()..history.len() + horizon].to_vec();
    let stride = stride_of(&history.steps);
    let last_time = history.steps.last().map(|s| s.time).unwrap_or(0);
    let steps = future
        .into_iter()
        .enumerate()
        .map(|(k, mut s)| {
            s.time = last_time + stride * (k as i64 + 1);
            s.action = BTreeMap::new();
            s
        })
        .collect();
    Ok(Trajectory::new(format!("{}-1nn", history.id), steps))
}

/// Best-observed neighbour count for annual CF-registry-style cohorts.
pub const KNN_K_CF: usize = 12;
/// Best-observed neighbour count for daily tumour-growth cohorts.
pub const KNN_K_NSCLC: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `1 / (distance + 1e-9)`, normalized.
    InverseDistance,
    Uniform,
}

/// Weighted average of the `k` nearest neighbours' futures. `k = 1`
/// reduces to [`baseline_1nn`] exactly (the single future is returned
/// without averaging).
pub fn baseline_knn(
    history: &Trajectory,
    dataset: &[Trajectory],
    k: usize,
    horizon: usize,
    weighting: Weighting,
) -> Result<Trajectory, EvalError> {
    if k == 0 {
        return Err(EvalError::Validation {
            detail: "k must be positive".into(),
        });
    }
    if k == 1 {
        let mut out = baseline_1nn(history, dataset, horizon)?;
        out.id = format!("{}-knn1", history.id);
        return Ok(out);
    }
    let ranked = ranked_neighbours(history, dataset, horizon)?;
    let chosen = &ranked[..k.min(ranked.len())];
    let weights: Vec<f64> = match weighting {
        Weighting::InverseDistance => chosen.iter().map(|(_, d)| 1.0 / (d + 1e-9)).collect(),
        Weighting::Uniform => vec![1.0; chosen.len()],
    };
    let total: f64 = weights.iter().sum();

    let names: Vec<String> = history.steps[0].state.keys().cloned().collect();
    let stride = stride_of(&history.steps);
    let last_time = history.steps.last().map(|s| s.time).unwrap_or(0);
    let length = history.len();
    let mut steps = Vec::with_capacity(horizon);
    for f in 0..horizon {
        let mut state = BTreeMap::new();
        for name in &names {
            let mut value = 0.0;
            for ((index, _), weight) in chosen.iter().zip(&weights) {
                value += weight * dataset[*index].steps[length + f].state[name];
            }
            state.insert(name.clone(), value / total);
        }
        steps.push(TimeStep {
            time: last_time + stride * (f as i64 + 1),
            state,
            action: BTreeMap::new(),
        });
    }
    Ok(Trajectory::new(format!("{}-knn{k}", history.id), steps))
}

fn paired_state_values<'a>(
    pred: &'a Trajectory,
    truth: &'a Trajectory,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::ShapeMismatch {
            detail: format!("{} vs {} steps", pred.len(), truth.len()),
        });
    }
    let mut out = Vec::new();
    for (p, t) in pred.steps.iter().zip(truth.steps.iter()) {
        for (name, tv) in &t.state {
            let Some(pv) = p.state.get(name) else {
                return Err(EvalError::ShapeMismatch {
                    detail: format!("prediction lacks variable '{name}'"),
                });
            };
            out.push((*pv, *tv));
        }
    }
    if out.is_empty() {
        return Err(EvalError::ShapeMismatch {
            detail: "no state values to compare".into(),
        });
    }
    Ok(out)
}

/// Mean squared error over all state variables and steps.
pub fn mse(pred: &Trajectory, truth: &Trajectory) -> Result<f64, EvalError> {
    let pairs = paired_state_values(pred, truth)?;
    Ok(pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pairs.len() as f64)
}

/// Mean absolute error over all state variables and steps.
pub fn mae(pred: &Trajectory, truth: &Trajectory) -> Result<f64, EvalError> {
    let pairs = paired_state_values(pred, truth)?;
    Ok(pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64)
}

pub fn rmse(pred: &Trajectory, truth: &Trajectory) -> Result<f64, EvalError> {
    Ok(mse(pred, truth)?.sqrt())
}

/// Empirical-ensemble CRPS:
/// `mean |x_i - y| - (1 / 2m^2) * sum |x_i - x_j|`.
pub fn crps_empirical(ensemble: &[f64], observation: f64) -> Result<f64, EvalError> {
    if ensemble.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    let m = ensemble.len() as f64;
    let first: f64 = ensemble.iter().map(|x| (x - observation).abs()).sum::<f64>() / m;
    let mut spread = 0.0;
    for a in ensemble {
        for b in ensemble {
            spread += (a - b).abs();
        }
    }
    Ok(first - spread / (2.0 * m * m))
}

/// CRPS averaged over every step and state variable of an ensemble of
/// runs against one truth trajectory.
pub fn crps_runs(runs: &[Trajectory], truth: &Trajectory) -> Result<f64, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    for run in runs {
        if run.len() != truth.len() {
            return Err(EvalError::ShapeMismatch {
                detail: "run and truth lengths differ".into(),
            });
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in truth.steps.iter().enumerate() {
        for (name, tv) in &t.state {
            let ensemble: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.steps[i].state.get(name).copied())
                .collect();
            if ensemble.len() != runs.len() {
                return Err(EvalError::ShapeMismatch {
                    detail: format!("run lacks variable '{name}'"),
                });
            }
            total += crps_empirical(&ensemble, *tv)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Error in predicted event timing against the truth's crossing time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeToEventReport {
    /// Mean |predicted - true| crossing time over the runs, in time-label
    /// units; `None` when the truth never crosses.
    pub mean_abs_error: Option<f64>,
    /// Runs that never crossed and were scored at the horizon end.
    pub censored_runs: usize,
    pub truth_censored: bool,
}

pub fn time_to_event_error(
    pred_runs: &[Trajectory],
    truth: &Trajectory,
    diameter_threshold_cm: f64,
) -> Result<TimeToEventReport, EvalError> {
    if pred_runs.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    let Some(truth_time) = death_time(truth, diameter_threshold_cm) else {
        return Ok(TimeToEventReport {
            mean_abs_error: None,
            censored_runs: 0,
            truth_censored: true,
        });
    };
    let mut censored = 0usize;
    let mut total = 0.0;
    for run in pred_runs {
        let time = match death_time(run, diameter_threshold_cm) {
            Some(t) => t,
            None => {
                censored += 1;
                run.steps.last().map(|s| s.time).unwrap_or(truth_time)
            }
        };
        total += (time - truth_time).abs() as f64;
    }
    Ok(TimeToEventReport {
        mean_abs_error: Some(total / pred_runs.len() as f64),
        censored_runs: censored,
        truth_censored: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricId {
    Mse,
    Mae,
    Rmse,
    Crps,
}

impl MetricId {
    pub fn name(&self) -> &'static str {
        match self {
            MetricId::Mse => "mse",
            MetricId::Mae => "mae",
            MetricId::Rmse => "rmse",
            MetricId::Crps => "crps",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodSpec {
    Constant,
    OneNn,
    Knn { k: usize },
    CalmDt { mode: SelectionMode },
}

impl MethodSpec {
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Constant => "constant".into(),
            MethodSpec::OneNn => "1-nn".into(),
            MethodSpec::Knn { k } => format!("knn-k{k}"),
            MethodSpec::CalmDt { mode } => {
                let mode = serde_json::to_value(mode).expect("mode serializes");
                format!("calm-dt-{}", mode.as_str().unwrap_or("unknown"))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BackendSpec {
    /// Perfect answers from the test set itself; a diagnostic upper bound.
    Oracle,
    NearestContext,
    Remote {
        model: String,
        #[serde(default)]
        base_url: Option<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSettings {
    pub context_size: usize,
    pub lookback: usize,
    pub buffer: usize,
    pub ensemble: usize,
    pub temperature: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            context_size: 5,
            lookback: 3,
            buffer: 1,
            ensemble: 1,
            temperature: 0.0,
        }
    }
}

/// Experiment description, loadable from TOML or JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub environment: String,
    pub test_set: String,
    pub history_len: usize,
    pub horizon: usize,
    pub methods: Vec<MethodSpec>,
    pub metrics: Vec<MetricId>,
    pub repeats: usize,
    pub seed: u64,
    #[serde(default)]
    pub sim: SimSettings,
    pub backend: BackendSpec,
    #[serde(default)]
    pub encoder_checkpoint: Option<String>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        let content = std::fs::read_to_string(path).map_err(|e| EvalError::Validation {
            detail: format!("{}: {e}", path.display()),
        })?;
        let spec = if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            toml::from_str(&content).map_err(|e| EvalError::Validation {
                detail: format!("{}: {e}", path.display()),
            })?
        } else {
            serde_json::from_str(&content).map_err(|e| EvalError::Validation {
                detail: format!("{}: {e}", path.display()),
            })?
        };
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    /// method -> metric -> per-repeat per-sample scores.
    pub per_sample: BTreeMap<String, BTreeMap<String, Vec<Vec<f64>>>>,
    /// method -> metric -> variable -> mean over repeats and samples.
    /// Aggregate rows average across variables without normalization;
    /// this breakdown supports single-variable readouts.
    pub per_variable: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
}

impl ExperimentReport {
    /// Fixed columns: method, metric, mean, ci95, n.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,ci95,n\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.method, row.metric, row.mean, row.ci95, row.n
            ));
        }
        out
    }
}

fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

fn metric_value(
    metric: MetricId,
    runs: &[Trajectory],
    point: &Trajectory,
    truth: &Trajectory,
) -> Result<f64, EvalError> {
    match metric {
        MetricId::Mse => mse(point, truth),
        MetricId::Mae => mae(point, truth),
        MetricId::Rmse => rmse(point, truth),
        MetricId::Crps => crps_runs(runs, truth),
    }
}

fn restrict_to_variable(traj: &Trajectory, name: &str) -> Trajectory {
    Trajectory {
        id: traj.id.clone(),
        steps: traj
            .steps
            .iter()
            .map(|s| {
                let mut step = s.clone();
                step.state.retain(|k, _| k == name);
                step
            })
            .collect(),
    }
}

/// The metric computed on each state variable alone.
pub fn metric_value_per_variable(
    metric: MetricId,
    runs: &[Trajectory],
    point: &Trajectory,
    truth: &Trajectory,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut out = BTreeMap::new();
    let names: Vec<String> = truth
        .steps
        .first()
        .map(|s| s.state.keys().cloned().collect())
        .unwrap_or_default();
    for name in names {
        let truth_v = restrict_to_variable(truth, &name);
        let point_v = restrict_to_variable(point, &name);
        let runs_v: Vec<Trajectory> = runs.iter().map(|r| restrict_to_variable(r, &name)).collect();
        out.insert(name, metric_value(metric, &runs_v, &point_v, &truth_v)?);
    }
    Ok(out)
}

/// Runs every method on every test trajectory for the requested repeats
/// and aggregates each metric as mean with a normal-approximation 95% CI
/// over repeats. Deterministic methods report a zero-width interval.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path) -> Result<ExperimentReport, EvalError> {
    if spec.repeats == 0 {
        return Err(EvalError::Validation {
            detail: "repeats must be positive".into(),
        });
    }
    if spec.methods.is_empty() || spec.metrics.is_empty() {
        return Err(EvalError::Validation {
            detail: "methods and metrics must be non-empty".into(),
        });
    }
    let env = io::load_environment(&base_dir.join(&spec.environment))?;
    let test_set = io::read_trajectories_jsonl(&base_dir.join(&spec.test_set))?;
    if test_set.is_empty() {
        return Err(EvalError::Validation {
            detail: "test set is empty".into(),
        });
    }
    for traj in &test_set {
        if traj.len() < spec.history_len + spec.horizon {
            return Err(EvalError::Validation {
                detail: format!(
                    "test trajectory '{}' has {} steps but {} are required",
                    traj.id,
                    traj.len(),
                    spec.history_len + spec.horizon
                ),
            });
        }
    }

    let backend: Box<dyn LlmBackend> = match &spec.backend {
        BackendSpec::Oracle => Box::new(GroundTruthOracle::new(
            test_set.clone(),
            env.schemas.clone(),
        )),
        BackendSpec::NearestContext => Box::new(NearestContextMock),
        BackendSpec::Remote { model, base_url } => {
            let cfg = match base_url {
                Some(url) => {
                    let mut cfg = RemoteConfig::new(url.clone(), model.clone());
                    cfg.api_key = std::env::var(crate::llm::API_KEY_ENV).ok();
                    cfg
                }
                None => RemoteConfig::from_env(model.clone()).map_err(|e| {
                    EvalError::Validation {
                        detail: e.to_string(),
                    }
                })?,
            };
            Box::new(RemoteChatBackend::new(cfg))
        }
    };

    let trained = match &spec.encoder_checkpoint {
        Some(path) => Some(load_checkpoint(&base_dir.join(path))?.pair),
        None => None,
    };
    let fresh = EncoderPair::new_default(derive_seed(spec.seed, "encoder-init"));

    let sim_config = SimulationConfig {
        context_size: spec.sim.context_size,
        lookback: spec.sim.lookback,
        buffer: spec.sim.buffer,
        horizon: spec.horizon,
        ensemble: spec.sim.ensemble,
        temperature: spec.sim.temperature,
    };

    let mut report = ExperimentReport {
        rows: Vec::new(),
        per_sample: BTreeMap::new(),
        per_variable: BTreeMap::new(),
    };

    for method in &spec.methods {
        let method_name = method.name();
        let mut per_metric_repeats: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        let mut per_metric_samples: BTreeMap<&'static str, Vec<Vec<f64>>> = BTreeMap::new();
        let mut variable_sums: BTreeMap<&'static str, BTreeMap<String, (f64, usize)>> =
            BTreeMap::new();

        for repeat in 0..spec.repeats {
            let repeat_seed = derive_seed(spec.seed, &format!("{method_name}-rep{repeat}"));
            let mut sample_scores: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();

            for target in &test_set {
                let history = target.slice(0..spec.history_len);
                let truth = target.slice(spec.history_len..spec.history_len + spec.horizon);
                let (runs, point): (Vec<Trajectory>, Trajectory) = match method {
                    MethodSpec::Constant => {
                        let p = baseline_constant(&history, spec.horizon);
                        (vec![p.clone()], p)
                    }
                    MethodSpec::OneNn => {
                        let p = baseline_1nn(&history, &env.dataset, spec.horizon)?;
                        (vec![p.clone()], p)
                    }
                    MethodSpec::Knn { k } => {
                        let p = baseline_knn(
                            &history,
                            &env.dataset,
                            *k,
                            spec.horizon,
                            Weighting::InverseDistance,
                        )?;
                        (vec![p.clone()], p)
                    }
                    MethodSpec::CalmDt { mode } => {
                        let encoders = match (mode, &trained) {
                            (SelectionMode::Encoder | SelectionMode::EncoderNoSummary, Some(t)) => t,
                            _ => &fresh,
                        };
                        let policy = ReplayPolicy::from_trajectory(target, spec.history_len);
                        let result = simulate(
                            &env,
                            &history,
                            &policy,
                            &sim_config,
                            backend.as_ref(),
                            encoders,
                            *mode,
                            &SimulateOptions {
                                seed: derive_seed(repeat_seed, &target.id),
                                jobs: spec.jobs,
                            },
                        )?;
                        let stats = simulate_ensemble_stats(&result, &[])?;
                        let point = Trajectory::new(
                            format!("{}-mean", target.id),
                            stats
                                .times
                                .iter()
                                .zip(stats.mean.iter())
                                .map(|(&time, state)| TimeStep {
                                    time,
                                    state: state.clone(),
                                    action: BTreeMap::new(),
                                })
                                .collect(),
                        );
                        (result.runs, point)
                    }
                };
                for metric in &spec.metrics {
                    let value = metric_value(*metric, &runs, &point, &truth)?;
                    sample_scores.entry(metric.name()).or_default().push(value);
                    let breakdown = metric_value_per_variable(*metric, &runs, &point, &truth)?;
                    let slot = variable_sums.entry(metric.name()).or_default();
                    for (variable, v) in breakdown {
                        let entry = slot.entry(variable).or_insert((0.0, 0));
                        entry.0 += v;
                        entry.1 += 1;
                    }
                }
            }

            for metric in &spec.metrics {
                let scores = sample_scores.remove(metric.name()).unwrap_or_default();
                let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
                per_metric_repeats.entry(metric.name()).or_default().push(mean);
                per_metric_samples
                    .entry(metric.name())
                    .or_default()
                    .push(scores);
            }
        }

        let mut detail = BTreeMap::new();
        let mut variable_detail = BTreeMap::new();
        for metric in &spec.metrics {
            let repeats = per_metric_repeats.remove(metric.name()).unwrap_or_default();
            let (mean, ci95) = mean_and_ci95(&repeats);
            report.rows.push(ReportRow {
                method: method_name.clone(),
                metric: metric.name().to_string(),
                mean,
                ci95,
                n: repeats.len(),
            });
            detail.insert(
                metric.name().to_string(),
                per_metric_samples.remove(metric.name()).unwrap_or_default(),
            );
            let means: BTreeMap<String, f64> = variable_sums
                .remove(metric.name())
                .unwrap_or_default()
                .into_iter()
                .map(|(variable, (total, count))| (variable, total / count.max(1) as f64))
                .collect();
            variable_detail.insert(metric.name().to_string(), means);
        }
        report.per_sample.insert(method_name.clone(), detail);
        report.per_variable.insert(method_name, variable_detail);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DEATH_DIAMETER_CM;

    fn traj(id: &str, values: &[&[f64]]) -> Trajectory {
        // values[t] = [x, y]
        Trajectory::new(
            id,
            values
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    let mut s = TimeStep::new(t as i64);
                    s.state.insert("x".into(), row[0]);
                    if row.len() > 1 {
                        s.state.insert("y".into(), row[1]);
                    }
                    s
                })
                .collect(),
        )
    }

    #[test]
    fn constant_baseline_repeats_the_last_state() {
        let h = traj("h", &[&[1.0, 9.0], &[5.0, 7.0]]);
        let p = baseline_constant(&h, 3);
        assert_eq!(p.len(), 3);
        for step in &p.steps {
            assert_eq!(step.state["x"], 5.0);
            assert_eq!(step.state["y"], 7.0);
        }
        assert_eq!(
            p.steps.iter().map(|s| s.time).collect::<Vec<_>>(),
            vec![2, 3, 4]
        );
        assert!(baseline_constant(&h, 0).is_empty());
    }

    #[test]
    fn constant_baseline_ignores_earlier_history() {
        let short = traj("s", &[&[5.0]]);
        let long = traj("l", &[&[0.0], &[99.0], &[5.0]]);
        let a = baseline_constant(&short, 2);
        let b = baseline_constant(&long, 2);
        for (x, y) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(x.state, y.state);
        }
    }

    #[test]
    fn one_nn_returns_the_exact_copy_future() {
        let h = traj("h", &[&[1.0], &[2.0]]);
        let dataset = vec![
            traj("far", &[&[50.0], &[60.0], &[70.0], &[80.0]]),
            traj("same", &[&[1.0], &[2.0], &[3.0], &[4.0]]),
        ];
        let p = baseline_1nn(&h, &dataset, 2).unwrap();
        assert_eq!(p.steps[0].state["x"], 3.0);
        assert_eq!(p.steps[1].state["x"], 4.0);
    }

    #[test]
    fn knn_equal_distances_average_the_futures() {
        let h = traj("h", &[&[0.0]]);
        let dataset = vec![
            traj("a", &[&[1.0], &[10.0]]),
            traj("b", &[&[-1.0], &[20.0]]),
        ];
        let p = baseline_knn(&h, &dataset, 2, 1, Weighting::InverseDistance).unwrap();
        assert!((p.steps[0].state["x"] - 15.0).abs() < 1e-9);
    }

    #[test]
    fn knn_k1_equals_1nn_exactly() {
        let mut rng = crate::rng::substream(31, "knn-oracle");
        use rand::Rng;
        for _ in 0..100 {
            let h = traj(
                "h",
                &[&[rng.gen_range(-5.0..5.0)], &[rng.gen_range(-5.0..5.0)]],
            );
            let dataset: Vec<Trajectory> = (0..6)
                .map(|i| {
                    let rows: Vec<Vec<f64>> =
                        (0..5).map(|_| vec![rng.gen_range(-5.0..5.0)]).collect();
                    Trajectory::new(
                        format!("d{i}"),
                        rows.iter()
                            .enumerate()
                            .map(|(t, row)| {
                                let mut s = TimeStep::new(t as i64);
                                s.state.insert("x".into(), row[0]);
                                s
                            })
                            .collect(),
                    )
                })
                .collect();
            let one = baseline_1nn(&h, &dataset, 3).unwrap();
            let knn = baseline_knn(&h, &dataset, 1, 3, Weighting::InverseDistance).unwrap();
            for (a, b) in one.steps.iter().zip(knn.steps.iter()) {
                assert_eq!(a.state, b.state);
                assert_eq!(a.time, b.time);
            }
        }
    }

    #[test]
    fn error_metrics_match_hand_arithmetic() {
        let identical = traj("a", &[&[2.0], &[4.0]]);
        assert_eq!(mse(&identical, &identical).unwrap(), 0.0);
        assert_eq!(mae(&identical, &identical).unwrap(), 0.0);

        let shifted = traj("b", &[&[3.0], &[5.0]]);
        assert_eq!(mse(&shifted, &identical).unwrap(), 1.0);
        assert_eq!(mae(&shifted, &identical).unwrap(), 1.0);
        assert_eq!(rmse(&shifted, &identical).unwrap(), 1.0);

        let pred = traj("p", &[&[2.0], &[4.0]]);
        let truth = traj("t", &[&[1.0], &[6.0]]);
        assert!((mse(&pred, &truth).unwrap() - 2.5).abs() < 1e-12);
        assert!((mae(&pred, &truth).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn metric_identities_hold() {
        let pred = traj("p", &[&[2.7], &[4.1], &[0.2]]);
        let truth = traj("t", &[&[1.0], &[6.9], &[-3.0]]);
        let mse_v = mse(&pred, &truth).unwrap();
        let mae_v = mae(&pred, &truth).unwrap();
        let rmse_v = rmse(&pred, &truth).unwrap();
        assert!((rmse_v * rmse_v - mse_v).abs() < 1e-12);
        assert!(mae_v <= rmse_v + 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = traj("a", &[&[1.0]]);
        let b = traj("b", &[&[1.0], &[2.0]]);
        assert!(matches!(mse(&a, &b), Err(EvalError::ShapeMismatch { .. })));
    }

    #[test]
    fn crps_degenerate_and_hand_cases() {
        assert!((crps_empirical(&[3.0], 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((crps_empirical(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(crps_empirical(&[4.0, 4.0, 4.0], 4.0).unwrap(), 0.0);
        assert!(crps_empirical(&[], 0.0).is_err());
    }

    #[test]
    fn crps_is_bounded_by_mean_absolute_error() {
        let mut rng = crate::rng::substream(33, "crps-prop");
        use rand::Rng;
        for _ in 0..200 {
            let m = rng.gen_range(1..8);
            let ensemble: Vec<f64> = (0..m).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let obs = rng.gen_range(-10.0..10.0);
            let crps = crps_empirical(&ensemble, obs).unwrap();
            let mean_abs: f64 =
                ensemble.iter().map(|x| (x - obs).abs()).sum::<f64>() / m as f64;
            assert!(crps >= -1e-12);
            assert!(crps <= mean_abs + 1e-12);
        }
    }

    fn volume_traj(id: &str, volumes: &[f64]) -> Trajectory {
        Trajectory::new(
            id,
            volumes
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    let mut s = TimeStep::new(t as i64);
                    s.state.insert(crate::datagen::TUMOUR_VOLUME.into(), v);
                    s
                })
                .collect(),
        )
    }

    #[test]
    fn time_to_event_cases() {
        let truth = volume_traj("t", &[100.0, 600.0, 1200.0, 1300.0]);
        let same = time_to_event_error(&[truth.clone()], &truth, DEATH_DIAMETER_CM).unwrap();
        assert_eq!(same.mean_abs_error, Some(0.0));
        assert_eq!(same.censored_runs, 0);

        let late = volume_traj("l", &[100.0, 600.0, 900.0, 1000.0, 1200.0]);
        let report = time_to_event_error(&[late], &truth, DEATH_DIAMETER_CM).unwrap();
        assert_eq!(report.mean_abs_error, Some(2.0));

        let censored = volume_traj("c", &[100.0, 200.0, 300.0, 400.0]);
        let report = time_to_event_error(&[censored], &truth, DEATH_DIAMETER_CM).unwrap();
        assert_eq!(report.mean_abs_error, Some(1.0));
        assert_eq!(report.censored_runs, 1);

        let flat_truth = volume_traj("f", &[100.0, 110.0]);
        let report =
            time_to_event_error(&[volume_traj("p", &[1.0, 2.0])], &flat_truth, DEATH_DIAMETER_CM)
                .unwrap();
        assert!(report.truth_censored);
        assert_eq!(report.mean_abs_error, None);
    }

    #[test]
    fn ci_is_zero_for_single_repeat_and_deterministic_methods() {
        let (mean, ci) = mean_and_ci95(&[3.5]);
        assert_eq!((mean, ci), (3.5, 0.0));
        let (_, ci) = mean_and_ci95(&[2.0, 2.0, 2.0]);
        assert_eq!(ci, 0.0);
        let (_, ci) = mean_and_ci95(&[1.0, 3.0]);
        assert!(ci > 0.0);
    }
}
