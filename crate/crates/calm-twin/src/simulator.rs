//! The simulation loop: retrieve, prompt, generate, step the policy.
//!
//! Each ensemble member keeps a rolling window of the most recent
//! `lookback` steps. Retrieval re-runs before a generated step `f` when
//! `f % buffer == 0` or when the previously appended action is outside the
//! action set of the last retrieval; otherwise only the prompt is rebuilt.
//! The model is asked for exactly one step per call and its reply is
//! decoded with the tolerant parser; a failed decode triggers up to three
//! corrective regenerations before the member aborts.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{self, DecodeError};
use crate::encoder::{compose_retrieval_text, summarize_trends_rule, EncoderPair};
use crate::knowledge::extract_relevant;
use crate::llm::{
    formulate_prompt, llm_select_context, Decoding, GenerationParams, LlmBackend, LlmError,
    PromptBundle,
};
use crate::model::{
    KnowledgeEntry, ModelError, ModellingEnvironment, RelaxationLevel, RetrievalEvent,
    RunProvenance, SimulationConfig, SimulationDiagnostics, SimulationResult, TimeStep,
    Trajectory, VariableKind, VariableSchema,
};
use crate::retrieval::{
    discretize_action, extract_pair, filter_valid_relaxed, select_context, select_context_full,
    select_context_random, unique_actions, ActionKey, ContextCandidate, RetrievalError,
    ScoredCandidate,
};
use crate::rng::derive_seed_indexed;

/// How the context set is chosen each retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Encoder scoring with trend summaries appended to texts.
    Encoder,
    /// Encoder scoring on bare series text.
    EncoderNoSummary,
    /// Seeded uniform sample.
    Random,
    /// Ask the backend itself to pick indices.
    Llm,
    /// The whole action-relevant dataset.
    Full,
    /// Empty context.
    ZeroShot,
}

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("history has {got} steps but lookback {want} is required")]
    HistoryTooShort { got: usize, want: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("member {member} aborted at step {step} after {retries} regenerations: {source}")]
    ParseAbort {
        member: usize,
        step: usize,
        retries: usize,
        source: DecodeError,
    },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("{detail}")]
    Invalid { detail: String },
}

/// An action source. Implementations must cover every action variable;
/// missing variables are filled with 0 by the simulator.
pub trait Policy: Send + Sync {
    fn action(
        &self,
        history: &[TimeStep],
        new_state: &BTreeMap<String, f64>,
        time: i64,
        step_index: usize,
    ) -> BTreeMap<String, f64>;
}

/// Plays back a fixed action sequence by generated-step index; the last
/// entry repeats beyond the end.
pub struct ReplayPolicy {
    pub actions: Vec<BTreeMap<String, f64>>,
}

impl ReplayPolicy {
    /// Actions of `traj.steps[from..]`, the usual evaluation policy that
    /// replays a test trajectory's recorded treatments.
    pub fn from_trajectory(traj: &Trajectory, from: usize) -> Self {
        Self {
            actions: traj.steps[from.min(traj.len())..]
                .iter()
                .map(|s| s.action.clone())
                .collect(),
        }
    }
}

impl Policy for ReplayPolicy {
    fn action(
        &self,
        _history: &[TimeStep],
        _new_state: &BTreeMap<String, f64>,
        _time: i64,
        step_index: usize,
    ) -> BTreeMap<String, f64> {
        self.actions
            .get(step_index)
            .or_else(|| self.actions.last())
            .cloned()
            .unwrap_or_default()
    }
}

/// Repeats the most recent action in the rolling history.
pub struct RepeatLastPolicy;

impl Policy for RepeatLastPolicy {
    fn action(
        &self,
        history: &[TimeStep],
        _new_state: &BTreeMap<String, f64>,
        _time: i64,
        _step_index: usize,
    ) -> BTreeMap<String, f64> {
        history.last().map(|s| s.action.clone()).unwrap_or_default()
    }
}

pub struct ConstantPolicy {
    pub action: BTreeMap<String, f64>,
}

impl Policy for ConstantPolicy {
    fn action(
        &self,
        _history: &[TimeStep],
        _new_state: &BTreeMap<String, f64>,
        _time: i64,
        _step_index: usize,
    ) -> BTreeMap<String, f64> {
        self.action.clone()
    }
}

/// Thresholds one state variable of the freshly generated state.
pub struct RulePolicy {
    pub variable: String,
    pub threshold: f64,
    pub at_or_above: BTreeMap<String, f64>,
    pub below: BTreeMap<String, f64>,
}

impl Policy for RulePolicy {
    fn action(
        &self,
        _history: &[TimeStep],
        new_state: &BTreeMap<String, f64>,
        _time: i64,
        _step_index: usize,
    ) -> BTreeMap<String, f64> {
        let value = new_state.get(&self.variable).copied().unwrap_or(0.0);
        if value >= self.threshold {
            self.at_or_above.clone()
        } else {
            self.below.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub seed: u64,
    /// Worker cap for ensemble members. Members are independent given
    /// their derived seeds; keep 1 for order-sensitive mock backends.
    pub jobs: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self { seed: 0, jobs: 1 }
    }
}

struct RetrievalOutcome {
    context: Vec<ScoredCandidate>,
    knowledge: Vec<KnowledgeEntry>,
    h_a: BTreeSet<ActionKey>,
    relaxation: RelaxationLevel,
}

fn summarize_or_none(steps: &[TimeStep], schemas: &[VariableSchema]) -> Option<String> {
    if steps.len() < 2 {
        return None;
    }
    summarize_trends_rule(steps, schemas).ok()
}

#[allow(clippy::too_many_arguments)]
fn run_retrieval(
    env: &ModellingEnvironment,
    dataset: &[Trajectory],
    window: &Trajectory,
    cfg: &SimulationConfig,
    encoders: &EncoderPair,
    mode: SelectionMode,
    backend: &dyn LlmBackend,
    event_seed: u64,
) -> Result<RetrievalOutcome, SimulateError> {
    let schemas = &env.schemas;
    let h_a = unique_actions(window, cfg.lookback, schemas)?;
    let relevant = extract_relevant(&env.knowledge, window, schemas);

    if mode == SelectionMode::ZeroShot {
        return Ok(RetrievalOutcome {
            context: Vec::new(),
            knowledge: relevant,
            h_a,
            relaxation: RelaxationLevel::Full,
        });
    }

    let (windows, relaxation) = filter_valid_relaxed(dataset, &h_a, cfg.lookback, schemas);
    let candidates: Vec<ContextCandidate> = windows
        .into_iter()
        .map(|(index, w)| ContextCandidate {
            pair: extract_pair(&dataset[index], w, cfg.lookback, cfg.buffer),
            dataset_index: index,
        })
        .collect();

    let context = match mode {
        SelectionMode::Encoder | SelectionMode::EncoderNoSummary => {
            let with_summary = mode == SelectionMode::Encoder;
            let target_summary = with_summary
                .then(|| summarize_or_none(&window.steps, schemas))
                .flatten();
            let target_text =
                compose_retrieval_text(&window.steps, schemas, target_summary.as_deref());
            let texts: Vec<String> = candidates
                .iter()
                .map(|c| {
                    let summary = with_summary
                        .then(|| summarize_or_none(&c.pair.history, schemas))
                        .flatten();
                    compose_retrieval_text(&c.pair.history, schemas, summary.as_deref())
                })
                .collect();
            select_context(
                &target_text,
                &candidates,
                &texts,
                &encoders.target,
                &encoders.candidate,
                cfg.context_size,
            )?
        }
        SelectionMode::Random => select_context_random(&candidates, cfg.context_size, event_seed),
        SelectionMode::Full => select_context_full(&candidates),
        SelectionMode::Llm => {
            if candidates.is_empty() || cfg.context_size == 0 {
                Vec::new()
            } else if candidates.len() <= cfg.context_size {
                select_context_full(&candidates)
            } else {
                let target_text = compose_retrieval_text(&window.steps, schemas, None);
                let texts: Vec<String> = candidates
                    .iter()
                    .map(|c| compose_retrieval_text(&c.pair.history, schemas, None))
                    .collect();
                let indices =
                    llm_select_context(backend, &target_text, &texts, cfg.context_size)?;
                indices
                    .into_iter()
                    .map(|i| ScoredCandidate {
                        pair: candidates[i].pair.clone(),
                        score: 0.0,
                        dataset_index: candidates[i].dataset_index,
                    })
                    .collect()
            }
        }
        SelectionMode::ZeroShot => unreachable!("handled above"),
    };

    Ok(RetrievalOutcome {
        context,
        knowledge: relevant,
        h_a,
        relaxation,
    })
}

fn corrective_bundle(base: &PromptBundle, next_time: i64) -> PromptBundle {
    let mut bundle = base.clone();
    bundle.user_text.push_str(&format!(
        "\n\nYour previous answer did not match the required format. Respond with exactly one line: Time {next_time}: ..."
    ));
    bundle
}

/// One generation with up to three corrective regenerations. Returns the
/// decoded state map; transport errors propagate immediately.
fn generate_step(
    backend: &dyn LlmBackend,
    bundle: &PromptBundle,
    schemas: &[VariableSchema],
    next_time: i64,
    member: usize,
    step: usize,
    parse_retries: &mut usize,
) -> Result<BTreeMap<String, f64>, SimulateError> {
    let mut last_error = DecodeError::Malformed {
        position: 0,
        detail: "no attempt made".into(),
    };
    for attempt in 0..=3 {
        let attempt_bundle = if attempt == 0 {
            bundle.clone()
        } else {
            corrective_bundle(bundle, next_time)
        };
        let texts = backend.complete(&attempt_bundle)?;
        let reply = texts.first().map(String::as_str).unwrap_or("");
        match codec::decode_states(reply, schemas, Some(1)) {
            Ok((steps, _)) => return Ok(steps.into_iter().next().expect("one step").state),
            Err(error) => {
                *parse_retries += 1;
                last_error = error;
            }
        }
    }
    // The first attempt is not a retry.
    *parse_retries -= 1;
    Err(SimulateError::ParseAbort {
        member,
        step,
        retries: 3,
        source: last_error,
    })
}

fn generation_params(cfg: &SimulationConfig) -> GenerationParams {
    GenerationParams {
        temperature: cfg.temperature,
        n_samples: 1,
        max_tokens: 512,
        decoding: if cfg.temperature == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Beam(1)
        },
    }
}

fn time_stride(steps: &[TimeStep]) -> i64 {
    if steps.len() >= 2 {
        steps[steps.len() - 1].time - steps[steps.len() - 2].time
    } else {
        1
    }
}

fn normalize_action(
    raw: BTreeMap<String, f64>,
    schemas: &[VariableSchema],
) -> BTreeMap<String, f64> {
    schemas
        .iter()
        .filter(|s| s.kind == VariableKind::Action)
        .map(|s| (s.name.clone(), raw.get(&s.name).copied().unwrap_or(0.0)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_member(
    env: &ModellingEnvironment,
    dataset: &[Trajectory],
    h0: &Trajectory,
    policy: &dyn Policy,
    cfg: &SimulationConfig,
    backend: &dyn LlmBackend,
    encoders: &EncoderPair,
    mode: SelectionMode,
    member: usize,
    member_seed: u64,
) -> Result<(Trajectory, RunProvenance, SimulationDiagnostics), SimulateError> {
    let schemas = &env.schemas;
    let mut window: Vec<TimeStep> = h0.steps[h0.len() - cfg.lookback..].to_vec();
    let stride = time_stride(&window);
    let params = generation_params(cfg);

    let mut events: Vec<RetrievalEvent> = Vec::new();
    let mut step_event: Vec<usize> = Vec::new();
    let mut generated: Vec<TimeStep> = Vec::new();
    let mut diagnostics = SimulationDiagnostics::default();

    let mut context: Vec<ScoredCandidate> = Vec::new();
    let mut relevant: Vec<KnowledgeEntry> = Vec::new();
    let mut h_a: BTreeSet<ActionKey> = BTreeSet::new();
    let mut new_action_pending = false;

    for f in 0..cfg.horizon {
        if f % cfg.buffer == 0 || new_action_pending {
            let window_traj = Trajectory::new(h0.id.clone(), window.clone());
            let event_seed = derive_seed_indexed(member_seed, "selection", events.len() as u64);
            let outcome = run_retrieval(
                env,
                dataset,
                &window_traj,
                cfg,
                encoders,
                mode,
                backend,
                event_seed,
            )?;
            events.push(RetrievalEvent {
                at_step: f,
                context_ids: outcome
                    .context
                    .iter()
                    .map(|c| c.pair.source_id.clone())
                    .collect(),
                knowledge_keys: outcome.knowledge.iter().map(|k| k.key.clone()).collect(),
                relaxation: outcome.relaxation,
            });
            diagnostics.retrieval_invocations += 1;
            context = outcome.context;
            relevant = outcome.knowledge;
            h_a = outcome.h_a;
        }

        let bundle = formulate_prompt(&relevant, &context, &window, schemas, 1, params.clone());
        let next_time = window.last().expect("window is non-empty").time + stride;
        let state = generate_step(
            backend,
            &bundle,
            schemas,
            next_time,
            member,
            f,
            &mut diagnostics.parse_retries,
        )?;
        let action = normalize_action(policy.action(&window, &state, next_time, f), schemas);
        let step = TimeStep {
            time: next_time,
            state,
            action,
        };
        new_action_pending = !h_a.contains(&discretize_action(&step, schemas));

        window.push(step.clone());
        window.remove(0);
        generated.push(step);
        step_event.push(events.len() - 1);
    }

    let run = Trajectory::new(format!("{}-run{}", h0.id, member), generated);
    Ok((
        run,
        RunProvenance { events, step_event },
        diagnostics,
    ))
}

/// Simulates `cfg.horizon` steps for `cfg.ensemble` members and collects
/// runs, provenance, and diagnostics. With a deterministic backend and a
/// fixed seed the output is bit-stable. The target's own id is excluded
/// from retrieval.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    env: &ModellingEnvironment,
    h0: &Trajectory,
    policy: &dyn Policy,
    cfg: &SimulationConfig,
    backend: &dyn LlmBackend,
    encoders: &EncoderPair,
    mode: SelectionMode,
    opts: &SimulateOptions,
) -> Result<SimulationResult, SimulateError> {
    cfg.validate()?;
    h0.validate()?;
    if h0.len() < cfg.lookback {
        return Err(SimulateError::HistoryTooShort {
            got: h0.len(),
            want: cfg.lookback,
        });
    }
    let dataset: Vec<Trajectory> = env
        .dataset
        .iter()
        .filter(|t| t.id != h0.id)
        .cloned()
        .collect();

    let members: Vec<usize> = (0..cfg.ensemble).collect();
    let seeds: Vec<u64> = members
        .iter()
        .map(|&m| derive_seed_indexed(opts.seed, "member", m as u64))
        .collect();

    let mut outcomes: Vec<Option<Result<_, SimulateError>>> =
        members.iter().map(|_| None).collect();
    let workers = opts.jobs.max(1).min(cfg.ensemble);
    if workers <= 1 {
        for (&member, slot) in members.iter().zip(outcomes.iter_mut()) {
            *slot = Some(run_member(
                env,
                &dataset,
                h0,
                policy,
                cfg,
                backend,
                encoders,
                mode,
                member,
                seeds[member],
            ));
        }
    } else {
        let slots: Vec<std::sync::Mutex<Option<Result<_, SimulateError>>>> =
            members.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for worker in 0..workers {
                let slots = &slots;
                let dataset = &dataset;
                let seeds = &seeds;
                scope.spawn(move || {
                    for member in (worker..cfg.ensemble).step_by(workers) {
                        let outcome = run_member(
                            env,
                            dataset,
                            h0,
                            policy,
                            cfg,
                            backend,
                            encoders,
                            mode,
                            member,
                            seeds[member],
                        );
                        *slots[member].lock().unwrap() = Some(outcome);
                    }
                });
            }
        });
        for (slot, out) in slots.into_iter().zip(outcomes.iter_mut()) {
            *out = slot.into_inner().unwrap();
        }
    }

    let mut result = SimulationResult {
        runs: Vec::with_capacity(cfg.ensemble),
        provenance: Vec::with_capacity(cfg.ensemble),
        diagnostics: SimulationDiagnostics::default(),
    };
    for outcome in outcomes {
        let (run, provenance, diagnostics) =
            outcome.expect("every member was scheduled")?;
        result.runs.push(run);
        result.provenance.push(provenance);
        result.diagnostics.retrieval_invocations += diagnostics.retrieval_invocations;
        result.diagnostics.parse_retries += diagnostics.parse_retries;
    }
    Ok(result)
}

/// Rolls out `horizon` steps `runs` times with a pinned context set and no
/// re-retrieval; the scoring primitive behind contrastive-set labelling
/// ("how well does the model simulate this target with exactly this
/// candidate in context").
#[allow(clippy::too_many_arguments)]
pub fn rollout_fixed_context(
    schemas: &[VariableSchema],
    knowledge: &[KnowledgeEntry],
    h0: &Trajectory,
    context: &[ScoredCandidate],
    policy: &dyn Policy,
    lookback: usize,
    horizon: usize,
    runs: usize,
    temperature: f64,
    backend: &dyn LlmBackend,
) -> Result<Vec<Trajectory>, SimulateError> {
    if h0.len() < lookback {
        return Err(SimulateError::HistoryTooShort {
            got: h0.len(),
            want: lookback,
        });
    }
    let params = GenerationParams {
        temperature,
        n_samples: 1,
        max_tokens: 512,
        decoding: if temperature == 0.0 {
            Decoding::Greedy
        } else {
            Decoding::Beam(1)
        },
    };
    let mut out = Vec::with_capacity(runs);
    for run_index in 0..runs {
        let mut window: Vec<TimeStep> = h0.steps[h0.len() - lookback..].to_vec();
        let stride = time_stride(&window);
        let mut generated = Vec::with_capacity(horizon);
        let mut retries = 0usize;
        for f in 0..horizon {
            let window_traj = Trajectory::new(h0.id.clone(), window.clone());
            let relevant = extract_relevant(knowledge, &window_traj, schemas);
            let bundle = formulate_prompt(&relevant, context, &window, schemas, 1, params.clone());
            let next_time = window.last().expect("window is non-empty").time + stride;
            let state = generate_step(
                backend,
                &bundle,
                schemas,
                next_time,
                run_index,
                f,
                &mut retries,
            )?;
            let action = normalize_action(policy.action(&window, &state, next_time, f), schemas);
            let step = TimeStep {
                time: next_time,
                state,
                action,
            };
            window.push(step.clone());
            window.remove(0);
            generated.push(step);
        }
        out.push(Trajectory::new(
            format!("{}-score{}", h0.id, run_index),
            generated,
        ));
    }
    Ok(out)
}

/// Pointwise ensemble statistics over the generated runs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnsembleStats {
    pub times: Vec<i64>,
    pub mean: Vec<BTreeMap<String, f64>>,
    /// One entry per requested quantile level.
    pub quantiles: Vec<(f64, Vec<BTreeMap<String, f64>>)>,
}

/// Per-step mean and empirical quantiles (linear interpolation between
/// order statistics; level 0 is the minimum, level 1 the maximum).
pub fn simulate_ensemble_stats(
    result: &SimulationResult,
    levels: &[f64],
) -> Result<EnsembleStats, SimulateError> {
    let first = result.runs.first().ok_or(SimulateError::EmptyEnsemble)?;
    let steps = first.len();
    for run in &result.runs {
        if run.len() != steps {
            return Err(SimulateError::Invalid {
                detail: "runs have different lengths".into(),
            });
        }
    }
    let times: Vec<i64> = first.steps.iter().map(|s| s.time).collect();
    let names: Vec<String> = first.steps[0].state.keys().cloned().collect();

    let quantile = |sorted: &[f64], level: f64| -> f64 {
        let n = sorted.len();
        if n == 1 {
            return sorted[0];
        }
        let pos = level.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };

    let mut mean = Vec::with_capacity(steps);
    let mut quantiles: Vec<(f64, Vec<BTreeMap<String, f64>>)> =
        levels.iter().map(|&l| (l, Vec::with_capacity(steps))).collect();
    for i in 0..steps {
        let mut mean_step = BTreeMap::new();
        let mut q_steps: Vec<BTreeMap<String, f64>> = levels.iter().map(|_| BTreeMap::new()).collect();
        for name in &names {
            let mut values: Vec<f64> = result
                .runs
                .iter()
                .map(|r| r.steps[i].state.get(name).copied().unwrap_or(f64::NAN))
                .collect();
            values.sort_by(f64::total_cmp);
            let sum: f64 = values.iter().sum();
            mean_step.insert(name.clone(), sum / values.len() as f64);
            for (slot, &level) in q_steps.iter_mut().zip(levels) {
                slot.insert(name.clone(), quantile(&values, level));
            }
        }
        mean.push(mean_step);
        for (slot, q) in quantiles.iter_mut().zip(q_steps) {
            slot.1.push(q);
        }
    }
    Ok(EnsembleStats {
        times,
        mean,
        quantiles,
    })
}
