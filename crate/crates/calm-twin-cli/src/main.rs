//! Command-line surface for the simulation pipeline.
//!
//! Exit codes: 0 success, 2 validation or configuration failure,
//! 3 transport failure, 4 generation parse-abort. All randomness flows
//! from `--seed` through named sub-streams, so identical invocations
//! produce byte-identical outputs.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use calm_twin::contrastive::{build_contrastive_set, ContrastiveBuildConfig, ScoreMetric};
use calm_twin::datagen::{
    gen_pkpd, gen_predator_prey, nsclc_knowledge, nsclc_schemas, predator_prey_schemas,
    PkPdParams, PkPdPolicy, PredatorPreyParams,
};
use calm_twin::encoder::{
    load_checkpoint, save_checkpoint, train, train_config_digest, ContrastiveExample,
    EncoderPair, TrainConfig, DEFAULT_DIMENSION, DEFAULT_FEATURE_BUCKETS,
};
use calm_twin::evaluation::{run_experiment, ExperimentSpec};
use calm_twin::io::{
    load_environment, read_trajectories_jsonl, save_environment, write_trajectories_jsonl,
};
use calm_twin::llm::{
    GroundTruthOracle, LlmBackend, NearestContextMock, RemoteChatBackend, RemoteConfig,
};
use calm_twin::model::{
    EnvironmentPatch, KnowledgeEntry, ModellingEnvironment, SimulationConfig, Trajectory,
    VariableSchema,
};
use calm_twin::rng::derive_seed;
use calm_twin::simulator::{
    simulate, ConstantPolicy, Policy, RepeatLastPolicy, ReplayPolicy, RulePolicy, SelectionMode,
    SimulateOptions,
};

use config::FileConfig;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "calm-twin", version, about = "Retrieval-augmented trajectory simulation")]
struct Cli {
    /// Optional TOML config supplying defaults (flags win over config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic dataset plus a params sidecar.
    GenerateData(GenerateDataArgs),
    /// Build a contrastive training set with model-feedback labels.
    BuildContrastive(BuildContrastiveArgs),
    /// Train the bi-encoder on a contrastive set.
    TrainEncoder(TrainEncoderArgs),
    /// Simulate a target trajectory.
    Simulate(SimulateArgs),
    /// Run an experiment spec and write CSV/JSON reports.
    Evaluate(EvaluateArgs),
    /// Apply an environment update (new action, knowledge, data).
    EnvUpdate(EnvUpdateArgs),
}

#[derive(Args)]
struct GenerateDataArgs {
    /// pkpd or predprey.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset (JSONL). A `<out>.params.json` sidecar is written
    /// next to it.
    #[arg(long)]
    out: PathBuf,
    /// JSON file overriding the default generator parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also write an environment file referencing the dataset.
    #[arg(long)]
    env_out: Option<PathBuf>,
    /// pkpd dosing policy: untreated, random, or threshold.
    #[arg(long, default_value = "untreated")]
    policy: String,
    #[arg(long, default_value_t = 0.3)]
    chemo_prob: f64,
    #[arg(long, default_value_t = 0.2)]
    radio_prob: f64,
    #[arg(long, default_value_t = 400.0)]
    threshold_cm3: f64,
}

#[derive(Args)]
struct BuildContrastiveArgs {
    #[arg(long)]
    env: PathBuf,
    /// Backend used for scoring: oracle, nearest-context, or remote.
    #[arg(long)]
    llm: Option<String>,
    /// Candidates per target.
    #[arg(long = "C")]
    candidates: Option<usize>,
    /// Negatives kept per target.
    #[arg(long = "B")]
    negatives: Option<usize>,
    /// mse, mae, or crps.
    #[arg(long)]
    scorer: Option<String>,
    /// Simulated futures per candidate score.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    score_horizon: Option<usize>,
    #[arg(long)]
    max_targets: Option<usize>,
    /// Drop trend summaries from encoder texts.
    #[arg(long, default_value_t = false)]
    no_summary: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Remote model name (remote backend only).
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct TrainEncoderArgs {
    #[arg(long)]
    contrastive_set: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; a `<out>.loss.json` curve is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    env: PathBuf,
    /// Id of the target trajectory (in --target-file, or the environment
    /// dataset when no file is given).
    #[arg(long)]
    target_id: String,
    /// JSONL file holding the target trajectory.
    #[arg(long)]
    target_file: Option<PathBuf>,
    /// Steps of the target used as input history; the remainder feeds the
    /// replay policy. Whole trajectory when omitted.
    #[arg(long)]
    history_len: Option<usize>,
    /// replay, repeat-last, constant, or rule.
    #[arg(long, default_value = "repeat-last")]
    policy: String,
    /// Action JSON for the constant policy.
    #[arg(long)]
    action_json: Option<String>,
    #[arg(long)]
    rule_var: Option<String>,
    #[arg(long)]
    rule_threshold: Option<f64>,
    #[arg(long)]
    rule_above: Option<String>,
    #[arg(long)]
    rule_below: Option<String>,
    #[arg(long = "c")]
    context_size: Option<usize>,
    #[arg(long = "l")]
    lookback: Option<usize>,
    #[arg(long = "r")]
    buffer: Option<usize>,
    #[arg(long = "F")]
    horizon: Option<usize>,
    /// encoder, encoder-no-summary, random, llm, full, or zero-shot.
    #[arg(long)]
    mode: Option<String>,
    /// oracle, nearest-context, or remote.
    #[arg(long)]
    backend: Option<String>,
    /// Encoder checkpoint; a fresh seeded pair when omitted.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment spec (TOML or JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Report directory; report.csv and report.json are written inside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnvUpdateArgs {
    #[arg(long)]
    env: PathBuf,
    /// Name of a new action variable.
    #[arg(long)]
    add_action: Option<String>,
    #[arg(long, default_value = "")]
    unit: String,
    #[arg(long, default_value_t = 0)]
    decimals: u8,
    /// Render the new action as a bare flag name when taken.
    #[arg(long, default_value_t = false)]
    flag: bool,
    /// Comma-separated bin edges for retrieval discretization.
    #[arg(long)]
    bins: Option<String>,
    /// JSON array of knowledge entries to add.
    #[arg(long)]
    knowledge_file: Option<PathBuf>,
    /// JSONL trajectories to add.
    #[arg(long)]
    data_file: Option<PathBuf>,
    /// Output environment file; the dataset is written next to it.
    #[arg(long)]
    out: PathBuf,
}

mod error {
    use thiserror::Error;

    #[derive(Debug, Error)]
    pub enum CliError {
        #[error("{0}")]
        Validation(String),
        #[error("{0}")]
        Transport(String),
        #[error("{0}")]
        ParseAbort(String),
    }

    pub type CliResult<T> = Result<T, CliError>;

    impl CliError {
        pub fn exit_code(&self) -> u8 {
            match self {
                CliError::Validation(_) => 2,
                CliError::Transport(_) => 3,
                CliError::ParseAbort(_) => 4,
            }
        }
    }

    impl From<calm_twin::io::IoError> for CliError {
        fn from(e: calm_twin::io::IoError) -> Self {
            CliError::Validation(e.to_string())
        }
    }

    impl From<calm_twin::model::ModelError> for CliError {
        fn from(e: calm_twin::model::ModelError) -> Self {
            CliError::Validation(e.to_string())
        }
    }

    impl From<calm_twin::datagen::DataGenError> for CliError {
        fn from(e: calm_twin::datagen::DataGenError) -> Self {
            CliError::Validation(e.to_string())
        }
    }

    impl From<calm_twin::encoder::EncoderError> for CliError {
        fn from(e: calm_twin::encoder::EncoderError) -> Self {
            CliError::Validation(e.to_string())
        }
    }

    impl From<calm_twin::llm::LlmError> for CliError {
        fn from(e: calm_twin::llm::LlmError) -> Self {
            use calm_twin::llm::LlmError;
            match e {
                LlmError::Transport { .. } | LlmError::MalformedResponse { .. } => {
                    CliError::Transport(e.to_string())
                }
                _ => CliError::Validation(e.to_string()),
            }
        }
    }

    impl From<calm_twin::simulator::SimulateError> for CliError {
        fn from(e: calm_twin::simulator::SimulateError) -> Self {
            use calm_twin::simulator::SimulateError;
            match e {
                SimulateError::ParseAbort { .. } => CliError::ParseAbort(e.to_string()),
                SimulateError::Llm(inner) => inner.into(),
                other => CliError::Validation(other.to_string()),
            }
        }
    }

    impl From<calm_twin::contrastive::ContrastiveError> for CliError {
        fn from(e: calm_twin::contrastive::ContrastiveError) -> Self {
            use calm_twin::contrastive::ContrastiveError;
            match e {
                ContrastiveError::Simulate(inner) => inner.into(),
                other => CliError::Validation(other.to_string()),
            }
        }
    }

    impl From<calm_twin::evaluation::EvalError> for CliError {
        fn from(e: calm_twin::evaluation::EvalError) -> Self {
            use calm_twin::evaluation::EvalError;
            match e {
                EvalError::Simulate(inner) => inner.into(),
                other => CliError::Validation(other.to_string()),
            }
        }
    }
}

fn write_file(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Validation(format!("{what}: {e}")))
}

fn parse_mode(text: &str) -> CliResult<SelectionMode> {
    serde_json::from_value(serde_json::Value::String(text.to_string()))
        .map_err(|_| CliError::Validation(format!(
            "unknown mode '{text}' (expected encoder, encoder-no-summary, random, llm, full, or zero-shot)"
        )))
}

fn parse_scorer(text: &str) -> CliResult<ScoreMetric> {
    match text {
        "mse" => Ok(ScoreMetric::Mse),
        "mae" => Ok(ScoreMetric::Mae),
        "crps" => Ok(ScoreMetric::Crps),
        other => Err(CliError::Validation(format!(
            "unknown scorer '{other}' (expected mse, mae, or crps)"
        ))),
    }
}

fn build_backend(
    kind: &str,
    env: &ModellingEnvironment,
    truths: Vec<Trajectory>,
    model: Option<&str>,
    file_config: &FileConfig,
) -> CliResult<Box<dyn LlmBackend>> {
    match kind {
        "oracle" => Ok(Box::new(GroundTruthOracle::new(
            truths,
            env.schemas.clone(),
        ))),
        "nearest-context" => Ok(Box::new(NearestContextMock)),
        "remote" => {
            let model = model
                .map(str::to_string)
                .or_else(|| file_config.remote.model.clone())
                .ok_or_else(|| {
                    CliError::Validation("remote backend needs --model or config".into())
                })?;
            let mut cfg = match &file_config.remote.base_url {
                Some(url) => {
                    let mut cfg = RemoteConfig::new(url.clone(), model);
                    cfg.api_key = std::env::var(calm_twin::llm::API_KEY_ENV).ok();
                    cfg
                }
                None => RemoteConfig::from_env(model)?,
            };
            let remote = &file_config.remote;
            if let Some(v) = remote.timeout_ms {
                cfg.timeout_ms = v;
            }
            if let Some(v) = remote.max_retries {
                cfg.max_retries = v;
            }
            if let Some(v) = remote.backoff_base_ms {
                cfg.backoff_base_ms = v;
            }
            if let Some(v) = remote.backoff_cap_ms {
                cfg.backoff_cap_ms = v;
            }
            Ok(Box::new(RemoteChatBackend::new(cfg)))
        }
        other => Err(CliError::Validation(format!(
            "unknown backend '{other}' (expected oracle, nearest-context, or remote)"
        ))),
    }
}

fn cmd_generate_data(args: &GenerateDataArgs) -> CliResult<()> {
    let (dataset, sidecar, schemas, knowledge): (
        Vec<Trajectory>,
        serde_json::Value,
        Vec<VariableSchema>,
        Vec<KnowledgeEntry>,
    ) = match args.kind.as_str() {
        "pkpd" => {
            let params: PkPdParams = match &args.params {
                Some(path) => parse_json(&read_file(path)?, "params file")?,
                None => PkPdParams::default(),
            };
            let policy = match args.policy.as_str() {
                "untreated" => PkPdPolicy::Untreated,
                "random" => PkPdPolicy::RandomSchedule {
                    chemo_prob: args.chemo_prob,
                    radio_prob: args.radio_prob,
                },
                "threshold" => PkPdPolicy::VolumeThreshold {
                    threshold_cm3: args.threshold_cm3,
                },
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown pkpd policy '{other}'"
                    )))
                }
            };
            let data = if args.n == 0 {
                Vec::new()
            } else {
                gen_pkpd(args.n, args.horizon, &params, &policy, args.seed)?
            };
            let sidecar = serde_json::json!({
                "kind": "pkpd",
                "n": args.n,
                "horizon": args.horizon,
                "seed": args.seed,
                "params": params,
                "policy": policy,
            });
            (data, sidecar, nsclc_schemas(), nsclc_knowledge())
        }
        "predprey" => {
            let params: PredatorPreyParams = match &args.params {
                Some(path) => parse_json(&read_file(path)?, "params file")?,
                None => PredatorPreyParams::default(),
            };
            let data = if args.n == 0 {
                Vec::new()
            } else {
                gen_predator_prey(args.n, args.horizon, &params, args.seed)?
            };
            let sidecar = serde_json::json!({
                "kind": "predprey",
                "n": args.n,
                "horizon": args.horizon,
                "seed": args.seed,
                "params": params,
            });
            (
                data,
                sidecar,
                predator_prey_schemas(),
                vec![KnowledgeEntry::general(
                    "Predator and prey population counts from a shared habitat. The time unit is in steps.",
                )],
            )
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown kind '{other}' (expected pkpd or predprey)"
            )))
        }
    };

    write_trajectories_jsonl(&args.out, &dataset)?;
    let sidecar_path = args.out.with_extension("params.json");
    write_file(
        &sidecar_path,
        &serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )?;

    if let Some(env_out) = &args.env_out {
        let env = ModellingEnvironment::new(schemas, dataset, knowledge)?;
        let dataset_name = args
            .out
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CliError::Validation("bad --out file name".into()))?;
        let relative = match (env_out.parent(), args.out.parent()) {
            (Some(a), Some(b)) if a == b => dataset_name.to_string(),
            _ => args.out.display().to_string(),
        };
        save_environment(env_out, &env, &relative)?;
    }
    Ok(())
}

fn cmd_build_contrastive(args: &BuildContrastiveArgs, file_config: &FileConfig) -> CliResult<()> {
    let env = load_environment(&args.env)?;
    let cfg = ContrastiveBuildConfig {
        candidates_per_target: args
            .candidates
            .or(file_config.contrastive.candidates)
            .unwrap_or(5),
        negatives: args.negatives.or(file_config.contrastive.negatives).unwrap_or(2),
        scorer: parse_scorer(
            &args
                .scorer
                .clone()
                .or_else(|| file_config.contrastive.scorer.clone())
                .unwrap_or_else(|| "crps".into()),
        )?,
        sim_runs: args.runs.or(file_config.contrastive.runs).unwrap_or(5),
        lookback: args.lookback.or(file_config.sim.lookback).unwrap_or(3),
        score_horizon: args
            .score_horizon
            .or(file_config.sim.horizon)
            .unwrap_or(3),
        temperature: file_config.sim.temperature.unwrap_or(0.0),
        max_targets: args.max_targets,
        with_summaries: !args.no_summary,
        seed: args.seed,
    };
    if cfg.candidates_per_target <= cfg.negatives {
        return Err(CliError::Validation(format!(
            "--B ({}) must be smaller than --C ({})",
            cfg.negatives, cfg.candidates_per_target
        )));
    }
    let backend_kind = args
        .llm
        .clone()
        .or_else(|| file_config.backend.clone())
        .unwrap_or_else(|| "nearest-context".into());
    let backend = build_backend(
        &backend_kind,
        &env,
        env.dataset.clone(),
        args.model.as_deref(),
        file_config,
    )?;
    let (examples, log) = build_contrastive_set(&env, backend.as_ref(), &cfg)?;
    let payload = serde_json::json!({
        "config": cfg,
        "log": log,
        "examples": examples,
    });
    write_file(
        &args.out,
        &serde_json::to_string_pretty(&payload).expect("set serializes"),
    )?;
    eprintln!(
        "built {} examples from {} targets ({} skipped)",
        log.examples_built,
        log.targets_considered,
        log.targets_considered - log.examples_built
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct ContrastiveSetFile {
    examples: Vec<ContrastiveExample>,
}

fn cmd_train_encoder(args: &TrainEncoderArgs, file_config: &FileConfig) -> CliResult<()> {
    let set: ContrastiveSetFile = parse_json(&read_file(&args.contrastive_set)?, "contrastive set")?;
    let cfg = TrainConfig {
        temperature: args.tau.or(file_config.train.tau).unwrap_or(0.07),
        learning_rate: args.lr.or(file_config.train.lr).unwrap_or(0.2),
        epochs: args.epochs.or(file_config.train.epochs).unwrap_or(8),
        batch_size: args.batch.or(file_config.train.batch).unwrap_or(16),
        weight_decay: args.weight_decay,
        seed: args.seed,
    };
    let mut pair = EncoderPair::new_seeded(
        args.dim.unwrap_or(DEFAULT_DIMENSION),
        args.buckets.unwrap_or(DEFAULT_FEATURE_BUCKETS),
        derive_seed(args.seed, "encoder-init"),
    );
    let report = if cfg.epochs == 0 {
        calm_twin::encoder::TrainReport {
            epoch_mean_loss: Vec::new(),
        }
    } else {
        train(&mut pair, &set.examples, &cfg)?
    };
    save_checkpoint(&args.out, &pair, &train_config_digest(&cfg))?;
    let loss_path = args.out.with_extension("loss.json");
    write_file(
        &loss_path,
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    eprintln!(
        "trained {} epochs on {} examples; checkpoint digest {}",
        cfg.epochs,
        set.examples.len(),
        pair.weight_digest()
    );
    Ok(())
}

fn build_policy(args: &SimulateArgs, target: &Trajectory, history_len: usize) -> CliResult<Box<dyn Policy>> {
    let parse_action = |text: &Option<String>, what: &str| -> CliResult<BTreeMap<String, f64>> {
        match text {
            Some(json) => parse_json(json, what),
            None => Err(CliError::Validation(format!("{what} is required"))),
        }
    };
    match args.policy.as_str() {
        "replay" => {
            if args.history_len.is_none() {
                return Err(CliError::Validation(
                    "--policy replay needs --history-len so future actions exist".into(),
                ));
            }
            Ok(Box::new(ReplayPolicy::from_trajectory(target, history_len)))
        }
        "repeat-last" => Ok(Box::new(RepeatLastPolicy)),
        "constant" => Ok(Box::new(ConstantPolicy {
            action: parse_action(&args.action_json, "--action-json")?,
        })),
        "rule" => Ok(Box::new(RulePolicy {
            variable: args
                .rule_var
                .clone()
                .ok_or_else(|| CliError::Validation("--rule-var is required".into()))?,
            threshold: args
                .rule_threshold
                .ok_or_else(|| CliError::Validation("--rule-threshold is required".into()))?,
            at_or_above: parse_action(&args.rule_above, "--rule-above")?,
            below: parse_action(&args.rule_below, "--rule-below")?,
        })),
        other => Err(CliError::Validation(format!("unknown policy '{other}'"))),
    }
}

fn cmd_simulate(args: &SimulateArgs, file_config: &FileConfig) -> CliResult<()> {
    let env = load_environment(&args.env)?;
    let (target, truths) = match &args.target_file {
        Some(path) => {
            let all = read_trajectories_jsonl(path)?;
            let target = all
                .iter()
                .find(|t| t.id == args.target_id)
                .cloned()
                .ok_or_else(|| {
                    CliError::Validation(format!(
                        "target '{}' not found in {}",
                        args.target_id,
                        path.display()
                    ))
                })?;
            (target, all)
        }
        None => {
            let target = env
                .trajectory(&args.target_id)
                .cloned()
                .ok_or_else(|| {
                    CliError::Validation(format!(
                        "target '{}' not found in the environment dataset",
                        args.target_id
                    ))
                })?;
            (target, env.dataset.clone())
        }
    };
    let history_len = args.history_len.unwrap_or(target.len());
    if history_len == 0 || history_len > target.len() {
        return Err(CliError::Validation(format!(
            "--history-len {history_len} is out of range for a {}-step target",
            target.len()
        )));
    }
    let history = target.slice(0..history_len);

    let cfg = SimulationConfig {
        context_size: args.context_size.or(file_config.sim.context_size).unwrap_or(5),
        lookback: args.lookback.or(file_config.sim.lookback).unwrap_or(3),
        buffer: args.buffer.or(file_config.sim.buffer).unwrap_or(1),
        horizon: args.horizon.or(file_config.sim.horizon).unwrap_or(3),
        ensemble: args.ensemble.or(file_config.sim.ensemble).unwrap_or(1),
        temperature: args.temperature.or(file_config.sim.temperature).unwrap_or(0.0),
    };
    let mode = parse_mode(
        &args
            .mode
            .clone()
            .or_else(|| file_config.mode.clone())
            .unwrap_or_else(|| "encoder".into()),
    )?;
    let backend_kind = args
        .backend
        .clone()
        .or_else(|| file_config.backend.clone())
        .unwrap_or_else(|| "nearest-context".into());
    let backend = build_backend(&backend_kind, &env, truths, args.model.as_deref(), file_config)?;
    let encoders = match &args.encoder {
        Some(path) => load_checkpoint(path)?.pair,
        None => EncoderPair::new_default(derive_seed(args.seed, "encoder-init")),
    };
    let policy = build_policy(args, &target, history_len)?;

    let result = simulate(
        &env,
        &history,
        policy.as_ref(),
        &cfg,
        backend.as_ref(),
        &encoders,
        mode,
        &SimulateOptions {
            seed: args.seed,
            jobs: args.jobs,
        },
    )?;
    write_file(
        &args.out,
        &serde_json::to_string_pretty(&result).expect("result serializes"),
    )?;
    eprintln!(
        "simulated {} member(s) x {} steps with {} retrievals",
        result.runs.len(),
        cfg.horizon,
        result.diagnostics.retrieval_invocations
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let spec = ExperimentSpec::from_file(&args.spec)?;
    let base_dir = args
        .spec
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let report = run_experiment(&spec, &base_dir)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.out.display())))?;
    write_file(&args.out.join("report.csv"), &report.to_csv())?;
    write_file(
        &args.out.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    for row in &report.rows {
        eprintln!(
            "{} {} = {} ± {} (n={})",
            row.method, row.metric, row.mean, row.ci95, row.n
        );
    }
    Ok(())
}

fn cmd_env_update(args: &EnvUpdateArgs) -> CliResult<()> {
    let env = load_environment(&args.env)?;
    let mut patch = EnvironmentPatch::default();
    if let Some(name) = &args.add_action {
        let mut schema = VariableSchema::action(name, &args.unit, args.decimals);
        if args.flag {
            schema = schema.with_flag_rendering();
        }
        if let Some(bins) = &args.bins {
            let edges: Result<Vec<f64>, _> =
                bins.split(',').map(|t| t.trim().parse::<f64>()).collect();
            schema = schema.with_bins(
                edges.map_err(|e| CliError::Validation(format!("bad --bins: {e}")))?,
            );
        }
        patch.add_schemas.push(schema);
    }
    if let Some(path) = &args.knowledge_file {
        patch.add_knowledge = parse_json(&read_file(path)?, "knowledge file")?;
    }
    if let Some(path) = &args.data_file {
        patch.add_trajectories = read_trajectories_jsonl(path)?;
    }
    let updated = env.update(patch)?;
    let dataset_name = args
        .out
        .file_stem()
        .and_then(|n| n.to_str())
        .map(|stem| format!("{stem}.data.jsonl"))
        .ok_or_else(|| CliError::Validation("bad --out file name".into()))?;
    save_environment(&args.out, &updated, &dataset_name)?;
    eprintln!(
        "environment epoch {} -> {} ({} schemas, {} knowledge entries, {} trajectories)",
        updated.epoch - 1,
        updated.epoch,
        updated.schemas.len(),
        updated.knowledge.len(),
        updated.dataset.len()
    );
    Ok(())
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    let file_config = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::GenerateData(args) => cmd_generate_data(args),
        Command::BuildContrastive(args) => cmd_build_contrastive(args, &file_config),
        Command::TrainEncoder(args) => cmd_train_encoder(args, &file_config),
        Command::Simulate(args) => cmd_simulate(args, &file_config),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::EnvUpdate(args) => cmd_env_update(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}
