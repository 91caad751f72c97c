//! Domain types for modelling environments: variable schemas, trajectories,
//! knowledge entries, and the environment container. An environment is
//! immutable once constructed; updates produce a new value with a bumped
//! epoch, so read-only sharing across concurrent simulations is safe.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Whether a variable describes the system state or an applied action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    State,
    Action,
}

/// Declaration of one named variable: its kind, formatting precision, and
/// optional retrieval discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub unit: String,
    /// Free-text description. Knowledge entries keyed by the variable name
    /// are the usual carrier; this field is a convenience mirror.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Fixed number of fractional digits when rendering values as text.
    #[serde(default)]
    pub decimals: u8,
    /// Render the bare variable name instead of `name: value` when the
    /// value is 1, and nothing when it is 0 (binary named treatments).
    #[serde(default)]
    pub render_as_flag: bool,
    /// Bin edges for discretizing a continuous action in retrieval's
    /// uniqueness test. Absent means "round to `decimals`".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
}

impl VariableSchema {
    pub fn state(name: &str, unit: &str, decimals: u8) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::State,
            unit: unit.to_string(),
            description: None,
            decimals,
            render_as_flag: false,
            bins: None,
        }
    }

    pub fn action(name: &str, unit: &str, decimals: u8) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::Action,
            unit: unit.to_string(),
            description: None,
            decimals,
            render_as_flag: false,
            bins: None,
        }
    }

    pub fn with_flag_rendering(mut self) -> Self {
        self.render_as_flag = true;
        self
    }

    pub fn with_bins(mut self, bins: Vec<f64>) -> Self {
        self.bins = Some(bins);
        self
    }
}

/// One observation: a numeric time label plus state and action values.
///
/// Time labels are plain integers (days, or 4-digit years); the codec
/// renders them verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStep {
    pub time: i64,
    #[serde(default)]
    pub state: BTreeMap<String, f64>,
    #[serde(default)]
    pub action: BTreeMap<String, f64>,
}

impl TimeStep {
    pub fn new(time: i64) -> Self {
        Self {
            time,
            state: BTreeMap::new(),
            action: BTreeMap::new(),
        }
    }
}

/// An observed history of one related system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<TimeStep>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, steps: Vec<TimeStep>) -> Self {
        Self {
            id: id.into(),
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Structural validation: non-empty, strictly increasing time labels,
    /// consistent variable key sets across steps, all values finite.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps.is_empty() {
            return Err(ModelError::EmptyTrajectory {
                id: self.id.clone(),
            });
        }
        let first = &self.steps[0];
        let state_keys: BTreeSet<&String> = first.state.keys().collect();
        let action_keys: BTreeSet<&String> = first.action.keys().collect();
        let mut prev_time = None;
        for step in &self.steps {
            if let Some(prev) = prev_time {
                if step.time <= prev {
                    return Err(ModelError::NonIncreasingTime {
                        id: self.id.clone(),
                        time: step.time,
                    });
                }
            }
            prev_time = Some(step.time);
            if step.state.keys().collect::<BTreeSet<_>>() != state_keys
                || step.action.keys().collect::<BTreeSet<_>>() != action_keys
            {
                return Err(ModelError::InconsistentKeys {
                    id: self.id.clone(),
                    time: step.time,
                });
            }
            for (name, value) in step.state.iter().chain(step.action.iter()) {
                if !value.is_finite() {
                    return Err(ModelError::NonFiniteValue {
                        id: self.id.clone(),
                        variable: name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks every variable the trajectory references against the schema
    /// list (name known and kind matching).
    pub fn validate_against(&self, schemas: &[VariableSchema]) -> Result<(), ModelError> {
        self.validate()?;
        let by_name: BTreeMap<&str, VariableKind> =
            schemas.iter().map(|s| (s.name.as_str(), s.kind)).collect();
        let first = &self.steps[0];
        for (name, want) in first
            .state
            .keys()
            .map(|n| (n, VariableKind::State))
            .chain(first.action.keys().map(|n| (n, VariableKind::Action)))
        {
            match by_name.get(name.as_str()) {
                Some(kind) if *kind == want => {}
                _ => {
                    return Err(ModelError::UnknownVariable {
                        id: self.id.clone(),
                        variable: name.clone(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Names of variables present in this trajectory (state and action).
    pub fn variable_names(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        if let Some(first) = self.steps.first() {
            names.extend(first.state.keys().cloned());
            names.extend(first.action.keys().cloned());
        }
        names
    }

    /// Sub-trajectory over a step index range (clones the steps).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            steps: self.steps[range].to_vec(),
        }
    }
}

/// Key reserved for entries that are always considered relevant.
pub const GENERAL_KEY: &str = "general";

/// A natural-language description: either general system knowledge
/// (key `general`) or a description attached to one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub key: String,
    pub text: String,
}

impl KnowledgeEntry {
    pub fn new(key: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            text: text.into(),
        }
    }

    pub fn general(text: impl Into<String>) -> Self {
        Self::new(GENERAL_KEY, text)
    }

    pub fn is_general(&self) -> bool {
        self.key == GENERAL_KEY
    }
}

/// The triple a twin operates in: variable schemas, a dataset of related
/// trajectories, and a knowledge base, with an epoch counter that bumps on
/// every update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModellingEnvironment {
    pub schemas: Vec<VariableSchema>,
    pub dataset: Vec<Trajectory>,
    pub knowledge: Vec<KnowledgeEntry>,
    pub epoch: u64,
}

/// Additions applied by [`ModellingEnvironment::update`]. All fields
/// default to empty; an empty patch still bumps the epoch.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnvironmentPatch {
    #[serde(default)]
    pub add_schemas: Vec<VariableSchema>,
    #[serde(default)]
    pub add_trajectories: Vec<Trajectory>,
    #[serde(default)]
    pub add_knowledge: Vec<KnowledgeEntry>,
}

impl ModellingEnvironment {
    pub fn new(
        schemas: Vec<VariableSchema>,
        dataset: Vec<Trajectory>,
        knowledge: Vec<KnowledgeEntry>,
    ) -> Result<Self, ModelError> {
        let env = Self {
            schemas,
            dataset,
            knowledge,
            epoch: 0,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        for schema in &self.schemas {
            validate_variable_name(&schema.name)?;
            if schema.decimals > 10 {
                return Err(ModelError::DecimalsTooLarge {
                    name: schema.name.clone(),
                });
            }
            if !seen.insert(schema.name.clone()) {
                return Err(ModelError::DuplicateSchema {
                    name: schema.name.clone(),
                });
            }
        }
        for entry in &self.knowledge {
            if entry.text.is_empty() {
                return Err(ModelError::EmptyKnowledgeText {
                    key: entry.key.clone(),
                });
            }
        }
        for traj in &self.dataset {
            traj.validate_against(&self.schemas)?;
        }
        Ok(())
    }

    /// Applies a patch, returning a new environment with `epoch + 1`.
    /// Encoder parameters are untouched by construction; nothing else in
    /// the pipeline holds environment-derived state.
    pub fn update(&self, patch: EnvironmentPatch) -> Result<Self, ModelError> {
        let existing: BTreeSet<&str> = self.schemas.iter().map(|s| s.name.as_str()).collect();
        for schema in &patch.add_schemas {
            if existing.contains(schema.name.as_str()) {
                return Err(ModelError::SchemaConflict {
                    name: schema.name.clone(),
                });
            }
        }
        let mut next = self.clone();
        next.schemas.extend(patch.add_schemas);
        next.knowledge.extend(patch.add_knowledge);
        for traj in &patch.add_trajectories {
            traj.validate_against(&next.schemas)?;
        }
        next.dataset.extend(patch.add_trajectories);
        next.epoch = self.epoch + 1;
        next.validate()?;
        Ok(next)
    }

    pub fn state_schemas(&self) -> Vec<&VariableSchema> {
        self.schemas
            .iter()
            .filter(|s| s.kind == VariableKind::State)
            .collect()
    }

    pub fn action_schemas(&self) -> Vec<&VariableSchema> {
        self.schemas
            .iter()
            .filter(|s| s.kind == VariableKind::Action)
            .collect()
    }

    pub fn schema(&self, name: &str) -> Option<&VariableSchema> {
        self.schemas.iter().find(|s| s.name == name)
    }

    pub fn trajectory(&self, id: &str) -> Option<&Trajectory> {
        self.dataset.iter().find(|t| t.id == id)
    }
}

fn validate_variable_name(name: &str) -> Result<(), ModelError> {
    let mut chars = name.chars();
    let head_ok = chars
        .next()
        .map(|c| c.is_ascii_alphabetic() || c == '_')
        .unwrap_or(false);
    if head_ok && chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Ok(())
    } else {
        // Identifier-only names keep the text codec grammar unambiguous.
        Err(ModelError::InvalidVariableName {
            name: name.to_string(),
        })
    }
}

/// A length-`l` history window plus up to `r` future steps extracted from
/// a dataset trajectory; the unit of in-context data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryFuturePair {
    pub source_id: String,
    pub history: Vec<TimeStep>,
    pub future: Vec<TimeStep>,
}

impl HistoryFuturePair {
    pub fn history_trajectory(&self) -> Trajectory {
        Trajectory::new(self.source_id.clone(), self.history.clone())
    }

    pub fn future_trajectory(&self) -> Trajectory {
        Trajectory::new(self.source_id.clone(), self.future.clone())
    }
}

/// Loop parameters: context set size `c`, rolling lookback `l`, resampling
/// buffer `r`, horizon `F`, ensemble size `m`, sampling temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub context_size: usize,
    pub lookback: usize,
    pub buffer: usize,
    pub horizon: usize,
    pub ensemble: usize,
    pub temperature: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            context_size: 5,
            lookback: 3,
            buffer: 1,
            horizon: 3,
            ensemble: 1,
            temperature: 0.0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("context_size", self.context_size),
            ("lookback", self.lookback),
            ("buffer", self.buffer),
            ("horizon", self.horizon),
            ("ensemble", self.ensemble),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig {
                    detail: format!("{name} must be positive"),
                });
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ModelError::InvalidConfig {
                detail: "temperature must be a non-negative finite number".into(),
            });
        }
        Ok(())
    }
}

/// How far the valid-sample filter had to relax to produce candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationLevel {
    /// Strict definition: a window covering every action in `h_a`.
    Full,
    /// At least one action from `h_a` appears in the window.
    AnyAction,
    /// Any window with a remaining future step.
    AnyWindow,
}

/// One retrieval invocation: which step it served first and what it chose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalEvent {
    /// Generated-step index `f` at which this retrieval ran.
    pub at_step: usize,
    /// Source trajectory ids of the selected context set, in context order.
    pub context_ids: Vec<String>,
    /// Keys of the extracted relevant knowledge entries.
    pub knowledge_keys: Vec<String>,
    pub relaxation: RelaxationLevel,
}

/// Retrieval provenance for one ensemble member.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunProvenance {
    pub events: Vec<RetrievalEvent>,
    /// For each generated step, the index into `events` that served it.
    pub step_event: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulationDiagnostics {
    pub retrieval_invocations: usize,
    pub parse_retries: usize,
}

/// Ensemble of generated trajectories with per-step retrieval provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationResult {
    pub runs: Vec<Trajectory>,
    pub provenance: Vec<RunProvenance>,
    pub diagnostics: SimulationDiagnostics,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("trajectory '{id}' is empty")]
    EmptyTrajectory { id: String },
    #[error("trajectory '{id}' has a non-increasing time label at {time}")]
    NonIncreasingTime { id: String, time: i64 },
    #[error("trajectory '{id}' changes variable keys at time {time}")]
    InconsistentKeys { id: String, time: i64 },
    #[error("trajectory '{id}' has a non-finite value for '{variable}'")]
    NonFiniteValue { id: String, variable: String },
    #[error("trajectory '{id}' references unknown variable '{variable}'")]
    UnknownVariable { id: String, variable: String },
    #[error("duplicate schema name '{name}'")]
    DuplicateSchema { name: String },
    #[error("schema '{name}' already exists in the environment")]
    SchemaConflict { name: String },
    #[error("variable name '{name}' is not a valid identifier")]
    InvalidVariableName { name: String },
    #[error("schema '{name}' has more than 10 decimals")]
    DecimalsTooLarge { name: String },
    #[error("knowledge entry '{key}' has empty text")]
    EmptyKnowledgeText { key: String },
    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },
}
