//! Prompt formulation and language-model access.
//!
//! The prompt layout is fixed: knowledge sections, one block per context
//! example, the target history, and a one-line instruction. Backends share
//! one trait; a chat-completions client talks to any OpenAI-compatible
//! endpoint, and deterministic mocks (a ground-truth oracle, a
//! nearest-context matcher, an index selector, a scripted queue) keep the
//! whole pipeline testable offline.

mod fixture;
mod mocks;
mod remote;

pub use fixture::{CannedResponse, FixtureServer, RecordedRequest, TranscriptEntry};
pub use mocks::{GroundTruthOracle, LlmSelectorMock, NearestContextMock, ScriptedBackend};
pub use remote::{
    EmbeddingsClient, RemoteChatBackend, RemoteConfig, RemoteEmbedder, API_KEY_ENV, BASE_URL_ENV,
};

use thiserror::Error;

use crate::model::{KnowledgeEntry, TimeStep, VariableKind, VariableSchema};
use crate::retrieval::ScoredCandidate;

/// System prompt pinning the output format.
pub const SYSTEM_PROMPT: &str = "You are an expert at simulating dynamical systems. Respond only with the simulation in the exact format requested. Do not use the characters * or - anywhere. Ensure that you simulate exactly the desired number of timesteps for each state variable.";

pub(crate) const TARGET_STATE_MARKER: &str = "Given the following state history:\n";
pub(crate) const TARGET_ACTION_MARKER: &str = "And the following action history:\n";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { detail: String, attempts: u32 },
    #[error("malformed response envelope: {detail}")]
    MalformedResponse { detail: String },
    #[error("backend error: {detail}")]
    Backend { detail: String },
    #[error("context selection failed: {detail}")]
    SelectionFailed { detail: String },
}

/// How continuations are sampled. Chat endpoints do not expose beam
/// search directly; `Greedy` maps to temperature 0 and `Beam` is honored
/// as n-sample stochastic decoding by backends that cannot beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Beam(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub decoding: Decoding,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            n_samples: 1,
            max_tokens: 512,
            decoding: Decoding::Greedy,
        }
    }
}

/// A fully rendered prompt plus its sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub params: GenerationParams,
}

/// A language model (or a stand-in). `complete` returns `n_samples`
/// candidate continuations. Implementations are shareable across
/// concurrent simulations; mocks are deterministic.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, bundle: &PromptBundle) -> Result<Vec<String>, LlmError>;
    fn name(&self) -> &'static str;
}

/// Renders the simulation prompt: general knowledge, per-variable
/// descriptions, the context examples, the target history, and the
/// instruction line. Identical inputs produce byte-identical text.
pub fn formulate_prompt(
    relevant_knowledge: &[KnowledgeEntry],
    context: &[ScoredCandidate],
    history: &[TimeStep],
    schemas: &[VariableSchema],
    request_steps: usize,
    params: GenerationParams,
) -> PromptBundle {
    assert!(request_steps >= 1, "request_steps must be at least 1");
    let has_actions = schemas.iter().any(|s| s.kind == VariableKind::Action);
    let mut text = String::new();

    let general: Vec<&str> = relevant_knowledge
        .iter()
        .filter(|e| e.is_general())
        .map(|e| e.text.as_str())
        .collect();
    if !general.is_empty() {
        text.push_str(&general.join("\n"));
        text.push_str("\n\n");
    }

    let described = |kind: VariableKind| -> Vec<String> {
        schemas
            .iter()
            .filter(|s| s.kind == kind)
            .flat_map(|s| {
                relevant_knowledge
                    .iter()
                    .filter(move |e| e.key == s.name)
                    .map(move |e| format!("{}: {}", s.name, e.text))
            })
            .collect()
    };

    text.push_str("STATE VARIABLES:\n");
    for line in described(VariableKind::State) {
        text.push_str(&line);
        text.push('\n');
    }
    text.push('\n');
    if has_actions {
        text.push_str("ACTION VARIABLES:\n");
        for line in described(VariableKind::Action) {
            text.push_str(&line);
            text.push('\n');
        }
        text.push_str("\n\n");
    }

    for (i, candidate) in context.iter().enumerate() {
        let n = i + 1;
        text.push_str(&format!("Example {n} state history: \n"));
        text.push_str(&crate::codec::encode_states_steps(
            &candidate.pair.history,
            schemas,
        ));
        text.push_str("\n\n");
        if has_actions {
            text.push_str(&format!("Example {n} action history: \n"));
            text.push_str(&crate::codec::encode_actions_steps(
                &candidate.pair.history,
                schemas,
            ));
            text.push_str("\n\n");
        }
        text.push_str(&format!("Example {n} state future:\n"));
        text.push_str(&crate::codec::encode_states_steps(
            &candidate.pair.future,
            schemas,
        ));
        text.push_str("\n\n");
    }

    text.push_str(TARGET_STATE_MARKER);
    text.push_str(&crate::codec::encode_states_steps(history, schemas));
    text.push_str("\n\n");
    if has_actions {
        text.push_str(TARGET_ACTION_MARKER);
        text.push_str(&crate::codec::encode_actions_steps(history, schemas));
        text.push_str("\n\n");
    }

    if request_steps == 1 {
        text.push_str(
            "Simulate the next timestep's state, for all state variables. Follow the exact format of the state history.",
        );
    } else {
        text.push_str(&format!(
            "Simulate the next {request_steps} timesteps' states, for all state variables. Follow the exact format of the state history.",
        ));
    }

    PromptBundle {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text: text,
        params,
    }
}

/// Character ceiling for selection prompts, the stand-in for a token
/// budget. Whole-dataset selection only applies when everything fits.
pub const SELECTION_PROMPT_CHAR_BUDGET: usize = 400_000;

/// Asks a backend to pick the `c` most similar candidate histories and
/// parses the comma-separated index reply. Newlines inside texts are
/// flattened so each candidate occupies one prompt line. One retry on a
/// duplicate or out-of-range reply, then failure.
pub fn llm_select_context(
    backend: &dyn LlmBackend,
    target_text: &str,
    candidate_texts: &[String],
    c: usize,
) -> Result<Vec<usize>, LlmError> {
    let total: usize = candidate_texts.iter().map(|t| t.len()).sum::<usize>() + target_text.len();
    if total > SELECTION_PROMPT_CHAR_BUDGET {
        return Err(LlmError::SelectionFailed {
            detail: format!(
                "candidate list ({total} chars) exceeds the context budget ({SELECTION_PROMPT_CHAR_BUDGET})"
            ),
        });
    }
    let flatten = |s: &str| s.replace('\n', " ; ");
    let mut prompt = String::new();
    prompt.push_str(&format!("Target system history: {}.\n\n", flatten(target_text)));
    prompt.push_str(&format!(
        "Here are {} related systems. Return only the indices of the {c} most similar histories to the target, with no other text. Do not repeat any indices. Separate the indices with commas\n\n",
        candidate_texts.len(),
    ));
    for (i, text) in candidate_texts.iter().enumerate() {
        prompt.push_str(&format!("Related system {i} history: {}\n", flatten(text)));
    }
    prompt.push_str(&format!("\nIndices of the {c} most similar histories:"));

    let bundle = PromptBundle {
        system_text: String::new(),
        user_text: prompt,
        params: GenerationParams::default(),
    };

    let mut last_error = String::new();
    for _ in 0..2 {
        let replies = backend.complete(&bundle)?;
        let reply = replies.first().map(String::as_str).unwrap_or("");
        match parse_index_reply(reply, candidate_texts.len(), c) {
            Ok(indices) => return Ok(indices),
            Err(detail) => last_error = detail,
        }
    }
    Err(LlmError::SelectionFailed { detail: last_error })
}

fn parse_index_reply(reply: &str, n: usize, c: usize) -> Result<Vec<usize>, String> {
    let mut indices = Vec::new();
    for token in reply.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let idx: usize = token
            .parse()
            .map_err(|_| format!("non-numeric index '{token}'"))?;
        if idx >= n {
            return Err(format!("index {idx} out of range (n = {n})"));
        }
        if indices.contains(&idx) {
            return Err(format!("duplicate index {idx}"));
        }
        indices.push(idx);
    }
    if indices.len() != c {
        return Err(format!("expected {c} indices, got {}", indices.len()));
    }
    Ok(indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HistoryFuturePair;

    fn step(time: i64, state: &[(&str, f64)], action: &[(&str, f64)]) -> TimeStep {
        TimeStep {
            time,
            state: state.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            action: action.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn schemas() -> Vec<VariableSchema> {
        vec![
            VariableSchema::state("x", "", 0),
            VariableSchema::action("z", "", 0),
        ]
    }

    fn knowledge() -> Vec<KnowledgeEntry> {
        vec![
            KnowledgeEntry::general("A system."),
            KnowledgeEntry::new("x", "The state."),
            KnowledgeEntry::new("z", "The control."),
        ]
    }

    fn history() -> Vec<TimeStep> {
        vec![
            step(0, &[("x", 1.0)], &[("z", 0.0)]),
            step(1, &[("x", 2.0)], &[("z", 0.0)]),
        ]
    }

    #[test]
    fn prompt_is_deterministic() {
        let a = formulate_prompt(
            &knowledge(),
            &[],
            &history(),
            &schemas(),
            1,
            GenerationParams::default(),
        );
        let b = formulate_prompt(
            &knowledge(),
            &[],
            &history(),
            &schemas(),
            1,
            GenerationParams::default(),
        );
        assert_eq!(a.user_text, b.user_text);
        assert_eq!(a.system_text, SYSTEM_PROMPT);
    }

    #[test]
    fn zero_shot_prompt_has_no_example_blocks() {
        let bundle = formulate_prompt(
            &knowledge(),
            &[],
            &history(),
            &schemas(),
            1,
            GenerationParams::default(),
        );
        assert!(!bundle.user_text.contains("Example"));
        assert!(bundle.user_text.contains("Given the following state history:"));
    }

    #[test]
    fn example_blocks_are_numbered_from_one() {
        let pair = HistoryFuturePair {
            source_id: "s".into(),
            history: history(),
            future: vec![step(2, &[("x", 3.0)], &[("z", 0.0)])],
        };
        let context = vec![
            ScoredCandidate {
                pair: pair.clone(),
                score: 0.9,
                dataset_index: 0,
            },
            ScoredCandidate {
                pair,
                score: 0.8,
                dataset_index: 1,
            },
        ];
        let bundle = formulate_prompt(
            &knowledge(),
            &context,
            &history(),
            &schemas(),
            1,
            GenerationParams::default(),
        );
        assert!(bundle.user_text.contains("Example 1 state history: \n"));
        assert!(bundle.user_text.contains("Example 2 state future:\n"));
    }

    #[test]
    fn multi_step_request_pluralizes_the_instruction() {
        let bundle = formulate_prompt(
            &knowledge(),
            &[],
            &history(),
            &schemas(),
            3,
            GenerationParams::default(),
        );
        assert!(bundle
            .user_text
            .ends_with("Simulate the next 3 timesteps' states, for all state variables. Follow the exact format of the state history."));
    }

    #[test]
    fn actionless_schemas_drop_action_sections() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let hist = vec![
            step(0, &[("x", 1.0)], &[]),
            step(1, &[("x", 2.0)], &[]),
        ];
        let bundle = formulate_prompt(
            &[KnowledgeEntry::general("A system.")],
            &[],
            &hist,
            &schemas,
            1,
            GenerationParams::default(),
        );
        assert!(!bundle.user_text.contains("ACTION VARIABLES"));
        assert!(!bundle.user_text.contains("action history"));
    }

    #[test]
    fn index_reply_parsing_handles_bad_replies() {
        assert_eq!(parse_index_reply("0,2", 3, 2).unwrap(), vec![0, 2]);
        assert_eq!(parse_index_reply(" 2 , 0 ", 3, 2).unwrap(), vec![2, 0]);
        assert!(parse_index_reply("0,0", 3, 2).is_err());
        assert!(parse_index_reply("0,7", 3, 2).is_err());
        assert!(parse_index_reply("0", 3, 2).is_err());
        assert!(parse_index_reply("a,b", 3, 2).is_err());
    }
}
