//! Action-relevant filtering of the dataset and top-`c` context selection.
//!
//! A dataset trajectory is valid for a history when some window of at most
//! `l` consecutive steps covers every action taken in the history, with at
//! least one step remaining afterwards to serve as a future. Valid samples
//! yield history-future pairs that are scored against the target by a pair
//! of text encoders; the `c` best form the context set.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::model::{
    HistoryFuturePair, RelaxationLevel, TimeStep, Trajectory, VariableKind, VariableSchema,
};
use crate::rng;

/// Discretized action vector used for uniqueness and set-inclusion tests.
/// One code per action schema, in schema order; a variable absent from a
/// step is treated as 0 (not taken).
pub type ActionKey = Vec<i64>;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("history has {got} steps but lookback {want} is required")]
    HistoryTooShort { got: usize, want: usize },
    #[error("candidate texts ({texts}) do not match candidates ({candidates})")]
    TextCountMismatch { texts: usize, candidates: usize },
    #[error("non-finite retrieval score for candidate {index}")]
    NonFiniteScore { index: usize },
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
}

/// Text-to-unit-vector interface. The hashing encoder implements it
/// locally; a remote embedding client can slot in behind the same trait.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct EmbedError(pub String);

/// A candidate history-future pair eligible for context selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCandidate {
    pub pair: HistoryFuturePair,
    pub dataset_index: usize,
}

/// A selected context sample. `score` is the encoder dot product for
/// encoder-driven selection and 0 for the random/full/LLM modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub pair: HistoryFuturePair,
    pub score: f64,
    pub dataset_index: usize,
}

pub fn discretize_action(step: &TimeStep, schemas: &[VariableSchema]) -> ActionKey {
    schemas
        .iter()
        .filter(|s| s.kind == VariableKind::Action)
        .map(|schema| {
            let value = step.action.get(&schema.name).copied().unwrap_or(0.0);
            match &schema.bins {
                Some(edges) => edges.iter().filter(|&&e| value >= e).count() as i64,
                None => {
                    let scale = 10f64.powi(schema.decimals as i32);
                    (value * scale).round() as i64
                }
            }
        })
        .collect()
}

/// The set of distinct discretized action vectors over the last `l` steps
/// of the history.
pub fn unique_actions(
    history: &Trajectory,
    lookback: usize,
    schemas: &[VariableSchema],
) -> Result<BTreeSet<ActionKey>, RetrievalError> {
    if history.len() < lookback {
        return Err(RetrievalError::HistoryTooShort {
            got: history.len(),
            want: lookback,
        });
    }
    let start = history.len() - lookback;
    Ok(history.steps[start..]
        .iter()
        .map(|step| discretize_action(step, schemas))
        .collect())
}

/// A window `[start, start + width)` of a dataset trajectory whose actions
/// cover the required set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidWindow {
    pub start: usize,
    pub width: usize,
}

fn covering_window(
    codes: &[ActionKey],
    required: &BTreeSet<ActionKey>,
    lookback: usize,
) -> Option<ValidWindow> {
    let total = codes.len();
    if required.is_empty() {
        // Degenerate: no constraint, smallest window wins.
        return (total >= 2).then_some(ValidWindow { start: 0, width: 1 });
    }
    // Sliding minimal-cover scan: one pass yields, for each start, the
    // smallest covering width. The winner is the tightest valid window
    // (smallest width, then smallest start).
    let mut counts: BTreeMap<&ActionKey, usize> = BTreeMap::new();
    let mut matched = 0usize;
    let mut right = 0usize;
    let mut best: Option<ValidWindow> = None;
    for start in 0..total {
        while right < total && matched < required.len() {
            let code = &codes[right];
            if required.contains(code) {
                let slot = counts.entry(code).or_insert(0);
                *slot += 1;
                if *slot == 1 {
                    matched += 1;
                }
            }
            right += 1;
        }
        if matched == required.len() {
            let width = right - start;
            if width <= lookback && start + width < total {
                let better = match best {
                    None => true,
                    Some(b) => width < b.width,
                };
                if better {
                    best = Some(ValidWindow { start, width });
                }
            }
        } else {
            break;
        }
        // Release the leftmost element before advancing the start.
        let code = &codes[start];
        if required.contains(code) {
            if let Some(slot) = counts.get_mut(code) {
                *slot -= 1;
                if *slot == 0 {
                    matched -= 1;
                }
            }
        }
    }
    best
}

/// Filters the dataset for trajectories containing a valid covering window
/// and returns the chosen window per trajectory (smallest width, then
/// smallest start).
pub fn filter_valid(
    dataset: &[Trajectory],
    required: &BTreeSet<ActionKey>,
    lookback: usize,
    schemas: &[VariableSchema],
) -> Vec<(usize, ValidWindow)> {
    dataset
        .iter()
        .enumerate()
        .filter_map(|(i, traj)| {
            let codes: Vec<ActionKey> = traj
                .steps
                .iter()
                .map(|s| discretize_action(s, schemas))
                .collect();
            covering_window(&codes, required, lookback).map(|w| (i, w))
        })
        .collect()
}

/// [`filter_valid`] with a graded fallback for histories whose actions are
/// absent from the dataset (e.g. a freshly added treatment): first accept
/// windows containing any single required action, then any window with a
/// future step. The applied level is reported for provenance.
pub fn filter_valid_relaxed(
    dataset: &[Trajectory],
    required: &BTreeSet<ActionKey>,
    lookback: usize,
    schemas: &[VariableSchema],
) -> (Vec<(usize, ValidWindow)>, RelaxationLevel) {
    let strict = filter_valid(dataset, required, lookback, schemas);
    if !strict.is_empty() {
        return (strict, RelaxationLevel::Full);
    }
    let mut any_action = Vec::new();
    for (i, traj) in dataset.iter().enumerate() {
        let codes: Vec<ActionKey> = traj
            .steps
            .iter()
            .map(|s| discretize_action(s, schemas))
            .collect();
        let hit = codes
            .iter()
            .enumerate()
            .take(codes.len().saturating_sub(1))
            .find(|(_, code)| required.contains(*code));
        if let Some((t, _)) = hit {
            any_action.push((i, ValidWindow { start: t, width: 1 }));
        }
    }
    if !any_action.is_empty() {
        return (any_action, RelaxationLevel::AnyAction);
    }
    let any_window = dataset
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() >= 2)
        .map(|(i, _)| (i, ValidWindow { start: 0, width: 1 }))
        .collect();
    (any_window, RelaxationLevel::AnyWindow)
}

/// Extracts the history-future pair for a chosen window: the history is
/// the lookback-length slice ending at the window's last step (clamped at
/// the trajectory start), the future is the next up-to-`r` steps.
pub fn extract_pair(
    traj: &Trajectory,
    window: ValidWindow,
    lookback: usize,
    buffer: usize,
) -> HistoryFuturePair {
    let end = window.start + window.width;
    let hist_start = end.saturating_sub(lookback);
    let future_end = (end + buffer).min(traj.len());
    HistoryFuturePair {
        source_id: traj.id.clone(),
        history: traj.steps[hist_start..end].to_vec(),
        future: traj.steps[end..future_end].to_vec(),
    }
}

/// Scores every candidate against the target with the encoder pair and
/// keeps the `c` best. Ties go to the lower dataset index; the result is
/// ordered by descending score.
pub fn select_context(
    target_text: &str,
    candidates: &[ContextCandidate],
    candidate_texts: &[String],
    target_encoder: &dyn Embedder,
    candidate_encoder: &dyn Embedder,
    c: usize,
) -> Result<Vec<ScoredCandidate>, RetrievalError> {
    if candidates.len() != candidate_texts.len() {
        return Err(RetrievalError::TextCountMismatch {
            texts: candidate_texts.len(),
            candidates: candidates.len(),
        });
    }
    if c == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    let target = target_encoder.embed(target_text)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (candidate, text) in candidates.iter().zip(candidate_texts) {
        let embedding = candidate_encoder.embed(text)?;
        let score: f64 = target
            .iter()
            .zip(embedding.iter())
            .map(|(a, b)| a * b)
            .sum();
        if !score.is_finite() {
            return Err(RetrievalError::NonFiniteScore {
                index: candidate.dataset_index,
            });
        }
        scored.push(ScoredCandidate {
            pair: candidate.pair.clone(),
            score,
            dataset_index: candidate.dataset_index,
        });
    }
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.dataset_index.cmp(&b.dataset_index))
    });
    scored.truncate(c);
    Ok(scored)
}

/// Uniform sample of `c` candidates without replacement, seeded. Output
/// preserves dataset order.
pub fn select_context_random(
    candidates: &[ContextCandidate],
    c: usize,
    seed: u64,
) -> Vec<ScoredCandidate> {
    let n = candidates.len();
    if c >= n {
        return select_context_full(candidates);
    }
    let mut rng = rng::substream(seed, "random-selection");
    let mut indices: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first c slots are the sample.
    for i in 0..c {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..c].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| ScoredCandidate {
            pair: candidates[i].pair.clone(),
            score: 0.0,
            dataset_index: candidates[i].dataset_index,
        })
        .collect()
}

/// The whole-dataset ablation: every candidate, order preserved.
pub fn select_context_full(candidates: &[ContextCandidate]) -> Vec<ScoredCandidate> {
    candidates
        .iter()
        .map(|c| ScoredCandidate {
            pair: c.pair.clone(),
            score: 0.0,
            dataset_index: c.dataset_index,
        })
        .collect()
}
