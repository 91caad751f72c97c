//! Deterministic stand-ins for a language model. The ground-truth oracle
//! answers from generator output and makes exact end-to-end tests
//! possible; the nearest-context mock answers from the prompt's own
//! example blocks; the selector mock ranks candidate lines for the
//! LLM-selection ablation; the scripted backend replays a fixed queue.

use std::collections::{HashSet, VecDeque};
use std::sync::Mutex;

use crate::codec;
use crate::model::{Trajectory, VariableSchema};
use crate::rng::fnv1a64;

use super::{LlmBackend, LlmError, PromptBundle, TARGET_STATE_MARKER};

/// Section of `text` following `marker`, up to the next blank line.
fn section_after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.find(marker)? + marker.len();
    let rest = &text[start..];
    Some(match rest.find("\n\n") {
        Some(end) => &rest[..end],
        None => rest,
    })
}

fn trigram_set(text: &str) -> HashSet<u64> {
    let chars: Vec<char> = text.chars().collect();
    let mut set = HashSet::new();
    let mut buf = [0u8; 4];
    for window in chars.windows(3) {
        let mut bytes = Vec::with_capacity(12);
        for &ch in window {
            bytes.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
        }
        set.insert(fnv1a64(&bytes));
    }
    set
}

fn jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn repeat_for_samples(text: String, bundle: &PromptBundle) -> Vec<String> {
    vec![text; bundle.params.n_samples.max(1)]
}

/// Shared handling of index-selection prompts, so every mock can serve
/// the LLM-selection ablation the way a real model would: rank the
/// candidate lines by trigram overlap with the target line and reply with
/// the top indices, comma separated.
fn answer_selection(text: &str) -> Option<Result<String, LlmError>> {
    if !text.contains("Return only the indices of the ") {
        return None;
    }
    let answer = (|| {
        let target = text
            .lines()
            .find_map(|l| l.strip_prefix("Target system history: "))
            .map(|l| l.strip_suffix('.').unwrap_or(l))
            .ok_or_else(|| LlmError::Backend {
                detail: "selection prompt has no target line".into(),
            })?;
        let count: usize = text
            .split("Return only the indices of the ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| LlmError::Backend {
                detail: "selection prompt does not state how many indices".into(),
            })?;
        let target_grams = trigram_set(target);
        let mut scored: Vec<(usize, f64)> = text
            .lines()
            .filter_map(|line| {
                let rest = line.strip_prefix("Related system ")?;
                let (index, tail) = rest.split_once(" history: ")?;
                let index: usize = index.trim().parse().ok()?;
                Some((index, jaccard(&target_grams, &trigram_set(tail))))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored
            .iter()
            .take(count)
            .map(|(i, _)| i.to_string())
            .collect::<Vec<_>>()
            .join(","))
    })();
    Some(answer)
}

/// Answers every simulation prompt with the true next state of the
/// matching truth trajectory, rendered through the codec. The target is
/// identified by the last (time, state) pair of the prompt's history.
pub struct GroundTruthOracle {
    truths: Vec<Trajectory>,
    schemas: Vec<VariableSchema>,
}

impl GroundTruthOracle {
    pub fn new(truths: Vec<Trajectory>, schemas: Vec<VariableSchema>) -> Self {
        Self { truths, schemas }
    }
}

impl LlmBackend for GroundTruthOracle {
    fn complete(&self, bundle: &PromptBundle) -> Result<Vec<String>, LlmError> {
        if let Some(reply) = answer_selection(&bundle.user_text) {
            return Ok(repeat_for_samples(reply?, bundle));
        }
        let series = section_after(&bundle.user_text, TARGET_STATE_MARKER).ok_or_else(|| {
            LlmError::Backend {
                detail: "prompt has no target state history".into(),
            }
        })?;
        let (steps, _) =
            codec::decode_states(series, &self.schemas, None).map_err(|e| LlmError::Backend {
                detail: format!("oracle could not parse the target history: {e}"),
            })?;
        let last = steps.last().expect("decode yields at least one step");
        for truth in &self.truths {
            let Some(idx) = truth
                .steps
                .iter()
                .position(|s| s.time == last.time && s.state == last.state)
            else {
                continue;
            };
            let Some(next) = truth.steps.get(idx + 1) else {
                return Err(LlmError::Backend {
                    detail: format!("truth '{}' has no step after time {}", truth.id, last.time),
                });
            };
            let text = codec::encode_states_steps(std::slice::from_ref(next), &self.schemas);
            return Ok(repeat_for_samples(text, bundle));
        }
        Err(LlmError::Backend {
            detail: format!("no truth trajectory matches time {}", last.time),
        })
    }

    fn name(&self) -> &'static str {
        "ground-truth-oracle"
    }
}

/// Returns the first future step of the in-context example whose history
/// text has the highest character-trigram Jaccard overlap with the target
/// history (ties to the lowest example index). With no examples it
/// repeats the target's last state at the next time label.
pub struct NearestContextMock;

impl NearestContextMock {
    fn fallback(target_series: &str) -> Result<String, LlmError> {
        let chunks: Vec<&str> = target_series.split(" | ").collect();
        let last = chunks.last().ok_or_else(|| LlmError::Backend {
            detail: "empty target history".into(),
        })?;
        let parse_time = |chunk: &str| -> Option<i64> {
            chunk
                .trim()
                .strip_prefix("Time")?
                .split(':')
                .next()?
                .trim()
                .parse()
                .ok()
        };
        let t_last = parse_time(last).ok_or_else(|| LlmError::Backend {
            detail: "unparseable time label".into(),
        })?;
        let stride = if chunks.len() >= 2 {
            parse_time(chunks[chunks.len() - 2])
                .map(|prev| t_last - prev)
                .unwrap_or(1)
        } else {
            1
        };
        let rest = last
            .trim()
            .strip_prefix("Time")
            .and_then(|r| r.split_once(':'))
            .map(|(_, rest)| rest)
            .unwrap_or("");
        Ok(format!("Time {}:{}", t_last + stride, rest))
    }
}

impl LlmBackend for NearestContextMock {
    fn complete(&self, bundle: &PromptBundle) -> Result<Vec<String>, LlmError> {
        let text = &bundle.user_text;
        if let Some(reply) = answer_selection(text) {
            return Ok(repeat_for_samples(reply?, bundle));
        }
        let target_series =
            section_after(text, TARGET_STATE_MARKER).ok_or_else(|| LlmError::Backend {
                detail: "prompt has no target state history".into(),
            })?;
        let target_grams = trigram_set(target_series);

        let mut best: Option<(f64, usize, &str)> = None;
        let mut i = 1usize;
        loop {
            let history_marker = format!("Example {i} state history: \n");
            let future_marker = format!("Example {i} state future:\n");
            let Some(history) = section_after(text, &history_marker) else {
                break;
            };
            let Some(future) = section_after(text, &future_marker) else {
                break;
            };
            let overlap = jaccard(&target_grams, &trigram_set(history));
            let better = match best {
                None => true,
                Some((s, _, _)) => overlap > s,
            };
            if better {
                best = Some((overlap, i, future));
            }
            i += 1;
        }

        let text = match best {
            Some((_, _, future)) => future
                .split(" | ")
                .next()
                .unwrap_or(future)
                .trim()
                .to_string(),
            None => Self::fallback(target_series)?,
        };
        Ok(repeat_for_samples(text, bundle))
    }

    fn name(&self) -> &'static str {
        "nearest-context-mock"
    }
}

/// Answers selection prompts with the indices of the candidate lines
/// closest to the target by trigram overlap, comma separated.
pub struct LlmSelectorMock;

impl LlmBackend for LlmSelectorMock {
    fn complete(&self, bundle: &PromptBundle) -> Result<Vec<String>, LlmError> {
        match answer_selection(&bundle.user_text) {
            Some(reply) => Ok(repeat_for_samples(reply?, bundle)),
            None => Err(LlmError::Backend {
                detail: "not a selection prompt".into(),
            }),
        }
    }

    fn name(&self) -> &'static str {
        "llm-selector-mock"
    }
}

/// Pops one canned reply per call; errors when the queue runs dry.
/// Received prompts are recorded for assertions.
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(replies: I) -> Self {
        Self {
            queue: Mutex::new(replies.into_iter().map(Into::into).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts_seen(&self) -> Vec<String> {
        self.seen.lock().unwrap().clone()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<Vec<String>, LlmError> {
        self.seen.lock().unwrap().push(bundle.user_text.clone());
        let reply = self.queue.lock().unwrap().pop_front();
        match reply {
            Some(text) => Ok(repeat_for_samples(text, bundle)),
            None => Err(LlmError::Backend {
                detail: "scripted backend exhausted".into(),
            }),
        }
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{formulate_prompt, llm_select_context, GenerationParams};
    use crate::model::{HistoryFuturePair, KnowledgeEntry, TimeStep};
    use crate::retrieval::ScoredCandidate;

    fn step(time: i64, x: f64) -> TimeStep {
        let mut s = TimeStep::new(time);
        s.state.insert("x".into(), x);
        s.action.insert("z".into(), 0.0);
        s
    }

    fn schemas() -> Vec<VariableSchema> {
        vec![
            VariableSchema::state("x", "", 0),
            VariableSchema::action("z", "", 0),
        ]
    }

    fn bundle_with(context: &[ScoredCandidate], history: &[TimeStep]) -> PromptBundle {
        formulate_prompt(
            &[KnowledgeEntry::general("A system.")],
            context,
            history,
            &schemas(),
            1,
            GenerationParams::default(),
        )
    }

    #[test]
    fn oracle_returns_the_true_next_state() {
        let truth = Trajectory::new("t", vec![step(0, 1.0), step(1, 2.0), step(2, 3.0)]);
        let oracle = GroundTruthOracle::new(vec![truth], schemas());
        let bundle = bundle_with(&[], &[step(0, 1.0), step(1, 2.0)]);
        let texts = oracle.complete(&bundle).unwrap();
        assert_eq!(texts, vec!["Time 2: x: 3".to_string()]);
    }

    #[test]
    fn oracle_errors_when_truth_is_exhausted() {
        let truth = Trajectory::new("t", vec![step(0, 1.0), step(1, 2.0)]);
        let oracle = GroundTruthOracle::new(vec![truth], schemas());
        let bundle = bundle_with(&[], &[step(0, 1.0), step(1, 2.0)]);
        assert!(matches!(
            oracle.complete(&bundle),
            Err(LlmError::Backend { .. })
        ));
    }

    #[test]
    fn nearest_context_returns_best_overlap_future() {
        let near = HistoryFuturePair {
            source_id: "near".into(),
            history: vec![step(0, 1.0), step(1, 2.0)],
            future: vec![step(2, 30.0), step(3, 31.0)],
        };
        let far = HistoryFuturePair {
            source_id: "far".into(),
            history: vec![step(0, 777.0), step(1, 888.0)],
            future: vec![step(2, 99.0)],
        };
        let context = vec![
            ScoredCandidate {
                pair: far,
                score: 0.0,
                dataset_index: 0,
            },
            ScoredCandidate {
                pair: near,
                score: 0.0,
                dataset_index: 1,
            },
        ];
        let bundle = bundle_with(&context, &[step(0, 1.0), step(1, 2.0)]);
        let texts = NearestContextMock.complete(&bundle).unwrap();
        assert_eq!(texts, vec!["Time 2: x: 30".to_string()]);
    }

    #[test]
    fn nearest_context_without_examples_repeats_last_state() {
        let bundle = bundle_with(&[], &[step(3, 5.0), step(4, 6.0)]);
        let texts = NearestContextMock.complete(&bundle).unwrap();
        assert_eq!(texts, vec!["Time 5: x: 6".to_string()]);
    }

    #[test]
    fn selector_mock_drives_llm_selection() {
        let candidates = vec![
            "Time 0: x: 1 | Time 1: x: 2".to_string(),
            "Time 0: x: 900 | Time 1: x: 901".to_string(),
            "Time 0: x: 1 | Time 1: x: 3".to_string(),
        ];
        let indices =
            llm_select_context(&LlmSelectorMock, "Time 0: x: 1 | Time 1: x: 2", &candidates, 2)
                .unwrap();
        assert_eq!(indices[0], 0);
        assert_eq!(indices.len(), 2);
    }

    #[test]
    fn selection_retries_then_fails_on_bad_replies() {
        let backend = ScriptedBackend::new(["0,0", "0,0"]);
        let err = llm_select_context(&backend, "t", &["a".into(), "b".into()], 2).unwrap_err();
        assert!(matches!(err, LlmError::SelectionFailed { .. }));
        assert_eq!(backend.prompts_seen().len(), 2);

        let backend = ScriptedBackend::new(["9,1", "0,1"]);
        let indices = llm_select_context(&backend, "t", &["a".into(), "b".into()], 2).unwrap();
        assert_eq!(indices, vec![0, 1]);
    }
}
