//! Trainable bi-encoder for sample retrieval.
//!
//! Each tower hashes character trigrams and word unigrams of a trajectory's
//! text representation into a fixed bucket space, projects through a dense
//! weight matrix, and L2-normalizes. The towers are fine-tuned with the
//! InfoNCE loss over LLM-feedback labels; because inputs are plain text the
//! trained pair keeps working when variables are added to the environment.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{TimeStep, VariableKind, VariableSchema};
use crate::retrieval::{EmbedError, Embedder};
use crate::rng::{self, fnv1a64};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_FEATURE_BUCKETS: usize = 4096;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("non-finite input to the loss")]
    NonFiniteInput,
    #[error("temperature must be positive")]
    NonPositiveTemperature,
    #[error("at least one negative is required")]
    NoNegatives,
    #[error("embedding dimensions disagree: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("trend summary needs at least 2 steps, got {got}")]
    TrajectoryTooShort { got: usize },
    #[error("summary backend failed: {detail}")]
    SummaryBackend { detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Target,
    Candidate,
}

/// Sparse L2-normalized feature vector: character trigrams and word
/// unigrams hashed into `buckets` slots, indices ascending.
pub fn featurize(text: &str, buckets: usize) -> Vec<(usize, f64)> {
    let mut dense = vec![0.0f64; buckets];
    let mut touched: Vec<usize> = Vec::new();
    let mut bump = |slot: usize, dense: &mut Vec<f64>| {
        if dense[slot] == 0.0 {
            touched.push(slot);
        }
        dense[slot] += 1.0;
    };
    let chars: Vec<char> = text.chars().collect();
    let mut buf = [0u8; 4];
    for window in chars.windows(3) {
        let mut h = fnv1a64(&[0x01]);
        for &ch in window {
            for b in ch.encode_utf8(&mut buf).bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        bump((h % buckets as u64) as usize, &mut dense);
    }
    for word in text.split_whitespace() {
        let mut h = fnv1a64(&[0x02]);
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        bump((h % buckets as u64) as usize, &mut dense);
    }
    touched.sort_unstable();
    let norm: f64 = touched.iter().map(|&i| dense[i] * dense[i]).sum::<f64>().sqrt();
    if norm > 0.0 {
        touched.into_iter().map(|i| (i, dense[i] / norm)).collect()
    } else {
        Vec::new()
    }
}

/// A unit embedding plus a flag marking the deterministic fallback taken
/// when the pre-normalization projection was exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub used_fallback: bool,
}

/// One projection tower. Weights are stored row-major as
/// `feature_buckets x dimension`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashingEncoder {
    pub tower: Tower,
    pub dimension: usize,
    pub feature_buckets: usize,
    weights: Vec<f64>,
}

impl HashingEncoder {
    pub fn new_seeded(tower: Tower, dimension: usize, feature_buckets: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "encoder-init");
        let scale = 1.0 / (dimension as f64).sqrt();
        let weights = (0..feature_buckets * dimension)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
            .collect();
        Self {
            tower,
            dimension,
            feature_buckets,
            weights,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn embed_features(&self, features: &[(usize, f64)]) -> Embedding {
        let mut projected = vec![0.0; self.dimension];
        for &(bucket, value) in features {
            let row = &self.weights[bucket * self.dimension..(bucket + 1) * self.dimension];
            for (p, w) in projected.iter_mut().zip(row) {
                *p += value * w;
            }
        }
        let norm: f64 = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut fallback = vec![0.0; self.dimension];
            fallback[0] = 1.0;
            return Embedding {
                vector: fallback,
                used_fallback: true,
            };
        }
        for v in &mut projected {
            *v /= norm;
        }
        Embedding {
            vector: projected,
            used_fallback: false,
        }
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        self.embed_features(&featurize(text, self.feature_buckets))
    }
}

impl Embedder for HashingEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_text(text).vector)
    }
}

/// Target and candidate towers. A fresh pair shares one weight init, the
/// analogue of starting both towers from the same pretrained backbone, so
/// untrained retrieval reduces to a random projection of feature cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub target: HashingEncoder,
    pub candidate: HashingEncoder,
}

impl EncoderPair {
    pub fn new_seeded(dimension: usize, feature_buckets: usize, seed: u64) -> Self {
        let target = HashingEncoder::new_seeded(Tower::Target, dimension, feature_buckets, seed);
        let mut candidate = target.clone();
        candidate.tower = Tower::Candidate;
        Self { target, candidate }
    }

    pub fn new_default(seed: u64) -> Self {
        Self::new_seeded(DEFAULT_DIMENSION, DEFAULT_FEATURE_BUCKETS, seed)
    }

    /// Hex digest over both towers' weights; used to assert that
    /// environment changes never touch encoder parameters.
    pub fn weight_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for w in self.target.weights.iter().chain(self.candidate.weights.iter()) {
            hasher.update(w.to_le_bytes());
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(values: &[f64]) -> Result<(), EncoderError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EncoderError::NonFiniteInput)
    }
}

/// Contrastive loss over one target, one positive, and `B` negatives:
/// the negative log probability of the positive under a temperature-scaled
/// softmax of the dot-product scores.
pub fn info_nce(
    target: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64, EncoderError> {
    if negatives.is_empty() {
        return Err(EncoderError::NoNegatives);
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(EncoderError::NonPositiveTemperature);
    }
    check_finite(target)?;
    check_finite(positive)?;
    for n in negatives {
        check_finite(n)?;
        if n.len() != target.len() {
            return Err(EncoderError::DimensionMismatch {
                a: target.len(),
                b: n.len(),
            });
        }
    }
    if positive.len() != target.len() {
        return Err(EncoderError::DimensionMismatch {
            a: target.len(),
            b: positive.len(),
        });
    }
    let z_pos = dot(target, positive) / temperature;
    let mut logits = vec![z_pos];
    logits.extend(negatives.iter().map(|n| dot(target, n) / temperature));
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - z_pos)
}

/// Loss plus analytic gradients with respect to every input embedding.
#[derive(Debug, Clone)]
pub struct InfoNceGradients {
    pub loss: f64,
    pub d_target: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

pub fn info_nce_grad(
    target: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<InfoNceGradients, EncoderError> {
    let loss = info_nce(target, positive, negatives, temperature)?;
    let mut logits = vec![dot(target, positive) / temperature];
    logits.extend(negatives.iter().map(|n| dot(target, n) / temperature));
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|z| (z - max).exp() / denom).collect();

    let d = target.len();
    let mut d_target = vec![0.0; d];
    let coeff_pos = (probs[0] - 1.0) / temperature;
    for (g, &p) in d_target.iter_mut().zip(positive) {
        *g += coeff_pos * p;
    }
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for (i, neg) in negatives.iter().enumerate() {
        let coeff = probs[i + 1] / temperature;
        for (g, &n) in d_target.iter_mut().zip(neg) {
            *g += coeff * n;
        }
        d_negatives.push(target.iter().map(|&t| coeff * t).collect());
    }
    let d_positive = target.iter().map(|&t| coeff_pos * t).collect();
    Ok(InfoNceGradients {
        loss,
        d_target,
        d_positive,
        d_negatives,
    })
}

/// One labelled training instance: a target with its best-scoring positive
/// and `B` worst-scoring negatives, texts already carrying trend summaries
/// when summaries are enabled.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ContrastiveExample {
    pub target_text: String,
    pub positive_text: String,
    pub negative_texts: Vec<String>,
    pub positive_score: f64,
    pub negative_scores: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            // Effective step size for the hashing encoder; transformer-era
            // rates (5e-5 scale) leave the projection essentially frozen.
            learning_rate: 0.2,
            epochs: 8,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Mean InfoNCE loss per epoch, evaluated before each batch update.
    pub epoch_mean_loss: Vec<f64>,
}

/// Cached featurizations of one example: target, positive, negatives.
type ExampleFeatures = (Vec<(usize, f64)>, Vec<(usize, f64)>, Vec<Vec<(usize, f64)>>);

struct Forward {
    embedding: Vec<f64>,
    pre_norm: f64,
    fallback: bool,
}

fn forward(encoder: &HashingEncoder, features: &[(usize, f64)]) -> Forward {
    let mut projected = vec![0.0; encoder.dimension];
    for &(bucket, value) in features {
        let row = &encoder.weights[bucket * encoder.dimension..(bucket + 1) * encoder.dimension];
        for (p, w) in projected.iter_mut().zip(row) {
            *p += value * w;
        }
    }
    let norm: f64 = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut fallback = vec![0.0; encoder.dimension];
        fallback[0] = 1.0;
        return Forward {
            embedding: fallback,
            pre_norm: 0.0,
            fallback: true,
        };
    }
    Forward {
        embedding: projected.iter().map(|v| v / norm).collect(),
        pre_norm: norm,
        fallback: false,
    }
}

/// Backpropagates an embedding gradient through the L2 normalization and
/// the sparse projection, accumulating into the tower's gradient buffer.
fn accumulate(
    grad: &mut [f64],
    dimension: usize,
    features: &[(usize, f64)],
    fwd: &Forward,
    d_embedding: &[f64],
) {
    if fwd.fallback {
        return;
    }
    let e_dot = dot(&fwd.embedding, d_embedding);
    let d_pre: Vec<f64> = fwd
        .embedding
        .iter()
        .zip(d_embedding)
        .map(|(&e, &g)| (g - e * e_dot) / fwd.pre_norm)
        .collect();
    for &(bucket, value) in features {
        let row = &mut grad[bucket * dimension..(bucket + 1) * dimension];
        for (g, &dp) in row.iter_mut().zip(&d_pre) {
            *g += value * dp;
        }
    }
}

/// Mini-batch gradient descent over the InfoNCE loss with an optional
/// decoupled weight decay. Featurization is cached per example; example
/// order is reshuffled each epoch from the config seed.
pub fn train(
    pair: &mut EncoderPair,
    examples: &[ContrastiveExample],
    cfg: &TrainConfig,
) -> Result<TrainReport, EncoderError> {
    if examples.is_empty() {
        return Err(EncoderError::EmptyTrainingSet);
    }
    if !(cfg.temperature.is_finite() && cfg.temperature > 0.0) {
        return Err(EncoderError::NonPositiveTemperature);
    }
    let buckets = pair.target.feature_buckets;
    let dim = pair.target.dimension;
    let cached: Vec<ExampleFeatures> = examples
        .iter()
        .map(|ex| {
            (
                featurize(&ex.target_text, buckets),
                featurize(&ex.positive_text, buckets),
                ex.negative_texts
                    .iter()
                    .map(|t| featurize(t, buckets))
                    .collect(),
            )
        })
        .collect();

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = rng::substream(cfg.seed, "train-shuffle");
    let mut grad_target = vec![0.0; buckets * dim];
    let mut grad_candidate = vec![0.0; buckets * dim];
    let mut report = TrainReport {
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_index, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            grad_target.fill(0.0);
            grad_candidate.fill(0.0);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (t_feats, p_feats, n_feats) = &cached[idx];
                let t_fwd = forward(&pair.target, t_feats);
                let p_fwd = forward(&pair.candidate, p_feats);
                let n_fwds: Vec<Forward> =
                    n_feats.iter().map(|f| forward(&pair.candidate, f)).collect();
                let neg_embeddings: Vec<Vec<f64>> =
                    n_fwds.iter().map(|f| f.embedding.clone()).collect();
                let grads = info_nce_grad(
                    &t_fwd.embedding,
                    &p_fwd.embedding,
                    &neg_embeddings,
                    cfg.temperature,
                )?;
                if !grads.loss.is_finite() {
                    return Err(EncoderError::Diverged {
                        epoch,
                        batch: batch_index,
                    });
                }
                batch_loss += grads.loss;
                accumulate(&mut grad_target, dim, t_feats, &t_fwd, &grads.d_target);
                accumulate(&mut grad_candidate, dim, p_feats, &p_fwd, &grads.d_positive);
                for (i, (f, d)) in n_feats.iter().zip(&grads.d_negatives).enumerate() {
                    accumulate(&mut grad_candidate, dim, f, &n_fwds[i], d);
                }
            }
            epoch_loss += batch_loss;
            let scale = cfg.learning_rate / batch.len() as f64;
            if cfg.learning_rate != 0.0 {
                for (w, g) in pair.target.weights.iter_mut().zip(&grad_target) {
                    *w -= scale * g;
                }
                for (w, g) in pair.candidate.weights.iter_mut().zip(&grad_candidate) {
                    *w -= scale * g;
                }
                if cfg.weight_decay != 0.0 {
                    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
                    for w in pair
                        .target
                        .weights
                        .iter_mut()
                        .chain(pair.candidate.weights.iter_mut())
                    {
                        *w *= decay;
                    }
                }
            }
        }
        report.epoch_mean_loss.push(epoch_loss / examples.len() as f64);
    }
    Ok(report)
}

/// Rule-based trend summary: one line per state variable,
/// `<NAME>: [<trend>, ...]`. Gaps are labelled stable when within 1% of
/// the variable's range, else by sign; adjacent equal labels merge, so
/// neighbouring chunks always differ and there are fewer chunks than
/// points.
pub fn summarize_trends_rule(
    steps: &[TimeStep],
    schemas: &[VariableSchema],
) -> Result<String, EncoderError> {
    if steps.len() < 2 {
        return Err(EncoderError::TrajectoryTooShort { got: steps.len() });
    }
    let mut lines = Vec::new();
    for schema in schemas.iter().filter(|s| s.kind == VariableKind::State) {
        let values: Vec<f64> = steps
            .iter()
            .filter_map(|s| s.state.get(&schema.name).copied())
            .collect();
        if values.len() < 2 {
            continue;
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let mut chunks: Vec<&str> = Vec::new();
        for pair in values.windows(2) {
            let delta = pair[1] - pair[0];
            let label = if range == 0.0 || delta.abs() <= 0.01 * range {
                "stable"
            } else if delta > 0.0 {
                "increasing"
            } else {
                "decreasing"
            };
            if chunks.last() != Some(&label) {
                chunks.push(label);
            }
        }
        lines.push(format!("{}: [{}]", schema.name, chunks.join(", ")));
    }
    Ok(lines.join("\n"))
}

/// Prompt sent to an LLM to produce the trend summary, with
/// `{trajectory_str}` substituted by the encoded state series.
pub const SUMMARY_PROMPT_TEMPLATE: &str = "For each variable in this time-series, write <VARIABLE NAME>: <TREND>, where <TREND> is a list of one or more descriptive words that summarises the series in chunks. Decide how to chunk each variable based on when its trend changes. Neighbouring chunks should not have the same description. Each <TREND> each word is either [increasing, decreasing, stable]. There should be fewer chunks than points in the time-series. Time-series: {trajectory_str}";

pub fn summary_prompt(trajectory_str: &str) -> String {
    SUMMARY_PROMPT_TEMPLATE.replace("{trajectory_str}", trajectory_str)
}

/// Summary source: the deterministic rule, or a language model fed the
/// summary prompt.
pub enum SummaryMode<'a> {
    Rule,
    Llm(&'a dyn crate::llm::LlmBackend),
}

pub fn summarize_trends(
    steps: &[TimeStep],
    schemas: &[VariableSchema],
    mode: SummaryMode<'_>,
) -> Result<String, EncoderError> {
    if steps.len() < 2 {
        return Err(EncoderError::TrajectoryTooShort { got: steps.len() });
    }
    match mode {
        SummaryMode::Rule => summarize_trends_rule(steps, schemas),
        SummaryMode::Llm(backend) => {
            let series = crate::codec::encode_states_steps(steps, schemas);
            let bundle = crate::llm::PromptBundle {
                system_text: String::new(),
                user_text: summary_prompt(&series),
                params: crate::llm::GenerationParams::default(),
            };
            let texts = backend
                .complete(&bundle)
                .map_err(|e| EncoderError::SummaryBackend {
                    detail: e.to_string(),
                })?;
            texts
                .into_iter()
                .next()
                .map(|t| t.trim().to_string())
                .ok_or_else(|| EncoderError::SummaryBackend {
                    detail: "backend returned no summary".into(),
                })
        }
    }
}

/// Text fed to the encoders: encoded states, encoded actions, and an
/// optional trend summary, newline separated. The no-summary ablation
/// drops only the summary suffix.
pub fn compose_retrieval_text(
    steps: &[TimeStep],
    schemas: &[VariableSchema],
    summary: Option<&str>,
) -> String {
    let states = crate::codec::encode_states_steps(steps, schemas);
    let actions = crate::codec::encode_actions_steps(steps, schemas);
    match summary {
        Some(s) => format!("{states}\n{actions}\n{s}"),
        None => format!("{states}\n{actions}"),
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTENC\x00\x00\x01";

/// Serialized encoder pair. The format is a small binary container:
/// magic, dimensions, training-config digest, then both towers' weights
/// as little-endian f64.
pub struct EncoderCheckpoint {
    pub dimension: usize,
    pub feature_buckets: usize,
    pub train_config_digest: String,
    pub pair: EncoderPair,
}

pub fn save_checkpoint(
    path: &Path,
    pair: &EncoderPair,
    train_config_digest: &str,
) -> Result<(), EncoderError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(pair.target.dimension as u32).to_le_bytes())?;
    file.write_all(&(pair.target.feature_buckets as u32).to_le_bytes())?;
    let digest = train_config_digest.as_bytes();
    file.write_all(&(digest.len() as u32).to_le_bytes())?;
    file.write_all(digest)?;
    for w in pair.target.weights.iter().chain(pair.candidate.weights.iter()) {
        file.write_all(&w.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderCheckpoint, EncoderError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(EncoderError::BadCheckpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let dimension = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf)?;
    let feature_buckets = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf)?;
    let digest_len = u32::from_le_bytes(u32buf) as usize;
    if digest_len > 1024 {
        return Err(EncoderError::BadCheckpoint("digest too long".into()));
    }
    let mut digest = vec![0u8; digest_len];
    file.read_exact(&mut digest)?;
    let digest = String::from_utf8(digest)
        .map_err(|_| EncoderError::BadCheckpoint("digest is not utf-8".into()))?;
    let count = dimension * feature_buckets;
    let mut read_weights = |n: usize| -> Result<Vec<f64>, EncoderError> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            file.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let target_weights = read_weights(count)?;
    let candidate_weights = read_weights(count)?;
    let target = HashingEncoder {
        tower: Tower::Target,
        dimension,
        feature_buckets,
        weights: target_weights,
    };
    let candidate = HashingEncoder {
        tower: Tower::Candidate,
        dimension,
        feature_buckets,
        weights: candidate_weights,
    };
    Ok(EncoderCheckpoint {
        dimension,
        feature_buckets,
        train_config_digest: digest,
        pair: EncoderPair { target, candidate },
    })
}

/// Digest of a training config, stored in checkpoints for traceability.
pub fn train_config_digest(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("train config serializes");
    let out = Sha256::digest(json.as_bytes());
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Trajectory;
    use rand::Rng;

    #[test]
    fn featurize_is_deterministic_and_normalized() {
        let a = featurize("Time 0: x: 1", 512);
        let b = featurize("Time 0: x: 1", 512);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|(_, v)| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(featurize("", 512).is_empty());
    }

    #[test]
    fn one_character_change_moves_the_vector() {
        let a = featurize("Time 0: x: 1", 4096);
        let b = featurize("Time 0: x: 2", 4096);
        let am: std::collections::BTreeMap<usize, f64> = a.into_iter().collect();
        let bm: std::collections::BTreeMap<usize, f64> = b.into_iter().collect();
        let cos: f64 = am
            .iter()
            .filter_map(|(k, v)| bm.get(k).map(|w| v * w))
            .sum();
        assert!(cos < 1.0 - 1e-9);
    }

    #[test]
    fn embeddings_are_unit_norm_and_stable() {
        let enc = HashingEncoder::new_seeded(Tower::Target, 32, 256, 9);
        let e1 = enc.embed_text("Time 0: x: 1, y: 2");
        let e2 = enc.embed_text("Time 0: x: 1, y: 2");
        assert_eq!(e1, e2);
        assert!(!e1.used_fallback);
        let norm: f64 = e1.vector.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_falls_back_to_basis_vector() {
        let enc = HashingEncoder::new_seeded(Tower::Target, 8, 64, 9);
        let e = enc.embed_text("");
        assert!(e.used_fallback);
        assert_eq!(e.vector[0], 1.0);
        assert!(e.vector[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_scores_give_ln_one_plus_b() {
        // All candidates at the same similarity: loss must be ln(1+B).
        let t = vec![1.0, 0.0];
        let c = vec![1.0, 0.0];
        for b in [1usize, 2, 5] {
            let negatives = vec![c.clone(); b];
            let loss = info_nce(&t, &c, &negatives, 0.07).unwrap();
            assert!((loss - (1.0 + b as f64).ln()).abs() < 1e-12, "B={b}");
        }
        let loss = info_nce(&t, &c, &[c.clone()], 0.07).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn separated_scores_drive_loss_to_zero() {
        let t = vec![1.0, 0.0];
        let pos = vec![1.0, 0.0];
        let neg = vec![vec![-1.0, 0.0]];
        let loss = info_nce(&t, &pos, &neg, 0.07).unwrap();
        let expected = (1.0 + (-2.0f64 / 0.07).exp()).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!(loss < 1e-12);
    }

    #[test]
    fn temperature_rescales_the_margin() {
        let t = vec![1.0, 0.0];
        let pos = vec![0.5, 0.0];
        let neg = vec![vec![0.3, 0.0]];
        let low = info_nce(&t, &pos, &neg, 0.07).unwrap();
        let high = info_nce(&t, &pos, &neg, 0.7).unwrap();
        assert!((low - (1.0 + (-0.2f64 / 0.07).exp()).ln()).abs() < 1e-12);
        assert!((high - (1.0 + (-0.2f64 / 0.7).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_softmax() {
        let mut rng = crate::rng::substream(11, "loss-oracle");
        for _ in 0..200 {
            let dim = 4;
            let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n.max(1e-12)).collect::<Vec<_>>()
            };
            let t = unit(&mut rng);
            let pos = unit(&mut rng);
            let negs: Vec<Vec<f64>> = (0..rng.gen_range(1..5)).map(|_| unit(&mut rng)).collect();
            let tau = rng.gen_range(0.05..1.0);
            let loss = info_nce(&t, &pos, &negs, tau).unwrap();
            // Direct softmax route, no max subtraction.
            let e_pos = (dot(&t, &pos) / tau).exp();
            let e_sum: f64 = e_pos
                + negs
                    .iter()
                    .map(|n| (dot(&t, n) / tau).exp())
                    .sum::<f64>();
            let direct = -(e_pos / e_sum).ln();
            assert!((loss - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::substream(13, "grad-oracle");
        let dim = 3;
        let eps = 1e-6;
        for _ in 0..100 {
            let vec3 = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let t = vec3(&mut rng);
            let pos = vec3(&mut rng);
            let negs: Vec<Vec<f64>> = (0..rng.gen_range(1..4)).map(|_| vec3(&mut rng)).collect();
            let tau = rng.gen_range(0.1..1.0);
            let grads = info_nce_grad(&t, &pos, &negs, tau).unwrap();

            let check = |analytic: &[f64], mut bump: Box<dyn FnMut(usize, f64) -> f64>| {
                for k in 0..dim {
                    let up = bump(k, eps);
                    let down = bump(k, -eps);
                    let numeric = (up - down) / (2.0 * eps);
                    let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        (analytic[k] - numeric).abs() / denom < 1e-4,
                        "analytic {} vs numeric {}",
                        analytic[k],
                        numeric
                    );
                }
            };

            let (t2, pos2, negs2) = (t.clone(), pos.clone(), negs.clone());
            check(
                &grads.d_target,
                Box::new(move |k, d| {
                    let mut t = t2.clone();
                    t[k] += d;
                    info_nce(&t, &pos2, &negs2, tau).unwrap()
                }),
            );
            let (t2, pos2, negs2) = (t.clone(), pos.clone(), negs.clone());
            check(
                &grads.d_positive,
                Box::new(move |k, d| {
                    let mut p = pos2.clone();
                    p[k] += d;
                    info_nce(&t2, &p, &negs2, tau).unwrap()
                }),
            );
            for i in 0..negs.len() {
                let (t2, pos2, negs2) = (t.clone(), pos.clone(), negs.clone());
                check(
                    &grads.d_negatives[i],
                    Box::new(move |k, d| {
                        let mut ns = negs2.clone();
                        ns[i][k] += d;
                        info_nce(&t2, &pos2, &ns, tau).unwrap()
                    }),
                );
            }
        }
    }

    #[test]
    fn gradient_at_symmetric_point_is_balanced() {
        let t = vec![1.0, 0.0];
        let c = vec![0.0, 1.0];
        let negs = vec![c.clone(), c.clone()];
        let grads = info_nce_grad(&t, &c, &negs, 0.1).unwrap();
        // Gradients are multiples of the target direction: the positive is
        // pulled up, each negative pushed down by half as much.
        assert!(grads.d_positive[0] < 0.0);
        for dn in &grads.d_negatives {
            assert!(dn[0] > 0.0);
            assert!((dn[0] + grads.d_positive[0] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_in_low_temperature_limit() {
        let t = vec![1.0, 0.0];
        let pos = vec![1.0, 0.0];
        let negs = vec![vec![0.0, 1.0]];
        let grads = info_nce_grad(&t, &pos, &negs, 1e-3).unwrap();
        assert!(grads.d_target.iter().all(|g| g.abs() < 1e-12));
        assert!(grads.d_positive.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let t = vec![f64::NAN, 0.0];
        let c = vec![1.0, 0.0];
        assert!(matches!(
            info_nce(&t, &c, &[c.clone()], 0.07),
            Err(EncoderError::NonFiniteInput)
        ));
        let t = vec![1.0, 0.0];
        assert!(matches!(
            info_nce(&t, &c, &[], 0.07),
            Err(EncoderError::NoNegatives)
        ));
        assert!(matches!(
            info_nce(&t, &c, &[c.clone()], 0.0),
            Err(EncoderError::NonPositiveTemperature)
        ));
    }

    fn toy_examples() -> Vec<ContrastiveExample> {
        (0..8)
            .map(|i| ContrastiveExample {
                target_text: format!("Time 0: x: {i} | Time 1: x: {}", i + 1),
                positive_text: format!("Time 0: x: {i} | Time 1: x: {}", i + 1),
                negative_texts: vec![format!("Time 0: x: {} | Time 1: x: {}", 90 - i, 80 - i)],
                positive_score: 0.0,
                negative_scores: vec![1.0],
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_on_a_separable_set() {
        let mut pair = EncoderPair::new_seeded(32, 512, 3);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let report = train(&mut pair, &toy_examples(), &cfg).unwrap();
        assert_eq!(report.epoch_mean_loss.len(), 5);
        assert!(report.epoch_mean_loss[4] < report.epoch_mean_loss[0]);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bitwise_identical() {
        let mut pair = EncoderPair::new_seeded(16, 128, 5);
        let before = pair.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        train(&mut pair, &toy_examples(), &cfg).unwrap();
        assert_eq!(pair.target.weights, before.target.weights);
        assert_eq!(pair.candidate.weights, before.candidate.weights);
        assert_eq!(pair.weight_digest(), before.weight_digest());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut pair = EncoderPair::new_seeded(8, 64, 5);
        assert!(matches!(
            train(&mut pair, &[], &TrainConfig::default()),
            Err(EncoderError::EmptyTrainingSet)
        ));
    }

    fn series(values: &[f64]) -> (Vec<TimeStep>, Vec<VariableSchema>) {
        let schemas = vec![VariableSchema::state("x", "", 1)];
        let steps = values
            .iter()
            .enumerate()
            .map(|(t, &v)| {
                let mut s = TimeStep::new(t as i64);
                s.state.insert("x".into(), v);
                s
            })
            .collect();
        (steps, schemas)
    }

    #[test]
    fn summary_labels_match_rule_evaluation() {
        let (steps, schemas) = series(&[1.0, 2.0, 3.0]);
        assert_eq!(
            summarize_trends_rule(&steps, &schemas).unwrap(),
            "x: [increasing]"
        );
        let (steps, schemas) = series(&[5.0, 5.0, 5.0]);
        assert_eq!(
            summarize_trends_rule(&steps, &schemas).unwrap(),
            "x: [stable]"
        );
        let (steps, schemas) = series(&[1.0, 3.0, 2.0]);
        assert_eq!(
            summarize_trends_rule(&steps, &schemas).unwrap(),
            "x: [increasing, decreasing]"
        );
    }

    #[test]
    fn summary_has_fewer_chunks_than_points_and_no_equal_neighbours() {
        let mut rng = crate::rng::substream(21, "summary-prop");
        for _ in 0..50 {
            let n = rng.gen_range(2..20);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let (steps, schemas) = series(&values);
            let line = summarize_trends_rule(&steps, &schemas).unwrap();
            let inner = line
                .trim_start_matches("x: [")
                .trim_end_matches(']')
                .to_string();
            let chunks: Vec<&str> = inner.split(", ").collect();
            assert!(chunks.len() < n, "{line} for {n} points");
            for w in chunks.windows(2) {
                assert_ne!(w[0], w[1]);
            }
        }
    }

    #[test]
    fn single_step_summary_is_an_error() {
        let (steps, schemas) = series(&[1.0]);
        assert!(matches!(
            summarize_trends_rule(&steps, &schemas),
            Err(EncoderError::TrajectoryTooShort { .. })
        ));
        assert!(matches!(
            summarize_trends(&steps, &schemas, SummaryMode::Rule),
            Err(EncoderError::TrajectoryTooShort { .. })
        ));
    }

    #[test]
    fn llm_summary_mode_sends_the_template_and_returns_the_reply() {
        let (steps, schemas) = series(&[1.0, 2.0, 3.0]);
        let backend = crate::llm::ScriptedBackend::new(["x: [increasing]"]);
        let summary = summarize_trends(&steps, &schemas, SummaryMode::Llm(&backend)).unwrap();
        assert_eq!(summary, "x: [increasing]");
        let prompts = backend.prompts_seen();
        assert!(prompts[0].starts_with("For each variable in this time-series"));
        assert!(prompts[0].ends_with("Time-series: Time 0: x: 1.0 | Time 1: x: 2.0 | Time 2: x: 3.0"));
    }

    #[test]
    fn retrieval_text_differs_only_by_summary_suffix() {
        let (steps, schemas) = series(&[1.0, 2.0]);
        let traj = Trajectory::new("t", steps);
        let without = compose_retrieval_text(&traj.steps, &schemas, None);
        let with = compose_retrieval_text(&traj.steps, &schemas, Some("x: [increasing]"));
        assert_eq!(with, format!("{without}\nx: [increasing]"));
        assert!(without.starts_with("Time 0: x: 1.0"));
    }

    #[test]
    fn checkpoint_roundtrips_and_digest_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let pair = EncoderPair::new_seeded(16, 128, 7);
        save_checkpoint(&path, &pair, "digest123").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dimension, 16);
        assert_eq!(loaded.feature_buckets, 128);
        assert_eq!(loaded.train_config_digest, "digest123");
        assert_eq!(loaded.pair.weight_digest(), pair.weight_digest());
        assert_eq!(loaded.pair.target.weights(), pair.target.weights());
    }

    #[test]
    fn encoders_embed_texts_with_unseen_variables() {
        // Dimension agnosticism: trained on 2-variable texts, applied to 3.
        let enc = HashingEncoder::new_seeded(Tower::Target, 16, 128, 7);
        let e = enc.embed_text("Time 0: a: 1, b: 2, c: 3");
        assert!(!e.used_fallback);
        assert_eq!(e.vector.len(), 16);
    }
}
