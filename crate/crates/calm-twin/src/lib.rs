//! Simulation engine for controlled dynamical systems driven by a language
//! model. A target history is paired with retrieved example trajectories
//! and natural-language knowledge, rendered into a prompt, and the model is
//! queried one step at a time; retrieval re-runs whenever a novel action
//! appears or the resampling buffer is exhausted. Ships with a trainable
//! hashing bi-encoder for retrieval, deterministic mock backends for
//! offline testing, synthetic data generators, baselines, and an
//! evaluation harness.

pub mod codec;
pub mod contrastive;
pub mod datagen;
pub mod evaluation;
pub mod encoder;
pub mod io;
pub mod knowledge;
pub mod llm;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod simulator;

pub use model::{
    EnvironmentPatch, HistoryFuturePair, KnowledgeEntry, ModellingEnvironment, SimulationConfig,
    SimulationResult, TimeStep, Trajectory, VariableKind, VariableSchema,
};
