//! Synthetic data generators.
//!
//! The tumour-growth generator couples Gompertz growth with a log-linear
//! chemotherapy kill, a linear-quadratic radiotherapy kill, and first-order
//! drug clearance (a surrogate with the qualitative structure of published
//! PK-PD tumour models, not a reimplementation of any specific one). A
//! discretized Lotka-Volterra generator covers actionless ecology-style
//! data, a two-regime drift family feeds retrieval-learning tests, and the
//! new-action scenario kit builds the environment-update cohorts.
//!
//! All generators round states to their schema decimals at every step and
//! iterate on the rounded values, so stored trajectories re-satisfy the
//! update equations exactly and survive codec roundtrips.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    EnvironmentPatch, KnowledgeEntry, ModelError, ModellingEnvironment, TimeStep, Trajectory,
    VariableSchema,
};
use crate::rng::{substream, substream_indexed};

/// Volume floor keeping logarithms well defined.
pub const VOLUME_FLOOR_CM3: f64 = 1e-3;
/// Tumour diameter conventionally marking death.
pub const DEATH_DIAMETER_CM: f64 = 13.0;

pub const TUMOUR_VOLUME: &str = "tumour_volume";
pub const DRUG_CONCENTRATION: &str = "chemotherapy_drug_concentration";
pub const CHEMO_DOSAGE: &str = "chemotherapy_dosage";
pub const RADIO_DOSAGE: &str = "radiotherapy_dosage";
pub const NEW_DRUG_DOSAGE: &str = "new_drug_dosage";

pub const CHEMO_DOSE: f64 = 5.0;
pub const RADIO_DOSE: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DataGenError {
    #[error("invalid parameters: {detail}")]
    InvalidParams { detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Tumour-growth surrogate parameters. Updates per day:
/// `C' = exp(-clearance) * C + chemo_dose` and
/// `V' = V * exp(growth*ln(K/V) - chemo_kill*C - (radio_alpha*d + radio_beta*d^2)
///  - new_drug_kill*x + noise*xi)`, with `V` clamped to `[floor, K]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PkPdParams {
    pub growth_rate: f64,
    pub carrying_capacity_cm3: f64,
    pub chemo_kill: f64,
    pub radio_alpha: f64,
    pub radio_beta: f64,
    pub chemo_clearance: f64,
    pub noise: f64,
    pub initial_volume_cm3: (f64, f64),
    /// Additive log-kill of the scenario drug per unit dose; 0 disables.
    #[serde(default)]
    pub new_drug_kill: f64,
}

impl Default for PkPdParams {
    fn default() -> Self {
        Self {
            growth_rate: 0.08,
            carrying_capacity_cm3: 1500.0,
            chemo_kill: 0.08,
            radio_alpha: 0.07,
            radio_beta: 0.007,
            chemo_clearance: std::f64::consts::LN_2,
            noise: 0.01,
            initial_volume_cm3: (250.0, 800.0),
            new_drug_kill: 0.0,
        }
    }
}

impl PkPdParams {
    pub fn validate(&self) -> Result<(), DataGenError> {
        let non_negative = [
            ("growth_rate", self.growth_rate),
            ("chemo_kill", self.chemo_kill),
            ("radio_alpha", self.radio_alpha),
            ("radio_beta", self.radio_beta),
            ("chemo_clearance", self.chemo_clearance),
            ("noise", self.noise),
            ("new_drug_kill", self.new_drug_kill),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataGenError::InvalidParams {
                    detail: format!("{name} must be non-negative"),
                });
            }
        }
        let (lo, hi) = self.initial_volume_cm3;
        if !(lo > 0.0 && hi >= lo) {
            return Err(DataGenError::InvalidParams {
                detail: "initial volume range must be positive and ordered".into(),
            });
        }
        if self.carrying_capacity_cm3 <= hi {
            return Err(DataGenError::InvalidParams {
                detail: "carrying capacity must exceed the largest initial volume".into(),
            });
        }
        Ok(())
    }
}

/// Dosing policy family used during generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PkPdPolicy {
    Untreated,
    /// Independent per-day coin flips for each modality.
    RandomSchedule { chemo_prob: f64, radio_prob: f64 },
    /// Both modalities whenever the volume is at or above the threshold.
    VolumeThreshold { threshold_cm3: f64 },
    /// The scenario drug (dose 1) from `start_step` on; no chemo/radio.
    NewDrugFrom { start_step: usize },
}

fn round_to(value: f64, decimals: u8) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale).round() / scale
}

/// One deterministic update on already-rounded state values.
pub fn pkpd_step(
    params: &PkPdParams,
    volume: f64,
    concentration: f64,
    chemo_dose: f64,
    radio_dose: f64,
    new_drug_dose: f64,
    noise_draw: f64,
) -> (f64, f64) {
    let next_concentration = (-params.chemo_clearance).exp() * concentration + chemo_dose;
    let safe_volume = volume.max(VOLUME_FLOOR_CM3);
    let exponent = params.growth_rate * (params.carrying_capacity_cm3 / safe_volume).ln()
        - params.chemo_kill * concentration
        - (params.radio_alpha * radio_dose + params.radio_beta * radio_dose * radio_dose)
        - params.new_drug_kill * new_drug_dose
        + params.noise * noise_draw;
    let next_volume = (volume * exponent.exp()).clamp(VOLUME_FLOOR_CM3, params.carrying_capacity_cm3);
    (next_volume, next_concentration)
}

pub fn nsclc_schemas() -> Vec<VariableSchema> {
    vec![
        VariableSchema::state(TUMOUR_VOLUME, "cm^3", 2),
        VariableSchema::state(DRUG_CONCENTRATION, "mg/m^3", 2),
        VariableSchema::action(CHEMO_DOSAGE, "mg/m^3", 0),
        VariableSchema::action(RADIO_DOSAGE, "Gy", 0),
    ]
}

pub fn nsclc_knowledge() -> Vec<KnowledgeEntry> {
    vec![
        KnowledgeEntry::general(
            "The data describes treatment responses for combined chemo and radiation therapy for non-small cell lung cancer patients, generated from a bio-mathematical model. The time unit is in days.",
        ),
        KnowledgeEntry::new(TUMOUR_VOLUME, "Volume of the tumour with units cm^3."),
        KnowledgeEntry::new(
            DRUG_CONCENTRATION,
            "Concentration of the chemotherapy drug vinblastine with units mg/m^3.",
        ),
        KnowledgeEntry::new(
            CHEMO_DOSAGE,
            "Dosage of the chemotherapy drug vinblastine with units mg/m^3.",
        ),
        KnowledgeEntry::new(RADIO_DOSAGE, "Dosage of the radiotherapy with units Gy."),
    ]
}

/// Schemas including the scenario drug action.
pub fn nsclc_schemas_with_new_drug() -> Vec<VariableSchema> {
    let mut schemas = nsclc_schemas();
    schemas.push(VariableSchema::action(NEW_DRUG_DOSAGE, "mg", 0));
    schemas
}

fn doses_for(
    policy: &PkPdPolicy,
    step: usize,
    volume: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (f64, f64, f64) {
    match policy {
        PkPdPolicy::Untreated => (0.0, 0.0, 0.0),
        PkPdPolicy::RandomSchedule {
            chemo_prob,
            radio_prob,
        } => {
            let chemo = if rng.gen_bool(chemo_prob.clamp(0.0, 1.0)) {
                CHEMO_DOSE
            } else {
                0.0
            };
            let radio = if rng.gen_bool(radio_prob.clamp(0.0, 1.0)) {
                RADIO_DOSE
            } else {
                0.0
            };
            (chemo, radio, 0.0)
        }
        PkPdPolicy::VolumeThreshold { threshold_cm3 } => {
            if volume >= *threshold_cm3 {
                (CHEMO_DOSE, RADIO_DOSE, 0.0)
            } else {
                (0.0, 0.0, 0.0)
            }
        }
        PkPdPolicy::NewDrugFrom { start_step } => {
            let dose = if step >= *start_step { 1.0 } else { 0.0 };
            (0.0, 0.0, dose)
        }
    }
}

/// Generates `n` patients with `horizon` daily steps each. Per-patient
/// seeds derive from the root seed, so patients are independent and the
/// dataset is bitwise reproducible.
pub fn gen_pkpd(
    n: usize,
    horizon: usize,
    params: &PkPdParams,
    policy: &PkPdPolicy,
    seed: u64,
) -> Result<Vec<Trajectory>, DataGenError> {
    params.validate()?;
    if horizon < 2 {
        return Err(DataGenError::InvalidParams {
            detail: "horizon must be at least 2".into(),
        });
    }
    let with_new_drug = matches!(policy, PkPdPolicy::NewDrugFrom { .. });
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream_indexed(seed, "pkpd-patient", i as u64);
        let (lo, hi) = params.initial_volume_cm3;
        let mut volume = round_to(rng.gen_range(lo..=hi), 2);
        let mut concentration = 0.0;
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let (chemo, radio, drug) = doses_for(policy, t, volume, &mut rng);
            let mut step = TimeStep::new(t as i64);
            step.state.insert(TUMOUR_VOLUME.into(), volume);
            step.state.insert(DRUG_CONCENTRATION.into(), concentration);
            step.action.insert(CHEMO_DOSAGE.into(), chemo);
            step.action.insert(RADIO_DOSAGE.into(), radio);
            if with_new_drug {
                step.action.insert(NEW_DRUG_DOSAGE.into(), drug);
            }
            steps.push(step);
            let xi: f64 = rng.sample(StandardNormal);
            let (v, c) = pkpd_step(params, volume, concentration, chemo, radio, drug, xi);
            volume = round_to(v, 2);
            concentration = round_to(c, 2);
        }
        out.push(Trajectory::new(format!("pkpd-{seed:08x}-{i:04}"), steps));
    }
    Ok(out)
}

/// Discretized Lotka-Volterra parameters (Euler steps of size `step_size`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredatorPreyParams {
    pub prey_growth: f64,
    pub predation: f64,
    pub predator_death: f64,
    pub conversion: f64,
    pub step_size: f64,
    pub noise: f64,
    pub initial_prey: (f64, f64),
    pub initial_predator: (f64, f64),
}

impl Default for PredatorPreyParams {
    fn default() -> Self {
        Self {
            prey_growth: 1.1,
            predation: 0.4,
            predator_death: 0.4,
            conversion: 0.1,
            step_size: 0.05,
            noise: 0.0,
            initial_prey: (2.0, 8.0),
            initial_predator: (1.0, 4.0),
        }
    }
}

impl PredatorPreyParams {
    pub fn validate(&self) -> Result<(), DataGenError> {
        let positive = [
            ("prey_growth", self.prey_growth),
            ("predation", self.predation),
            ("predator_death", self.predator_death),
            ("conversion", self.conversion),
            ("step_size", self.step_size),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DataGenError::InvalidParams {
                    detail: format!("{name} must be positive"),
                });
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(DataGenError::InvalidParams {
                detail: "noise must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// The interior fixed point (prey, predator).
    pub fn equilibrium(&self) -> (f64, f64) {
        (
            self.predator_death / self.conversion,
            self.prey_growth / self.predation,
        )
    }

    /// First integral of the continuous system; constant along exact
    /// solutions, drifting O(dt) under Euler steps.
    pub fn conserved_quantity(&self, prey: f64, predator: f64) -> f64 {
        self.conversion * prey - self.predator_death * prey.max(1e-12).ln()
            + self.predation * predator
            - self.prey_growth * predator.max(1e-12).ln()
    }
}

pub fn predator_prey_schemas() -> Vec<VariableSchema> {
    vec![
        VariableSchema::state("prey", "count", 3),
        VariableSchema::state("predator", "count", 3),
    ]
}

/// Actionless predator-prey series with `horizon` steps per sample.
pub fn gen_predator_prey(
    n: usize,
    horizon: usize,
    params: &PredatorPreyParams,
    seed: u64,
) -> Result<Vec<Trajectory>, DataGenError> {
    params.validate()?;
    if horizon < 2 {
        return Err(DataGenError::InvalidParams {
            detail: "horizon must be at least 2".into(),
        });
    }
    let dt = params.step_size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream_indexed(seed, "predprey-sample", i as u64);
        let mut prey = round_to(
            rng.gen_range(params.initial_prey.0..=params.initial_prey.1),
            3,
        );
        let mut predator = round_to(
            rng.gen_range(params.initial_predator.0..=params.initial_predator.1),
            3,
        );
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut step = TimeStep::new(t as i64);
            step.state.insert("prey".into(), prey);
            step.state.insert("predator".into(), predator);
            steps.push(step);
            let xi_prey: f64 = rng.sample(StandardNormal);
            let xi_pred: f64 = rng.sample(StandardNormal);
            let d_prey = params.prey_growth * prey - params.predation * prey * predator;
            let d_pred = -params.predator_death * predator + params.conversion * prey * predator;
            prey = round_to(
                (prey + dt * d_prey + params.noise * dt.sqrt() * xi_prey).max(0.001),
                3,
            );
            predator = round_to(
                (predator + dt * d_pred + params.noise * dt.sqrt() * xi_pred).max(0.001),
                3,
            );
        }
        out.push(Trajectory::new(format!("predprey-{seed:08x}-{i:04}"), steps));
    }
    Ok(out)
}

/// Volume of a sphere with the given diameter.
pub fn sphere_volume_cm3(diameter_cm: f64) -> f64 {
    let radius = diameter_cm / 2.0;
    4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)
}

/// First time label at which the tumour volume reaches the death
/// threshold, or `None` if it never crosses.
pub fn death_time(traj: &Trajectory, diameter_threshold_cm: f64) -> Option<i64> {
    let threshold = sphere_volume_cm3(diameter_threshold_cm);
    traj.steps
        .iter()
        .find(|s| s.state.get(TUMOUR_VOLUME).copied().unwrap_or(f64::NEG_INFINITY) >= threshold)
        .map(|s| s.time)
}

/// Two parameter clusters of one dynamics family. Untreated, the value
/// drifts gently (`+drift` for regime 0, `-drift` for regime 1) from a
/// shared random level, so regimes are only subtly visible in a history.
/// Once the binary treatment switches on mid-series, the value reverts
/// strongly toward a regime-specific setpoint, so the futures separate
/// sharply by regime. Labels alternate with the sample index.
#[derive(Debug, Clone)]
pub struct TwoRegimeDataset {
    pub trajectories: Vec<Trajectory>,
    pub labels: Vec<usize>,
    /// First step index with the treatment applied.
    pub switch_step: usize,
}

pub fn two_regime_schemas() -> Vec<VariableSchema> {
    vec![
        VariableSchema::state("x", "", 1),
        VariableSchema::action("treatment", "", 0),
    ]
}

pub fn gen_two_regime(n: usize, horizon: usize, seed: u64) -> TwoRegimeDataset {
    let drift = 0.5;
    let noise = 0.3;
    let reversion = 0.6;
    let setpoints = [95.0, 5.0];
    let switch = horizon / 2;
    let mut trajectories = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream_indexed(seed, "two-regime", i as u64);
        let regime = i % 2;
        let slope = if regime == 0 { drift } else { -drift };
        let mut x = round_to(rng.gen_range(40.0..60.0), 1);
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let action = if t >= switch { 1.0 } else { 0.0 };
            let mut step = TimeStep::new(t as i64);
            step.state.insert("x".into(), x);
            step.action.insert("treatment".into(), action);
            steps.push(step);
            let xi: f64 = rng.sample(StandardNormal);
            let next = if action == 1.0 {
                x + reversion * (setpoints[regime] - x) + noise * xi
            } else {
                x + slope + noise * xi
            };
            x = round_to(next, 1);
        }
        trajectories.push(Trajectory::new(format!("regime-{seed:08x}-{i:04}"), steps));
        labels.push(regime);
    }
    TwoRegimeDataset {
        trajectories,
        labels,
        switch_step: switch,
    }
}

/// The three environment-update conditions for a newly approved drug:
/// action only, action plus knowledge, action plus knowledge plus data.
#[derive(Debug, Clone)]
pub struct NewActionScenario {
    pub base: ModellingEnvironment,
    pub action_only: ModellingEnvironment,
    pub with_knowledge: ModellingEnvironment,
    pub with_data: ModellingEnvironment,
    /// Treated test patients: `lookback` untreated steps then the drug for
    /// the rest; the truth for simulation error measurements.
    pub test_cohort: Vec<Trajectory>,
}

/// Builds the scenario: a base cohort without the drug, the three updated
/// environments (each one update from the base), and a treated test
/// cohort. The added samples carry one post-treatment measurement each.
pub fn scenario_new_action(
    params: &PkPdParams,
    new_drug_kill: f64,
    seed: u64,
) -> Result<NewActionScenario, DataGenError> {
    if !(new_drug_kill.is_finite() && new_drug_kill > 0.0) {
        return Err(DataGenError::InvalidParams {
            detail: "new drug effect must be positive".into(),
        });
    }
    let base_seed = substream(seed, "scenario-base").gen::<u64>();
    let treated_seed = substream(seed, "scenario-treated").gen::<u64>();
    let test_seed = substream(seed, "scenario-test").gen::<u64>();

    let base_dataset = gen_pkpd(20, 10, params, &PkPdPolicy::Untreated, base_seed)?;
    let base = ModellingEnvironment::new(nsclc_schemas(), base_dataset, nsclc_knowledge())?;

    let drug_schema = VariableSchema::action(NEW_DRUG_DOSAGE, "mg", 0);
    let improvement = ((1.0 - (-new_drug_kill).exp()) * 100.0).round();
    let drug_knowledge = KnowledgeEntry::new(
        NEW_DRUG_DOSAGE,
        format!(
            "A treatment that clinical trial results suggest can initially improve {TUMOUR_VOLUME} by {improvement} points"
        ),
    );

    let mut treated_params = params.clone();
    treated_params.new_drug_kill = new_drug_kill;
    // Four untreated steps, the drug at steps 4 and 5, so the final state
    // is the single post-treatment measurement.
    let treated = gen_pkpd(
        12,
        6,
        &treated_params,
        &PkPdPolicy::NewDrugFrom { start_step: 4 },
        treated_seed,
    )?;
    let test_cohort = gen_pkpd(
        10,
        6,
        &treated_params,
        &PkPdPolicy::NewDrugFrom { start_step: 3 },
        test_seed,
    )?;

    let action_only = base.update(EnvironmentPatch {
        add_schemas: vec![drug_schema.clone()],
        ..Default::default()
    })?;
    let with_knowledge = base.update(EnvironmentPatch {
        add_schemas: vec![drug_schema.clone()],
        add_knowledge: vec![drug_knowledge.clone()],
        ..Default::default()
    })?;
    let with_data = base.update(EnvironmentPatch {
        add_schemas: vec![drug_schema],
        add_knowledge: vec![drug_knowledge],
        add_trajectories: treated,
    })?;

    Ok(NewActionScenario {
        base,
        action_only,
        with_knowledge,
        with_data,
        test_cohort,
    })
}
