//! Run configuration, its published JSON schema and full-listing validation.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::domain::{DatasetConfig, MAX_BUDGET, MAX_MODULUS, MAX_OPS};
use crate::objectives::UpdateConfig;

/// JSON Schema (draft 2020-12) for [`RunConfig`] documents.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../../schema/run_config.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sgs,
    NoGuide,
    FrozenConjecturer,
    NoConditioning,
    RlReinforceHalf,
    RlCispo,
    RlEi,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Sgs,
        Mode::NoGuide,
        Mode::FrozenConjecturer,
        Mode::NoConditioning,
        Mode::RlReinforceHalf,
        Mode::RlCispo,
        Mode::RlEi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sgs => "sgs",
            Mode::NoGuide => "no-guide",
            Mode::FrozenConjecturer => "frozen-conjecturer",
            Mode::NoConditioning => "no-conditioning",
            Mode::RlReinforceHalf => "rl-reinforce-half",
            Mode::RlCispo => "rl-cispo",
            Mode::RlEi => "rl-ei",
        }
    }

    pub fn parse(name: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn synthetic(self) -> bool {
        matches!(
            self,
            Mode::Sgs | Mode::NoGuide | Mode::FrozenConjecturer | Mode::NoConditioning
        )
    }

    pub fn conditioned(self) -> bool {
        self != Mode::NoConditioning
    }

    pub fn trains_conjecturer(self) -> bool {
        self.synthetic() && self != Mode::FrozenConjecturer
    }

    pub fn uses_guide(self) -> bool {
        self == Mode::Sgs
    }

    /// The objective a mode implies; `None` when the config may choose.
    pub fn fixed_objective(self) -> Option<SolverObjective> {
        match self {
            Mode::RlReinforceHalf => Some(SolverObjective::ReinforceHalf),
            Mode::RlCispo => Some(SolverObjective::Cispo),
            Mode::RlEi => Some(SolverObjective::ExpertIteration),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverObjective {
    #[serde(rename = "reinforce-half")]
    ReinforceHalf,
    #[serde(rename = "cispo")]
    Cispo,
    #[serde(rename = "ei")]
    ExpertIteration,
}

/// Which model calls advance the generation counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingPolicy {
    #[serde(default = "yes")]
    pub solver_rollouts: bool,
    #[serde(default = "yes")]
    pub conjecturer_samples: bool,
    #[serde(default = "yes")]
    pub guide_evaluations: bool,
}

fn yes() -> bool {
    true
}

impl Default for CountingPolicy {
    fn default() -> Self {
        CountingPolicy {
            solver_rollouts: true,
            conjecturer_samples: true,
            guide_evaluations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetRef {
    /// A problem-set JSON file; relative paths resolve against the config.
    Path(String),
    Generate(DatasetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub dataset: DatasetRef,
    pub iterations: u64,
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver_objective: Option<SolverObjective>,
    #[serde(default = "default_solver_lr")]
    pub solver_lr: f64,
    #[serde(default = "default_conjecturer_lr")]
    pub conjecturer_lr: f64,
    /// Sequential optimizer steps per iteration over disjoint group slices.
    #[serde(default = "one")]
    pub minibatches: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_eps_low")]
    pub cispo_eps_low: f64,
    #[serde(default = "default_eps_high")]
    pub cispo_eps_high: f64,
    #[serde(default = "default_window")]
    pub length_window: f64,
    #[serde(default = "default_solver_bits")]
    pub solver_hash_bits: u32,
    #[serde(default = "default_conjecturer_bits")]
    pub conjecturer_hash_bits: u32,
    #[serde(default)]
    pub counting: CountingPolicy,
    /// 0 writes a checkpoint only at exit.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_k() -> usize {
    8
}
fn default_solver_lr() -> f64 {
    0.05
}
fn default_conjecturer_lr() -> f64 {
    0.05
}
fn one() -> usize {
    1
}
fn default_clip() -> f64 {
    1.0
}
fn default_eps_low() -> f64 {
    1.0
}
fn default_eps_high() -> f64 {
    3.0
}
fn default_window() -> f64 {
    0.8
}
fn default_solver_bits() -> u32 {
    12
}
fn default_conjecturer_bits() -> u32 {
    10
}

/// Every problem found in a config document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} config violation(s):", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl RunConfig {
    /// A config with every optional field at its default.
    pub fn new(mode: Mode, dataset: DatasetRef, iterations: u64, seed: u64) -> Self {
        RunConfig {
            mode,
            dataset,
            iterations,
            seed,
            k: default_k(),
            solver_objective: None,
            solver_lr: default_solver_lr(),
            conjecturer_lr: default_conjecturer_lr(),
            minibatches: 1,
            clip_norm: default_clip(),
            cispo_eps_low: default_eps_low(),
            cispo_eps_high: default_eps_high(),
            length_window: default_window(),
            solver_hash_bits: default_solver_bits(),
            conjecturer_hash_bits: default_conjecturer_bits(),
            counting: CountingPolicy::default(),
            checkpoint_every: 0,
        }
    }

    /// Validates `text` and lists every violation, not just the first.
    pub fn from_json(text: &str) -> Result<Self, ConfigErrors> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("not valid JSON: {e}")]))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        check_document(&value, &mut errors);
        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    /// Semantic checks on an already typed config.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errors = Vec::new();
        if let (Some(fixed), Some(chosen)) = (self.mode.fixed_objective(), self.solver_objective) {
            if fixed != chosen {
                errors.push(format!(
                    "/solver_objective: mode {} implies {:?}, got {:?}",
                    self.mode, fixed, chosen
                ));
            }
        }
        if self.mode.synthetic() && self.solver_objective == Some(SolverObjective::ExpertIteration) {
            errors.push("/solver_objective: expert iteration has no synthetic-problem variant".into());
        }
        if self.objective() == SolverObjective::Cispo && self.k < 2 {
            errors.push("/k: grouped advantages need k >= 2".into());
        }
        if self.k == 0 {
            errors.push("/k: must be at least 1".into());
        }
        if self.minibatches == 0 {
            errors.push("/minibatches: must be at least 1".into());
        }
        let positive = [
            ("solver_lr", self.solver_lr),
            ("conjecturer_lr", self.conjecturer_lr),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                errors.push(format!("/{name}: must be a positive number"));
            }
        }
        if !(0.0..=1.0).contains(&self.cispo_eps_low) {
            errors.push("/cispo_eps_low: must lie in [0, 1]".into());
        }
        if !(self.cispo_eps_high.is_finite() && self.cispo_eps_high >= 0.0) {
            errors.push("/cispo_eps_high: must be nonnegative".into());
        }
        if !(self.length_window > 0.0 && self.length_window < 1.0) {
            errors.push("/length_window: must lie in (0, 1)".into());
        }
        for (name, bits) in [
            ("solver_hash_bits", self.solver_hash_bits),
            ("conjecturer_hash_bits", self.conjecturer_hash_bits),
        ] {
            if !(1..=20).contains(&bits) {
                errors.push(format!("/{name}: must lie in [1, 20]"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errors))
        }
    }

    pub fn objective(&self) -> SolverObjective {
        self.mode
            .fixed_objective()
            .or(self.solver_objective)
            .unwrap_or(SolverObjective::ReinforceHalf)
    }

    pub fn solver_update(&self) -> UpdateConfig {
        UpdateConfig {
            learning_rate: self.solver_lr,
            clip_norm: self.clip_norm,
            eps_low: self.cispo_eps_low,
            eps_high: self.cispo_eps_high,
            length_window: self.length_window,
            ..UpdateConfig::default()
        }
    }

    pub fn conjecturer_update(&self) -> UpdateConfig {
        UpdateConfig {
            learning_rate: self.conjecturer_lr,
            clip_norm: self.clip_norm,
            ..UpdateConfig::default()
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// SHA-256 over the config (minus run-length fields) and the dataset
    /// bytes. Checkpoints from a different hash cannot be resumed.
    pub fn hash(&self, dataset_json: &str) -> [u8; 32] {
        let mut value = serde_json::to_value(self).expect("configs serialize");
        if let Value::Object(map) = &mut value {
            map.remove("iterations");
            map.remove("checkpoint_every");
            // resolved objective, so omitting a default does not change the hash
            map.insert(
                "solver_objective".into(),
                serde_json::to_value(self.objective()).expect("serializes"),
            );
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&value).expect("values serialize"));
        hasher.update([0u8]);
        hasher.update(dataset_json.as_bytes());
        hasher.finalize().into()
    }
}

// Structural checks mirroring the published schema, collecting every issue.

const TOP_KEYS: [&str; 17] = [
    "mode",
    "dataset",
    "iterations",
    "seed",
    "k",
    "solver_objective",
    "solver_lr",
    "conjecturer_lr",
    "minibatches",
    "clip_norm",
    "cispo_eps_low",
    "cispo_eps_high",
    "length_window",
    "solver_hash_bits",
    "conjecturer_hash_bits",
    "counting",
    "checkpoint_every",
];

const DATASET_KEYS: [&str; 8] = [
    "size",
    "modulus",
    "budget",
    "op_count",
    "infeasible_fraction",
    "min_distance",
    "op_pool",
    "seed",
];

const COUNTING_KEYS: [&str; 3] = ["solver_rollouts", "conjecturer_samples", "guide_evaluations"];

/// Property names the validator accepts at the top level (schema parity).
pub fn known_keys() -> &'static [&'static str] {
    &TOP_KEYS
}

fn check_document(value: &Value, errors: &mut Vec<String>) {
    let Some(map) = value.as_object() else {
        errors.push("/: expected an object".into());
        return;
    };
    unknown_keys(map, "", &TOP_KEYS, errors);
    for key in ["mode", "dataset", "iterations", "seed"] {
        if !map.contains_key(key) {
            errors.push(format!("/{key}: required"));
        }
    }
    if let Some(mode) = map.get("mode") {
        match mode.as_str() {
            Some(name) if Mode::parse(name).is_some() => {}
            _ => errors.push(format!(
                "/mode: expected one of {}",
                Mode::ALL.map(Mode::name).join(", ")
            )),
        }
    }
    if let Some(objective) = map.get("solver_objective") {
        if !matches!(objective.as_str(), Some("reinforce-half" | "cispo" | "ei")) {
            errors.push("/solver_objective: expected reinforce-half, cispo or ei".into());
        }
    }
    for key in ["iterations", "seed", "checkpoint_every"] {
        if let Some(v) = map.get(key) {
            if !v.is_u64() {
                errors.push(format!("/{key}: expected a nonnegative integer"));
            }
        }
    }
    for key in ["k", "minibatches"] {
        if let Some(v) = map.get(key) {
            if !v.as_u64().is_some_and(|n| n >= 1) {
                errors.push(format!("/{key}: expected a positive integer"));
            }
        }
    }
    for key in ["solver_hash_bits", "conjecturer_hash_bits"] {
        if let Some(v) = map.get(key) {
            if !v.as_u64().is_some_and(|b| (1..=20).contains(&b)) {
                errors.push(format!("/{key}: expected an integer in [1, 20]"));
            }
        }
    }
    // (name, lower, upper, lower inclusive, upper inclusive)
    let numbers = [
        ("solver_lr", 0.0, f64::INFINITY, false, false),
        ("conjecturer_lr", 0.0, f64::INFINITY, false, false),
        ("clip_norm", 0.0, f64::INFINITY, false, false),
        ("cispo_eps_low", 0.0, 1.0, true, true),
        ("cispo_eps_high", 0.0, f64::INFINITY, true, false),
        ("length_window", 0.0, 1.0, false, false),
    ];
    for (key, lo, hi, lo_in, hi_in) in numbers {
        let Some(v) = map.get(key) else { continue };
        let ok = v
            .as_f64()
            .is_some_and(|x| (if lo_in { x >= lo } else { x > lo }) && (if hi_in { x <= hi } else { x < hi }));
        if !ok {
            let (l, r) = (if lo_in { "[" } else { "(" }, if hi_in { "]" } else { ")" });
            errors.push(format!("/{key}: expected a number in {l}{lo}, {hi}{r}"));
        }
    }
    if let Some(counting) = map.get("counting") {
        match counting.as_object() {
            Some(c) => {
                unknown_keys(c, "/counting", &COUNTING_KEYS, errors);
                for (k, v) in c {
                    if COUNTING_KEYS.contains(&k.as_str()) && !v.is_boolean() {
                        errors.push(format!("/counting/{k}: expected a boolean"));
                    }
                }
            }
            None => errors.push("/counting: expected an object".into()),
        }
    }
    if let Some(dataset) = map.get("dataset") {
        check_dataset(dataset, errors);
    }
}

fn unknown_keys(map: &Map<String, Value>, at: &str, allowed: &[&str], errors: &mut Vec<String>) {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            errors.push(format!("{at}/{key}: unknown property"));
        }
    }
}

fn check_dataset(value: &Value, errors: &mut Vec<String>) {
    let Some(map) = value.as_object().filter(|m| m.len() == 1) else {
        errors.push("/dataset: expected exactly one of {\"path\": ...} or {\"generate\": {...}}".into());
        return;
    };
    if let Some(path) = map.get("path") {
        if !path.as_str().is_some_and(|p| !p.is_empty()) {
            errors.push("/dataset/path: expected a nonempty string".into());
        }
        return;
    }
    let Some(generate) = map.get("generate") else {
        errors.push("/dataset: expected \"path\" or \"generate\"".into());
        return;
    };
    let Some(g) = generate.as_object() else {
        errors.push("/dataset/generate: expected an object".into());
        return;
    };
    let at = "/dataset/generate";
    unknown_keys(g, at, &DATASET_KEYS, errors);
    for key in ["size", "modulus", "budget", "op_count", "infeasible_fraction", "seed"] {
        if !g.contains_key(key) {
            errors.push(format!("{at}/{key}: required"));
        }
    }
    for key in ["size", "seed", "min_distance"] {
        if let Some(v) = g.get(key) {
            if !v.is_u64() {
                errors.push(format!("{at}/{key}: expected a nonnegative integer"));
            }
        }
    }
    let ranges = [
        ("modulus", 2, u64::from(MAX_MODULUS)),
        ("budget", 1, u64::from(MAX_BUDGET)),
        ("op_count", 1, MAX_OPS as u64),
    ];
    for (key, lo, hi) in ranges {
        let Some(v) = g.get(key) else { continue };
        let pair = v
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)));
        match pair {
            Some((a, b)) if lo <= a && a <= b && b <= hi => {}
            _ => errors.push(format!("{at}/{key}: expected [lo, hi] with {lo} <= lo <= hi <= {hi}")),
        }
    }
    if let Some(v) = g.get("infeasible_fraction") {
        if !v.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f)) {
            errors.push(format!("{at}/infeasible_fraction: expected a number in [0, 1]"));
        }
    }
    if let Some(pool) = g.get("op_pool") {
        if serde_json::from_value::<Vec<crate::domain::Op>>(pool.clone()).map_or(true, |p| p.is_empty()) {
            errors.push(format!(
                "{at}/op_pool: expected a nonempty list of [\"add\"|\"mul\", c]"
            ));
        }
    }
}
