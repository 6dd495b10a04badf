//! The modular-path problem domain.
//!
//! A [`Problem`] asks for a sequence of operations, each either `x + c` or
//! `x * c` modulo `m`, that carries `start` to `target` in at most `budget`
//! steps. [`verify`] replays a candidate exactly; [`brute_force`] and
//! [`reachability`] are the independent oracles used by the Guide and tests.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_MODULUS: u32 = 2;
pub const MAX_MODULUS: u32 = 64;
pub const MAX_BUDGET: u32 = 12;
pub const MAX_OPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("problem {id}: {reason}")]
    InvalidProblem { id: String, reason: String },
    #[error("step {position} uses op index {index}, but the problem has {op_count} ops")]
    InvalidOpIndex {
        position: usize,
        index: usize,
        op_count: usize,
    },
    #[error("oracle bounds exceeded: modulus {modulus} (max {MAX_MODULUS}), budget {budget} (max {MAX_BUDGET})")]
    OracleBounds { modulus: u32, budget: u32 },
    #[error("modulus {0} outside [{MIN_MODULUS}, {MAX_MODULUS}]")]
    ModulusBounds(u32),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("dataset generation failed: {0}")]
    GenerationFailed(String),
    #[error("duplicate problem id {0}")]
    DuplicateId(String),
}

/// One modular operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Add(u32),
    Mul(u32),
}

impl Op {
    pub fn apply(self, value: u32, modulus: u32) -> u32 {
        let (v, m) = (u64::from(value), u64::from(modulus));
        let out = match self {
            Op::Add(c) => (v + u64::from(c)) % m,
            Op::Mul(c) => (v * u64::from(c)) % m,
        };
        out as u32
    }

    pub fn constant(self) -> u32 {
        match self {
            Op::Add(c) | Op::Mul(c) => c,
        }
    }

    /// `Add(0)` and `Mul(1)` leave every residue unchanged.
    pub fn is_identity(self) -> bool {
        matches!(self, Op::Add(0) | Op::Mul(1))
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Add(c) => write!(f, "+{c}"),
            Op::Mul(c) => write!(f, "*{c}"),
        }
    }
}

// Ops travel as `["add", c]` / `["mul", c]`.
impl Serialize for Op {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let (name, c) = match *self {
            Op::Add(c) => ("add", c),
            Op::Mul(c) => ("mul", c),
        };
        let mut tup = serializer.serialize_tuple(2)?;
        tup.serialize_element(name)?;
        tup.serialize_element(&c)?;
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Op {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct OpVisitor;

        impl<'de> Visitor<'de> for OpVisitor {
            type Value = Op;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(r#"a pair like ["add", 3] or ["mul", 2]"#)
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Op, A::Error> {
                let name: String = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let c: u32 = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                match name.as_str() {
                    "add" => Ok(Op::Add(c)),
                    "mul" => Ok(Op::Mul(c)),
                    other => Err(de::Error::unknown_variant(other, &["add", "mul"])),
                }
            }
        }

        deserializer.deserialize_tuple(2, OpVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    #[serde(rename = "m")]
    pub modulus: u32,
    #[serde(rename = "s")]
    pub start: u32,
    #[serde(rename = "t")]
    pub target: u32,
    pub ops: Vec<Op>,
    pub budget: u32,
}

impl Problem {
    pub fn new(
        id: impl Into<String>,
        modulus: u32,
        start: u32,
        target: u32,
        ops: Vec<Op>,
        budget: u32,
    ) -> Result<Self, DomainError> {
        let problem = Problem {
            id: id.into(),
            modulus,
            start,
            target,
            ops,
            budget,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |reason: String| {
            Err(DomainError::InvalidProblem {
                id: self.id.clone(),
                reason,
            })
        };
        if !(MIN_MODULUS..=MAX_MODULUS).contains(&self.modulus) {
            return fail(format!("modulus {} outside [2, 64]", self.modulus));
        }
        if self.start >= self.modulus || self.target >= self.modulus {
            return fail("start and target must be residues below the modulus".into());
        }
        if self.ops.is_empty() || self.ops.len() > MAX_OPS {
            return fail(format!("needs 1..={MAX_OPS} ops, got {}", self.ops.len()));
        }
        if let Some(op) = self.ops.iter().find(|op| op.constant() >= self.modulus) {
            return fail(format!("op {op} constant is not a residue"));
        }
        if !(1..=MAX_BUDGET).contains(&self.budget) {
            return fail(format!("budget {} outside [1, {MAX_BUDGET}]", self.budget));
        }
        Ok(())
    }

    /// Final residue after replaying `steps` from `start`, ignoring the budget.
    pub fn replay(&self, steps: &[usize]) -> Result<u32, DomainError> {
        let mut value = self.start;
        for (position, &index) in steps.iter().enumerate() {
            let op = self.ops.get(index).ok_or(DomainError::InvalidOpIndex {
                position,
                index,
                op_count: self.ops.len(),
            })?;
            value = op.apply(value, self.modulus);
        }
        Ok(value)
    }
}

/// Indices into a problem's op list, applied in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Solution {
    pub steps: Vec<usize>,
}

impl Solution {
    pub fn new(steps: Vec<usize>) -> Self {
        Solution { steps }
    }
}

/// Exact verifier: the solution must fit the budget and land on the target.
///
/// An out-of-range op index is a malformed rollout and is reported as an
/// error rather than `false`.
pub fn verify(problem: &Problem, solution: &Solution) -> Result<bool, DomainError> {
    let end = problem.replay(&solution.steps)?;
    Ok(solution.steps.len() <= problem.budget as usize && end == problem.target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleReport {
    pub solvable: bool,
    pub min_length: Option<u32>,
    /// Number of distinct op-index sequences of minimal length that verify.
    pub min_solutions: u64,
}

/// Exhaustive oracle over every op-index sequence of length `0..=budget`.
///
/// Sequences are counted layer by layer (number of sequences of length `l`
/// ending at each residue), which visits the same sequence space as literal
/// enumeration without materializing `|ops|^budget` paths.
pub fn brute_force(problem: &Problem) -> Result<OracleReport, DomainError> {
    if problem.modulus > MAX_MODULUS || problem.budget > MAX_BUDGET {
        return Err(DomainError::OracleBounds {
            modulus: problem.modulus,
            budget: problem.budget,
        });
    }
    problem.validate()?;

    let m = problem.modulus as usize;
    let mut counts = vec![0u64; m];
    counts[problem.start as usize] = 1;
    for length in 0..=problem.budget {
        let hits = counts[problem.target as usize];
        if hits > 0 {
            return Ok(OracleReport {
                solvable: true,
                min_length: Some(length),
                min_solutions: hits,
            });
        }
        if length == problem.budget {
            break;
        }
        let mut next = vec![0u64; m];
        for (value, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            for op in &problem.ops {
                next[op.apply(value as u32, problem.modulus) as usize] += count;
            }
        }
        counts = next;
    }
    Ok(OracleReport {
        solvable: false,
        min_length: None,
        min_solutions: 0,
    })
}

/// Shortest step counts from one residue; `None` marks unreachable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMap {
    pub modulus: u32,
    pub start: u32,
    distances: Vec<Option<u32>>,
}

impl DistanceMap {
    pub fn distance(&self, residue: u32) -> Option<u32> {
        self.distances.get(residue as usize).copied().flatten()
    }

    pub fn as_slice(&self) -> &[Option<u32>] {
        &self.distances
    }
}

/// Breadth-first distances from `start` under `ops`, ignoring any budget.
pub fn reachability(modulus: u32, ops: &[Op], start: u32) -> Result<DistanceMap, DomainError> {
    if !(MIN_MODULUS..=MAX_MODULUS).contains(&modulus) || start >= modulus {
        return Err(DomainError::ModulusBounds(modulus));
    }
    let mut distances = vec![None; modulus as usize];
    distances[start as usize] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(value) = queue.pop_front() {
        let d = distances[value as usize].expect("queued residues have a distance");
        for op in ops {
            let next = op.apply(value, modulus) as usize;
            if distances[next].is_none() {
                distances[next] = Some(d + 1);
                queue.push_back(next as u32);
            }
        }
    }
    Ok(DistanceMap {
        modulus,
        start,
        distances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub size: usize,
    /// Inclusive modulus range.
    pub modulus: (u32, u32),
    /// Inclusive budget range.
    pub budget: (u32, u32),
    /// Inclusive op-count range.
    pub op_count: (usize, usize),
    pub infeasible_fraction: f64,
    /// Feasible problems need at least this many steps (0 allows `s == t`).
    #[serde(default)]
    pub min_distance: u32,
    /// Draw ops from this pool instead of uniformly at random.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_pool: Option<Vec<Op>>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 300,
            modulus: (5, 23),
            budget: (3, 8),
            op_count: (2, 4),
            infeasible_fraction: 0.0,
            min_distance: 0,
            op_pool: None,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<(), DomainError> {
        let bad = |msg: &str| Err(DomainError::InvalidConfig(msg.to_string()));
        let (m_lo, m_hi) = self.modulus;
        let (b_lo, b_hi) = self.budget;
        let (o_lo, o_hi) = self.op_count;
        if m_lo < MIN_MODULUS || m_hi > MAX_MODULUS || m_lo > m_hi {
            return bad("modulus range must lie within [2, 64]");
        }
        if b_lo < 1 || b_hi > MAX_BUDGET || b_lo > b_hi {
            return bad("budget range must lie within [1, 12]");
        }
        if o_lo < 1 || o_hi > MAX_OPS || o_lo > o_hi {
            return bad("op count range must lie within [1, 8]");
        }
        if !(0.0..=1.0).contains(&self.infeasible_fraction) {
            return bad("infeasible fraction must be a probability");
        }
        if matches!(&self.op_pool, Some(pool) if pool.is_empty()) {
            return bad("op pool must not be empty");
        }
        Ok(())
    }
}

/// Attempts per problem before generation gives up.
pub const GENERATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSet {
    pub seed: u64,
    pub infeasible_fraction: f64,
    pub problems: Vec<Problem>,
}

#[derive(Serialize, Deserialize)]
struct ProblemSetWire {
    seed: u64,
    problems: Vec<Problem>,
}

impl ProblemSet {
    pub fn new(seed: u64, problems: Vec<Problem>) -> Result<Self, DomainError> {
        let mut seen = HashSet::new();
        for problem in &problems {
            problem.validate()?;
            if !seen.insert(problem.id.as_str()) {
                return Err(DomainError::DuplicateId(problem.id.clone()));
            }
        }
        let infeasible = problems
            .iter()
            .filter(|p| !brute_force(p).map(|r| r.solvable).unwrap_or(false))
            .count();
        let infeasible_fraction = if problems.is_empty() {
            0.0
        } else {
            infeasible as f64 / problems.len() as f64
        };
        Ok(ProblemSet {
            seed,
            infeasible_fraction,
            problems,
        })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    /// Oracle feasibility label for each problem, in order.
    pub fn feasibility(&self) -> Vec<bool> {
        self.problems
            .iter()
            .map(|p| brute_force(p).map(|r| r.solvable).unwrap_or(false))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ProblemSetWire {
            seed: self.seed,
            problems: self.problems.clone(),
        })
        .expect("problem sets always serialize")
    }

    /// Parses and validates a serialized set. The realized infeasible
    /// fraction is recomputed with the oracle.
    pub fn from_json(text: &str) -> Result<Self, DatasetLoadError> {
        let wire: ProblemSetWire = serde_json::from_str(text)?;
        Ok(ProblemSet::new(wire.seed, wire.problems)?)
    }
}

#[derive(Debug, Error)]
pub enum DatasetLoadError {
    #[error("malformed problem set JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn random_ops(rng: &mut ChaCha8Rng, modulus: u32, count: usize, pool: Option<&[Op]>) -> Vec<Op> {
    (0..count)
        .map(|_| match pool {
            Some(pool) => *pool.choose(rng).expect("pool checked nonempty"),
            None => {
                let c = rng.gen_range(0..modulus);
                if rng.gen_bool(0.5) {
                    Op::Add(c)
                } else {
                    Op::Mul(c)
                }
            }
        })
        .collect()
}

/// Seeded problem-set generation.
///
/// Exactly `round(infeasible_fraction * size)` problems are oracle-infeasible;
/// the rest are solvable within budget. Labels are interleaved by a seeded
/// shuffle so infeasible problems are not clustered.
pub fn generate_dataset(config: &DatasetConfig) -> Result<ProblemSet, DomainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let infeasible_count = (config.infeasible_fraction * config.size as f64).round() as usize;
    let mut labels: Vec<bool> = (0..config.size).map(|i| i >= infeasible_count).collect();
    labels.shuffle(&mut rng);

    let mut problems = Vec::with_capacity(config.size);
    for (index, &want_feasible) in labels.iter().enumerate() {
        let mut attempts = 0;
        let problem = loop {
            if attempts == GENERATION_ATTEMPTS {
                return Err(DomainError::GenerationFailed(format!(
                    "no {} problem found for slot {index} after {GENERATION_ATTEMPTS} attempts",
                    if want_feasible { "feasible" } else { "infeasible" }
                )));
            }
            attempts += 1;
            let modulus = rng.gen_range(config.modulus.0..=config.modulus.1);
            let budget = rng.gen_range(config.budget.0..=config.budget.1);
            let op_count = rng.gen_range(config.op_count.0..=config.op_count.1);
            let ops = random_ops(&mut rng, modulus, op_count, config.op_pool.as_deref());
            if ops.iter().any(|op| op.constant() >= modulus) {
                continue;
            }
            let start = rng.gen_range(0..modulus);
            let target = rng.gen_range(0..modulus);
            let candidate = Problem {
                id: format!("p{index:05}"),
                modulus,
                start,
                target,
                ops,
                budget,
            };
            let report = brute_force(&candidate)?;
            let accept = if want_feasible {
                report.solvable && report.min_length.unwrap_or(0) >= config.min_distance
            } else {
                !report.solvable
            };
            if accept {
                break candidate;
            }
        };
        problems.push(problem);
    }
    Ok(ProblemSet {
        seed: config.seed,
        infeasible_fraction: config.infeasible_fraction,
        problems,
    })
}

/// Order-free identity of a problem: same modulus, endpoints, budget and op set.
pub fn canonical_form(problem: &Problem) -> (u32, u32, u32, u32, BTreeSet<Op>) {
    (
        problem.modulus,
        problem.start,
        problem.target,
        problem.budget,
        problem.ops.iter().copied().collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> Problem {
        Problem::new("ex", 7, 1, 4, vec![Op::Add(1), Op::Mul(2)], 3).unwrap()
    }

    /// Literal enumeration of every sequence up to the budget.
    fn enumerate(problem: &Problem) -> (Option<u32>, u64) {
        let n = problem.ops.len();
        for length in 0..=problem.budget {
            let mut hits = 0u64;
            let total = n.pow(length);
            for code in 0..total {
                let mut steps = Vec::with_capacity(length as usize);
                let mut c = code;
                for _ in 0..length {
                    steps.push(c % n);
                    c /= n;
                }
                if problem.replay(&steps).unwrap() == problem.target {
                    hits += 1;
                }
            }
            if hits > 0 {
                return (Some(length), hits);
            }
        }
        (None, 0)
    }

    #[test]
    fn verify_examples() {
        let p = example();
        assert!(verify(&p, &Solution::new(vec![1, 1])).unwrap());
        assert!(!verify(&p, &Solution::new(vec![0, 0])).unwrap());
        // 1 -> 2 -> 4 -> 1 -> 2 overshoots the budget regardless of endpoint
        assert!(!verify(&p, &Solution::new(vec![1, 1, 1, 1])).unwrap());
        assert!(!verify(&p, &Solution::new(vec![0, 0, 0, 1])).unwrap());
    }

    #[test]
    fn verify_rejects_bad_index() {
        let err = verify(&example(), &Solution::new(vec![0, 2])).unwrap_err();
        assert_eq!(
            err,
            DomainError::InvalidOpIndex {
                position: 1,
                index: 2,
                op_count: 2
            }
        );
    }

    #[test]
    fn empty_solution_when_start_is_target() {
        let p = Problem::new("z", 9, 3, 3, vec![Op::Mul(2)], 1).unwrap();
        assert!(verify(&p, &Solution::default()).unwrap());
        let report = brute_force(&p).unwrap();
        assert_eq!(report.min_length, Some(0));
        assert_eq!(report.min_solutions, 1);
    }

    #[test]
    fn brute_force_examples_match_enumeration() {
        let p = example();
        // (1+1)*2 and 1*2*2
        assert_eq!(enumerate(&p), (Some(2), 2));
        let report = brute_force(&p).unwrap();
        assert!(report.solvable);
        assert_eq!(report.min_length, Some(2));
        assert_eq!(report.min_solutions, 2);

        let q = Problem::new("q", 5, 0, 3, vec![Op::Add(2)], 2).unwrap();
        assert_eq!(enumerate(&q), (None, 0));
        assert!(!brute_force(&q).unwrap().solvable);
    }

    #[test]
    fn brute_force_refuses_oversized() {
        let mut p = example();
        p.budget = 13;
        assert!(matches!(brute_force(&p), Err(DomainError::OracleBounds { .. })));
        p.budget = 3;
        p.modulus = 65;
        assert!(matches!(brute_force(&p), Err(DomainError::OracleBounds { .. })));
    }

    #[test]
    fn reachability_on_five_cycle() {
        let map = reachability(5, &[Op::Add(2)], 0).unwrap();
        let expected = [Some(0), Some(3), Some(1), Some(4), Some(2)];
        assert_eq!(map.as_slice(), &expected);
        assert_eq!(map.distance(map.start), Some(0));
    }

    #[test]
    fn identity_op_reaches_nothing() {
        let map = reachability(11, &[Op::Mul(1)], 4).unwrap();
        for r in 0..11 {
            assert_eq!(map.distance(r).is_some(), r == 4);
        }
    }

    #[test]
    fn op_json_shape() {
        let p = example();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(
            text,
            r#"{"id":"ex","m":7,"s":1,"t":4,"ops":[["add",1],["mul",2]],"budget":3}"#
        );
        assert!(serde_json::from_str::<Op>(r#"["sub",1]"#).is_err());
        assert!(serde_json::from_str::<Op>(r#"["add",1,2]"#).is_err());
    }

    #[test]
    fn dataset_is_seeded() {
        let config = DatasetConfig {
            size: 300,
            seed: 17,
            ..DatasetConfig::default()
        };
        let a = generate_dataset(&config).unwrap().to_json();
        let b = generate_dataset(&config).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset() {
        let config = DatasetConfig {
            size: 0,
            ..DatasetConfig::default()
        };
        let set = generate_dataset(&config).unwrap();
        assert!(set.is_empty());
        assert_eq!(ProblemSet::from_json(&set.to_json()).unwrap(), set);
    }

    #[test]
    fn feasible_only_dataset_is_all_solvable() {
        let config = DatasetConfig {
            size: 200,
            seed: 3,
            ..DatasetConfig::default()
        };
        let set = generate_dataset(&config).unwrap();
        assert!(set.feasibility().into_iter().all(|f| f));
    }

    #[test]
    fn infeasible_fraction_is_realized() {
        let config = DatasetConfig {
            size: 250,
            infeasible_fraction: 0.3,
            seed: 5,
            ..DatasetConfig::default()
        };
        let set = generate_dataset(&config).unwrap();
        let infeasible = set.feasibility().iter().filter(|f| !**f).count();
        let realized = infeasible as f64 / set.len() as f64;
        assert!((realized - 0.3).abs() <= 0.02, "realized {realized}");
    }

    #[test]
    fn unsatisfiable_config_fails() {
        // +1 walks the whole cycle within budget, so nothing is infeasible
        let config = DatasetConfig {
            size: 10,
            modulus: (5, 5),
            budget: (6, 6),
            op_count: (1, 1),
            infeasible_fraction: 1.0,
            op_pool: Some(vec![Op::Add(1)]),
            ..DatasetConfig::default()
        };
        assert!(matches!(
            generate_dataset(&config),
            Err(DomainError::GenerationFailed(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let p = example();
        assert!(matches!(
            ProblemSet::new(0, vec![p.clone(), p]),
            Err(DomainError::DuplicateId(_))
        ));
    }
}
