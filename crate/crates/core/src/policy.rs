//! Tabular, feature-hashed softmax policies for the Solver and Conjecturer.
//!
//! Both policies are linear in a sparse one-hot feature vector: the logit of
//! an action is the sum of the weights in the active rows of a
//! `rows x columns` table. This keeps log-probabilities and their gradients
//! exact and cheap.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{self, DomainError, Problem, Solution, MAX_BUDGET, MAX_MODULUS, MAX_OPS};
use crate::hashing::{mix64, multiply_shift};

pub const DEFAULT_HASH_BITS: u32 = 12;
/// Column of the STOP action; op `i` uses column `i`.
pub const STOP_COLUMN: usize = MAX_OPS;
pub const SOLVER_COLUMNS: usize = MAX_OPS + 1;
/// Solver feature groups, each with its own block of `2^bits` rows.
pub const SOLVER_FEATURE_GROUPS: usize = 3;

const PARAMS_FORMAT: &str = "sgs-params";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no rollouts to average")]
    EmptyRollouts,
    #[error("trace of {steps} steps exceeds budget {budget}")]
    OverBudget { steps: usize, budget: u32 },
    #[error("parameter file: {0}")]
    Format(String),
    #[error("parameter JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Dense `rows x cols` weight table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamTableWire {
    format: String,
    version: u32,
    rows: usize,
    cols: usize,
    entries: Vec<(usize, f64)>,
}

impl ParamTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ParamTable {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Shape-versioned sparse JSON: nonzero `(flat index, value)` pairs.
    pub fn to_json(&self) -> String {
        let entries = self
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        serde_json::to_string(&ParamTableWire {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            rows: self.rows,
            cols: self.cols,
            entries,
        })
        .expect("finite tables serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let wire: ParamTableWire = serde_json::from_str(text)?;
        if wire.format != PARAMS_FORMAT {
            return Err(PolicyError::Format(format!("unknown format {:?}", wire.format)));
        }
        if wire.version != PARAMS_VERSION {
            return Err(PolicyError::Format(format!("unsupported version {}", wire.version)));
        }
        let len = wire
            .rows
            .checked_mul(wire.cols)
            .filter(|&n| n <= 1 << 26)
            .ok_or_else(|| PolicyError::Format("table too large".into()))?;
        let mut values = vec![0.0; len];
        for (index, value) in wire.entries {
            if !value.is_finite() {
                return Err(PolicyError::Format(format!("non-finite entry at {index}")));
            }
            *values
                .get_mut(index)
                .ok_or_else(|| PolicyError::Format(format!("entry {index} out of range")))? = value;
        }
        Ok(ParamTable {
            rows: wire.rows,
            cols: wire.cols,
            values,
        })
    }
}

/// Sparse gradient keyed by flat parameter index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad(pub BTreeMap<usize, f64>);

impl SparseGrad {
    pub fn add(&mut self, index: usize, value: f64) {
        *self.0.entry(index).or_insert(0.0) += value;
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0.get(&index).copied().unwrap_or(0.0)
    }

    pub fn accumulate_into(&self, dense: &mut [f64], scale: f64) {
        for (&i, &g) in &self.0 {
            dense[i] += scale * g;
        }
    }
}

/// Probabilities over the legal columns, in the given order.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Solver weights: `SOLVER_FEATURE_GROUPS` blocks of `2^bits` rows by
/// [`SOLVER_COLUMNS`] columns.
///
/// The active rows at each decision are:
/// 0. `(current value, target, steps remaining)`
/// 1. `(problem family, current value)`, where the family is the modulus and
///    the ordered op list, so problems sharing dynamics share this row; op
///    columns only
/// 2. whether the current value already equals the target; STOP only
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    hash_bits: u32,
    pub table: ParamTable,
}

impl SolverParams {
    pub fn zeros(hash_bits: u32) -> Self {
        let rows = SOLVER_FEATURE_GROUPS << hash_bits;
        SolverParams {
            hash_bits,
            table: ParamTable::zeros(rows, SOLVER_COLUMNS),
        }
    }

    pub fn hash_bits(&self) -> u32 {
        self.hash_bits
    }

    pub fn from_table(table: ParamTable) -> Result<Self, PolicyError> {
        let blocks = table.rows() / SOLVER_FEATURE_GROUPS;
        if table.cols() != SOLVER_COLUMNS
            || !table.rows().is_multiple_of(SOLVER_FEATURE_GROUPS)
            || !blocks.is_power_of_two()
            || blocks < 2
        {
            return Err(PolicyError::Format(format!(
                "solver table shape {}x{} is not {SOLVER_FEATURE_GROUPS}*2^b x {SOLVER_COLUMNS}",
                table.rows(),
                table.cols()
            )));
        }
        Ok(SolverParams {
            hash_bits: blocks.trailing_zeros(),
            table,
        })
    }

    /// Active rows for a decision at `value` with `remaining` steps left.
    pub fn feature_rows(&self, problem: &Problem, value: u32, remaining: u32) -> [usize; 3] {
        let block = 1usize << self.hash_bits;
        let state_key = u64::from(value) | u64::from(problem.target) << 8 | u64::from(remaining) << 16;
        let family_key = problem_family(problem) << 8 | u64::from(value);
        let at_target = u64::from(value == problem.target);
        [
            multiply_shift(state_key, self.hash_bits),
            block + multiply_shift(family_key, self.hash_bits),
            2 * block + multiply_shift(at_target | 1 << 40, self.hash_bits),
        ]
    }

    /// Legal columns are the problem's ops followed by STOP.
    fn logits(&self, rows: &[usize; 3], n_ops: usize) -> Vec<f64> {
        let column = |col: usize| {
            rows.iter()
                .enumerate()
                .filter(|&(group, _)| group_drives(group, col))
                .map(|(_, &r)| self.table.get(r, col))
                .sum::<f64>()
        };
        (0..n_ops)
            .map(column)
            .chain(std::iter::once(column(STOP_COLUMN)))
            .collect()
    }

    /// Action distribution over `ops ++ [STOP]`.
    pub fn action_probs(&self, problem: &Problem, value: u32, remaining: u32) -> Vec<f64> {
        let rows = self.feature_rows(problem, value, remaining);
        softmax(&self.logits(&rows, problem.ops.len()))
    }
}

/// Which columns each feature group contributes to. The family row is
/// target-agnostic, so it only ranks ops; the at-target flag only drives STOP.
fn group_drives(group: usize, col: usize) -> bool {
    match group {
        1 => col != STOP_COLUMN,
        2 => col == STOP_COLUMN,
        _ => true,
    }
}

/// Hash of the modulus and ordered op list.
pub fn problem_family(problem: &Problem) -> u64 {
    let mut h = mix64(u64::from(problem.modulus));
    for op in &problem.ops {
        let word = match *op {
            domain::Op::Add(c) => u64::from(c),
            domain::Op::Mul(c) => u64::from(c) | 1 << 32,
        };
        h = mix64(h ^ word);
    }
    h >> 24
}

fn column_of(action: usize, n_ops: usize) -> usize {
    if action == n_ops {
        STOP_COLUMN
    } else {
        action
    }
}

/// Sampled solution attempt with sampling-time statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub problem_id: String,
    pub steps: Vec<usize>,
    /// Log-probability of every emitted action, including a terminal STOP.
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub verified: bool,
}

impl Rollout {
    /// Action count including STOP (the token-count analog).
    pub fn tokens(&self) -> usize {
        self.logprobs.len()
    }

    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// A sampled trace before verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Samples a trace without verifying it.
pub fn sample_trace<R: Rng + ?Sized>(params: &SolverParams, problem: &Problem, rng: &mut R) -> Trace {
    let n_ops = problem.ops.len();
    let mut value = problem.start;
    let mut trace = Trace {
        steps: Vec::new(),
        logprobs: Vec::new(),
        entropies: Vec::new(),
    };
    for taken in 0..problem.budget {
        let rows = params.feature_rows(problem, value, problem.budget - taken);
        let logits = params.logits(&rows, n_ops);
        let probs = softmax(&logits);
        let action = sample_index(&probs, rng);
        trace.logprobs.push(log_softmax_at(&logits, action));
        trace.entropies.push(entropy(&probs));
        if action == n_ops {
            break;
        }
        trace.steps.push(action);
        value = problem.ops[action].apply(value, problem.modulus);
    }
    trace
}

/// One Solver attempt, verified.
pub fn solver_sample<R: Rng + ?Sized>(params: &SolverParams, problem: &Problem, rng: &mut R) -> Rollout {
    let trace = sample_trace(params, problem, rng);
    let verified =
        domain::verify(problem, &Solution::new(trace.steps.clone())).expect("sampled traces index valid ops");
    Rollout {
        problem_id: problem.id.clone(),
        steps: trace.steps,
        logprobs: trace.logprobs,
        entropies: trace.entropies,
        verified,
    }
}

/// Per-action view of a trace used by the objectives.
pub struct TokenView<'a> {
    pub rows: [usize; 3],
    /// Legal-column probabilities (`ops ++ [STOP]`).
    pub probs: &'a [f64],
    /// Index into `probs` of the taken action.
    pub action: usize,
    pub logprob: f64,
}

/// Walks the actions of `steps` (plus STOP when the trace ends under budget).
pub fn for_each_token<F>(
    params: &SolverParams,
    problem: &Problem,
    steps: &[usize],
    mut visit: F,
) -> Result<(), PolicyError>
where
    F: FnMut(&TokenView<'_>),
{
    if steps.len() > problem.budget as usize {
        return Err(PolicyError::OverBudget {
            steps: steps.len(),
            budget: problem.budget,
        });
    }
    let n_ops = problem.ops.len();
    let mut value = problem.start;
    let with_stop = steps.len() < problem.budget as usize;
    let actions = steps.iter().copied().chain(with_stop.then_some(n_ops)).enumerate();
    for (position, action) in actions {
        if action > n_ops || (action == n_ops && position < steps.len()) {
            return Err(DomainError::InvalidOpIndex {
                position,
                index: action,
                op_count: n_ops,
            }
            .into());
        }
        let rows = params.feature_rows(problem, value, problem.budget - position as u32);
        let logits = params.logits(&rows, n_ops);
        let probs = softmax(&logits);
        visit(&TokenView {
            rows,
            probs: &probs,
            action,
            logprob: log_softmax_at(&logits, action),
        });
        if action < n_ops {
            value = problem.ops[action].apply(value, problem.modulus);
        }
    }
    Ok(())
}

/// Adds `scale * d log p(action) / d weights` for one token.
pub fn accumulate_token_grad(token: &TokenView<'_>, n_ops: usize, scale: f64, grad: &mut SparseGrad) {
    for (group, &row) in token.rows.iter().enumerate() {
        for (j, p) in token.probs.iter().enumerate() {
            let col = column_of(j, n_ops);
            if group_drives(group, col) {
                let indicator = if j == token.action { 1.0 } else { 0.0 };
                grad.add(row * SOLVER_COLUMNS + col, scale * (indicator - p));
            }
        }
    }
}

/// Dense variant of [`accumulate_token_grad`].
pub fn accumulate_token_grad_dense(token: &TokenView<'_>, n_ops: usize, scale: f64, grad: &mut [f64]) {
    for (group, &row) in token.rows.iter().enumerate() {
        for (j, p) in token.probs.iter().enumerate() {
            let col = column_of(j, n_ops);
            if group_drives(group, col) {
                let indicator = if j == token.action { 1.0 } else { 0.0 };
                grad[row * SOLVER_COLUMNS + col] += scale * (indicator - p);
            }
        }
    }
}

/// Exact log-probability of a trace and its gradient.
pub fn solver_logprob_grad(
    params: &SolverParams,
    problem: &Problem,
    steps: &[usize],
) -> Result<(f64, SparseGrad), PolicyError> {
    let n_ops = problem.ops.len();
    let mut total = 0.0;
    let mut grad = SparseGrad::default();
    for_each_token(params, problem, steps, |token| {
        total += token.logprob;
        accumulate_token_grad(token, n_ops, 1.0, &mut grad);
    })?;
    Ok((total, grad))
}

pub fn solver_token_logprobs(
    params: &SolverParams,
    problem: &Problem,
    steps: &[usize],
) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::with_capacity(steps.len() + 1);
    for_each_token(params, problem, steps, |token| out.push(token.logprob))?;
    Ok(out)
}

/// Average per-step entropy over every step of every rollout.
pub fn mean_entropy(rollouts: &[Rollout]) -> Result<f64, PolicyError> {
    let (sum, count) = rollouts
        .iter()
        .flat_map(|r| r.entropies.iter())
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    if count == 0 {
        return Err(PolicyError::EmptyRollouts);
    }
    Ok(sum / count as f64)
}

/// Conjecturer weights: a target head over `t~` in `[0, 64)` and a budget
/// head over `L~ - 1` in `[0, 12)`, both indexed by a hashed target feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjecturerParams {
    hash_bits: u32,
    pub target_head: ParamTable,
    pub budget_head: ParamTable,
}

const UNCONDITIONED_KEY: u64 = 0xC0_4A_EC_70;

impl ConjecturerParams {
    pub fn zeros(hash_bits: u32) -> Self {
        let rows = 1usize << hash_bits;
        ConjecturerParams {
            hash_bits,
            target_head: ParamTable::zeros(rows, MAX_MODULUS as usize),
            budget_head: ParamTable::zeros(rows, MAX_BUDGET as usize),
        }
    }

    pub fn hash_bits(&self) -> u32 {
        self.hash_bits
    }

    pub fn from_tables(target_head: ParamTable, budget_head: ParamTable) -> Result<Self, PolicyError> {
        let rows = target_head.rows();
        if target_head.cols() != MAX_MODULUS as usize
            || budget_head.cols() != MAX_BUDGET as usize
            || budget_head.rows() != rows
            || !rows.is_power_of_two()
            || rows < 2
        {
            return Err(PolicyError::Format("conjecturer table shapes disagree".into()));
        }
        Ok(ConjecturerParams {
            hash_bits: rows.trailing_zeros(),
            target_head,
            budget_head,
        })
    }

    /// Total parameter count; gradients index target head then budget head.
    pub fn len(&self) -> usize {
        self.target_head.as_slice().len() + self.budget_head.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_row(&self, target: &Problem, conditioned: bool) -> usize {
        let key = if conditioned {
            u64::from(target.start) | u64::from(target.target) << 8 | u64::from(target.modulus) << 16
        } else {
            UNCONDITIONED_KEY
        };
        multiply_shift(key, self.hash_bits)
    }

    pub fn target_probs(&self, target: &Problem, conditioned: bool) -> Vec<f64> {
        let row = self.feature_row(target, conditioned);
        softmax(&self.target_logits(row, target.modulus))
    }

    pub fn budget_probs(&self, target: &Problem, conditioned: bool) -> Vec<f64> {
        let row = self.feature_row(target, conditioned);
        softmax(&self.budget_logits(row, target.budget))
    }

    fn target_logits(&self, row: usize, modulus: u32) -> Vec<f64> {
        (0..modulus as usize).map(|c| self.target_head.get(row, c)).collect()
    }

    fn budget_logits(&self, row: usize, budget: u32) -> Vec<f64> {
        (0..budget as usize).map(|c| self.budget_head.get(row, c)).collect()
    }
}

/// A Conjecturer proposal bound to the target it was conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub problem: Problem,
    pub target_id: String,
    pub chosen_target: u32,
    pub chosen_budget: u32,
    pub logprob: f64,
    pub conditioned: bool,
}

/// Samples `t~` then `L~` for `target`, keeping its modulus, start and ops.
pub fn conjecture<R: Rng + ?Sized>(
    params: &ConjecturerParams,
    target: &Problem,
    conditioned: bool,
    rng: &mut R,
) -> SyntheticProblem {
    let row = params.feature_row(target, conditioned);
    let t_logits = params.target_logits(row, target.modulus);
    let t_index = sample_index(&softmax(&t_logits), rng);
    let l_logits = params.budget_logits(row, target.budget);
    let l_index = sample_index(&softmax(&l_logits), rng);
    let logprob = log_softmax_at(&t_logits, t_index) + log_softmax_at(&l_logits, l_index);
    let chosen_target = t_index as u32;
    let chosen_budget = l_index as u32 + 1;
    SyntheticProblem {
        problem: Problem {
            id: format!("{}~syn", target.id),
            modulus: target.modulus,
            start: target.start,
            target: chosen_target,
            ops: target.ops.clone(),
            budget: chosen_budget,
        },
        target_id: target.id.clone(),
        chosen_target,
        chosen_budget,
        logprob,
        conditioned,
    }
}

/// Log-probability of choosing `(chosen_target, chosen_budget)` for `target`
/// and its gradient over the concatenated heads.
pub fn conjecture_logprob_grad(
    params: &ConjecturerParams,
    target: &Problem,
    conditioned: bool,
    chosen_target: u32,
    chosen_budget: u32,
) -> Result<(f64, SparseGrad), PolicyError> {
    if chosen_target >= target.modulus || chosen_budget == 0 || chosen_budget > target.budget {
        return Err(PolicyError::Format(format!(
            "choice (t={chosen_target}, L={chosen_budget}) outside the target's range"
        )));
    }
    let row = params.feature_row(target, conditioned);
    let t_logits = params.target_logits(row, target.modulus);
    let l_logits = params.budget_logits(row, target.budget);
    let t_index = chosen_target as usize;
    let l_index = chosen_budget as usize - 1;
    let logprob = log_softmax_at(&t_logits, t_index) + log_softmax_at(&l_logits, l_index);

    let mut grad = SparseGrad::default();
    let t_cols = params.target_head.cols();
    for (c, p) in softmax(&t_logits).into_iter().enumerate() {
        let indicator = if c == t_index { 1.0 } else { 0.0 };
        grad.add(row * t_cols + c, indicator - p);
    }
    let offset = params.target_head.as_slice().len();
    let l_cols = params.budget_head.cols();
    for (c, p) in softmax(&l_logits).into_iter().enumerate() {
        let indicator = if c == l_index { 1.0 } else { 0.0 };
        grad.add(offset + row * l_cols + c, indicator - p);
    }
    Ok((logprob, grad))
}
