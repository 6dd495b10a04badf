//! Solver update rules: REINFORCE, REINFORCE restricted to hard groups,
//! CISPO, and Expert Iteration selection, plus the overlong penalty and the
//! adaptive-moment optimizer they share.
//!
//! Every gradient here is the ascent direction of the objective being
//! maximized (the negated loss).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Problem;
use crate::policy::{accumulate_token_grad_dense, for_each_token, PolicyError, Rollout, SolverParams};

/// Lifetime solve count at which Expert Iteration stops rolling a problem out.
pub const EI_MAX_SOLVES: u32 = 16;
/// Iterations of verified proofs Expert Iteration trains on (current included).
pub const EI_WINDOW: u64 = 3;
/// Groups with solve rate at or below this are kept by REINFORCE^1/2.
pub const HALF_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("length {length} exceeds budget {budget}")]
    OverBudget { length: usize, budget: u32 },
    #[error("group advantages need at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite gradient (norm {0}); update aborted")]
    NonFiniteGradient(f64),
    #[error("rollout on {problem} stores {stored} log-probs but the trace has {tokens} actions")]
    TokenMismatch {
        problem: String,
        stored: usize,
        tokens: usize,
    },
    #[error("parameter shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("{rewards} rewards for {rollouts} rollouts")]
    RewardMismatch { rewards: usize, rollouts: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub length_window: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            learning_rate: 0.05,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            eps_low: 1.0,
            eps_high: 3.0,
            length_window: 0.8,
        }
    }
}

/// Overlong penalty: 0 below `window * budget`, then linear down to -1 at
/// the budget.
pub fn length_penalty(length: usize, budget: u32, window: f64) -> Result<f64, ObjectiveError> {
    if length > budget as usize {
        return Err(ObjectiveError::OverBudget { length, budget });
    }
    let budget = f64::from(budget);
    let knot = window * budget;
    let length = length as f64;
    if length <= knot {
        return Ok(0.0);
    }
    Ok(-((length - knot) / (budget - knot)).min(1.0))
}

/// Scalar rollout reward: verification bit plus overlong penalty.
pub fn rollout_reward(rollout: &Rollout, budget: u32, window: f64) -> Result<f64, ObjectiveError> {
    let v = if rollout.verified { 1.0 } else { 0.0 };
    Ok(v + length_penalty(rollout.steps.len(), budget, window)?)
}

/// `k` rollouts of one problem with their scalar rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub problem: Problem,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(problem: Problem, rollouts: Vec<Rollout>, window: f64) -> Result<Self, ObjectiveError> {
        let rewards = rollouts
            .iter()
            .map(|r| rollout_reward(r, problem.budget, window))
            .collect::<Result<_, _>>()?;
        Ok(RolloutGroup {
            problem,
            rollouts,
            rewards,
        })
    }

    pub fn solve_rate(&self) -> f64 {
        if self.rollouts.is_empty() {
            return 0.0;
        }
        self.solved() as f64 / self.rollouts.len() as f64
    }

    pub fn solved(&self) -> usize {
        self.rollouts.iter().filter(|r| r.verified).count()
    }
}

/// Keeps exactly the groups whose solve rate is at most one half.
pub fn reinforce_half_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups
        .into_iter()
        .filter(|g| 2 * g.solved() <= g.rollouts.len())
        .collect()
}

/// Group-relative advantages with the population standard deviation.
/// Zero-variance groups get all-zero advantages.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
    let k = rewards.len();
    if k < 2 {
        return Err(ObjectiveError::GroupTooSmall(k));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok(vec![0.0; k]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn check_rewards(group: &RolloutGroup) -> Result<(), ObjectiveError> {
    if group.rewards.len() != group.rollouts.len() {
        return Err(ObjectiveError::RewardMismatch {
            rewards: group.rewards.len(),
            rollouts: group.rollouts.len(),
        });
    }
    Ok(())
}

/// REINFORCE ascent direction: the mean over rollouts of
/// `reward / |y| * grad log pi(y)`.
pub fn reinforce_grad(params: &SolverParams, groups: &[RolloutGroup]) -> Result<Vec<f64>, ObjectiveError> {
    let mut grad = vec![0.0; params.table.as_slice().len()];
    let total: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    if total == 0 {
        return Ok(grad);
    }
    for group in groups {
        check_rewards(group)?;
        let n_ops = group.problem.ops.len();
        for (rollout, &reward) in group.rollouts.iter().zip(&group.rewards) {
            if reward == 0.0 {
                continue;
            }
            let scale = reward / (rollout.tokens().max(1) as f64 * total as f64);
            for_each_token(params, &group.problem, &rollout.steps, |token| {
                accumulate_token_grad_dense(token, n_ops, scale, &mut grad);
            })?;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CispoGrad {
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// CISPO ascent direction.
///
/// Token weights `pi/pi_old` are evaluated at `params` against `params_old`,
/// clipped to `[1 - eps_low, 1 + eps_high]` and held constant. Each group is
/// normalized by its total action count; groups are then averaged.
pub fn cispo_grad(
    params: &SolverParams,
    params_old: &SolverParams,
    groups: &[RolloutGroup],
    config: &UpdateConfig,
) -> Result<(Vec<f64>, CispoGrad), ObjectiveError> {
    let len = params.table.as_slice().len();
    let old_len = params_old.table.as_slice().len();
    if len != old_len || params.hash_bits() != params_old.hash_bits() {
        return Err(ObjectiveError::ShapeMismatch(len, old_len));
    }
    let mut grad = vec![0.0; len];
    let mut stats = CispoGrad::default();
    if groups.is_empty() {
        return Ok((grad, stats));
    }
    let (low, high) = (1.0 - config.eps_low, 1.0 + config.eps_high);
    for group in groups {
        check_rewards(group)?;
        let advantages = group_advantage(&group.rewards)?;
        let group_tokens: usize = group.rollouts.iter().map(Rollout::tokens).sum();
        let n_ops = group.problem.ops.len();
        for (rollout, &advantage) in group.rollouts.iter().zip(&advantages) {
            let old = crate::policy::solver_token_logprobs(params_old, &group.problem, &rollout.steps)?;
            if old.len() != rollout.tokens() {
                return Err(ObjectiveError::TokenMismatch {
                    problem: group.problem.id.clone(),
                    stored: rollout.tokens(),
                    tokens: old.len(),
                });
            }
            let mut position = 0;
            for_each_token(params, &group.problem, &rollout.steps, |token| {
                let raw = (token.logprob - old[position]).exp();
                let weight = raw.clamp(low, high);
                if weight != raw {
                    stats.clipped_tokens += 1;
                }
                stats.tokens += 1;
                position += 1;
                if advantage != 0.0 {
                    let scale = weight * advantage / (group_tokens as f64 * groups.len() as f64);
                    accumulate_token_grad_dense(token, n_ops, scale, &mut grad);
                }
            })?;
        }
    }
    Ok((grad, stats))
}

/// Adaptive-moment state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub retained_groups: usize,
    pub clipped_token_fraction: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    /// Clips `grad` to the configured global norm and takes one ascent step.
    ///
    /// An all-zero gradient advances the moment estimates but leaves the
    /// parameters where they are.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &mut [f64],
        config: &UpdateConfig,
    ) -> Result<UpdateStats, ObjectiveError> {
        if params.len() != grad.len() || self.first.len() != grad.len() {
            return Err(ObjectiveError::ShapeMismatch(params.len(), grad.len()));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ObjectiveError::NonFiniteGradient(norm));
        }
        let clipped = norm > config.clip_norm;
        if clipped {
            let scale = config.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        self.steps += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let bias1 = 1.0 - b1.powi(self.steps as i32);
        let bias2 = 1.0 - b2.powi(self.steps as i32);
        let moving = norm > 0.0;
        for i in 0..params.len() {
            let g = grad[i];
            self.first[i] = b1 * self.first[i] + (1.0 - b1) * g;
            self.second[i] = b2 * self.second[i] + (1.0 - b2) * g * g;
            if moving && self.second[i] > 0.0 {
                let m_hat = self.first[i] / bias1;
                let v_hat = self.second[i] / bias2;
                params[i] += config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        Ok(UpdateStats {
            grad_norm: norm,
            clipped,
            ..UpdateStats::default()
        })
    }
}

/// One REINFORCE step over `groups`.
pub fn reinforce_update(
    params: &mut SolverParams,
    optimizer: &mut Adam,
    groups: &[RolloutGroup],
    config: &UpdateConfig,
) -> Result<UpdateStats, ObjectiveError> {
    let mut grad = reinforce_grad(params, groups)?;
    let mut stats = optimizer.step(params.table.as_mut_slice(), &mut grad, config)?;
    stats.retained_groups = groups.len();
    Ok(stats)
}

/// One CISPO step against the sampling-time parameters.
pub fn cispo_update(
    params: &mut SolverParams,
    params_old: &SolverParams,
    optimizer: &mut Adam,
    groups: &[RolloutGroup],
    config: &UpdateConfig,
) -> Result<UpdateStats, ObjectiveError> {
    let (mut grad, clip) = cispo_grad(params, params_old, groups, config)?;
    let mut stats = optimizer.step(params.table.as_mut_slice(), &mut grad, config)?;
    stats.retained_groups = groups.len();
    stats.clipped_token_fraction = if clip.tokens == 0 {
        0.0
    } else {
        clip.clipped_tokens as f64 / clip.tokens as f64
    };
    Ok(stats)
}

/// Lifetime solve counts and the buffer of recent verified proofs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertIterationState {
    pub solve_counts: BTreeMap<String, u32>,
    /// `(iteration, rollout)` for every verified rollout still in the window.
    pub proofs: Vec<(u64, Rollout)>,
}

impl ExpertIterationState {
    /// Records this iteration's rollouts and drops proofs that left the window.
    pub fn record(&mut self, iteration: u64, rollouts: &[Rollout]) {
        for rollout in rollouts.iter().filter(|r| r.verified) {
            *self.solve_counts.entry(rollout.problem_id.clone()).or_insert(0) += 1;
            self.proofs.push((iteration, rollout.clone()));
        }
        self.proofs.retain(|(iter, _)| in_window(*iter, iteration));
    }
}

fn in_window(proof_iter: u64, current: u64) -> bool {
    proof_iter <= current && current - proof_iter < EI_WINDOW
}

/// Problems to roll out (solved fewer than [`EI_MAX_SOLVES`] times) and the
/// verified rollouts from the trailing [`EI_WINDOW`] iterations.
pub fn ei_select<'a>(
    problems: &[Problem],
    state: &'a ExpertIterationState,
    current_iteration: u64,
) -> (Vec<usize>, Vec<&'a Rollout>) {
    let rollout_set = problems
        .iter()
        .enumerate()
        .filter(|(_, p)| state.solve_counts.get(&p.id).copied().unwrap_or(0) < EI_MAX_SOLVES)
        .map(|(i, _)| i)
        .collect();
    let training = state
        .proofs
        .iter()
        .filter(|(iter, r)| r.verified && in_window(*iter, current_iteration))
        .map(|(_, r)| r)
        .collect();
    (rollout_set, training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Op;
    use crate::policy::solver_logprob_grad;

    fn rollout(id: &str, steps: Vec<usize>, verified: bool, tokens: usize) -> Rollout {
        Rollout {
            problem_id: id.into(),
            steps,
            logprobs: vec![-1.0; tokens],
            entropies: vec![1.0; tokens],
            verified,
        }
    }

    fn group(solved: usize, k: usize) -> RolloutGroup {
        let problem = Problem::new("g", 7, 1, 4, vec![Op::Add(1), Op::Mul(2)], 5).unwrap();
        let rollouts: Vec<_> = (0..k).map(|i| rollout("g", vec![1, 1], i < solved, 3)).collect();
        RolloutGroup::new(problem, rollouts, 0.8).unwrap()
    }

    #[test]
    fn length_penalty_examples() {
        assert_eq!(length_penalty(7, 10, 0.8).unwrap(), 0.0);
        assert!((length_penalty(9, 10, 0.8).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(length_penalty(10, 10, 0.8).unwrap(), -1.0);
        assert_eq!(length_penalty(8, 10, 0.8).unwrap(), 0.0);
        assert!(length_penalty(11, 10, 0.8).is_err());
    }

    #[test]
    fn half_filter_boundaries() {
        let kept = reinforce_half_filter(vec![group(4, 8), group(5, 8), group(0, 8)]);
        let rates: Vec<f64> = kept.iter().map(RolloutGroup::solve_rate).collect();
        assert_eq!(rates, vec![0.5, 0.0]);
        let again = reinforce_half_filter(kept.clone());
        assert_eq!(again, kept);
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantage(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
        for x in &a[1..] {
            assert!((x + 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
        assert_eq!(
            group_advantage(&[1.0, 1.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 1.0, -1.0, -1.0]
        );
        assert_eq!(group_advantage(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(group_advantage(&[1.0]), Err(ObjectiveError::GroupTooSmall(1))));
    }

    #[test]
    fn zero_rewards_leave_params() {
        let mut params = SolverParams::zeros(5);
        let mut adam = Adam::new(params.table.as_slice().len());
        let g = group(0, 4);
        let stats = reinforce_update(&mut params, &mut adam, &[g], &UpdateConfig::default()).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert!(params.table.as_slice().iter().all(|w| *w == 0.0));
        assert_eq!(adam.steps, 1);
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let config = UpdateConfig::default();
        let mut adam = Adam::new(2);
        let mut params = vec![0.0, 0.0];
        let mut grad = vec![3.0, 4.0];
        let stats = adam.step(&mut params, &mut grad, &config).unwrap();
        assert!(stats.clipped);
        assert_eq!(stats.grad_norm, 5.0);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((grad[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::new(1);
        let mut params = vec![0.0];
        let before = adam.clone();
        let err = adam.step(&mut params, &mut [f64::NAN], &UpdateConfig::default());
        assert!(matches!(err, Err(ObjectiveError::NonFiniteGradient(_))));
        assert_eq!(adam, before);
    }

    #[test]
    fn rewarded_trace_gains_probability() {
        let g = group(1, 1);
        let mut params = SolverParams::zeros(5);
        let (before, _) = solver_logprob_grad(&params, &g.problem, &[1, 1]).unwrap();
        let mut adam = Adam::new(params.table.as_slice().len());
        let config = UpdateConfig {
            learning_rate: 1e-3,
            ..UpdateConfig::default()
        };
        reinforce_update(&mut params, &mut adam, std::slice::from_ref(&g), &config).unwrap();
        let (after, _) = solver_logprob_grad(&params, &g.problem, &[1, 1]).unwrap();
        assert!(after > before);
    }

    #[test]
    fn cispo_clip_bounds() {
        let config = UpdateConfig::default();
        let (low, high) = (1.0 - config.eps_low, 1.0 + config.eps_high);
        assert_eq!(5.0f64.clamp(low, high), 4.0);
        assert_eq!(0.3f64.clamp(low, high), 0.3);
    }

    #[test]
    fn cispo_rejects_stored_mismatch() {
        let mut g = group(1, 2);
        g.rollouts[0].logprobs.pop();
        let params = SolverParams::zeros(5);
        let err = cispo_grad(&params, &params, &[g], &UpdateConfig::default());
        assert!(matches!(err, Err(ObjectiveError::TokenMismatch { .. })));
    }

    #[test]
    fn ei_selection_rules() {
        let mk = |id: &str| Problem::new(id, 5, 0, 1, vec![Op::Add(1)], 3).unwrap();
        let problems = vec![mk("a"), mk("b"), mk("c")];
        let mut state = ExpertIterationState::default();
        state.solve_counts.insert("a".into(), 16);
        state.solve_counts.insert("b".into(), 15);
        state.proofs.push((6, rollout("b", vec![0], true, 2)));
        state.proofs.push((8, rollout("c", vec![0], true, 2)));
        state.proofs.push((10, rollout("c", vec![0], true, 2)));
        let (rolls, train) = ei_select(&problems, &state, 10);
        assert_eq!(rolls, vec![1, 2]);
        assert_eq!(train.len(), 2);
        // four iterations back falls out of the window
        let (_, train) = ei_select(&problems, &state, 11);
        assert_eq!(train.len(), 1);
    }

    #[test]
    fn ei_record_prunes_window() {
        let mut state = ExpertIterationState::default();
        state.record(1, &[rollout("a", vec![0], true, 2), rollout("a", vec![], false, 1)]);
        state.record(4, &[rollout("b", vec![0], true, 2)]);
        assert_eq!(state.solve_counts["a"], 1);
        assert_eq!(state.proofs.len(), 1);
    }
}
