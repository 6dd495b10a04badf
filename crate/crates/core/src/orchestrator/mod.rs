//! The self-play training loop: per-iteration batch assembly, conjecturing,
//! rollouts, Solver and Conjecturer updates, metrics and checkpoints.

mod checkpoint;
mod config;
mod executor;
mod experiment;

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, CheckpointError};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    known_keys, ConfigErrors, CountingPolicy, DatasetRef, Mode, RunConfig, SolverObjective, RUN_CONFIG_SCHEMA,
};
pub use executor::{
    execute_assignment, new_param_store, FabricExecutor, InProcessExecutor, ParamStore, RolloutExecutor, RolloutJob,
    RolloutOutcome,
};
pub use experiment::{
    checkpoint_path, parse_metrics, run_experiment, ExperimentSummary, CHECKPOINT_PREFIX, METRICS_FILE,
};

use crate::domain::{Problem, ProblemSet};
use crate::fabric::FabricError;
use crate::guide::{combine_normalize, guide_score, solve_rate_rewards, ConjecturerReward, GuideBreakdown};
use crate::hashing::derive_seed;
use crate::objectives::{
    cispo_update, ei_select, reinforce_half_filter, reinforce_update, Adam, ExpertIterationState, ObjectiveError,
    RolloutGroup, UpdateStats,
};
use crate::policy::{
    conjecture, conjecture_logprob_grad, mean_entropy, ConjecturerParams, Rollout, SolverParams, SyntheticProblem,
};

/// Structural verifier failures tolerated per iteration, as a fraction of calls.
pub const VERIFIER_ERROR_BUDGET: f64 = 0.01;

const TAG_CONJECTURER: u64 = 0xC0;
const TAG_TARGET: u64 = 0x7A;
const TAG_SYNTHETIC: u64 = 0x5E;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("verifier failed structurally on {errors} of {calls} calls (budget 1%); first: {first}")]
    VerifierBudget { errors: usize, calls: usize, first: String },
    #[error("executor returned {got} outcomes for {expected} jobs")]
    ExecutorMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error("metrics file {path}: {message}")]
    Metrics { path: String, message: String },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything that evolves across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// Completed iterations.
    pub iteration: u64,
    /// Ids of target problems with at least one verified rollout ever.
    pub solved: BTreeSet<String>,
    pub solver: SolverParams,
    pub conjecturer: ConjecturerParams,
    pub solver_adam: Adam,
    pub conjecturer_adam: Adam,
    /// Cumulative generation count `C`.
    pub generations: u64,
    /// Drives Conjecturer sampling; rollouts use per-task seeds instead.
    pub rng: ChaCha8Rng,
    pub ei: ExpertIterationState,
}

impl RunState {
    pub fn new(config: &RunConfig) -> Self {
        let solver = SolverParams::zeros(config.solver_hash_bits);
        let conjecturer = ConjecturerParams::zeros(config.conjecturer_hash_bits);
        RunState {
            iteration: 0,
            solved: BTreeSet::new(),
            solver_adam: Adam::new(solver.table.as_slice().len()),
            conjecturer_adam: Adam::new(conjecturer.len()),
            solver,
            conjecturer,
            generations: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, TAG_CONJECTURER])),
            ei: ExpertIterationState::default(),
        }
    }
}

/// One JSONL metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationMetrics {
    pub iter: u64,
    pub generations: u64,
    pub cum_solve_rate: f64,
    pub pass_at_k: f64,
    pub entropy: f64,
    pub r_synth_mean: f64,
    pub r_guide_mean: f64,
    pub r_solve_mean: f64,
    pub synthetic_trained: usize,
    /// Synthetic problems by verified-rollout count, `k + 1` bins.
    pub histogram: Vec<usize>,
}

/// Reward breakdown for one synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub synthetic: SyntheticProblem,
    pub solved: usize,
    pub reward: ConjecturerReward,
    /// `None` in modes that do not consult the Guide.
    pub guide: Option<GuideBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub metrics: IterationMetrics,
    pub generation_delta: u64,
    pub solver_stats: UpdateStats,
    pub conjecturer_stats: Option<UpdateStats>,
    pub synthetics: Vec<SyntheticRecord>,
    pub verifier_errors: usize,
    pub rollouts: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One pass of the self-play loop over the full dataset.
///
/// The state is only replaced when the iteration succeeds.
pub fn run_iteration(
    state: &mut RunState,
    config: &RunConfig,
    dataset: &ProblemSet,
    executor: &mut dyn RolloutExecutor,
) -> Result<IterationReport, OrchestratorError> {
    let mut next = state.clone();
    let t = state.iteration + 1;
    let k = config.k;
    let mode = config.mode;
    let objective = config.objective();
    let problems = &dataset.problems;

    // (1) batch and (2) solved/unsolved split
    let batch: Vec<usize> = if objective == SolverObjective::ExpertIteration {
        ei_select(problems, &state.ei, t).0
    } else {
        (0..problems.len()).collect()
    };
    let unsolved: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| !state.solved.contains(&problems[i].id))
        .collect();

    // (3) one synthetic problem per unsolved target
    let synthetics: Vec<(usize, SyntheticProblem)> = if mode.synthetic() {
        unsolved
            .iter()
            .map(|&i| {
                let s = conjecture(&state.conjecturer, &problems[i], mode.conditioned(), &mut next.rng);
                (i, s)
            })
            .collect()
    } else {
        Vec::new()
    };

    // (4) k rollouts per problem, verified
    let mut jobs = Vec::with_capacity((batch.len() + synthetics.len()) * k);
    for &i in &batch {
        for j in 0..k {
            jobs.push(RolloutJob {
                problem: problems[i].clone(),
                seed: derive_seed(&[config.seed, t, TAG_TARGET, i as u64, j as u64]),
            });
        }
    }
    for (i, s) in &synthetics {
        for j in 0..k {
            jobs.push(RolloutJob {
                problem: s.problem.clone(),
                seed: derive_seed(&[config.seed, t, TAG_SYNTHETIC, *i as u64, j as u64]),
            });
        }
    }
    let outcomes = executor.execute(&state.solver, t, &jobs)?;
    if outcomes.len() != jobs.len() {
        return Err(OrchestratorError::ExecutorMismatch {
            expected: jobs.len(),
            got: outcomes.len(),
        });
    }
    let errors: Vec<&RolloutOutcome> = outcomes.iter().filter(|o| o.verified.is_none()).collect();
    if errors.len() as f64 > VERIFIER_ERROR_BUDGET * outcomes.len() as f64 {
        return Err(OrchestratorError::VerifierBudget {
            errors: errors.len(),
            calls: outcomes.len(),
            first: errors[0].error.clone().unwrap_or_default(),
        });
    }
    let verifier_errors = errors.len();

    let mut groups = Vec::with_capacity(batch.len() + synthetics.len());
    let problem_list = batch
        .iter()
        .map(|&i| &problems[i])
        .chain(synthetics.iter().map(|(_, s)| &s.problem));
    for (g, problem) in problem_list.enumerate() {
        let rollouts: Vec<Rollout> = outcomes[g * k..(g + 1) * k]
            .iter()
            .map(|o| Rollout {
                problem_id: problem.id.clone(),
                steps: o.trace.steps.clone(),
                logprobs: o.trace.logprobs.clone(),
                entropies: o.trace.entropies.clone(),
                verified: o.verified == Some(true),
            })
            .collect();
        groups.push(RolloutGroup::new(problem.clone(), rollouts, config.length_window)?);
    }
    let synthetic_groups = &groups[batch.len()..];

    // (5) Solver update
    let solver_cfg = config.solver_update();
    let training: Vec<RolloutGroup> = match objective {
        SolverObjective::ReinforceHalf => reinforce_half_filter(groups.clone()),
        SolverObjective::Cispo => groups.clone(),
        SolverObjective::ExpertIteration => {
            let target_rollouts: Vec<Rollout> = groups[..batch.len()]
                .iter()
                .flat_map(|g| g.rollouts.iter().cloned())
                .collect();
            next.ei.record(t, &target_rollouts);
            let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
            let (_, proofs) = ei_select(problems, &next.ei, t);
            let mut grouped: Vec<(&Problem, Vec<Rollout>)> = Vec::new();
            let mut slot: HashMap<&str, usize> = HashMap::new();
            for proof in proofs {
                let problem = by_id[proof.problem_id.as_str()];
                let at = *slot.entry(problem.id.as_str()).or_insert_with(|| {
                    grouped.push((problem, Vec::new()));
                    grouped.len() - 1
                });
                grouped[at].1.push(proof.clone());
            }
            grouped
                .into_iter()
                .map(|(p, r)| RolloutGroup::new(p.clone(), r, config.length_window))
                .collect::<Result<_, _>>()?
        }
    };
    let chunk = training.len().div_ceil(config.minibatches).max(1);
    let params_old = state.solver.clone();
    let mut solver_stats = UpdateStats::default();
    let mut clipped_tokens = 0.0;
    for slice in training.chunks(chunk) {
        let stats = match objective {
            SolverObjective::Cispo => {
                cispo_update(&mut next.solver, &params_old, &mut next.solver_adam, slice, &solver_cfg)?
            }
            _ => reinforce_update(&mut next.solver, &mut next.solver_adam, slice, &solver_cfg)?,
        };
        clipped_tokens += stats.clipped_token_fraction * slice.len() as f64;
        solver_stats.grad_norm = stats.grad_norm;
        solver_stats.clipped |= stats.clipped;
    }
    if training.is_empty() {
        // keep optimizer time advancing even when nothing is trainable
        solver_stats = reinforce_update(&mut next.solver, &mut next.solver_adam, &[], &solver_cfg)?;
    }
    solver_stats.retained_groups = training.len();
    solver_stats.clipped_token_fraction = if training.is_empty() {
        0.0
    } else {
        clipped_tokens / training.len() as f64
    };

    // (6) Conjecturer rewards and update
    let rate_batch: Vec<(&str, f64)> = synthetics
        .iter()
        .zip(synthetic_groups)
        .map(|((_, s), g)| (s.target_id.as_str(), g.solve_rate()))
        .collect();
    let r_solve = solve_rate_rewards(&rate_batch);
    let guides: Vec<Option<GuideBreakdown>> = synthetics
        .iter()
        .map(|(i, s)| mode.uses_guide().then(|| guide_score(&problems[*i], &s.problem)))
        .collect();
    let multipliers: Vec<u32> = guides.iter().map(|g| g.map_or(1, |g| g.score)).collect();
    let rewards = combine_normalize(&r_solve, &multipliers);
    let conjecturer_stats = if mode.trains_conjecturer() && !synthetics.is_empty() {
        let mut grad = vec![0.0; state.conjecturer.len()];
        let scale = 1.0 / synthetics.len() as f64;
        for ((i, s), reward) in synthetics.iter().zip(&rewards) {
            if reward.normalized == 0.0 {
                continue;
            }
            let (_, g) = conjecture_logprob_grad(
                &state.conjecturer,
                &problems[*i],
                s.conditioned,
                s.chosen_target,
                s.chosen_budget,
            )
            .map_err(ObjectiveError::from)?;
            g.accumulate_into(&mut grad, reward.normalized * scale);
        }
        let cfg = config.conjecturer_update();
        let mut flat: Vec<f64> = next
            .conjecturer
            .target_head
            .as_slice()
            .iter()
            .chain(next.conjecturer.budget_head.as_slice())
            .copied()
            .collect();
        let stats = next.conjecturer_adam.step(&mut flat, &mut grad, &cfg)?;
        let split = next.conjecturer.target_head.as_slice().len();
        next.conjecturer
            .target_head
            .as_mut_slice()
            .copy_from_slice(&flat[..split]);
        next.conjecturer
            .budget_head
            .as_mut_slice()
            .copy_from_slice(&flat[split..]);
        Some(stats)
    } else {
        None
    };

    // (7) solved set and metrics
    let mut hits = 0usize;
    for (g, &i) in groups[..batch.len()].iter().zip(&batch) {
        if g.solved() > 0 {
            hits += 1;
            next.solved.insert(problems[i].id.clone());
        }
    }
    let mut histogram = vec![0usize; k + 1];
    for g in synthetic_groups {
        histogram[g.solved()] += 1;
    }
    let synthetic_trained = synthetic_groups
        .iter()
        .filter(|g| {
            let s = g.solved();
            match objective {
                SolverObjective::ReinforceHalf => s >= 1 && 2 * s <= k,
                SolverObjective::Cispo => s >= 1 && s < k,
                SolverObjective::ExpertIteration => false,
            }
        })
        .count();
    let all_rollouts: Vec<Rollout> = groups.iter().flat_map(|g| g.rollouts.iter().cloned()).collect();

    // (8) generation count
    let counting = config.counting;
    let mut delta = 0u64;
    if counting.solver_rollouts {
        delta += jobs.len() as u64;
    }
    if counting.conjecturer_samples {
        delta += synthetics.len() as u64;
    }
    if counting.guide_evaluations && mode.uses_guide() {
        delta += synthetics.len() as u64;
    }
    next.generations += delta;
    next.iteration = t;

    let metrics = IterationMetrics {
        iter: t,
        generations: next.generations,
        cum_solve_rate: if problems.is_empty() {
            0.0
        } else {
            next.solved.len() as f64 / problems.len() as f64
        },
        pass_at_k: if batch.is_empty() {
            0.0
        } else {
            hits as f64 / batch.len() as f64
        },
        entropy: mean_entropy(&all_rollouts).unwrap_or(0.0),
        r_synth_mean: mean(rewards.iter().map(|r| r.r_synth)),
        r_guide_mean: mean(guides.iter().flatten().map(|g| f64::from(g.score))),
        r_solve_mean: mean(r_solve.iter().copied()),
        synthetic_trained,
        histogram,
    };
    let records = synthetics
        .into_iter()
        .zip(synthetic_groups)
        .zip(rewards.into_iter().zip(guides))
        .map(|(((_, synthetic), g), (reward, guide))| SyntheticRecord {
            synthetic,
            solved: g.solved(),
            reward,
            guide,
        })
        .collect();
    *state = next;
    Ok(IterationReport {
        metrics,
        generation_delta: delta,
        solver_stats,
        conjecturer_stats,
        synthetics: records,
        verifier_errors,
        rollouts: jobs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{generate_dataset, DatasetConfig};

    fn small(mode: Mode) -> (RunConfig, ProblemSet) {
        let data = DatasetConfig {
            size: 12,
            modulus: (5, 11),
            budget: (3, 6),
            op_count: (2, 3),
            seed: 3,
            ..DatasetConfig::default()
        };
        let set = generate_dataset(&data).unwrap();
        let mut config = RunConfig::new(mode, DatasetRef::Generate(data), 4, 7);
        config.solver_hash_bits = 8;
        config.conjecturer_hash_bits = 6;
        (config, set)
    }

    #[test]
    fn rl_counts_only_rollouts() {
        let (config, set) = small(Mode::RlReinforceHalf);
        let mut state = RunState::new(&config);
        let report = run_iteration(&mut state, &config, &set, &mut InProcessExecutor).unwrap();
        assert_eq!(report.generation_delta, 12 * 8);
        assert!(report.synthetics.is_empty());
        assert_eq!(report.metrics.histogram, vec![0; 9]);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn one_synthetic_per_unsolved_target() {
        let (config, set) = small(Mode::Sgs);
        let mut state = RunState::new(&config);
        for _ in 0..3 {
            let unsolved = set.problems.iter().filter(|p| !state.solved.contains(&p.id)).count();
            let before = state.solved.clone();
            let report = run_iteration(&mut state, &config, &set, &mut InProcessExecutor).unwrap();
            assert_eq!(report.synthetics.len(), unsolved);
            assert_eq!(report.metrics.histogram.iter().sum::<usize>(), unsolved);
            assert_eq!(
                report.generation_delta,
                (12 + unsolved as u64) * 8 + 2 * unsolved as u64
            );
            assert!(state.solved.is_superset(&before));
            for r in &report.synthetics {
                assert!(r.guide.is_some());
                assert_eq!(r.reward.r_synth, r.reward.r_solve * f64::from(r.guide.unwrap().score));
            }
        }
    }

    #[test]
    fn no_guide_uses_solve_reward_only() {
        let (config, set) = small(Mode::NoGuide);
        let mut state = RunState::new(&config);
        let report = run_iteration(&mut state, &config, &set, &mut InProcessExecutor).unwrap();
        for r in &report.synthetics {
            assert!(r.guide.is_none());
            assert_eq!(r.reward.r_synth, r.reward.r_solve);
        }
        assert_eq!(report.metrics.r_guide_mean, 0.0);
    }

    #[test]
    fn frozen_conjecturer_never_moves() {
        let (config, set) = small(Mode::FrozenConjecturer);
        let mut state = RunState::new(&config);
        let initial = state.conjecturer.clone();
        for _ in 0..3 {
            run_iteration(&mut state, &config, &set, &mut InProcessExecutor).unwrap();
        }
        assert_eq!(state.conjecturer, initial);
    }

    #[test]
    fn all_solved_means_no_synthetics() {
        let (config, set) = small(Mode::Sgs);
        let mut state = RunState::new(&config);
        state.solved = set.problems.iter().map(|p| p.id.clone()).collect();
        let before = state.conjecturer.clone();
        let report = run_iteration(&mut state, &config, &set, &mut InProcessExecutor).unwrap();
        assert!(report.synthetics.is_empty());
        assert!(report.conjecturer_stats.is_none());
        assert_eq!(state.conjecturer, before);
    }

    struct Broken;

    impl RolloutExecutor for Broken {
        fn execute(
            &mut self,
            params: &SolverParams,
            version: u64,
            jobs: &[RolloutJob],
        ) -> Result<Vec<RolloutOutcome>, OrchestratorError> {
            let mut out = InProcessExecutor.execute(params, version, jobs)?;
            for o in out.iter_mut().step_by(50) {
                o.verified = None;
                o.error = Some("bad op index".into());
            }
            Ok(out)
        }
    }

    #[test]
    fn verifier_error_budget_aborts_without_touching_state() {
        let (config, set) = small(Mode::RlReinforceHalf);
        let mut state = RunState::new(&config);
        let before = state.clone();
        let err = run_iteration(&mut state, &config, &set, &mut Broken).unwrap_err();
        assert!(matches!(err, OrchestratorError::VerifierBudget { .. }));
        assert_eq!(state, before);
    }
}
