mod common;

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use common::*;
use sgs_core::domain::{
    brute_force, generate_dataset, reachability, verify, DatasetConfig, Op, Problem, ProblemSet, Solution,
};
use sgs_core::fabric::{DrainOptions, Fabric, TaskKind, TaskSpec, WorkerScript};
use sgs_core::guide::{combine_normalize, guide_score, normalize_min_max, solve_rate_rewards, MAX_GUIDE_SCORE};
use sgs_core::objectives::{group_advantage, length_penalty};
use sgs_core::orchestrator::{
    decode_checkpoint, encode_checkpoint, run_iteration, DatasetRef, InProcessExecutor, Mode, RunConfig, RunState,
};
use sgs_core::policy::{conjecture, sample_trace, solver_sample, solver_token_logprobs, ParamTable, SolverParams};
use sgs_core::scaling::{predict, FitResult};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #[test]
    fn verify_matches_replay(seed: u64, extra in 0usize..3) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, "p");
        let len = r.gen_range(0..=problem.budget as usize + extra);
        // indices may run one past the op list
        let steps: Vec<usize> = (0..len).map(|_| r.gen_range(0..=problem.ops.len())).collect();
        let got = verify(&problem, &Solution::new(steps.clone())).ok();
        prop_assert_eq!(got, replay_accepts(&problem, &steps));
    }

    #[test]
    fn oracle_matches_bfs(seed: u64) {
        let problem = random_problem(&mut rng(seed), "p");
        let report = brute_force(&problem).unwrap();
        prop_assert_eq!(report.min_length, bfs_min_length(&problem));
        prop_assert_eq!(report.solvable, report.min_length.is_some());
        prop_assert_eq!(report.solvable, report.min_solutions > 0);
        let uncapped = Problem { budget: 12, ..problem.clone() };
        let d = reachability(problem.modulus, &problem.ops, problem.start).unwrap().distance(problem.target);
        // every residue is within m - 1 steps, so budget 12 covers m <= 13 exactly
        if problem.modulus <= 13 {
            prop_assert_eq!(d, bfs_min_length(&uncapped));
        }
        prop_assert_eq!(d.filter(|&d| d <= problem.budget), report.min_length);
    }

    #[test]
    fn trace_probability_is_product_of_steps(seed: u64, scale in 0.0f64..6.0) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, "p");
        let params = random_solver(&mut r, 5, scale);
        let trace = sample_trace(&params, &problem, &mut r);
        let n = problem.ops.len();
        let mut value = problem.start;
        let mut product = 1.0;
        let mut actions = trace.steps.clone();
        if actions.len() < problem.budget as usize {
            actions.push(n);
        }
        prop_assert_eq!(actions.len(), trace.logprobs.len());
        for (i, &a) in actions.iter().enumerate() {
            let probs = params.action_probs(&problem, value, problem.budget - i as u32);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            product *= probs[a];
            let h = trace.entropies[i];
            prop_assert!(h >= -1e-12 && h <= ((n + 1) as f64).ln() + 1e-12);
            if a < n {
                value = problem.ops[a].apply(value, problem.modulus);
            }
        }
        let total: f64 = trace.logprobs.iter().sum();
        prop_assert!((total.exp() - product).abs() <= 1e-12 * product.max(1e-300) + 1e-300);
        let recomputed = solver_token_logprobs(&params, &problem, &trace.steps).unwrap();
        prop_assert_eq!(recomputed, trace.logprobs);
    }

    #[test]
    fn conjectures_stay_in_range(seed: u64, conditioned: bool) {
        let mut r = rng(seed);
        let target = random_problem(&mut r, "t");
        let params = random_conjecturer(&mut r, 4, 3.0);
        let s = conjecture(&params, &target, conditioned, &mut r);
        prop_assert!(s.problem.validate().is_ok());
        prop_assert!(s.chosen_target < target.modulus);
        prop_assert!((1..=target.budget).contains(&s.chosen_budget));
        prop_assert_eq!((s.problem.modulus, s.problem.start), (target.modulus, target.start));
        prop_assert_eq!(&s.problem.ops, &target.ops);
        prop_assert!(s.logprob <= 0.0);
    }

    #[test]
    fn guide_score_bounds(seed: u64) {
        let mut r = rng(seed);
        let target = random_problem(&mut r, "t");
        let synthetic = Problem {
            id: "s".into(),
            target: r.gen_range(0..target.modulus),
            budget: r.gen_range(1..=12),
            ..target.clone()
        };
        let g = guide_score(&target, &synthetic);
        prop_assert!(g.score <= MAX_GUIDE_SCORE);
        prop_assert!(g.relevance <= 5 && g.redundancy <= 1 && g.complexity <= 4);
        if g.complexity >= 3 {
            prop_assert_eq!(g.score, 0);
        }
        prop_assert_eq!(guide_score(&target, &target.clone()).score, 0);
    }

    #[test]
    fn solve_rate_reward_ranking(solved in prop::collection::vec(0usize..=8, 0..40)) {
        let ids: Vec<String> = (0..solved.len()).map(|i| format!("t{i:02}")).collect();
        let batch: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(solved.iter().map(|&s| s as f64 / 8.0)).collect();
        let rewards = solve_rate_rewards(&batch);
        let limit = 7 * batch.len() / 10;
        prop_assert!(rewards.iter().filter(|&&r| r > 0.0).count() <= limit);
        for (i, (&(_, s), &r)) in batch.iter().zip(&rewards).enumerate() {
            prop_assert!((0.0..=7.0 / 8.0).contains(&r));
            if s == 0.0 {
                prop_assert_eq!(r, 0.0);
            }
            if r > 0.0 {
                prop_assert_eq!(r, 1.0 - s);
                // rewarded entries never rank above an easier unrewarded one
                let easier_rewarded = batch.iter().zip(&rewards).filter(|&(&(_, t), &q)| t < s && q == 0.0 && t > 0.0).count();
                prop_assert_eq!(easier_rewarded, 0, "entry {}", i);
            }
        }
        let guides: Vec<u32> = (0..batch.len() as u32).map(|i| i % 9).collect();
        for c in combine_normalize(&rewards, &guides) {
            prop_assert!((0.0..=7.0).contains(&c.r_synth));
            prop_assert!((0.0..=1.0).contains(&c.normalized));
        }
    }

    #[test]
    fn min_max_normalization(raw in prop::collection::vec(-1e3f64..1e3, 0..30)) {
        let out = normalize_min_max(&raw);
        prop_assert_eq!(out.len(), raw.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let distinct = raw.iter().any(|&v| v != raw[0]);
        if distinct {
            prop_assert!(out.contains(&0.0));
            prop_assert!(out.contains(&1.0));
        } else {
            prop_assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-2.0f64..1.0, 2..16)) {
        let adv = group_advantage(&rewards).unwrap();
        let k = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / k;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-9 || adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn length_penalty_is_bounded_and_monotone(budget in 1u32..=12, window in 0.05f64..0.95) {
        let mut last = 0.0;
        for length in 0..=budget as usize {
            let p = length_penalty(length, budget, window).unwrap();
            prop_assert!((-1.0..=0.0).contains(&p));
            prop_assert!(p <= last);
            last = p;
        }
        prop_assert_eq!(length_penalty(budget as usize, budget, window).unwrap(), -1.0);
        prop_assert!(length_penalty(budget as usize + 1, budget, window).is_err());
    }

    #[test]
    fn sigmoid_is_monotone_between_r0_and_a(
        r0 in 0.0f64..0.5, gap in 0.01f64..0.5, lmid in 2.0f64..8.0, b in 0.1f64..4.0, lc in 0.0f64..10.0
    ) {
        let f = FitResult { r0, asymptote: r0 + gap, c_mid: 10f64.powf(lmid), steepness: b, sse: 0.0, n_points: 0, degenerate: false };
        let (c1, c2) = (10f64.powf(lc), 10f64.powf(lc + 0.1));
        let (y1, y2) = (predict(&f, c1), predict(&f, c2));
        prop_assert!(y1 <= y2);
        prop_assert!(y1 >= r0 - 1e-12 && y2 <= r0 + gap + 1e-12);
        prop_assert!((predict(&f, f.c_mid) - (2.0 * r0 + gap) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trips(seed: u64) {
        let mut r = rng(seed);
        let problems: Vec<Problem> = (0..r.gen_range(0..6)).map(|i| random_problem(&mut r, &format!("p{i}"))).collect();
        let set = ProblemSet::new(seed, problems).unwrap();
        prop_assert_eq!(ProblemSet::from_json(&set.to_json()).unwrap(), set);
        let params = random_solver(&mut r, 2, 1e3);
        let table = ParamTable::from_json(&params.table.to_json()).unwrap();
        prop_assert_eq!(SolverParams::from_table(table).unwrap(), params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fabric_records_each_result_once(seed: u64) {
        let mut r = rng(seed);
        let pool: Vec<WorkerScript> = (0..r.gen_range(1..6))
            .map(|i| WorkerScript {
                // keep one reliable worker so the batch can finish
                die_after: (i > 0 && r.gen_bool(0.3)).then(|| r.gen_range(0..10)),
                delay: Duration::from_millis(r.gen_range(0..3)),
                duplicate_reports: r.gen_bool(0.5),
            })
            .collect();
        let n = r.gen_range(1..120);
        let tasks: Vec<TaskSpec> = (0..n)
            .map(|i| TaskSpec { id: format!("t{i}"), kind: TaskKind::Generation, payload: json!(i), seed: i as u64 })
            .collect();
        let fabric = Fabric::new(Duration::from_millis(15));
        let report = fabric
            .drain(tasks, &pool, &|a| json!(a.seed * 3), &DrainOptions::default())
            .unwrap();
        fabric.check_invariants().unwrap();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (task, _) in &report.accepted {
            *seen.entry(task.as_str()).or_default() += 1;
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(seen.values().all(|&c| c == 1));
        let expected: BTreeMap<String, serde_json::Value> = (0..n).map(|i| (format!("t{i}"), json!(i as u64 * 3))).collect();
        prop_assert_eq!(report.results, expected);
    }

    #[test]
    fn checkpoint_round_trip_mid_run(seed: u64, iterations in 0u64..4, mode_index in 0usize..7) {
        let modes = [Mode::Sgs, Mode::NoGuide, Mode::FrozenConjecturer, Mode::NoConditioning, Mode::RlReinforceHalf, Mode::RlCispo, Mode::RlEi];
        let data = DatasetConfig { size: 10, modulus: (5, 9), budget: (3, 6), seed, ..DatasetConfig::default() };
        let set = generate_dataset(&data).unwrap();
        let mut config = RunConfig::new(modes[mode_index], DatasetRef::Generate(data), 4, seed);
        config.solver_hash_bits = 5;
        config.conjecturer_hash_bits = 4;
        let mut state = RunState::new(&config);
        for _ in 0..iterations {
            run_iteration(&mut state, &config, &set, &mut InProcessExecutor).unwrap();
        }
        let hash = config.hash(&set.to_json());
        let bytes = encode_checkpoint(&state, &hash);
        prop_assert_eq!(decode_checkpoint(&bytes, Some(&hash)).unwrap(), state);
    }
}

#[test]
fn sampled_trace_frequencies_match_probabilities() {
    let problem = Problem::new("f", 7, 1, 4, vec![Op::Add(1), Op::Mul(3), Op::Add(5)], 3).unwrap();
    let mut r = rng(77);
    let params = random_solver(&mut r, 4, 1.0);
    let draws = 100_000;
    let mut counts: HashMap<Vec<usize>, (usize, f64)> = HashMap::new();
    for _ in 0..draws {
        let t = sample_trace(&params, &problem, &mut r);
        let lp: f64 = t.logprobs.iter().sum();
        counts.entry(t.steps).or_insert((0, lp)).0 += 1;
    }
    let mut mass = 0.0;
    for (steps, (count, lp)) in &counts {
        let p = lp.exp();
        mass += p;
        let freq = *count as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * se + 1e-9,
            "{steps:?}: freq {freq} vs p {p} (se {se})"
        );
    }
    // every trace of length <= 3 over 3 ops: 1 + 3 + 9 + 27
    assert_eq!(counts.len(), 40);
    assert!((mass - 1.0).abs() < 1e-9);
}

#[test]
fn verified_rollouts_respect_oracle_minimum() {
    let mut r = rng(5);
    for i in 0..300 {
        let problem = random_problem(&mut r, &format!("p{i}"));
        let min = brute_force(&problem).unwrap().min_length;
        let params = random_solver(&mut r, 6, 2.0);
        let rollout = solver_sample(&params, &problem, &mut r);
        if rollout.verified {
            assert!(rollout.steps.len() as u32 >= min.unwrap());
        }
    }
}
