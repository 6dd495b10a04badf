#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;
use sgs_core::domain::{Op, Problem};
use sgs_core::policy::{ConjecturerParams, SolverParams};

pub fn random_op<R: Rng>(rng: &mut R, modulus: u32) -> Op {
    let c = rng.gen_range(0..modulus);
    if rng.gen_bool(0.5) {
        Op::Add(c)
    } else {
        Op::Mul(c)
    }
}

pub fn random_problem<R: Rng>(rng: &mut R, id: &str) -> Problem {
    let modulus = rng.gen_range(2..=23);
    let ops = (0..rng.gen_range(1..=4)).map(|_| random_op(rng, modulus)).collect();
    Problem::new(
        id,
        modulus,
        rng.gen_range(0..modulus),
        rng.gen_range(0..modulus),
        ops,
        rng.gen_range(1..=8),
    )
    .unwrap()
}

pub fn fill<R: Rng>(values: &mut [f64], rng: &mut R, scale: f64) {
    for v in values {
        *v = rng.gen_range(-scale..=scale);
    }
}

pub fn random_solver<R: Rng>(rng: &mut R, bits: u32, scale: f64) -> SolverParams {
    let mut params = SolverParams::zeros(bits);
    fill(params.table.as_mut_slice(), rng, scale);
    params
}

pub fn random_conjecturer<R: Rng>(rng: &mut R, bits: u32, scale: f64) -> ConjecturerParams {
    let mut params = ConjecturerParams::zeros(bits);
    fill(params.target_head.as_mut_slice(), rng, scale);
    fill(params.budget_head.as_mut_slice(), rng, scale);
    params
}

/// Step indices uniformly drawn, length at most the budget.
pub fn random_steps<R: Rng>(rng: &mut R, problem: &Problem) -> Vec<usize> {
    let len = rng.gen_range(0..=problem.budget as usize);
    (0..len).map(|_| rng.gen_range(0..problem.ops.len())).collect()
}

/// Replays with plain integer arithmetic. `None` for an invalid op index.
pub fn replay_accepts(problem: &Problem, steps: &[usize]) -> Option<bool> {
    let m = u64::from(problem.modulus);
    let mut v = u64::from(problem.start);
    for &i in steps {
        v = match *problem.ops.get(i)? {
            Op::Add(c) => (v + u64::from(c)) % m,
            Op::Mul(c) => (v * u64::from(c)) % m,
        };
    }
    Some(steps.len() <= problem.budget as usize && v == u64::from(problem.target))
}

/// Shortest path from start to target by BFS, capped by the budget.
pub fn bfs_min_length(problem: &Problem) -> Option<u32> {
    let m = problem.modulus as usize;
    let mut dist = vec![u32::MAX; m];
    dist[problem.start as usize] = 0;
    let mut queue = VecDeque::from([problem.start as usize]);
    while let Some(v) = queue.pop_front() {
        for op in &problem.ops {
            let w = match *op {
                Op::Add(c) => (v + c as usize) % m,
                Op::Mul(c) => (v * c as usize) % m,
            };
            if dist[w] == u32::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    let d = dist[problem.target as usize];
    (d <= problem.budget).then_some(d)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
