//! Rubric Guide and the Conjecturer reward pipeline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{canonical_form, reachability, Op, Problem};

pub const MAX_GUIDE_SCORE: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideBreakdown {
    /// 0..=5
    pub relevance: u32,
    /// 0 or 1
    pub redundancy: u32,
    /// 0..=4
    pub complexity: u32,
    /// Combined score, 0..=8
    pub score: u32,
}

/// Combines the three sub-scores; high complexity zeroes the result.
pub fn combine_scores(relevance: u32, redundancy: u32, complexity: u32) -> u32 {
    if complexity >= 3 {
        return 0;
    }
    let total = relevance as i64 + (2 - complexity as i64) + (1 - redundancy as i64);
    total.max(0) as u32
}

fn relevance(target: &Problem, synthetic: &Problem) -> u32 {
    if canonical_form(synthetic) == canonical_form(target) {
        return 0;
    }
    let r_mod = u32::from(synthetic.modulus == target.modulus);

    let target_ops: BTreeSet<Op> = target.ops.iter().copied().collect();
    let synthetic_ops: BTreeSet<Op> = synthetic.ops.iter().copied().collect();
    let shared = target_ops.intersection(&synthetic_ops).count();
    let r_ops = (2.0 * shared as f64 / target_ops.len() as f64).round() as u32;

    r_mod + r_ops + target_progress(target, synthetic)
}

/// 2 when the synthetic target lies on a shortest path to the real one,
/// 1 when it is strictly closer to the real target than the start is.
fn target_progress(target: &Problem, synthetic: &Problem) -> u32 {
    let (m, ops) = (target.modulus, &target.ops);
    let waypoint = synthetic.target;
    if waypoint >= m {
        return 0;
    }
    let from_start = reachability(m, ops, target.start).expect("validated target");
    let from_waypoint = reachability(m, ops, waypoint).expect("residue below modulus");
    let direct = from_start.distance(target.target);
    let to_waypoint = from_start.distance(waypoint);
    let onward = from_waypoint.distance(target.target);
    match (direct, to_waypoint, onward) {
        (Some(d), Some(a), Some(b)) if a + b == d => 2,
        (Some(d), _, Some(b)) if b < d => 1,
        (None, _, Some(_)) => 1,
        _ => 0,
    }
}

fn redundancy(synthetic: &Problem) -> u32 {
    let mut seen = BTreeSet::new();
    let redundant = synthetic.ops.iter().any(|op| op.is_identity() || !seen.insert(*op));
    u32::from(redundant)
}

fn complexity(target: &Problem, synthetic: &Problem) -> u32 {
    let (l, lt) = (target.budget, synthetic.budget);
    if lt <= l.div_ceil(2) {
        0
    } else if lt <= l {
        1
    } else if lt <= 2 * l {
        2
    } else if lt <= 4 * l {
        3
    } else {
        4
    }
}

/// Scores a synthetic problem against the target it was conjectured for.
pub fn guide_score(target: &Problem, synthetic: &Problem) -> GuideBreakdown {
    let identical = canonical_form(synthetic) == canonical_form(target);
    let relevance = relevance(target, synthetic);
    let redundancy = redundancy(synthetic);
    let complexity = complexity(target, synthetic);
    let score = if identical {
        0
    } else {
        combine_scores(relevance, redundancy, complexity)
    };
    GuideBreakdown {
        relevance,
        redundancy,
        complexity,
        score,
    }
}

/// Number of batch entries eligible for a solve-rate reward: `floor(0.7 n)`.
pub fn qualifying_count(n: usize) -> usize {
    7 * n / 10
}

/// Solve-rate reward for each `(id, solve rate)` entry, aligned with input.
///
/// The `floor(0.7 n)` lowest solve rates qualify (ties broken by id); a
/// qualifying entry with a nonzero rate earns `1 - s`, everything else 0.
pub fn solve_rate_rewards(batch: &[(&str, f64)]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        batch[a]
            .1
            .total_cmp(&batch[b].1)
            .then_with(|| batch[a].0.cmp(batch[b].0))
    });
    let mut rewards = vec![0.0; batch.len()];
    for &i in order.iter().take(qualifying_count(batch.len())) {
        let s = batch[i].1;
        if s != 0.0 {
            rewards[i] = 1.0 - s;
        }
    }
    rewards
}

/// Batch min-max normalization; a constant batch maps to all zeros.
pub fn normalize_min_max(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max == min {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - min) / (max - min)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjecturerReward {
    pub r_solve: f64,
    pub r_guide: u32,
    pub r_synth: f64,
    pub normalized: f64,
}

/// Products `R_solve * R_guide`, normalized within the batch.
pub fn combine_normalize(r_solve: &[f64], r_guide: &[u32]) -> Vec<ConjecturerReward> {
    assert_eq!(r_solve.len(), r_guide.len(), "reward vectors must align");
    let raw: Vec<f64> = r_solve.iter().zip(r_guide).map(|(s, g)| s * f64::from(*g)).collect();
    let normalized = normalize_min_max(&raw);
    r_solve
        .iter()
        .zip(r_guide)
        .zip(raw.iter().zip(normalized))
        .map(|((&r_solve, &r_guide), (&r_synth, normalized))| ConjecturerReward {
            r_solve,
            r_guide,
            r_synth,
            normalized,
        })
        .collect()
}
