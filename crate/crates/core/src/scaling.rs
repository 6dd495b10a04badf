//! Bounded sigmoid scaling law for cumulative solve rate versus generations:
//!
//! `R(C) = R0 + (A - R0) / (1 + (C_mid / C)^steepness)`
//!
//! `R0` is pinned to an observed rate; `A`, `C_mid` and `steepness` are fit
//! by least squares with a multi-start Nelder-Mead search over
//! `(A, ln C_mid, ln steepness)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_FIT_POINTS: usize = 4;
/// Simplex spread on SSE at which a local descent stops.
pub const SSE_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_TRUNCATIONS: [f64; 3] = [0.1, 0.2, 0.3];

#[derive(Debug, Error, PartialEq)]
pub enum ScalingError {
    #[error("need at least {MIN_FIT_POINTS} points, have {0}")]
    TooFewPoints(usize),
    #[error("point {0}: generations must be positive and strictly increasing")]
    NotIncreasing(usize),
    #[error("point {0}: solve rate must be finite and within [0, 1]")]
    BadRate(usize),
    #[error("subsample keep fraction {0} must lie in (0, 1]")]
    BadKeep(f64),
    #[error("metrics line {line}: {message}")]
    Metrics { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub generations: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(rename = "R0")]
    pub r0: f64,
    #[serde(rename = "A")]
    pub asymptote: f64,
    #[serde(rename = "C_mid")]
    pub c_mid: f64,
    pub steepness: f64,
    pub sse: f64,
    pub n_points: usize,
    /// Flat data: `A = R0` and the other parameters are placeholders.
    #[serde(default)]
    pub degenerate: bool,
}

pub fn predict(fit: &FitResult, generations: f64) -> f64 {
    sigmoid(fit.r0, fit.asymptote, fit.c_mid.ln(), fit.steepness, generations.ln())
}

fn sigmoid(r0: f64, a: f64, ln_mid: f64, steepness: f64, ln_c: f64) -> f64 {
    // (C_mid / C)^B in log space; overflow to inf gives the R0 limit
    let ratio = (steepness * (ln_mid - ln_c)).exp();
    r0 + (a - r0) / (1.0 + ratio)
}

fn validate(points: &[CurvePoint]) -> Result<(), ScalingError> {
    for (i, p) in points.iter().enumerate() {
        if p.generations == 0 || (i > 0 && p.generations <= points[i - 1].generations) {
            return Err(ScalingError::NotIncreasing(i));
        }
        if !p.rate.is_finite() || !(0.0..=1.0).contains(&p.rate) {
            return Err(ScalingError::BadRate(i));
        }
    }
    Ok(())
}

/// Fits after dropping points below `c_min`.
///
/// With `recenter`, `R0` is the first retained point's rate; otherwise it is
/// the first observed rate of the whole curve.
pub fn fit(points: &[CurvePoint], c_min: u64, recenter: bool) -> Result<FitResult, ScalingError> {
    validate(points)?;
    let retained: Vec<CurvePoint> = points.iter().copied().filter(|p| p.generations >= c_min).collect();
    if retained.len() < MIN_FIT_POINTS {
        return Err(ScalingError::TooFewPoints(retained.len()));
    }
    let r0 = if recenter { retained[0].rate } else { points[0].rate };
    Ok(fit_pinned(&retained, r0))
}

struct Objective<'a> {
    ln_c: Vec<f64>,
    rates: &'a [f64],
    r0: f64,
}

impl Objective<'_> {
    fn asymptote(&self, raw: f64) -> f64 {
        raw.clamp(self.r0.min(1.0), 1.0)
    }

    fn sse(&self, x: &[f64; 3]) -> f64 {
        let a = self.asymptote(x[0]);
        let steepness = x[2].exp();
        let total: f64 = self
            .ln_c
            .iter()
            .zip(self.rates)
            .map(|(&lc, &r)| (r - sigmoid(self.r0, a, x[1], steepness, lc)).powi(2))
            .sum();
        if total.is_finite() {
            total
        } else {
            f64::MAX
        }
    }
}

fn fit_pinned(points: &[CurvePoint], r0: f64) -> FitResult {
    let rates: Vec<f64> = points.iter().map(|p| p.rate).collect();
    let ln_c: Vec<f64> = points.iter().map(|p| (p.generations as f64).ln()).collect();
    let n = points.len();
    let (lo, hi) = (ln_c[0], ln_c[n - 1]);

    let max_rate = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_rate = rates.iter().copied().fold(f64::INFINITY, f64::min);
    if max_rate - min_rate < 1e-12 && (max_rate - r0).abs() < 1e-12 {
        return FitResult {
            r0,
            asymptote: r0,
            c_mid: ((lo + hi) / 2.0).exp(),
            steepness: 1.0,
            sse: 0.0,
            n_points: n,
            degenerate: true,
        };
    }

    let objective = Objective {
        ln_c,
        rates: &rates,
        r0,
    };
    let top = max_rate.max(r0);
    let a_starts = [top, top + (1.0 - top) / 3.0, top + 2.0 * (1.0 - top) / 3.0];
    let mid_starts = [0.25, 0.5, 0.75].map(|f| lo + f * (hi - lo));
    let steep_starts = [0.5f64, 1.0, 2.0].map(f64::ln);
    let span = (hi - lo).max(1.0);

    let mut best = ([top, mid_starts[1], 0.0], f64::INFINITY);
    for &a in &a_starts {
        for &m in &mid_starts {
            for &s in &steep_starts {
                let start = [a, m, s];
                let steps = [0.1 * (1.0 - r0).max(0.05), 0.2 * span, 0.5];
                let (x, f) = nelder_mead(|x| objective.sse(x), start, steps, SSE_TOLERANCE, 2_000);
                if f < best.1 {
                    best = (x, f);
                }
            }
        }
    }
    // Polish: restart from the incumbent until restarts stop helping.
    for _ in 0..20 {
        let steps = [1e-3, 1e-2 * span, 1e-2];
        let (x, f) = nelder_mead(|x| objective.sse(x), best.0, steps, 0.0, 4_000);
        if f < best.1 {
            let gain = best.1 - f;
            best = (x, f);
            if gain <= 1e-15 * (1.0 + f) {
                break;
            }
        } else {
            break;
        }
    }
    let (x, sse) = best;
    FitResult {
        r0,
        asymptote: objective.asymptote(x[0]),
        c_mid: x[1].exp(),
        steepness: x[2].exp(),
        sse,
        n_points: n,
        degenerate: false,
    }
}

/// Derivative-free simplex descent in three dimensions. Stops when the
/// spread of objective values falls to `tolerance` or after `max_iter`.
fn nelder_mead<F>(f: F, start: [f64; 3], steps: [f64; 3], tolerance: f64, max_iter: usize) -> ([f64; 3], f64)
where
    F: Fn(&[f64; 3]) -> f64,
{
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((start, f(&start)));
    for i in 0..3 {
        let mut x = start;
        x[i] += steps[i];
        simplex.push((x, f(&x)));
    }
    let lerp = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] {
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[3].1 - simplex[0].1 <= tolerance {
            break;
        }
        let mut centroid = [0.0; 3];
        for (x, _) in &simplex[..3] {
            for d in 0..3 {
                centroid[d] += x[d] / 3.0;
            }
        }
        let worst = simplex[3];
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let (toward, ft) = if fr < worst.1 {
                (reflected, fr)
            } else {
                (worst.0, worst.1)
            };
            let contracted = lerp(&centroid, &toward, 0.5);
            let fc = f(&contracted);
            if fc < ft {
                simplex[3] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for vertex in simplex.iter_mut().skip(1) {
                    let x = lerp(&best, &vertex.0, 0.5);
                    *vertex = (x, f(&x));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationFit {
    pub fraction: f64,
    pub removed: usize,
    #[serde(flatten)]
    pub fit: FitResult,
    /// Change in asymptote relative to the full-data fit.
    pub asymptote_delta: f64,
}

/// Refits with the trailing `fraction` of points (by count) removed.
pub fn robustness_truncate(
    points: &[CurvePoint],
    fractions: &[f64],
    c_min: u64,
    recenter: bool,
) -> Result<Vec<TruncationFit>, ScalingError> {
    let full = fit(points, c_min, recenter)?;
    fractions
        .iter()
        .map(|&fraction| {
            let removed = (fraction * points.len() as f64).round() as usize;
            let kept = &points[..points.len().saturating_sub(removed)];
            if kept.is_empty() {
                return Err(ScalingError::TooFewPoints(0));
            }
            let truncated = fit(kept, c_min, recenter)?;
            Ok(TruncationFit {
                fraction,
                removed,
                fit: truncated,
                asymptote_delta: truncated.asymptote - full.asymptote,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSummary {
    pub runs: usize,
    pub keep: f64,
    pub points_per_fit: usize,
    pub mean_asymptote: f64,
    /// Population standard deviation across runs.
    pub std_asymptote: f64,
    pub lowest: FitResult,
    pub highest: FitResult,
}

/// `runs` fits on uniform without-replacement subsets of the points at or
/// above `c_min`, each keeping `floor(keep * n)` of them.
pub fn robustness_subsample(
    points: &[CurvePoint],
    runs: usize,
    keep: f64,
    seed: u64,
    c_min: u64,
    recenter: bool,
) -> Result<SubsampleSummary, ScalingError> {
    validate(points)?;
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(ScalingError::BadKeep(keep));
    }
    let eligible: Vec<CurvePoint> = points.iter().copied().filter(|p| p.generations >= c_min).collect();
    let per_fit = (keep * eligible.len() as f64).floor() as usize;
    if per_fit < MIN_FIT_POINTS || runs == 0 {
        return Err(ScalingError::TooFewPoints(per_fit));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fits = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut chosen = sample(&mut rng, eligible.len(), per_fit).into_vec();
        chosen.sort_unstable();
        let subset: Vec<CurvePoint> = chosen.iter().map(|&i| eligible[i]).collect();
        let r0 = if recenter { subset[0].rate } else { points[0].rate };
        fits.push(fit_pinned(&subset, r0));
    }
    let mean = fits.iter().map(|f| f.asymptote).sum::<f64>() / runs as f64;
    let var = fits.iter().map(|f| (f.asymptote - mean).powi(2)).sum::<f64>() / runs as f64;
    let lowest = *fits
        .iter()
        .min_by(|a, b| a.asymptote.total_cmp(&b.asymptote))
        .expect("runs > 0");
    let highest = *fits
        .iter()
        .max_by(|a, b| a.asymptote.total_cmp(&b.asymptote))
        .expect("runs > 0");
    Ok(SubsampleSummary {
        runs,
        keep,
        points_per_fit: per_fit,
        mean_asymptote: mean,
        std_asymptote: var.sqrt(),
        lowest,
        highest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub truncation: Vec<TruncationFit>,
    pub subsample: SubsampleSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub fit: FitResult,
    pub c_min: u64,
    pub recenter: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness: Option<Robustness>,
}

/// Reads `(generations, cum_solve_rate)` from metrics JSONL. Lines whose
/// generation count does not advance are skipped.
pub fn curve_from_metrics(text: &str) -> Result<Vec<CurvePoint>, ScalingError> {
    let mut points: Vec<CurvePoint> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| ScalingError::Metrics {
            line: i + 1,
            message: e.to_string(),
        })?;
        let field = |name: &str| {
            value.get(name).ok_or_else(|| ScalingError::Metrics {
                line: i + 1,
                message: format!("missing field {name:?}"),
            })
        };
        let generations = field("generations")?.as_u64().ok_or_else(|| ScalingError::Metrics {
            line: i + 1,
            message: "generations must be an unsigned integer".into(),
        })?;
        let rate = field("cum_solve_rate")?.as_f64().ok_or_else(|| ScalingError::Metrics {
            line: i + 1,
            message: "cum_solve_rate must be a number".into(),
        })?;
        if points.last().is_some_and(|p| p.generations >= generations) || generations == 0 {
            continue;
        }
        points.push(CurvePoint { generations, rate });
    }
    validate(&points)?;
    Ok(points)
}

/// `C,observed,predicted` rows for plotting.
pub fn prediction_csv(points: &[CurvePoint], fit: &FitResult) -> String {
    let mut out = String::from("C,observed,predicted\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.generations,
            p.rate,
            predict(fit, p.generations as f64)
        ));
    }
    out
}
