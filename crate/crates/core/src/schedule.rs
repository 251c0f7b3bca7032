//! Noise schedules: β_t, α_t, ᾱ_t tables and the accelerated step subset.
//!
//! Timesteps are 1-based externally (t ∈ [1, T]); t = 0 denotes clean data.
//! Internally the tables are stored 0-indexed, so `beta(t)` reads `betas[t-1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset for the squared-cosine ᾱ curve.
const COSINE_OFFSET: f64 = 0.008;
/// Per-step β ceiling for the cosine schedule.
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Precomputed diffusion schedule. Immutable after construction; safe to
/// share across threads for read access.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Total forward steps T.
    pub t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Accelerated generation steps, sorted ascending, last element = T.
    pub step_subset: Vec<usize>,
}

impl NoiseSchedule {
    /// β_t for t ∈ [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "timestep {t} outside [1, {}]", self.t_max);
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t for t ∈ [1, T].
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "timestep {t} outside [1, {}]", self.t_max);
        self.alphas[t - 1]
    }

    /// ᾱ_t = ∏_{s≤t} α_s for t ∈ [0, T], with ᾱ_0 ≡ 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "timestep {t} outside [0, {}]", self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Replace the step subset with `count` evenly spaced steps ending at T.
    pub fn with_subset(mut self, count: usize) -> Result<Self> {
        self.step_subset = make_step_subset(&self, count)?;
        Ok(self)
    }
}

/// Build a schedule of `t_max` steps.
///
/// Linear spaces β evenly from `beta_start` to `beta_end` inclusive. Cosine
/// ignores the β range and derives β from the squared-cosine ᾱ curve with
/// offset 0.008, clipping each β at 0.999. Either way `alpha_bars` is the
/// running product of the α table, so the recurrence
/// ᾱ_t = ᾱ_{t−1} · (1 − β_t) holds bit-for-bit.
pub fn build_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::config("schedule.T", "must be >= 1"));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0) || !(beta_start < 1.0) {
                return Err(Error::config(
                    "schedule.beta_start",
                    format!("{beta_start} outside (0, 1)"),
                ));
            }
            if !(beta_end < 1.0) || beta_end < beta_start {
                return Err(Error::config(
                    "schedule.beta_end",
                    format!("{beta_end} outside [beta_start, 1)"),
                ));
            }
            linspace(beta_start, beta_end, t_max)
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(COSINE_BETA_MAX))
                .collect()
        }
    };

    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }

    let schedule = NoiseSchedule {
        kind,
        t_max,
        betas,
        alphas,
        alpha_bars,
        step_subset: (1..=t_max).collect(),
    };
    debug_assert!(schedule.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
    Ok(schedule)
}

/// `count` evenly spaced timesteps ending at T (stride T/count, rounded).
/// Deterministic and idempotent for fixed inputs.
pub fn make_step_subset(schedule: &NoiseSchedule, count: usize) -> Result<Vec<usize>> {
    if count < 1 || count > schedule.t_max {
        return Err(Error::config(
            "schedule.subset_count",
            format!("{count} outside [1, T={}]", schedule.t_max),
        ));
    }
    Ok(evenly_spaced_steps(schedule.t_max, count))
}

/// round(i * n / count) for i = 1..=count. Strictly increasing whenever
/// count <= n, and always ends at n.
pub(crate) fn evenly_spaced_steps(n: usize, count: usize) -> Vec<usize> {
    (1..=count)
        .map(|i| ((i as f64) * (n as f64) / (count as f64)).round() as usize)
        .collect()
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}
