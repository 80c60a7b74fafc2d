//! Variance schedules, closed-form forward noising, the DDIM reverse step
//! and sinusoidal timestep embeddings.
//!
//! Timesteps are 1-based: a schedule with `N` steps covers `1..=N`, and
//! `alpha_bar(0) == 1` by convention so the last reverse step (into
//! timestep 0) has zero variance.

use restore_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Slack allowed on `1 - ᾱ_prev - σ²` before a schedule is rejected.
const VARIANCE_TOLERANCE: f64 = 1e-12;

/// β, α and cumulative ᾱ tables for timesteps `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule", "at least one timestep is required"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid("schedule", format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(invalid("schedule", "at least one timestep is required"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(
                "schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (num_steps - 1) as f64;
            (0..num_steps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// β_r for `1 <= r <= N`.
    pub fn beta(&self, r: usize) -> f64 {
        self.betas[r - 1]
    }

    /// α_r = 1 − β_r for `1 <= r <= N`.
    pub fn alpha(&self, r: usize) -> f64 {
        1.0 - self.beta(r)
    }

    /// ᾱ_r for `0 <= r <= N`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, r: usize) -> f64 {
        self.alpha_bars[r]
    }

    fn check_timestep(&self, op: &'static str, r: usize) -> Result<()> {
        if r == 0 || r > self.num_steps() {
            return Err(invalid(op, format!("timestep {r} outside 1..={}", self.num_steps())));
        }
        Ok(())
    }
}

/// `√ᾱ · z0 + √(1−ᾱ) · ξ` for an explicit ᾱ.
pub fn noise_with_alpha_bar(z0: &Tensor, xi: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.zip_map(xi, "q_sample", |z, e| a * z + b * e)?)
}

/// Closed-form forward diffusion of `z0` to timestep `r` with noise `xi`.
pub fn q_sample(z0: &Tensor, r: usize, xi: &Tensor, sched: &VarianceSchedule) -> Result<Tensor> {
    sched.check_timestep("q_sample", r)?;
    noise_with_alpha_bar(z0, xi, sched.alpha_bar(r))
}

/// σ for a step between cumulative products `alpha_bar` (current) and
/// `alpha_bar_prev` (target).
pub fn sigma_from(alpha_bar: f64, alpha_bar_prev: f64) -> f64 {
    let denom = 1.0 - alpha_bar;
    if denom <= 0.0 {
        return 0.0;
    }
    let v = (1.0 - alpha_bar_prev) / denom * (1.0 - alpha_bar / alpha_bar_prev);
    v.max(0.0).sqrt()
}

/// σ_r for the unit step `r → r − 1`.
pub fn sigma(r: usize, sched: &VarianceSchedule) -> f64 {
    sigma_between(r, r - 1, sched)
}

/// σ for the jump `r → r_prev` used by a strided sub-schedule.
pub fn sigma_between(r: usize, r_prev: usize, sched: &VarianceSchedule) -> f64 {
    sigma_from(sched.alpha_bar(r), sched.alpha_bar(r_prev))
}

/// The reverse update written as `z_prev = coef_z·z + coef_eps·ε_θ + sigma·ε′`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub coef_z: f64,
    pub coef_eps: f64,
    pub sigma: f64,
}

impl DdimCoefficients {
    pub fn new(alpha_bar: f64, alpha_bar_prev: f64) -> Result<Self> {
        let sigma = sigma_from(alpha_bar, alpha_bar_prev);
        let dir_var = 1.0 - alpha_bar_prev - sigma * sigma;
        if dir_var < -VARIANCE_TOLERANCE {
            return Err(invalid(
                "ddim_step",
                format!("1 - alpha_bar_prev - sigma^2 = {dir_var} is negative"),
            ));
        }
        let sa = alpha_bar.sqrt();
        let coef_z = alpha_bar_prev.sqrt() / sa;
        let coef_eps = -alpha_bar_prev.sqrt() * (1.0 - alpha_bar).sqrt() / sa + dir_var.max(0.0).sqrt();
        Ok(Self {
            coef_z,
            coef_eps,
            sigma,
        })
    }

    pub fn for_step(r: usize, r_prev: usize, sched: &VarianceSchedule) -> Result<Self> {
        sched.check_timestep("ddim_step", r)?;
        if r_prev >= r {
            return Err(invalid("ddim_step", format!("r_prev {r_prev} must precede r {r}")));
        }
        Self::new(sched.alpha_bar(r), sched.alpha_bar(r_prev))
    }
}

/// One reverse step for explicit ᾱ values:
/// `√ᾱ_prev·z̃ + √(1−ᾱ_prev−σ²)·ε_θ + σ·ε′` with `z̃ = (z − √(1−ᾱ)·ε_θ)/√ᾱ`.
///
/// `noise` is only read when σ > 0 and is then required.
pub fn ddim_update(
    eps_theta: &Tensor,
    z: &Tensor,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let sigma = sigma_from(alpha_bar, alpha_bar_prev);
    let dir_var = 1.0 - alpha_bar_prev - sigma * sigma;
    if dir_var < -VARIANCE_TOLERANCE {
        return Err(invalid(
            "ddim_step",
            format!("1 - alpha_bar_prev - sigma^2 = {dir_var} is negative"),
        ));
    }
    let (sa, s1a) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (sap, dir) = (alpha_bar_prev.sqrt(), dir_var.max(0.0).sqrt());
    let mut out = z.zip_map(eps_theta, "ddim_step", |zv, e| {
        let z_tilde = (zv - s1a * e) / sa;
        sap * z_tilde + dir * e
    })?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| invalid("ddim_step", "sigma > 0 but no noise was supplied"))?;
        out = out.zip_map(noise, "ddim_step", |v, n| v + sigma * n)?;
    }
    Ok(out)
}

/// Reverse step `r → r_prev` on the schedule.
pub fn ddim_step(
    eps_theta: &Tensor,
    z: &Tensor,
    r: usize,
    r_prev: usize,
    noise: Option<&Tensor>,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    sched.check_timestep("ddim_step", r)?;
    if r_prev >= r {
        return Err(invalid("ddim_step", format!("r_prev {r_prev} must precede r {r}")));
    }
    ddim_update(eps_theta, z, sched.alpha_bar(r), sched.alpha_bar(r_prev), noise)
}

/// Strictly increasing sub-schedule of timesteps visited at inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdimSubsequence {
    steps: Vec<usize>,
}

impl DdimSubsequence {
    pub fn new(steps: Vec<usize>, num_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("ddim_subsequence", "empty subsequence"));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(
                "ddim_subsequence",
                format!("{steps:?} is not strictly increasing from 1"),
            ));
        }
        if *steps.last().unwrap() > num_steps {
            return Err(invalid(
                "ddim_subsequence",
                format!("{steps:?} exceeds {num_steps} timesteps"),
            ));
        }
        Ok(Self { steps })
    }

    /// `m` evenly strided timesteps ending at `num_steps`.
    pub fn evenly_spaced(num_steps: usize, m: usize) -> Result<Self> {
        if m == 0 || m > num_steps {
            return Err(invalid("ddim_subsequence", format!("m = {m} outside 1..={num_steps}")));
        }
        Self::new((1..=m).map(|i| i * num_steps / m).collect(), num_steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(r, r_prev)` pairs in reverse order, ending with `(S_1, 0)`.
    pub fn reverse_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.steps.len())
            .rev()
            .map(|i| (self.steps[i], if i == 0 { 0 } else { self.steps[i - 1] }))
            .collect()
    }
}

/// Sinusoidal timestep encoder: `[sin(r·f_k), cos(r·f_k)]` with geometric
/// frequencies `f_k = 10000^(−k / (dim/2))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(invalid(
                "time_embedding",
                format!("dimension {dim} must be even and positive"),
            ));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, r: usize) -> Tensor {
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let arg = r as f64 * freq;
            out[k] = arg.sin();
            out[half + k] = arg.cos();
        }
        Tensor::from_vec(out)
    }

    /// `[N, dim]` embeddings for a batch of timesteps.
    pub fn embed_batch(&self, timesteps: &[usize]) -> Tensor {
        let rows: Vec<Tensor> = timesteps.iter().map(|&r| self.embed(r)).collect();
        Tensor::stack(&rows).expect("equal embedding widths")
    }
}
