//! Noise schedules and unguided DDPM arithmetic.
//!
//! Timesteps are 1-based: `t = 1..=T`, with the convention `alpha_bar(0) = 1`
//! so that the terminal reverse step is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Immutable beta / alpha / alpha_bar tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.index(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.index(t)]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.index(t)]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Reverse-transition variance `(1 - abar[t-1]) / (1 - abar[t]) * beta[t]`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if !(1..=self.steps()).contains(&t) {
            return Err(Error::InvalidConfig(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear beta ramp from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Serializable schedule description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub const DEFAULT_STEPS: usize = 150;

    /// Linear ramp whose endpoints are the 1000-step DDPM values (1e-4, 0.02)
    /// rescaled by `1000 / steps`, so `alpha_bar(T)` stays near zero.
    pub fn rescaled_ddpm(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: (0.02 * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: Self::DEFAULT_STEPS,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    x0: &ImageGrid,
    t: usize,
    eps: &ImageGrid,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    x0.ensure_same_shape(eps)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// One-step clean estimate `x_t / sqrt(abar_t) - eps * sqrt((1 - abar_t) / abar_t)`.
pub fn estimate_x0(
    x_t: &ImageGrid,
    eps_pred: &ImageGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    x_t.ensure_same_shape(eps_pred)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    let coef = ((1.0 - ab) / ab).sqrt();
    Ok(x_t.zip_map(eps_pred, |x, e| x * inv - e * coef))
}

/// Reverse-transition mean from an epsilon prediction.
pub fn posterior_mean(
    x_t: &ImageGrid,
    eps_pred: &ImageGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    x_t.ensure_same_shape(eps_pred)?;
    sched.check_step(t)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(x_t.zip_map(eps_pred, |x, e| inv_sqrt_alpha * (x - coef * e)))
}

/// Reverse-transition mean written in terms of a clean estimate `x0`:
/// `sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x0 + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t`.
///
/// Algebraically identical to [`posterior_mean`] when `x0 = estimate_x0(x_t, eps)`,
/// and exactly `x0` at `t = 1`.
pub fn posterior_mean_from_x0(
    x_t: &ImageGrid,
    x0: &ImageGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    x_t.ensure_same_shape(x0)?;
    sched.check_step(t)?;
    if t == 1 {
        return Ok(x0.clone());
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok(x0.zip_map(x_t, |x0, xt| c0 * x0 + ct * xt))
}

/// Ancestral step `mu_theta + sigma_t * noise`; `noise` is ignored at `t = 1`.
pub fn posterior_step_unguided(
    x_t: &ImageGrid,
    eps_pred: &ImageGrid,
    t: usize,
    sched: &NoiseSchedule,
    noise: &ImageGrid,
) -> Result<ImageGrid> {
    x_t.ensure_same_shape(noise)?;
    let mu = posterior_mean(x_t, eps_pred, t, sched)?;
    Ok(add_scaled_noise(mu, noise, t, sched))
}

pub(crate) fn add_scaled_noise(
    mean: ImageGrid,
    noise: &ImageGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> ImageGrid {
    if t == 1 {
        return mean;
    }
    let sigma = sched.posterior_variance(t).sqrt();
    mean.zip_map(noise, |m, z| m + sigma * z)
}
