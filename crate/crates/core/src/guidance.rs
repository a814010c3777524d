//! Measurement-guided reverse diffusion.
//!
//! The MCS sampler alternates two guidance losses on the clean estimate
//! `xhat = estimate_x0(x_t, eps)`:
//!
//! * forward measurement, `||VHD(y0) - VHD(xhat)||^2`, on the high-frequency
//!   Haar subbands of the coarse restoration `y0` (early steps);
//! * reverse measurement, `||y0 - A^+ A xhat||^2`, which only sees the
//!   row-space projection of `xhat` (late steps).
//!
//! The denoiser is treated as constant when differentiating (stop-gradient),
//! so both gradients are exact closed forms. DPS and DDNM baselines share the
//! same step plumbing.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    add_scaled_noise, estimate_x0, forward_noise, posterior_mean, posterior_mean_from_x0,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::gmm::{Condition, GmmPrior};
use crate::grid::ImageGrid;
use crate::haar::{haar_decompose_levels, haar_reconstruct_levels, DetailBands, HaarPyramid};
use crate::linops::{clamp_kernel_size, default_kernel_size, LinearOperator, DEFAULT_PINV_TOL};
use crate::rng::SeededRng;

/// Conditional epsilon predictor.
pub trait Denoiser: Sync {
    fn eps(&self, x_t: &ImageGrid, t: usize, sched: &NoiseSchedule, cond: &Condition) -> Result<ImageGrid>;
}

impl Denoiser for GmmPrior {
    fn eps(&self, x_t: &ImageGrid, t: usize, sched: &NoiseSchedule, cond: &Condition) -> Result<ImageGrid> {
        self.eps_pred(x_t, t, sched, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measurement {
    Forward,
    Reverse,
}

impl Measurement {
    pub fn as_str(self) -> &'static str {
        match self {
            Measurement::Forward => "forward",
            Measurement::Reverse => "reverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// `x_{t-1} ~ N(mu - Sigma eta g, Sigma)`.
    #[default]
    Alg1,
    /// `x_{t-1} = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps - eta g + sigma_t z`.
    Reanchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientTarget {
    /// Gradient with respect to `xhat`.
    #[default]
    Xhat,
    /// Gradient pulled back to `x_t` through `xhat = x_t / sqrt(abar_t) - ...`.
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub eta_forward: f64,
    pub eta_reverse: f64,
    /// Fraction of `T` where forward measurement hands over to reverse.
    pub boundary: f64,
    /// `(w1, w2)` multipliers on `eta_forward` / `eta_reverse`.
    pub weight_ratio: (f64, f64),
    pub update_rule: UpdateRule,
    pub gradient_target: GradientTarget,
    /// Start step for noise-blended initialization, as a fraction of `T`.
    pub t_start_fraction: f64,
    /// Haar levels whose detail bands enter the forward measurement.
    pub haar_levels: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta_forward: 1.0,
            eta_reverse: 1.0,
            boundary: 0.6,
            weight_ratio: (1.0, 1.0),
            update_rule: UpdateRule::Alg1,
            gradient_target: GradientTarget::Xhat,
            t_start_fraction: 1.0,
            haar_levels: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self {
            eta_forward: 0.0,
            eta_reverse: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.boundary > 0.0 && self.boundary < 1.0) {
            return bad(format!("boundary must be in (0, 1), got {}", self.boundary));
        }
        for (name, v) in [
            ("eta_forward", self.eta_forward),
            ("eta_reverse", self.eta_reverse),
            ("weight_ratio.0", self.weight_ratio.0),
            ("weight_ratio.1", self.weight_ratio.1),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.t_start_fraction > 0.0 && self.t_start_fraction <= 1.0) {
            return bad(format!(
                "t_start_fraction must be in (0, 1], got {}",
                self.t_start_fraction
            ));
        }
        if self.haar_levels == 0 {
            return bad("haar_levels must be >= 1".into());
        }
        Ok(())
    }

    fn effective_eta(&self, m: Measurement) -> f64 {
        match m {
            Measurement::Forward => self.eta_forward * self.weight_ratio.0,
            Measurement::Reverse => self.eta_reverse * self.weight_ratio.1,
        }
    }

    /// `max(1, floor(t_start_fraction * T))`.
    pub fn start_step(&self, steps: usize) -> usize {
        ((self.t_start_fraction * steps as f64 + 1e-9).floor() as usize).clamp(1, steps)
    }
}

/// Forward measurement iff `t >= ceil(boundary * T)`.
///
/// The product is nudged down by 1e-9 before the ceiling so that values such
/// as `0.7 * 10` do not round up a whole step.
pub fn select_measurement(t: usize, steps: usize, boundary: f64) -> Measurement {
    let threshold = (boundary * steps as f64 - 1e-9).ceil() as usize;
    if t >= threshold {
        Measurement::Forward
    } else {
        Measurement::Reverse
    }
}

fn pyramid_diff_grad(y0: &HaarPyramid, x: &HaarPyramid) -> (f64, Vec<DetailBands>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(x.details.len());
    for (xd, yd) in x.details.iter().zip(&y0.details) {
        let diff = xd.sub(yd);
        loss += diff.energy();
        grads.push(diff.scale(2.0));
    }
    (loss, grads)
}

/// `L1 = ||VHD(y0) - VHD(xhat)||^2` and its gradient in `xhat`.
///
/// The gradient is the inverse Haar transform of `{L = 0, VHD = 2 (VHD(xhat) - VHD(y0))}`;
/// the transform is orthogonal so its adjoint is its inverse.
pub fn forward_loss_grad(y0: &ImageGrid, xhat: &ImageGrid, levels: usize) -> Result<(f64, ImageGrid)> {
    y0.ensure_same_shape(xhat)?;
    let py = haar_decompose_levels(y0, levels)?;
    let px = haar_decompose_levels(xhat, levels)?;
    let (loss, details) = pyramid_diff_grad(&py, &px);
    let grad = haar_reconstruct_levels(&HaarPyramid {
        low: ImageGrid::zeros(px.low.height(), px.low.width()),
        details,
    })?;
    Ok((loss, grad))
}

/// `L2 = ||y0 - P xhat||^2` with `P = A^+ A`; gradient `2 P (P xhat - y0)`.
pub fn reverse_loss_grad(y0: &ImageGrid, xhat: &ImageGrid, op: &LinearOperator) -> Result<(f64, ImageGrid)> {
    y0.ensure_same_shape(xhat)?;
    xhat.ensure_shape(op.in_shape())?;
    let px = op.projection_apply(xhat)?;
    let resid = px.sub(y0);
    let loss = resid.norm_sq();
    let grad = op.projection_apply(&resid)?.scale(2.0);
    Ok((loss, grad))
}

/// DPS data term `||y - A xhat||^2` and gradient `2 A^T (A xhat - y)`.
pub fn data_fidelity_grad(y: &ImageGrid, xhat: &ImageGrid, op: &LinearOperator) -> Result<(f64, ImageGrid)> {
    let resid = op.apply(xhat)?.sub(y);
    y.ensure_same_shape(&resid)?;
    let loss = resid.norm_sq();
    Ok((loss, op.apply_transpose(&resid)?.scale(2.0)))
}

/// `sqrt(abar) y0 + sqrt(1 - abar) eps`, `eps ~ N(0, I)` drawn row-major from `rng`.
pub fn noise_blend_init(
    y0: &ImageGrid,
    t_start: usize,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<ImageGrid> {
    sched.check_step(t_start)?;
    let eps = rng.normal_grid(y0.height(), y0.width());
    forward_noise(y0, t_start, &eps, sched)
}

/// Pseudo-inverse upsampling followed by Gaussian smoothing (skipped for `sigma <= 0`).
pub fn coarse_restore(y: &ImageGrid, op: &LinearOperator, smooth_sigma: f64) -> Result<ImageGrid> {
    let up = op.pseudo_apply(y, DEFAULT_PINV_TOL)?;
    if !(smooth_sigma > 0.0) {
        return Ok(up);
    }
    let (h, w) = up.shape();
    let k = clamp_kernel_size(default_kernel_size(smooth_sigma), h.min(w));
    LinearOperator::gaussian_blur(h, w, smooth_sigma, k)?.apply(&up)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Active measurement; `None` for samplers without the MCS selection.
    pub measurement: Option<Measurement>,
    pub loss: f64,
    pub grad_norm: f64,
    pub xhat: Option<ImageGrid>,
}

/// Per-step log of a sampling chain, `t` strictly decreasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub snapshot_stride: usize,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(snapshot_stride: usize) -> Self {
        Self {
            snapshot_stride,
            steps: Vec::new(),
        }
    }

    fn wants_snapshot(&self, t: usize) -> bool {
        self.snapshot_stride > 0 && (t % self.snapshot_stride == 0 || t == 1)
    }

    fn record(&mut self, t: usize, measurement: Option<Measurement>, loss: f64, grad: Option<&ImageGrid>, xhat: &ImageGrid) {
        let snapshot = self.wants_snapshot(t).then(|| xhat.clone());
        self.steps.push(StepRecord {
            t,
            measurement,
            loss,
            grad_norm: grad.map_or(0.0, ImageGrid::norm),
            xhat: snapshot,
        });
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (usize, &ImageGrid)> {
        self.steps
            .iter()
            .filter_map(|s| s.xhat.as_ref().map(|x| (s.t, x)))
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub x0: ImageGrid,
    pub trajectory: Trajectory,
}

fn check_finite(t: usize, grids: &[&ImageGrid]) -> Result<()> {
    if grids.iter().all(|g| g.all_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalAbort { step: t })
    }
}

fn draw_step_noise(rng: &mut SeededRng, t: usize, shape: (usize, usize)) -> ImageGrid {
    if t > 1 {
        rng.normal_grid(shape.0, shape.1)
    } else {
        ImageGrid::zeros(shape.0, shape.1)
    }
}

fn map_gradient(grad: ImageGrid, target: GradientTarget, t: usize, sched: &NoiseSchedule) -> ImageGrid {
    match target {
        GradientTarget::Xhat => grad,
        GradientTarget::Chain => grad.scale(1.0 / sched.alpha_bar(t).sqrt()),
    }
}

/// Where an unguided chain starts.
#[derive(Debug, Clone, Copy)]
pub enum ChainStart<'a> {
    /// `x_T ~ N(0, I)`.
    Noise { height: usize, width: usize },
    /// Noise-blended `y0` at `t_start`.
    Blend { y0: &'a ImageGrid, t_start: usize },
}

/// Plain ancestral sampling with the conditional denoiser.
pub fn unguided_sample(
    denoiser: &dyn Denoiser,
    start: ChainStart<'_>,
    cond: &Condition,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    snapshot_stride: usize,
) -> Result<SampleOutput> {
    let (mut x, t_start) = match start {
        ChainStart::Noise { height, width } => (rng.normal_grid(height, width), sched.steps()),
        ChainStart::Blend { y0, t_start } => (noise_blend_init(y0, t_start, sched, rng)?, t_start),
    };
    let mut traj = Trajectory::new(snapshot_stride);
    for t in (1..=t_start).rev() {
        let eps = denoiser.eps(&x, t, sched, cond)?;
        let xhat = estimate_x0(&x, &eps, t, sched)?;
        let noise = draw_step_noise(rng, t, x.shape());
        let next = crate::diffusion::posterior_step_unguided(&x, &eps, t, sched, &noise)?;
        check_finite(t, &[&xhat, &next])?;
        traj.record(t, None, 0.0, None, &xhat);
        x = next;
    }
    Ok(SampleOutput { x0: x, trajectory: traj })
}

/// Measurement-constrained sampling.
///
/// `y0` is the coarse restoration; `op` the constructed degradation used by the
/// reverse measurement. Steps run from `start_step(T)` down to 1.
#[allow(clippy::too_many_arguments)]
pub fn mcs_sample(
    denoiser: &dyn Denoiser,
    y0: &ImageGrid,
    op: &LinearOperator,
    cond: &Condition,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    snapshot_stride: usize,
) -> Result<SampleOutput> {
    cfg.validate()?;
    y0.ensure_shape(op.in_shape())?;
    let steps = sched.steps();
    let t_start = cfg.start_step(steps);
    let mut x = noise_blend_init(y0, t_start, sched, rng)?;
    let mut traj = Trajectory::new(snapshot_stride);
    for t in (1..=t_start).rev() {
        let eps = denoiser.eps(&x, t, sched, cond)?;
        let xhat = estimate_x0(&x, &eps, t, sched)?;
        let m = select_measurement(t, steps, cfg.boundary);
        let (loss, grad) = match m {
            Measurement::Forward => forward_loss_grad(y0, &xhat, cfg.haar_levels)?,
            Measurement::Reverse => reverse_loss_grad(y0, &xhat, op)?,
        };
        let g = map_gradient(grad, cfg.gradient_target, t, sched);
        let eta = cfg.effective_eta(m);
        let noise = draw_step_noise(rng, t, x.shape());
        let next = match cfg.update_rule {
            UpdateRule::Alg1 => {
                let mut mu = posterior_mean(&x, &eps, t, sched)?;
                if eta != 0.0 {
                    let k = sched.posterior_variance(t) * eta;
                    mu = mu.zip_map(&g, |m, g| m - k * g);
                }
                add_scaled_noise(mu, &noise, t, sched)
            }
            UpdateRule::Reanchor => {
                let ab = sched.alpha_bar(t);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let anchored = y0.zip_map(&eps, |y, e| sa * y + sb * e);
                let stepped = anchored.zip_map(&g, |a, g| a - eta * g);
                add_scaled_noise(stepped, &noise, t, sched)
            }
        };
        check_finite(t, &[&xhat, &g, &next])?;
        traj.record(t, Some(m), loss, Some(&g), &xhat);
        x = next;
    }
    Ok(SampleOutput { x0: x, trajectory: traj })
}

/// Diffusion posterior sampling: `mu - lambda grad ||y - A xhat||^2`, with
/// `lambda = cfg.eta_reverse`, from pure noise at `T`.
#[allow(clippy::too_many_arguments)]
pub fn dps_sample(
    denoiser: &dyn Denoiser,
    y: &ImageGrid,
    op: &LinearOperator,
    cond: &Condition,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    snapshot_stride: usize,
) -> Result<SampleOutput> {
    cfg.validate()?;
    y.ensure_shape(op.out_shape())?;
    let (h, w) = op.in_shape();
    let lambda = cfg.eta_reverse;
    let mut x = rng.normal_grid(h, w);
    let mut traj = Trajectory::new(snapshot_stride);
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.eps(&x, t, sched, cond)?;
        let xhat = estimate_x0(&x, &eps, t, sched)?;
        let (loss, grad) = data_fidelity_grad(y, &xhat, op)?;
        let g = map_gradient(grad, cfg.gradient_target, t, sched);
        let noise = draw_step_noise(rng, t, (h, w));
        let mut mu = posterior_mean(&x, &eps, t, sched)?;
        if lambda != 0.0 {
            mu = mu.zip_map(&g, |m, g| m - lambda * g);
        }
        let next = add_scaled_noise(mu, &noise, t, sched);
        check_finite(t, &[&xhat, &g, &next])?;
        traj.record(t, None, loss, Some(&g), &xhat);
        x = next;
    }
    Ok(SampleOutput { x0: x, trajectory: traj })
}

/// Null-space projection: `xhat <- A^+ y + (I - A^+ A) xhat`, then the
/// standard posterior step around the corrected estimate.
pub fn ddnm_sample(
    denoiser: &dyn Denoiser,
    y: &ImageGrid,
    op: &LinearOperator,
    cond: &Condition,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    snapshot_stride: usize,
) -> Result<SampleOutput> {
    y.ensure_shape(op.out_shape())?;
    let (h, w) = op.in_shape();
    let range_part = op.pseudo_apply(y, DEFAULT_PINV_TOL)?;
    let mut x = rng.normal_grid(h, w);
    let mut traj = Trajectory::new(snapshot_stride);
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.eps(&x, t, sched, cond)?;
        let xhat = estimate_x0(&x, &eps, t, sched)?;
        let loss = op.apply(&xhat)?.sub(y).norm_sq();
        let corrected = range_part.add(&xhat.sub(&op.projection_apply(&xhat)?));
        let noise = draw_step_noise(rng, t, (h, w));
        let mu = posterior_mean_from_x0(&x, &corrected, t, sched)?;
        let next = add_scaled_noise(mu, &noise, t, sched);
        check_finite(t, &[&xhat, &next])?;
        traj.record(t, None, loss, None, &corrected);
        x = next;
    }
    Ok(SampleOutput { x0: x, trajectory: traj })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_threshold() {
        assert_eq!(select_measurement(150, 150, 0.6), Measurement::Forward);
        assert_eq!(select_measurement(90, 150, 0.6), Measurement::Forward);
        assert_eq!(select_measurement(89, 150, 0.6), Measurement::Reverse);
        assert_eq!(select_measurement(1, 150, 0.6), Measurement::Reverse);
        assert_eq!(select_measurement(7, 10, 0.7), Measurement::Forward);
        assert_eq!(select_measurement(6, 10, 0.7), Measurement::Reverse);
    }

    #[test]
    fn boundary_near_one_keeps_only_first_step_forward() {
        for t in 1..150 {
            assert_eq!(select_measurement(t, 150, 0.999), Measurement::Reverse);
        }
        assert_eq!(select_measurement(150, 150, 0.999), Measurement::Forward);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        let mut c = GuidanceConfig::default();
        c.boundary = 1.0;
        assert!(c.validate().is_err());
        c = GuidanceConfig::default();
        c.eta_forward = f64::NAN;
        assert!(c.validate().is_err());
        c = GuidanceConfig::default();
        c.t_start_fraction = 0.0;
        assert!(c.validate().is_err());
        c = GuidanceConfig::default();
        c.haar_levels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn start_step() {
        let mut c = GuidanceConfig::default();
        assert_eq!(c.start_step(150), 150);
        c.t_start_fraction = 0.5;
        assert_eq!(c.start_step(150), 75);
        c.t_start_fraction = 0.001;
        assert_eq!(c.start_step(150), 1);
    }
}
