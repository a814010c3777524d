//! Analytic Gaussian-mixture prior.
//!
//! Stands in for a pretrained conditional diffusion model: the exact posterior
//! mean `E[x0 | x_t]` of a diagonal-covariance mixture is available in closed
//! form, so the epsilon prediction is exact. A [`Condition`] restricts the
//! admissible components, playing the role of a prompt.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::linops::LinearOperator;
use crate::rng::SeededRng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Noise variances below this are floored in the exact posterior.
pub const NOISE_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub label: String,
    pub weight: f64,
    pub mean: ImageGrid,
    /// Diagonal covariance, row-major like `mean`.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    height: usize,
    width: usize,
    components: Vec<Component>,
}

/// Prompt stand-in: either unconditional or a set of admissible labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Condition {
    #[default]
    Null,
    Labels(Vec<String>),
}

impl Condition {
    pub fn labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Condition::Labels(labels.into_iter().map(Into::into).collect())
    }

    /// `null` (case-insensitive, or empty) or a comma-separated label list.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text.eq_ignore_ascii_case("null") {
            return Ok(Condition::Null);
        }
        let labels: Vec<String> = text
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if labels.is_empty() {
            return Err(Error::InvalidConfig(format!("empty condition '{text}'")));
        }
        Ok(Condition::Labels(labels))
    }

    pub fn admits(&self, label: &str) -> bool {
        match self {
            Condition::Null => true,
            Condition::Labels(ls) => ls.iter().any(|l| l == label),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Null => f.write_str("null"),
            Condition::Labels(ls) => f.write_str(&ls.join(",")),
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalize log-weights into probabilities; `-inf` entries become exactly 0.
fn softmax(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|l| (l - lse).exp()).collect()
}

impl GmmPrior {
    pub fn new(height: usize, width: usize, mut components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        let d = height * width;
        for (i, c) in components.iter().enumerate() {
            c.mean.ensure_shape((height, width))?;
            if c.variance.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "component {i}: variance has {} entries, expected {d}",
                    c.variance.len()
                )));
            }
            if let Some(v) = c.variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig(format!(
                    "component {i}: variance entries must be > 0, got {v}"
                )));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "component {i}: weight must be >= 0, got {}",
                    c.weight
                )));
            }
            if components[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::InvalidConfig(format!("duplicate label '{}'", c.label)));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("weights sum to {total}, expected 1")));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self {
            height,
            width,
            components,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn labels(&self) -> Vec<&str> {
        self.components.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    fn check_condition(&self, cond: &Condition) -> Result<()> {
        if let Condition::Labels(ls) = cond {
            if ls.is_empty() {
                return Err(Error::UnsatisfiableCondition("empty label set".into()));
            }
            if let Some(l) = ls.iter().find(|l| !self.components.iter().any(|c| &c.label == *l)) {
                return Err(Error::UnsatisfiableCondition(format!("unknown label '{l}'")));
            }
        }
        Ok(())
    }

    /// Keep only admissible components and renormalize their weights.
    pub fn condition_restrict(&self, cond: &Condition) -> Result<GmmPrior> {
        self.check_condition(cond)?;
        let kept: Vec<Component> = self
            .components
            .iter()
            .filter(|c| cond.admits(&c.label))
            .cloned()
            .collect();
        let total: f64 = kept.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::UnsatisfiableCondition(format!(
                "condition '{cond}' keeps no component with positive weight"
            )));
        }
        let kept = kept
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        Ok(GmmPrior {
            height: self.height,
            width: self.width,
            components: kept,
        })
    }

    fn log_prior_weights(&self, cond: &Condition) -> Result<Vec<f64>> {
        self.check_condition(cond)?;
        let lw: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                if cond.admits(&c.label) && c.weight > 0.0 {
                    c.weight.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        if lw.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(Error::UnsatisfiableCondition(format!(
                "condition '{cond}' keeps no component with positive weight"
            )));
        }
        Ok(lw)
    }

    /// Responsibilities `p(k | x_t, cond)` under the noised mixture.
    pub fn responsibilities(
        &self,
        x_t: &ImageGrid,
        t: usize,
        sched: &NoiseSchedule,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        x_t.ensure_shape(self.shape())?;
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let sa = ab.sqrt();
        let mut log_w = self.log_prior_weights(cond)?;
        for (lw, c) in log_w.iter_mut().zip(&self.components) {
            if *lw == f64::NEG_INFINITY {
                continue;
            }
            let mut ll = 0.0;
            for ((&x, &m), &v) in x_t.values().iter().zip(c.mean.values()).zip(&c.variance) {
                let var = ab * v + (1.0 - ab);
                let r = x - sa * m;
                ll -= 0.5 * (LN_2PI + var.ln() + r * r / var);
            }
            *lw += ll;
        }
        Ok(softmax(&log_w))
    }

    /// Exact `E[x0 | x_t]` under the (conditioned) noised mixture.
    pub fn posterior_mean(
        &self,
        x_t: &ImageGrid,
        t: usize,
        sched: &NoiseSchedule,
        cond: &Condition,
    ) -> Result<ImageGrid> {
        let resp = self.responsibilities(x_t, t, sched, cond)?;
        let ab = sched.alpha_bar(t);
        let sa = ab.sqrt();
        let mut out = vec![0.0; self.dim()];
        for (r, c) in resp.iter().zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                let m = c.mean.values()[i];
                let v = c.variance[i];
                let gain = sa * v / (ab * v + 1.0 - ab);
                *o += r * (m + gain * (x_t.values()[i] - sa * m));
            }
        }
        Ok(ImageGrid::from_raw(self.height, self.width, out))
    }

    /// Epsilon prediction `(x_t - sqrt(abar) E[x0|x_t]) / sqrt(1 - abar)`.
    pub fn eps_pred(
        &self,
        x_t: &ImageGrid,
        t: usize,
        sched: &NoiseSchedule,
        cond: &Condition,
    ) -> Result<ImageGrid> {
        let mean = self.posterior_mean(x_t, t, sched, cond)?;
        let ab = sched.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.zip_map(&mean, |x, m| (x - sa * m) / sb))
    }

    /// Score `grad log p_t(x_t)` of the noised mixture.
    pub fn score(
        &self,
        x_t: &ImageGrid,
        t: usize,
        sched: &NoiseSchedule,
        cond: &Condition,
    ) -> Result<ImageGrid> {
        let resp = self.responsibilities(x_t, t, sched, cond)?;
        let ab = sched.alpha_bar(t);
        let sa = ab.sqrt();
        let mut out = vec![0.0; self.dim()];
        for (r, c) in resp.iter().zip(&self.components) {
            for (i, o) in out.iter_mut().enumerate() {
                let var = ab * c.variance[i] + 1.0 - ab;
                *o -= r * (x_t.values()[i] - sa * c.mean.values()[i]) / var;
            }
        }
        Ok(ImageGrid::from_raw(self.height, self.width, out))
    }

    fn component_log_density(c: &Component, x: &ImageGrid) -> f64 {
        x.values()
            .iter()
            .zip(c.mean.values())
            .zip(&c.variance)
            .map(|((&x, &m), &v)| -0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v))
            .sum()
    }

    /// Mixture log-density at the data level.
    pub fn log_density(&self, x: &ImageGrid) -> Result<f64> {
        x.ensure_shape(self.shape())?;
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + Self::component_log_density(c, x))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Index of the maximum-responsibility component at `t = 0`; ties go to
    /// the lower index.
    pub fn component_assign_index(&self, x: &ImageGrid) -> Result<usize> {
        x.ensure_shape(self.shape())?;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let score = if c.weight > 0.0 {
                c.weight.ln() + Self::component_log_density(c, x)
            } else {
                f64::NEG_INFINITY
            };
            if score > best_score {
                best = k;
                best_score = score;
            }
        }
        Ok(best)
    }

    pub fn component_assign(&self, x: &ImageGrid) -> Result<&str> {
        let k = self.component_assign_index(x)?;
        Ok(&self.components[k].label)
    }

    /// Draw a component by weight, then a Gaussian sample from it.
    pub fn sample(&self, rng: &mut SeededRng) -> (ImageGrid, &str) {
        let k = rng.categorical(&self.weights());
        let c = &self.components[k];
        let values = c
            .mean
            .values()
            .iter()
            .zip(&c.variance)
            .map(|(&m, &v)| m + v.sqrt() * rng.normal())
            .collect();
        (
            ImageGrid::from_raw(self.height, self.width, values),
            c.label.as_str(),
        )
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.components.iter().position(|c| c.label == label)
    }
}

/// Full-covariance Gaussian mixture returned by [`gmm_exact_posterior`].
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<String>,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    cholesky: Vec<Cholesky<f64, Dyn>>,
}

fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 10.0 };
    }
    Err(Error::InvalidConfig("covariance is not positive definite".into()))
}

fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let r = x - mean;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&r)
        .expect("cholesky factor is nonsingular");
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + z.norm_squared())
}

impl PosteriorMixture {
    pub fn log_density(&self, x: &ImageGrid) -> Result<f64> {
        x.ensure_shape((self.height, self.width))?;
        let v = DVector::from_column_slice(x.values());
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.cholesky)
            .map(|((w, m), c)| {
                if *w > 0.0 {
                    w.ln() + gaussian_log_density(&v, m, c)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn weight_of(&self, label: &str) -> f64 {
        self.labels
            .iter()
            .position(|l| l == label)
            .map_or(0.0, |k| self.weights[k])
    }

    pub fn sample(&self, rng: &mut SeededRng) -> (ImageGrid, &str) {
        let k = rng.categorical(&self.weights);
        let z = DVector::from_iterator(self.means[k].len(), (0..self.means[k].len()).map(|_| rng.normal()));
        let x = &self.means[k] + self.cholesky[k].l() * z;
        (
            ImageGrid::from_raw(self.height, self.width, x.as_slice().to_vec()),
            self.labels[k].as_str(),
        )
    }
}

/// Exact posterior `p(x0 | y = A x0 + n)`, `n ~ N(0, noise_var I)`.
///
/// Each component gets the conjugate update with `S = A Sigma A^T + noise_var I`;
/// mixture weights are reweighted by the evidence `N(y; A mu, S)`.
pub fn gmm_exact_posterior(
    prior: &GmmPrior,
    op: &LinearOperator,
    y: &ImageGrid,
    noise_var: f64,
) -> Result<PosteriorMixture> {
    if op.in_shape() != prior.shape() {
        return Err(Error::ShapeMismatch {
            expected: prior.shape(),
            actual: op.in_shape(),
        });
    }
    y.ensure_shape(op.out_shape())?;
    let noise_var = noise_var.max(NOISE_VAR_FLOOR);
    let a = op.materialize()?;
    let yv = DVector::from_column_slice(y.values());
    let m = a.nrows();

    let mut log_w = Vec::new();
    let mut means = Vec::new();
    let mut covariances = Vec::new();
    for c in prior.components() {
        let mu = DVector::from_column_slice(c.mean.values());
        let sigma = DVector::from_column_slice(&c.variance);
        // A Sigma (Sigma diagonal): scale columns
        let mut a_sigma = a.clone();
        for (j, s) in sigma.iter().enumerate() {
            a_sigma.column_mut(j).scale_mut(*s);
        }
        let mut s_mat = &a_sigma * a.transpose();
        for i in 0..m {
            s_mat[(i, i)] += noise_var;
        }
        let s_chol = robust_cholesky(&s_mat)?;
        let resid = &yv - &a * &mu;
        let gain_t = s_chol.solve(&a_sigma); // S^-1 A Sigma, m x d
        let post_mean = &mu + gain_t.tr_mul(&resid);
        let mut post_cov = DMatrix::from_diagonal(&sigma) - a_sigma.tr_mul(&gain_t);
        post_cov = (&post_cov + post_cov.transpose()) * 0.5;
        let evidence = gaussian_log_density(&yv, &(&a * &mu), &s_chol);
        log_w.push(if c.weight > 0.0 {
            c.weight.ln() + evidence
        } else {
            f64::NEG_INFINITY
        });
        means.push(post_mean);
        covariances.push(post_cov);
    }
    let weights = softmax(&log_w);
    let cholesky = covariances
        .iter()
        .map(robust_cholesky)
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorMixture {
        height: prior.height,
        width: prior.width,
        labels: prior.components().iter().map(|c| c.label.clone()).collect(),
        weights,
        means,
        covariances,
        cholesky,
    })
}

// ---------------------------------------------------------------------------
// Prior definition files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentSpec {
    label: String,
    weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<ScalarOrList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_file: Option<String>,
    variance: ScalarOrList,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    height: usize,
    width: usize,
    component: Vec<ComponentSpec>,
}

fn expand(v: &ScalarOrList, d: usize, what: &str) -> Result<Vec<f64>> {
    match v {
        ScalarOrList::Scalar(s) => Ok(vec![*s; d]),
        ScalarOrList::List(l) if l.len() == d => Ok(l.clone()),
        ScalarOrList::List(l) => Err(Error::InvalidConfig(format!(
            "{what}: expected {d} values, got {}",
            l.len()
        ))),
    }
}

impl GmmPrior {
    /// Parse a prior definition (TOML). `base_dir` resolves `mean_file` paths.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let file: PriorFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("prior file: {e}")))?;
        let d = file.height * file.width;
        let mut components = Vec::with_capacity(file.component.len());
        for spec in file.component {
            let mean = match (&spec.mean, &spec.mean_file) {
                (Some(m), None) => ImageGrid::new(
                    file.height,
                    file.width,
                    expand(m, d, &format!("component '{}' mean", spec.label))?,
                )?,
                (None, Some(path)) => {
                    let path = match base_dir {
                        Some(dir) => dir.join(path),
                        None => path.into(),
                    };
                    let img = crate::pgm::read_pgm(&path)?;
                    img.ensure_shape((file.height, file.width))?;
                    img
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "component '{}': give exactly one of mean / mean_file",
                        spec.label
                    )))
                }
            };
            components.push(Component {
                variance: expand(&spec.variance, d, &format!("component '{}' variance", spec.label))?,
                label: spec.label,
                weight: spec.weight,
                mean,
            });
        }
        GmmPrior::new(file.height, file.width, components)
    }

    pub fn to_toml_string(&self) -> String {
        let file = PriorFile {
            height: self.height,
            width: self.width,
            component: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    label: c.label.clone(),
                    weight: c.weight,
                    mean: Some(ScalarOrList::List(c.mean.values().to_vec())),
                    mean_file: None,
                    variance: if c.variance.iter().all(|v| *v == c.variance[0]) {
                        ScalarOrList::Scalar(c.variance[0])
                    } else {
                        ScalarOrList::List(c.variance.clone())
                    },
                })
                .collect(),
        };
        toml::to_string(&file).expect("prior serializes")
    }

    /// Load `builtin:<name>` or a TOML file.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(name) = source.strip_prefix("builtin:") {
            return builtin(name);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }
}

/// Built-in toy priors.
pub fn builtin(name: &str) -> Result<GmmPrior> {
    match name {
        "collision16" => Ok(toy::collision_prior()),
        "pair2x2" => Ok(toy::pair_2x2()),
        other => Err(Error::InvalidConfig(format!("unknown builtin prior '{other}'"))),
    }
}

pub mod toy {
    //! Small priors whose components are indistinguishable after pooling.

    use super::{Component, GmmPrior};
    use crate::grid::ImageGrid;

    pub const COLLISION_SIZE: usize = 16;
    pub const COLLISION_POOL: usize = 8;
    pub const COLLISION_STD: f64 = 0.05;
    pub const DETAIL_AMPLITUDE: f64 = 0.15;

    /// Smooth elliptical "face" on a darker background, values in about [0.2, 0.7].
    pub fn face_base(size: usize) -> ImageGrid {
        let c = (size as f64 - 1.0) / 2.0;
        ImageGrid::from_fn(size, size, |r, col| {
            let dy = (r as f64 - c) / (0.45 * size as f64);
            let dx = (col as f64 - c) / (0.36 * size as f64);
            let rho = dx * dx + dy * dy;
            0.2 + 0.5 * (-(rho * rho) * 1.5).exp()
        })
    }

    /// Eye-line bars with their `pool x pool` block means removed, scaled to
    /// `amplitude` peak: invisible to average pooling by construction.
    pub fn detail_pattern(size: usize, pool: usize, amplitude: f64) -> ImageGrid {
        let eye_row = size * 5 / 16;
        let raw = ImageGrid::from_fn(size, size, |r, c| {
            let on_row = r == eye_row || r == eye_row + 1;
            let left = c >= size * 3 / 16 && c < size * 7 / 16;
            let right = c >= size * 9 / 16 && c < size * 13 / 16;
            if on_row && (left || right) {
                1.0
            } else {
                0.0
            }
        });
        let pooled = ImageGrid::from_fn(size / pool, size / pool, |br, bc| {
            let mut acc = 0.0;
            for r in br * pool..(br + 1) * pool {
                for c in bc * pool..(bc + 1) * pool {
                    acc += raw.get(r, c);
                }
            }
            acc / (pool * pool) as f64
        });
        let centered = ImageGrid::from_fn(size, size, |r, c| raw.get(r, c) - pooled.get(r / pool, c / pool));
        let peak = centered.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        centered.scale(amplitude / peak)
    }

    /// Two 16x16 components `base +/- detail` that coincide after 8x8 average
    /// pooling; per-pixel std 0.05; labels `glasses` and `plain`.
    pub fn collision_prior() -> GmmPrior {
        let n = COLLISION_SIZE;
        let base = face_base(n);
        let detail = detail_pattern(n, COLLISION_POOL, DETAIL_AMPLITUDE);
        let var = vec![COLLISION_STD * COLLISION_STD; n * n];
        GmmPrior::new(
            n,
            n,
            vec![
                Component {
                    label: "glasses".into(),
                    weight: 0.5,
                    mean: base.add(&detail),
                    variance: var.clone(),
                },
                Component {
                    label: "plain".into(),
                    weight: 0.5,
                    mean: base.sub(&detail),
                    variance: var,
                },
            ],
        )
        .expect("builtin prior is valid")
    }

    /// Two 2x2 checkerboard components with equal block mean 0.5.
    pub fn pair_2x2() -> GmmPrior {
        let var = vec![0.05 * 0.05; 4];
        GmmPrior::new(
            2,
            2,
            vec![
                Component {
                    label: "A".into(),
                    weight: 0.5,
                    mean: ImageGrid::from_raw(2, 2, vec![0.2, 0.8, 0.8, 0.2]),
                    variance: var.clone(),
                },
                Component {
                    label: "B".into(),
                    weight: 0.5,
                    mean: ImageGrid::from_raw(2, 2, vec![0.8, 0.2, 0.2, 0.8]),
                    variance: var,
                },
            ],
        )
        .expect("builtin prior is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{estimate_x0, make_linear_schedule, ScheduleConfig};
    use proptest::prelude::*;

    fn comp(label: &str, weight: f64, mean: Vec<f64>, var: Vec<f64>, w: usize) -> Component {
        let h = mean.len() / w;
        Component {
            label: label.into(),
            weight,
            mean: ImageGrid::new(h, w, mean).unwrap(),
            variance: var,
        }
    }

    fn abc() -> GmmPrior {
        GmmPrior::new(
            1,
            2,
            vec![
                comp("A", 0.5, vec![0.0, 1.0], vec![0.1, 0.2], 2),
                comp("B", 0.3, vec![1.0, -1.0], vec![0.3, 0.1], 2),
                comp("C", 0.2, vec![-0.5, 0.5], vec![0.05, 0.4], 2),
            ],
        )
        .unwrap()
    }

    fn sched() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn restrict_examples() {
        let p = abc();
        assert_eq!(p.condition_restrict(&Condition::Null).unwrap(), p);
        let bc = p.condition_restrict(&Condition::labels(["B", "C"])).unwrap();
        let w = bc.weights();
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
        assert_eq!(bc.labels(), vec!["B", "C"]);

        let pair = toy::pair_2x2();
        let a = pair.condition_restrict(&Condition::labels(["A"])).unwrap();
        assert_eq!(a.weights(), vec![1.0]);
    }

    #[test]
    fn bad_conditions() {
        let p = abc();
        assert!(matches!(
            p.condition_restrict(&Condition::labels(["Z"])),
            Err(Error::UnsatisfiableCondition(_))
        ));
        assert!(matches!(
            p.condition_restrict(&Condition::Labels(vec![])),
            Err(Error::UnsatisfiableCondition(_))
        ));
        let zero = GmmPrior::new(
            1,
            1,
            vec![comp("A", 1.0, vec![0.0], vec![1.0], 1), comp("B", 0.0, vec![1.0], vec![1.0], 1)],
        )
        .unwrap();
        assert!(zero.condition_restrict(&Condition::labels(["B"])).is_err());
    }

    #[test]
    fn condition_parse() {
        assert_eq!(Condition::parse("null").unwrap(), Condition::Null);
        assert_eq!(Condition::parse(" ").unwrap(), Condition::Null);
        assert_eq!(Condition::parse("a, b").unwrap(), Condition::labels(["a", "b"]));
        assert_eq!(Condition::labels(["a", "b"]).to_string(), "a,b");
    }

    #[test]
    fn invalid_priors() {
        let bad_var = GmmPrior::new(1, 1, vec![comp("A", 1.0, vec![0.0], vec![0.0], 1)]);
        assert!(bad_var.is_err());
        let bad_sum = GmmPrior::new(1, 1, vec![comp("A", 0.9, vec![0.0], vec![1.0], 1)]);
        assert!(bad_sum.is_err());
        let dup = GmmPrior::new(
            1,
            1,
            vec![comp("A", 0.5, vec![0.0], vec![1.0], 1), comp("A", 0.5, vec![0.0], vec![1.0], 1)],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn single_gaussian_closed_form() {
        let s = sched();
        let (mu, v) = (vec![0.3, -0.7, 1.1, 0.0], 0.04);
        let p = GmmPrior::new(2, 2, vec![comp("A", 1.0, mu.clone(), vec![v; 4], 2)]).unwrap();
        let mut rng = SeededRng::new(1);
        for t in [1, 10, 75, 150] {
            let x = rng.normal_grid(2, 2);
            let ab = s.alpha_bar(t);
            let gain = ab.sqrt() * v / (ab * v + 1.0 - ab);
            let m = p.posterior_mean(&x, t, &s, &Condition::Null).unwrap();
            for i in 0..4 {
                let want = mu[i] + gain * (x.values()[i] - ab.sqrt() * mu[i]);
                assert!((m.values()[i] - want).abs() < 1e-12);
            }
            let eps = p.eps_pred(&x, t, &s, &Condition::Null).unwrap();
            let back = estimate_x0(&x, &eps, t, &s).unwrap();
            assert!(back.max_abs_diff(&m) < 1e-8, "t={t}");
        }
    }

    #[test]
    fn point_mass_returns_mean() {
        let s = sched();
        let p = GmmPrior::new(1, 2, vec![comp("A", 1.0, vec![0.4, 0.6], vec![1e-30; 2], 2)]).unwrap();
        let mut rng = SeededRng::new(2);
        for t in [1, 80, 150] {
            let x = rng.normal_grid(1, 2).scale(10.0);
            let m = p.posterior_mean(&x, t, &s, &Condition::Null).unwrap();
            assert!(m.max_abs_diff(&p.components()[0].mean) < 1e-20);
        }
        for _ in 0..10 {
            let (x, label) = p.sample(&mut rng);
            assert_eq!(label, "A");
            assert!(x.max_abs_diff(&p.components()[0].mean) < 1e-13);
        }
    }

    #[test]
    fn separated_components_responsibility() {
        let s = sched();
        let p = GmmPrior::new(
            1,
            2,
            vec![
                comp("A", 0.5, vec![-3.0, -3.0], vec![0.01; 2], 2),
                comp("B", 0.5, vec![3.0, 3.0], vec![0.01; 2], 2),
            ],
        )
        .unwrap();
        let t = 40;
        let ab = s.alpha_bar(t);
        let x = p.components()[1].mean.scale(ab.sqrt());
        let r = p.responsibilities(&x, t, &s, &Condition::Null).unwrap();
        // direct density evaluation
        let dens: Vec<f64> = p
            .components()
            .iter()
            .map(|c| {
                (0..2)
                    .map(|i| normal_pdf(x.values()[i], ab.sqrt() * c.mean.values()[i], ab * 0.01 + 1.0 - ab))
                    .product::<f64>()
                    * c.weight
            })
            .collect();
        let oracle = dens[1] / (dens[0] + dens[1]);
        assert!((r[1] - oracle).abs() < 1e-12);
        assert!(r[1] > 0.999);
        let m = p.posterior_mean(&x, t, &s, &Condition::Null).unwrap();
        assert!(m.max_abs_diff(&p.components()[1].mean) < 1e-3);
    }

    #[test]
    fn underflowing_responsibilities_stay_finite() {
        let s = sched();
        let p = abc();
        let x = ImageGrid::new(1, 2, vec![1e6, -1e6]).unwrap();
        let m = p.posterior_mean(&x, 5, &s, &Condition::Null).unwrap();
        assert!(m.all_finite());
    }

    #[test]
    fn tweedie_matches_score() {
        let s = sched();
        let p = GmmPrior::new(1, 3, vec![comp("A", 1.0, vec![0.2, 0.5, -0.1], vec![0.3, 0.02, 1.5], 3)]).unwrap();
        let mut rng = SeededRng::new(3);
        for t in [2, 30, 149] {
            let x = rng.normal_grid(1, 3);
            let ab = s.alpha_bar(t);
            let score = p.score(&x, t, &s, &Condition::Null).unwrap();
            let tweedie = x.add(&score.scale(1.0 - ab)).scale(1.0 / ab.sqrt());
            let m = p.posterior_mean(&x, t, &s, &Condition::Null).unwrap();
            assert!(m.max_abs_diff(&tweedie) < 1e-8);
        }
    }

    #[test]
    fn denoiser_matches_quadrature_1d() {
        let s = sched();
        let p = GmmPrior::new(
            1,
            1,
            vec![
                comp("A", 0.3, vec![-0.8], vec![0.05], 1),
                comp("B", 0.5, vec![0.4], vec![0.2], 1),
                comp("C", 0.2, vec![1.5], vec![0.01], 1),
            ],
        )
        .unwrap();
        for (t, xt) in [(10, 0.3), (60, -0.5), (140, 1.2)] {
            let ab = s.alpha_bar(t);
            let n = 200_000;
            let (lo, hi) = (-6.0, 6.0);
            let h = (hi - lo) / n as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..=n {
                let x0 = lo + i as f64 * h;
                let prior: f64 = p
                    .components()
                    .iter()
                    .map(|c| c.weight * normal_pdf(x0, c.mean.values()[0], c.variance[0]))
                    .sum();
                let wq = if i == 0 || i == n { 0.5 } else { 1.0 };
                let f = wq * prior * normal_pdf(xt, ab.sqrt() * x0, 1.0 - ab);
                num += x0 * f;
                den += f;
            }
            let m = p
                .posterior_mean(&ImageGrid::constant(1, 1, xt), t, &s, &Condition::Null)
                .unwrap();
            assert!((m.values()[0] - num / den).abs() < 1e-4, "t={t}");
        }
    }

    #[test]
    fn exact_posterior_scalar_by_hand() {
        let p = GmmPrior::new(1, 1, vec![comp("A", 1.0, vec![0.0], vec![1.0], 1)]).unwrap();
        let op = LinearOperator::identity(1, 1);
        let post = gmm_exact_posterior(&p, &op, &ImageGrid::constant(1, 1, 1.0), 1.0).unwrap();
        assert!((post.means[0][0] - 0.5).abs() < 1e-14);
        assert!((post.covariances[0][(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn exact_posterior_identity_collapse() {
        let p = abc();
        let op = LinearOperator::identity(1, 2);
        let y = ImageGrid::new(1, 2, vec![0.9, -0.8]).unwrap();
        let post = gmm_exact_posterior(&p, &op, &y, 0.0).unwrap();
        for m in &post.means {
            assert!((m[0] - 0.9).abs() < 1e-6 && (m[1] + 0.8).abs() < 1e-6);
        }
        assert!(post.weight_of("B") > 0.99);
    }

    #[test]
    fn exact_posterior_weights_match_quadrature_2d() {
        let p = abc();
        // y = x0[0] + x0[1] + noise, noise var 0.05
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let op = LinearOperator::dense(a, (1, 2), (1, 1)).unwrap();
        let (y, nv) = (0.2, 0.05);
        let post = gmm_exact_posterior(&p, &op, &ImageGrid::constant(1, 1, y), nv).unwrap();
        let n = 800;
        let (lo, hi) = (-5.0, 5.0);
        let h = (hi - lo) / n as f64;
        let mut mass = vec![0.0; 3];
        for i in 0..=n {
            for j in 0..=n {
                let (u, v) = (lo + i as f64 * h, lo + j as f64 * h);
                let lik = normal_pdf(y, u + v, nv);
                for (k, c) in p.components().iter().enumerate() {
                    mass[k] += c.weight
                        * normal_pdf(u, c.mean.values()[0], c.variance[0])
                        * normal_pdf(v, c.mean.values()[1], c.variance[1])
                        * lik;
                }
            }
        }
        let total: f64 = mass.iter().sum();
        let tv: f64 = 0.5
            * mass
                .iter()
                .zip(&post.weights)
                .map(|(m, w)| (m / total - w).abs())
                .sum::<f64>();
        assert!(tv < 1e-4, "tv={tv}");
    }

    #[test]
    fn sampling_frequencies() {
        let p = abc();
        let mut rng = SeededRng::new(4);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let (_, l) = p.sample(&mut rng);
            counts[p.label_index(l).unwrap()] += 1;
        }
        for (c, w) in counts.iter().zip(p.weights()) {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((*c as f64 - n as f64 * w).abs() < 3.0 * sd);
        }

        let one = GmmPrior::new(
            1,
            1,
            vec![comp("A", 1.0, vec![0.0], vec![1.0], 1), comp("B", 0.0, vec![1.0], vec![1.0], 1)],
        )
        .unwrap();
        assert!((0..100_000).all(|_| one.sample(&mut rng).1 == "A"));
    }

    #[test]
    fn assign_rules() {
        let p = GmmPrior::new(
            1,
            2,
            vec![
                comp("A", 0.5, vec![0.0, 0.0], vec![0.01; 2], 2),
                comp("B", 0.5, vec![0.6, 0.0], vec![0.01; 2], 2),
            ],
        )
        .unwrap();
        assert_eq!(p.component_assign(&p.components()[1].mean).unwrap(), "B");
        let mid = ImageGrid::new(1, 2, vec![0.3, 0.0]).unwrap();
        assert_eq!(p.component_assign(&mid).unwrap(), "A");

        // means 6 sigma apart
        let mut rng = SeededRng::new(5);
        for k in 0..2 {
            let only = p.condition_restrict(&Condition::labels([p.labels()[k]])).unwrap();
            let hits = (0..2000)
                .filter(|_| p.component_assign_index(&only.sample(&mut rng).0).unwrap() == k)
                .count();
            assert!(hits as f64 >= 0.99 * 2000.0);
        }
    }

    #[test]
    fn toml_round_trip() {
        let p = abc();
        let back = GmmPrior::from_toml_str(&p.to_toml_string(), None).unwrap();
        assert_eq!(back, p);
        let text = "height = 1\nwidth = 2\n[[component]]\nlabel = \"x\"\nweight = 1.0\nmean = 0.5\nvariance = 0.1\n";
        let q = GmmPrior::from_toml_str(text, None).unwrap();
        assert_eq!(q.components()[0].mean.values(), &[0.5, 0.5]);
        let unknown = format!("{text}colour = 1\n");
        assert!(GmmPrior::from_toml_str(&unknown, None).is_err());
    }

    #[test]
    fn collision_prior_pools_identically() {
        let p = toy::collision_prior();
        let op = LinearOperator::avgpool(16, 16, 8).unwrap();
        let a = op.apply(&p.components()[0].mean).unwrap();
        let b = op.apply(&p.components()[1].mean).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let sep = p.components()[0].mean.sub(&p.components()[1].mean).norm();
        assert!(sep > 6.0 * toy::COLLISION_STD);

        let q = toy::pair_2x2();
        let op = LinearOperator::avgpool(2, 2, 2).unwrap();
        let a = op.apply(&q.components()[0].mean).unwrap();
        let b = op.apply(&q.components()[1].mean).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    proptest! {
        #[test]
        fn conditioning_commutes(seed in any::<u64>(), t in 1usize..=150, keep in 0usize..3) {
            let s = make_linear_schedule(150, 1e-4, 0.02).unwrap();
            let p = abc();
            let labels: Vec<&str> = p.labels().into_iter().filter(|l| *l != p.labels()[keep]).collect();
            let cond = Condition::labels(labels);
            let restricted = p.condition_restrict(&cond).unwrap();
            let x = SeededRng::new(seed).normal_grid(1, 2);
            let a = p.eps_pred(&x, t, &s, &cond).unwrap();
            let b = restricted.eps_pred(&x, t, &s, &Condition::Null).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-10);
        }

        #[test]
        fn eps_reproduces_mean(seed in any::<u64>(), t in 1usize..=150) {
            let s = make_linear_schedule(150, 1e-4, 0.02).unwrap();
            let p = abc();
            let x = SeededRng::new(seed).normal_grid(1, 2);
            let eps = p.eps_pred(&x, t, &s, &Condition::Null).unwrap();
            let m = p.posterior_mean(&x, t, &s, &Condition::Null).unwrap();
            prop_assert!(estimate_x0(&x, &eps, t, &s).unwrap().max_abs_diff(&m) < 1e-10);
        }
    }
}
