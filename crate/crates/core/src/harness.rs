//! Experiment driver: configuration, per-seed runs, reports, trajectory
//! statistics and parameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::degrade::{
    apply_overrides, degradation_operator, sample_spec_for_seed, synthesize_lq, DegradationSpec,
};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::gmm::{gmm_exact_posterior, Condition, GmmPrior};
use crate::grid::ImageGrid;
use crate::guidance::{
    coarse_restore, ddnm_sample, dps_sample, mcs_sample, unguided_sample, ChainStart,
    GuidanceConfig, Measurement, SampleOutput, StepRecord, Trajectory,
};
use crate::haar::haar_decompose;
use crate::linops::LinearOperator;
use crate::pgm::{read_pgm, write_pgm};
use crate::rng::{streams, SeededRng};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Mcs,
    Dps,
    Ddnm,
    Unguided,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mcs" => Ok(Self::Mcs),
            "dps" => Ok(Self::Dps),
            "ddnm" => Ok(Self::Ddnm),
            "unguided" => Ok(Self::Unguided),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampler '{other}' (expected mcs, dps, ddnm or unguided)"
            ))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mcs => "mcs",
            Self::Dps => "dps",
            Self::Ddnm => "ddnm",
            Self::Unguided => "unguided",
        })
    }
}

/// Non-empty, duplicate-free seed list.
///
/// Text forms: `a..b` (end exclusive), `a..=b`, or a comma-separated list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeedList(Vec<u64>);

impl SeedList {
    pub fn new(seeds: Vec<u64>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("seed list has duplicates".into()));
        }
        Ok(Self(seeds))
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for SeedList {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = || Error::InvalidConfig(format!("bad seed list '{text}'"));
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
        if let Some((a, b)) = text.split_once("..=") {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(bad());
            }
            return Self::new((a..=b).collect());
        }
        if let Some((a, b)) = text.split_once("..") {
            return Self::new((num(a)?..num(b)?).collect());
        }
        Self::new(text.split(',').map(num).collect::<Result<_>>()?)
    }
}

impl<'de> Deserialize<'de> for SeedList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List(Vec<u64>),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::List(v) => SeedList::new(v),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMode {
    /// `y = A x_gt + N(0, noise_std^2)` with the experiment operator.
    #[default]
    Operator,
    /// Blur, pool, noise and JPEG applied to `x_gt`.
    Synthetic,
    /// Low-quality inputs listed in a `degrade` manifest; no ground truth.
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub mode: DegradationMode,
    /// Operator mode: measurement noise std on the [0, 1] scale.
    pub noise_std: f64,
    /// Synthetic mode: fixed parameters; unset ones are drawn per seed.
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub quality: Option<u8>,
    pub scale: usize,
    /// Manifest mode: path to the manifest written by `mcs degrade`.
    pub manifest: Option<PathBuf>,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            mode: DegradationMode::Operator,
            noise_std: 0.0,
            sigma: None,
            delta: None,
            quality: None,
            scale: 8,
            manifest: None,
        }
    }
}

/// Operator name that selects the per-input blur-and-pool degradation.
pub const DEGRADATION_OPERATOR: &str = "degradation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `builtin:<name>` or a prior TOML file.
    pub prior: String,
    /// Operator spec (see [`LinearOperator::parse`]) or `degradation`.
    pub operator: String,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default = "default_condition")]
    pub condition: String,
    pub seeds: SeedList,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    /// Gaussian smoothing applied after pseudo-inverse upsampling for `y0`.
    #[serde(default = "default_restore_sigma")]
    pub restore_sigma: f64,
    /// Compute the exact-posterior oracle columns (operator mode only).
    #[serde(default = "default_true")]
    pub oracle: bool,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub degradation: DegradationConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
}

fn default_condition() -> String {
    "null".into()
}

fn default_stride() -> usize {
    5
}

fn default_restore_sigma() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Parse TOML; relative `prior` and `manifest` paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("experiment config: {e}")))?;
        if let Some(dir) = base_dir {
            if !cfg.prior.starts_with("builtin:") && Path::new(&cfg.prior).is_relative() {
                cfg.prior = dir.join(&cfg.prior).to_string_lossy().into_owned();
            }
            if let Some(m) = &cfg.degradation.manifest {
                if m.is_relative() {
                    cfg.degradation.manifest = Some(dir.join(m));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be >= 1".into());
        }
        if !(self.restore_sigma >= 0.0 && self.restore_sigma.is_finite()) {
            return bad(format!("restore_sigma must be >= 0, got {}", self.restore_sigma));
        }
        let d = &self.degradation;
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", d.noise_std));
        }
        if !self.prior.starts_with("builtin:") && !Path::new(&self.prior).is_file() {
            return bad(format!("prior file '{}' does not exist", self.prior));
        }
        match d.mode {
            DegradationMode::Manifest => match &d.manifest {
                Some(m) if m.is_file() => {}
                Some(m) => return bad(format!("manifest '{}' does not exist", m.display())),
                None => return bad("manifest mode needs degradation.manifest".into()),
            },
            DegradationMode::Synthetic | DegradationMode::Operator => {
                if d.manifest.is_some() {
                    return bad("degradation.manifest is only used in manifest mode".into());
                }
            }
        }
        if self.operator.trim() == DEGRADATION_OPERATOR && d.mode == DegradationMode::Operator {
            return bad("operator 'degradation' needs synthetic or manifest mode".into());
        }
        self.guidance.validate()?;
        self.schedule.build()?;
        Condition::parse(&self.condition)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// One line of a degradation manifest: `filename,sigma,s,delta,q,seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub filename: String,
    pub spec: DegradationSpec,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.spec;
        write!(
            f,
            "{},{:?},{},{:?},{},{}",
            self.filename, s.sigma, s.scale, s.delta, s.quality, s.seed
        )
    }
}

impl FromStr for ManifestEntry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        let bad = || Error::Parse(format!("manifest line '{line}'"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            filename: f[0].to_string(),
            spec: DegradationSpec {
                sigma: f[1].parse().map_err(|_| bad())?,
                scale: f[2].parse().map_err(|_| bad())?,
                delta: f[3].parse().map_err(|_| bad())?,
                quality: f[4].parse().map_err(|_| bad())?,
                seed: f[5].parse().map_err(|_| bad())?,
            },
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `.pgm` files of a directory in lexicographic order, or the single file given.
pub fn list_pgm_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!("no .pgm files in {}", input.display())));
    }
    Ok(files)
}

/// Degrade each input with seed `seed ^ index`, writing the LQ images and the
/// manifest into `out_dir`.
pub fn degrade_batch(
    inputs: &[PathBuf],
    out_dir: &Path,
    scale: usize,
    seed: u64,
    overrides: Option<&str>,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = inputs
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let img_seed = seed ^ i as u64;
            let mut spec = sample_spec_for_seed(img_seed, scale)?;
            if let Some(text) = overrides {
                spec = apply_overrides(spec, text)?;
            }
            let gt = read_pgm(path)?;
            let lq = synthesize_lq(&gt, &spec)?;
            let filename = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("image_{i}.pgm"));
            write_pgm(&out_dir.join(&filename), &lq)?;
            Ok(ManifestEntry { filename, spec })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    /// Manifest filename in manifest mode.
    pub input: Option<String>,
    /// `||A x_out - y||`.
    pub residual: f64,
    /// `||A x_out - A x_gt||` when the ground truth is known.
    pub gt_residual: Option<f64>,
    pub psnr: Option<f64>,
    /// Log-density of `x_out` under the exact conditioned posterior.
    pub oracle_log_density: Option<f64>,
    /// Whether one exact-posterior draw lands in an admissible component.
    pub oracle_match: Option<bool>,
    pub gt_label: Option<String>,
    pub label: String,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub runs: usize,
    pub response_rate: f64,
    pub mean_residual: f64,
    pub mean_gt_residual: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub mean_oracle_log_density: Option<f64>,
    pub oracle_response_rate: Option<f64>,
    pub label_counts: BTreeMap<String, usize>,
}

fn mean_of<I: Iterator<Item = Option<f64>>>(it: I) -> Option<f64> {
    let vals: Option<Vec<f64>> = it.collect();
    vals.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl Aggregates {
    pub fn from_rows(rows: &[SeedRow]) -> Self {
        let n = rows.len();
        let mut label_counts = BTreeMap::new();
        for r in rows {
            *label_counts.entry(r.label.clone()).or_insert(0) += 1;
        }
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            runs: n,
            response_rate: rate(rows.iter().filter(|r| r.matched).count()),
            mean_residual: mean_of(rows.iter().map(|r| Some(r.residual))).unwrap_or(0.0),
            mean_gt_residual: mean_of(rows.iter().map(|r| r.gt_residual)),
            mean_psnr: mean_of(rows.iter().map(|r| r.psnr)),
            mean_oracle_log_density: mean_of(rows.iter().map(|r| r.oracle_log_density)),
            oracle_response_rate: mean_of(
                rows.iter().map(|r| r.oracle_match.map(|m| if m { 1.0 } else { 0.0 })),
            ),
            label_counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sampler: SamplerKind,
    pub condition: String,
    pub rows: Vec<SeedRow>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn new(sampler: SamplerKind, condition: &Condition, rows: Vec<SeedRow>) -> Self {
        let aggregates = Aggregates::from_rows(&rows);
        Self {
            sampler,
            condition: condition.to_string(),
            rows,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }

    /// Aggregates agree with a recomputation from the rows.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_rows(&self.rows) == self.aggregates
    }
}

/// `10 log10(1 / mse)` for images on [0, 1], capped at 200 dB.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let mse = a.sub(b).norm_sq() / a.len() as f64;
    -10.0 * mse.max(1e-20).log10()
}

// ---------------------------------------------------------------------------
// Experiment runs
// ---------------------------------------------------------------------------

struct Case {
    seed: u64,
    input: Option<ManifestEntry>,
}

struct Context {
    cfg: ExperimentConfig,
    prior: GmmPrior,
    cond: Condition,
    sched: NoiseSchedule,
    fixed_op: Option<LinearOperator>,
    posterior_prior: GmmPrior,
    manifest_dir: Option<PathBuf>,
}

/// Run one seed of an already validated configuration; exposed for sweeps and tests.
pub struct Experiment {
    ctx: Context,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let prior = GmmPrior::load(&cfg.prior)?;
        let cond = Condition::parse(&cfg.condition)?;
        let posterior_prior = prior.condition_restrict(&cond)?;
        let fixed_op = if cfg.operator.trim() == DEGRADATION_OPERATOR {
            None
        } else {
            Some(LinearOperator::parse(&cfg.operator, prior.shape())?)
        };
        let manifest_dir = cfg
            .degradation
            .manifest
            .as_ref()
            .map(|m| m.parent().map(Path::to_path_buf).unwrap_or_default());
        Ok(Self {
            ctx: Context {
                sched: cfg.schedule.build()?,
                cfg: cfg.clone(),
                prior,
                cond,
                fixed_op,
                posterior_prior,
                manifest_dir,
            },
        })
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.ctx.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.ctx.sched
    }

    fn cases(&self) -> Result<Vec<Case>> {
        let seeds = self.ctx.cfg.seeds.as_slice();
        if self.ctx.cfg.degradation.mode != DegradationMode::Manifest {
            return Ok(seeds.iter().map(|&seed| Case { seed, input: None }).collect());
        }
        let path = self.ctx.cfg.degradation.manifest.as_ref().expect("validated");
        let entries = read_manifest(path)?;
        Ok(entries
            .iter()
            .flat_map(|e| seeds.iter().map(move |&seed| Case { seed, input: Some(e.clone()) }))
            .collect())
    }

    fn synthetic_spec(&self, seed: u64) -> Result<DegradationSpec> {
        let d = &self.ctx.cfg.degradation;
        let mut spec = sample_spec_for_seed(seed, d.scale)?;
        if let Some(s) = d.sigma {
            spec.sigma = s;
        }
        if let Some(s) = d.delta {
            spec.delta = s;
        }
        if let Some(q) = d.quality {
            spec.quality = q;
        }
        Ok(spec)
    }

    /// Ground truth (when known), measurement, and guidance operator of a case.
    fn measurement(&self, case: &Case) -> Result<(Option<(ImageGrid, String)>, ImageGrid, LinearOperator)> {
        let ctx = &self.ctx;
        let (h, w) = ctx.prior.shape();
        let draw_gt = || {
            let mut rng = SeededRng::with_stream(case.seed, streams::GROUND_TRUTH);
            let (x, label) = ctx.prior.sample(&mut rng);
            (x, label.to_string())
        };
        let pick_op = |spec: &DegradationSpec| match &ctx.fixed_op {
            Some(op) => Ok(op.clone()),
            None => degradation_operator(h, w, spec.sigma, spec.scale),
        };
        match ctx.cfg.degradation.mode {
            DegradationMode::Operator => {
                let op = ctx.fixed_op.clone().expect("validated");
                let (gt, label) = draw_gt();
                let mut y = op.apply(&gt)?;
                let std = ctx.cfg.degradation.noise_std;
                if std > 0.0 {
                    let mut rng = SeededRng::with_stream(case.seed, streams::DEGRADATION_NOISE);
                    for v in y.values_mut() {
                        *v += std * rng.normal();
                    }
                }
                Ok((Some((gt, label)), y, op))
            }
            DegradationMode::Synthetic => {
                let (gt, label) = draw_gt();
                let spec = self.synthetic_spec(case.seed)?;
                let y = synthesize_lq(&gt, &spec)?;
                Ok((Some((gt, label)), y, pick_op(&spec)?))
            }
            DegradationMode::Manifest => {
                let entry = case.input.as_ref().expect("manifest case");
                let dir = ctx.manifest_dir.clone().unwrap_or_default();
                let y = read_pgm(&dir.join(&entry.filename))?;
                Ok((None, y, pick_op(&entry.spec)?))
            }
        }
    }

    fn sample(&self, seed: u64, y: &ImageGrid, op: &LinearOperator) -> Result<SampleOutput> {
        let ctx = &self.ctx;
        let cfg = &ctx.cfg;
        let mut rng = SeededRng::with_stream(seed, streams::SAMPLER);
        let stride = cfg.snapshot_stride;
        match cfg.sampler {
            SamplerKind::Mcs => {
                let y0 = coarse_restore(y, op, cfg.restore_sigma)?;
                mcs_sample(&ctx.prior, &y0, op, &ctx.cond, &cfg.guidance, &ctx.sched, &mut rng, stride)
            }
            SamplerKind::Unguided => {
                let y0 = coarse_restore(y, op, cfg.restore_sigma)?;
                let start = ChainStart::Blend {
                    y0: &y0,
                    t_start: cfg.guidance.start_step(ctx.sched.steps()),
                };
                unguided_sample(&ctx.prior, start, &ctx.cond, &ctx.sched, &mut rng, stride)
            }
            SamplerKind::Dps => {
                dps_sample(&ctx.prior, y, op, &ctx.cond, &cfg.guidance, &ctx.sched, &mut rng, stride)
            }
            SamplerKind::Ddnm => ddnm_sample(&ctx.prior, y, op, &ctx.cond, &ctx.sched, &mut rng, stride),
        }
    }

    fn run_case(&self, case: &Case) -> Result<(SeedRow, SampleOutput)> {
        let ctx = &self.ctx;
        let (gt, y, op) = self.measurement(case)?;
        let out = self.sample(case.seed, &y, &op)?;
        let x = &out.x0;
        let ax = op.apply(x)?;
        let label = ctx.prior.component_assign(x)?.to_string();
        let (oracle_log_density, oracle_match) =
            if ctx.cfg.oracle && ctx.cfg.degradation.mode == DegradationMode::Operator {
                let nv = ctx.cfg.degradation.noise_std.powi(2);
                let post = gmm_exact_posterior(&ctx.posterior_prior, &op, &y, nv)?;
                let mut rng = SeededRng::with_stream(case.seed, streams::ORACLE);
                let (draw, _) = post.sample(&mut rng);
                let draw_label = ctx.prior.component_assign(&draw)?;
                (Some(post.log_density(x)?), Some(ctx.cond.admits(draw_label)))
            } else {
                (None, None)
            };
        let row = SeedRow {
            seed: case.seed,
            input: case.input.as_ref().map(|e| e.filename.clone()),
            residual: ax.sub(&y).norm(),
            gt_residual: gt.as_ref().map(|(g, _)| op.apply(g).map(|ag| ax.sub(&ag).norm())).transpose()?,
            psnr: gt.as_ref().map(|(g, _)| psnr(x, g)),
            oracle_log_density,
            oracle_match,
            gt_label: gt.map(|(_, l)| l),
            matched: ctx.cond.admits(&label),
            label,
        };
        Ok((row, out))
    }

    fn write_case(&self, dir: &Path, case: &Case, out: &SampleOutput) -> Result<()> {
        let stem = match &case.input {
            Some(e) => format!(
                "{}_seed_{}",
                Path::new(&e.filename).file_stem().unwrap_or_default().to_string_lossy(),
                case.seed
            ),
            None => format!("seed_{}", case.seed),
        };
        write_pgm(&dir.join(format!("{stem}.pgm")), &out.x0)?;
        write_trajectory_csv(&dir.join(format!("{stem}_traj.csv")), &out.trajectory, out.x0.shape())
    }

    /// Run every case; rows come back in case order regardless of scheduling.
    pub fn run(&self) -> Result<(RunReport, Vec<SampleOutput>)> {
        let cases = self.cases()?;
        let dir = self.ctx.cfg.output_dir.clone();
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let results = cases
            .par_iter()
            .map(|case| {
                let (row, out) = self.run_case(case)?;
                if let Some(d) = &dir {
                    self.write_case(d, case, &out)?;
                }
                Ok((row, out))
            })
            .collect::<Vec<Result<_>>>();
        let mut rows = Vec::with_capacity(cases.len());
        let mut outs = Vec::with_capacity(cases.len());
        for (case, r) in cases.iter().zip(results) {
            let (row, out) = r.map_err(|e| Error::Seed {
                seed: case.seed,
                source: Box::new(e),
            })?;
            rows.push(row);
            outs.push(out);
        }
        let report = RunReport::new(self.ctx.cfg.sampler, &self.ctx.cond, rows);
        if let Some(d) = &dir {
            let path = d.join("report.json");
            fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        Ok((report, outs))
    }
}

/// Load, run and (when `output_dir` is set) write all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Experiment::new(cfg)?.run().map(|(report, _)| report)
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Write every step as `t,measurement,loss,grad_norm[,pixels...]`; pixels
/// (row-major, shortest round-trip formatting) only on snapshot steps.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, shape: (usize, usize)) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# height={} width={} stride={}", shape.0, shape.1, traj.snapshot_stride)
        .expect("write to vec");
    {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut buf);
        let csv_err = |e: csv::Error| Error::Parse(format!("trajectory csv: {e}"));
        w.write_record(["t", "measurement", "loss", "grad_norm", "pixels..."])
            .map_err(csv_err)?;
        for s in &traj.steps {
            let mut rec = vec![
                s.t.to_string(),
                s.measurement.map_or(String::new(), |m| m.as_str().to_string()),
                format!("{:?}", s.loss),
                format!("{:?}", s.grad_norm),
            ];
            if let Some(x) = &s.xhat {
                rec.extend(x.values().iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory_csv(&text)
}

pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let bad = |m: String| Error::Parse(format!("trajectory: {m}"));
    let (header, body) = text.split_once('\n').ok_or_else(|| bad("missing header".into()))?;
    let mut fields = BTreeMap::new();
    for kv in header.trim_start_matches('#').split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("header item '{kv}'")))?;
        let v: usize = v.parse().map_err(|_| bad(format!("header item '{kv}'")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("header lacks {k}")));
    let (h, w, stride) = (get("height")?, get("width")?, get("stride")?);
    let mut traj = Trajectory::new(stride);
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(body.as_bytes());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| bad(format!("bad number '{}'", &rec[i])))
        };
        if rec.len() != 4 && rec.len() != 4 + h * w {
            return Err(bad(format!("row has {} fields", rec.len())));
        }
        let measurement = match &rec[1] {
            "" => None,
            "forward" => Some(Measurement::Forward),
            "reverse" => Some(Measurement::Reverse),
            other => return Err(bad(format!("unknown measurement '{other}'"))),
        };
        let xhat = if rec.len() > 4 {
            let vals = (4..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
            Some(ImageGrid::new(h, w, vals)?)
        } else {
            None
        };
        traj.steps.push(StepRecord {
            t: rec[0].parse().map_err(|_| bad(format!("bad step '{}'", &rec[0])))?,
            measurement,
            loss: num(2)?,
            grad_norm: num(3)?,
            xhat,
        });
    }
    Ok(traj)
}

/// Statistics of one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub t: usize,
    /// Pixel variance of `xhat_t - xhat_final`: how far the estimate still is
    /// from where the chain ends up.
    pub variance: f64,
    /// Pixel variance of `xhat_t` itself.
    pub pixel_variance: f64,
    /// Pixel variance of the change since the previous snapshot, per step.
    pub step_variance: Option<f64>,
    /// `||VHD(xhat_t)||^2` of the one-level Haar transform.
    pub vhd_energy: f64,
    pub loss: f64,
}

pub fn trajectory_stats(traj: &Trajectory) -> Result<Vec<StatsRow>> {
    let snaps: Vec<(usize, &ImageGrid, f64)> = traj
        .steps
        .iter()
        .filter_map(|s| s.xhat.as_ref().map(|x| (s.t, x, s.loss)))
        .collect();
    let Some(&(_, last, _)) = snaps.last() else {
        return Err(Error::InvalidConfig("trajectory has no snapshots".into()));
    };
    let mut rows = Vec::with_capacity(snaps.len());
    for (i, &(t, x, loss)) in snaps.iter().enumerate() {
        let step_variance = (i > 0).then(|| {
            let (tp, xp, _) = snaps[i - 1];
            x.sub(xp).variance() / tp.abs_diff(t).max(1) as f64
        });
        rows.push(StatsRow {
            t,
            variance: x.sub(last).variance(),
            pixel_variance: x.variance(),
            step_variance,
            vhd_energy: haar_decompose(x)?.vhd.energy(),
            loss,
        });
    }
    Ok(rows)
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "variance", "pixel_variance", "step_variance", "vhd_energy", "loss"])
        .expect("write to vec");
    for r in rows {
        w.write_record([
            r.t.to_string(),
            format!("{:?}", r.variance),
            format!("{:?}", r.pixel_variance),
            r.step_variance.map_or(String::new(), |v| format!("{v:?}")),
            format!("{:?}", r.vhd_energy),
            format!("{:?}", r.loss),
        ])
        .expect("write to vec");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Boundary,
    Ratio,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "boundary" => Ok(Self::Boundary),
            "ratio" => Ok(Self::Ratio),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis '{other}' (expected boundary or ratio)"
            ))),
        }
    }
}

/// `w1/w2`, e.g. `1.5/1`; a bare number means `w/1`.
pub fn parse_ratio(text: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidConfig(format!("bad weight ratio '{text}'"));
    let (a, b) = text.split_once('/').unwrap_or((text, "1"));
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
        return Err(bad());
    }
    Ok((a, b))
}

/// Split a comma-separated grid.
pub fn parse_grid(text: &str) -> Result<Vec<String>> {
    let grid: Vec<String> = text
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub response_rate: f64,
    pub mean_residual: f64,
    /// Mean exact-posterior log-density, or mean PSNR when no oracle is available.
    pub quality: Option<f64>,
}

/// The config with one grid value applied.
pub fn apply_setting(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Boundary => {
            c.guidance.boundary = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad boundary '{value}'")))?;
        }
        SweepAxis::Ratio => c.guidance.weight_ratio = parse_ratio(value)?,
    }
    c.validate()?;
    Ok(c)
}

/// Run the experiment once per grid value with shared seeds. Per-seed
/// artifacts go to `<output_dir>/<setting>/` when an output directory is set.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, grid: &[String]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let settings = grid
        .iter()
        .map(|v| apply_setting(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    grid.iter()
        .zip(settings)
        .map(|(value, mut c)| {
            c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(value.replace('/', "_")));
            let a = run_experiment(&c)?.aggregates;
            Ok(SweepRow {
                setting: value.clone(),
                response_rate: a.response_rate,
                mean_residual: a.mean_residual,
                quality: a.mean_oracle_log_density.or(a.mean_psnr),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["setting", "response_rate", "mean_residual", "quality"])
        .expect("write to vec");
    for r in rows {
        w.write_record([
            r.setting.clone(),
            format!("{:?}", r.response_rate),
            format!("{:?}", r.mean_residual),
            r.quality.map_or(String::new(), |q| format!("{q:?}")),
        ])
        .expect("write to vec");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
}
