//! Linear degradation operators with transposes and Moore-Penrose pseudo-inverses.
//!
//! Average pooling has an analytic pseudo-inverse (`s^2 A^T`, block replication).
//! Every other kind is materialized into a dense matrix whose thin SVD is
//! computed once per operator and cached; `A^+ y` is then `V S^+ U^T y` with
//! singular values below `tol * sigma_max` dropped.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Default dense-materialization cap, in matrix entries (4096 x 4096).
pub const DEFAULT_DENSE_CAP: usize = 4096 * 4096;

/// Default relative singular-value cutoff for dense pseudo-inverses.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

pub type Shape = (usize, usize);

#[derive(Debug, Clone)]
pub enum OperatorKind {
    Identity,
    AvgPool { scale: usize },
    GaussianBlur { sigma: f64, kernel: Vec<f64> },
    Compose(Vec<LinearOperator>),
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone)]
struct Svd {
    u: DMatrix<f64>,
    singular: DVector<f64>,
    v_t: DMatrix<f64>,
}

impl Svd {
    fn pinv_apply(&self, y: &DVector<f64>, tol: f64) -> DVector<f64> {
        let s_max = self.singular.iter().cloned().fold(0.0, f64::max);
        let cutoff = tol * s_max;
        let mut coeffs = self.u.tr_mul(y);
        for (c, &s) in coeffs.iter_mut().zip(self.singular.iter()) {
            *c = if s > cutoff && s > 0.0 { *c / s } else { 0.0 };
        }
        self.v_t.tr_mul(&coeffs)
    }
}

/// An immutable linear map `A: R^(in_shape) -> R^(out_shape)`.
#[derive(Clone)]
pub struct LinearOperator {
    in_shape: Shape,
    out_shape: Shape,
    kind: OperatorKind,
    dense_cap: usize,
    svd: Arc<OnceLock<Svd>>,
}

impl fmt::Debug for LinearOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOperator")
            .field("in_shape", &self.in_shape)
            .field("out_shape", &self.out_shape)
            .field("kind", &self.kind)
            .finish()
    }
}

impl LinearOperator {
    fn build(in_shape: Shape, out_shape: Shape, kind: OperatorKind) -> Self {
        Self {
            in_shape,
            out_shape,
            kind,
            dense_cap: DEFAULT_DENSE_CAP,
            svd: Arc::new(OnceLock::new()),
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::build((height, width), (height, width), OperatorKind::Identity)
    }

    /// Mean over non-overlapping `scale x scale` blocks.
    pub fn avgpool(height: usize, width: usize, scale: usize) -> Result<Self> {
        if scale == 0 || height % scale != 0 || width % scale != 0 || height == 0 || width == 0 {
            return Err(Error::InvalidOperator(format!(
                "avgpool scale {scale} does not divide {height}x{width}"
            )));
        }
        Ok(Self::build(
            (height, width),
            (height / scale, width / scale),
            OperatorKind::AvgPool { scale },
        ))
    }

    /// Normalized truncated Gaussian of odd size `k`, reflect-padded borders.
    pub fn gaussian_blur(height: usize, width: usize, sigma: f64, k: usize) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidOperator(format!("blur sigma must be > 0, got {sigma}")));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidOperator(format!("blur kernel size must be odd, got {k}")));
        }
        if k > height.min(width) {
            return Err(Error::InvalidOperator(format!(
                "blur kernel size {k} exceeds image {height}x{width}"
            )));
        }
        Ok(Self::build(
            (height, width),
            (height, width),
            OperatorKind::GaussianBlur {
                sigma,
                kernel: gaussian_kernel_1d(sigma, k),
            },
        ))
    }

    /// `ops[0]` is applied first.
    pub fn compose(ops: Vec<LinearOperator>) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| Error::InvalidOperator("empty composition".into()))?;
        for pair in ops.windows(2) {
            if pair[0].out_shape != pair[1].in_shape {
                return Err(Error::InvalidOperator(format!(
                    "composition mismatch: {:?} feeds {:?}",
                    pair[0].out_shape, pair[1].in_shape
                )));
            }
        }
        let in_shape = first.in_shape;
        let out_shape = ops.last().unwrap().out_shape;
        Ok(Self::build(in_shape, out_shape, OperatorKind::Compose(ops)))
    }

    pub fn dense(matrix: DMatrix<f64>, in_shape: Shape, out_shape: Shape) -> Result<Self> {
        if matrix.nrows() != out_shape.0 * out_shape.1 || matrix.ncols() != in_shape.0 * in_shape.1 {
            return Err(Error::InvalidOperator(format!(
                "dense matrix {}x{} incompatible with {:?} -> {:?}",
                matrix.nrows(),
                matrix.ncols(),
                in_shape,
                out_shape
            )));
        }
        Ok(Self::build(in_shape, out_shape, OperatorKind::Dense(matrix)))
    }

    /// Override the dense-materialization cap (entries).
    pub fn with_dense_cap(mut self, cap: usize) -> Self {
        self.dense_cap = cap;
        self
    }

    pub fn in_shape(&self) -> Shape {
        self.in_shape
    }

    pub fn out_shape(&self) -> Shape {
        self.out_shape
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_shape.0 * self.in_shape.1
    }

    pub fn out_dim(&self) -> usize {
        self.out_shape.0 * self.out_shape.1
    }

    pub fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        x.ensure_shape(self.in_shape)?;
        Ok(self.apply_unchecked(x))
    }

    pub fn apply_transpose(&self, y: &ImageGrid) -> Result<ImageGrid> {
        y.ensure_shape(self.out_shape)?;
        Ok(self.transpose_unchecked(y))
    }

    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid {
        match &self.kind {
            OperatorKind::Identity => x.clone(),
            OperatorKind::AvgPool { scale } => avgpool_forward(x, *scale),
            OperatorKind::GaussianBlur { kernel, .. } => blur_forward(x, kernel),
            OperatorKind::Compose(ops) => {
                let mut cur = x.clone();
                for op in ops {
                    cur = op.apply_unchecked(&cur);
                }
                cur
            }
            OperatorKind::Dense(m) => {
                let v = m * DVector::from_column_slice(x.values());
                ImageGrid::from_raw(self.out_shape.0, self.out_shape.1, v.as_slice().to_vec())
            }
        }
    }

    fn transpose_unchecked(&self, y: &ImageGrid) -> ImageGrid {
        match &self.kind {
            OperatorKind::Identity => y.clone(),
            OperatorKind::AvgPool { scale } => {
                let s2 = (*scale * *scale) as f64;
                avgpool_replicate(y, *scale).scale(1.0 / s2)
            }
            OperatorKind::GaussianBlur { kernel, .. } => blur_transpose(y, kernel),
            OperatorKind::Compose(ops) => {
                let mut cur = y.clone();
                for op in ops.iter().rev() {
                    cur = op.transpose_unchecked(&cur);
                }
                cur
            }
            OperatorKind::Dense(m) => {
                let v = m.tr_mul(&DVector::from_column_slice(y.values()));
                ImageGrid::from_raw(self.in_shape.0, self.in_shape.1, v.as_slice().to_vec())
            }
        }
    }

    /// Dense matrix of the operator (row-major pixel ordering on both sides).
    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.out_dim(), self.in_dim());
        if rows.saturating_mul(cols) > self.dense_cap {
            return Err(Error::TooLarge {
                rows,
                cols,
                cap: self.dense_cap,
            });
        }
        if let OperatorKind::Dense(m) = &self.kind {
            return Ok(m.clone());
        }
        let mut out = DMatrix::zeros(rows, cols);
        let mut basis = ImageGrid::zeros(self.in_shape.0, self.in_shape.1);
        for j in 0..cols {
            basis.values_mut()[j] = 1.0;
            let col = self.apply_unchecked(&basis);
            out.column_mut(j).copy_from_slice(col.values());
            basis.values_mut()[j] = 0.0;
        }
        Ok(out)
    }

    fn svd(&self) -> Result<&Svd> {
        if let Some(svd) = self.svd.get() {
            return Ok(svd);
        }
        let m = self.materialize()?;
        let svd = m.svd(true, true);
        let computed = Svd {
            u: svd.u.expect("requested U"),
            singular: svd.singular_values,
            v_t: svd.v_t.expect("requested V^T"),
        };
        Ok(self.svd.get_or_init(|| computed))
    }

    /// `A^+ y`, analytic for pooling/identity, truncated SVD otherwise.
    pub fn pseudo_apply(&self, y: &ImageGrid, tol: f64) -> Result<ImageGrid> {
        y.ensure_shape(self.out_shape)?;
        match &self.kind {
            OperatorKind::Identity => Ok(y.clone()),
            OperatorKind::AvgPool { scale } => Ok(avgpool_replicate(y, *scale)),
            _ => self.pseudo_apply_dense(y, tol),
        }
    }

    /// `A^+ y` through the materialized SVD regardless of kind.
    pub fn pseudo_apply_dense(&self, y: &ImageGrid, tol: f64) -> Result<ImageGrid> {
        y.ensure_shape(self.out_shape)?;
        let svd = self.svd()?;
        let x = svd.pinv_apply(&DVector::from_column_slice(y.values()), tol);
        Ok(ImageGrid::from_raw(
            self.in_shape.0,
            self.in_shape.1,
            x.as_slice().to_vec(),
        ))
    }

    /// Dense `A^+` (for oracles and small problems).
    pub fn pseudo_inverse_matrix(&self, tol: f64) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.in_dim(), self.out_dim());
        let mut out = DMatrix::zeros(rows, cols);
        let mut basis = ImageGrid::zeros(self.out_shape.0, self.out_shape.1);
        for j in 0..cols {
            basis.values_mut()[j] = 1.0;
            let col = self.pseudo_apply(&basis, tol)?;
            out.column_mut(j).copy_from_slice(col.values());
            basis.values_mut()[j] = 0.0;
        }
        Ok(out)
    }

    /// Orthogonal projection onto the row space, `A^+ A x`.
    pub fn projection_apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        x.ensure_shape(self.in_shape)?;
        match &self.kind {
            OperatorKind::Identity => Ok(x.clone()),
            OperatorKind::AvgPool { scale } => {
                Ok(avgpool_replicate(&avgpool_forward(x, *scale), *scale))
            }
            _ => self.pseudo_apply(&self.apply_unchecked(x), DEFAULT_PINV_TOL),
        }
    }

    /// Parse a textual operator description against an input shape.
    ///
    /// Grammar: `identity`, `avgpool:s=N`, `blur:sigma=X[,k=K]`,
    /// `compose:[OP;OP;...]` (members applied left to right). When `k` is
    /// omitted it defaults to [`default_kernel_size`] clamped to the image.
    pub fn parse(spec: &str, in_shape: Shape) -> Result<Self> {
        let spec = spec.trim();
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), a.trim()),
            None => (spec, ""),
        };
        let (h, w) = in_shape;
        match name {
            "identity" => Ok(Self::identity(h, w)),
            "avgpool" => {
                let params = parse_params(args)?;
                let s = param_usize(&params, "s")?
                    .ok_or_else(|| Error::InvalidOperator("avgpool needs s=".into()))?;
                reject_extra(&params, &["s"])?;
                Self::avgpool(h, w, s)
            }
            "blur" => {
                let params = parse_params(args)?;
                let sigma = param_f64(&params, "sigma")?
                    .ok_or_else(|| Error::InvalidOperator("blur needs sigma=".into()))?;
                let k = match param_usize(&params, "k")? {
                    Some(k) => k,
                    None => clamp_kernel_size(default_kernel_size(sigma), h.min(w)),
                };
                reject_extra(&params, &["sigma", "k"])?;
                Self::gaussian_blur(h, w, sigma, k)
            }
            "compose" => {
                let inner = args
                    .strip_prefix('[')
                    .and_then(|a| a.strip_suffix(']'))
                    .ok_or_else(|| Error::InvalidOperator(format!("compose needs [..]: {spec}")))?;
                let mut ops = Vec::new();
                let mut shape = in_shape;
                for part in inner.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                    let op = Self::parse(part, shape)?;
                    shape = op.out_shape;
                    ops.push(op);
                }
                Self::compose(ops)
            }
            other => Err(Error::InvalidOperator(format!("unknown operator '{other}'"))),
        }
    }
}

/// `2 * ceil(3 sigma) + 1`.
pub fn default_kernel_size(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

/// Largest odd size not above `limit` (and not above `k`).
pub fn clamp_kernel_size(k: usize, limit: usize) -> usize {
    let k = k.min(limit.max(1));
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(sigma: f64, k: usize) -> Vec<f64> {
    let r = (k / 2) as f64;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn blur_forward(x: &ImageGrid, kernel: &[f64]) -> ImageGrid {
    let (h, w) = x.shape();
    let rad = (kernel.len() / 2) as isize;
    let mut tmp = ImageGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                acc += k * x.get(r, reflect(c as isize + j as isize - rad, w));
            }
            tmp.set(r, c, acc);
        }
    }
    let mut out = ImageGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * tmp.get(reflect(r as isize + i as isize - rad, h), c);
            }
            out.set(r, c, acc);
        }
    }
    out
}

fn blur_transpose(y: &ImageGrid, kernel: &[f64]) -> ImageGrid {
    let (h, w) = y.shape();
    let rad = (kernel.len() / 2) as isize;
    let mut tmp = ImageGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let v = y.get(r, c);
            for (i, &k) in kernel.iter().enumerate() {
                let rr = reflect(r as isize + i as isize - rad, h);
                tmp.values_mut()[rr * w + c] += k * v;
            }
        }
    }
    let mut out = ImageGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let v = tmp.get(r, c);
            for (j, &k) in kernel.iter().enumerate() {
                let cc = reflect(c as isize + j as isize - rad, w);
                out.values_mut()[r * w + cc] += k * v;
            }
        }
    }
    out
}

fn avgpool_forward(x: &ImageGrid, s: usize) -> ImageGrid {
    let (h, w) = x.shape();
    let (oh, ow) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = ImageGrid::zeros(oh, ow);
    for r in 0..h {
        for c in 0..w {
            out.values_mut()[(r / s) * ow + c / s] += x.get(r, c);
        }
    }
    out.values_mut().iter_mut().for_each(|v| *v *= inv);
    out
}

fn avgpool_replicate(y: &ImageGrid, s: usize) -> ImageGrid {
    ImageGrid::from_fn(y.height() * s, y.width() * s, |r, c| y.get(r / s, c / s))
}

fn parse_params(args: &str) -> Result<Vec<(String, String)>> {
    args.split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::InvalidOperator(format!("expected key=value, got '{a}'")))
        })
        .collect()
}

fn param_f64(params: &[(String, String)], key: &str) -> Result<Option<f64>> {
    params
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidOperator(format!("{key}: not a number: '{v}'")))
        })
        .transpose()
}

fn param_usize(params: &[(String, String)], key: &str) -> Result<Option<usize>> {
    params
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidOperator(format!("{key}: not an integer: '{v}'")))
        })
        .transpose()
}

fn reject_extra(params: &[(String, String)], allowed: &[&str]) -> Result<()> {
    match params.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        Some((k, _)) => Err(Error::InvalidOperator(format!("unknown parameter '{k}'"))),
        None => Ok(()),
    }
}
