//! Feature maps used on either side of the two-stage regression: learned
//! MLPs and the fixed bases behind the classical baselines.

use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{Mat, RngStream};
use crate::neural::{FeatureMap, GradBuffer};
use crate::textio::{push_floats, Tokens};

/// Tensor-product monomials `∏ x_j^{e_j}` with `1 ≤ Σ e_j ≤ degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    input_dim: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
}

impl PolynomialBasis {
    pub fn new(input_dim: usize, degree: u32) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument(
                "polynomial degree must be >= 1".into(),
            ));
        }
        let mut exponents = Vec::new();
        for total in 1..=degree {
            let mut cur = vec![0u32; input_dim];
            push_compositions(&mut exponents, &mut cur, 0, total);
        }
        Ok(Self {
            input_dim,
            degree,
            exponents,
        })
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    fn eval(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), self.exponents.len(), |i, k| {
            self.exponents[k]
                .iter()
                .zip(x.row(i))
                .map(|(&e, &v)| v.powi(e as i32))
                .product()
        })
    }
}

// graded lexicographic enumeration of exponent vectors summing to `left`
fn push_compositions(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_compositions(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// Random Fourier features for the Gaussian kernel
/// `exp(-‖x − x′‖² / (2·bandwidth²))`:
/// `z(x) = sqrt(2/D) · cos(W x + b)`, `W ~ N(0, I/bandwidth²)`,
/// `b ~ Unif[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFourierFeatures {
    /// `D × input_dim` frequencies.
    pub frequencies: Mat,
    pub phases: Vec<f64>,
    pub bandwidth: f64,
}

/// Kernel bandwidth choice for [`rff_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the given points.
    Median,
}

impl RandomFourierFeatures {
    pub fn dim(&self) -> usize {
        self.phases.len()
    }

    fn eval(&self, x: &Mat) -> Result<Mat> {
        let mut proj = x.matmul_t(&self.frequencies)?;
        let scale = (2.0 / self.dim() as f64).sqrt();
        for i in 0..proj.rows() {
            for (v, b) in proj.row_mut(i).iter_mut().zip(&self.phases) {
                *v = scale * (*v + b).cos();
            }
        }
        Ok(proj)
    }
}

/// Builds a random Fourier feature map. With [`Bandwidth::Median`] the
/// bandwidth is the median pairwise distance of `points`.
pub fn rff_map(
    input_dim: usize,
    feature_count: usize,
    bandwidth: Bandwidth,
    points: Option<&Mat>,
    rng: &mut RngStream,
) -> Result<RandomFourierFeatures> {
    if feature_count < 2 || !feature_count.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "feature count must be even and >= 2, got {feature_count}"
        )));
    }
    let bw = match bandwidth {
        Bandwidth::Fixed(b) => b,
        Bandwidth::Median => {
            let pts = points.ok_or_else(|| {
                Error::InvalidArgument("median bandwidth needs the data points".into())
            })?;
            if pts.cols() != input_dim {
                return Err(dim_err("rff_map points", input_dim, pts.cols()));
            }
            median_heuristic(pts)?
        }
    };
    if !(bw > 0.0) || !bw.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {bw}"
        )));
    }
    let frequencies = rng.gaussian_mat(feature_count, input_dim, 1.0 / bw);
    let phases = (0..feature_count)
        .map(|_| rng.uniform_range(0.0, 2.0 * std::f64::consts::PI))
        .collect();
    Ok(RandomFourierFeatures {
        frequencies,
        phases,
        bandwidth: bw,
    })
}

/// Median pairwise Euclidean distance.
///
/// Exact up to 2000 points; larger sets use 2000 evenly strided rows so the
/// result stays deterministic.
pub fn median_heuristic(points: &Mat) -> Result<f64> {
    const MAX_POINTS: usize = 2000;
    let n = points.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median heuristic needs >= 2 points".into(),
        ));
    }
    let rows: Vec<usize> = if n <= MAX_POINTS {
        (0..n).collect()
    } else {
        (0..MAX_POINTS).map(|k| k * n / MAX_POINTS).collect()
    };
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let d2: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let med = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    if med <= 0.0 {
        return Err(Error::InvalidArgument(
            "median pairwise distance is zero (degenerate point set)".into(),
        ));
    }
    Ok(med)
}

/// What sits behind a [`Features`] value.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Mlp(FeatureMap),
    Identity(usize),
    Polynomial(PolynomialBasis),
    Fourier(RandomFourierFeatures),
}

/// A feature map with optional input standardization and an optional
/// trailing constant-one column.
///
/// Only the [`FeatureKind::Mlp`] variant has trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub kind: FeatureKind,
    pub intercept: bool,
    /// Per-column input shift and scale, `x ↦ (x − shift)/scale`. Empty
    /// means no standardization.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Features {
    pub fn new(kind: FeatureKind) -> Self {
        Self {
            kind,
            intercept: false,
            shift: Vec::new(),
            scale: Vec::new(),
        }
    }

    pub fn mlp(fm: FeatureMap) -> Self {
        Self::new(FeatureKind::Mlp(fm))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(FeatureKind::Identity(dim))
    }

    pub fn polynomial(input_dim: usize, degree: u32) -> Result<Self> {
        Ok(Self::new(FeatureKind::Polynomial(PolynomialBasis::new(
            input_dim, degree,
        )?)))
    }

    pub fn fourier(rff: RandomFourierFeatures) -> Self {
        Self::new(FeatureKind::Fourier(rff))
    }

    /// The constant map `[1]` over `input_dim` ignored inputs.
    pub fn constant(input_dim: usize) -> Self {
        let mut f = Self::identity(0);
        f.intercept = true;
        if input_dim > 0 {
            f.kind = FeatureKind::Polynomial(PolynomialBasis {
                input_dim,
                degree: 1,
                exponents: Vec::new(),
            });
        }
        f
    }

    pub fn with_intercept(mut self) -> Self {
        self.intercept = true;
        self
    }

    /// Standardizes inputs with the column means and standard deviations of
    /// `x`; constant columns get scale 1.
    pub fn standardized_on(mut self, x: &Mat) -> Self {
        let n = x.rows().max(1) as f64;
        let d = x.cols();
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let mean = (0..x.rows()).map(|i| x[(i, j)]).sum::<f64>() / n;
            let var = (0..x.rows())
                .map(|i| (x[(i, j)] - mean).powi(2))
                .sum::<f64>()
                / n;
            shift[j] = mean;
            if var.sqrt() > 1e-12 {
                scale[j] = var.sqrt();
            }
        }
        self.shift = shift;
        self.scale = scale;
        self
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            FeatureKind::Mlp(fm) => fm.input_dim(),
            FeatureKind::Identity(d) => *d,
            FeatureKind::Polynomial(p) => p.input_dim,
            FeatureKind::Fourier(r) => r.frequencies.cols(),
        }
    }

    fn base_dim(&self) -> usize {
        match &self.kind {
            FeatureKind::Mlp(fm) => fm.output_dim(),
            FeatureKind::Identity(d) => *d,
            FeatureKind::Polynomial(p) => p.dim(),
            FeatureKind::Fourier(r) => r.dim(),
        }
    }

    /// Output dimension including the intercept column.
    pub fn dim(&self) -> usize {
        self.base_dim() + usize::from(self.intercept)
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, FeatureKind::Mlp(_))
    }

    pub fn as_mlp(&self) -> Option<&FeatureMap> {
        match &self.kind {
            FeatureKind::Mlp(fm) => Some(fm),
            _ => None,
        }
    }

    pub fn as_mlp_mut(&mut self) -> Option<&mut FeatureMap> {
        match &mut self.kind {
            FeatureKind::Mlp(fm) => Some(fm),
            _ => None,
        }
    }

    pub fn grad_buffer(&self) -> Option<GradBuffer> {
        self.as_mlp().map(GradBuffer::zeros_for)
    }

    fn standardize(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.input_dim() {
            return Err(dim_err("Features input cols", self.input_dim(), x.cols()));
        }
        if self.shift.is_empty() {
            return Ok(x.clone());
        }
        if self.shift.len() != x.cols() || self.scale.len() != x.cols() {
            return Err(dim_err(
                "Features standardization",
                x.cols(),
                self.shift.len(),
            ));
        }
        Ok(Mat::from_fn(x.rows(), x.cols(), |i, j| {
            (x[(i, j)] - self.shift[j]) / self.scale[j]
        }))
    }

    /// Feature matrix, one row per input row.
    pub fn eval(&self, x: &Mat) -> Result<Mat> {
        let xs = self.standardize(x)?;
        let base = match &self.kind {
            FeatureKind::Mlp(fm) => fm.forward(&xs)?,
            FeatureKind::Identity(_) => xs,
            FeatureKind::Polynomial(p) => p.eval(&xs),
            FeatureKind::Fourier(r) => r.eval(&xs)?,
        };
        Ok(if self.intercept {
            base.with_ones_column()
        } else {
            base
        })
    }

    /// Accumulates `∂⟨upstream, eval(x)⟩/∂θ` into `grads`. The intercept
    /// column carries no parameters and is dropped.
    pub fn backward_into(&self, x: &Mat, upstream: &Mat, grads: &mut GradBuffer) -> Result<()> {
        let FeatureKind::Mlp(fm) = &self.kind else {
            return Err(Error::InvalidArgument(
                "fixed features have no parameters".into(),
            ));
        };
        if upstream.cols() != self.dim() || upstream.rows() != x.rows() {
            return Err(dim_err(
                "Features::backward upstream",
                format!("{}x{}", x.rows(), self.dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let up = if self.intercept {
            upstream.take_cols(self.base_dim())
        } else {
            upstream.clone()
        };
        fm.backward_into(&self.standardize(x)?, &up, grads)
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        out.push_str("features 1\n");
        let _ = writeln!(out, "intercept {}", u8::from(self.intercept));
        let _ = writeln!(out, "standardize {}", self.shift.len());
        push_floats(out, "shift", &self.shift);
        push_floats(out, "scale", &self.scale);
        match &self.kind {
            FeatureKind::Mlp(fm) => {
                out.push_str("kind mlp\n");
                fm.write_text(out);
            }
            FeatureKind::Identity(d) => {
                let _ = writeln!(out, "kind identity {d}");
            }
            FeatureKind::Polynomial(p) => {
                let _ = writeln!(
                    out,
                    "kind polynomial {} {} {}",
                    p.input_dim,
                    p.degree,
                    p.dim()
                );
            }
            FeatureKind::Fourier(r) => {
                let _ = writeln!(
                    out,
                    "kind fourier {} {} {:e}",
                    r.frequencies.cols(),
                    r.dim(),
                    r.bandwidth
                );
                push_floats(out, "w", r.frequencies.as_slice());
                push_floats(out, "b", &r.phases);
            }
        }
    }

    pub(crate) fn read_tokens(tok: &mut Tokens<'_>) -> Result<Self> {
        tok.expect("features")?;
        tok.expect("1")?;
        tok.expect("intercept")?;
        let intercept = tok.parse::<u8>()? == 1;
        tok.expect("standardize")?;
        let k: usize = tok.parse()?;
        tok.expect("shift")?;
        let shift = tok.floats(k)?;
        tok.expect("scale")?;
        let scale = tok.floats(k)?;
        tok.expect("kind")?;
        let kind = match tok.next_token()? {
            "mlp" => FeatureKind::Mlp(FeatureMap::read_tokens(tok)?),
            "identity" => FeatureKind::Identity(tok.parse()?),
            "polynomial" => {
                let input_dim: usize = tok.parse()?;
                let degree: u32 = tok.parse()?;
                let dim: usize = tok.parse()?;
                let basis = if dim == 0 {
                    // constant-only basis written by `Features::constant`
                    PolynomialBasis {
                        input_dim,
                        degree,
                        exponents: Vec::new(),
                    }
                } else {
                    PolynomialBasis::new(input_dim, degree)?
                };
                if basis.dim() != dim {
                    return Err(Error::Parse("polynomial basis size mismatch".into()));
                }
                FeatureKind::Polynomial(basis)
            }
            "fourier" => {
                let input_dim: usize = tok.parse()?;
                let d: usize = tok.parse()?;
                let bandwidth: f64 = tok.parse()?;
                tok.expect("w")?;
                let frequencies = Mat::from_vec(d, input_dim, tok.floats(d * input_dim)?)?;
                tok.expect("b")?;
                let phases = tok.floats(d)?;
                FeatureKind::Fourier(RandomFourierFeatures {
                    frequencies,
                    phases,
                    bandwidth,
                })
            }
            other => return Err(Error::Parse(format!("unknown feature kind `{other}`"))),
        };
        Ok(Self {
            kind,
            intercept,
            shift,
            scale,
        })
    }
}
