//! Matrix-free forward operators: PSF blur, block-average downsampling and
//! their compositions, each paired with its exact adjoint.
//!
//! Convolution is "same"-sized with a zero-padded boundary:
//!
//! ```text
//! (H f)[y, x] = sum_{a,b} k[a, b] * f[y - (a - c), x - (b - c)],   c = size / 2
//! ```
//!
//! and its adjoint is the matching correlation (convolution with the kernel
//! rotated by 180 degrees).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::grid::{self, ImageGrid};
use crate::rng::stream_rng;

/// Largest pixel count for which an explicit dense matrix may be built (64x64).
pub const DENSE_MAX_PIXELS: usize = 64 * 64;

/// Normalized, non-negative, odd-sized point spread function.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    size: usize,
    weights: Vec<f64>,
}

impl PsfKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(invalid(format!(
                "psf size must be odd and positive, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(invalid(format!(
                "psf of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("psf weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("psf weights must sum to 1, got {sum}")));
        }
        Ok(Self { size, weights })
    }

    /// Divides `raw` by its sum before validating.
    pub fn normalized(size: usize, raw: Vec<f64>) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) {
            return Err(invalid("psf weights must have a positive sum"));
        }
        Self::new(size, raw.into_iter().map(|w| w / sum).collect())
    }

    /// Isotropic Gaussian sampled at integer offsets on a `size x size` support.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("psf sigma must be positive, got {sigma}")));
        }
        if size == 0 || size.is_multiple_of(2) {
            return Err(invalid(format!(
                "psf size must be odd and positive, got {size}"
            )));
        }
        let c = (size / 2) as f64;
        let mut raw = Vec::with_capacity(size * size);
        for a in 0..size {
            for b in 0..size {
                let dy = a as f64 - c;
                let dx = b as f64 - c;
                raw.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
            }
        }
        Self::normalized(size, raw)
    }

    pub fn delta() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[a * self.size + b]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.weights.len();
        (0..n).all(|i| self.weights[i] == self.weights[n - 1 - i])
    }
}

/// Accumulates the zero-padded "same" convolution of `src` with `kernel` into `dst`.
pub(crate) fn conv_same_acc(
    src: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    k: usize,
    dst: &mut [f64],
) {
    let c = (k / 2) as isize;
    let (h, w) = (height as isize, width as isize);
    for a in 0..k {
        let dy = a as isize - c;
        let y0 = dy.max(0);
        let y1 = (h + dy).min(h);
        for b in 0..k {
            let kv = kernel[a * k + b];
            if kv == 0.0 {
                continue;
            }
            let dx = b as isize - c;
            let x0 = dx.max(0);
            let x1 = (w + dx).min(w);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let drow = (y * w) as usize;
                let srow = ((y - dy) * w) as usize;
                let d = &mut dst[drow + x0 as usize..drow + x1 as usize];
                let s = &src[srow + (x0 - dx) as usize..srow + (x1 - dx) as usize];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += kv * sv;
                }
            }
        }
    }
}

/// Accumulates the zero-padded "same" correlation of `src` with `kernel` into `dst`:
/// the exact adjoint of [`conv_same_acc`].
pub(crate) fn corr_same_acc(
    src: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    k: usize,
    dst: &mut [f64],
) {
    let c = (k / 2) as isize;
    let (h, w) = (height as isize, width as isize);
    for a in 0..k {
        let dy = a as isize - c;
        // dst[y] += kv * src[y + dy]
        let y0 = (-dy).max(0);
        let y1 = (h - dy).min(h);
        for b in 0..k {
            let kv = kernel[a * k + b];
            if kv == 0.0 {
                continue;
            }
            let dx = b as isize - c;
            let x0 = (-dx).max(0);
            let x1 = (w - dx).min(w);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let drow = (y * w) as usize;
                let srow = ((y + dy) * w) as usize;
                let d = &mut dst[drow + x0 as usize..drow + x1 as usize];
                let s = &src[srow + (x0 + dx) as usize..srow + (x1 + dx) as usize];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += kv * sv;
                }
            }
        }
    }
}

/// Accumulates `dkernel[a, b] += sum_{y,x} grad[y, x] * src[y - (a - c), x - (b - c)]`,
/// the kernel gradient of [`conv_same_acc`].
pub(crate) fn conv_kernel_grad_acc(
    src: &[f64],
    grad: &[f64],
    height: usize,
    width: usize,
    k: usize,
    dkernel: &mut [f64],
) {
    let c = (k / 2) as isize;
    let (h, w) = (height as isize, width as isize);
    for a in 0..k {
        let dy = a as isize - c;
        let y0 = dy.max(0);
        let y1 = (h + dy).min(h);
        for b in 0..k {
            let dx = b as isize - c;
            let x0 = dx.max(0);
            let x1 = (w + dx).min(w);
            if x0 >= x1 {
                continue;
            }
            let mut acc = 0.0;
            for y in y0..y1 {
                let grow = (y * w) as usize;
                let srow = ((y - dy) * w) as usize;
                let g = &grad[grow + x0 as usize..grow + x1 as usize];
                let s = &src[srow + (x0 - dx) as usize..srow + (x1 - dx) as usize];
                acc += grid::dot(g, s);
            }
            dkernel[a * k + b] += acc;
        }
    }
}

fn check_psf_fits(f: &ImageGrid, psf: &PsfKernel) -> Result<()> {
    if psf.size() > f.height() || psf.size() > f.width() {
        return Err(invalid(format!(
            "psf of size {} exceeds image {}x{}",
            psf.size(),
            f.height(),
            f.width()
        )));
    }
    Ok(())
}

/// Zero-padded "same" convolution `H f`.
pub fn convolve_2d(f: &ImageGrid, psf: &PsfKernel) -> Result<ImageGrid> {
    check_psf_fits(f, psf)?;
    let mut out = vec![0.0; f.len()];
    conv_same_acc(
        f.values(),
        f.height(),
        f.width(),
        psf.weights(),
        psf.size(),
        &mut out,
    );
    Ok(ImageGrid::from_parts(f.height(), f.width(), out))
}

/// Adjoint `H' g` of [`convolve_2d`].
pub fn convolve_adjoint_2d(g: &ImageGrid, psf: &PsfKernel) -> Result<ImageGrid> {
    check_psf_fits(g, psf)?;
    let mut out = vec![0.0; g.len()];
    corr_same_acc(
        g.values(),
        g.height(),
        g.width(),
        psf.weights(),
        psf.size(),
        &mut out,
    );
    Ok(ImageGrid::from_parts(g.height(), g.width(), out))
}

/// Block-average decimation: each output pixel is the mean of a `factor x factor` block.
pub fn downsample(f: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 {
        return Err(invalid("downsample factor must be positive"));
    }
    if !f.height().is_multiple_of(factor) || !f.width().is_multiple_of(factor) {
        return Err(invalid(format!(
            "image {}x{} not divisible by factor {factor}",
            f.height(),
            f.width()
        )));
    }
    let (oh, ow) = (f.height() / factor, f.width() / factor);
    let mut out = vec![0.0; oh * ow];
    for y in 0..f.height() {
        for x in 0..f.width() {
            out[(y / factor) * ow + x / factor] += f.get(y, x);
        }
    }
    let scale = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(ImageGrid::from_parts(oh, ow, out))
}

/// Adjoint of [`downsample`]: spreads `value / factor^2` over each block.
pub fn downsample_adjoint(g: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 {
        return Err(invalid("downsample factor must be positive"));
    }
    let scale = 1.0 / (factor * factor) as f64;
    Ok(ImageGrid::from_fn(
        g.height() * factor,
        g.width() * factor,
        |y, x| g.get(y / factor, x / factor) * scale,
    ))
}

/// A linear map between image shapes, defined by its action and its adjoint.
///
/// Implementors provide the unchecked kernels; [`apply`](Self::apply) and
/// [`adjoint`](Self::adjoint) validate shapes around them.
pub trait LinearOperator: fmt::Debug + Send + Sync {
    fn input_shape(&self) -> (usize, usize);
    fn output_shape(&self) -> (usize, usize);

    /// `A x` for `x` of shape `input_shape`.
    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid;
    /// `A' y` for `y` of shape `output_shape`.
    fn adjoint_unchecked(&self, y: &ImageGrid) -> ImageGrid;

    fn apply(&self, x: &ImageGrid) -> Result<ImageGrid> {
        expect_shape("apply", self.input_shape(), x)?;
        Ok(self.apply_unchecked(x))
    }

    fn adjoint(&self, y: &ImageGrid) -> Result<ImageGrid> {
        expect_shape("adjoint", self.output_shape(), y)?;
        Ok(self.adjoint_unchecked(y))
    }

    fn input_len(&self) -> usize {
        let (h, w) = self.input_shape();
        h * w
    }

    fn output_len(&self) -> usize {
        let (h, w) = self.output_shape();
        h * w
    }
}

/// Shared handle to an immutable operator.
pub type Operator = Arc<dyn LinearOperator>;

fn expect_shape(what: &str, expected: (usize, usize), g: &ImageGrid) -> Result<()> {
    if g.shape() != expected {
        return Err(invalid(format!(
            "{what}: expected {}x{} input, got {}x{}",
            expected.0,
            expected.1,
            g.height(),
            g.width()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Identity {
    shape: (usize, usize),
}

impl Identity {
    pub fn new(shape: (usize, usize)) -> Self {
        Self { shape }
    }

    pub fn shared(shape: (usize, usize)) -> Operator {
        Arc::new(Self::new(shape))
    }
}

impl LinearOperator for Identity {
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid {
        x.clone()
    }
    fn adjoint_unchecked(&self, y: &ImageGrid) -> ImageGrid {
        y.clone()
    }
}

/// Maps everything to zero.
#[derive(Debug, Clone)]
pub struct ZeroOperator {
    input: (usize, usize),
    output: (usize, usize),
}

impl ZeroOperator {
    pub fn new(input: (usize, usize), output: (usize, usize)) -> Self {
        Self { input, output }
    }
}

impl LinearOperator for ZeroOperator {
    fn input_shape(&self) -> (usize, usize) {
        self.input
    }
    fn output_shape(&self) -> (usize, usize) {
        self.output
    }
    fn apply_unchecked(&self, _x: &ImageGrid) -> ImageGrid {
        ImageGrid::zeros(self.output.0, self.output.1)
    }
    fn adjoint_unchecked(&self, _y: &ImageGrid) -> ImageGrid {
        ImageGrid::zeros(self.input.0, self.input.1)
    }
}

/// PSF blur `H` on a fixed image shape.
#[derive(Debug, Clone)]
pub struct Convolution {
    shape: (usize, usize),
    psf: PsfKernel,
}

impl Convolution {
    pub fn new(shape: (usize, usize), psf: PsfKernel) -> Result<Self> {
        if shape.0 == 0 || shape.1 == 0 {
            return Err(invalid("convolution shape must be positive"));
        }
        if psf.size() > shape.0 || psf.size() > shape.1 {
            return Err(invalid(format!(
                "psf of size {} exceeds image {}x{}",
                psf.size(),
                shape.0,
                shape.1
            )));
        }
        Ok(Self { shape, psf })
    }

    pub fn shared(shape: (usize, usize), psf: PsfKernel) -> Result<Operator> {
        Ok(Arc::new(Self::new(shape, psf)?))
    }

    pub fn psf(&self) -> &PsfKernel {
        &self.psf
    }
}

impl LinearOperator for Convolution {
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid {
        let mut out = vec![0.0; x.len()];
        conv_same_acc(
            x.values(),
            x.height(),
            x.width(),
            self.psf.weights(),
            self.psf.size(),
            &mut out,
        );
        ImageGrid::from_parts(x.height(), x.width(), out)
    }
    fn adjoint_unchecked(&self, y: &ImageGrid) -> ImageGrid {
        let mut out = vec![0.0; y.len()];
        corr_same_acc(
            y.values(),
            y.height(),
            y.width(),
            self.psf.weights(),
            self.psf.size(),
            &mut out,
        );
        ImageGrid::from_parts(y.height(), y.width(), out)
    }
}

/// A convolution whose "adjoint" skips the kernel flip. Only meaningful for
/// exercising the dot-test on asymmetric kernels.
#[doc(hidden)]
#[derive(Debug, Clone)]
pub struct UnflippedAdjointConvolution(pub Convolution);

impl LinearOperator for UnflippedAdjointConvolution {
    fn input_shape(&self) -> (usize, usize) {
        self.0.shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.0.shape
    }
    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid {
        self.0.apply_unchecked(x)
    }
    fn adjoint_unchecked(&self, y: &ImageGrid) -> ImageGrid {
        self.0.apply_unchecked(y)
    }
}

/// Block-average downsampling `D` by an integer factor.
#[derive(Debug, Clone)]
pub struct Downsample {
    input: (usize, usize),
    factor: usize,
}

impl Downsample {
    pub fn new(input: (usize, usize), factor: usize) -> Result<Self> {
        if factor == 0 || input.0 == 0 || input.1 == 0 {
            return Err(invalid("downsample factor and shape must be positive"));
        }
        if !input.0.is_multiple_of(factor) || !input.1.is_multiple_of(factor) {
            return Err(invalid(format!(
                "shape {}x{} not divisible by factor {factor}",
                input.0, input.1
            )));
        }
        Ok(Self { input, factor })
    }

    pub fn shared(input: (usize, usize), factor: usize) -> Result<Operator> {
        Ok(Arc::new(Self::new(input, factor)?))
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

impl LinearOperator for Downsample {
    fn input_shape(&self) -> (usize, usize) {
        self.input
    }
    fn output_shape(&self) -> (usize, usize) {
        (self.input.0 / self.factor, self.input.1 / self.factor)
    }
    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid {
        downsample(x, self.factor).expect("shape validated at construction")
    }
    fn adjoint_unchecked(&self, y: &ImageGrid) -> ImageGrid {
        downsample_adjoint(y, self.factor).expect("factor validated at construction")
    }
}

/// `outer ∘ inner`.
#[derive(Debug, Clone)]
pub struct Composed {
    outer: Operator,
    inner: Operator,
}

impl LinearOperator for Composed {
    fn input_shape(&self) -> (usize, usize) {
        self.inner.input_shape()
    }
    fn output_shape(&self) -> (usize, usize) {
        self.outer.output_shape()
    }
    fn apply_unchecked(&self, x: &ImageGrid) -> ImageGrid {
        self.outer.apply_unchecked(&self.inner.apply_unchecked(x))
    }
    fn adjoint_unchecked(&self, y: &ImageGrid) -> ImageGrid {
        self.inner
            .adjoint_unchecked(&self.outer.adjoint_unchecked(y))
    }
}

/// Operator applying `b` first, then `a`.
pub fn compose(a: Operator, b: Operator) -> Result<Operator> {
    if b.output_shape() != a.input_shape() {
        return Err(invalid(format!(
            "compose: inner output {:?} does not match outer input {:?}",
            b.output_shape(),
            a.input_shape()
        )));
    }
    Ok(Arc::new(Composed { outer: a, inner: b }))
}

/// Pointwise map applied to the unknown before the linear operator (`g = H Φ(f)`).
/// Defaults to the identity.
#[derive(Clone)]
pub struct PointwiseMap(Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>);

impl PointwiseMap {
    pub fn identity() -> Self {
        Self(None)
    }

    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Some(Arc::new(f)))
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }

    pub fn apply(&self, f: &ImageGrid) -> ImageGrid {
        match &self.0 {
            None => f.clone(),
            Some(phi) => f.map(|v| phi(v)),
        }
    }
}

impl Default for PointwiseMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for PointwiseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_identity() {
            "PointwiseMap(identity)"
        } else {
            "PointwiseMap(custom)"
        })
    }
}

fn gaussian_grid(shape: (usize, usize), rng: &mut impl rand::Rng) -> ImageGrid {
    ImageGrid::from_fn(shape.0, shape.1, |_, _| StandardNormal.sample(rng))
}

/// Max over `trials` of `|<Ax, y> - <x, A'y>| / (|x| |y|)` for seeded Gaussian `x`, `y`.
pub fn adjoint_dot_test(op: &dyn LinearOperator, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("adjoint_dot_test needs at least one trial"));
    }
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = stream_rng(seed, t as u64);
        let x = gaussian_grid(op.input_shape(), &mut rng);
        let y = gaussian_grid(op.output_shape(), &mut rng);
        let lhs = op.apply_unchecked(&x).dot(&y);
        let rhs = x.dot(&op.adjoint_unchecked(&y));
        worst = worst.max((lhs - rhs).abs() / (x.norm() * y.norm()));
    }
    Ok(worst)
}

/// Explicit matrix of `op` (rows: output pixels, columns: input pixels), row-major
/// pixel order. Refuses shapes above [`DENSE_MAX_PIXELS`].
pub fn dense_matrix(op: &dyn LinearOperator) -> Result<DMatrix<f64>> {
    let (n_in, n_out) = (op.input_len(), op.output_len());
    if n_in > DENSE_MAX_PIXELS || n_out > DENSE_MAX_PIXELS {
        return Err(invalid(format!(
            "dense matrix limited to {DENSE_MAX_PIXELS} pixels, operator is {n_out}x{n_in}"
        )));
    }
    let (h, w) = op.input_shape();
    let mut m = DMatrix::zeros(n_out, n_in);
    let mut e = ImageGrid::zeros(h, w);
    for j in 0..n_in {
        e.values_mut()[j] = 1.0;
        let col = op.apply_unchecked(&e);
        for (i, v) in col.values().iter().enumerate() {
            m[(i, j)] = *v;
        }
        e.values_mut()[j] = 0.0;
    }
    Ok(m)
}
