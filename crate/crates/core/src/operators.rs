//! Linear forward operators with exact adjoints, and the Gaussian
//! measurement model `y = A x + sigma_y z`.

use std::fmt::Debug;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{FlowError, Result};
use crate::tensor::{Matrix, Rng, Tensor};

pub trait LinearOperator: Send + Sync + Debug {
    fn kind(&self) -> &'static str;
    fn in_shape(&self) -> &[usize];
    fn out_shape(&self) -> &[usize];

    /// `A x` on raw row-major data.
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    /// `A^T g` on raw row-major data.
    fn transpose(&self, g: &[f64]) -> Vec<f64>;

    fn in_len(&self) -> usize {
        self.in_shape().iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape().iter().product()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_shape(self.in_shape(), self.kind())?;
        Tensor::new(self.out_shape().to_vec(), self.forward(x.data()))
    }

    fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        g.ensure_shape(self.out_shape(), self.kind())?;
        Tensor::new(self.in_shape().to_vec(), self.transpose(g.data()))
    }

    /// Dense `out_len x in_len` matrix of the operator.
    fn to_matrix(&self) -> Matrix {
        Matrix::from_columns_of(self.in_len(), self.out_len(), |e| self.forward(e))
    }
}

pub type SharedOperator = Arc<dyn LinearOperator>;

/// Operator selection, independent of the image shape it will act on.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorSpec {
    Identity,
    /// Drop a random `fraction` of entries.
    MaskRandom { fraction: f64, seed: u64 },
    /// Drop a rectangle; `None` means the centered box of half the side lengths.
    MaskBox { rect: Option<[usize; 4]> },
    DownsampleAvg { factor: usize },
    BlurGaussian { kernel_size: usize, sigma: f64 },
    /// Random signs, real orthonormal Fourier (Hartley) transform, row subsampling.
    DftSubsampled { rate: f64, seed: u64, sign_seed: u64 },
}

/// Loose parameter bag as read from configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    pub mask_fraction: f64,
    pub rect: Option<[usize; 4]>,
    pub factor: usize,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub rate: f64,
    pub seed: u64,
    pub sign_seed: u64,
}

impl Default for OperatorParams {
    fn default() -> Self {
        OperatorParams {
            mask_fraction: 0.7,
            rect: None,
            factor: 2,
            blur_kernel: 5,
            blur_sigma: 1.0,
            rate: 0.5,
            seed: 0,
            sign_seed: 1,
        }
    }
}

impl OperatorSpec {
    pub fn from_kind(kind: &str, p: &OperatorParams) -> Result<Self> {
        Ok(match kind {
            "identity" => OperatorSpec::Identity,
            "mask_random" => OperatorSpec::MaskRandom {
                fraction: p.mask_fraction,
                seed: p.seed,
            },
            "mask_box" => OperatorSpec::MaskBox { rect: p.rect },
            "downsample_avg" => OperatorSpec::DownsampleAvg { factor: p.factor },
            "blur_gaussian" => OperatorSpec::BlurGaussian {
                kernel_size: p.blur_kernel,
                sigma: p.blur_sigma,
            },
            "dft_subsampled" => OperatorSpec::DftSubsampled {
                rate: p.rate,
                seed: p.seed,
                sign_seed: p.sign_seed,
            },
            other => return Err(FlowError::config(format!("unknown operator kind `{other}`"))),
        })
    }
}

pub fn make_operator(spec: &OperatorSpec, in_shape: &[usize]) -> Result<SharedOperator> {
    if in_shape.is_empty() || in_shape.contains(&0) {
        return Err(FlowError::shape(format!("invalid input shape {in_shape:?}")));
    }
    let n: usize = in_shape.iter().product();
    Ok(match *spec {
        OperatorSpec::Identity => Arc::new(Identity {
            shape: in_shape.to_vec(),
        }),
        OperatorSpec::MaskRandom { fraction, seed } => {
            if !(0.0..1.0).contains(&fraction) {
                return Err(FlowError::config(format!(
                    "mask fraction must lie in [0, 1), got {fraction}"
                )));
            }
            let keep_count = ((1.0 - fraction) * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            Rng::new(seed).shuffle(&mut idx);
            idx.truncate(keep_count);
            idx.sort_unstable();
            Arc::new(Mask::new("mask_random", in_shape, idx)?)
        }
        OperatorSpec::MaskBox { rect } => {
            let (c, h, w) = image_dims(in_shape)?;
            let [top, left, bh, bw] = rect.unwrap_or({
                let (bh, bw) = (h / 2, w / 2);
                [(h - bh) / 2, (w - bw) / 2, bh, bw]
            });
            if top + bh > h || left + bw > w {
                return Err(FlowError::shape(format!(
                    "box {top},{left} {bh}x{bw} exceeds {h}x{w} image"
                )));
            }
            let inside = |i: usize, j: usize| i >= top && i < top + bh && j >= left && j < left + bw;
            let mut idx = Vec::new();
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        if !inside(i, j) {
                            idx.push(ch * h * w + i * w + j);
                        }
                    }
                }
            }
            Arc::new(Mask::new("mask_box", in_shape, idx)?)
        }
        OperatorSpec::DownsampleAvg { factor } => Arc::new(DownsampleAvg::new(in_shape, factor)?),
        OperatorSpec::BlurGaussian { kernel_size, sigma } => {
            Arc::new(GaussianBlur::new(in_shape, kernel_size, sigma)?)
        }
        OperatorSpec::DftSubsampled {
            rate,
            seed,
            sign_seed,
        } => Arc::new(SubsampledHartley::new(in_shape, rate, seed, sign_seed)?),
    })
}

/// `(channels, height, width)` of a rank-2 or rank-3 image shape.
fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(FlowError::shape(format!(
            "image operator needs [H, W] or [C, H, W], got {shape:?}"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct Identity {
    shape: Vec<usize>,
}

impl LinearOperator for Identity {
    fn kind(&self) -> &'static str {
        "identity"
    }
    fn in_shape(&self) -> &[usize] {
        &self.shape
    }
    fn out_shape(&self) -> &[usize] {
        &self.shape
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn transpose(&self, g: &[f64]) -> Vec<f64> {
        g.to_vec()
    }
}

/// Keeps the listed flat indices; the adjoint zero-fills the rest.
#[derive(Debug, Clone)]
pub struct Mask {
    kind: &'static str,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    keep: Vec<usize>,
}

impl Mask {
    pub fn new(kind: &'static str, in_shape: &[usize], keep: Vec<usize>) -> Result<Self> {
        let n: usize = in_shape.iter().product();
        if keep.is_empty() {
            return Err(FlowError::config("mask keeps no entries"));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.last().is_some_and(|&k| k >= n) {
            return Err(FlowError::shape("mask indices must be strictly increasing and in range"));
        }
        Ok(Mask {
            kind,
            in_shape: in_shape.to_vec(),
            out_shape: vec![keep.len()],
            keep,
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.keep
    }
}

impl LinearOperator for Mask {
    fn kind(&self) -> &'static str {
        self.kind
    }
    fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.keep.iter().map(|&i| x[i]).collect()
    }
    fn transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_len()];
        for (&i, &v) in self.keep.iter().zip(g) {
            out[i] = v;
        }
        out
    }
}

/// Average pooling over `factor x factor` blocks.
#[derive(Debug, Clone)]
pub struct DownsampleAvg {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    dims: (usize, usize, usize),
    factor: usize,
}

impl DownsampleAvg {
    pub fn new(in_shape: &[usize], factor: usize) -> Result<Self> {
        let (c, h, w) = image_dims(in_shape)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(FlowError::shape(format!(
                "downsampling factor {factor} does not divide {h}x{w}"
            )));
        }
        let mut out_shape = in_shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = h / factor;
        out_shape[r - 1] = w / factor;
        Ok(DownsampleAvg {
            in_shape: in_shape.to_vec(),
            out_shape,
            dims: (c, h, w),
            factor,
        })
    }
}

impl LinearOperator for DownsampleAvg {
    fn kind(&self) -> &'static str {
        "downsample_avg"
    }
    fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.dims;
        let f = self.factor;
        let (oh, ow) = (h / f, w / f);
        let scale = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for a in 0..f {
                        let row = ch * h * w + (i * f + a) * w + j * f;
                        s += x[row..row + f].iter().sum::<f64>();
                    }
                    out[ch * oh * ow + i * ow + j] = s * scale;
                }
            }
        }
        out
    }
    fn transpose(&self, g: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.dims;
        let f = self.factor;
        let (oh, ow) = (h / f, w / f);
        let scale = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[ch * h * w + i * w + j] = g[ch * oh * ow + (i / f) * ow + j / f] * scale;
                }
            }
        }
        out
    }
}

/// Same-size Gaussian blur with symmetric (edge-repeating) boundary extension.
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    shape: Vec<usize>,
    dims: (usize, usize, usize),
    kernel: Vec<f64>,
    size: usize,
}

/// Index into `0..n` of position `i` under half-sample symmetric extension.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

impl GaussianBlur {
    pub fn new(in_shape: &[usize], kernel_size: usize, sigma: f64) -> Result<Self> {
        let dims = image_dims(in_shape)?;
        if kernel_size.is_multiple_of(2) {
            return Err(FlowError::config(format!("blur kernel size must be odd, got {kernel_size}")));
        }
        if !(sigma > 0.0) {
            return Err(FlowError::config(format!("blur sigma must be positive, got {sigma}")));
        }
        let r = (kernel_size / 2) as isize;
        let mut kernel = Vec::with_capacity(kernel_size * kernel_size);
        for a in -r..=r {
            for b in -r..=r {
                kernel.push((-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        Ok(GaussianBlur {
            shape: in_shape.to_vec(),
            dims,
            kernel,
            size: kernel_size,
        })
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
}

impl LinearOperator for GaussianBlur {
    fn kind(&self) -> &'static str {
        "blur_gaussian"
    }
    fn in_shape(&self) -> &[usize] {
        &self.shape
    }
    fn out_shape(&self) -> &[usize] {
        &self.shape
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.dims;
        let r = (self.size / 2) as isize;
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for a in 0..self.size {
                        let ii = reflect(i as isize + a as isize - r, h);
                        let krow = &self.kernel[a * self.size..(a + 1) * self.size];
                        for (b, k) in krow.iter().enumerate() {
                            let jj = reflect(j as isize + b as isize - r, w);
                            s += k * x[base + ii * w + jj];
                        }
                    }
                    out[base + i * w + j] = s;
                }
            }
        }
        out
    }
    fn transpose(&self, g: &[f64]) -> Vec<f64> {
        // Scatter each output back through the same taps.
        let (c, h, w) = self.dims;
        let r = (self.size / 2) as isize;
        let mut out = vec![0.0; g.len()];
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for j in 0..w {
                    let gv = g[base + i * w + j];
                    for a in 0..self.size {
                        let ii = reflect(i as isize + a as isize - r, h);
                        let krow = &self.kernel[a * self.size..(a + 1) * self.size];
                        for (b, k) in krow.iter().enumerate() {
                            let jj = reflect(j as isize + b as isize - r, w);
                            out[base + ii * w + jj] += k * gv;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Above this length the Hartley transform goes through an FFT.
const DIRECT_HARTLEY_MAX: usize = 4096;

/// `S H D`: random sign flips `D`, orthonormal Hartley transform `H`
/// (`cas = cos + sin` rows of the DFT, symmetric and self-inverse), and a
/// random selection `S` of `round(rate * n)` rows.
#[derive(Debug, Clone)]
pub struct SubsampledHartley {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    signs: Vec<f64>,
    rows: Vec<usize>,
    cas: Vec<f64>,
}

impl SubsampledHartley {
    pub fn new(in_shape: &[usize], rate: f64, seed: u64, sign_seed: u64) -> Result<Self> {
        let n: usize = in_shape.iter().product();
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(FlowError::config(format!("sampling rate must lie in (0, 1], got {rate}")));
        }
        let m = ((rate * n as f64).round() as usize).max(1);
        let mut rows: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut rows);
        rows.truncate(m);
        rows.sort_unstable();
        let mut sign_rng = Rng::new(sign_seed);
        let signs = sign_rng.rademacher_vec(n);
        let cas = if n <= DIRECT_HARTLEY_MAX {
            (0..n)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    th.cos() + th.sin()
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(SubsampledHartley {
            in_shape: in_shape.to_vec(),
            out_shape: vec![m],
            signs,
            rows,
            cas,
        })
    }

    pub fn selected_rows(&self) -> &[usize] {
        &self.rows
    }

    /// Full orthonormal Hartley transform of `x`.
    fn hartley_full(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let s = 1.0 / (n as f64).sqrt();
        // X_k = sum x_j (cos - i sin)  =>  cas transform = Re X - Im X.
        buf.iter().map(|c| (c.re - c.im) * s).collect()
    }

    fn hartley_rows(&self, x: &[f64], rows: &[usize]) -> Vec<f64> {
        let n = x.len();
        let s = 1.0 / (n as f64).sqrt();
        rows.iter()
            .map(|&k| {
                let mut acc = 0.0;
                let mut idx = 0usize;
                for &xj in x {
                    acc += self.cas[idx] * xj;
                    idx += k;
                    if idx >= n {
                        idx -= n;
                    }
                }
                acc * s
            })
            .collect()
    }
}

impl LinearOperator for SubsampledHartley {
    fn kind(&self) -> &'static str {
        "dft_subsampled"
    }
    fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let signed: Vec<f64> = x.iter().zip(&self.signs).map(|(a, s)| a * s).collect();
        if self.cas.is_empty() {
            let full = Self::hartley_full(&signed);
            self.rows.iter().map(|&k| full[k]).collect()
        } else {
            self.hartley_rows(&signed, &self.rows)
        }
    }
    fn transpose(&self, g: &[f64]) -> Vec<f64> {
        let n = self.signs.len();
        if self.cas.is_empty() {
            let mut full = vec![0.0; n];
            for (&k, &v) in self.rows.iter().zip(g) {
                full[k] = v;
            }
            let h = Self::hartley_full(&full);
            h.iter().zip(&self.signs).map(|(a, s)| a * s).collect()
        } else {
            // H is symmetric: (H^T S^T g)_j = sum_k cas(k j) g_k / sqrt(n).
            let s = 1.0 / (n as f64).sqrt();
            let mut out = vec![0.0; n];
            for (&k, &gk) in self.rows.iter().zip(g) {
                let mut idx = 0usize;
                for o in out.iter_mut() {
                    *o += self.cas[idx] * gk;
                    idx += k;
                    if idx >= n {
                        idx -= n;
                    }
                }
            }
            out.iter()
                .zip(&self.signs)
                .map(|(a, sg)| a * s * sg)
                .collect()
        }
    }
}

/// Forward operator plus additive white Gaussian noise of std `sigma_y`.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    pub operator: SharedOperator,
    pub sigma_y: f64,
}

impl MeasurementModel {
    pub fn new(operator: SharedOperator, sigma_y: f64) -> Result<Self> {
        if !(sigma_y >= 0.0) || !sigma_y.is_finite() {
            return Err(FlowError::config(format!("sigma_y must be finite and >= 0, got {sigma_y}")));
        }
        Ok(MeasurementModel { operator, sigma_y })
    }

    pub fn measure(&self, x_true: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut y = self.operator.apply(x_true)?;
        if self.sigma_y > 0.0 {
            for v in y.data_mut() {
                *v += self.sigma_y * rng.normal();
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, norm};

    fn all_specs() -> Vec<(OperatorSpec, Vec<usize>)> {
        vec![
            (OperatorSpec::Identity, vec![12]),
            (OperatorSpec::MaskRandom { fraction: 0.7, seed: 3 }, vec![8, 8]),
            (OperatorSpec::MaskBox { rect: None }, vec![8, 8]),
            (OperatorSpec::MaskBox { rect: Some([1, 2, 3, 2]) }, vec![2, 6, 5]),
            (OperatorSpec::DownsampleAvg { factor: 2 }, vec![8, 6]),
            (OperatorSpec::DownsampleAvg { factor: 4 }, vec![3, 8, 8]),
            (OperatorSpec::BlurGaussian { kernel_size: 5, sigma: 1.2 }, vec![7, 9]),
            (OperatorSpec::BlurGaussian { kernel_size: 9, sigma: 3.0 }, vec![3, 4]),
            (OperatorSpec::DftSubsampled { rate: 0.5, seed: 1, sign_seed: 2 }, vec![8, 8]),
            (OperatorSpec::DftSubsampled { rate: 0.25, seed: 4, sign_seed: 5 }, vec![30]),
        ]
    }

    #[test]
    fn adjoint_identity_holds_for_every_operator() {
        let mut rng = Rng::new(17);
        for (spec, shape) in all_specs() {
            let op = make_operator(&spec, &shape).unwrap();
            for _ in 0..100 {
                let x = rng.normal_vec(op.in_len());
                let u = rng.normal_vec(op.out_len());
                let lhs = dot(&op.forward(&x), &u);
                let rhs = dot(&x, &op.transpose(&u));
                let scale = norm(&op.forward(&x)) * norm(&u) + norm(&x) * norm(&op.transpose(&u));
                assert!((lhs - rhs).abs() <= 1e-10 * scale.max(1.0), "{spec:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn operators_are_linear() {
        let mut rng = Rng::new(18);
        for (spec, shape) in all_specs() {
            let op = make_operator(&spec, &shape).unwrap();
            let x = rng.normal_vec(op.in_len());
            let z = rng.normal_vec(op.in_len());
            let (a, b) = (0.7, -1.3);
            let comb: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
            let lhs = op.forward(&comb);
            let (ax, az) = (op.forward(&x), op.forward(&z));
            for i in 0..lhs.len() {
                let rhs = a * ax[i] + b * az[i];
                assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{spec:?}");
            }
        }
    }

    #[test]
    fn identity_passes_through() {
        let op = make_operator(&OperatorSpec::Identity, &[3]).unwrap();
        assert_eq!(op.forward(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mask_gather_and_zero_fill() {
        let m = Mask::new("mask", &[3], vec![0, 2]).unwrap();
        assert_eq!(m.forward(&[5.0, 6.0, 7.0]), vec![5.0, 7.0]);
        assert_eq!(m.transpose(&[5.0, 7.0]), vec![5.0, 0.0, 7.0]);
    }

    #[test]
    fn random_mask_keeps_exact_count() {
        for (n, f) in [(256usize, 0.7), (256, 0.5), (100, 0.33), (17, 0.0)] {
            let op = make_operator(&OperatorSpec::MaskRandom { fraction: f, seed: 9 }, &[n]).unwrap();
            assert_eq!(op.out_len(), ((1.0 - f) * n as f64).round() as usize);
        }
        assert!(make_operator(&OperatorSpec::MaskRandom { fraction: 1.0, seed: 0 }, &[4]).is_err());
    }

    #[test]
    fn centered_box_is_half_side() {
        let op = make_operator(&OperatorSpec::MaskBox { rect: None }, &[16, 16]).unwrap();
        assert_eq!(op.out_len(), 256 - 64);
        let hidden = op.transpose(&vec![1.0; op.out_len()]);
        assert_eq!(hidden[4 * 16 + 4], 0.0);
        assert_eq!(hidden[11 * 16 + 11], 0.0);
        assert_eq!(hidden[3 * 16 + 4], 1.0);
        assert_eq!(hidden[12 * 16 + 12], 1.0);
    }

    #[test]
    fn hartley_of_delta_is_flat() {
        let op = make_operator(
            &OperatorSpec::DftSubsampled { rate: 1.0, seed: 0, sign_seed: 3 },
            &[8],
        )
        .unwrap();
        let mut e0 = vec![0.0; 8];
        e0[0] = 1.0;
        let y = op.forward(&e0);
        assert_eq!(y.len(), 8);
        for v in y {
            assert!((v.abs() - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn hartley_rows_are_orthonormal() {
        for (shape, rate) in [(vec![16, 16], 0.5), (vec![16, 16], 0.25), (vec![45], 0.6)] {
            let op = make_operator(
                &OperatorSpec::DftSubsampled { rate, seed: 11, sign_seed: 12 },
                &shape,
            )
            .unwrap();
            let a = op.to_matrix();
            let aat = a.matmul(&a.transpose());
            for i in 0..aat.rows() {
                for j in 0..aat.cols() {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((aat.get(i, j) - e).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn fast_hartley_matches_direct() {
        let n = 8192;
        let fast = SubsampledHartley::new(&[n], 0.01, 2, 3).unwrap();
        assert!(fast.cas.is_empty());
        let mut direct = fast.clone();
        direct.cas = (0..n)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                th.cos() + th.sin()
            })
            .collect();
        let mut rng = Rng::new(1);
        let x = rng.normal_vec(n);
        let (a, b) = (fast.forward(&x), direct.forward(&x));
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
        let g = rng.normal_vec(fast.out_len());
        let (a, b) = (fast.transpose(&g), direct.transpose(&g));
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn downsample_preserves_constants() {
        let op = make_operator(&OperatorSpec::DownsampleAvg { factor: 2 }, &[6, 8]).unwrap();
        let y = op.forward(&vec![1.0; 48]);
        assert_eq!(y, vec![1.0; 12]);
        assert!(matches!(
            make_operator(&OperatorSpec::DownsampleAvg { factor: 3 }, &[6, 8]),
            Err(FlowError::Shape(_))
        ));
    }

    #[test]
    fn blur_preserves_constants_and_kernel_sums_to_one() {
        let b = GaussianBlur::new(&[10, 10], 7, 2.0).unwrap();
        assert!((b.kernel().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for v in b.forward(&vec![0.5; 100]) {
            assert!((v - 0.5).abs() < 1e-14);
        }
        assert!(GaussianBlur::new(&[10, 10], 4, 1.0).is_err());
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!(
            OperatorSpec::from_kind("bicubic", &OperatorParams::default()),
            Err(FlowError::Config(_))
        ));
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let op = make_operator(&OperatorSpec::BlurGaussian { kernel_size: 3, sigma: 1.0 }, &[4, 4]).unwrap();
        let model = MeasurementModel::new(op.clone(), 0.0).unwrap();
        let x = Tensor::new(vec![4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let y = model.measure(&x, &mut Rng::new(0)).unwrap();
        assert_eq!(y.data(), op.forward(x.data()).as_slice());
    }

    #[test]
    fn measurement_noise_has_requested_std() {
        let op = make_operator(&OperatorSpec::Identity, &[4]).unwrap();
        let model = MeasurementModel::new(op, 0.1).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4, 0.6, 0.8]);
        let mut rng = Rng::new(6);
        let n = 10_000;
        let mut s2 = [0.0; 4];
        let mut s1 = [0.0; 4];
        for _ in 0..n {
            let y = model.measure(&x, &mut rng).unwrap();
            for k in 0..4 {
                let e = y.data()[k] - x.data()[k];
                s1[k] += e;
                s2[k] += e * e;
            }
        }
        for k in 0..4 {
            let m = s1[k] / n as f64;
            let sd = (s2[k] / n as f64 - m * m).sqrt();
            assert!((sd - 0.1).abs() <= 0.005, "{sd}");
        }
    }
}
