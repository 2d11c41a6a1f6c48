//! Fourier encoding, Cartesian undersampling and data consistency.
//!
//! Conventions: the transform is centered (DC at `(h/2, w/2)`) and
//! orthonormal, so `fft2c` is unitary. Undersampling is along the width
//! (phase-encode) axis: a mask samples whole columns.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_store::{self, Tensor};
use crate::scalar::Real;

/// Two-channel (real, imaginary) image, stored channel-major: `2×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![T::zero(); 2 * height * width],
        }
    }

    /// Magnitude-style image: `values` fill the real channel, imaginary is zero.
    pub fn from_real(height: usize, width: usize, values: &[T]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "real plane {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        let mut img = Self::zeros(height, width);
        img.data[..height * width].copy_from_slice(values);
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn real(&self) -> &[T] {
        &self.data[..self.height * self.width]
    }

    pub fn imag(&self) -> &[T] {
        &self.data[self.height * self.width..]
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![2, self.height, self.width],
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
        .expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[2, h, w] => Self::new(h, w, t.data().iter().map(|&v| T::of(v as f64)).collect()),
            other => Err(Error::Shape(format!("expected [2, H, W], got {other:?}"))),
        }
    }

    fn to_complex(&self) -> Vec<Complex<T>> {
        let (re, im) = self.data.split_at(self.height * self.width);
        re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect()
    }

    fn from_complex(height: usize, width: usize, values: &[Complex<T>]) -> Self {
        let n = height * width;
        let mut data = vec![T::zero(); 2 * n];
        for (i, c) in values.iter().enumerate() {
            data[i] = c.re;
            data[n + i] = c.im;
        }
        ImageTensor { height, width, data }
    }
}

/// Fourier-domain samples, `H×W` complex, DC at the center.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceTensor<T = f32> {
    height: usize,
    width: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> KSpaceTensor<T> {
    pub fn new(height: usize, width: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "k-space {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(KSpaceTensor { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        KSpaceTensor {
            height,
            width,
            data: vec![Complex::new(T::zero(), T::zero()); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> KSpaceTensor<U> {
        KSpaceTensor {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|c| Complex::new(U::of(c.re.as_f64()), U::of(c.im.as_f64())))
                .collect(),
        }
    }
}

/// Planned centered orthonormal 2-D transform for one image shape.
pub struct CenteredFft<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> CenteredFft<T> {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Shape(format!(
                "centered transform needs even positive dims, got {height}x{width}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(CenteredFft {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// In-place centered transform of a row-major `H×W` complex buffer.
    pub fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(buf.len(), h * w);
        // for even sizes ifftshift == fftshift == roll by half
        roll_half(buf, h, w);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut t = transpose(buf, h, w);
        cols.process(&mut t);
        let back = transpose(&t, w, h);
        buf.copy_from_slice(&back);
        roll_half(buf, h, w);
        let scale = T::one() / T::of((h * w) as f64).sqrt();
        for v in buf.iter_mut() {
            *v = *v * scale;
        }
    }

    pub fn forward(&self, image: &ImageTensor<T>) -> Result<KSpaceTensor<T>> {
        self.check(image.height, image.width)?;
        let mut buf = image.to_complex();
        self.transform(&mut buf, false);
        Ok(KSpaceTensor {
            height: self.height,
            width: self.width,
            data: buf,
        })
    }

    pub fn inverse(&self, k: &KSpaceTensor<T>) -> Result<ImageTensor<T>> {
        self.check(k.height, k.width)?;
        let mut buf = k.data.clone();
        self.transform(&mut buf, true);
        Ok(ImageTensor::from_complex(self.height, self.width, &buf))
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "transform planned for {}x{}, got {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn roll_half<T: Copy>(buf: &mut [T], h: usize, w: usize) {
    let (hh, hw) = (h / 2, w / 2);
    for row in buf.chunks_exact_mut(w) {
        row.rotate_left(hw);
    }
    buf.rotate_left(hh * w);
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        out.extend((0..rows).map(|i| src[i * cols + j]));
    }
    out
}

pub fn fft2c<T: Real>(image: &ImageTensor<T>) -> Result<KSpaceTensor<T>> {
    CenteredFft::new(image.height, image.width)?.forward(image)
}

pub fn ifft2c<T: Real>(k: &KSpaceTensor<T>) -> Result<ImageTensor<T>> {
    CenteredFft::new(k.height, k.width)?.inverse(k)
}

/// Parameters of the 1-D Gaussian variable-density Cartesian mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub accel: f64,
    /// Fraction of the width always sampled around DC.
    pub center_fraction: f64,
    /// Gaussian standard deviation as a fraction of the width.
    pub std_fraction: f64,
}

impl MaskConfig {
    pub const DEFAULT_CENTER_FRACTION: f64 = 0.04;
    pub const DEFAULT_STD_FRACTION: f64 = 1.0 / 6.0;

    pub fn new(accel: f64) -> Self {
        MaskConfig {
            accel,
            center_fraction: Self::DEFAULT_CENTER_FRACTION,
            std_fraction: Self::DEFAULT_STD_FRACTION,
        }
    }

    /// Checks the size-independent constraints.
    pub fn validate(&self) -> Result<()> {
        let MaskConfig {
            accel,
            center_fraction,
            std_fraction,
        } = *self;
        if !(accel.is_finite() && accel > 1.0) {
            return Err(Error::InvalidArgument(format!("accel must be > 1, got {accel}")));
        }
        if !(0.0..1.0 / accel).contains(&center_fraction) {
            return Err(Error::InvalidArgument(format!(
                "center_fraction must lie in [0, 1/accel), got {center_fraction}"
            )));
        }
        if !(std_fraction.is_finite() && std_fraction > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "std_fraction must be positive, got {std_fraction}"
            )));
        }
        Ok(())
    }

    pub fn generate(&self, height: usize, width: usize, seed: u64) -> Result<SamplingMask> {
        self.validate()?;
        let MaskConfig {
            accel,
            center_fraction,
            std_fraction,
        } = *self;
        if height == 0 || width == 0 {
            return Err(Error::Shape("mask needs positive dims".into()));
        }
        let n_lines = (width as f64 / accel).round() as usize;
        let n_center = (center_fraction * width as f64).ceil() as usize;
        if n_lines == 0 || n_center > n_lines {
            return Err(Error::InvalidArgument(format!(
                "infeasible mask: {n_lines} lines with {n_center} forced center lines (w={width}, accel={accel})"
            )));
        }
        let dc = width / 2;
        let start = dc - n_center / 2;
        let mut columns = vec![false; width];
        for c in &mut columns[start..start + n_center] {
            *c = true;
        }
        let candidates: Vec<usize> = (0..width).filter(|&j| !columns[j]).collect();
        let sigma = std_fraction * width as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drawn = candidates
            .choose_multiple_weighted(&mut rng, n_lines - n_center, |&j| {
                let d = j as f64 - dc as f64;
                (-0.5 * (d / sigma).powi(2)).exp()
            })
            .map_err(|e| Error::InvalidArgument(format!("mask weights: {e}")))?;
        for &j in drawn {
            columns[j] = true;
        }
        Ok(SamplingMask {
            height,
            width,
            columns,
            accel,
            center_fraction,
            std_fraction,
            seed,
        })
    }
}

/// Binary Cartesian mask: every phase-encode column is either fully sampled
/// or fully skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    columns: Vec<bool>,
    accel: f64,
    center_fraction: f64,
    std_fraction: f64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MaskMetadata {
    height: usize,
    width: usize,
    accel: f64,
    center_fraction: f64,
    std_fraction: f64,
    seed: u64,
    sampled_lines: Vec<usize>,
}

impl SamplingMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self::from_columns(height, width, vec![true; width])
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_columns(height, width, vec![false; width])
    }

    /// Mask from explicit column flags; `accel` is derived from the count.
    pub fn from_columns(height: usize, width: usize, columns: Vec<bool>) -> Self {
        assert_eq!(columns.len(), width, "one flag per column");
        let n = columns.iter().filter(|&&c| c).count();
        SamplingMask {
            height,
            width,
            accel: width as f64 / n as f64,
            center_fraction: 0.0,
            std_fraction: 0.0,
            seed: 0,
            columns,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn is_sampled(&self, column: usize) -> bool {
        self.columns[column]
    }

    pub fn sampled_lines(&self) -> Vec<usize> {
        (0..self.width).filter(|&j| self.columns[j]).collect()
    }

    /// Dense `H×W` 0/1 mask.
    pub fn to_dense(&self) -> Vec<f32> {
        let row: Vec<f32> = self.columns.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        row.repeat(self.height)
    }

    /// Writes `<dir>/<name>.tnsr` (dense mask) and `<dir>/<name>.toml` (metadata).
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        let t = Tensor::new(vec![self.height, self.width], self.to_dense())?;
        io_store::write_tensor(dir, name, &t)?;
        let meta = MaskMetadata {
            height: self.height,
            width: self.width,
            accel: self.accel,
            center_fraction: self.center_fraction,
            std_fraction: self.std_fraction,
            seed: self.seed,
            sampled_lines: self.sampled_lines(),
        };
        io_store::write_toml(&dir.join(format!("{name}.toml")), &meta)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let meta: MaskMetadata = io_store::read_toml(&dir.join(format!("{name}.toml")))?;
        let t = io_store::read_tensor(&dir.join(format!("{name}.{}", io_store::TENSOR_EXT)))?;
        if t.shape() != [meta.height, meta.width] {
            return Err(Error::Shape(format!("mask tensor shape {:?}", t.shape())));
        }
        let mut columns = vec![false; meta.width];
        for (j, c) in columns.iter_mut().enumerate() {
            let v = t.data()[j];
            *c = v != 0.0;
            if (0..meta.height).any(|i| t.data()[i * meta.width + j] != v) {
                return Err(Error::Format(format!("mask column {j} is not constant")));
            }
        }
        if columns.iter().enumerate().filter(|(_, &c)| c).map(|(j, _)| j).ne(meta.sampled_lines.iter().copied()) {
            return Err(Error::Format("mask metadata disagrees with tensor".into()));
        }
        Ok(SamplingMask {
            height: meta.height,
            width: meta.width,
            columns,
            accel: meta.accel,
            center_fraction: meta.center_fraction,
            std_fraction: meta.std_fraction,
            seed: meta.seed,
        })
    }
}

/// Gaussian variable-density mask with the default Gaussian width.
pub fn make_gaussian_mask(
    height: usize,
    width: usize,
    accel: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    MaskConfig {
        accel,
        center_fraction,
        std_fraction: MaskConfig::DEFAULT_STD_FRACTION,
    }
    .generate(height, width, seed)
}

fn check_mask<T>(h: usize, w: usize, mask: &SamplingMask) -> Result<()> {
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs data {h}x{w}",
            mask.height, mask.width
        )));
    }
    Ok(())
}

/// `y = M ⊙ fft2c(x)`.
pub fn undersample<T: Real>(image: &ImageTensor<T>, mask: &SamplingMask) -> Result<KSpaceTensor<T>> {
    check_mask::<T>(image.height, image.width, mask)?;
    let mut k = fft2c(image)?;
    apply_mask(&mut k.data, image.width, mask.columns());
    Ok(k)
}

fn apply_mask<T: Real>(k: &mut [Complex<T>], width: usize, columns: &[bool]) {
    for row in k.chunks_exact_mut(width) {
        for (v, &keep) in row.iter_mut().zip(columns) {
            if !keep {
                *v = Complex::new(T::zero(), T::zero());
            }
        }
    }
}

pub fn zero_filled<T: Real>(y: &KSpaceTensor<T>) -> Result<ImageTensor<T>> {
    ifft2c(y)
}

/// Data-consistency rule at sampled k-space locations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DcMode {
    /// Replace with the measurement.
    #[default]
    Hard,
    /// `(k + λ·y) / (1 + λ)`.
    Soft { lambda: f64 },
}

impl DcMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DcMode::Hard => Ok(()),
            DcMode::Soft { lambda } if lambda.is_finite() && lambda > 0.0 => Ok(()),
            DcMode::Soft { lambda } => Err(Error::InvalidArgument(format!(
                "soft data consistency needs a positive finite lambda, got {lambda}"
            ))),
        }
    }

    /// Weight kept on the prediction at sampled locations.
    fn keep<T: Real>(&self) -> T {
        match *self {
            DcMode::Hard => T::zero(),
            DcMode::Soft { lambda } => T::of(1.0 / (1.0 + lambda)),
        }
    }
}

/// In-place data consistency on a raw `2×H×W` buffer.
pub(crate) fn dc_in_place<T: Real>(
    fft: &CenteredFft<T>,
    x: &mut [T],
    y: &[Complex<T>],
    columns: &[bool],
    mode: DcMode,
) {
    if !columns.contains(&true) {
        return;
    }
    let (h, w) = fft.shape();
    let n = h * w;
    let mut k: Vec<Complex<T>> = (0..n).map(|i| Complex::new(x[i], x[n + i])).collect();
    fft.transform(&mut k, false);
    let keep = mode.keep::<T>();
    let take = T::one() - keep;
    for (row_k, row_y) in k.chunks_exact_mut(w).zip(y.chunks_exact(w)) {
        for ((kv, &yv), &sampled) in row_k.iter_mut().zip(row_y).zip(columns) {
            if sampled {
                *kv = *kv * keep + yv * take;
            }
        }
    }
    fft.transform(&mut k, true);
    for (i, v) in k.iter().enumerate() {
        x[i] = v.re;
        x[n + i] = v.im;
    }
}

/// Adjoint of the linear part of data consistency: `ifft2c(D ⊙ fft2c(g))`
/// with `D` = keep-weight on sampled columns and 1 elsewhere.
pub(crate) fn dc_adjoint_in_place<T: Real>(
    fft: &CenteredFft<T>,
    g: &mut [T],
    columns: &[bool],
    mode: DcMode,
) {
    if !columns.contains(&true) {
        return;
    }
    let (h, w) = fft.shape();
    let n = h * w;
    let mut k: Vec<Complex<T>> = (0..n).map(|i| Complex::new(g[i], g[n + i])).collect();
    fft.transform(&mut k, false);
    let keep = mode.keep::<T>();
    for row in k.chunks_exact_mut(w) {
        for (kv, &sampled) in row.iter_mut().zip(columns) {
            if sampled {
                *kv = *kv * keep;
            }
        }
    }
    fft.transform(&mut k, true);
    for (i, v) in k.iter().enumerate() {
        g[i] = v.re;
        g[n + i] = v.im;
    }
}

pub fn data_consistency<T: Real>(
    x_pred: &ImageTensor<T>,
    y: &KSpaceTensor<T>,
    mask: &SamplingMask,
    mode: DcMode,
) -> Result<ImageTensor<T>> {
    mode.validate()?;
    if (x_pred.height, x_pred.width) != (y.height, y.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs k-space {}x{}",
            x_pred.height, x_pred.width, y.height, y.width
        )));
    }
    check_mask::<T>(y.height, y.width, mask)?;
    let fft = CenteredFft::new(y.height, y.width)?;
    let mut out = x_pred.clone();
    dc_in_place(&fft, &mut out.data, &y.data, mask.columns(), mode);
    Ok(out)
}
