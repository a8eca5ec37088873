//! Dense `f64` tensors (rank ≤ 4), 2D cross-correlation and image resampling.
//!
//! Spatial coordinates follow one convention throughout the crate: pixel
//! `(row, col)` covers the continuous square `[col, col + 1) × [row, row + 1)`,
//! so its center sits at `(col + 0.5, row + 0.5)`. A patch of size `H × W`
//! therefore has its geometric center at `(W / 2, H / 2)`, which is the pixel
//! index `((W - 1) / 2, (H - 1) / 2)`.
//!
//! Rotations are counter-clockwise as seen on screen (rows growing
//! downwards). Angles are in radians.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Result};

pub const MAX_RANK: usize = 4;

/// Row-major dense tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value {} at flat index {i}", data[i]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each({
            let mut f = f;
            move |(i, v)| *v = f(i)
        });
        t
    }

    /// Internal constructor; callers guarantee the length and finiteness.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_mismatch("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Size of one slice along axis 0.
    pub fn plane_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Slice `i` along axis 0 as raw data.
    pub fn slab(&self, i: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copies slices `start..end` along axis 0.
    pub fn narrow(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.shape[0]);
        let n = self.plane_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::from_raw(shape, self.data[start * n..end * n].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_mismatch("axpy", &self.shape, &other.shape);
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Flat index of the largest value (first occurrence).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return invalid(format!("tensor rank must be 1..={MAX_RANK}, got {shape:?}"));
    }
    if shape.contains(&0) {
        return invalid(format!("tensor extents must be positive, got {shape:?}"));
    }
    Ok(())
}

/// Complex tensor, used for sampled harmonic atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return invalid(format!("shape {shape:?} does not match {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn re(&self) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|z| z.re).collect())
    }

    pub fn im(&self) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|z| z.im).collect())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&self, alpha: Complex64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| alpha * z).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Rotates the real and imaginary parts independently.
    pub fn rotated(&self, theta: f64, interp: Interpolation) -> Self {
        let re = rotate(&self.re(), theta, interp);
        let im = rotate(&self.im(), theta, interp);
        Self {
            shape: self.shape.clone(),
            data: re
                .data()
                .iter()
                .zip(im.data())
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-correlation

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let n = n + 2 * pad;
    (k <= n).then(|| (n - k) / stride + 1)
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry(
    input: &[usize],
    kernels: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return invalid("conv2d stride must be positive");
    }
    if input.len() != 3 || kernels.len() != 4 || input[0] != kernels[1] {
        return shape_mismatch("conv2d", input, kernels);
    }
    let (Some(ho), Some(wo)) = (
        conv_out_len(input[1], kernels[2], stride, padding),
        conv_out_len(input[2], kernels[3], stride, padding),
    ) else {
        return shape_mismatch("conv2d", input, kernels);
    };
    Ok(ConvGeometry {
        cin: input[0],
        h: input[1],
        w: input[2],
        cout: kernels[0],
        kh: kernels[2],
        kw: kernels[3],
        ho,
        wo,
    })
}

fn zero_pad(input: &Tensor, padding: usize) -> Tensor {
    if padding == 0 {
        return input.clone();
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for y in 0..h {
            let src = &input.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
            let start = (ci * hp + y + padding) * wp + padding;
            out.data_mut()[start..start + w].copy_from_slice(src);
        }
    }
    out
}

/// 2D cross-correlation (no kernel flip), summed over input channels.
///
/// `input` is `[C, H, W]`, `kernels` is `[Ĉ, C, Kh, Kw]`; the result is
/// `[Ĉ, H', W']` with `H' = ⌊(H + 2p − Kh) / stride⌋ + 1`. Padding is zero.
/// Siamese trackers call this operation "convolution"; the crate uses it
/// for both layer filtering and template matching.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernels.shape(), stride, padding)?;
    let padded = zero_pad(input, padding);
    let (hp, wp) = (g.h + 2 * padding, g.w + 2 * padding);
    let x = padded.data();
    let k = kernels.data();
    let mut out = vec![0.0; g.cout * g.ho * g.wo];
    for oc in 0..g.cout {
        let plane = &mut out[oc * g.ho * g.wo..(oc + 1) * g.ho * g.wo];
        for ic in 0..g.cin {
            let xin = &x[ic * hp * wp..(ic + 1) * hp * wp];
            let kbase = (oc * g.cin + ic) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kv = k[kbase + ky * g.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let row = &xin[(oy * stride + ky) * wp..];
                        let orow = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                        if stride == 1 {
                            for (o, &v) in orow.iter_mut().zip(&row[kx..kx + g.wo]) {
                                *o += kv * v;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += kv * row[ox * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![g.cout, g.ho, g.wo], out))
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernels: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input_shape, kernels.shape(), stride, padding)?;
    if grad_out.shape() != [g.cout, g.ho, g.wo] {
        return shape_mismatch("conv2d_grad_input", grad_out.shape(), &[g.cout, g.ho, g.wo]);
    }
    let (hp, wp) = (g.h + 2 * padding, g.w + 2 * padding);
    let mut gin = vec![0.0; g.cin * hp * wp];
    let k = kernels.data();
    let go = grad_out.data();
    for oc in 0..g.cout {
        let plane = &go[oc * g.ho * g.wo..(oc + 1) * g.ho * g.wo];
        for ic in 0..g.cin {
            let gplane = &mut gin[ic * hp * wp..(ic + 1) * hp * wp];
            let kbase = (oc * g.cin + ic) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kv = k[kbase + ky * g.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let grow = &plane[oy * g.wo..(oy + 1) * g.wo];
                        let irow = &mut gplane[(oy * stride + ky) * wp..];
                        if stride == 1 {
                            for (i, &v) in irow[kx..kx + g.wo].iter_mut().zip(grow) {
                                *i += kv * v;
                            }
                        } else {
                            for (ox, &v) in grow.iter().enumerate() {
                                irow[ox * stride + kx] += kv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    let padded = Tensor::from_raw(vec![g.cin, hp, wp], gin);
    if padding == 0 {
        return Ok(padded);
    }
    let mut out = Tensor::zeros(&[g.cin, g.h, g.w]);
    for ci in 0..g.cin {
        for y in 0..g.h {
            let start = (ci * hp + y + padding) * wp + padding;
            out.data_mut()[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w]
                .copy_from_slice(&padded.data()[start..start + g.w]);
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to its kernels.
pub fn conv2d_grad_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != [g.cout, g.ho, g.wo] {
        return shape_mismatch("conv2d_grad_kernels", grad_out.shape(), &[g.cout, g.ho, g.wo]);
    }
    let padded = zero_pad(input, padding);
    let (hp, wp) = (g.h + 2 * padding, g.w + 2 * padding);
    let x = padded.data();
    let go = grad_out.data();
    let mut gk = vec![0.0; g.cout * g.cin * g.kh * g.kw];
    for oc in 0..g.cout {
        let plane = &go[oc * g.ho * g.wo..(oc + 1) * g.ho * g.wo];
        for ic in 0..g.cin {
            let xin = &x[ic * hp * wp..(ic + 1) * hp * wp];
            let kbase = (oc * g.cin + ic) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let grow = &plane[oy * g.wo..(oy + 1) * g.wo];
                        let row = &xin[(oy * stride + ky) * wp..];
                        if stride == 1 {
                            acc += grow
                                .iter()
                                .zip(&row[kx..kx + g.wo])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for (ox, &v) in grow.iter().enumerate() {
                                acc += v * row[ox * stride + kx];
                            }
                        }
                    }
                    gk[kbase + ky * g.kw + kx] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_raw(kernel_shape.to_vec(), gk))
}

// ---------------------------------------------------------------------------
// Images and resampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Value used for samples that fall outside the source support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zero,
    /// Per-channel mean of the source.
    ChannelMean,
}

/// An image `[C, H, W]` with `C ∈ {1, 3}` and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch(Tensor);

impl ImagePatch {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || !(t.dim(0) == 1 || t.dim(0) == 3) {
            return invalid(format!("image must be [1|3, H, W], got {:?}", t.shape()));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("image values must lie in [0, 1]");
        }
        Ok(Self(t))
    }

    pub fn from_gray(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![1, h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn channel_means(&self) -> Vec<f64> {
        channel_means(&self.0)
    }

    pub fn rotated(&self, theta: f64, interp: Interpolation) -> Self {
        Self(rotate(&self.0, theta, interp))
    }

    /// Crops an `h × w` window centered on the continuous point `center`,
    /// padding out-of-frame area with the per-channel frame mean.
    pub fn crop_centered(&self, center: (f64, f64), size: (usize, usize)) -> Result<Self> {
        let (h, w) = size;
        if h == 0 || w == 0 {
            return invalid(format!("crop size must be positive, got {size:?}"));
        }
        Ok(Self(resample(
            &self.0,
            center,
            (h as f64, w as f64),
            (h, w),
            0.0,
            Interpolation::Bilinear,
            Fill::ChannelMean,
        )))
    }

    /// Samples a `out` sized window covering `src_size` frame pixels around
    /// `center`, with the content rotated counter-clockwise by `theta`.
    pub fn crop_resampled(
        &self,
        center: (f64, f64),
        src_size: (f64, f64),
        out: (usize, usize),
        theta: f64,
    ) -> Result<Self> {
        if out.0 == 0 || out.1 == 0 || !(src_size.0 > 0.0 && src_size.1 > 0.0) {
            return invalid(format!("crop size must be positive, got {src_size:?} -> {out:?}"));
        }
        Ok(Self(resample(
            &self.0,
            center,
            src_size,
            out,
            theta,
            Interpolation::Bilinear,
            Fill::ChannelMean,
        )))
    }
}

pub fn channel_means(t: &Tensor) -> Vec<f64> {
    (0..t.dim(0))
        .map(|c| {
            let s = t.slab(c);
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Reduces an angle to `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Number of quarter turns if `theta` is (numerically) a multiple of π/2.
pub fn quarter_turns(theta: f64) -> Option<u8> {
    let t = wrap_angle(theta);
    let q = (t / FRAC_PI_2).round();
    ((t - q * FRAC_PI_2).abs() < 1e-12).then(|| q.rem_euclid(4.0) as u8)
}

/// Rotates the last two (spatial) axes counter-clockwise by `theta` about
/// the patch center. Samples outside the support are zero.
///
/// Multiples of π/2 on square planes (and of π on any plane) are exact
/// index permutations.
pub fn rotate(t: &Tensor, theta: f64, interp: Interpolation) -> Tensor {
    assert!(t.rank() >= 2, "rotate needs at least two axes");
    let r = t.rank();
    let (h, w) = (t.dim(r - 2), t.dim(r - 1));
    if let Some(q) = quarter_turns(theta) {
        if q == 0 {
            return t.clone();
        }
        if q == 2 || h == w {
            return rotate_quarter(t, q);
        }
    }
    let (s, c) = wrap_angle(theta).sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let planes = t.len() / (h * w);
    let mut out = vec![0.0; t.len()];
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for row in 0..h {
            let y = row as f64 - cy;
            for col in 0..w {
                let x = col as f64 - cx;
                let sx = cx + x * c - y * s;
                let sy = cy + x * s + y * c;
                dst[row * w + col] = sample_plane(src, h, w, sy, sx, interp, 0.0);
            }
        }
    }
    Tensor::from_raw(t.shape().to_vec(), out)
}

fn rotate_quarter(t: &Tensor, q: u8) -> Tensor {
    let r = t.rank();
    let (h, w) = (t.dim(r - 2), t.dim(r - 1));
    let planes = t.len() / (h * w);
    let mut out = vec![0.0; t.len()];
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for row in 0..h {
            for col in 0..w {
                let (sr, sc) = match q {
                    1 => (col, w - 1 - row),
                    2 => (h - 1 - row, w - 1 - col),
                    3 => (w - 1 - col, row),
                    _ => (row, col),
                };
                dst[row * w + col] = src[sr * w + sc];
            }
        }
    }
    Tensor::from_raw(t.shape().to_vec(), out)
}

/// Samples one plane at fractional pixel index `(y, x)`.
fn sample_plane(
    src: &[f64],
    h: usize,
    w: usize,
    y: f64,
    x: f64,
    interp: Interpolation,
    fill: f64,
) -> f64 {
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            fill
        } else {
            src[r as usize * w + c as usize]
        }
    };
    match interp {
        Interpolation::Nearest => at(y.round() as isize, x.round() as isize),
        Interpolation::Bilinear => {
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (r, c) = (y0 as isize, x0 as isize);
            if fy == 0.0 && fx == 0.0 {
                return at(r, c);
            }
            let top = at(r, c) * (1.0 - fx) + at(r, c + 1) * fx;
            let bottom = at(r + 1, c) * (1.0 - fx) + at(r + 1, c + 1) * fx;
            top * (1.0 - fy) + bottom * fy
        }
    }
}

/// General window sampler used for crops: output pixel `(i, j)` reads the
/// source at `center + R·d`, where `d` is the pixel's offset from the output
/// center scaled to `src_size`, and `R` rotates the content
/// counter-clockwise by `theta`.
pub fn resample(
    t: &Tensor,
    center: (f64, f64),
    src_size: (f64, f64),
    out: (usize, usize),
    theta: f64,
    interp: Interpolation,
    fill: Fill,
) -> Tensor {
    let (c_n, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let (oh, ow) = out;
    let (sy_scale, sx_scale) = (src_size.0 / oh as f64, src_size.1 / ow as f64);
    let (s, c) = if theta == 0.0 {
        (0.0, 1.0)
    } else {
        wrap_angle(theta).sin_cos()
    };
    let means = match fill {
        Fill::Zero => vec![0.0; c_n],
        Fill::ChannelMean => channel_means(t),
    };
    let mut data = vec![0.0; c_n * oh * ow];
    for ch in 0..c_n {
        let src = t.slab(ch);
        for i in 0..oh {
            let dy = (i as f64 + 0.5 - oh as f64 / 2.0) * sy_scale;
            for j in 0..ow {
                let dx = (j as f64 + 0.5 - ow as f64 / 2.0) * sx_scale;
                let (rx, ry) = (dx * c - dy * s, dx * s + dy * c);
                // continuous -> index coordinates
                let x = center.0 + rx - 0.5;
                let y = center.1 + ry - 0.5;
                data[(ch * oh + i) * ow + j] = sample_plane(src, h, w, y, x, interp, means[ch]);
            }
        }
    }
    Tensor::from_raw(vec![c_n, oh, ow], data)
}

/// Maps a continuous point through the same counter-clockwise rotation that
/// `rotate` applies to image content, about `pivot`.
pub fn rotate_point(p: (f64, f64), pivot: (f64, f64), theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let (x, y) = (p.0 - pivot.0, p.1 - pivot.1);
    (pivot.0 + x * c + y * s, pivot.1 - x * s + y * c)
}

/// Bicubic (Keys, a = −0.5) upsampling of a `[H, W]` or `[1, H, W]` map by an
/// integer factor, with pixel-center alignment and clamped borders.
pub fn upsample_bicubic(map: &Tensor, factor: usize) -> Tensor {
    let r = map.rank();
    let (h, w) = (map.dim(r - 2), map.dim(r - 1));
    if factor == 1 {
        return map.clone();
    }
    let (oh, ow) = (h * factor, w * factor);
    let weights = |n: usize, on: usize| -> Vec<([usize; 4], [f64; 4])> {
        (0..on)
            .map(|o| {
                let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                let base = src.floor();
                let t = src - base;
                let mut idx = [0usize; 4];
                let mut wt = [0.0; 4];
                for k in 0..4 {
                    let i = base as isize - 1 + k as isize;
                    idx[k] = i.clamp(0, n as isize - 1) as usize;
                    wt[k] = cubic_weight(t - (k as f64 - 1.0));
                }
                (idx, wt)
            })
            .collect()
    };
    let wy = weights(h, oh);
    let wx = weights(w, ow);
    let src = map.data();
    // rows first, then columns
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for (x, (idx, wt)) in wx.iter().enumerate() {
            tmp[y * ow + x] = (0..4).map(|k| wt[k] * src[y * w + idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (y, (idx, wt)) in wy.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = (0..4).map(|k| wt[k] * tmp[idx[k] * ow + x]).sum();
        }
    }
    let mut shape = map.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_raw(shape, out)
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
        let (ci, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
        let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += x.data()[(c * h + oy * stride + ky) * w + ox * stride + kx]
                                    * k.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 5], &mut rng);
        let k = Tensor::filled(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let x = random(&[2, 7, 7], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let y = conv2d(&x, &k, stride, 0).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &k, stride)) < 1e-12);
        }
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let msg = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[2, 5, 5]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
        let big = Tensor::zeros(&[2, 7, 7, 1]);
        assert!(conv2d(&x, &big.reshape(&[1, 2, 7, 7]).unwrap(), 1, 0).is_err());
    }

    #[test]
    fn padded_conv_matches_explicit_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 6, 6], &mut rng);
        let k = random(&[2, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        let y2 = conv_oracle(&zero_pad(&x, 1), &k, 1);
        assert!(y.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x, k), g> = <x, grad_input(g)> = <k, grad_kernels(x, g)>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, pad) in [(1, 0), (2, 0), (1, 1), (2, 1)] {
            let x = random(&[3, 9, 9], &mut rng);
            let k = random(&[2, 3, 3, 3], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let g = random(y.shape(), &mut rng);
            let gx = conv2d_grad_input(&g, &k, x.shape(), stride, pad).unwrap();
            let gk = conv2d_grad_kernels(&x, &g, k.shape(), stride, pad).unwrap();
            let lhs = y.dot(&g);
            assert!((lhs - x.dot(&gx)).abs() < 1e-10);
            assert!((lhs - k.dot(&gk)).abs() < 1e-10);
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 6, 9], &mut rng);
        assert_eq!(rotate(&x, 0.0, Interpolation::Bilinear), x);
    }

    #[test]
    fn rotate_quarter_turn_two_by_two() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = rotate(&x, FRAC_PI_2, Interpolation::Bilinear);
        // [[a, b], [c, d]] -> [[b, d], [a, c]]
        assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn quarter_turn_fast_path_matches_general_sampler() {
        // Sampling at the rotated grid hits pixel centers up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[1, 7, 7], &mut rng);
        let exact = rotate(&x, FRAC_PI_2, Interpolation::Bilinear);
        let near = rotate(&x, FRAC_PI_2 + 1e-9, Interpolation::Nearest);
        assert_eq!(exact, near);
    }

    fn round_trip_error(x: &Tensor, theta: f64) -> f64 {
        let back = rotate(
            &rotate(x, theta, Interpolation::Bilinear),
            -theta,
            Interpolation::Bilinear,
        );
        let (mut num, mut den) = (0.0, 0.0);
        for r in 8..24 {
            for c in 8..24 {
                let a = x.data()[r * 32 + c];
                let b = back.data()[r * 32 + c];
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn rotation_round_trip_bound() {
        // Bounds measured over seeds 0..5 on the central 16x16 window:
        // band-limited images stay below 0.0097, white noise below 0.351.
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coarse = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(0.0..1.0));
            let smooth = upsample_bicubic(&coarse, 8);
            let rel = round_trip_error(&smooth, PI / 7.0);
            assert!(rel < 0.02, "band-limited round trip error {rel}");
            let noise = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0));
            let rel = round_trip_error(&noise, PI / 7.0);
            assert!(rel < 0.40, "white-noise round trip error {rel}");
        }
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = ImagePatch::new(Tensor::from_fn(&[1, 6, 8], |_| rng.random())).unwrap();
        let crop = img.crop_centered((4.0, 3.0), (6, 8)).unwrap();
        assert_eq!(crop, img);
    }

    #[test]
    fn crop_top_left_block_of_ramp() {
        let ramp: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let img = ImagePatch::from_gray(4, 4, ramp.clone()).unwrap();
        let crop = img.crop_centered((1.0, 1.0), (2, 2)).unwrap();
        assert_eq!(crop.tensor().data(), &[ramp[0], ramp[1], ramp[4], ramp[5]]);
    }

    #[test]
    fn crop_outside_frame_is_channel_mean() {
        let ramp: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let img = ImagePatch::from_gray(4, 4, ramp).unwrap();
        let crop = img.crop_centered((100.0, -50.0), (3, 5)).unwrap();
        assert!(crop.tensor().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(img.crop_centered((1.0, 1.0), (0, 2)).is_err());
    }

    #[test]
    fn bicubic_preserves_constants_and_samples() {
        let c = Tensor::filled(&[3, 4], 0.7);
        let up = upsample_bicubic(&c, 4);
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let lin = Tensor::from_fn(&[5, 5], |i| (i % 5) as f64);
        let up = upsample_bicubic(&lin, 2);
        // interior output pixel 4 sits at source x = 1.75
        assert!((up.data()[4 + 10 * 4] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn rotate_point_matches_image_rotation() {
        // a bright pixel right of center ends up above center after +90°
        let mut x = Tensor::zeros(&[1, 5, 5]);
        x.data_mut()[2 * 5 + 4] = 1.0;
        let y = rotate(&x, FRAC_PI_2, Interpolation::Bilinear);
        assert_eq!(y.data()[2], 1.0);
        let p = rotate_point((4.5, 2.5), (2.5, 2.5), FRAC_PI_2);
        assert!((p.0 - 2.5).abs() < 1e-12 && (p.1 - 0.5).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
            let n: usize = shape.iter().product();
            proptest::collection::vec(-1.0f64..1.0, n)
                .prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
        }

        proptest! {
            #[test]
            fn conv_is_linear(a in tensor(&[2, 6, 6]), b in tensor(&[2, 6, 6]),
                              k in tensor(&[2, 2, 3, 3]), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
                let mut mix = a.scale(alpha);
                mix.axpy(beta, &b).unwrap();
                let lhs = conv2d(&mix, &k, 1, 0).unwrap();
                let mut rhs = conv2d(&a, &k, 1, 0).unwrap().scale(alpha);
                rhs.axpy(beta, &conv2d(&b, &k, 1, 0).unwrap()).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            }

            #[test]
            fn four_quarter_turns_are_identity(x in tensor(&[2, 5, 5])) {
                let mut y = x.clone();
                for _ in 0..4 {
                    y = rotate(&y, FRAC_PI_2, Interpolation::Bilinear);
                }
                prop_assert_eq!(y, x);
            }

            #[test]
            fn rotation_commutes_with_channel_slicing(x in tensor(&[3, 6, 6]), theta in -3.0f64..3.0) {
                let whole = rotate(&x, theta, Interpolation::Bilinear);
                for c in 0..3 {
                    let part = rotate(&x.narrow(c, c + 1), theta, Interpolation::Bilinear);
                    prop_assert_eq!(part.data(), whole.slab(c));
                }
            }
        }
    }
}
