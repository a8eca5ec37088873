//! Rotation-equivariant encoder: lifting convolution, group convolution,
//! normalization, pooling, and the reverse pass through all of them.
//!
//! Group feature maps use the regular representation: a tensor
//! `[C, Λ, H, W]`, stored flat as `[C·Λ, H, W]` with orientation as the
//! fast index. Rotating the input by `2π/Λ` rotates every map spatially and
//! shifts the orientation axis cyclically by one.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{group_angles, steer_phased, FilterWeights, PhasedAtoms, SteerableBasis};
use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_kernels, rotate, ImagePatch, Interpolation, Tensor,
};

pub const NORM_EPS: f64 = 1e-5;

/// The cyclic rotation group of order `Λ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    order: usize,
}

impl GroupSpec {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return invalid("group order must be at least 1");
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `2πλ/Λ` for `λ = 0..Λ`.
    pub fn angles(&self) -> Vec<f64> {
        group_angles(self.order)
    }

    pub fn angle(&self, index: usize) -> f64 {
        2.0 * PI * index as f64 / self.order as f64
    }
}

/// Feature map over the group: `[C, Λ, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFeatureMap {
    tensor: Tensor,
    group: GroupSpec,
}

impl GroupFeatureMap {
    pub fn new(tensor: Tensor, group: GroupSpec) -> Result<Self> {
        if tensor.rank() != 4 || tensor.dim(1) != group.order() {
            return shape_mismatch("group feature map", tensor.shape(), &[group.order()]);
        }
        Ok(Self { tensor, group })
    }

    /// Wraps a flat `[C·Λ, H, W]` tensor.
    pub fn from_flat(flat: Tensor, group: GroupSpec) -> Result<Self> {
        let (cl, h, w) = (flat.dim(0), flat.dim(1), flat.dim(2));
        if cl % group.order() != 0 {
            return shape_mismatch("group feature map", flat.shape(), &[group.order()]);
        }
        Self::new(flat.reshape(&[cl / group.order(), group.order(), h, w])?, group)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(2)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(3)
    }

    pub fn flat(&self) -> Tensor {
        let s = self.tensor.shape();
        self.tensor
            .clone()
            .reshape(&[s[0] * s[1], s[2], s[3]])
            .expect("same length")
    }

    pub fn slice(&self, channel: usize, orientation: usize) -> &[f64] {
        let hw = self.height() * self.width();
        let i = channel * self.group.order() + orientation;
        &self.tensor.data()[i * hw..(i + 1) * hw]
    }

    /// Acts with the group element `steps · 2π/Λ`: spatial rotation of
    /// every map followed by a cyclic shift of the orientation axis.
    pub fn transformed(&self, steps: usize, interp: Interpolation) -> Self {
        let l = self.group.order();
        let theta = self.group.angle(steps % l);
        let rotated = rotate(&self.tensor, theta, interp);
        let hw = self.height() * self.width();
        let mut out = vec![0.0; self.tensor.len()];
        for c in 0..self.channels() {
            for o in 0..l {
                let src = (c * l + o) * hw;
                let dst = (c * l + (o + steps) % l) * hw;
                out[dst..dst + hw].copy_from_slice(&rotated.data()[src..src + hw]);
            }
        }
        Self {
            tensor: Tensor::from_raw(self.tensor.shape().to_vec(), out),
            group: self.group,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Lift,
    Group,
    PoolSpatial,
    PoolOrientation,
}

/// One layer of the encoder. Channel counts are per orientation ("fields");
/// a group layer with `out_channels = 8` and `Λ = 4` produces 32 maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    #[serde(default)]
    pub relu: bool,
    #[serde(default)]
    pub norm: bool,
    #[serde(default)]
    pub pool: PoolMode,
}

impl LayerSpec {
    pub fn conv(kind: LayerKind, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind,
            in_channels: cin,
            out_channels: cout,
            kernel_size: kernel,
            stride,
            relu: true,
            norm: false,
            pool: PoolMode::Max,
        }
    }

    pub fn orientation_pool(channels: usize, mode: PoolMode) -> Self {
        Self {
            kind: LayerKind::PoolOrientation,
            in_channels: channels,
            out_channels: channels,
            kernel_size: 1,
            stride: 1,
            relu: false,
            norm: false,
            pool: mode,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Lift | LayerKind::Group)
    }

    fn output_size(&self, n: usize) -> Option<usize> {
        match self.kind {
            LayerKind::PoolOrientation => Some(n),
            _ => (self.kernel_size <= n).then(|| (n - self.kernel_size) / self.stride + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub group: GroupSpec,
    pub layers: Vec<LayerSpec>,
    /// Multiplier applied to raw correlation scores before the loss.
    pub response_scale: f64,
}

impl NetworkSpec {
    pub fn new(group: GroupSpec, layers: Vec<LayerSpec>, response_scale: f64) -> Result<Self> {
        let spec = Self {
            group,
            layers,
            response_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let convs: Vec<&LayerSpec> = self.layers.iter().filter(|l| l.is_conv()).collect();
        if convs.first().map(|l| l.kind) != Some(LayerKind::Lift) {
            return invalid("the first convolution must be a lifting layer");
        }
        if convs[1..].iter().any(|l| l.kind != LayerKind::Group) {
            return invalid("only the first convolution may be a lifting layer");
        }
        let pools = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::PoolOrientation)
            .count();
        if pools != 1 || self.layers.last().map(|l| l.kind) != Some(LayerKind::PoolOrientation) {
            return invalid("exactly one orientation pool is required, placed last");
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return invalid(format!(
                    "channel mismatch between layers: {} -> {}",
                    pair[0].out_channels, pair[1].in_channels
                ));
            }
        }
        for l in &self.layers {
            if l.stride == 0 || l.kernel_size == 0 {
                return invalid("kernel size and stride must be positive");
            }
            if l.is_conv() && l.kernel_size % 2 == 0 {
                return invalid(format!("kernel size must be odd, got {}", l.kernel_size));
            }
            if l.kind == LayerKind::PoolSpatial && l.in_channels != l.out_channels {
                return invalid("spatial pooling cannot change the channel count");
            }
        }
        if !(self.response_scale > 0.0 && self.response_scale.is_finite()) {
            return invalid("response scale must be positive");
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().expect("validated").out_channels
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Spatial output extent for an input extent `n`, if the input is large
    /// enough.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        self.layers.iter().try_fold(n, |n, l| l.output_size(n))
    }

    /// Number of real trainable parameters.
    pub fn param_count(&self) -> Result<usize> {
        let mut total = 0;
        for l in self.layers.iter().filter(|l| l.is_conv()) {
            let basis = SteerableBasis::for_kernel(l.kernel_size, self.group.order())?;
            let offsets = if l.kind == LayerKind::Group {
                self.group.order()
            } else {
                1
            };
            total += l.out_channels * l.in_channels * offsets * basis.real_dof();
            total += l.out_channels * if l.norm { 2 } else { 1 };
        }
        Ok(total)
    }

    /// Four 3×3 convolutions (strides 2, 2, 1, 1), normalization and ReLU
    /// after all but the last, then orientation max-pooling.
    pub fn desk(group_order: usize, input_channels: usize, fields: [usize; 4]) -> Result<Self> {
        let group = GroupSpec::new(group_order)?;
        let strides = [2, 2, 1, 1];
        let mut layers = Vec::new();
        let mut cin = input_channels;
        for (i, (&cout, &stride)) in fields.iter().zip(&strides).enumerate() {
            let kind = if i == 0 { LayerKind::Lift } else { LayerKind::Group };
            let mut l = LayerSpec::conv(kind, cin, cout, 3, stride);
            l.relu = i + 1 < fields.len();
            l.norm = l.relu;
            layers.push(l);
            cin = cout;
        }
        layers.push(LayerSpec::orientation_pool(cin, PoolMode::Max));
        Self::new(group, layers, DEFAULT_RESPONSE_SCALE)
    }

    /// A desk-preset network of a different group order whose parameter
    /// count is as close as possible to `self`'s, found by scaling the
    /// field counts with a common factor.
    pub fn matched(&self, group_order: usize) -> Result<Self> {
        let fields: Vec<usize> = self
            .layers
            .iter()
            .filter(|l| l.is_conv())
            .map(|l| l.out_channels)
            .collect();
        let [a, b, c, d] = fields[..] else {
            return invalid("matching is defined for the four-layer desk preset");
        };
        let target = self.param_count()? as f64;
        let dof = SteerableBasis::for_kernel(3, group_order)?.real_dof();
        let cin = self.input_channels();
        let count = |f: [usize; 4]| {
            let mut n = f[0] * cin * dof + 2 * f[0];
            for i in 1..4 {
                n += f[i] * f[i - 1] * group_order * dof + if i < 3 { 2 * f[i] } else { f[i] };
            }
            n as f64
        };
        let mut best: Option<(f64, [usize; 4])> = None;
        for step in 1..=400 {
            let scale = step as f64 / 100.0;
            let base = [a, b, c, d].map(|x| ((x as f64 * scale).round() as usize).max(1));
            for tweak in 0..81 {
                let mut f = base;
                let mut t = tweak;
                for x in &mut f {
                    *x = (*x + t % 3).saturating_sub(1).max(1);
                    t /= 3;
                }
                let err = (count(f) - target).abs() / target;
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, f));
                }
            }
        }
        let (_, f) = best.expect("non-empty search");
        let mut spec = Self::desk(group_order, cin, f)?;
        spec.response_scale = self.response_scale;
        Ok(spec)
    }
}

pub const DEFAULT_RESPONSE_SCALE: f64 = 3e-2;

/// Trainable parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weights: FilterWeights,
    /// Normalization gain per output field (empty when the layer has no
    /// normalization). The bias acts as the normalization shift.
    pub gain: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub convs: Vec<ConvParams>,
}

impl NetParams {
    /// Number of real coordinates, skipping the imaginary parts of k = 0
    /// coefficients.
    pub fn real_len(&self, net: &Network) -> usize {
        self.flatten(net).len()
    }

    /// Real coordinates in a fixed order: per layer, coefficients (real,
    /// then imaginary when k > 0), biases, gains.
    pub fn flatten(&self, net: &Network) -> Vec<f64> {
        let mut out = Vec::new();
        for (p, basis) in self.convs.iter().zip(&net.bases) {
            for (i, c) in p.weights.coeffs.iter().enumerate() {
                out.push(c.re);
                if basis.atoms()[i % p.weights.atoms].freq != 0 {
                    out.push(c.im);
                }
            }
            out.extend(&p.weights.bias);
            out.extend(&p.gain);
        }
        out
    }

    pub fn unflatten(&mut self, net: &Network, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("flat parameter vector too short");
        for (p, basis) in self.convs.iter_mut().zip(&net.bases) {
            let atoms = p.weights.atoms;
            for (i, c) in p.weights.coeffs.iter_mut().enumerate() {
                c.re = next();
                c.im = if basis.atoms()[i % atoms].freq != 0 {
                    next()
                } else {
                    0.0
                };
            }
            for b in &mut p.weights.bias {
                *b = next();
            }
            for g in &mut p.gain {
                *g = next();
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in &mut z.convs {
            p.weights.coeffs.fill(Complex64::new(0.0, 0.0));
            p.weights.bias.fill(0.0);
            p.gain.fill(0.0);
        }
        z
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.weights.coeffs.iter_mut().zip(&b.weights.coeffs) {
                *x += y;
            }
            for (x, y) in a.weights.bias.iter_mut().zip(&b.weights.bias) {
                *x += y;
            }
            for (x, y) in a.gain.iter_mut().zip(&b.gain) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for p in &mut self.convs {
            p.weights.coeffs.iter_mut().for_each(|c| *c *= alpha);
            p.weights.bias.iter_mut().for_each(|b| *b *= alpha);
            p.gain.iter_mut().for_each(|g| *g *= alpha);
        }
    }
}

/// Pre-built bases and phase tables for a network spec.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    /// One basis per convolution layer.
    bases: Vec<SteerableBasis>,
    phased: Vec<Vec<PhasedAtoms>>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut bases = Vec::new();
        for l in spec.layers.iter().filter(|l| l.is_conv()) {
            bases.push(SteerableBasis::for_kernel(l.kernel_size, spec.group.order())?);
        }
        let phased = bases.iter().map(|b| b.phased_bank()).collect();
        Ok(Self {
            spec,
            bases,
            phased,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn bases(&self) -> &[SteerableBasis] {
        &self.bases
    }

    pub fn group(&self) -> GroupSpec {
        self.spec.group
    }

    fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.spec.layers.iter().filter(|l| l.is_conv())
    }

    /// He-style random initialization.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> NetParams {
        let order = self.spec.group.order();
        let convs = self
            .conv_layers()
            .zip(&self.bases)
            .map(|(l, basis)| {
                let offsets = if l.kind == LayerKind::Group { order } else { 1 };
                let mut w = FilterWeights::zeros(l.out_channels, l.in_channels, offsets, basis.len());
                let gain = if l.relu { 2.0 } else { 1.0 };
                let var = gain / (l.in_channels * offsets * basis.len()) as f64;
                let normal = Normal::new(0.0, var.sqrt()).expect("finite variance");
                for (i, c) in w.coeffs.iter_mut().enumerate() {
                    let dc = basis.atoms()[i % basis.len()].freq == 0;
                    *c = Complex64::new(
                        normal.sample(rng),
                        if dc { 0.0 } else { normal.sample(rng) },
                    );
                }
                ConvParams {
                    weights: w,
                    gain: if l.norm { vec![1.0; l.out_channels] } else { Vec::new() },
                }
            })
            .collect();
        NetParams { convs }
    }

    /// Data-dependent initialization: layer by layer, rescales each field
    /// and sets its bias so that its pre-activation has zero mean and unit
    /// variance over `samples`. Layers with normalization are left alone.
    pub fn calibrate(&self, params: &mut NetParams, samples: &[ImagePatch]) -> Result<()> {
        if samples.is_empty() {
            return invalid("calibration needs at least one sample");
        }
        let order = self.spec.group.order();
        let layers: Vec<LayerSpec> = self.conv_layers().cloned().collect();
        for (j, l) in layers.iter().enumerate() {
            if l.norm {
                continue;
            }
            let fields = l.out_channels;
            let mut sum = vec![0.0; fields];
            let mut sq = vec![0.0; fields];
            let mut count = 0usize;
            for img in samples {
                let pre = self.pre_activation(params, img, j)?;
                let block = pre.len() / fields;
                for c in 0..fields {
                    for &v in &pre.data()[c * block..(c + 1) * block] {
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                count += block;
            }
            debug_assert!(count > 0 && order > 0);
            let w = &mut params.convs[j].weights;
            let per_field = w.coeffs.len() / fields;
            for c in 0..fields {
                let mean = sum[c] / count as f64;
                let std = (sq[c] / count as f64 - mean * mean).max(0.0).sqrt();
                let inv = if std > 1e-12 { 1.0 / std } else { 1.0 };
                w.coeffs[c * per_field..(c + 1) * per_field]
                    .iter_mut()
                    .for_each(|v| *v *= inv);
                w.bias[c] = -mean * inv;
            }
        }
        Ok(())
    }

    /// Output of convolution layer `layer` before bias and nonlinearity.
    fn pre_activation(&self, params: &NetParams, img: &ImagePatch, layer: usize) -> Result<Tensor> {
        let kernels = self.layer_kernels(params);
        let order = self.spec.group.order();
        let mut x = img.tensor().clone();
        let mut conv_index = 0;
        for l in &self.spec.layers {
            match l.kind {
                LayerKind::Lift | LayerKind::Group => {
                    let p = &params.convs[conv_index];
                    let pre = conv2d(&x, &kernels[conv_index], l.stride, 0)?;
                    if conv_index == layer {
                        return Ok(pre);
                    }
                    let (out, _) = apply_affine(pre, &p.weights.bias, &p.gain, order, l.norm);
                    x = if l.relu { relu(&out) } else { out };
                    conv_index += 1;
                }
                LayerKind::PoolSpatial => x = max_pool(&x, l.kernel_size, l.stride)?.0,
                LayerKind::PoolOrientation => x = orientation_pool_flat(&x, order, l.pool).0,
            }
        }
        invalid(format!("no convolution layer {layer}"))
    }

    pub fn check_params(&self, params: &NetParams) -> Result<()> {
        let order = self.spec.group.order();
        let layers: Vec<&LayerSpec> = self.conv_layers().collect();
        if params.convs.len() != layers.len() {
            return shape_mismatch("network parameters", &[params.convs.len()], &[layers.len()]);
        }
        for ((p, l), basis) in params.convs.iter().zip(layers).zip(&self.bases) {
            let offsets = if l.kind == LayerKind::Group { order } else { 1 };
            let w = &p.weights;
            if (w.out_channels, w.in_channels, w.offsets) != (l.out_channels, l.in_channels, offsets)
                || p.gain.len() != if l.norm { l.out_channels } else { 0 }
            {
                return shape_mismatch(
                    "layer parameters",
                    &[w.out_channels, w.in_channels, w.offsets, p.gain.len()],
                    &[l.out_channels, l.in_channels, offsets],
                );
            }
            w.check(basis)?;
        }
        Ok(())
    }

    /// Real kernel tensors for every convolution layer, in the flat layout
    /// consumed by `conv2d`.
    pub fn layer_kernels(&self, params: &NetParams) -> Vec<Tensor> {
        self.conv_layers()
            .zip(&params.convs)
            .zip(&self.phased)
            .map(|((l, p), phased)| match l.kind {
                LayerKind::Lift => lift_kernels(&p.weights, phased, l.kernel_size),
                _ => group_kernels(&p.weights, phased, l.kernel_size),
            })
            .collect()
    }

    /// The encoder output `φ(img)`, `[C, H, W]`.
    pub fn forward(&self, params: &NetParams, img: &ImagePatch) -> Result<Tensor> {
        Ok(self.forward_traced(params, img)?.output)
    }

    pub fn forward_traced(&self, params: &NetParams, img: &ImagePatch) -> Result<Trace> {
        self.check_params(params)?;
        if img.channels() != self.spec.input_channels() {
            return shape_mismatch(
                "network input",
                img.tensor().shape(),
                &[self.spec.input_channels()],
            );
        }
        let kernels = self.layer_kernels(params);
        let mut x = img.tensor().clone();
        let mut steps = Vec::with_capacity(self.spec.layers.len());
        let mut conv_index = 0;
        let order = self.spec.group.order();
        for l in &self.spec.layers {
            match l.kind {
                LayerKind::Lift | LayerKind::Group => {
                    let p = &params.convs[conv_index];
                    let k = &kernels[conv_index];
                    let pre = conv2d(&x, k, l.stride, 0)?;
                    let (out, norm) = apply_affine(pre, &p.weights.bias, &p.gain, order, l.norm);
                    let out = if l.relu { relu(&out) } else { out };
                    let input = std::mem::replace(&mut x, out);
                    steps.push(Step::Conv {
                        layer: conv_index,
                        input,
                        kernels: k.clone(),
                        norm,
                        relu_out: l.relu.then(|| x.clone()),
                    });
                    conv_index += 1;
                }
                LayerKind::PoolSpatial => {
                    let (out, argmax) = max_pool(&x, l.kernel_size, l.stride)?;
                    steps.push(Step::PoolSpatial {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    });
                    x = out;
                }
                LayerKind::PoolOrientation => {
                    let (out, argmax) = orientation_pool_flat(&x, order, l.pool);
                    steps.push(Step::PoolOrientation {
                        input_shape: x.shape().to_vec(),
                        argmax,
                        mode: l.pool,
                    });
                    x = out;
                }
            }
        }
        Ok(Trace { steps, output: x })
    }

    /// Parameter gradients (and the input gradient) given `∂L/∂φ(img)`.
    pub fn backward(&self, trace: &Trace, grad_output: &Tensor) -> Result<(NetParams, Tensor)> {
        if grad_output.shape() != trace.output.shape() {
            return shape_mismatch("backward", grad_output.shape(), trace.output.shape());
        }
        let order = self.spec.group.order();
        let layers: Vec<&LayerSpec> = self.conv_layers().collect();
        let mut grads: Vec<Option<ConvParams>> = vec![None; layers.len()];
        let mut g = grad_output.clone();
        for step in trace.steps.iter().rev() {
            g = match step {
                Step::PoolOrientation {
                    input_shape,
                    argmax,
                    mode,
                } => orientation_pool_backward(&g, input_shape, argmax, *mode, order),
                Step::PoolSpatial { input_shape, argmax } => {
                    let mut gi = Tensor::zeros(input_shape);
                    for (o, &src) in argmax.iter().enumerate() {
                        gi.data_mut()[src] += g.data()[o];
                    }
                    gi
                }
                Step::Conv {
                    layer,
                    input,
                    kernels,
                    norm,
                    relu_out,
                } => {
                    let l = layers[*layer];
                    if let Some(out) = relu_out {
                        for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                            if o <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    let fields = l.out_channels;
                    let plane = g.len() / (fields * order);
                    let mut bias = vec![0.0; fields];
                    let mut gain = Vec::new();
                    match norm {
                        None => {
                            for (c, b) in bias.iter_mut().enumerate() {
                                *b = g.data()[c * order * plane..(c + 1) * order * plane]
                                    .iter()
                                    .sum();
                            }
                        }
                        Some(n) => {
                            gain = vec![0.0; fields];
                            norm_backward(&mut g, n, &mut bias, &mut gain, order);
                        }
                    }
                    let gk = conv2d_grad_kernels(input, &g, kernels.shape(), l.stride, 0)?;
                    let gin = conv2d_grad_input(&g, kernels, input.shape(), l.stride, 0)?;
                    let phased = &self.phased[*layer];
                    let mut weights = match l.kind {
                        LayerKind::Lift => lift_pullback(&gk, phased, l, order, self.bases[*layer].len()),
                        _ => group_pullback(&gk, phased, l, order, self.bases[*layer].len()),
                    };
                    weights.bias = bias;
                    grads[*layer] = Some(ConvParams { weights, gain });
                    gin
                }
            };
        }
        let convs = grads
            .into_iter()
            .map(|g| g.expect("every conv layer visited"))
            .collect();
        Ok((NetParams { convs }, g))
    }
}

/// Recorded forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    steps: Vec<Step>,
    pub output: Tensor,
}

impl Trace {
    /// Which ReLUs passed and which inputs every max-pool selected. The
    /// network is differentiable wherever this stays constant.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for step in &self.steps {
            match step {
                Step::Conv {
                    relu_out: Some(y), ..
                } => out.extend(y.data().iter().map(|&v| usize::from(v > 0.0))),
                Step::PoolSpatial { argmax, .. } => out.extend_from_slice(argmax),
                Step::PoolOrientation {
                    argmax,
                    mode: PoolMode::Max,
                    ..
                } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Step {
    Conv {
        layer: usize,
        input: Tensor,
        kernels: Tensor,
        norm: Option<NormCache>,
        relu_out: Option<Tensor>,
    },
    PoolSpatial {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    PoolOrientation {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
        mode: PoolMode,
    },
}

#[derive(Clone, Debug)]
struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    gain: Vec<f64>,
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Adds the per-field bias, or normalizes each field jointly over its
/// orientations and pixels and applies gain and shift.
fn apply_affine(
    mut pre: Tensor,
    bias: &[f64],
    gain: &[f64],
    order: usize,
    norm: bool,
) -> (Tensor, Option<NormCache>) {
    let fields = bias.len();
    let block = pre.len() / fields;
    debug_assert_eq!(block % order, 0);
    if !norm {
        for (c, &b) in bias.iter().enumerate() {
            pre.data_mut()[c * block..(c + 1) * block]
                .iter_mut()
                .for_each(|v| *v += b);
        }
        return (pre, None);
    }
    let mut inv_std = Vec::with_capacity(fields);
    let mut normalized = pre.clone();
    for c in 0..fields {
        let xs = &mut normalized.data_mut()[c * block..(c + 1) * block];
        let mean = xs.iter().sum::<f64>() / block as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        xs.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
        let out = &mut pre.data_mut()[c * block..(c + 1) * block];
        for (o, &n) in out.iter_mut().zip(xs.iter()) {
            *o = gain[c] * n + bias[c];
        }
    }
    (
        pre,
        Some(NormCache {
            normalized,
            inv_std,
            gain: gain.to_vec(),
        }),
    )
}

fn norm_backward(g: &mut Tensor, cache: &NormCache, bias: &mut [f64], gain: &mut [f64], _order: usize) {
    let fields = bias.len();
    let block = g.len() / fields;
    let n = block as f64;
    for c in 0..fields {
        let gs = &mut g.data_mut()[c * block..(c + 1) * block];
        let xs = &cache.normalized.data()[c * block..(c + 1) * block];
        bias[c] = gs.iter().sum();
        gain[c] = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
        let mean_g = bias[c] * cache.gain[c] / n;
        let mean_gx = gain[c] * cache.gain[c] / n;
        let is = cache.inv_std[c];
        for (gv, &x) in gs.iter_mut().zip(xs) {
            *gv = is * (*gv * cache.gain[c] - mean_g - x * mean_gx);
        }
    }
}

/// Spatial max pooling applied independently to every map.
fn max_pool(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if k > h || k > w {
        return shape_mismatch("max_pool", x.shape(), &[k, k]);
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = usize::MAX;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                        if best == usize::MAX || x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_raw(vec![c, ho, wo], out), argmax))
}

/// Pools a flat `[C·Λ, H, W]` tensor over orientations.
fn orientation_pool_flat(x: &Tensor, order: usize, mode: PoolMode) -> (Tensor, Vec<usize>) {
    let (cl, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let c = cl / order;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    let mut argmax = vec![0; c * hw];
    for ci in 0..c {
        for p in 0..hw {
            let at = |o: usize| x.data()[(ci * order + o) * hw + p];
            match mode {
                PoolMode::Max => {
                    let mut best = 0;
                    for o in 1..order {
                        if at(o) > at(best) {
                            best = o;
                        }
                    }
                    out[ci * hw + p] = at(best);
                    argmax[ci * hw + p] = best;
                }
                PoolMode::Mean => {
                    out[ci * hw + p] = (0..order).map(at).sum::<f64>() / order as f64;
                }
            }
        }
    }
    (Tensor::from_raw(vec![c, h, w], out), argmax)
}

fn orientation_pool_backward(
    g: &Tensor,
    input_shape: &[usize],
    argmax: &[usize],
    mode: PoolMode,
    order: usize,
) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    let hw = input_shape[1] * input_shape[2];
    let c = input_shape[0] / order;
    for ci in 0..c {
        for p in 0..hw {
            let gv = g.data()[ci * hw + p];
            match mode {
                PoolMode::Max => {
                    gi.data_mut()[(ci * order + argmax[ci * hw + p]) * hw + p] = gv;
                }
                PoolMode::Mean => {
                    for o in 0..order {
                        gi.data_mut()[(ci * order + o) * hw + p] = gv / order as f64;
                    }
                }
            }
        }
    }
    gi
}

/// `[Ĉ·Λ, C, S, S]`: row `ĉ·Λ + λ` holds the filters steered to `Θ[λ]`.
fn lift_kernels(w: &FilterWeights, phased: &[PhasedAtoms], size: usize) -> Tensor {
    let order = phased.len();
    let s2 = size * size;
    let (co, ci) = (w.out_channels, w.in_channels);
    let mut out = vec![0.0; co * order * ci * s2];
    for (l, p) in phased.iter().enumerate() {
        let k = steer_phased(w, p, size);
        for o in 0..co {
            let dst = (o * order + l) * ci * s2;
            out[dst..dst + ci * s2].copy_from_slice(&k.data()[o * ci * s2..(o + 1) * ci * s2]);
        }
    }
    Tensor::from_raw(vec![co * order, ci, size, size], out)
}

/// `[Ĉ·Λ, C·Λ, S, S]`: entry `(ĉ·Λ + θ, c·Λ + φ)` is the offset-`(θ − φ) mod Λ`
/// filter steered to `Θ[θ]`.
fn group_kernels(w: &FilterWeights, phased: &[PhasedAtoms], size: usize) -> Tensor {
    let order = phased.len();
    let s2 = size * size;
    let (co, ci) = (w.out_channels, w.in_channels);
    let mut out = vec![0.0; co * order * ci * order * s2];
    for (t, p) in phased.iter().enumerate() {
        // [Ĉ, C·Λ(offsets), S, S]
        let k = steer_phased(w, p, size);
        for o in 0..co {
            for c in 0..ci {
                for f in 0..order {
                    let offset = (t + order - f) % order;
                    let src = ((o * ci + c) * order + offset) * s2;
                    let dst = ((o * order + t) * ci * order + c * order + f) * s2;
                    out[dst..dst + s2].copy_from_slice(&k.data()[src..src + s2]);
                }
            }
        }
    }
    Tensor::from_raw(vec![co * order, ci * order, size, size], out)
}

fn lift_pullback(
    gk: &Tensor,
    phased: &[PhasedAtoms],
    l: &LayerSpec,
    order: usize,
    atoms: usize,
) -> FilterWeights {
    let s2 = l.kernel_size * l.kernel_size;
    let (co, ci) = (l.out_channels, l.in_channels);
    let mut w = FilterWeights::zeros(co, ci, 1, atoms);
    for (t, p) in phased.iter().enumerate() {
        for o in 0..co {
            for c in 0..ci {
                let src = ((o * order + t) * ci + c) * s2;
                let g = &gk.data()[src..src + s2];
                for a in 0..atoms {
                    *w.coeff_mut(o, c, 0, a) += p.pullback(a, g);
                }
            }
        }
    }
    w
}

fn group_pullback(
    gk: &Tensor,
    phased: &[PhasedAtoms],
    l: &LayerSpec,
    order: usize,
    atoms: usize,
) -> FilterWeights {
    let s2 = l.kernel_size * l.kernel_size;
    let (co, ci) = (l.out_channels, l.in_channels);
    let mut w = FilterWeights::zeros(co, ci, order, atoms);
    for (t, p) in phased.iter().enumerate() {
        for o in 0..co {
            for c in 0..ci {
                for f in 0..order {
                    let offset = (t + order - f) % order;
                    let src = ((o * order + t) * ci * order + c * order + f) * s2;
                    let g = &gk.data()[src..src + s2];
                    for a in 0..atoms {
                        *w.coeff_mut(o, c, offset, a) += p.pullback(a, g);
                    }
                }
            }
        }
    }
    w
}

// ---------------------------------------------------------------------------
// Single-layer entry points

fn add_bias(mut t: Tensor, bias: &[f64]) -> Tensor {
    let block = t.len() / bias.len();
    for (c, &b) in bias.iter().enumerate() {
        t.data_mut()[c * block..(c + 1) * block]
            .iter_mut()
            .for_each(|v| *v += b);
    }
    t
}

/// Lifting convolution: `out[ĉ, λ] = Σ_c img_c ⋆ steer(w, Θ[λ])[ĉ, c] + β[ĉ]`.
pub fn lift_conv(
    img: &ImagePatch,
    w: &FilterWeights,
    basis: &SteerableBasis,
    group: GroupSpec,
    stride: usize,
) -> Result<GroupFeatureMap> {
    w.check(basis)?;
    if w.offsets != 1 || w.in_channels != img.channels() {
        return shape_mismatch(
            "lift_conv",
            img.tensor().shape(),
            &[w.out_channels, w.in_channels, w.offsets],
        );
    }
    let phased: Vec<PhasedAtoms> = group.angles().iter().map(|&t| basis.phased(t)).collect();
    let k = lift_kernels(w, &phased, basis.size());
    let out = add_bias(conv2d(img.tensor(), &k, stride, 0)?, &w.bias);
    GroupFeatureMap::from_flat(out, group)
}

/// Lifting convolution evaluated as one complex response per atom,
/// phase-combined per orientation afterwards.
pub fn lift_conv_atomwise(
    img: &ImagePatch,
    w: &FilterWeights,
    basis: &SteerableBasis,
    group: GroupSpec,
    stride: usize,
) -> Result<GroupFeatureMap> {
    w.check(basis)?;
    let s = basis.size();
    let ci = img.channels();
    let mut responses = Vec::new(); // [atom] -> (re, im) of [C, H', W']
    for atom in basis.atoms() {
        let re = atom.grid.re().reshape(&[1, 1, s, s])?;
        let im = atom.grid.im().reshape(&[1, 1, s, s])?;
        let mut per_channel_re = Vec::new();
        let mut per_channel_im = Vec::new();
        for c in 0..ci {
            let plane = img.tensor().narrow(c, c + 1);
            per_channel_re.push(conv2d(&plane, &re, stride, 0)?);
            per_channel_im.push(conv2d(&plane, &im, stride, 0)?);
        }
        responses.push((per_channel_re, per_channel_im));
    }
    let (ho, wo) = (responses[0].0[0].dim(1), responses[0].0[0].dim(2));
    let order = group.order();
    let mut out = vec![0.0; w.out_channels * order * ho * wo];
    for (l, theta) in group.angles().into_iter().enumerate() {
        for o in 0..w.out_channels {
            let dst = &mut out[(o * order + l) * ho * wo..(o * order + l + 1) * ho * wo];
            dst.fill(w.bias[o]);
            for c in 0..ci {
                for (a, atom) in basis.atoms().iter().enumerate() {
                    let phase = Complex64::from_polar(1.0, -(atom.freq as f64) * theta);
                    let z = w.coeff(o, c, 0, a) * phase;
                    let (re, im) = (&responses[a].0[c], &responses[a].1[c]);
                    for ((d, &r), &i) in dst.iter_mut().zip(re.data()).zip(im.data()) {
                        *d += z.re * r - z.im * i;
                    }
                }
            }
        }
    }
    GroupFeatureMap::from_flat(Tensor::from_raw(vec![w.out_channels * order, ho, wo], out), group)
}

/// Group convolution on the regular representation:
/// `out[ĉ, θ] = Re Σ_c Σ_φ Σ_jk w[ĉ, c, (θ − φ) mod Λ, jk] e^{−ikθ} (f[c, φ] ⋆ ψ_jk) + β[ĉ]`.
pub fn group_conv(
    f: &GroupFeatureMap,
    w: &FilterWeights,
    basis: &SteerableBasis,
    group: GroupSpec,
    stride: usize,
) -> Result<GroupFeatureMap> {
    if f.group() != group {
        return invalid(format!(
            "group mismatch: feature map has order {}, layer has {}",
            f.group().order(),
            group.order()
        ));
    }
    w.check(basis)?;
    if w.offsets != group.order() || w.in_channels != f.channels() {
        return shape_mismatch(
            "group_conv",
            f.tensor().shape(),
            &[w.out_channels, w.in_channels, w.offsets],
        );
    }
    let phased: Vec<PhasedAtoms> = group.angles().iter().map(|&t| basis.phased(t)).collect();
    let k = group_kernels(w, &phased, basis.size());
    let out = add_bias(conv2d(&f.flat(), &k, stride, 0)?, &w.bias);
    GroupFeatureMap::from_flat(out, group)
}

/// Pointwise max (or mean) over the orientation axis.
pub fn orientation_pool(f: &GroupFeatureMap, mode: PoolMode) -> Tensor {
    orientation_pool_flat(&f.flat(), f.group().order(), mode).0
}

/// Encoders map an image patch to a `[C, H, W]` embedding.
pub trait Encoder {
    fn encode(&self, img: &ImagePatch) -> Result<Tensor>;
    fn total_stride(&self) -> usize;
    fn output_size(&self, n: usize) -> Option<usize>;
    /// Number of orientations the tracker should build templates for.
    fn group_order(&self) -> usize;
    /// Multiplier applied to raw correlation scores.
    fn response_scale(&self) -> f64;
}

/// A network paired with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: NetParams,
}

impl Model {
    pub fn new(net: Network, params: NetParams) -> Result<Self> {
        net.check_params(&params)?;
        Ok(Self { net, params })
    }
}

impl Encoder for Model {
    fn encode(&self, img: &ImagePatch) -> Result<Tensor> {
        self.net.forward(&self.params, img)
    }

    fn total_stride(&self) -> usize {
        self.net.spec().total_stride()
    }

    fn output_size(&self, n: usize) -> Option<usize> {
        self.net.spec().output_size(n)
    }

    fn group_order(&self) -> usize {
        self.net.group().order()
    }

    fn response_scale(&self) -> f64 {
        self.net.spec().response_scale
    }
}

/// An ordinary CNN with fixed real kernels: the reference a trivial-group
/// network must collapse to.
#[derive(Clone, Debug)]
pub struct PlainCnn {
    layers: Vec<PlainLayer>,
    response_scale: f64,
}

#[derive(Clone, Debug)]
struct PlainLayer {
    kernels: Tensor,
    bias: Vec<f64>,
    gain: Vec<f64>,
    stride: usize,
    relu: bool,
    norm: bool,
}

impl PlainCnn {
    /// Steers every layer of a trivial-group model at θ = 0.
    pub fn from_model(model: &Model) -> Result<Self> {
        let spec = model.net.spec();
        if spec.group.order() != 1 {
            return invalid("only trivial-group models collapse to a plain CNN");
        }
        if spec.layers.iter().any(|l| l.kind == LayerKind::PoolSpatial) {
            return invalid("plain CNN conversion does not support spatial pooling");
        }
        let mut layers = Vec::new();
        let convs = spec.layers.iter().filter(|l| l.is_conv());
        for ((l, p), basis) in convs.zip(&model.params.convs).zip(model.net.bases()) {
            layers.push(PlainLayer {
                kernels: crate::basis::steer(&p.weights, basis, 0.0)?,
                bias: p.weights.bias.clone(),
                gain: p.gain.clone(),
                stride: l.stride,
                relu: l.relu,
                norm: l.norm,
            });
        }
        Ok(Self {
            layers,
            response_scale: spec.response_scale,
        })
    }

    pub fn kernels(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().map(|l| &l.kernels)
    }
}

impl Encoder for PlainCnn {
    fn encode(&self, img: &ImagePatch) -> Result<Tensor> {
        let mut x = img.tensor().clone();
        for l in &self.layers {
            let y = conv2d(&x, &l.kernels, l.stride, 0)?;
            let (y, _) = apply_affine(y, &l.bias, &l.gain, 1, l.norm);
            x = if l.relu { relu(&y) } else { y };
        }
        Ok(x)
    }

    fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    fn output_size(&self, n: usize) -> Option<usize> {
        self.layers.iter().try_fold(n, |n, l| {
            let k = l.kernels.dim(2);
            (k <= n).then(|| (n - k) / l.stride + 1)
        })
    }

    fn group_order(&self) -> usize {
        1
    }

    fn response_scale(&self) -> f64 {
        self.response_scale
    }
}
