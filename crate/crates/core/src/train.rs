//! Training: balanced logistic loss on exemplar/search correlation maps,
//! gradients through both branches of the shared encoder, and SGD with
//! momentum and weight decay.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameSource;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::geometry::exemplar_extent;
use crate::net::{NetParams, Network};
use crate::tensor::{conv2d_grad_input, conv2d_grad_kernels, ImagePatch, Tensor};
use crate::tracker::xcorr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Pairs per SGD step.
    pub batch_size: usize,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub seed: u64,
    /// Largest frame distance between exemplar and search frames.
    pub max_frame_gap: usize,
    /// Positive label radius in heatmap pixels.
    pub label_radius: f64,
    pub exemplar_size: usize,
    pub search_size: usize,
    pub context: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-2,
            lr_final: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            pairs_per_epoch: 2000,
            seed: 0,
            max_frame_gap: 25,
            label_radius: 2.0,
            exemplar_size: 31,
            search_size: 63,
            context: 0.5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final) {
            return invalid(format!(
                "learning rates must satisfy initial >= final > 0, got {} and {}",
                self.lr_initial, self.lr_final
            ));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return invalid("momentum must be in [0, 1) and weight decay non-negative");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.pairs_per_epoch.div_ceil(self.batch_size)
    }

    /// Geometric interpolation from `lr_initial` at step 0 to `lr_final`
    /// at the last step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let total = self.total_steps();
        if total <= 1 {
            return self.lr_initial;
        }
        let t = step.min(total - 1) as f64 / (total - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(t)
    }
}

/// `±1` labels around a heatmap position with class-balancing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub labels: Tensor,
    pub weights: Tensor,
    pub radius: f64,
}

impl LabelMap {
    /// Positive within `radius` of the map center.
    pub fn centered(h: usize, w: usize, radius: f64) -> Self {
        let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        Self::around(h, w, center, radius)
    }

    /// Positive within `radius` of `center = (row, col)`. Each class gets
    /// total weight 0.5, split evenly among its pixels.
    pub fn around(h: usize, w: usize, center: (f64, f64), radius: f64) -> Self {
        let labels = Tensor::from_fn(&[h, w], |i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            if (r - center.0).hypot(c - center.1) <= radius {
                1.0
            } else {
                -1.0
            }
        });
        let pos = labels.data().iter().filter(|&&v| v > 0.0).count();
        let neg = labels.len() - pos;
        let (wp, wn) = (
            if pos > 0 { 0.5 / pos as f64 } else { 0.0 },
            if neg > 0 { 0.5 / neg as f64 } else { 0.0 },
        );
        let weights = labels.map(|v| if v > 0.0 { wp } else { wn });
        Self {
            labels,
            weights,
            radius,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ weight · log(1 + exp(−label · score))`.
pub fn loss(scores: &Tensor, labels: &LabelMap) -> Result<f64> {
    Ok(loss_and_grad(scores, labels)?.0)
}

/// Loss and its gradient with respect to the scores.
pub fn loss_and_grad(scores: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    if scores.shape() != labels.labels.shape() {
        return shape_mismatch("loss", scores.shape(), labels.labels.shape());
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for ((&s, &y), &w) in scores
        .data()
        .iter()
        .zip(labels.labels.data())
        .zip(labels.weights.data())
    {
        total += w * softplus(-y * s);
        grad.push(-w * y * sigmoid(-y * s));
    }
    Ok((total, Tensor::new(scores.shape().to_vec(), grad)?))
}

/// An exemplar crop and a search crop, target centered in both.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub exemplar: ImagePatch,
    pub search: ImagePatch,
}

/// Anything that can draw training pairs.
pub trait PairSource {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingPair>;
}

/// Draws pairs from random sequences: two frames at most `max_frame_gap`
/// apart, exemplar and search crops centered on the annotated target.
pub struct PairSampler {
    sequences: Vec<Arc<dyn FrameSource>>,
    cfg: TrainConfig,
}

impl PairSampler {
    pub fn new(sequences: Vec<Arc<dyn FrameSource>>, cfg: &TrainConfig) -> Result<Self> {
        if sequences.iter().all(|s| s.is_empty()) {
            return invalid("pair sampler needs at least one non-empty sequence");
        }
        Ok(Self {
            sequences: sequences.into_iter().filter(|s| !s.is_empty()).collect(),
            cfg: cfg.clone(),
        })
    }
}

impl PairSource for PairSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
        let seq = &self.sequences[rng.random_range(0..self.sequences.len())];
        let n = seq.len();
        let a = rng.random_range(0..n);
        let lo = a.saturating_sub(self.cfg.max_frame_gap);
        let hi = (a + self.cfg.max_frame_gap).min(n - 1);
        let b = rng.random_range(lo..=hi);
        let (za, xb) = (seq.annotation(a).bbox(), seq.annotation(b).bbox());
        let zc = self.cfg.context;
        let z_side = exemplar_extent(za.size(), zc);
        let x_side = exemplar_extent(xb.size(), zc) * self.cfg.search_size as f64
            / self.cfg.exemplar_size as f64;
        let (ez, es) = (self.cfg.exemplar_size, self.cfg.search_size);
        Ok(TrainingPair {
            exemplar: seq
                .frame(a)?
                .crop_resampled(za.center(), (z_side, z_side), (ez, ez), 0.0)?,
            search: seq
                .frame(b)?
                .crop_resampled(xb.center(), (x_side, x_side), (es, es), 0.0)?,
        })
    }
}

/// Loss of one pair and the gradient of every parameter.
pub fn pair_gradient(
    net: &Network,
    params: &NetParams,
    pair: &TrainingPair,
    radius: f64,
) -> Result<(f64, NetParams)> {
    let scale = net.spec().response_scale;
    let tz = net.forward_traced(params, &pair.exemplar)?;
    let tx = net.forward_traced(params, &pair.search)?;
    let (fz, fx) = (&tz.output, &tx.output);
    let scores = xcorr(fx, fz)?.scale(scale);
    let labels = LabelMap::centered(scores.dim(0), scores.dim(1), radius);
    let (value, g) = loss_and_grad(&scores, &labels)?;
    let g = g.scale(scale);
    let (ho, wo) = (g.dim(0), g.dim(1));
    let g = g.reshape(&[1, ho, wo])?;
    let (c, h, w) = (fz.dim(0), fz.dim(1), fz.dim(2));
    let kernel = fz.clone().reshape(&[1, c, h, w])?;
    let gx = conv2d_grad_input(&g, &kernel, fx.shape(), 1, 0)?;
    let gz = conv2d_grad_kernels(fx, &g, &[1, c, h, w], 1, 0)?.reshape(&[c, h, w])?;
    let (mut grads, _) = net.backward(&tx, &gx)?;
    let (gz_params, _) = net.backward(&tz, &gz)?;
    grads.accumulate(&gz_params);
    Ok((value, grads))
}

/// `v ← m·v + g + wd·p; p ← p − lr·v`, elementwise.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// SGD state over a network's flattened parameters.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(net: &Network, params: &NetParams) -> Self {
        Self {
            velocity: vec![0.0; params.real_len(net)],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(
        &mut self,
        net: &Network,
        params: &mut NetParams,
        grads: &NetParams,
        cfg: &TrainConfig,
        step: usize,
    ) {
        let mut p = params.flatten(net);
        let g = grads.flatten(net);
        sgd_update(
            &mut p,
            &g,
            &mut self.velocity,
            cfg.learning_rate(step),
            cfg.momentum,
            cfg.weight_decay,
        );
        params.unflatten(net, &p);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub trace: Vec<LossRecord>,
}

pub fn train(
    net: &Network,
    params: NetParams,
    source: &dyn PairSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_checkpoints(net, params, source, cfg, |_, _| Ok(()))
}

/// Runs `cfg.total_steps()` SGD steps; `checkpoint` is called every
/// `cfg.checkpoint_every` steps and after the last one.
pub fn train_with_checkpoints(
    net: &Network,
    mut params: NetParams,
    source: &dyn PairSource,
    cfg: &TrainConfig,
    mut checkpoint: impl FnMut(usize, &NetParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.check_params(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(net, &params);
    let total = cfg.total_steps();
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        let mut grads = params.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = source.sample(&mut rng)?;
            let (l, g) = pair_gradient(net, &params, &pair, cfg.label_radius)?;
            batch_loss += l;
            grads.accumulate(&g);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        batch_loss *= inv;
        grads.scale(inv);
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: batch_loss,
            });
        }
        trace.push(LossRecord {
            step,
            lr: cfg.learning_rate(step),
            loss: batch_loss,
        });
        sgd.step(net, &mut params, &grads, cfg, step);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint(step + 1, &params)?;
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Trailing moving average with window `n`.
pub fn moving_average(values: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= n {
            sum -= values[i - n];
        }
        out.push(sum / (i + 1).min(n) as f64);
    }
    out
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{GroupSpec, LayerKind, LayerSpec, NetworkSpec, PoolMode};

    #[test]
    fn zero_scores_give_log2() {
        let labels = LabelMap::centered(9, 9, 2.0);
        let l = loss(&Tensor::zeros(&[9, 9]), &labels).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_map_balance() {
        let labels = LabelMap::centered(9, 9, 2.0);
        let pos = labels.labels.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(pos, 13);
        let (mut wp, mut wn) = (0.0, 0.0);
        for (&y, &w) in labels.labels.data().iter().zip(labels.weights.data()) {
            if y > 0.0 {
                wp += w
            } else {
                wn += w
            }
        }
        assert!((wp - 0.5).abs() < 1e-15 && (wn - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_positive_costs_nothing() {
        let labels = LabelMap::centered(1, 1, 0.0);
        assert_eq!(labels.labels.data(), &[1.0]);
        let l = loss(&Tensor::filled(&[1, 1], 1e3), &labels).unwrap();
        assert!(l < 1e-300);
        let l = loss(&Tensor::filled(&[1, 1], -1e3), &labels).unwrap();
        assert!((l - 0.5e3).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = Tensor::from_fn(&[5, 5], |_| rng.random_range(-3.0..3.0));
        let labels = LabelMap::centered(5, 5, 1.0);
        let mut expect = 0.0;
        for i in 0..25 {
            let (r, c) = ((i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0);
            let y: f64 = if (r * r + c * c).sqrt() <= 1.0 { 1.0 } else { -1.0 };
            let w = if y > 0.0 { 0.5 / 5.0 } else { 0.5 / 20.0 };
            expect += w * (1.0 + (-y * scores.data()[i]).exp()).ln();
        }
        assert!((loss(&scores, &labels).unwrap() - expect).abs() < 1e-12);
        assert!(loss(&Tensor::zeros(&[4, 5]), &labels).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Tensor::from_fn(&[5, 5], |_| rng.random_range(-3.0..3.0));
        let labels = LabelMap::centered(5, 5, 1.5);
        let (_, g) = loss_and_grad(&scores, &labels).unwrap();
        for i in 0..25 {
            let mut p = scores.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = scores.clone();
            m.data_mut()[i] -= 1e-6;
            let num = (loss(&p, &labels).unwrap() - loss(&m, &labels).unwrap()) / 2e-6;
            assert!((num - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sgd_definition() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut p = vec![1.0, -2.0];
        let g = [0.5, 0.25];
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.01);
        assert_eq!(p, vec![1.0 - 0.1 * (0.5 + 0.01), -2.0 - 0.1 * (0.25 - 0.02)]);
    }

    #[test]
    fn sgd_two_steps_match_scalar_oracle() {
        let (lr, m, wd) = (0.05, 0.9, 1e-3);
        let mut p = vec![0.7];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[0.3], &mut v, lr, m, wd);
        sgd_update(&mut p, &[-0.2], &mut v, lr, m, wd);
        let mut ps = 0.7f64;
        let mut vs = 0.0f64;
        for g in [0.3, -0.2] {
            vs = m * vs + g + wd * ps;
            ps -= lr * vs;
        }
        assert!((p[0] - ps).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            epochs: 1,
            pairs_per_epoch: 100,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(0), 1e-2);
        assert!((cfg.learning_rate(99) - 1e-5).abs() < 1e-18);
        assert!(cfg.learning_rate(50) < cfg.learning_rate(49));
        assert!(TrainConfig {
            lr_initial: 1e-5,
            lr_final: 1e-2,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    fn two_layer_net() -> Network {
        let g = GroupSpec::new(4).unwrap();
        let l1 = LayerSpec::conv(LayerKind::Lift, 1, 2, 3, 1);
        let mut l2 = LayerSpec::conv(LayerKind::Group, 2, 2, 3, 1);
        l2.relu = false;
        Network::new(
            NetworkSpec::new(
                g,
                vec![l1, l2, LayerSpec::orientation_pool(2, PoolMode::Max)],
                1.0,
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_incoming_gradient_gives_zero_gradients() {
        let net = two_layer_net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = net.init_params(&mut rng);
        let img = ImagePatch::new(Tensor::from_fn(&[1, 8, 8], |_| rng.random())).unwrap();
        let trace = net.forward_traced(&params, &img).unwrap();
        let (g, gi) = net
            .backward(&trace, &Tensor::zeros(trace.output.shape()))
            .unwrap();
        assert!(g.flatten(&net).iter().all(|&v| v == 0.0));
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_single_atom_closed_form() {
        // 1×1 kernel, one lift layer, Λ = 1: out = w·ψ·x + b
        let g = GroupSpec::new(1).unwrap();
        let mut l = LayerSpec::conv(LayerKind::Lift, 1, 1, 1, 1);
        l.relu = false;
        let net = Network::new(
            NetworkSpec::new(g, vec![l, LayerSpec::orientation_pool(1, PoolMode::Max)], 1.0)
                .unwrap(),
        )
        .unwrap();
        let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        params.convs[0].weights.coeffs[0] = num_complex::Complex64::new(0.8, 0.0);
        params.convs[0].weights.bias[0] = 0.1;
        let x = 0.6;
        let img = ImagePatch::from_gray(1, 1, vec![x]).unwrap();
        let trace = net.forward_traced(&params, &img).unwrap();
        assert!((trace.output.data()[0] - (0.8 * x + 0.1)).abs() < 1e-15);
        let upstream = 1.7;
        let (grads, gin) = net
            .backward(&trace, &Tensor::filled(&[1, 1, 1], upstream))
            .unwrap();
        assert!((grads.convs[0].weights.coeffs[0].re - upstream * x).abs() < 1e-15);
        assert_eq!(grads.convs[0].weights.coeffs[0].im, 0.0);
        assert!((grads.convs[0].weights.bias[0] - upstream).abs() < 1e-15);
        assert!((gin.data()[0] - upstream * 0.8).abs() < 1e-15);
    }

    #[test]
    fn dc_imaginary_gradients_vanish() {
        let net = two_layer_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = net.init_params(&mut rng);
        let pair = TrainingPair {
            exemplar: ImagePatch::new(Tensor::from_fn(&[1, 8, 8], |_| rng.random())).unwrap(),
            search: ImagePatch::new(Tensor::from_fn(&[1, 12, 12], |_| rng.random())).unwrap(),
        };
        let (_, g) = pair_gradient(&net, &params, &pair, 1.0).unwrap();
        for (layer, basis) in g.convs.iter().zip(net.bases()) {
            for (i, c) in layer.weights.coeffs.iter().enumerate() {
                if basis.atoms()[i % basis.len()].freq == 0 {
                    assert_eq!(c.im, 0.0);
                }
            }
        }
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let net = two_layer_net();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = net.init_params(&mut rng);
        let pair = TrainingPair {
            exemplar: ImagePatch::new(Tensor::from_fn(&[1, 8, 8], |_| rng.random())).unwrap(),
            search: ImagePatch::new(Tensor::from_fn(&[1, 12, 12], |_| rng.random())).unwrap(),
        };
        let (_, g) = pair_gradient(&net, &params, &pair, 1.0).unwrap();
        let analytic = g.flatten(&net);
        let flat = params.flatten(&net);
        let eval = |v: &[f64]| {
            let mut p = params.clone();
            p.unflatten(&net, v);
            pair_gradient(&net, &p, &pair, 1.0).unwrap().0
        };
        for i in 0..flat.len() {
            let mut a = flat.clone();
            a[i] += 1e-5;
            let mut b = flat.clone();
            b[i] -= 1e-5;
            let num = (eval(&a) - eval(&b)) / 2e-5;
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-4, "coordinate {i}: {num} vs {}", analytic[i]);
        }
    }

    struct FixedPairs(Vec<TrainingPair>);

    impl PairSource for FixedPairs {
        fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
            Ok(self.0[rng.random_range(0..self.0.len())].clone())
        }
    }

    fn toy_pairs() -> FixedPairs {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = (0..4)
            .map(|_| {
                let search =
                    ImagePatch::new(Tensor::from_fn(&[1, 16, 16], |_| rng.random())).unwrap();
                let exemplar = search.crop_centered((8.0, 8.0), (8, 8)).unwrap();
                TrainingPair { exemplar, search }
            })
            .collect();
        FixedPairs(pairs)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let net = two_layer_net();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(6));
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&net, params.clone(), &toy_pairs(), &cfg).unwrap();
        assert_eq!(out.params, params);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let net = two_layer_net();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        let cfg = TrainConfig {
            epochs: 1,
            pairs_per_epoch: 400,
            batch_size: 2,
            lr_initial: 0.05,
            lr_final: 1e-3,
            label_radius: 1.0,
            ..TrainConfig::default()
        };
        let pairs = toy_pairs();
        let a = train(&net, params.clone(), &pairs, &cfg).unwrap();
        let b = train(&net, params, &pairs, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        let losses: Vec<f64> = a.trace.iter().map(|r| r.loss).collect();
        let ma = moving_average(&losses, 20);
        assert!(ma[ma.len() - 1] < 0.8 * ma[19], "{} vs {}", ma[ma.len() - 1], ma[19]);
    }

    #[test]
    fn divergence_is_reported() {
        let net = two_layer_net();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(8));
        let cfg = TrainConfig {
            epochs: 1,
            pairs_per_epoch: 50,
            batch_size: 1,
            lr_initial: 1e6,
            lr_final: 1e6,
            ..TrainConfig::default()
        };
        match train(&net, params, &toy_pairs(), &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trace.len())),
        }
    }

    #[test]
    fn sampler_crops_center_the_target() {
        let seq = crate::synth::generate_sequence(&crate::synth::SynthConfig {
            frames: 30,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig::default();
        let sampler = PairSampler::new(vec![Arc::new(seq)], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = sampler.sample(&mut rng).unwrap();
        assert_eq!(pair.exemplar.tensor().shape(), &[1, 31, 31]);
        assert_eq!(pair.search.tensor().shape(), &[1, 63, 63]);
        let again = sampler.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(again.search, pair.search);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
