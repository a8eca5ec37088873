//! Self-checks run by the `check` command: equivariance, steering,
//! gradients, random baselines and enclosing boxes.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::{steer, FilterWeights, SteerableBasis};
use crate::error::Result;
use crate::eval::{random_baseline, SR_RANGES};
use crate::geometry::BBox;
use crate::net::{GroupSpec, LayerKind, LayerSpec, NetParams, Network, NetworkSpec, PoolMode};
use crate::tensor::{rotate, rotate_point, ImagePatch, Interpolation, Tensor};
use crate::train::{pair_gradient, TrainingPair};

/// Per-pixel bound on bilinear grid rotation of a unit-norm atom against
/// its phase-steered copy, at any angle, for kernel sizes 3 to 11 and
/// group orders up to 16.
pub const STEER_BILINEAR_TOLERANCE: f64 = 0.4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn below(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Self {
            name,
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }
}

fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> ImagePatch {
    ImagePatch::new(Tensor::from_fn(&[1, size, size], |_| rng.random())).expect("rank-3 patch")
}

/// Largest `|f(rot x) − rot f(x)|` of the desk encoder over quarter turns.
pub fn equivariance_error(draws: usize, images: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = Network::new(NetworkSpec::desk(4, 1, [8, 12, 16, 16])?)?;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let params = net.init_params(rng);
        for _ in 0..images {
            let img = random_patch(rng, 31);
            let out = net.forward(&params, &img)?;
            for q in 1..4 {
                let theta = q as f64 * FRAC_PI_2;
                let moved = net.forward(&params, &img.rotated(theta, Interpolation::Bilinear))?;
                worst = worst.max(moved.max_abs_diff(&rotate(&out, theta, Interpolation::Bilinear)));
            }
        }
    }
    Ok(worst)
}

fn random_filter(basis: &SteerableBasis, rng: &mut ChaCha8Rng) -> FilterWeights {
    let mut w = FilterWeights::zeros(2, 2, 1, basis.len());
    for c in &mut w.coeffs {
        *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    }
    w.project_real_dc(basis);
    w
}

/// Steering against grid rotation: worst absolute error of composed
/// filters at quarter turns, and worst per-pixel error of unit-norm atoms
/// at arbitrary angles.
pub fn steering_errors(trials: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let (mut exact, mut approx) = (0.0f64, 0.0f64);
    for size in [3, 5, 7, 9] {
        for order in [4, 8, 16] {
            let basis = SteerableBasis::for_kernel(size, order)?;
            for _ in 0..trials {
                let w = random_filter(&basis, rng);
                let k0 = steer(&w, &basis, 0.0)?;
                for q in 1..4 {
                    let theta = q as f64 * FRAC_PI_2;
                    let diff = steer(&w, &basis, theta)?
                        .max_abs_diff(&rotate(&k0, theta, Interpolation::Bilinear));
                    exact = exact.max(diff);
                }
                let theta = rng.random_range(0.0..2.0 * PI);
                for atom in basis.atoms() {
                    let expect = atom
                        .grid
                        .scale(Complex64::from_polar(1.0, -(atom.freq as f64) * theta));
                    let re = rotate(&atom.grid.re(), theta, Interpolation::Bilinear);
                    let im = rotate(&atom.grid.im(), theta, Interpolation::Bilinear);
                    approx = approx
                        .max(re.max_abs_diff(&expect.re()))
                        .max(im.max_abs_diff(&expect.im()));
                }
            }
        }
    }
    Ok((exact, approx))
}

/// Two-layer cyclic-4 network used by the gradient check.
pub fn gradient_check_net() -> Result<Network> {
    let group = GroupSpec::new(4)?;
    let lift = LayerSpec::conv(LayerKind::Lift, 1, 2, 3, 1);
    let mut last = LayerSpec::conv(LayerKind::Group, 2, 2, 3, 1);
    last.relu = false;
    Network::new(NetworkSpec::new(
        group,
        vec![lift, last, LayerSpec::orientation_pool(2, PoolMode::Max)],
        1.0,
    )?)
}

fn activation_patterns(net: &Network, params: &NetParams, pair: &TrainingPair) -> Result<[Vec<usize>; 2]> {
    Ok([
        net.forward_traced(params, &pair.exemplar)?.activation_pattern(),
        net.forward_traced(params, &pair.search)?.activation_pattern(),
    ])
}

/// Worst relative error between the analytic gradient of the pair loss and
/// central differences, over every parameter and `trials` random draws.
/// Where `±eps` would cross a ReLU or max-pool switch the step is shrunk
/// tenfold until both sides share the activation pattern of the base point.
pub fn gradient_error(trials: usize, eps: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = gradient_check_net()?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let params = net.init_params(rng);
        let pair = TrainingPair {
            exemplar: random_patch(rng, 8),
            search: random_patch(rng, 12),
        };
        let base = activation_patterns(&net, &params, &pair)?;
        let analytic = pair_gradient(&net, &params, &pair, 1.0)?.1.flatten(&net);
        let flat = params.flatten(&net);
        let shifted = |i: usize, h: f64| {
            let mut v = flat.clone();
            v[i] += h;
            let mut p = params.clone();
            p.unflatten(&net, &v);
            p
        };
        for i in 0..flat.len() {
            let mut h = eps;
            let (up, down) = loop {
                let (up, down) = (shifted(i, h), shifted(i, -h));
                let smooth = activation_patterns(&net, &up, &pair)? == base
                    && activation_patterns(&net, &down, &pair)? == base;
                if smooth || h < eps * 1e-4 {
                    break (up, down);
                }
                h /= 10.0;
            };
            let numeric = (pair_gradient(&net, &up, &pair, 1.0)?.0
                - pair_gradient(&net, &down, &pair, 1.0)?.0)
                / (2.0 * h);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-8);
            worst = worst.max((numeric - analytic[i]).abs() / scale);
        }
    }
    Ok(worst)
}

/// Largest distance from a rotated corner to the enclosing box boundary.
pub fn enclosing_box_error(trials: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let b = BBox::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(0.5..40.0),
            rng.random_range(0.5..40.0),
        );
        let pivot = (rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
        let theta = rng.random_range(-PI..PI);
        let e = b.rotated_enclosing(pivot, theta);
        let (x1, y1) = (e.x + e.w, e.y + e.h);
        let mut on_left = f64::INFINITY;
        let mut on_right = f64::INFINITY;
        let mut on_top = f64::INFINITY;
        let mut on_bottom = f64::INFINITY;
        for p in b.corners().map(|p| rotate_point(p, pivot, theta)) {
            on_left = on_left.min((p.0 - e.x).abs());
            on_right = on_right.min((p.0 - x1).abs());
            on_top = on_top.min((p.1 - e.y).abs());
            on_bottom = on_bottom.min((p.1 - y1).abs());
        }
        worst = worst.max(on_left.max(on_right).max(on_top).max(on_bottom));
    }
    worst
}

/// Runs every check with fixed sizes and the given seed.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![CheckOutcome::below(
        "equivariance",
        equivariance_error(4, 2, &mut rng)?,
        1e-5,
    )];
    let (exact, approx) = steering_errors(10, &mut rng)?;
    out.push(CheckOutcome::below("steering-quarter-turns", exact, 1e-10));
    out.push(CheckOutcome::below(
        "steering-arbitrary",
        approx,
        STEER_BILINEAR_TOLERANCE,
    ));
    out.push(CheckOutcome::below(
        "gradient",
        gradient_error(10, 1e-4, &mut rng)?,
        1e-3,
    ));
    let baseline = SR_RANGES
        .iter()
        .zip([0.25, 0.125, 0.0625])
        .map(|(&r, expect)| Ok((random_baseline(r)? - expect).abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    out.push(CheckOutcome {
        name: "random-baseline",
        measured: baseline,
        tolerance: 0.0,
        passed: baseline == 0.0,
    });
    out.push(CheckOutcome::below(
        "enclosing-box",
        enclosing_box_error(200, &mut rng),
        1e-9,
    ));
    let square = BBox::new(0.0, 0.0, 10.0, 10.0).rotated_enclosing((5.0, 5.0), PI / 4.0);
    out.push(CheckOutcome::below(
        "enclosing-box-45",
        (square.w - 10.0 * 2f64.sqrt()).abs(),
        1e-9,
    ));
    Ok(out)
}
