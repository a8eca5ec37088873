//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotsiam::{ImagePatch, Model, Network, NetworkSpec, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_patch(size: usize, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePatch::new(Tensor::from_fn(&[1, size, size], |_| rng.random())).expect("rank-3 patch")
}

/// The desk encoder at group order 4, or its parameter-matched counterpart.
pub fn desk_model(order: usize, seed: u64) -> Model {
    let base = NetworkSpec::desk(4, 1, [8, 12, 16, 16]).expect("valid preset");
    let spec = if order == 4 {
        base
    } else {
        base.matched(order).expect("matchable")
    };
    let net = Network::new(spec).expect("valid spec");
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    Model { net, params }
}
