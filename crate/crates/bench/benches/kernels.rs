use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rotsiam::geometry::BBox;
use rotsiam::synth::{DatasetConfig, Split};
use rotsiam::tensor::conv2d;
use rotsiam::tracker::Tracker;
use rotsiam::train::{pair_gradient, TrainingPair};
use rotsiam::{steer, Encoder, FrameSource, SteerableBasis, TrackerConfig};
use rotsiam_bench::{desk_model, random_patch, random_tensor};

fn convolution(c: &mut Criterion) {
    let input = random_tensor(&[48, 15, 15], 1);
    let kernels = random_tensor(&[64, 48, 3, 3], 2);
    c.bench_function("conv2d 48x15x15 -> 64", |b| {
        b.iter(|| conv2d(&input, &kernels, 1, 0).unwrap())
    });
}

fn steering(c: &mut Criterion) {
    let model = desk_model(4, 3);
    let w = &model.params.convs[2].weights;
    let basis4 = &model.net.bases()[2];
    c.bench_function("steer 16x12x4 filters", |b| b.iter(|| steer(w, basis4, 0.7).unwrap()));
    c.bench_function("basis S=3 order 8", |b| {
        b.iter(|| SteerableBasis::for_kernel(3, 8).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode 63x63");
    let img = random_patch(63, 4);
    for order in [1usize, 4, 8] {
        let model = desk_model(order, 5);
        group.bench_with_input(BenchmarkId::from_parameter(order), &model, |b, m| {
            b.iter(|| m.encode(&img).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let model = desk_model(4, 6);
    let pair = TrainingPair {
        exemplar: random_patch(31, 7),
        search: random_patch(63, 8),
    };
    c.bench_function("pair gradient order 4", |b| {
        b.iter(|| pair_gradient(&model.net, &model.params, &pair, 2.0).unwrap())
    });
}

fn tracking(c: &mut Criterion) {
    let seq = DatasetConfig::default().sequence(Split::Test, 0).unwrap();
    let frames: Vec<_> = (0..4).map(|t| seq.frame(t).unwrap()).collect();
    let init: BBox = seq.annotation(0).bbox();
    let mut group = c.benchmark_group("tracker step");
    for order in [1usize, 4] {
        let model = desk_model(order, 9);
        group.bench_with_input(BenchmarkId::from_parameter(order), &model, |b, m| {
            b.iter(|| {
                let mut t = Tracker::new(m, TrackerConfig::default(), &frames[0], init).unwrap();
                for f in &frames[1..] {
                    t.step(f).unwrap();
                }
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = convolution, steering, forward, training, tracking
}
criterion_main!(benches);
