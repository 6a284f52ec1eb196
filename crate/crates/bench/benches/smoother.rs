use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;

use ensmooth_core::neural::{fit, loss_and_gradients, Network, NetworkSpec, TrainConfig};
use ensmooth_core::smoother::{es_kalman_update, generate_training_pairs, ParamConstraints};
use ensmooth_core::{Ensemble, ObsKind, ObsLabel, ObservationSet, RngStream};

fn linear_ensemble(n_params: usize, n_obs: usize, n_members: usize) -> (Ensemble, ObservationSet) {
    let mut rng = RngStream::new(11, 0);
    let g = DMatrix::from_fn(n_obs, n_params, |_, _| rng.normal() / (n_params as f64).sqrt());
    let m = DMatrix::from_fn(n_params, n_members, |_, _| rng.normal());
    let y = &g * &m;
    let labels = vec![
        ObsLabel {
            kind: ObsKind::Head,
            x: 0.0,
            y: 0.0,
            t: None,
        };
        n_obs
    ];
    let obs = ObservationSet::new(vec![0.5; n_obs], vec![0.05; n_obs], labels).unwrap();
    (Ensemble::new(m, 0).unwrap().with_outputs(y).unwrap(), obs)
}

fn kalman(c: &mut Criterion) {
    let (e, obs) = linear_ensemble(108, 150, 200);
    c.bench_function("kalman_update_108x150x200", |b| {
        b.iter(|| es_kalman_update(&e, &obs, 2.0, &ParamConstraints::none(), &mut RngStream::new(1, 0)).unwrap())
    });
}

fn pairs(c: &mut Criterion) {
    let (e, obs) = linear_ensemble(108, 150, 200);
    c.bench_function("training_pairs_200_members", |b| {
        b.iter(|| generate_training_pairs(&e, &obs, 2.0, &mut RngStream::new(1, 0)).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let spec = NetworkSpec {
        input_dim: 150,
        output_dim: 108,
        widths: vec![150, 140, 130, 120, 108],
        batchnorm: true,
        output_activation: Default::default(),
    };
    let net = Network::new(spec.clone(), &mut RngStream::new(3, 0)).unwrap();
    let mut rng = RngStream::new(4, 0);
    let x = DMatrix::from_fn(150, 256, |_, _| rng.normal());
    let y = DMatrix::from_fn(108, 256, |_, _| rng.normal());
    c.bench_function("network_gradient_batch_256", |b| {
        b.iter(|| loss_and_gradients(&net, x.as_slice(), y.as_slice()).unwrap())
    });

    let (e, obs) = linear_ensemble(20, 30, 60);
    let p = generate_training_pairs(&e, &obs, 1.0, &mut RngStream::new(1, 0)).unwrap();
    let small = NetworkSpec {
        input_dim: 30,
        output_dim: 20,
        widths: vec![32, 32],
        ..spec.clone()
    };
    let cfg = TrainConfig {
        max_epochs: 5,
        ..TrainConfig::default()
    };
    c.bench_function("fit_1770_pairs_5_epochs", |b| b.iter(|| fit(&small, &p, &cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kalman, pairs, network
}
criterion_main!(benches);
