use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fedtee_bench::random_updates;
use fedtee_core::enclave::{AttestationRoot, Enclave, Measurement};
use fedtee_core::envelope;
use fedtee_core::model::{self, ModelSpec};
use fedtee_core::params;
use fedtee_core::robust_agg;
use fedtee_core::seeds::rng_from_seed;
use fedtee_core::{run_experiment, ExperimentConfig};

fn krum(c: &mut Criterion) {
    let mut g = c.benchmark_group("krum_scores");
    for n in [6usize, 10, 20] {
        let ups = random_updates(1, n, 100);
        g.bench_with_input(BenchmarkId::from_parameter(n), &ups, |b, ups| {
            b.iter(|| robust_agg::krum_scores(black_box(ups), 1).unwrap())
        });
    }
    g.finish();
}

fn geometric_median(c: &mut Criterion) {
    let ups = random_updates(2, 10, 100);
    c.bench_function("geometric_median/10x100", |b| {
        b.iter(|| params::geometric_median(black_box(&ups), 1e-9, 1000).unwrap())
    });
}

fn envelope_round_trip(c: &mut Criterion) {
    let mut server = Enclave::create([1; 32]);
    server.add(Vec::new(), b"server".to_vec()).unwrap();
    server.extend().unwrap();
    server.init(&AttestationRoot::from_bytes([2; 32])).unwrap();
    server.key_derive().unwrap();
    let pk = server.public_key().unwrap();
    let sender = Measurement::compute(b"commit", b"party");
    let mut g = c.benchmark_group("envelope");
    for dim in [3usize, 1_000, 10_000] {
        let v = random_updates(3, 1, dim).pop().unwrap();
        let mut rng = rng_from_seed(4);
        g.bench_with_input(BenchmarkId::new("encrypt", dim), &v, |b, v| {
            b.iter(|| envelope::encrypt_update(&pk, black_box(v), 1, 0, &sender, &mut rng).unwrap())
        });
        let sealed = envelope::encrypt_update(&pk, &v, 1, 0, &sender, &mut rng).unwrap();
        let sk = server.secret_handle().unwrap();
        g.bench_with_input(BenchmarkId::new("decrypt", dim), &sealed, |b, u| {
            b.iter(|| envelope::decrypt_update(sk, black_box(u), 1).unwrap())
        });
    }
    g.finish();
}

fn local_train(c: &mut Criterion) {
    let data = model::gen_synthetic(5, 200, 2, 2.0).unwrap();
    let start = model::init_model(&ModelSpec::logistic(2).unwrap(), 6);
    c.bench_function("local_train/200x2/1-epoch", |b| {
        b.iter(|| model::local_train(black_box(&start), &data, 1, 0.1, 10, 7).unwrap())
    });
}

fn experiment(c: &mut Criterion) {
    let mut cfg = ExperimentConfig { n_parties: 6, ..ExperimentConfig::default() };
    cfg.aggregation.krum_enabled = true;
    cfg.stopping.max_rounds = 5;
    let mut g = c.benchmark_group("experiment");
    g.sample_size(10);
    g.bench_function("6-parties/5-rounds/krum", |b| b.iter(|| run_experiment(black_box(&cfg)).unwrap()));
    g.finish();
}

criterion_group!(benches, krum, geometric_median, envelope_round_trip, local_train, experiment);
criterion_main!(benches);
