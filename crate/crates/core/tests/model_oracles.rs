use fedtee_core::model::{self, Dataset};
use fedtee_core::params::ParameterVector;
use fedtee_core::seeds::rng_from_seed;
use rand::seq::SliceRandom;
use rand::Rng;

/// Independent full-batch gradient descent on the same objective.
fn full_batch_gd(data: &Dataset, steps: usize, lr: f64) -> Vec<f64> {
    let dim = data.dim();
    let mut w = vec![0.0; dim + 1];
    let n = data.size() as f64;
    for _ in 0..steps {
        let mut g = vec![0.0; dim + 1];
        for (x, &y) in data.features().iter().zip(data.labels()) {
            let z: f64 = w[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[dim];
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - y as f64;
            for j in 0..dim {
                g[j] += e * x[j];
            }
            g[dim] += e;
        }
        for j in 0..=dim {
            w[j] -= lr * g[j] / n;
        }
    }
    w
}

/// Scalar re-implementation of the clamped mean cross-entropy.
fn scalar_loss(params: &[f64], data: &Dataset) -> f64 {
    let dim = data.dim();
    let mut total = 0.0;
    for i in 0..data.size() {
        let x = &data.features()[i];
        let mut z = params[dim];
        for j in 0..dim {
            z += params[j] * x[j];
        }
        let mut p = 1.0 / (1.0 + (-z).exp());
        p = p.clamp(1e-12, 1.0 - 1e-12);
        total += if data.labels()[i] == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / data.size() as f64
}

fn accuracy_of(params: &[f64], data: &Dataset) -> f64 {
    let p = ParameterVector::new(params.to_vec()).unwrap();
    model::evaluate(&p, data).unwrap().accuracy
}

#[test]
fn separable_blobs_are_learned() {
    let data = model::gen_synthetic(1, 200, 2, 2.0).unwrap();
    let start = ParameterVector::zeros(3).unwrap();
    let trained = model::local_train(&start, &data, 50, 0.1, 10, 3).unwrap();
    let sgd = model::evaluate(&trained, &data).unwrap();
    assert!(sgd.accuracy >= 0.95, "sgd accuracy {}", sgd.accuracy);

    let oracle = full_batch_gd(&data, 2000, 0.5);
    let oracle_acc = accuracy_of(&oracle, &data);
    assert!(oracle_acc >= 0.95, "oracle accuracy {oracle_acc}");
    assert!((sgd.accuracy - oracle_acc).abs() <= 0.02);
}

#[test]
fn overlapping_blobs_stay_near_chance() {
    let data = model::gen_synthetic(1, 200, 2, 0.0).unwrap();
    let trained = model::local_train(&ParameterVector::zeros(3).unwrap(), &data, 50, 0.1, 10, 3).unwrap();
    let acc = model::evaluate(&trained, &data).unwrap().accuracy;
    assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
    let oracle_acc = accuracy_of(&full_batch_gd(&data, 500, 0.5), &data);
    assert!((oracle_acc - 0.5).abs() <= 0.1, "oracle accuracy {oracle_acc}");
}

#[test]
fn training_does_not_increase_loss() {
    let data = model::gen_synthetic(11, 200, 2, 2.0).unwrap();
    let start = ParameterVector::new(vec![0.005, -0.003, 0.001]).unwrap();
    let before = model::evaluate(&start, &data).unwrap().loss;
    for epochs in [10, 20] {
        let after = model::evaluate(&model::local_train(&start, &data, epochs, 0.1, 10, 5).unwrap(), &data)
            .unwrap()
            .loss;
        assert!(after <= before, "{after} > {before}");
    }
}

#[test]
fn evaluate_matches_scalar_reimplementation() {
    let data = model::gen_synthetic(3, 150, 4, 1.0).unwrap();
    let mut rng = rng_from_seed(77);
    for _ in 0..20 {
        let params: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ours = model::evaluate(&ParameterVector::new(params.clone()).unwrap(), &data).unwrap().loss;
        assert!((ours - scalar_loss(&params, &data)).abs() <= 1e-9);
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(2024);
    let h = 1e-5;
    for _ in 0..20 {
        let dim = 3;
        let params: Vec<f64> = (0..=dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: u8 = rng.random_range(0..=1);
        let p = ParameterVector::new(params.clone()).unwrap();
        let analytic = model::sample_gradient(&p, &x, y);
        for j in 0..=dim {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[j] += h;
            minus[j] -= h;
            let lp = model::sample_loss(&ParameterVector::new(plus).unwrap(), &x, y);
            let lm = model::sample_loss(&ParameterVector::new(minus).unwrap(), &x, y);
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-5, "coord {j}: analytic {} numeric {numeric}", analytic[j]);
        }
    }
}

#[test]
fn training_is_bit_deterministic() {
    let data = model::gen_synthetic(4, 120, 3, 1.0).unwrap();
    let spec = model::ModelSpec::logistic(3).unwrap();
    let start = model::init_model(&spec, 8);
    let a = model::local_train(&start, &data, 5, 0.1, 7, 21).unwrap();
    let b = model::local_train(&start, &data, 5, 0.1, 7, 21).unwrap();
    let bits = |v: &ParameterVector| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, model::local_train(&start, &data, 5, 0.1, 7, 22).unwrap());
}

#[test]
fn loss_is_invariant_under_row_permutation() {
    let data = model::gen_synthetic(6, 90, 2, 1.0).unwrap();
    let params = ParameterVector::new(vec![0.7, -0.4, 0.2]).unwrap();
    let mut order: Vec<usize> = (0..data.size()).collect();
    order.shuffle(&mut rng_from_seed(1));
    let permuted = data.select(&order).unwrap();
    let a = model::evaluate(&params, &data).unwrap();
    let b = model::evaluate(&params, &permuted).unwrap();
    assert!((a.loss - b.loss).abs() <= 1e-12);
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn csv_export_round_trips_through_a_file() {
    let data = model::gen_synthetic(9, 30, 3, 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("party.csv");
    std::fs::write(&path, data.to_csv()).unwrap();
    let back = Dataset::from_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, data);
}
