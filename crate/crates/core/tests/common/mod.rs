#![allow(dead_code)]

use fedtee_core::adversary::{AdversaryKind, AdversarySpec};
use fedtee_core::config::{DropoutEvent, DropoutPoint, ExperimentConfig, PartyConfig, WeightsMode};
use fedtee_core::model;
use fedtee_core::params::ParameterVector;
use fedtee_core::protocol::{initial_global, party_training_data, training_seed};
use fedtee_core::robust_agg;
use fedtee_core::seeds::SimRng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Full distance matrix reference: scores and the kept index set.
pub fn brute_force_krum(updates: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<usize>) {
    let n = updates.len();
    let m = n - k - 2;
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| updates[i].iter().zip(&updates[j]).map(|(a, b)| (a - b).powi(2)).sum())
                .collect()
        })
        .collect();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..m].iter().sum()
        })
        .collect();
    // keep i when fewer than n−k others rank ahead of it (lower score, or equal score and lower index)
    let kept = (0..n)
        .filter(|&i| {
            let ahead = (0..n)
                .filter(|&j| j != i && (scores[j] < scores[i] || (scores[j] == scores[i] && j < i)))
                .count();
            ahead < n - k
        })
        .collect();
    (scores, kept)
}

/// Random Multi-KRUM instance with n ≤ 10, dim ≤ 5 and a valid k.
pub fn random_instance(rng: &mut SimRng) -> (Vec<Vec<f64>>, usize) {
    let n = rng.random_range(3..=10usize);
    let dim = rng.random_range(1..=5usize);
    let k_max = (n - 3) / 2;
    let k = rng.random_range(0..=k_max);
    let mut ups: Vec<Vec<f64>> =
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
    // occasional duplicates exercise the tie-break
    if rng.random_bool(0.2) {
        ups[n - 1] = ups[0].clone();
    }
    (ups, k)
}

fn point_in_ball(rng: &mut SimRng, center: &[f64], r: f64) -> Vec<f64> {
    let dim = center.len();
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-300);
    let radius = r * rng.random::<f64>().powf(1.0 / dim as f64);
    center.iter().zip(&dir).map(|(c, d)| c + d / norm * radius).collect()
}

/// Six honest updates in a radius-r ball plus one adversary farther than
/// 60r from its center, at a random position in the list. True when
/// Multi-KRUM with k = 1 discards exactly the adversary.
pub fn resiliency_trial(rng: &mut SimRng) -> bool {
    let dim = rng.random_range(1..=5usize);
    let r = 10f64.powf(rng.random_range(-2.0..2.0));
    let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect();
    let mut ups: Vec<ParameterVector> =
        (0..6).map(|_| ParameterVector::new(point_in_ball(rng, &center, r)).unwrap()).collect();
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-300);
    let dist = r * rng.random_range(60.001..200.0);
    let bad: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + d / norm * dist).collect();
    let pos = rng.random_range(0..=6usize);
    ups.insert(pos, ParameterVector::new(bad).unwrap());
    let scores = robust_agg::krum_scores(&ups, 1).unwrap();
    let sel = robust_agg::multi_krum_select(&scores, 1).unwrap();
    sel.discarded == vec![pos]
}

pub fn honest_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { master_seed: seed, n_parties: 6, min_participants: 4, ..ExperimentConfig::default() };
    c.data.dim = 2;
    c.data.margin = 2.0;
    c.data.samples_per_party = 200;
    c.stopping.loss_threshold = 1e-9;
    c.stopping.max_rounds = 20;
    c
}

pub fn attacker(id: u32, spec: AdversarySpec) -> PartyConfig {
    PartyConfig { id, adversary: spec, ..PartyConfig::default() }
}

pub fn model_replacement_config(seed: u64, krum: bool) -> ExperimentConfig {
    let mut c = honest_config(seed);
    c.aggregation.krum_enabled = krum;
    c.aggregation.krum_k = 1;
    c.parties.push(attacker(
        5,
        AdversarySpec { kind: AdversaryKind::ModelReplacement, fraction: 1.0, boost: 20.0, ..AdversarySpec::default() },
    ));
    c
}

pub fn backdoor_config(seed: u64, dp: bool) -> ExperimentConfig {
    let mut c = honest_config(seed);
    c.data.dim = 4;
    c.parties.push(attacker(
        5,
        AdversarySpec { kind: AdversaryKind::Backdoor, fraction: 0.5, boost: 10.0, ..AdversarySpec::default() },
    ));
    c.dp.prune_threshold = 0.0;
    if dp {
        c.dp.enabled = true;
        c.dp.clip_bound = 1.0;
        c.dp.noise_sigma = 0.05;
    }
    c
}

pub fn dropout_config(seed: u64, events: &[(u32, u32, DropoutPoint)]) -> ExperimentConfig {
    let mut c = honest_config(seed);
    c.stopping.max_rounds = 4;
    c.dropouts = events.iter().map(|&(round, party, when)| DropoutEvent { round, party, when }).collect();
    c
}

/// Centralized FedAvg with equal weights over every party, round by round.
pub fn central_fedavg(config: &ExperimentConfig, rounds: u32) -> Vec<Vec<f64>> {
    assert_eq!(config.aggregation.weights, WeightsMode::Equal);
    let t = &config.training;
    let data: Vec<_> = (0..config.n_parties).map(|id| party_training_data(config, id).unwrap()).collect();
    let mut global = initial_global(config).unwrap();
    let mut out = Vec::new();
    for round in 1..=rounds {
        let mut sum = vec![0.0; global.dim()];
        for (id, d) in data.iter().enumerate() {
            let seed = training_seed(config.master_seed, id as u32, round);
            let local = model::local_train(&global, d, t.epochs, t.lr, t.batch, seed).unwrap();
            for (s, x) in sum.iter_mut().zip(local.as_slice()) {
                *s += x;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / data.len() as f64).collect();
        global = ParameterVector::new(mean.clone()).unwrap();
        out.push(mean);
    }
    out
}
