#![allow(dead_code)]

pub mod gradcheck;

use gemirec::config::Config;
use gemirec::mipdm::{entropy, Mipdm, SeqInput};
use gemirec::nn::normal_table;
use gemirec::rng;
use gemirec::tensor::{Adam, AdamConfig, Tape, Tensor};
use rand::Rng;

pub struct PlantedRun {
    pub capacity: usize,
    /// Mean predictive entropy of the untrained model.
    pub initial_entropy: f64,
    /// Mean cross-entropy over the last 20 training steps.
    pub final_ce: f64,
    /// Top-1 accuracy on fresh sequences after training.
    pub top1: f64,
}

const N_ITEMS: usize = 48;
const N_CATEGORIES: usize = 8;

/// The next interest is a fixed function of the last item's category.
fn planted_target(last_item: usize, capacity: usize) -> usize {
    ((last_item % N_CATEGORIES) * 5 + 3) % capacity
}

fn sample(r: &mut impl Rng, n: usize, capacity: usize) -> (Vec<SeqInput>, Vec<usize>) {
    let inputs: Vec<SeqInput> = (0..n)
        .map(|_| {
            let len = r.gen_range(1..=10);
            SeqInput {
                features: vec![r.gen_range(0..4)],
                items: (0..len).map(|_| r.gen_range(0..N_ITEMS)).collect(),
            }
        })
        .collect();
    let targets = inputs.iter().map(|s| planted_target(*s.items.last().unwrap(), capacity)).collect();
    (inputs, targets)
}

/// Trains the desk predictor alone on planted sequences over a fixed item
/// table whose rows cluster by category.
pub fn planted_mipdm_run(steps: usize, seed: u64) -> PlantedRun {
    let cfg = Config::desk().model;
    let capacity = gemirec::code::capacity(&cfg.level_sizes);
    let mut r = rng::stream(seed, 0);
    let dim = cfg.item_embedding_dim;
    let centers = normal_table(N_CATEGORIES, dim, 1.0, &mut r);
    let noise = normal_table(N_ITEMS, dim, 0.2, &mut r);
    let table: Vec<f64> = (0..N_ITEMS)
        .flat_map(|i| {
            let c = centers.row(i % N_CATEGORIES).to_vec();
            c.into_iter().zip(noise.row(i).to_vec()).map(|(a, b)| a + b)
        })
        .collect();
    let table = Tensor::new(vec![N_ITEMS, dim], table).unwrap();
    let mut model = Mipdm::new(&cfg, &[4], dim, &mut r).unwrap();
    let mut adam = Adam::new(&model.store, AdamConfig { lr: 0.003, ..AdamConfig::default() });

    let (probe, _) = sample(&mut r, 200, capacity);
    let p = model.predict(&table, &probe, false).unwrap();
    let initial_entropy = p.iter().map(|d| entropy(d)).sum::<f64>() / p.len() as f64;

    let mut recent = Vec::new();
    for _ in 0..steps {
        let (inputs, targets) = sample(&mut r, 32, capacity);
        let mut tape = Tape::new();
        let t = tape.constant(table.clone());
        let loss = model.loss(&mut tape, t, &inputs, &targets).unwrap();
        recent.push(tape.value(loss).item());
        let grads = tape.backward(loss).unwrap();
        model.store.zero_grad();
        model.store.accumulate(&grads);
        adam.step(&mut model.store).unwrap();
    }
    let tail = &recent[recent.len().saturating_sub(20)..];
    let final_ce = tail.iter().sum::<f64>() / tail.len() as f64;

    let (inputs, targets) = sample(&mut r, 500, capacity);
    let p = model.predict(&table, &inputs, false).unwrap();
    let hits = p
        .iter()
        .zip(&targets)
        .filter(|(d, &t)| gemirec::mipdm::top_k_flat(d, 1)[0] == t)
        .count();
    PlantedRun {
        capacity,
        initial_entropy,
        final_ce,
        top1: hits as f64 / inputs.len() as f64,
    }
}
