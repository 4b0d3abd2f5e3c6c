//! Helpers shared by the integration suites. Each test binary compiles its
//! own copy and uses a different subset.
#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use reformulator::model::{ModelConfig, Seq2SeqParams};
use reformulator::numerics::{Tape, Tensor};
use reformulator::text::Row;

/// Flattens every parameter into one vector, in the fixed param order.
pub fn flat_params(model: &Seq2SeqParams) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.data.iter().copied())
        .collect()
}

/// Writes a flat vector back into the parameters.
pub fn set_flat_params(model: &mut Seq2SeqParams, flat: &[f64]) {
    let mut off = 0;
    for p in model.params_mut() {
        let n = p.data.len();
        p.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len());
}

/// Collects every bound tensor's grad into one flat vector.
pub fn flat_grads(tape: &Tape, bound: &[Tensor]) -> Vec<f64> {
    bound
        .iter()
        .flat_map(|t| tape.grad(*t).iter().copied())
        .collect()
}

/// A small random model plus a random query row and token sequence,
/// deterministic in the seed. Weights are drawn wider than the training
/// default so gradients stay well away from the finite-difference noise
/// floor.
pub struct TinyFixture {
    pub model: Seq2SeqParams,
    pub query: Row,
    pub tokens: Vec<usize>,
}

pub fn tiny_fixture(seed: u64) -> TinyFixture {
    let mut rng = StdRng::seed_from_u64(seed);
    let v = rng.random_range(6..10);
    let d = rng.random_range(2..4);
    let h = rng.random_range(3..6);
    let config = ModelConfig::with_dims(v, d, h);
    let mut model = Seq2SeqParams::init(config, seed);
    for p in model.params_mut() {
        for w in &mut p.data {
            *w = rng.random_range(-0.6..0.6);
        }
    }
    let q_len = rng.random_range(1..4);
    let mut ids: Vec<usize> = (0..q_len).map(|_| rng.random_range(4..v)).collect();
    ids.push(reformulator::text::EOS);
    let query = Row {
        ids: ids.clone(),
        len: ids.len(),
    };

    let t_len = rng.random_range(1..4);
    let mut tokens: Vec<usize> = (0..t_len).map(|_| rng.random_range(4..v)).collect();
    tokens.push(reformulator::text::EOS);
    TinyFixture {
        model,
        query,
        tokens,
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`: relative error with a floored denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    reformulator::numerics::relative_error(a, b, 1e-8)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}
