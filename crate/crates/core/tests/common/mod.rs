#![allow(dead_code)]

use hart_core::corpus::{segment_token_messages, BlockSequence, INSEP};
use hart_core::hart::{HartModel, U0};
use hart_core::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dropout-free config with the default layer placement.
pub fn config(vocab: usize, d: usize, layers: usize, heads: usize, block: usize) -> ModelConfig {
    let mut c = ModelConfig::new(vocab, d, layers, heads, block);
    c.dropout = 0.0;
    c
}

/// Initialized model with every matrix scaled by `gain` and a random `U0`
/// in (-0.5, 0.5), so that no pathway sits at its linear or zero point.
pub fn generic_model(cfg: ModelConfig, seed: u64, gain: f64) -> HartModel {
    let mut m = HartModel::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for (name, t) in m.params.iter_mut() {
        if name == U0 {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        } else if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|v| *v *= gain);
        } else {
            // biases and norm gains get a little noise too
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    }
    m
}

/// Messages of random content tokens (ids `3..vocab`) filling roughly
/// `blocks` blocks, segmented without a cap.
pub fn random_sequence(
    rng: &mut ChaCha8Rng,
    vocab: usize,
    block: usize,
    blocks: usize,
) -> BlockSequence {
    let target = block * blocks - rng.gen_range(1..=block / 2);
    let mut msgs: Vec<Vec<usize>> = Vec::new();
    let mut len = 0;
    while len < target {
        let room = target - len - usize::from(!msgs.is_empty());
        if room == 0 {
            break;
        }
        let n = rng.gen_range(1..=room.min(block + 2));
        msgs.push((0..n).map(|_| rng.gen_range(INSEP + 2..vocab)).collect());
        len += n + usize::from(msgs.len() > 1);
    }
    segment_token_messages("u", &msgs, block, None).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
