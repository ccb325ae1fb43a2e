//! Fixtures shared by the benchmarks.

use vimco_core::data::{toy_bars, Cases};
use vimco_core::rng::{Rng, RngTree};
use vimco_core::train::{TaskMode, TrainConfig, Trainer};

/// Binary images shaped like the digit data: 28x28 bars.
pub fn digit_sized_cases(n: usize) -> Cases {
    Cases {
        observations: toy_bars(28, n, 0.05, 3),
        contexts: None,
    }
}

/// A freshly initialised trainer with one 200-unit layer.
pub fn trainer(config: TrainConfig, cases: &Cases) -> Trainer {
    let config = TrainConfig {
        latent: vec![200],
        mode: TaskMode::Generative,
        ..config
    };
    Trainer::new(config, cases).expect("valid bench config")
}

/// `k` log-weights spread like those of a half-trained model.
pub fn log_weights(k: usize, seed: u64) -> Vec<f64> {
    use rand::Rng as _;
    let mut rng: Rng = RngTree::new(seed).stream(&[0]);
    (0..k).map(|_| -100.0 + 8.0 * rng.gen::<f64>()).collect()
}

pub fn generators(n: usize, seed: u64) -> Vec<Rng> {
    let tree = RngTree::new(seed);
    (0..n as u64).map(|i| tree.stream(&[i])).collect()
}
