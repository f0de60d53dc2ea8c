#![allow(dead_code)]

use gauss_kgc::config::Config;
use gauss_kgc::kg::{generate_synthetic_kg, Dataset, SynthConfig};
use gauss_kgc::train::{LogRecord, Trainer};

/// Small graph and model that train in well under a second per step.
pub fn small_setup(extra: &[(&str, &str)]) -> (Config, Dataset) {
    let mut pairs = vec![("dim", "8"), ("layers", "2"), ("m", "2"), ("batch_size", "16"), ("eval_every", "5")];
    pairs.extend_from_slice(extra);
    let cfg = Config::from_pairs(pairs).unwrap();
    let synth = SynthConfig {
        n_entities: 60,
        q: 12,
        candidate_pool: 20,
        ..SynthConfig::default()
    };
    let data = Dataset::from_synthetic(generate_synthetic_kg(&synth).unwrap(), cfg.graph_options()).unwrap();
    (cfg, data)
}

pub fn run_steps(trainer: &mut Trainer, n: usize) -> Vec<LogRecord> {
    (0..n).map(|_| trainer.train_step().unwrap()).collect()
}
