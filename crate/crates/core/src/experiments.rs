//! Multi-run drivers: train-then-test, the ablation table, the learning-rate
//! grid and the desk-scale synthetic benchmark.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::config::{Config, ConfigError};
use crate::eval::{evaluate, EvalReport, Metrics};
use crate::kg::{generate_synthetic_kg, DataError, Dataset, Split, SynthConfig};
use crate::train::{LogRecord, TrainError, Trainer};

/// Untrained and trained test metrics for one training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub untrained: Metrics,
    pub trained: EvalReport,
    pub steps: usize,
    pub best_dev_mrr: Option<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Trains from scratch under `cfg` and scores the test split before and
/// after (best dev checkpoint).
pub fn train_and_test(
    cfg: &Config,
    data: &Dataset,
    sink: impl FnMut(&LogRecord) -> Result<(), TrainError>,
) -> Result<RunOutcome, TrainError> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let known = trainer.known().clone();
    let untrained = evaluate(&trainer.model, cfg, data, &known, Split::Test)?.overall;
    trainer.run(sink)?;
    let trained = evaluate(&trainer.best_model(), cfg, data, &known, Split::Test)?;
    Ok(RunOutcome {
        seed: cfg.seed,
        untrained,
        trained,
        steps: trainer.step,
        best_dev_mrr: trainer.best_dev_mrr,
        elapsed: start.elapsed(),
    })
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub flags: &'static [&'static str],
}

/// The full model followed by each module removal.
pub const VARIANTS: [Variant; 7] = [
    Variant { name: "Full model", flags: &[] },
    Variant { name: "w/o UR", flags: &["no_uncertainty_representation"] },
    Variant { name: "w/o Uncertainty Estimation", flags: &["no_uncertainty_estimation"] },
    Variant { name: "w/o Uncertainty Attention", flags: &["no_uncertainty_attention"] },
    Variant { name: "w/o UMI loss", flags: &["no_umi_loss"] },
    Variant { name: "w/o KL loss", flags: &["no_kl_loss"] },
    Variant { name: "w/o UMI and KL", flags: &["no_umi_loss", "no_kl_loss"] },
];

impl Variant {
    pub fn config(&self, base: &Config) -> Result<Config, ConfigError> {
        let mut cfg = base.clone();
        for flag in self.flags {
            cfg.set(flag, "true")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// Config keys that differ from the full model.
    pub diff: Vec<String>,
    pub runs: Vec<RunOutcome>,
    pub mean: Metrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Mean of each metric across runs; `n_queries` is summed.
pub fn mean_metrics(runs: &[&Metrics]) -> Metrics {
    let n = runs.len().max(1) as f64;
    let avg = |f: fn(&Metrics) -> f64| runs.iter().map(|m| f(m)).sum::<f64>() / n;
    Metrics {
        mrr: avg(|m| m.mrr),
        hits_at_1: avg(|m| m.hits_at_1),
        hits_at_5: avg(|m| m.hits_at_5),
        hits_at_10: avg(|m| m.hits_at_10),
        n_queries: runs.iter().map(|m| m.n_queries).sum(),
    }
}

/// Trains every variant once per seed on `data(seed)`. `data` lets callers
/// either share one dataset or regenerate per seed.
pub fn run_ablation<'a>(
    base: &Config,
    seeds: &[u64],
    data: impl Fn(u64) -> &'a Dataset,
    variants: &[Variant],
    mut progress: impl FnMut(&str, &RunOutcome),
) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.config(base)?;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let run = train_and_test(&cfg, data(seed), |_| Ok(()))?;
            progress(v.name, &run);
            runs.push(run);
        }
        let mean = mean_metrics(&runs.iter().map(|r| &r.trained.overall).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: v.name.to_string(),
            diff: cfg.diff(base),
            runs,
            mean,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

impl AblationTable {
    /// Mean test metrics per variant with the MRR change against the first row.
    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# seeds: {}\n", seeds.join(","));
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>7}  {:>6}  {:>6}  {:>7}  config diff",
            "variant", "MRR", "Hits@10", "Hits@5", "Hits@1", "dMRR"
        );
        let full = self.rows.first().map(|r| r.mean.mrr).unwrap_or(0.0);
        for r in &self.rows {
            let m = &r.mean;
            let diff = if r.diff.is_empty() { "-".to_string() } else { r.diff.join(",") };
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.3}  {:>7.3}  {:>6.3}  {:>6.3}  {:>+7.3}  {}",
                r.variant,
                m.mrr,
                m.hits_at_10,
                m.hits_at_5,
                m.hits_at_1,
                m.mrr - full,
                diff
            );
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name)
    }
}

/// Learning rates `from, from + step, ..., ≤ to`, computed by index to
/// avoid drift.
pub fn lr_values(from: f64, to: f64, step: f64) -> Vec<f64> {
    if !(from > 0.0 && step > 0.0 && to >= from) {
        return Vec::new();
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| from + step * i as f64).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GridPoint {
    pub lr: f64,
    pub best_dev_mrr: Option<f64>,
    pub steps: usize,
}

/// Trains once per learning rate and records the best dev MRR.
pub fn lr_grid(
    base: &Config,
    data: &Dataset,
    lrs: &[f64],
    mut progress: impl FnMut(&GridPoint),
) -> Result<Vec<GridPoint>, TrainError> {
    let mut out = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let mut cfg = base.clone();
        cfg.lr = lr;
        cfg.validate()?;
        let mut trainer = Trainer::new(cfg, data)?;
        trainer.run(|_| Ok(()))?;
        let point = GridPoint {
            lr,
            best_dev_mrr: trainer.best_dev_mrr,
            steps: trainer.step,
        };
        progress(&point);
        out.push(point);
    }
    Ok(out)
}

/// Seeds of the desk-scale benchmark; each seed fixes both the graph and
/// the training run.
pub const BENCHMARK_SEEDS: [u64; 3] = [11, 12, 13];

/// The planted-pattern graph used for desk-scale learning checks.
pub fn benchmark_graph(seed: u64) -> SynthConfig {
    SynthConfig {
        n_entities: 200,
        n_background_relations: 2,
        n_task_relations: 6,
        k: 5,
        q: 40,
        noise_rate: 0.1,
        seed,
        candidate_pool: 50,
        dev_relations: 1,
        test_relations: 2,
    }
}

/// Desk-scale training settings layered over the defaults.
pub const BENCHMARK_OVERRIDES: [(&str, &str); 7] = [
    ("dim", "64"),
    ("layers", "2"),
    ("lr", "0.002"),
    ("dropout", "0"),
    ("init_std", "1"),
    ("max_steps", "800"),
    ("patience", "100"),
];

pub fn benchmark_config(seed: u64) -> Result<Config, ConfigError> {
    let seed = seed.to_string();
    Config::from_pairs(BENCHMARK_OVERRIDES.iter().copied().chain([("seed", seed.as_str())]))
}

pub fn benchmark_data(seed: u64, cfg: &Config) -> Result<Dataset, DataError> {
    Dataset::from_synthetic(generate_synthetic_kg(&benchmark_graph(seed))?, cfg.graph_options())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_values_step_by_index() {
        let v = lr_values(1e-4, 5e-4, 1e-4);
        assert_eq!(v.len(), 5);
        assert!((v[4] - 5e-4).abs() < 1e-15);
        assert!(lr_values(5e-4, 1e-4, 1e-4).is_empty());
    }

    #[test]
    fn variant_diffs_name_only_their_flags() {
        let base = Config::default();
        for v in &VARIANTS {
            let cfg = v.config(&base).unwrap();
            let mut want: Vec<String> = v.flags.iter().map(|s| s.to_string()).collect();
            want.sort();
            let mut got = cfg.diff(&base);
            got.sort();
            assert_eq!(got, want, "{}", v.name);
        }
    }

    #[test]
    fn mean_metrics_averages() {
        let a = Metrics::from_ranks(&[1, 1]);
        let b = Metrics::from_ranks(&[2, 2]);
        let m = mean_metrics(&[&a, &b]);
        assert!((m.mrr - 0.75).abs() < 1e-12);
        assert_eq!(m.n_queries, 4);
    }
}
