//! Flat `key = value` run configuration.
//!
//! Every key has a default; `profile` selects the dataset-specific ones
//! (learning rate, dropout, sample count) and is applied before all other
//! keys regardless of where it appears. Unknown keys are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::kg::GraphOptions;
use crate::objectives::{LossConfig, ScoreKind};
use crate::urgnn::{Attention, GnnOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}': {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    #[default]
    Nell,
    Wiki,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Nell => "nell",
            Profile::Wiki => "wiki",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nell" => Ok(Profile::Nell),
            "wiki" => Ok(Profile::Wiki),
            other => Err(format!("unknown profile '{other}' (expected nell or wiki)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub dim: usize,
    pub layers: usize,
    pub neighbor_cap: usize,
    pub neighbor_seed: u64,
    pub inverse_edges: bool,
    pub self_loop: bool,
    pub attention: Attention,
    pub dropout: f64,
    pub init_std: f64,
    pub train_features: bool,
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub m: usize,
    pub n_neg: usize,
    pub score: ScoreKind,
    pub umi_full_pool: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub k: usize,
    pub q: usize,
    pub seed: u64,
    pub filtered: bool,
    pub no_uncertainty_representation: bool,
    pub no_uncertainty_estimation: bool,
    pub no_uncertainty_attention: bool,
    pub no_umi_loss: bool,
    pub no_kl_loss: bool,
    pub repl_rgcn: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self::for_profile(Profile::Nell)
    }
}

macro_rules! keys {
    ($($field:ident: $doc:literal,)*) => {
        impl Config {
            /// Every key with a one-line description, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$((stringify!($field), $doc)),*];

            fn set_field(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, value)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_owned())),
                }
                Ok(())
            }

            /// Value of `key` in config-file syntax.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$field.to_string()),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    profile: "dataset profile selecting lr/dropout/m defaults: nell | wiki",
    dim: "embedding dimension D",
    layers: "number of graph convolution layers L",
    neighbor_cap: "maximum stored neighbors per entity",
    neighbor_seed: "seed for the one-time neighbor subsampling",
    inverse_edges: "add reversed edges under inverse relations",
    self_loop: "add the W0 self-connection in every layer",
    attention: "neighbor weights: scalar | dimwise",
    dropout: "dropout rate on mean-path layer inputs",
    init_std: "std of random entity features when no ent2vec.tsv exists",
    train_features: "update entity features during training",
    margin: "hinge margin of the completion loss",
    lambda1: "weight of the mutual-information loss",
    lambda2: "weight of the KL loss",
    m: "reparameterized samples per score",
    n_neg: "negatives per query",
    score: "score function: hadamard | transe",
    umi_full_pool: "mutual information over the full filtered pool instead of the sampled negatives",
    lr: "learning rate",
    beta1: "AdamW first-moment decay",
    beta2: "AdamW second-moment decay",
    eps: "AdamW denominator epsilon",
    weight_decay: "AdamW decoupled weight decay",
    batch_size: "query instances per optimizer step",
    max_steps: "upper bound on optimizer steps",
    patience: "evaluations without dev MRR improvement before stopping",
    eval_every: "steps between dev evaluations",
    k: "support triples per episode",
    q: "maximum queries per episode",
    seed: "seed for episodes, noise, dropout and initialization",
    filtered: "filtered ranking (drop other known true tails)",
    no_uncertainty_representation: "ablation: point embeddings instead of Gaussians",
    no_uncertainty_estimation: "ablation: zero batch uncertainty in sampling",
    no_uncertainty_attention: "ablation: uniform neighbor and support weights",
    no_umi_loss: "ablation: drop the mutual-information loss",
    no_kl_loss: "ablation: drop the KL loss",
    repl_rgcn: "ablation: deterministic relational GCN encoder",
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: e.to_string(),
    })
}

/// Splits config text into `(key, value)` pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: n + 1,
            text: raw.to_owned(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: n + 1,
                text: raw.to_owned(),
            });
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

impl Config {
    pub fn for_profile(profile: Profile) -> Self {
        let (lr, dropout, m) = match profile {
            Profile::Nell => (4e-5, 0.1, 10),
            Profile::Wiki => (5e-5, 0.3, 8),
        };
        Self {
            profile,
            dim: 128,
            layers: 3,
            neighbor_cap: 50,
            neighbor_seed: 7,
            inverse_edges: true,
            self_loop: true,
            attention: Attention::Scalar,
            dropout,
            init_std: 0.02,
            train_features: true,
            margin: 5.0,
            lambda1: 0.5,
            lambda2: 0.3,
            m,
            n_neg: 1,
            score: ScoreKind::Hadamard,
            umi_full_pool: false,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 64,
            max_steps: 2000,
            patience: 5,
            eval_every: 50,
            k: 5,
            q: 10,
            seed: 42,
            filtered: true,
            no_uncertainty_representation: false,
            no_uncertainty_estimation: false,
            no_uncertainty_attention: false,
            no_umi_loss: false,
            no_kl_loss: false,
            repl_rgcn: false,
        }
    }

    /// Builds a config from ordered pairs: profile defaults first, then each
    /// pair in order (later pairs win).
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<Self, ConfigError> {
        let profile = pairs
            .clone()
            .into_iter()
            .filter(|(k, _)| *k == "profile")
            .last()
            .map(|(k, v)| parse_value::<Profile>(k, v))
            .transpose()?
            .unwrap_or_default();
        let mut cfg = Self::for_profile(profile);
        for (k, v) in pairs {
            cfg.set_field(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Loads `path` (if given) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Sets one key and revalidates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut next = self.clone();
        next.set_field(key, value)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Fully resolved config in file syntax, one documented key per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, doc) in Self::KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.dim == 0 || self.layers == 0 {
            return bad("dim and layers must be at least 1".into());
        }
        if self.neighbor_cap == 0 {
            return bad("neighbor_cap must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be a non-negative number".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, max_steps and eval_every must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.k == 0 || self.q == 0 {
            return bad("k and q must be at least 1".into());
        }
        if self.attention == Attention::Off {
            return bad("attention = off is spelled no_uncertainty_attention = true".into());
        }
        self.loss().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Point embeddings (no variance path, no sampling).
    pub fn deterministic(&self) -> bool {
        self.no_uncertainty_representation || self.repl_rgcn
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            neighbor_cap: self.neighbor_cap,
            neighbor_seed: self.neighbor_seed,
            inverse_edges: self.inverse_edges,
        }
    }

    pub fn gnn_options(&self) -> GnnOptions {
        GnnOptions {
            layers: self.layers,
            self_loop: self.self_loop || self.repl_rgcn,
            attention: if self.no_uncertainty_attention || self.deterministic() {
                Attention::Off
            } else {
                self.attention
            },
            gaussian: !self.deterministic(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            lambda1: if self.no_umi_loss { 0.0 } else { self.lambda1 },
            lambda2: if self.no_kl_loss { 0.0 } else { self.lambda2 },
            m: if self.deterministic() { 1 } else { self.m },
            n_neg: self.n_neg,
            score: self.score,
        }
    }

    /// Keys whose values differ from `base`.
    pub fn diff(&self, base: &Config) -> Vec<String> {
        Self::KEYS
            .iter()
            .filter(|(k, _)| self.get(k) != base.get(k))
            .map(|(k, _)| k.to_string())
            .collect()
    }
}
