//! Episodic training: AdamW, early stopping on dev MRR, checkpoints.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::config::{Config, ConfigError};
use crate::episode::{sample_episode, sample_negatives, EpisodeError};
use crate::eval::{derive_seed, evaluate, EvalError};
use crate::kg::{Dataset, RelationId, Split, TripleIndex};
use crate::model::{step_loss, Dims, Model, ModelError, StepOptions};
use crate::params::{Binder, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no training relation has more than K = {0} triples")]
    NoTrainableRelations(usize),
    #[error("non-finite loss at step {step}: total {total}, completion {completion}, umi {umi}, kl {kl}")]
    Divergence {
        step: usize,
        total: f64,
        completion: f64,
        umi: f64,
        kl: f64,
    },
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("gradient shape {grad:?} does not match parameter '{name}' {param:?}")]
    GradientShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint {what} = {checkpoint} but the current setup has {current}")]
    DimMismatch {
        what: &'static str,
        checkpoint: usize,
        current: usize,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &Config) -> Self {
        Self::new(store, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// including their moments and weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<(), TrainError> {
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.tensor(id).shape() {
                    return Err(TrainError::GradientShape {
                        name: store.name(id).to_owned(),
                        param: store.tensor(id).shape().to_vec(),
                        grad: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGradient(store.name(id).to_owned()));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let theta = store.tensor_mut(id).data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                theta[i] -= self.lr * (update + self.weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}

/// One line of `train.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_com: f64,
    pub loss_umi: f64,
    pub loss_kl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_mrr: Option<f64>,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

pub struct Trainer<'d> {
    pub cfg: Config,
    pub model: Model,
    /// Parameters at the best dev MRR so far.
    pub best: ParamStore,
    pub opt: AdamW,
    pub step: usize,
    pub best_dev_mrr: Option<f64>,
    pub bad_evals: usize,
    pub stopped: bool,
    data: &'d Dataset,
    known: TripleIndex,
    train_relations: Vec<RelationId>,
    rng: ChaCha8Rng,
}

impl<'d> Trainer<'d> {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(cfg: Config, data: &'d Dataset) -> Result<Self, TrainError> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0]));
        let model = Model::init(
            &cfg,
            data.vocab.n_entities(),
            data.vocab.n_relations(),
            data.pretrained.as_ref(),
            &mut init_rng,
        )?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1]));
        Self::assemble(cfg, data, model, rng)
    }

    fn assemble(cfg: Config, data: &'d Dataset, model: Model, rng: ChaCha8Rng) -> Result<Self, TrainError> {
        let train_relations: Vec<RelationId> = data
            .tasks
            .split(Split::Train)
            .iter()
            .filter(|(_, ts)| ts.len() > cfg.k)
            .map(|(r, _)| *r)
            .collect();
        if train_relations.is_empty() {
            return Err(TrainError::NoTrainableRelations(cfg.k));
        }
        Ok(Self {
            best: model.params.clone(),
            opt: AdamW::from_config(&model.params, &cfg),
            step: 0,
            best_dev_mrr: None,
            bad_evals: 0,
            stopped: false,
            known: data.known_triples(),
            train_relations,
            model,
            rng,
            data,
            cfg,
        })
    }

    /// Continues from `ckpt`. `cfg` may differ from the saved config only in
    /// keys that leave the parameter layout unchanged.
    pub fn resume(ckpt: Checkpoint, cfg: Config, data: &'d Dataset) -> Result<Self, TrainError> {
        ckpt.check_dims(&Dims {
            dim: cfg.dim,
            layers: cfg.layers,
            n_entities: data.vocab.n_entities(),
            n_relations: data.vocab.n_relations(),
        })?;
        let model = Model {
            dims: ckpt.dims,
            params: ckpt.params,
        };
        let mut t = Self::assemble(cfg, data, model, ckpt.rng.restore()?)?;
        t.best = ckpt.best;
        t.opt.t = ckpt.adam_t;
        t.opt.m = ckpt.adam_m;
        t.opt.v = ckpt.adam_v;
        t.step = ckpt.step;
        t.best_dev_mrr = ckpt.best_dev_mrr;
        t.bad_evals = ckpt.bad_evals;
        t.stopped = ckpt.stopped;
        Ok(t)
    }

    pub fn known(&self) -> &TripleIndex {
        &self.known
    }

    /// Samples episodes until the batch holds `batch_size` queries, then
    /// takes one optimizer step. Evaluates dev MRR every `eval_every` steps.
    pub fn train_step(&mut self) -> Result<LogRecord, TrainError> {
        let cfg = &self.cfg;
        let mut episodes = Vec::new();
        let mut n_queries = 0;
        while n_queries < cfg.batch_size {
            let r = self.train_relations[self.rng.random_range(0..self.train_relations.len())];
            let mut ep = sample_episode(&self.data.tasks, r, cfg.k, cfg.q, &mut self.rng)?;
            ep.negatives = sample_negatives(&ep, &self.known, cfg.n_neg, &mut self.rng).per_query;
            n_queries += ep.queries.len();
            episodes.push(ep);
        }

        let (values, grads) = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.model.params, true);
            let opts = StepOptions {
                train: true,
                uncertainty: None,
            };
            let parts = step_loss(
                &mut tape,
                &mut binder,
                cfg,
                &self.data.graph,
                &self.known,
                &episodes,
                &mut self.rng,
                &opts,
            )?;
            let values = [parts.total, parts.completion, parts.umi, parts.kl].map(|v| tape.value(v).item());
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Divergence {
                    step: self.step + 1,
                    total: values[0],
                    completion: values[1],
                    umi: values[2],
                    kl: values[3],
                });
            }
            let grads = tape.backward(parts.total).map_err(ModelError::from)?;
            (values, binder.gradients(&grads))
        };
        self.opt.step(&mut self.model.params, &grads)?;
        self.step += 1;

        let mut record = LogRecord {
            step: self.step,
            loss: values[0],
            loss_com: values[1],
            loss_umi: values[2],
            loss_kl: values[3],
            dev_mrr: None,
        };
        if self.step % self.cfg.eval_every == 0 && !self.data.tasks.split(Split::Dev).is_empty() {
            let mrr = evaluate(&self.model, &self.cfg, self.data, &self.known, Split::Dev)?.overall.mrr;
            record.dev_mrr = Some(mrr);
            if self.best_dev_mrr.is_none_or(|b| mrr > b) {
                self.best_dev_mrr = Some(mrr);
                self.best = self.model.params.clone();
                self.bad_evals = 0;
            } else {
                self.bad_evals += 1;
                if self.bad_evals >= self.cfg.patience {
                    self.stopped = true;
                }
            }
        }
        Ok(record)
    }

    /// Trains until early stopping or `max_steps`, handing every record to
    /// `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&LogRecord) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while !self.stopped && self.step < self.cfg.max_steps {
            let rec = self.train_step()?;
            sink(&rec)?;
        }
        if self.best_dev_mrr.is_none() {
            self.best = self.model.params.clone();
        }
        Ok(())
    }

    /// Model holding the best-dev parameters.
    pub fn best_model(&self) -> Model {
        Model {
            dims: self.model.dims,
            params: self.best.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            dims: self.model.dims,
            config: self.cfg.clone(),
            step: self.step,
            best_dev_mrr: self.best_dev_mrr,
            bad_evals: self.bad_evals,
            stopped: self.stopped,
            rng: RngState::capture(&self.rng),
            adam_t: self.opt.t,
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
            params: self.model.params.clone(),
            best: self.best.clone(),
        }
    }
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let bad = || TrainError::Corrupt("rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Full training state: current and best parameters, optimizer moments,
/// rng position and early-stopping counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dims: Dims,
    pub config: Config,
    pub step: usize,
    pub best_dev_mrr: Option<f64>,
    pub bad_evals: usize,
    pub stopped: bool,
    pub rng: RngState,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub params: ParamStore,
    pub best: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dims: Dims,
    config: String,
    step: usize,
    best_dev_mrr: Option<f64>,
    bad_evals: usize,
    stopped: bool,
    rng: RngState,
    adam_t: u64,
    tensors: Vec<Entry>,
}

const SECTIONS: [&str; 4] = ["param", "adam_m", "adam_v", "best"];

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            dims: self.dims,
            params: self.params.clone(),
        }
    }

    pub fn best_model(&self) -> Model {
        Model {
            dims: self.dims,
            params: self.best.clone(),
        }
    }

    pub fn check_dims(&self, current: &Dims) -> Result<(), TrainError> {
        let pairs = [
            ("D", self.dims.dim, current.dim),
            ("L", self.dims.layers, current.layers),
            ("N_e", self.dims.n_entities, current.n_entities),
            ("N_r", self.dims.n_relations, current.n_relations),
        ];
        for (what, checkpoint, current) in pairs {
            if checkpoint != current {
                return Err(TrainError::DimMismatch {
                    what,
                    checkpoint,
                    current,
                });
            }
        }
        Ok(())
    }

    /// `u64` little-endian header length, JSON header, then every tensor as
    /// little-endian `f64` in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            entries.push(Entry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(format!("param/{name}"), t);
        }
        for ((name, _), t) in self.params.iter().zip(&self.adam_m) {
            push(format!("adam_m/{name}"), t);
        }
        for ((name, _), t) in self.params.iter().zip(&self.adam_v) {
            push(format!("adam_v/{name}"), t);
        }
        for (name, t) in self.best.iter() {
            push(format!("best/{name}"), t);
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            config: self.config.render(),
            step: self.step,
            best_dev_mrr: self.best_dev_mrr,
            bad_evals: self.bad_evals,
            stopped: self.stopped,
            rng: self.rng.clone(),
            adam_t: self.adam_t,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: &str| TrainError::Corrupt(m.to_owned());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("truncated length prefix"))?.try_into().expect("8 bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length"))?;
        let json = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
        // version first, so a future layout is reported as such
        let probe: serde_json::Value = serde_json::from_slice(json).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let version = probe.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("missing version"))? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(probe).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let payload = &bytes[8 + hlen..];
        let config = Config::parse(&header.config)?;

        let mut sections: [Vec<(String, Tensor)>; 4] = Default::default();
        let mut expected_offset = 0;
        for e in &header.tensors {
            let (section, name) = e.name.split_once('/').ok_or_else(|| corrupt("tensor name without section"))?;
            let idx = SECTIONS.iter().position(|s| *s == section).ok_or_else(|| corrupt("unknown tensor section"))?;
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(corrupt("non-contiguous tensor offsets"));
            }
            let raw = payload.get(e.offset..e.offset + 8 * n).ok_or_else(|| corrupt("truncated payload"))?;
            expected_offset += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|e| TrainError::Corrupt(e.to_string()))?;
            sections[idx].push((name.to_owned(), t));
        }
        if expected_offset != payload.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let [params, adam_m, adam_v, best] = sections;
        let store = |items: Vec<(String, Tensor)>| -> Result<ParamStore, TrainError> {
            let mut s = ParamStore::new();
            for (n, t) in items {
                s.add(n, t).map_err(|e| TrainError::Corrupt(e.to_string()))?;
            }
            Ok(s)
        };
        let n_params = params.len();
        if adam_m.len() != n_params || adam_v.len() != n_params || best.len() != n_params {
            return Err(corrupt("section sizes differ"));
        }
        Ok(Self {
            dims: header.dims,
            config,
            step: header.step,
            best_dev_mrr: header.best_dev_mrr,
            bad_evals: header.bad_evals,
            stopped: header.stopped,
            rng: header.rng,
            adam_t: header.adam_t,
            adam_m: adam_m.into_iter().map(|(_, t)| t).collect(),
            adam_v: adam_v.into_iter().map(|(_, t)| t).collect(),
            params: store(params)?,
            best: store(best)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}
