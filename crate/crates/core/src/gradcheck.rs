//! Finite-difference audit of every differentiable piece of the model on a
//! tiny synthetic episode with frozen noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{finite_difference_report, FdReport, Tape, Tensor, TensorError, Var};
use crate::config::Config;
use crate::episode::{sample_episode, sample_negatives, Episode, EpisodeError};
use crate::gaussian::{project, sample_on_tape, Noise, UncertaintyEstimate};
use crate::kg::{generate_synthetic_kg, DataError, Dataset, RelationId, SynthConfig};
use crate::model::{effective_mask, step_loss, Model, ModelError, StepOptions, FEATURES, PROJ_W_MU, PROJ_W_SIGMA};
use crate::objectives::LossError;
use crate::params::{Binder, ParamError, ParamStore};
use crate::urgnn::{
    gnn_layer, relation_update, w0_mu_name, w0_sigma_name, w_att_name, w_mu_name, w_sigma_name, Closure, GnnError,
    REL_W_ATT, REL_W_MU, REL_W_SIGMA,
};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("probe graph has no usable train relation")]
    NoRelation,
}

/// Worst relative error for one component.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Scale of the probe instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeSize {
    /// 20 entities, D = 3, two layers, 2-shot.
    Tiny,
    /// 30 entities, D = 4, three layers, 3-shot.
    Small,
}

/// The probe instance: a small synthetic graph, a tiny model and one episode.
pub struct Probe {
    pub cfg: Config,
    pub data: Dataset,
    pub model: Model,
    pub episode: Episode,
    seed: u64,
}

impl Probe {
    pub fn new(seed: u64, size: ProbeSize) -> Result<Self, GradcheckError> {
        let (n_entities, dim, layers, k) = match size {
            ProbeSize::Tiny => (20, 3, 2, 2),
            ProbeSize::Small => (30, 4, 3, 3),
        };
        let mut cfg = Config::default();
        cfg.dim = dim;
        cfg.layers = layers;
        cfg.k = k;
        cfg.q = 3;
        cfg.m = 2;
        cfg.n_neg = 2;
        cfg.dropout = 0.0;
        cfg.init_std = 0.7;
        cfg.seed = seed;
        let synth = SynthConfig {
            n_entities,
            n_background_relations: 2,
            n_task_relations: 3,
            k,
            q: 3,
            candidate_pool: 10,
            seed,
            ..SynthConfig::default()
        };
        let data = Dataset::from_synthetic(generate_synthetic_kg(&synth)?, cfg.graph_options())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(&cfg, data.vocab.n_entities(), data.vocab.n_relations(), None, &mut rng)?;
        let relation = *data.tasks.split(crate::kg::Split::Train).keys().next().ok_or(GradcheckError::NoRelation)?;
        let mut episode = sample_episode(&data.tasks, relation, cfg.k, cfg.q, &mut rng)?;
        episode.negatives = sample_negatives(&episode, &data.known_triples(), cfg.n_neg, &mut rng).per_query;
        Ok(Self {
            cfg,
            data,
            model,
            episode,
            seed,
        })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn relation(&self) -> RelationId {
        self.episode.relation
    }
}

/// Runs every component check; errors only if the probe cannot be built.
pub fn run_gradcheck(seed: u64, size: ProbeSize, h: f64) -> Result<Vec<ComponentReport>, GradcheckError> {
    let probe = Probe::new(seed, size)?;
    let mut out = Vec::new();
    let mut push = |name: &str, r: FdReport| {
        out.push(ComponentReport {
            component: name.to_string(),
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
            passed: r.max_rel_error < TOLERANCE,
        })
    };
    push("projection", check_projection(&probe, h)?);
    push("sampling", check_sampling(&probe, h)?);
    let (mean, var, att) = check_layer(&probe, h)?;
    push("aggregation.mean", mean);
    push("aggregation.variance", var);
    push("attention", att);
    push("relation_update", check_relation(&probe, h)?);
    for part in [Part::Completion, Part::Umi, Part::Kl, Part::Joint] {
        push(part.name(), check_loss(&probe, part, h)?);
    }
    Ok(out)
}

/// Fixed random weights turning a matrix output into a scalar.
fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var, TensorError> {
    let c = tape.constant(w.clone());
    let p = tape.hadamard(x, c)?;
    tape.sum(p)
}

fn tensors(store: &ParamStore, names: &[String]) -> Result<Vec<Tensor>, ParamError> {
    names.iter().map(|n| store.get(n).cloned()).collect()
}

/// Binder over the probe model with `names` replaced by `vars`.
fn bound<'s>(store: &'s ParamStore, names: &[String], vars: &[Var]) -> Result<Binder<'s>, ParamError> {
    let mut binder = Binder::new(store, false);
    for (n, &v) in names.iter().zip(vars) {
        binder.preset(n, v)?;
    }
    Ok(binder)
}

fn check_projection(p: &Probe, h: f64) -> Result<FdReport, GradcheckError> {
    let names = vec![FEATURES.to_string(), PROJ_W_MU.to_string(), PROJ_W_SIGMA.to_string()];
    let point = tensors(&p.model.params, &names)?;
    let n = p.model.dims.n_entities;
    let mut rng = p.rng(1);
    let (wm, wv) = (weights(&mut rng, &[n, p.cfg.dim]), weights(&mut rng, &[n, p.cfg.dim]));
    finite_difference_report(
        |tape: &mut Tape, v: &[Var]| -> Result<Var, GradcheckError> {
            let (mu, var) = project(tape, v[0], v[1], v[2])?;
            let a = weighted_sum(tape, mu, &wm)?;
            let b = weighted_sum(tape, var, &wv)?;
            Ok(tape.add(a, b)?)
        },
        &point,
        h,
    )
}

/// Layer-0 Gaussian inputs for the probe episode's closure.
fn layer_inputs(p: &Probe) -> Result<(Closure, Tensor, Tensor), GradcheckError> {
    let mask = effective_mask(&p.data.graph, p.relation());
    let closure = Closure::build(&p.data.graph, &p.episode.entities(), &mask, p.cfg.layers);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&p.model.params, false);
    let feats = binder.bind(&mut tape, FEATURES)?;
    let rows = tape.gather_rows(feats, closure.entities())?;
    let wm = binder.bind(&mut tape, PROJ_W_MU)?;
    let ws = binder.bind(&mut tape, PROJ_W_SIGMA)?;
    let (mu, var) = project(&mut tape, rows, wm, ws)?;
    Ok((closure, tape.value(mu).clone(), tape.value(var).clone()))
}

fn check_sampling(p: &Probe, h: f64) -> Result<FdReport, GradcheckError> {
    let (_, mu, var) = layer_inputs(p)?;
    let (n, d) = (mu.rows(), mu.cols());
    let mut rng = p.rng(2);
    let u = UncertaintyEstimate {
        sigma_mu: (0..d).map(|_| rng.random_range(0.05..0.3)).collect(),
        sigma_sigma: (0..d).map(|_| rng.random_range(0.05..0.3)).collect(),
        batch: n,
    };
    let noise = Noise::draw(n, d, &mut rng);
    let w = weights(&mut rng, &[n, d]);
    finite_difference_report(
        |tape: &mut Tape, v: &[Var]| -> Result<Var, GradcheckError> {
            let z = sample_on_tape(tape, v[0], v[1], &u, &noise)?;
            Ok(weighted_sum(tape, z, &w)?)
        },
        &[mu, var],
        h,
    )
}

fn check_layer(p: &Probe, h: f64) -> Result<(FdReport, FdReport, FdReport), GradcheckError> {
    let (closure, mu, var) = layer_inputs(p)?;
    let opts = p.cfg.gnn_options();
    let rels: Vec<RelationId> = closure.relations().collect();
    let (n, d) = (mu.rows(), mu.cols());
    let mut rng = p.rng(3);
    let (wm, wv) = (weights(&mut rng, &[n, d]), weights(&mut rng, &[n, d]));

    // Point is (mu, var, named params); the flags pick which outputs feed the scalar.
    let run = |names: &[String], use_mean: bool, use_var: bool| -> Result<FdReport, GradcheckError> {
        let mut point = vec![mu.clone(), var.clone()];
        point.extend(tensors(&p.model.params, names)?);
        finite_difference_report(
            |tape: &mut Tape, v: &[Var]| -> Result<Var, GradcheckError> {
                let mut binder = bound(&p.model.params, names, &v[2..])?;
                let (m, s) = gnn_layer(tape, &mut binder, 0, &closure, v[0], Some(v[1]), &opts)?;
                let s = s.expect("gaussian layer");
                let a = weighted_sum(tape, m, &wm)?;
                let b = weighted_sum(tape, s, &wv)?;
                Ok(match (use_mean, use_var) {
                    (true, true) => tape.add(a, b)?,
                    (true, false) => a,
                    _ => b,
                })
            },
            &point,
            h,
        )
    };
    let mut mean_names: Vec<String> = rels.iter().map(|&r| w_mu_name(0, r)).collect();
    mean_names.push(w0_mu_name(0));
    let mut var_names: Vec<String> = rels.iter().map(|&r| w_sigma_name(0, r)).collect();
    var_names.push(w0_sigma_name(0));
    let mean = run(&mean_names, true, false)?;
    let variance = run(&var_names, false, true)?;
    let attention = run(&[w_att_name(0)], true, true)?;
    Ok((mean, variance, attention))
}

fn check_relation(p: &Probe, h: f64) -> Result<FdReport, GradcheckError> {
    let (closure, mu, var) = layer_inputs(p)?;
    let opts = p.cfg.gnn_options();
    let support: Vec<usize> =
        p.episode.support_entities().iter().map(|&e| closure.local(e)).collect::<Result<_, _>>()?;
    let names = vec![REL_W_MU.to_string(), REL_W_SIGMA.to_string(), REL_W_ATT.to_string()];
    let mut point = vec![mu, var];
    point.extend(tensors(&p.model.params, &names)?);
    let mut rng = p.rng(4);
    let (wm, wv) = (weights(&mut rng, &[1, p.cfg.dim]), weights(&mut rng, &[1, p.cfg.dim]));
    finite_difference_report(
        |tape: &mut Tape, v: &[Var]| -> Result<Var, GradcheckError> {
            let mut binder = bound(&p.model.params, &names, &v[2..])?;
            let (m, s) = relation_update(tape, &mut binder, v[0], Some(v[1]), &support, &opts)?;
            let a = weighted_sum(tape, m, &wm)?;
            let b = weighted_sum(tape, s.expect("gaussian relation"), &wv)?;
            Ok(tape.add(a, b)?)
        },
        &point,
        h,
    )
}

#[derive(Clone, Copy)]
enum Part {
    Completion,
    Umi,
    Kl,
    Joint,
}

impl Part {
    fn name(self) -> &'static str {
        match self {
            Part::Completion => "loss.completion",
            Part::Umi => "loss.umi",
            Part::Kl => "loss.kl",
            Part::Joint => "loss.joint",
        }
    }
}

/// Full forward pass through every trainable parameter. The noise stream is
/// reseeded per evaluation and the batch spread is pinned, so the loss is a
/// deterministic function of the parameters.
fn check_loss(p: &Probe, part: Part, h: f64) -> Result<FdReport, GradcheckError> {
    let names: Vec<String> = p.model.params.iter().map(|(n, _)| n.to_string()).collect();
    let point = tensors(&p.model.params, &names)?;
    let d = p.cfg.dim;
    let mut rng = p.rng(5);
    let u = UncertaintyEstimate {
        sigma_mu: (0..d).map(|_| rng.random_range(0.05..0.3)).collect(),
        sigma_sigma: (0..d).map(|_| rng.random_range(0.05..0.3)).collect(),
        batch: 0,
    };
    let opts = StepOptions {
        train: false,
        uncertainty: Some(u),
    };
    let known = p.data.known_triples();
    let episodes = std::slice::from_ref(&p.episode);
    finite_difference_report(
        |tape: &mut Tape, v: &[Var]| -> Result<Var, GradcheckError> {
            let mut binder = bound(&p.model.params, &names, v)?;
            let mut rng = p.rng(6);
            let parts = step_loss(tape, &mut binder, &p.cfg, &p.data.graph, &known, episodes, &mut rng, &opts)?;
            Ok(match part {
                Part::Completion => parts.completion,
                Part::Umi => parts.umi,
                Part::Kl => parts.kl,
                Part::Joint => parts.total,
            })
        },
        &point,
        h,
    )
}
