//! Parameter layout, the encoder forward pass, and the per-step objective.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::config::Config;
use crate::episode::{valid_negatives, Episode};
use crate::gaussian::{estimate_uncertainty_rows, project, sample_on_tape, GaussianError, Noise, UncertaintyEstimate};
use crate::kg::{inverse, EntityId, KnowledgeGraph, RelationId, Triple, TripleIndex};
use crate::objectives::{
    average_samples, completion_on_tape, joint_on_tape, kl_on_tape, pair_distances, umi_on_tape, LossError, PairLayout,
};
use crate::params::{Binder, ParamError, ParamStore};
use crate::urgnn::{
    gnn_layer, relation_update, rgcn_layer, w0_mu_name, w0_sigma_name, w_att_name, w_mu_name, w_sigma_name, Attention,
    Closure, GnnError, REL_W_ATT, REL_W_MU, REL_W_SIGMA,
};

pub const FEATURES: &str = "features.entity";
pub const PROJ_W_MU: &str = "proj.w_mu";
pub const PROJ_W_SIGMA: &str = "proj.w_sigma";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("pretrained vector for entity {entity} has {got} values, expected {expected}")]
    Pretrained { entity: EntityId, got: usize, expected: usize },
    #[error("no episodes to score")]
    NoEpisodes,
}

/// Sizes that fix the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub dim: usize,
    pub layers: usize,
    pub n_entities: usize,
    pub n_relations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub params: ParamStore,
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches length")
}

impl Model {
    /// Registers every parameter in a fixed order. Entity features come from
    /// `pretrained` where available and `N(0, init_std²)` otherwise; all
    /// weight matrices are uniform in `±1/√D`.
    pub fn init<R: Rng + ?Sized>(
        cfg: &Config,
        n_entities: usize,
        n_relations: usize,
        pretrained: Option<&HashMap<EntityId, Vec<f64>>>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let d = cfg.dim;
        let dims = Dims {
            dim: d,
            layers: cfg.layers,
            n_entities,
            n_relations,
        };
        let bound = 1.0 / (d as f64).sqrt();
        let mut params = ParamStore::new();

        let normal = Normal::new(0.0, cfg.init_std).expect("validated std");
        let mut feats = Vec::with_capacity(n_entities * d);
        for e in 0..n_entities {
            match pretrained.and_then(|p| p.get(&e)) {
                Some(v) if v.len() == d => feats.extend_from_slice(v),
                Some(v) => {
                    return Err(ModelError::Pretrained {
                        entity: e,
                        got: v.len(),
                        expected: d,
                    })
                }
                None => feats.extend((0..d).map(|_| normal.sample(rng))),
            }
        }
        params.add(FEATURES, Tensor::new(vec![n_entities, d], feats)?)?;
        params.add(PROJ_W_MU, uniform_matrix(d, d, bound, rng))?;
        params.add(PROJ_W_SIGMA, uniform_matrix(d, d, bound, rng))?;
        let att_shape = |rng: &mut R| match cfg.attention {
            Attention::Dimwise => uniform_matrix(1, d, bound, rng),
            _ => uniform_matrix(d, 1, bound, rng),
        };
        for l in 0..cfg.layers {
            for r in 0..n_relations {
                params.add(w_mu_name(l, r), uniform_matrix(d, d, bound, rng))?;
                params.add(w_sigma_name(l, r), uniform_matrix(d, d, bound, rng))?;
            }
            params.add(w_att_name(l), att_shape(rng))?;
            params.add(w0_mu_name(l), uniform_matrix(d, d, bound, rng))?;
            params.add(w0_sigma_name(l), uniform_matrix(d, d, bound, rng))?;
        }
        params.add(REL_W_MU, uniform_matrix(d, d, bound, rng))?;
        params.add(REL_W_SIGMA, uniform_matrix(d, d, bound, rng))?;
        params.add(REL_W_ATT, att_shape(rng))?;
        Ok(Self { dims, params })
    }
}

/// `{r, r⁻¹}` restricted to relations that actually occur in `graph`.
pub fn effective_mask(graph: &KnowledgeGraph, relation: RelationId) -> Vec<RelationId> {
    let mut mask: Vec<RelationId> = [relation, inverse(relation)]
        .into_iter()
        .filter(|&r| graph.has_relation(r))
        .collect();
    mask.sort_unstable();
    mask
}

/// Final-layer states of one closure.
pub struct Encoded {
    pub closure: Closure,
    pub mu: Var,
    pub var: Option<Var>,
}

impl Encoded {
    pub fn rows(&self, entities: &[EntityId]) -> Result<Vec<usize>, GnnError> {
        entities.iter().map(|&e| self.closure.local(e)).collect()
    }
}

fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.hadamard(x, mask)
}

/// Runs the encoder over the `layers`-hop closure of `seeds`. Dropout
/// applies to the mean input of every layer when `rng` is given.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &Config,
    graph: &KnowledgeGraph,
    seeds: &[EntityId],
    excluded: &[RelationId],
    mut rng: Option<&mut R>,
) -> Result<Encoded, ModelError> {
    let closure = Closure::build(graph, seeds, excluded, cfg.layers);
    if !cfg.train_features {
        binder.freeze(FEATURES)?;
    }
    let feats = binder.bind(tape, FEATURES)?;
    let rows = tape.gather_rows(feats, closure.entities())?;
    let opts = cfg.gnn_options();
    let (mut mu, mut var) = if cfg.repl_rgcn {
        (rows, None)
    } else if cfg.deterministic() {
        let w = binder.bind(tape, PROJ_W_MU)?;
        (tape.matmul(rows, w)?, None)
    } else {
        let w_mu = binder.bind(tape, PROJ_W_MU)?;
        let w_sigma = binder.bind(tape, PROJ_W_SIGMA)?;
        let (m, v) = project(tape, rows, w_mu, w_sigma)?;
        (m, Some(v))
    };
    for l in 0..cfg.layers {
        let input = dropout(tape, mu, cfg.dropout, rng.as_deref_mut())?;
        if cfg.repl_rgcn {
            mu = rgcn_layer(tape, binder, l, &closure, input)?;
        } else {
            (mu, var) = gnn_layer(tape, binder, l, &closure, input, var, &opts)?;
        }
    }
    Ok(Encoded { closure, mu, var })
}

/// Scalar pieces of the joint objective, all recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub completion: Var,
    pub umi: Var,
    pub kl: Var,
}

/// Knobs for [`step_loss`] that only tests and diagnostics change.
#[derive(Clone, Debug, Default)]
pub struct StepOptions {
    /// Apply dropout (training).
    pub train: bool,
    /// Use this estimate instead of recomputing it from the batch.
    pub uncertainty: Option<UncertaintyEstimate>,
}

/// Row indices of `m` stacked sample blocks for every (query, candidate)
/// pair, true tail first within each query.
struct Pairs {
    heads: Vec<usize>,
    rels: Vec<usize>,
    tails: Vec<usize>,
    layout: PairLayout,
}

impl Pairs {
    fn build(queries: &[Triple], pools: &[Vec<EntityId>], pos: &HashMap<EntityId, usize>, n: usize, m: usize) -> Self {
        let mut out = Self {
            heads: Vec::new(),
            rels: Vec::new(),
            tails: Vec::new(),
            layout: PairLayout::from_sizes(pools.iter().map(|p| 1 + p.len()).collect()),
        };
        for k in 0..m {
            for (q, pool) in queries.iter().zip(pools) {
                for tail in std::iter::once(q.tail).chain(pool.iter().copied()) {
                    out.heads.push(k * n + pos[&q.head]);
                    out.rels.push(k);
                    out.tails.push(k * n + pos[&tail]);
                }
            }
        }
        out
    }
}

struct Scored {
    episode: usize,
    group: usize,
    mu_r: Var,
    var_r: Option<Var>,
}

fn dedup_push(order: &mut Vec<EntityId>, pos: &mut HashMap<EntityId, usize>, e: EntityId) {
    pos.entry(e).or_insert_with(|| {
        order.push(e);
        order.len() - 1
    });
}

/// Joint loss of a batch of episodes (negatives already drawn).
///
/// Episodes sharing an exclusion mask share one encoder pass. The batch
/// uncertainty and the KL term both range over the distinct episode entities
/// of each pass plus every episode's relation Gaussian. Completion is summed
/// over queries; the mutual-information term is a mean over queries.
#[allow(clippy::too_many_arguments)]
pub fn step_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &Config,
    graph: &KnowledgeGraph,
    known: &TripleIndex,
    episodes: &[Episode],
    rng: &mut R,
    opts: &StepOptions,
) -> Result<LossParts, ModelError> {
    if episodes.is_empty() {
        return Err(ModelError::NoEpisodes);
    }
    let loss_cfg = cfg.loss();
    let gnn = cfg.gnn_options();
    let gaussian = gnn.gaussian;

    let mut groups: BTreeMap<Vec<RelationId>, Vec<usize>> = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        groups.entry(effective_mask(graph, ep.relation)).or_default().push(i);
    }

    let mut encoded = Vec::with_capacity(groups.len());
    let mut scored = Vec::with_capacity(episodes.len());
    let mut batch_mu = Vec::new();
    let mut batch_var = Vec::new();
    for (g, (mask, members)) in groups.iter().enumerate() {
        let mut seeds = Vec::new();
        let mut pos = HashMap::new();
        for &i in members {
            for e in episodes[i].entities() {
                dedup_push(&mut seeds, &mut pos, e);
            }
        }
        let batch_entities = seeds.clone();
        if cfg.umi_full_pool {
            for &i in members {
                for &c in &episodes[i].candidates {
                    dedup_push(&mut seeds, &mut pos, c);
                }
            }
        }
        let enc = if opts.train {
            encode(tape, binder, cfg, graph, &seeds, mask, Some(&mut *rng))?
        } else {
            encode::<R>(tape, binder, cfg, graph, &seeds, mask, None)?
        };
        let rows = enc.rows(&batch_entities)?;
        batch_mu.push(tape.gather_rows(enc.mu, &rows)?);
        if let Some(v) = enc.var {
            batch_var.push(tape.gather_rows(v, &rows)?);
        }
        for &i in members {
            let support = enc.rows(&episodes[i].support_entities())?;
            let (mu_r, var_r) = relation_update(tape, binder, enc.mu, enc.var, &support, &gnn)?;
            scored.push(Scored {
                episode: i,
                group: g,
                mu_r,
                var_r,
            });
        }
        encoded.push(enc);
    }
    scored.sort_by_key(|s| s.episode);
    for s in &scored {
        batch_mu.push(s.mu_r);
        if let Some(v) = s.var_r {
            batch_var.push(v);
        }
    }
    let n_groups = groups.len();
    let estimate = |tape: &Tape, mu: &[Var], var: &[Var]| -> Result<UncertaintyEstimate, ModelError> {
        if let Some(u) = &opts.uncertainty {
            return Ok(u.clone());
        }
        if !gaussian || cfg.no_uncertainty_estimation {
            return Ok(UncertaintyEstimate::zeros(cfg.dim));
        }
        let stack = |xs: &[Var]| {
            let cols = cfg.dim;
            let data: Vec<f64> = xs.iter().flat_map(|&x| tape.value(x).data().iter().copied()).collect();
            Tensor::new(vec![data.len() / cols, cols], data)
        };
        Ok(estimate_uncertainty_rows(&stack(mu)?, &stack(var)?)?)
    };
    let (u_ent, u_rel) = if gaussian {
        (
            estimate(tape, &batch_mu[..n_groups], &batch_var[..n_groups])?,
            estimate(tape, &batch_mu[n_groups..], &batch_var[n_groups..])?,
        )
    } else {
        (UncertaintyEstimate::zeros(cfg.dim), UncertaintyEstimate::zeros(cfg.dim))
    };
    let all_mu = tape.concat(&batch_mu, 0)?;
    let all_var = if gaussian { Some(tape.concat(&batch_var, 0)?) } else { None };

    let m = loss_cfg.m;
    let total_queries: usize = episodes.iter().map(|e| e.queries.len()).sum();
    let mut completion: Option<Var> = None;
    let mut umi: Option<Var> = None;
    for s in &scored {
        let ep = &episodes[s.episode];
        if ep.queries.is_empty() {
            continue;
        }
        let enc = &encoded[s.group];
        let mut needed = Vec::new();
        let mut pos = HashMap::new();
        for (q, t) in ep.queries.iter().enumerate() {
            dedup_push(&mut needed, &mut pos, t.head);
            dedup_push(&mut needed, &mut pos, t.tail);
            if let Some(negs) = ep.negatives.get(q) {
                for &n in negs {
                    dedup_push(&mut needed, &mut pos, n);
                }
            }
        }
        let umi_pools: Vec<Vec<EntityId>> = if cfg.umi_full_pool {
            ep.queries
                .iter()
                .map(|t| {
                    valid_negatives(&ep.candidates, known, t.head, ep.relation)
                        .into_iter()
                        .filter(|&c| c != t.tail)
                        .collect()
                })
                .collect()
        } else {
            ep.queries.iter().enumerate().map(|(q, _)| ep.negatives.get(q).cloned().unwrap_or_default()).collect()
        };
        for pool in &umi_pools {
            for &c in pool {
                dedup_push(&mut needed, &mut pos, c);
            }
        }
        let n = needed.len();
        let rows = enc.rows(&needed)?;
        let (z_ent, z_rel) = match (enc.var, s.var_r) {
            (Some(var), Some(var_r)) => {
                let stacked: Vec<usize> = (0..m).flat_map(|_| rows.iter().copied()).collect();
                let mu_s = tape.gather_rows(enc.mu, &stacked)?;
                let var_s = tape.gather_rows(var, &stacked)?;
                let noise = Noise::draw(m * n, cfg.dim, rng);
                let z_ent = sample_on_tape(tape, mu_s, var_s, &u_ent, &noise)?;
                let rel_rows = vec![0; m];
                let mu_rs = tape.gather_rows(s.mu_r, &rel_rows)?;
                let var_rs = tape.gather_rows(var_r, &rel_rows)?;
                let noise = Noise::draw(m, cfg.dim, rng);
                (z_ent, sample_on_tape(tape, mu_rs, var_rs, &u_rel, &noise)?)
            }
            _ => (tape.gather_rows(enc.mu, &rows)?, s.mu_r),
        };
        let negs: Vec<Vec<EntityId>> =
            (0..ep.queries.len()).map(|q| ep.negatives.get(q).cloned().unwrap_or_default()).collect();
        let pairs = Pairs::build(&ep.queries, &negs, &pos, n, m);
        let dist = pair_distances(tape, z_ent, z_rel, &pairs.heads, &pairs.rels, &pairs.tails, loss_cfg.score)?;
        let pbar = average_samples(tape, dist, m)?;
        let com = completion_on_tape(tape, pbar, &pairs.layout, loss_cfg.margin)?;
        completion = Some(match completion {
            Some(acc) => tape.add(acc, com)?,
            None => com,
        });

        if loss_cfg.lambda1 > 0.0 {
            let (queries, pools): (Vec<Triple>, Vec<Vec<EntityId>>) = ep
                .queries
                .iter()
                .zip(umi_pools)
                .filter(|(_, p)| !p.is_empty())
                .map(|(q, p)| (*q, p))
                .unzip();
            if queries.is_empty() {
                continue;
            }
            let pairs = Pairs::build(&queries, &pools, &pos, n, m);
            let dist = pair_distances(tape, z_ent, z_rel, &pairs.heads, &pairs.rels, &pairs.tails, loss_cfg.score)?;
            let mi = umi_on_tape(tape, dist, &pairs.layout, m)?;
            let mi = tape.scalar_mul(mi, queries.len() as f64 / total_queries as f64)?;
            umi = Some(match umi {
                Some(acc) => tape.add(acc, mi)?,
                None => mi,
            });
        }
    }
    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let completion = completion.unwrap_or_else(|| zero(tape));
    let umi = umi.unwrap_or_else(|| zero(tape));
    let kl = if loss_cfg.lambda2 > 0.0 {
        kl_on_tape(tape, all_mu, all_var)?
    } else {
        zero(tape)
    };
    let total = joint_on_tape(tape, completion, umi, kl, &loss_cfg)?;
    Ok(LossParts {
        total,
        completion,
        umi,
        kl,
    })
}
