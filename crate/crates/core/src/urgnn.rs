//! Uncertainty-aware relational message passing over Gaussian embeddings.
//!
//! One layer, for entity `i`:
//!
//! ```text
//! α    = softmax over 𝒩ᵢʳ of ReLU(var_j · W_a)
//! μ'ᵢ  = ReLU( Σ_r W_{μ,r} Σ_j (α_j / d) μ_j  + μᵢ W0_μ )
//! v'ᵢ  = ReLU( Σ_r W_{σ,r} Σ_j (α_j² / d²) v_j + vᵢ W0_σ ) + floor
//! ```
//!
//! with `d = |𝒩ᵢʳ|`. The relation representation is built the same way
//! from the final states of the 2K support entities.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::gaussian::{GaussianEmbedding, VAR_FLOOR};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::params::{Binder, ParamError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("entity {0} has no neighbors and the self-loop is disabled")]
    Isolated(EntityId),
    #[error("attention over an empty group")]
    EmptyGroup,
    #[error("relation update needs a non-empty support set")]
    EmptySupport,
    #[error("entity {0} is outside the computed neighborhood")]
    NotInClosure(EntityId),
}

/// How neighbor weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    /// One weight per neighbor from `ReLU(var_j · W_a)`.
    Scalar,
    /// One weight per neighbor and dimension from `ReLU(var_j ⊙ W_a)`.
    Dimwise,
    /// `α = 1`: plain degree-normalized sums.
    Off,
}

impl std::fmt::Display for Attention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Attention::Scalar => "scalar",
            Attention::Dimwise => "dimwise",
            Attention::Off => "off",
        })
    }
}

impl std::str::FromStr for Attention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scalar" => Ok(Attention::Scalar),
            "dimwise" => Ok(Attention::Dimwise),
            "off" => Ok(Attention::Off),
            other => Err(format!("unknown attention '{other}' (expected scalar or dimwise)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnnOptions {
    pub layers: usize,
    pub self_loop: bool,
    pub attention: Attention,
    /// When false only the mean path runs (point embeddings).
    pub gaussian: bool,
}

impl Default for GnnOptions {
    fn default() -> Self {
        Self {
            layers: 3,
            self_loop: true,
            attention: Attention::Scalar,
            gaussian: true,
        }
    }
}

impl GnnOptions {
    fn effective_attention(&self) -> Attention {
        if self.gaussian {
            self.attention
        } else {
            Attention::Off
        }
    }
}

pub fn w_mu_name(layer: usize, r: RelationId) -> String {
    format!("gnn.{layer}.w_mu.{r}")
}

pub fn w_sigma_name(layer: usize, r: RelationId) -> String {
    format!("gnn.{layer}.w_sigma.{r}")
}

pub fn w_att_name(layer: usize) -> String {
    format!("gnn.{layer}.w_att")
}

pub fn w0_mu_name(layer: usize) -> String {
    format!("gnn.{layer}.w0_mu")
}

pub fn w0_sigma_name(layer: usize) -> String {
    format!("gnn.{layer}.w0_sigma")
}

pub const REL_W_MU: &str = "rel.w_mu";
pub const REL_W_SIGMA: &str = "rel.w_sigma";
pub const REL_W_ATT: &str = "rel.w_att";

/// The sub-graph a forward pass needs: seed entities plus everything within
/// `hops` steps, with edges restricted to that set.
#[derive(Clone, Debug, PartialEq)]
pub struct Closure {
    entities: Vec<EntityId>,
    local: HashMap<EntityId, usize>,
    /// Per edge, sorted by (relation, target, source).
    src: Vec<usize>,
    group: Vec<usize>,
    inv_deg: Vec<f64>,
    /// Per group: the receiving entity.
    group_target: Vec<usize>,
    /// Group ranges per relation present.
    spans: Vec<(RelationId, Range<usize>)>,
    in_degree: Vec<usize>,
}

impl Closure {
    pub fn build(graph: &KnowledgeGraph, seeds: &[EntityId], excluded: &[RelationId], hops: usize) -> Self {
        let mut entities = Vec::new();
        let mut local = HashMap::new();
        let mut queue = VecDeque::new();
        for &e in seeds {
            if !local.contains_key(&e) {
                local.insert(e, entities.len());
                entities.push(e);
                queue.push_back((e, 0));
            }
        }
        while let Some((e, depth)) = queue.pop_front() {
            if depth == hops {
                continue;
            }
            for (_, nbrs) in graph.groups(e, excluded) {
                for n in nbrs {
                    if !local.contains_key(&n) {
                        local.insert(n, entities.len());
                        entities.push(n);
                        queue.push_back((n, depth + 1));
                    }
                }
            }
        }

        // (relation, target, sources)
        let mut groups: Vec<(RelationId, usize, Vec<usize>)> = Vec::new();
        for (ti, &e) in entities.iter().enumerate() {
            for (r, nbrs) in graph.groups(e, excluded) {
                let srcs: Vec<usize> = nbrs.iter().filter_map(|n| local.get(n).copied()).collect();
                if !srcs.is_empty() {
                    groups.push((r, ti, srcs));
                }
            }
        }
        groups.sort_by_key(|(r, t, _)| (*r, *t));

        let mut src = Vec::new();
        let mut group = Vec::new();
        let mut inv_deg = Vec::new();
        let mut group_target = Vec::with_capacity(groups.len());
        let mut spans: Vec<(RelationId, Range<usize>)> = Vec::new();
        let mut in_degree = vec![0; entities.len()];
        for (g, (r, t, srcs)) in groups.iter().enumerate() {
            match spans.last_mut() {
                Some((last, span)) if last == r => span.end = g + 1,
                _ => spans.push((*r, g..g + 1)),
            }
            group_target.push(*t);
            in_degree[*t] += srcs.len();
            let d = srcs.len() as f64;
            for &s in srcs {
                src.push(s);
                group.push(g);
                inv_deg.push(1.0 / d);
            }
        }
        Self {
            entities,
            local,
            src,
            group,
            inv_deg,
            group_target,
            spans,
            in_degree,
        }
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    pub fn local(&self, e: EntityId) -> Result<usize, GnnError> {
        self.local.get(&e).copied().ok_or(GnnError::NotInClosure(e))
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.spans.iter().map(|(r, _)| *r)
    }

    /// Number of in-closure neighbors of entity `e` across all relations.
    pub fn degree(&self, e: EntityId) -> Result<usize, GnnError> {
        Ok(self.in_degree[self.local(e)?])
    }
}

/// Weights `[edges, 1]` (scalar) or `[edges, D]` (dimwise) after
/// normalization, or `None` when attention is off.
fn neighbor_attention(
    tape: &mut Tape,
    var_src: Var,
    w_att: Var,
    attention: Attention,
    group: &[usize],
    n_groups: usize,
) -> Result<Option<Var>, GnnError> {
    let logits = match attention {
        Attention::Off => return Ok(None),
        Attention::Scalar => tape.matmul(var_src, w_att)?,
        Attention::Dimwise => tape.hadamard(var_src, w_att)?,
    };
    let scores = tape.relu(logits)?;
    Ok(Some(tape.segment_softmax(scores, group, n_groups)?))
}

fn apply_weights(tape: &mut Tape, rows: Var, weights: Var) -> Result<Var, TensorError> {
    if tape.value(weights).cols() == 1 {
        tape.scale_rows(rows, weights)
    } else {
        tape.hadamard(rows, weights)
    }
}

/// Binds the attention vector of the given shape convention.
fn bind_attention(tape: &mut Tape, binder: &mut Binder, name: &str, attention: Attention) -> Result<Option<Var>, GnnError> {
    Ok(match attention {
        Attention::Off => None,
        _ => Some(binder.bind(tape, name)?),
    })
}

/// Runs one layer on the closure. `mu` is the (possibly dropped-out) mean
/// input `[N, D]`; `var` is present on the Gaussian path.
pub fn gnn_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    layer: usize,
    closure: &Closure,
    mu: Var,
    var: Option<Var>,
    opts: &GnnOptions,
) -> Result<(Var, Option<Var>), GnnError> {
    let n = closure.len();
    let n_groups = closure.group_target.len();
    let attention = opts.effective_attention();

    let mut mu_acc: Option<Var> = None;
    let mut var_acc: Option<Var> = None;
    if closure.n_edges() > 0 {
        let inv_deg = tape.constant(Tensor::column(closure.inv_deg.clone()));
        let var_src = match var {
            Some(v) => Some(tape.gather_rows(v, &closure.src)?),
            None => None,
        };
        let alpha = match (var_src, bind_attention(tape, binder, &w_att_name(layer), attention)?) {
            (Some(vs), Some(w)) => neighbor_attention(tape, vs, w, attention, &closure.group, n_groups)?,
            _ => None,
        };
        // α/d for means, (α/d)² for variances
        let w_mean = match alpha {
            Some(a) => tape.scale_rows(a, inv_deg)?,
            None => inv_deg,
        };
        let mu_src = tape.gather_rows(mu, &closure.src)?;
        let mu_msg = apply_weights(tape, mu_src, w_mean)?;
        let mu_grouped = tape.segment_sum(mu_msg, &closure.group, n_groups)?;
        let var_grouped = match var_src {
            Some(vs) => {
                let w_var = tape.square(w_mean)?;
                let msg = apply_weights(tape, vs, w_var)?;
                Some(tape.segment_sum(msg, &closure.group, n_groups)?)
            }
            None => None,
        };

        let mut mu_parts = Vec::with_capacity(closure.spans.len());
        let mut var_parts = Vec::with_capacity(closure.spans.len());
        for (r, span) in &closure.spans {
            let rows: Vec<usize> = span.clone().collect();
            let w = binder.bind(tape, &w_mu_name(layer, *r))?;
            let g = tape.gather_rows(mu_grouped, &rows)?;
            mu_parts.push(tape.matmul(g, w)?);
            if let Some(vg) = var_grouped {
                let w = binder.bind(tape, &w_sigma_name(layer, *r))?;
                let g = tape.gather_rows(vg, &rows)?;
                var_parts.push(tape.matmul(g, w)?);
            }
        }
        let mu_cat = tape.concat(&mu_parts, 0)?;
        mu_acc = Some(tape.segment_sum(mu_cat, &closure.group_target, n)?);
        if !var_parts.is_empty() {
            let var_cat = tape.concat(&var_parts, 0)?;
            var_acc = Some(tape.segment_sum(var_cat, &closure.group_target, n)?);
        }
    }

    let (mu_pre, var_pre) = if opts.self_loop {
        let w0 = binder.bind(tape, &w0_mu_name(layer))?;
        let own = tape.matmul(mu, w0)?;
        let m = match mu_acc {
            Some(acc) => tape.add(acc, own)?,
            None => own,
        };
        let v = match var {
            Some(var) => {
                let w0 = binder.bind(tape, &w0_sigma_name(layer))?;
                let own = tape.matmul(var, w0)?;
                Some(match var_acc {
                    Some(acc) => tape.add(acc, own)?,
                    None => own,
                })
            }
            None => None,
        };
        (m, v)
    } else {
        let d = tape.value(mu).cols();
        let m = match mu_acc {
            Some(acc) => acc,
            None => tape.constant(Tensor::zeros(vec![n, d])),
        };
        let v = match var {
            Some(_) => Some(match var_acc {
                Some(acc) => acc,
                None => tape.constant(Tensor::zeros(vec![n, d])),
            }),
            None => None,
        };
        (m, v)
    };
    let mu_out = tape.relu(mu_pre)?;
    let var_out = match var_pre {
        Some(v) => {
            let r = tape.relu(v)?;
            Some(tape.add_scalar(r, VAR_FLOOR)?)
        }
        None => None,
    };
    Ok((mu_out, var_out))
}

/// Relation Gaussian from the rows `support` (2K entries, heads and tails)
/// of the final entity states.
pub fn relation_update(
    tape: &mut Tape,
    binder: &mut Binder,
    mu: Var,
    var: Option<Var>,
    support: &[usize],
    opts: &GnnOptions,
) -> Result<(Var, Option<Var>), GnnError> {
    if support.is_empty() {
        return Err(GnnError::EmptySupport);
    }
    let s = support.len() as f64;
    let attention = opts.effective_attention();
    let mu_rows = tape.gather_rows(mu, support)?;
    let var_rows = match var {
        Some(v) => Some(tape.gather_rows(v, support)?),
        None => None,
    };
    let alpha = match (var_rows, bind_attention(tape, binder, REL_W_ATT, attention)?) {
        (Some(vr), Some(w)) => neighbor_attention(tape, vr, w, attention, &vec![0; support.len()], 1)?,
        _ => None,
    };
    let (mu_w, var_w) = match alpha {
        Some(a) => {
            let m = tape.scalar_mul(a, 1.0 / s)?;
            let a2 = tape.square(a)?;
            let v = tape.scalar_mul(a2, 1.0 / s)?;
            (m, v)
        }
        None => {
            let c = tape.constant(Tensor::column(vec![1.0 / s; support.len()]));
            (c, c)
        }
    };
    let weighted = apply_weights(tape, mu_rows, mu_w)?;
    let pooled = tape.sum_axis(weighted, 0)?;
    let w = binder.bind(tape, REL_W_MU)?;
    let lin = tape.matmul(pooled, w)?;
    let mu_r = tape.relu(lin)?;
    let var_r = match var_rows {
        Some(vr) => {
            let weighted = apply_weights(tape, vr, var_w)?;
            let pooled = tape.sum_axis(weighted, 0)?;
            let w = binder.bind(tape, REL_W_SIGMA)?;
            let lin = tape.matmul(pooled, w)?;
            let r = tape.relu(lin)?;
            Some(tape.add_scalar(r, VAR_FLOOR)?)
        }
        None => None,
    };
    Ok((mu_r, var_r))
}

/// One step of the deterministic relational baseline:
/// `h' = ReLU(Σ_r Σ_j (1/d) h_j W_r + h W_0)`.
pub fn rgcn_layer(tape: &mut Tape, binder: &mut Binder, layer: usize, closure: &Closure, h: Var) -> Result<Var, GnnError> {
    let opts = GnnOptions {
        layers: 1,
        self_loop: true,
        attention: Attention::Off,
        gaussian: false,
    };
    Ok(gnn_layer(tape, binder, layer, closure, h, None, &opts)?.0)
}

/// Softmax weights of `ReLU(var_j · w_a)` over one group, as plain values.
pub fn variance_attention(vars: &[Vec<f64>], w_a: &[f64]) -> Result<Vec<f64>, GnnError> {
    if vars.is_empty() {
        return Err(GnnError::EmptyGroup);
    }
    let mut tape = Tape::new();
    let rows = tape.constant(Tensor::from_rows(vars)?);
    let w = tape.constant(Tensor::column(w_a.to_vec()));
    let a = neighbor_attention(&mut tape, rows, w, Attention::Scalar, &vec![0; vars.len()], 1)?.expect("attention on");
    Ok(tape.value(a).data().to_vec())
}

/// Closed-form Gaussian of `Σ_groups Σ_j (α_j/d) x_j` for independent
/// `x_j ~ N(μ_j, var_j)`, before any transform. Each group is a list of
/// `(embedding, α)` pairs.
pub fn aggregate_neighbors(groups: &[Vec<(GaussianEmbedding, f64)>]) -> Result<(Vec<f64>, Vec<f64>), GnnError> {
    let dim = groups
        .iter()
        .flatten()
        .map(|(g, _)| g.dim())
        .next()
        .ok_or(GnnError::EmptyGroup)?;
    let mut mu = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for group in groups {
        if group.is_empty() {
            return Err(GnnError::EmptyGroup);
        }
        let d = group.len() as f64;
        for (g, alpha) in group {
            for k in 0..dim {
                mu[k] += alpha / d * g.mu[k];
                var[k] += (alpha / d).powi(2) * g.var[k];
            }
        }
    }
    Ok((mu, var))
}
