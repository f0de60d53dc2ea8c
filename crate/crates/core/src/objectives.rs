//! Scoring and training losses.
//!
//! Distances are computed for flat lists of (head, relation, tail) row
//! triples so that all `m` samples of an episode share one set of tape ops.
//! A [`PairLayout`] groups pairs by query: the first pair of every query is
//! the true tail, the rest are its negatives.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::gaussian::GaussianEmbedding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("vectors of different lengths ({0} and {1})")]
    DimMismatch(usize, usize),
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("mutual information needs a pool of at least 2 candidates, got {0}")]
    PoolTooSmall(usize),
    #[error("need at least one sample")]
    NoSamples,
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreKind {
    /// `‖z_h ⊙ z_r − z_t‖`
    #[default]
    Hadamard,
    /// `‖z_h + z_r − z_t‖`
    Transe,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Hadamard => "hadamard",
            ScoreKind::Transe => "transe",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hadamard" => Ok(ScoreKind::Hadamard),
            "transe" => Ok(ScoreKind::Transe),
            other => Err(format!("unknown score '{other}' (expected hadamard or transe)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub m: usize,
    pub n_neg: usize,
    pub score: ScoreKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 5.0,
            lambda1: 0.5,
            lambda2: 0.3,
            m: 10,
            n_neg: 1,
            score: ScoreKind::Hadamard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(LossError::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.m == 0 {
            return Err(LossError::Config("m must be at least 1".into()));
        }
        if self.n_neg == 0 {
            return Err(LossError::Config("n_neg must be at least 1".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(LossError::Config("lambdas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Distance between `z_h ∘ z_r` and `z_t`.
pub fn score(z_h: &[f64], z_r: &[f64], z_t: &[f64], kind: ScoreKind) -> Result<f64, LossError> {
    if z_h.len() != z_r.len() {
        return Err(LossError::DimMismatch(z_h.len(), z_r.len()));
    }
    if z_h.len() != z_t.len() {
        return Err(LossError::DimMismatch(z_h.len(), z_t.len()));
    }
    Ok(z_h
        .iter()
        .zip(z_r)
        .zip(z_t)
        .map(|((h, r), t)| {
            let c = match kind {
                ScoreKind::Hadamard => h * r,
                ScoreKind::Transe => h + r,
            };
            (c - t).powi(2)
        })
        .sum::<f64>()
        .sqrt())
}

/// Distances `[P, 1]` for pairs `(heads[p], rels[p], tails[p])`, indexing
/// rows of the entity samples `z_ent` and relation samples `z_rel`.
pub fn pair_distances(
    tape: &mut Tape,
    z_ent: Var,
    z_rel: Var,
    heads: &[usize],
    rels: &[usize],
    tails: &[usize],
    kind: ScoreKind,
) -> Result<Var, LossError> {
    if heads.is_empty() {
        return Err(LossError::EmptyPool);
    }
    let h = tape.gather_rows(z_ent, heads)?;
    let r = tape.gather_rows(z_rel, rels)?;
    let t = tape.gather_rows(z_ent, tails)?;
    let hr = match kind {
        ScoreKind::Hadamard => tape.hadamard(h, r)?,
        ScoreKind::Transe => tape.add(h, r)?,
    };
    let diff = tape.sub(hr, t)?;
    Ok(tape.l2_norm(diff, 1)?)
}

/// Pair grouping: query `q` owns pairs `starts[q] .. starts[q] + sizes[q]`,
/// true tail first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairLayout {
    pub starts: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl PairLayout {
    pub fn from_sizes(sizes: Vec<usize>) -> Self {
        let mut starts = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for s in &sizes {
            starts.push(at);
            at += s;
        }
        Self { starts, sizes }
    }

    pub fn n_queries(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Query index of every pair.
    pub fn segments(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(q, &s)| std::iter::repeat_n(q, s))
            .collect()
    }
}

/// `Σ_q mean_{t′} [δ + P̄(pos) − P̄(t′)]₊` over queries with at least one
/// negative. `pbar` is `[P, 1]`.
pub fn completion_on_tape(tape: &mut Tape, pbar: Var, layout: &PairLayout, margin: f64) -> Result<Var, LossError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut weight = Vec::new();
    for (&s, &n) in layout.starts.iter().zip(&layout.sizes) {
        if n < 2 {
            continue;
        }
        for j in 1..n {
            pos.push(s);
            neg.push(s + j);
            weight.push(1.0 / (n - 1) as f64);
        }
    }
    if pos.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = tape.gather_rows(pbar, &pos)?;
    let q = tape.gather_rows(pbar, &neg)?;
    let d = tape.sub(p, q)?;
    let shifted = tape.add_scalar(d, margin)?;
    let hinge = tape.relu(shifted)?;
    let w = tape.constant(Tensor::column(weight));
    let weighted = tape.scale_rows(hinge, w)?;
    Ok(tape.sum(weighted)?)
}

/// Mean of `[m·P, 1]` sample distances over the `m` stacked blocks → `[P, 1]`.
pub fn average_samples(tape: &mut Tape, dist: Var, m: usize) -> Result<Var, LossError> {
    if m == 0 {
        return Err(LossError::NoSamples);
    }
    let total = tape.value(dist).numel();
    let p = total / m;
    let grid = tape.reshape(dist, vec![m, p])?;
    let col = tape.sum_axis(grid, 0)?;
    let mean = tape.scalar_mul(col, 1.0 / m as f64)?;
    Ok(tape.reshape(mean, vec![p, 1])?)
}

const P_MIN: f64 = 1e-300;

/// `Σ p ln p` per segment, for a `[n, 1]` column of probabilities.
fn neg_entropy(tape: &mut Tape, p: Var, segment: &[usize], n: usize) -> Result<Var, TensorError> {
    let safe = tape.clamp_min(p, P_MIN)?;
    let lp = tape.log(safe)?;
    let plp = tape.hadamard(p, lp)?;
    tape.segment_sum(plp, segment, n)
}

/// Mean over queries of `H(p̄) − (1/m) Σ_k H(p_k)` with
/// `p_k = softmax(−P_k)` over each query's pool. `dist` is `[m·P, 1]`.
pub fn umi_on_tape(tape: &mut Tape, dist: Var, layout: &PairLayout, m: usize) -> Result<Var, LossError> {
    if m == 0 {
        return Err(LossError::NoSamples);
    }
    let nq = layout.n_queries();
    let p_count = layout.n_pairs();
    if let Some(&small) = layout.sizes.iter().find(|&&s| s < 2) {
        return Err(LossError::PoolTooSmall(small));
    }
    if nq == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let seg = layout.segments();
    let stacked: Vec<usize> = (0..m).flat_map(|k| seg.iter().map(move |q| k * nq + q)).collect();
    let logits = tape.neg(dist)?;
    let p = tape.segment_softmax(logits, &stacked, m * nq)?;
    // Σ_k Σ_q Σ p ln p  =  −Σ_q Σ_k H(p_k)
    let per_sample = neg_entropy(tape, p, &stacked, m * nq)?;
    let sum_sample = tape.sum(per_sample)?;
    let grid = tape.reshape(p, vec![m, p_count])?;
    let col = tape.sum_axis(grid, 0)?;
    let mean_row = tape.scalar_mul(col, 1.0 / m as f64)?;
    let pbar = tape.reshape(mean_row, vec![p_count, 1])?;
    let per_query = neg_entropy(tape, pbar, &seg, nq)?;
    let sum_mean = tape.sum(per_query)?;
    // Σ_q H(p̄_q) − (1/m) Σ_{k,q} H(p_{k,q}) = −sum_mean + sum_sample/m
    let a = tape.scalar_mul(sum_sample, 1.0 / m as f64)?;
    let mi = tape.sub(a, sum_mean)?;
    Ok(tape.scalar_mul(mi, 1.0 / nq as f64)?)
}

/// Mean over rows of `½ Σ_d (var + μ² − 1 − ln var)`. Without a variance
/// the rows are treated as unit-variance Gaussians, leaving `½ Σ μ²`.
pub fn kl_on_tape(tape: &mut Tape, mu: Var, var: Option<Var>) -> Result<Var, LossError> {
    let (n, d) = tape.value(mu).require_rank2("kl")?;
    if n == 0 {
        return Err(TensorError::Empty { op: "kl" }.into());
    }
    let mu2 = tape.square(mu)?;
    let total = match var {
        Some(v) => {
            let lv = tape.log(v)?;
            let a = tape.add(v, mu2)?;
            let b = tape.sub(a, lv)?;
            let s = tape.sum(b)?;
            tape.add_scalar(s, -((n * d) as f64))?
        }
        None => tape.sum(mu2)?,
    };
    Ok(tape.scalar_mul(total, 0.5 / n as f64)?)
}

/// `L_com + λ₁ L_UMI + λ₂ L_KL`.
pub fn joint_loss(completion: f64, umi: f64, kl: f64, cfg: &LossConfig) -> f64 {
    completion + cfg.lambda1 * umi + cfg.lambda2 * kl
}

pub fn joint_on_tape(tape: &mut Tape, completion: Var, umi: Var, kl: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    let a = tape.scalar_mul(umi, cfg.lambda1)?;
    let b = tape.scalar_mul(kl, cfg.lambda2)?;
    let s = tape.add(completion, a)?;
    Ok(tape.add(s, b)?)
}

// ---- value-level wrappers ------------------------------------------------

/// `[δ + pos_q − neg]₊` summed over queries, averaged over each query's negatives.
pub fn completion_loss(pos: &[f64], neg: &[Vec<f64>], margin: f64) -> Result<f64, LossError> {
    if pos.len() != neg.len() {
        return Err(LossError::DimMismatch(pos.len(), neg.len()));
    }
    let mut col = Vec::new();
    let mut sizes = Vec::new();
    for (p, ns) in pos.iter().zip(neg) {
        col.push(*p);
        col.extend_from_slice(ns);
        sizes.push(ns.len() + 1);
    }
    let mut tape = Tape::new();
    let pbar = tape.constant(Tensor::column(col));
    let l = completion_on_tape(&mut tape, pbar, &PairLayout::from_sizes(sizes), margin)?;
    Ok(tape.value(l).item())
}

/// Mutual information of `m` distance rows over one candidate pool.
pub fn umi_loss(rows: &[Vec<f64>]) -> Result<f64, LossError> {
    let m = rows.len();
    let first = rows.first().ok_or(LossError::NoSamples)?;
    let pool = first.len();
    if pool == 0 {
        return Err(LossError::EmptyPool);
    }
    if let Some(r) = rows.iter().find(|r| r.len() != pool) {
        return Err(LossError::DimMismatch(pool, r.len()));
    }
    let mut tape = Tape::new();
    let dist = tape.constant(Tensor::column(rows.concat()));
    let l = umi_on_tape(&mut tape, dist, &PairLayout::from_sizes(vec![pool]), m)?;
    Ok(tape.value(l).item())
}

/// Mean KL to the standard normal over a set of embeddings.
pub fn kl_loss(embeddings: &[GaussianEmbedding]) -> Result<f64, LossError> {
    let first = embeddings.first().ok_or(LossError::EmptyPool)?;
    let d = first.dim();
    let mut mu = Vec::new();
    let mut var = Vec::new();
    for g in embeddings {
        if g.dim() != d {
            return Err(LossError::DimMismatch(d, g.dim()));
        }
        mu.extend_from_slice(&g.mu);
        var.extend_from_slice(&g.var);
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![embeddings.len(), d], mu)?);
    let v = tape.constant(Tensor::new(vec![embeddings.len(), d], var)?);
    let l = kl_on_tape(&mut tape, m, Some(v))?;
    Ok(tape.value(l).item())
}
