//! Filtered ranking evaluation: MRR and Hits@N.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::config::Config;
use crate::gaussian::{estimate_uncertainty_rows, Noise, UncertaintyEstimate};
use crate::kg::{Dataset, EntityId, RelationId, Split, Triple, TripleIndex};
use crate::model::{effective_mask, encode, Model, ModelError};
use crate::objectives::{score, ScoreKind};
use crate::params::Binder;
use crate::urgnn::relation_update;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "GAUSS_KGC_THREADS";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("split {0} has no relations to evaluate")]
    EmptySplit(Split),
    #[error("true tail {tail} of ({head}, {relation}) is not in the candidate pool")]
    TrueTailMissing {
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
    },
    #[error("relation {relation} has {available} triples, needs more than K = {k}")]
    TooFewTriples { relation: RelationId, available: usize, k: usize },
    #[error("thread pool: {0}")]
    Threads(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_5: f64,
    pub hits_at_10: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits_at_1: hits(1),
            hits_at_5: hits(5),
            hits_at_10: hits(10),
            n_queries: ranks.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Metrics,
    /// Keyed by relation name.
    pub per_relation: BTreeMap<String, Metrics>,
}

impl EvalReport {
    /// Aligned text table, columns MRR, Hits@10, Hits@5, Hits@1.
    pub fn table(&self) -> String {
        let width = self.per_relation.keys().map(String::len).max().unwrap_or(0).max(8);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "relation", "MRR", "Hits@10", "Hits@5", "Hits@1", "queries"
        );
        let line = |name: &str, m: &Metrics| {
            format!(
                "{:<width$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7}\n",
                name, m.mrr, m.hits_at_10, m.hits_at_5, m.hits_at_1, m.n_queries
            )
        };
        for (name, m) in &self.per_relation {
            out.push_str(&line(name, m));
        }
        out.push_str(&line("all", &self.overall));
        out
    }
}

/// 1-based rank of `truth` among `(candidate, distance)` pairs; ties go to
/// the smaller candidate id.
pub fn rank_of(truth: EntityId, scored: &[(EntityId, f64)]) -> Option<usize> {
    let d_true = scored.iter().find(|(c, _)| *c == truth)?.1;
    let better = scored
        .iter()
        .filter(|&&(c, d)| c != truth && (d < d_true || (d == d_true && c < truth)))
        .count();
    Some(1 + better)
}

/// Candidates to rank for `(head, relation, tail)`: all of `candidates`, minus
/// other known-true tails when `filtered`.
pub fn ranking_pool(
    candidates: &[EntityId],
    known: &TripleIndex,
    query: &Triple,
    filtered: bool,
) -> Result<Vec<EntityId>, EvalError> {
    if !candidates.contains(&query.tail) {
        return Err(EvalError::TrueTailMissing {
            head: query.head,
            relation: query.relation,
            tail: query.tail,
        });
    }
    let tails = known.tails(query.head, query.relation);
    Ok(candidates
        .iter()
        .copied()
        .filter(|&c| !filtered || c == query.tail || tails.is_none_or(|s| !s.contains(&c)))
        .collect())
}

/// Order-independent 64-bit seed derivation.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Support triples (drawn once from `seed`) and the remaining queries.
pub fn split_support(triples: &[Triple], k: usize, seed: u64) -> Result<(Vec<Triple>, Vec<Triple>), EvalError> {
    if triples.len() <= k {
        return Err(EvalError::TooFewTriples {
            relation: triples.first().map_or(0, |t| t.relation),
            available: triples.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, triples.len(), k).into_vec();
    let support = picked.iter().map(|&i| triples[i]).collect();
    picked.sort_unstable();
    let queries = triples
        .iter()
        .enumerate()
        .filter(|(i, _)| picked.binary_search(i).is_err())
        .map(|(_, t)| *t)
        .collect();
    Ok((support, queries))
}

/// Frozen per-relation state that query scoring reads.
struct Snapshot {
    mu: Tensor,
    var: Option<Tensor>,
    local: HashMap<EntityId, usize>,
    rel_mu: Vec<f64>,
    rel_var: Option<Vec<f64>>,
    u: UncertaintyEstimate,
    m: usize,
    kind: ScoreKind,
}

impl Snapshot {
    /// Mean distance over `m` draws for every pool entry. Head and relation
    /// noise is shared across candidates within a draw.
    fn mean_distances(&self, head: EntityId, pool: &[EntityId], seed: u64) -> Vec<f64> {
        let row = |e: EntityId| self.local[&e];
        let (Some(var), Some(rel_var)) = (&self.var, &self.rel_var) else {
            let h = self.mu.row_slice(row(head));
            return pool
                .iter()
                .map(|&c| score(h, &self.rel_mu, self.mu.row_slice(row(c)), self.kind).expect("equal dims"))
                .collect();
        };
        let d = self.rel_mu.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; pool.len()];
        // A single relation has no batch spread, so its estimate is zero.
        let rel_u = UncertaintyEstimate::zeros(d);
        let draw = |mu: &[f64], var: &[f64], u: &UncertaintyEstimate, noise: &Noise, i: usize| -> Vec<f64> {
            (0..d)
                .map(|j| {
                    let at = i * d + j;
                    let beta = mu[j] + noise.eps_mu.data()[at] * u.sigma_mu[j];
                    let gamma = (var[j].sqrt() + noise.eps_sigma.data()[at] * u.sigma_sigma[j]).max(0.0);
                    beta + noise.eps_z.data()[at] * gamma
                })
                .collect()
        };
        for _ in 0..self.m {
            let noise = Noise::draw(2 + pool.len(), d, &mut rng);
            let zh = draw(self.mu.row_slice(row(head)), var.row_slice(row(head)), &self.u, &noise, 0);
            let zr = draw(&self.rel_mu, rel_var, &rel_u, &noise, 1);
            for (i, &c) in pool.iter().enumerate() {
                let zc = draw(self.mu.row_slice(row(c)), var.row_slice(row(c)), &self.u, &noise, 2 + i);
                acc[i] += score(&zh, &zr, &zc, self.kind).expect("equal dims");
            }
        }
        acc.iter().map(|s| s / self.m as f64).collect()
    }
}

fn snapshot(
    model: &Model,
    cfg: &Config,
    data: &Dataset,
    relation: RelationId,
    support: &[Triple],
    seeds: &[EntityId],
) -> Result<Snapshot, ModelError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let mask = effective_mask(&data.graph, relation);
    let enc = encode::<ChaCha8Rng>(&mut tape, &mut binder, cfg, &data.graph, seeds, &mask, None)?;
    let support_entities: Vec<EntityId> = support.iter().flat_map(|t| [t.head, t.tail]).collect();
    let rows = enc.rows(&support_entities)?;
    let (mu_r, var_r) = relation_update(&mut tape, &mut binder, enc.mu, enc.var, &rows, &cfg.gnn_options())?;

    let mu = tape.value(enc.mu).clone();
    let var = enc.var.map(|v| tape.value(v).clone());
    let rel_mu = tape.value(mu_r).data().to_vec();
    let rel_var = var_r.map(|v| tape.value(v).data().to_vec());
    let local: HashMap<EntityId, usize> = seeds.iter().map(|&e| Ok((e, enc.closure.local(e)?))).collect::<Result<_, ModelError>>()?;

    let u = match &var {
        Some(var) if !cfg.no_uncertainty_estimation => {
            let d = cfg.dim;
            let mut bm = Vec::with_capacity(seeds.len() * d);
            let mut bv = Vec::with_capacity(seeds.len() * d);
            for e in seeds {
                bm.extend_from_slice(mu.row_slice(local[e]));
                bv.extend_from_slice(var.row_slice(local[e]));
            }
            let n = seeds.len();
            estimate_uncertainty_rows(
                &Tensor::new(vec![n, d], bm).map_err(ModelError::from)?,
                &Tensor::new(vec![n, d], bv).map_err(ModelError::from)?,
            )?
        }
        _ => UncertaintyEstimate::zeros(cfg.dim),
    };
    Ok(Snapshot {
        mu,
        var,
        local,
        rel_mu,
        rel_var,
        u,
        m: cfg.loss().m,
        kind: cfg.score,
    })
}

fn thread_pool() -> Result<rayon::ThreadPool, EvalError> {
    let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| EvalError::Threads(e.to_string()))
}

/// Ranks of every query of `relation`, in query order.
pub fn relation_ranks(
    model: &Model,
    cfg: &Config,
    data: &Dataset,
    known: &TripleIndex,
    relation: RelationId,
) -> Result<Vec<usize>, EvalError> {
    let triples = data.tasks.triples(relation).unwrap_or(&[]);
    let (support, queries) = split_support(triples, cfg.k, derive_seed(&[cfg.seed, relation as u64]))?;
    let candidates = data.tasks.candidates(relation).unwrap_or(&[]);
    let pools: Vec<Vec<EntityId>> = queries
        .iter()
        .map(|q| ranking_pool(candidates, known, q, cfg.filtered))
        .collect::<Result<_, _>>()?;

    let mut seeds = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let all = support
        .iter()
        .chain(&queries)
        .flat_map(|t| [t.head, t.tail])
        .chain(candidates.iter().copied());
    for e in all {
        if seen.insert(e) {
            seeds.push(e);
        }
    }
    let snap = snapshot(model, cfg, data, relation, &support, &seeds)?;
    let pool = thread_pool()?;
    let ranks = pool.install(|| {
        queries
            .par_iter()
            .zip(&pools)
            .enumerate()
            .map(|(qi, (q, cands))| {
                let seed = derive_seed(&[cfg.seed, relation as u64, qi as u64]);
                let dist = snap.mean_distances(q.head, cands, seed);
                let scored: Vec<(EntityId, f64)> = cands.iter().copied().zip(dist).collect();
                rank_of(q.tail, &scored).expect("pool holds the true tail")
            })
            .collect()
    });
    Ok(ranks)
}

/// Evaluates every relation of `split`.
pub fn evaluate(model: &Model, cfg: &Config, data: &Dataset, known: &TripleIndex, split: Split) -> Result<EvalReport, EvalError> {
    let relations: Vec<RelationId> = data.tasks.split(split).keys().copied().collect();
    if relations.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let mut all = Vec::new();
    let mut per_relation = BTreeMap::new();
    for r in relations {
        let ranks = relation_ranks(model, cfg, data, known, r)?;
        per_relation.insert(data.vocab.relation_name(r).to_owned(), Metrics::from_ranks(&ranks));
        all.extend(ranks);
    }
    Ok(EvalReport {
        overall: Metrics::from_ranks(&all),
        per_relation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(7, &[(7, 0.9)]), Some(1));
        assert_eq!(rank_of(1, &[(1, 0.1), (2, 0.5), (3, 0.9)]), Some(1));
        assert_eq!(rank_of(1, &[(1, 0.3), (2, 0.2), (3, 0.4)]), Some(2));
        // ties: smaller id wins
        assert_eq!(rank_of(5, &[(5, 0.3), (2, 0.3), (9, 0.3)]), Some(2));
        assert_eq!(rank_of(5, &[(2, 0.3)]), None);
    }

    #[test]
    fn metric_examples() {
        let m = Metrics::from_ranks(&[1, 2, 4]);
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert!((m.hits_at_1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((m.hits_at_5, m.hits_at_10), (1.0, 1.0));
        let p = Metrics::from_ranks(&[1; 8]);
        assert_eq!((p.mrr, p.hits_at_1, p.hits_at_5, p.hits_at_10), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn filtered_pool_keeps_own_tail() {
        let q = Triple {
            head: 0,
            relation: 4,
            tail: 2,
        };
        let other = Triple { tail: 3, ..q };
        let known = TripleIndex::new([&q, &other]);
        assert_eq!(ranking_pool(&[1, 2, 3], &known, &q, true).unwrap(), vec![1, 2]);
        assert_eq!(ranking_pool(&[1, 2, 3], &known, &q, false).unwrap(), vec![1, 2, 3]);
        assert!(matches!(ranking_pool(&[1, 3], &known, &q, true), Err(EvalError::TrueTailMissing { .. })));
    }

    #[test]
    fn support_split_is_seeded_partition() {
        let triples: Vec<Triple> = (0..12)
            .map(|i| Triple {
                head: i,
                relation: 0,
                tail: i + 1,
            })
            .collect();
        let (s1, q1) = split_support(&triples, 5, 3).unwrap();
        let (s2, q2) = split_support(&triples, 5, 3).unwrap();
        assert_eq!((&s1, &q1), (&s2, &q2));
        assert_eq!((s1.len(), q1.len()), (5, 7));
        let mut all: Vec<_> = s1.iter().chain(&q1).map(|t| t.head).collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert!(split_support(&triples[..5], 5, 3).is_err());
    }
}
