//! K-shot episode assembly: support/query partition, filtered negatives.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::kg::{inverse, EntityId, RelationId, TaskSet, Triple, TripleIndex};

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("relation {0} has no task triples")]
    UnknownRelation(RelationId),
    #[error("relation {relation} has {available} triples, K-shot needs at least {needed}")]
    TooFewTriples {
        relation: RelationId,
        available: usize,
        needed: usize,
    },
    #[error("episode needs K >= 1 and Q >= 1")]
    BadCounts,
    #[error("relation {0} has no candidate pool")]
    NoCandidates(RelationId),
}

/// One few-shot task instance for a single relation.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub relation: RelationId,
    pub support: Vec<Triple>,
    pub queries: Vec<Triple>,
    /// Corrupted tails, one list per query.
    pub negatives: Vec<Vec<EntityId>>,
    pub candidates: Vec<EntityId>,
}

impl Episode {
    /// Relations hidden from neighborhood lookups while this episode runs.
    pub fn excluded_relations(&self) -> [RelationId; 2] {
        [self.relation, inverse(self.relation)]
    }

    /// Support heads and tails, in support order (2K entries).
    pub fn support_entities(&self) -> Vec<EntityId> {
        self.support.iter().flat_map(|t| [t.head, t.tail]).collect()
    }

    /// Every entity the episode scores or conditions on, deduplicated in
    /// first-seen order.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let all = self
            .support
            .iter()
            .chain(&self.queries)
            .flat_map(|t| [t.head, t.tail])
            .chain(self.negatives.iter().flatten().copied());
        for e in all {
            if seen.insert(e) {
                out.push(e);
            }
        }
        out
    }
}

/// Draws K support triples uniformly without replacement and up to Q
/// queries from the remainder.
pub fn sample_episode<R: Rng + ?Sized>(
    tasks: &TaskSet,
    relation: RelationId,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    if k == 0 || q == 0 {
        return Err(EpisodeError::BadCounts);
    }
    let triples = tasks.triples(relation).ok_or(EpisodeError::UnknownRelation(relation))?;
    if triples.len() < k + 1 {
        return Err(EpisodeError::TooFewTriples {
            relation,
            available: triples.len(),
            needed: k + 1,
        });
    }
    let take = (k + q).min(triples.len());
    let picked = index::sample(rng, triples.len(), take).into_vec();
    let support = picked[..k].iter().map(|&i| triples[i]).collect();
    let queries = picked[k..].iter().map(|&i| triples[i]).collect();
    let candidates = tasks
        .candidates(relation)
        .ok_or(EpisodeError::NoCandidates(relation))?
        .to_vec();
    Ok(Episode {
        relation,
        support,
        queries,
        negatives: Vec::new(),
        candidates,
    })
}

/// Result of a negative draw; `exhausted` flags queries that received fewer
/// than the requested number.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeDraw {
    pub per_query: Vec<Vec<EntityId>>,
    pub exhausted: bool,
}

/// Candidates for `(head, relation, ?)` that are not known-true tails.
pub fn valid_negatives(candidates: &[EntityId], known: &TripleIndex, head: EntityId, relation: RelationId) -> Vec<EntityId> {
    let tails = known.tails(head, relation);
    candidates
        .iter()
        .copied()
        .filter(|c| tails.is_none_or(|s| !s.contains(c)))
        .collect()
}

/// Samples `n_neg` distinct corrupted tails per query from the filtered pool.
pub fn sample_negatives<R: Rng + ?Sized>(
    episode: &Episode,
    known: &TripleIndex,
    n_neg: usize,
    rng: &mut R,
) -> NegativeDraw {
    let mut exhausted = false;
    let per_query = episode
        .queries
        .iter()
        .map(|qt| {
            let pool = valid_negatives(&episode.candidates, known, qt.head, episode.relation);
            if pool.len() <= n_neg {
                exhausted |= pool.len() < n_neg;
                return pool;
            }
            index::sample(rng, pool.len(), n_neg)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        })
        .collect();
    NegativeDraw { per_query, exhausted }
}
