//! Synthetic few-shot datasets with a planted two-hop pattern.
//!
//! Every background relation is a random total function on entities. Each
//! task relation is the composition of two background relations, so the
//! true tail of `(h, r, ?)` is always reachable from `h` in two hops of the
//! clean graph. Compositions are dealt out in a shuffled order (distinct
//! relation pairs first) and reused cyclically once exhausted, so with few
//! background relations several task relations share a pattern. A
//! `noise_rate` fraction of background edges is then rewired to random tails.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, GraphOptions, KnowledgeGraph, RelationId, TaskSet, Triple, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_background_relations: usize,
    pub n_task_relations: usize,
    pub k: usize,
    pub q: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Target size of each relation's candidate pool.
    pub candidate_pool: usize,
    pub dev_relations: usize,
    pub test_relations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_background_relations: 4,
            n_task_relations: 6,
            k: 5,
            q: 10,
            noise_rate: 0.1,
            seed: 11,
            candidate_pool: 50,
            dev_relations: 1,
            test_relations: 1,
        }
    }
}

/// Generated dataset before indexing, in generator id order.
#[derive(Clone, Debug)]
pub struct SyntheticKg {
    pub vocab: Vocab,
    pub background: Vec<Triple>,
    pub tasks: TaskSet,
    /// `(first, second)` background relation ids composed by each task relation.
    pub patterns: BTreeMap<RelationId, (RelationId, RelationId)>,
}

impl SyntheticKg {
    pub fn index(&self, options: GraphOptions) -> Result<KnowledgeGraph, DataError> {
        KnowledgeGraph::build(self.background.clone(), self.vocab.n_entities(), options)
    }
}

pub fn generate_synthetic_kg(cfg: &SynthConfig) -> Result<SyntheticKg, DataError> {
    let infeasible = |msg: String| Err(DataError::Infeasible(msg));
    if cfg.n_entities < 2 || cfg.n_background_relations == 0 || cfg.n_task_relations == 0 || cfg.k == 0 || cfg.q == 0 {
        return infeasible("all counts must be positive and n_entities >= 2".into());
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return infeasible(format!("noise rate {} outside [0, 1)", cfg.noise_rate));
    }
    let n_bg = cfg.n_background_relations;
    if cfg.dev_relations + cfg.test_relations >= cfg.n_task_relations {
        return infeasible("no task relations left for training".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_entities;
    let mut vocab = Vocab::new();
    for e in 0..n {
        vocab.intern_entity(&format!("ent_{e:04}"));
    }
    let bg: Vec<RelationId> = (0..n_bg)
        .map(|i| vocab.intern_relation(&format!("bg_{i}")))
        .collect::<Result<_, _>>()?;

    // maps[b][x] = tail of x under background relation b
    let maps: Vec<Vec<usize>> = (0..n_bg)
        .map(|_| {
            (0..n)
                .map(|x| {
                    let mut t = rng.random_range(0..n - 1);
                    if t >= x {
                        t += 1;
                    }
                    t
                })
                .collect()
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..n_bg).flat_map(|a| (0..n_bg).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    // distinct-relation compositions first
    pairs.sort_by_key(|&(a, b)| a == b);
    let pairs: Vec<(usize, usize)> = pairs.iter().copied().cycle().take(cfg.n_task_relations).collect();

    let per_task = cfg.k + cfg.q;
    let mut split_maps: [BTreeMap<RelationId, Vec<Triple>>; 3] = Default::default();
    let mut candidates = BTreeMap::new();
    let mut patterns = BTreeMap::new();
    let n_train = cfg.n_task_relations - cfg.dev_relations - cfg.test_relations;
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let relation = vocab.intern_relation(&format!("task_{i}"))?;
        let mut heads: Vec<usize> = (0..n).filter(|&h| maps[b][maps[a][h]] != h).collect();
        if heads.len() < per_task {
            return infeasible(format!(
                "task_{i} admits {} triples, needs K+Q = {per_task}",
                heads.len()
            ));
        }
        heads.shuffle(&mut rng);
        heads.truncate(per_task);
        let triples: Vec<Triple> = heads
            .iter()
            .map(|&h| Triple {
                head: h,
                relation,
                tail: maps[b][maps[a][h]],
            })
            .collect();
        let mut pool: BTreeSet<usize> = triples.iter().map(|t| t.tail).collect();
        let mut others: Vec<usize> = (0..n).filter(|e| !pool.contains(e)).collect();
        others.shuffle(&mut rng);
        let extra = cfg.candidate_pool.saturating_sub(pool.len());
        pool.extend(others.into_iter().take(extra));
        candidates.insert(relation, pool.into_iter().collect::<Vec<_>>());
        patterns.insert(relation, (bg[a], bg[b]));
        let slot = if i < n_train {
            0
        } else if i < n_train + cfg.dev_relations {
            1
        } else {
            2
        };
        split_maps[slot].insert(relation, triples);
    }

    let mut background: Vec<Triple> = (0..n_bg)
        .flat_map(|b| {
            let rel = bg[b];
            maps[b].iter().enumerate().map(move |(h, &t)| Triple {
                head: h,
                relation: rel,
                tail: t,
            })
        })
        .collect();
    let n_noisy = (cfg.noise_rate * background.len() as f64).round() as usize;
    for idx in rand::seq::index::sample(&mut rng, background.len(), n_noisy).into_vec() {
        let t = &mut background[idx];
        loop {
            let cand = rng.random_range(0..n);
            if cand != t.head && cand != t.tail {
                t.tail = cand;
                break;
            }
        }
    }
    let mut seen = HashSet::new();
    background.retain(|t| seen.insert(*t));

    let [train, dev, test] = split_maps;
    let tasks = TaskSet::new(train, dev, test, candidates, &vocab)?;
    Ok(SyntheticKg {
        vocab,
        background,
        tasks,
        patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{write_background_graph, write_tasks, Split};

    #[test]
    fn clean_graph_realizes_the_pattern() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let kg = generate_synthetic_kg(&cfg).unwrap();
        let facts: HashSet<Triple> = kg.background.iter().copied().collect();
        for t in kg.tasks.all_triples() {
            let (a, b) = kg.patterns[&t.relation];
            let reachable = (0..cfg.n_entities).any(|x| {
                facts.contains(&Triple { head: t.head, relation: a, tail: x })
                    && facts.contains(&Triple { head: x, relation: b, tail: t.tail })
            });
            assert!(reachable, "{t:?}");
        }
    }

    #[test]
    fn triple_counts_per_task_relation() {
        let cfg = SynthConfig {
            n_entities: 200,
            n_background_relations: 4,
            n_task_relations: 6,
            k: 5,
            q: 10,
            noise_rate: 0.1,
            ..SynthConfig::default()
        };
        let kg = generate_synthetic_kg(&cfg).unwrap();
        let mut n_rel = 0;
        for split in Split::ALL {
            for triples in kg.tasks.split(split).values() {
                assert_eq!(triples.len(), 15);
                n_rel += 1;
            }
        }
        assert_eq!(n_rel, 6);
        assert_eq!(kg.tasks.split(Split::Test).len(), 1);
        assert_eq!(kg.tasks.split(Split::Dev).len(), 1);
        for pool in kg.tasks.all_candidates().values() {
            assert_eq!(pool.len(), 50);
        }
    }

    #[test]
    fn identical_seed_gives_identical_files() {
        let render = || {
            let kg = generate_synthetic_kg(&SynthConfig::default()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_background_graph(dir.path(), &kg.vocab, &kg.background).unwrap();
            write_tasks(dir.path(), &kg.vocab, &kg.tasks).unwrap();
            let mut files = Vec::new();
            for name in ["path_graph", "train_tasks.json", "dev_tasks.json", "test_tasks.json", "rel2candidates.json"] {
                files.push(std::fs::read(dir.path().join(name)).unwrap());
            }
            files
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn compositions_are_reused_cyclically() {
        let cfg = SynthConfig {
            n_background_relations: 2,
            n_task_relations: 6,
            ..SynthConfig::default()
        };
        let kg = generate_synthetic_kg(&cfg).unwrap();
        let pats: Vec<_> = kg.patterns.values().copied().collect();
        assert_eq!(pats.len(), 6);
        assert_eq!(pats[4], pats[0]);
        assert_eq!(pats[5], pats[1]);
        assert!(pats[..2].iter().all(|(a, b)| a != b));
        let distinct: std::collections::HashSet<_> = pats.iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn infeasible_counts_rejected() {
        let too_few = SynthConfig {
            n_entities: 10,
            q: 20,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_kg(&too_few), Err(DataError::Infeasible(_))));
        let noisy = SynthConfig {
            noise_rate: 1.0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_kg(&noisy).is_err());
    }
}
