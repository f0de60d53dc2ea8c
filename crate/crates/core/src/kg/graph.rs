use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::inverse;
use super::{DataError, EntityId, RelationId, Triple, Vocab};

pub const PATH_GRAPH: &str = "path_graph";

/// Index construction knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphOptions {
    /// Upper bound on stored (relation, neighbor) pairs per entity.
    pub neighbor_cap: usize,
    pub neighbor_seed: u64,
    pub inverse_edges: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            neighbor_cap: 50,
            neighbor_seed: 7,
            inverse_edges: true,
        }
    }
}

/// One adjacency entry: `neighbor ∈ 𝒩ᵢʳ` for the owning entity `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub relation: RelationId,
    pub neighbor: EntityId,
}

/// Background triples plus the capped per-entity neighbor index.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    adjacency: Vec<Vec<Edge>>,
    options: GraphOptions,
}

impl KnowledgeGraph {
    /// Deduplicates `triples` (first occurrence wins) and builds the index.
    pub fn build(triples: Vec<Triple>, n_entities: usize, options: GraphOptions) -> Result<Self, DataError> {
        if options.neighbor_cap == 0 {
            return Err(DataError::Invalid("neighbor cap must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(triples.len());
        let triples: Vec<Triple> = triples.into_iter().filter(|t| seen.insert(*t)).collect();
        let mut sets: Vec<BTreeSet<Edge>> = vec![BTreeSet::new(); n_entities];
        for t in &triples {
            if t.head >= n_entities || t.tail >= n_entities {
                return Err(DataError::Invalid(format!("triple {t:?} references an unknown entity")));
            }
            sets[t.head].insert(Edge {
                relation: t.relation,
                neighbor: t.tail,
            });
            if options.inverse_edges {
                sets[t.tail].insert(Edge {
                    relation: inverse(t.relation),
                    neighbor: t.head,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.neighbor_seed);
        let adjacency = sets
            .into_iter()
            .map(|set| {
                let all: Vec<Edge> = set.into_iter().collect();
                if all.len() <= options.neighbor_cap {
                    return all;
                }
                let mut keep = rand::seq::index::sample(&mut rng, all.len(), options.neighbor_cap).into_vec();
                keep.sort_unstable();
                keep.into_iter().map(|i| all[i]).collect()
            })
            .collect();
        Ok(Self {
            triples,
            adjacency,
            options,
        })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn options(&self) -> GraphOptions {
        self.options
    }

    /// Capped neighbors sorted by (relation, neighbor). Entities that only
    /// appear in task files have none.
    pub fn neighbors(&self, entity: EntityId) -> &[Edge] {
        self.adjacency.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn has_relation(&self, relation: RelationId) -> bool {
        self.triples
            .iter()
            .any(|t| t.relation == relation || inverse(t.relation) == relation)
    }

    /// Neighbor groups `(r, 𝒩ᵢʳ)` of `entity`, skipping `excluded` relations.
    pub fn groups<'a>(
        &'a self,
        entity: EntityId,
        excluded: &'a [RelationId],
    ) -> impl Iterator<Item = (RelationId, Vec<EntityId>)> + 'a {
        self.neighbors(entity)
            .chunk_by(|a, b| a.relation == b.relation)
            .filter(move |chunk| !excluded.contains(&chunk[0].relation))
            .map(|chunk| (chunk[0].relation, chunk.iter().map(|e| e.neighbor).collect()))
    }
}

/// Set of known-true `(head, relation, tail)` facts for filtering.
#[derive(Clone, Debug, Default)]
pub struct TripleIndex {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl TripleIndex {
    pub fn new<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut index = Self::default();
        for t in triples {
            index.insert(*t);
        }
        index
    }

    pub fn insert(&mut self, t: Triple) {
        self.tails.entry((t.head, t.relation)).or_default().insert(t.tail);
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails.get(&(t.head, t.relation)).is_some_and(|s| s.contains(&t.tail))
    }

    pub fn tails(&self, head: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.tails.get(&(head, relation))
    }
}

/// Reads `dir/path_graph` (tab-separated `head relation tail` lines).
pub fn load_background_graph(dir: &Path, options: GraphOptions) -> Result<(Vocab, KnowledgeGraph), DataError> {
    let path = dir.join(PATH_GRAPH);
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    let mut vocab = Vocab::new();
    let mut triples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::MalformedLine {
                path: path.clone(),
                line: n + 1,
                fields: fields.len(),
            });
        }
        let head = vocab.intern_entity(fields[0]);
        let relation = vocab.intern_relation(fields[1])?;
        let tail = vocab.intern_entity(fields[2]);
        triples.push(Triple { head, relation, tail });
    }
    if triples.is_empty() {
        return Err(DataError::EmptyGraph(path));
    }
    let graph = KnowledgeGraph::build(triples, vocab.n_entities(), options)?;
    Ok((vocab, graph))
}

/// Writes background triples in `path_graph` format.
pub fn write_background_graph(dir: &Path, vocab: &Vocab, triples: &[Triple]) -> Result<(), DataError> {
    let mut out = String::new();
    for t in triples {
        out.push_str(vocab.entity_name(t.head));
        out.push('\t');
        out.push_str(vocab.relation_name(t.relation));
        out.push('\t');
        out.push_str(vocab.entity_name(t.tail));
        out.push('\n');
    }
    let path = dir.join(PATH_GRAPH);
    fs::write(&path, out).map_err(|source| DataError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::vocab::is_inverse;

    fn write_graph(lines: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(PATH_GRAPH), lines).unwrap();
        dir
    }

    #[test]
    fn single_line_parse() {
        let dir = write_graph("concept:chicago_bulls\tsubPartOf\tconcept:nba\n");
        let (vocab, graph) = load_background_graph(dir.path(), GraphOptions::default()).unwrap();
        assert_eq!(vocab.n_entities(), 2);
        assert_eq!(graph.triples().len(), 1);
        let bulls = vocab.entity_id("concept:chicago_bulls").unwrap();
        let nba = vocab.entity_id("concept:nba").unwrap();
        let inv = vocab.relation_id("subPartOf_inv").unwrap();
        assert_eq!(
            graph.neighbors(nba),
            &[Edge {
                relation: inv,
                neighbor: bulls
            }]
        );
    }

    #[test]
    fn duplicates_collapse() {
        let dir = write_graph("a\tr\tb\na\tr\tb\nb\tr\ta\n");
        let (_, graph) = load_background_graph(dir.path(), GraphOptions::default()).unwrap();
        assert_eq!(graph.triples().len(), 2);
        for e in 0..2 {
            let n = graph.neighbors(e);
            let unique: HashSet<_> = n.iter().collect();
            assert_eq!(unique.len(), n.len());
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = write_graph("a\tr\tb\nbad line\n");
        match load_background_graph(dir.path(), GraphOptions::default()) {
            Err(DataError::MalformedLine { line, fields, .. }) => assert_eq!((line, fields), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_background_graph(dir.path(), GraphOptions::default()),
            Err(DataError::Io { .. })
        ));
        let dir = write_graph("\n");
        assert!(matches!(
            load_background_graph(dir.path(), GraphOptions::default()),
            Err(DataError::EmptyGraph(_))
        ));
    }

    fn hub_graph(n_spokes: usize, seed: u64) -> KnowledgeGraph {
        let triples = (1..=n_spokes)
            .map(|t| Triple {
                head: 0,
                relation: 2 * (t % 3),
                tail: t,
            })
            .collect();
        KnowledgeGraph::build(
            triples,
            n_spokes + 1,
            GraphOptions {
                neighbor_cap: 50,
                neighbor_seed: seed,
                inverse_edges: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn cap_is_deterministic_under_seed() {
        let a = hub_graph(120, 7);
        let b = hub_graph(120, 7);
        assert_eq!(a.neighbors(0).len(), 50);
        assert_eq!(a.neighbors(0), b.neighbors(0));
        let c = hub_graph(120, 8);
        assert_ne!(a.neighbors(0), c.neighbors(0));
        // retained set is a subset of the uncapped one
        for e in a.neighbors(0) {
            assert_eq!(e.neighbor % 3, e.relation / 2);
        }
    }

    #[test]
    fn inverse_symmetry_before_capping() {
        let triples = vec![
            Triple { head: 0, relation: 0, tail: 1 },
            Triple { head: 1, relation: 2, tail: 2 },
            Triple { head: 2, relation: 0, tail: 0 },
        ];
        let g = KnowledgeGraph::build(triples, 3, GraphOptions::default()).unwrap();
        for i in 0..3 {
            for e in g.neighbors(i) {
                let back = Edge {
                    relation: inverse(e.relation),
                    neighbor: i,
                };
                assert!(g.neighbors(e.neighbor).contains(&back));
                if !is_inverse(e.relation) {
                    assert!(g.triples().contains(&Triple {
                        head: i,
                        relation: e.relation,
                        tail: e.neighbor
                    }));
                }
            }
        }
    }

    #[test]
    fn groups_respect_exclusion() {
        let g = hub_graph(6, 1);
        let all: Vec<_> = g.groups(0, &[]).collect();
        assert_eq!(all.len(), 3);
        assert_eq!(all.iter().map(|(_, n)| n.len()).sum::<usize>(), 6);
        let some: Vec<_> = g.groups(0, &[2]).collect();
        assert_eq!(some.len(), 2);
        assert!(some.iter().all(|(r, _)| *r != 2));
    }

    #[test]
    fn reserialize_is_idempotent() {
        let dir = write_graph("a\tr\tb\nb\ts\tc\nc\tr\ta\na\tr\tb\n");
        let opts = GraphOptions {
            neighbor_cap: 2,
            neighbor_seed: 3,
            inverse_edges: true,
        };
        let (vocab, graph) = load_background_graph(dir.path(), opts).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_background_graph(out.path(), &vocab, graph.triples()).unwrap();
        let (vocab2, graph2) = load_background_graph(out.path(), opts).unwrap();
        assert_eq!(vocab, vocab2);
        assert_eq!(graph, graph2);
    }
}
