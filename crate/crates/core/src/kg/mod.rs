//! Knowledge-graph storage: vocabulary, background graph with a capped
//! neighbor index, few-shot task splits, and dataset I/O.

mod graph;
mod synth;
mod tasks;
mod vocab;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use graph::{load_background_graph, write_background_graph, Edge, GraphOptions, KnowledgeGraph, TripleIndex, PATH_GRAPH};
pub use synth::{generate_synthetic_kg, SynthConfig, SyntheticKg};
pub use tasks::{load_tasks, write_tasks, Split, TaskSet, CANDIDATES, DEV_TASKS, TEST_TASKS, TRAIN_TASKS};
pub use vocab::{inverse, is_inverse, Vocab, INVERSE_SUFFIX};

pub type EntityId = usize;
pub type RelationId = usize;

/// Optional pretrained entity vectors.
pub const ENT2VEC: &str = "ent2vec.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 3 tab-separated fields, found {fields}")]
    MalformedLine { path: PathBuf, line: usize, fields: usize },
    #[error("{0}: background graph is empty")]
    EmptyGraph(PathBuf),
    #[error("{path}: unexpected JSON shape: {detail}")]
    JsonShape { path: PathBuf, detail: String },
    #[error("split overlap: relation '{relation}' appears in both {first} and {second}")]
    SplitOverlap { relation: String, first: Split, second: Split },
    #[error("no candidate list for task relation '{0}'")]
    MissingCandidates(String),
    #[error("true tail '{tail}' of relation '{relation}' is not among its candidates")]
    TailNotCandidate { relation: String, tail: String },
    #[error("relation name '{0}' collides with a generated inverse relation")]
    RelationNameClash(String),
    #[error("infeasible synthetic dataset: {0}")]
    Infeasible(String),
    #[error("{path}:{line}: {detail}")]
    BadVector { path: PathBuf, line: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// Everything loaded from one data directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub graph: KnowledgeGraph,
    pub tasks: TaskSet,
    pub pretrained: Option<HashMap<EntityId, Vec<f64>>>,
}

impl Dataset {
    /// Loads `path_graph`, the task files, and `ent2vec.tsv` when present.
    pub fn load(dir: &Path, options: GraphOptions, dim: usize) -> Result<Self, DataError> {
        if !dir.is_dir() {
            return Err(DataError::Io {
                path: dir.to_owned(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            });
        }
        let (mut vocab, graph) = load_background_graph(dir, options)?;
        let tasks = load_tasks(dir, &mut vocab)?;
        let vec_path = dir.join(ENT2VEC);
        let pretrained = if vec_path.exists() {
            Some(load_ent2vec(&vec_path, &vocab, dim)?)
        } else {
            None
        };
        Ok(Self {
            vocab,
            graph,
            tasks,
            pretrained,
        })
    }

    pub fn from_synthetic(kg: SyntheticKg, options: GraphOptions) -> Result<Self, DataError> {
        let graph = kg.index(options)?;
        Ok(Self {
            vocab: kg.vocab,
            graph,
            tasks: kg.tasks,
            pretrained: None,
        })
    }

    /// Background plus every task triple.
    pub fn known_triples(&self) -> TripleIndex {
        TripleIndex::new(self.graph.triples().iter().chain(self.tasks.all_triples()))
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_owned(),
            source,
        })?;
        write_background_graph(dir, &self.vocab, self.graph.triples())?;
        write_tasks(dir, &self.vocab, &self.tasks)
    }
}

/// Reads `name<TAB>v1 v2 ... vD` lines. Names missing from `vocab` are skipped.
pub fn load_ent2vec(path: &Path, vocab: &Vocab, dim: usize) -> Result<HashMap<EntityId, Vec<f64>>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let bad = |line: usize, detail: String| DataError::BadVector {
        path: path.to_owned(),
        line,
        detail,
    };
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once('\t')
            .ok_or_else(|| bad(n + 1, "missing tab after entity name".into()))?;
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| bad(n + 1, format!("'{v}': {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(bad(n + 1, format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(n + 1, "non-finite value".into()));
        }
        if let Some(id) = vocab.entity_id(name) {
            out.insert(id, values);
        }
    }
    Ok(out)
}
