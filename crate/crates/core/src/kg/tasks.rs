use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use super::{DataError, EntityId, RelationId, Triple, Vocab};

pub const TRAIN_TASKS: &str = "train_tasks.json";
pub const DEV_TASKS: &str = "dev_tasks.json";
pub const TEST_TASKS: &str = "test_tasks.json";
pub const CANDIDATES: &str = "rel2candidates.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_TASKS,
            Split::Dev => DEV_TASKS,
            Split::Test => TEST_TASKS,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "validation" | "val" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Few-shot tasks per split plus per-relation candidate tails.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSet {
    splits: [BTreeMap<RelationId, Vec<Triple>>; 3],
    candidates: BTreeMap<RelationId, Vec<EntityId>>,
}

impl TaskSet {
    /// Validates disjointness, key consistency, and candidate coverage.
    pub fn new(
        train: BTreeMap<RelationId, Vec<Triple>>,
        dev: BTreeMap<RelationId, Vec<Triple>>,
        test: BTreeMap<RelationId, Vec<Triple>>,
        candidates: BTreeMap<RelationId, Vec<EntityId>>,
        vocab: &Vocab,
    ) -> Result<Self, DataError> {
        let set = Self {
            splits: [train, dev, test],
            candidates,
        };
        set.validate(vocab)?;
        Ok(set)
    }

    fn validate(&self, vocab: &Vocab) -> Result<(), DataError> {
        let mut owner: BTreeMap<RelationId, Split> = BTreeMap::new();
        for split in Split::ALL {
            for (&r, triples) in self.split(split) {
                if let Some(prev) = owner.insert(r, split) {
                    return Err(DataError::SplitOverlap {
                        relation: vocab.relation_name(r).to_owned(),
                        first: prev,
                        second: split,
                    });
                }
                if let Some(t) = triples.iter().find(|t| t.relation != r) {
                    return Err(DataError::Invalid(format!(
                        "triple under '{}' has relation '{}'",
                        vocab.relation_name(r),
                        vocab.relation_name(t.relation)
                    )));
                }
                let pool = self
                    .candidates
                    .get(&r)
                    .ok_or_else(|| DataError::MissingCandidates(vocab.relation_name(r).to_owned()))?;
                if pool.is_empty() {
                    return Err(DataError::MissingCandidates(vocab.relation_name(r).to_owned()));
                }
                let pool: HashSet<_> = pool.iter().collect();
                if let Some(t) = triples.iter().find(|t| !pool.contains(&t.tail)) {
                    return Err(DataError::TailNotCandidate {
                        relation: vocab.relation_name(r).to_owned(),
                        tail: vocab.entity_name(t.tail).to_owned(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &BTreeMap<RelationId, Vec<Triple>> {
        &self.splits[split as usize]
    }

    pub fn candidates(&self, relation: RelationId) -> Option<&[EntityId]> {
        self.candidates.get(&relation).map(Vec::as_slice)
    }

    pub fn all_candidates(&self) -> &BTreeMap<RelationId, Vec<EntityId>> {
        &self.candidates
    }

    /// Triples of `relation` in whichever split holds it.
    pub fn triples(&self, relation: RelationId) -> Option<&[Triple]> {
        self.splits.iter().find_map(|s| s.get(&relation)).map(Vec::as_slice)
    }

    pub fn split_of(&self, relation: RelationId) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.split(s).contains_key(&relation))
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.splits.iter().flat_map(|s| s.values().flatten())
    }
}

fn read_json(dir: &Path, name: &str) -> Result<Map<String, Value>, DataError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(DataError::JsonShape {
            path,
            detail: "top level must be an object".into(),
        }),
        Err(e) => Err(DataError::JsonShape {
            path,
            detail: e.to_string(),
        }),
    }
}

fn as_str<'a>(v: &'a Value, path: &Path, what: &str) -> Result<&'a str, DataError> {
    v.as_str().ok_or_else(|| DataError::JsonShape {
        path: path.to_owned(),
        detail: format!("{what} must be a string, got {v}"),
    })
}

fn parse_split(
    dir: &Path,
    split: Split,
    vocab: &mut Vocab,
) -> Result<BTreeMap<RelationId, Vec<Triple>>, DataError> {
    let path = dir.join(split.file_name());
    let map = read_json(dir, split.file_name())?;
    let mut out = BTreeMap::new();
    for (rel_name, arr) in &map {
        let relation = vocab.intern_relation(rel_name)?;
        let items = arr.as_array().ok_or_else(|| DataError::JsonShape {
            path: path.clone(),
            detail: format!("'{rel_name}' must map to an array"),
        })?;
        let mut triples = Vec::with_capacity(items.len());
        for item in items {
            let parts = item.as_array().filter(|p| p.len() == 3).ok_or_else(|| DataError::JsonShape {
                path: path.clone(),
                detail: format!("'{rel_name}' entries must be [head, relation, tail], got {item}"),
            })?;
            let head = vocab.intern_entity(as_str(&parts[0], &path, "head")?);
            let r = vocab.intern_relation(as_str(&parts[1], &path, "relation")?)?;
            let tail = vocab.intern_entity(as_str(&parts[2], &path, "tail")?);
            triples.push(Triple { head, relation: r, tail });
        }
        out.insert(relation, triples);
    }
    Ok(out)
}

/// Loads the three task splits and `rel2candidates.json`, extending `vocab`
/// with any task-only names.
pub fn load_tasks(dir: &Path, vocab: &mut Vocab) -> Result<TaskSet, DataError> {
    let train = parse_split(dir, Split::Train, vocab)?;
    let dev = parse_split(dir, Split::Dev, vocab)?;
    let test = parse_split(dir, Split::Test, vocab)?;
    let path = dir.join(CANDIDATES);
    let raw = read_json(dir, CANDIDATES)?;
    let task_relations: HashSet<RelationId> = train.keys().chain(dev.keys()).chain(test.keys()).copied().collect();
    let mut candidates = BTreeMap::new();
    for (rel_name, arr) in &raw {
        let items = arr.as_array().ok_or_else(|| DataError::JsonShape {
            path: path.clone(),
            detail: format!("'{rel_name}' must map to an array"),
        })?;
        // candidate lists for relations without tasks are ignored
        let Some(relation) = vocab.relation_id(rel_name).filter(|r| task_relations.contains(r)) else {
            continue;
        };
        let mut pool = Vec::with_capacity(items.len());
        let mut seen = HashSet::new();
        for item in items {
            let e = vocab.intern_entity(as_str(item, &path, "candidate")?);
            if seen.insert(e) {
                pool.push(e);
            }
        }
        candidates.insert(relation, pool);
    }
    TaskSet::new(train, dev, test, candidates, vocab)
}

/// Writes the three split files and the candidate file.
pub fn write_tasks(dir: &Path, vocab: &Vocab, tasks: &TaskSet) -> Result<(), DataError> {
    let write = |name: &str, value: Value| -> Result<(), DataError> {
        let path = dir.join(name);
        let mut text = serde_json::to_string_pretty(&value).expect("json values serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|source| DataError::Io { path, source })
    };
    for split in Split::ALL {
        let mut map = Map::new();
        for (&r, triples) in tasks.split(split) {
            let arr = triples
                .iter()
                .map(|t| {
                    Value::from(vec![
                        vocab.entity_name(t.head),
                        vocab.relation_name(t.relation),
                        vocab.entity_name(t.tail),
                    ])
                })
                .collect();
            map.insert(vocab.relation_name(r).to_owned(), Value::Array(arr));
        }
        write(split.file_name(), Value::Object(map))?;
    }
    let mut map = Map::new();
    for (&r, pool) in tasks.all_candidates() {
        let names: Vec<&str> = pool.iter().map(|&e| vocab.entity_name(e)).collect();
        map.insert(vocab.relation_name(r).to_owned(), Value::from(names));
    }
    write(CANDIDATES, Value::Object(map))
}
