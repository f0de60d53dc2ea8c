use std::collections::HashMap;

use super::{DataError, EntityId, RelationId};

/// Suffix naming the inverse of every relation.
pub const INVERSE_SUFFIX: &str = "_inv";

/// Dense name ↔ id maps for entities and relations.
///
/// Every relation is registered together with its inverse: relation `k`
/// (in registration order) gets id `2k` and its inverse `2k + 1`, so ids
/// stay dense when task files introduce relations after the background
/// graph has been indexed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count including inverses.
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(name.to_owned());
        self.entity_ids.insert(name.to_owned(), id);
        id
    }

    /// Registers `name` and `name_inv`, returning the forward id.
    pub fn intern_relation(&mut self, name: &str) -> Result<RelationId, DataError> {
        if let Some(&id) = self.relation_ids.get(name) {
            if is_inverse(id) {
                return Err(DataError::RelationNameClash(name.to_owned()));
            }
            return Ok(id);
        }
        let inverse_name = format!("{name}{INVERSE_SUFFIX}");
        if self.relation_ids.contains_key(&inverse_name) {
            return Err(DataError::RelationNameClash(inverse_name));
        }
        let id = self.relations.len();
        self.relations.push(name.to_owned());
        self.relations.push(inverse_name.clone());
        self.relation_ids.insert(name.to_owned(), id);
        self.relation_ids.insert(inverse_name, id + 1);
        Ok(id)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }
}

pub fn inverse(r: RelationId) -> RelationId {
    r ^ 1
}

pub fn is_inverse(r: RelationId) -> bool {
    r & 1 == 1
}
