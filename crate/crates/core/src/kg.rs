//! Immutable in-memory knowledge graph with forward/backward adjacency.
//!
//! Entities and relations get dense ids in first-appearance order. Names are
//! matched after normalization (lowercase, spaces to underscores) but the
//! first spelling seen is kept for display.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }

    pub fn touches(&self, e: EntityId) -> bool {
        self.head == e || self.tail == e
    }
}

/// Which adjacency lists a traversal may follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    #[default]
    Both,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            "both" => Ok(Direction::Both),
            other => Err(Error::InvalidArgument(format!("unknown direction `{other}`"))),
        }
    }
}

/// Lowercase and replace spaces with underscores.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase().replace(' ', "_")
}

/// Counters collected while loading a triple file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: usize,
    pub comments: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone, Default)]
struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn intern(&mut self, name: &str) -> u32 {
        let key = normalize_name(name);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.trim().to_string());
        self.index.insert(key, id);
        id
    }

    fn lookup(&self, name: &str) -> Option<u32> {
        self.index.get(&normalize_name(name)).copied()
    }
}

/// Incrementally collects triples by name; `build` freezes the graph.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    duplicates: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register an entity without adding an edge (isolated vertex).
    pub fn entity(&mut self, name: &str) -> EntityId {
        EntityId(self.entities.intern(name))
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        RelationId(self.relations.intern(name))
    }

    /// Returns false when the triple was already present.
    pub fn add(&mut self, head: &str, rel: &str, tail: &str) -> bool {
        let h = self.entity(head);
        let r = self.relation(rel);
        let t = self.entity(tail);
        self.add_ids(h, r, t)
    }

    pub fn add_ids(&mut self, head: EntityId, rel: RelationId, tail: EntityId) -> bool {
        let triple = Triple::new(head, rel, tail);
        if self.seen.insert(triple) {
            self.triples.push(triple);
            true
        } else {
            self.duplicates += 1;
            false
        }
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn build(self) -> KnowledgeGraph {
        let n = self.entities.names.len();
        let mut fwd_adj = vec![Vec::new(); n];
        let mut bwd_adj = vec![Vec::new(); n];
        for t in &self.triples {
            fwd_adj[t.head.index()].push((t.rel, t.tail));
            bwd_adj[t.tail.index()].push((t.rel, t.head));
        }
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            fwd_adj,
            bwd_adj,
        }
    }
}

/// Immutable triple store. Safe to share across threads by reference.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    fwd_adj: Vec<Vec<(RelationId, EntityId)>>,
    bwd_adj: Vec<Vec<(RelationId, EntityId)>>,
}

/// Result of resolving surface names against the entity vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkResult {
    pub ids: Vec<EntityId>,
    pub unresolved: Vec<String>,
}

impl KnowledgeGraph {
    /// Load a TAB-separated `head<TAB>relation<TAB>tail` file.
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<(Self, LoadStats)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut builder = GraphBuilder::new();
        let mut stats = LoadStats::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with('#') {
                stats.comments += 1;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "empty field".to_string(),
                });
            }
            stats.lines += 1;
            builder.add(fields[0], fields[1], fields[2]);
        }
        if builder.triple_count() == 0 {
            return Err(Error::EmptyGraph(path.to_path_buf()));
        }
        stats.duplicates = builder.duplicates;
        if stats.duplicates > 0 {
            log::debug!("{}: dropped {} duplicate triples", path.display(), stats.duplicates);
        }
        Ok((builder.build(), stats))
    }

    pub fn entity_count(&self) -> usize {
        self.entities.names.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.names.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities.names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations.names
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities.names[e.index()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relations.names[r.index()]
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.lookup(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.lookup(name).map(RelationId)
    }

    pub fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.entity_count() {
            Ok(())
        } else {
            Err(Error::InvalidEntity(e.index()))
        }
    }

    pub fn forward(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.fwd_adj[e.index()]
    }

    pub fn backward(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.bwd_adj[e.index()]
    }

    /// Neighbors in insertion order; `Both` lists forward entries first.
    pub fn neighbors(&self, e: EntityId, direction: Direction) -> Result<Vec<(RelationId, EntityId)>> {
        self.check_entity(e)?;
        Ok(self.neighbor_iter(e, direction).collect())
    }

    pub(crate) fn neighbor_iter(
        &self,
        e: EntityId,
        direction: Direction,
    ) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        let fwd: &[_] = match direction {
            Direction::Forward | Direction::Both => &self.fwd_adj[e.index()],
            Direction::Backward => &[],
        };
        let bwd: &[_] = match direction {
            Direction::Backward | Direction::Both => &self.bwd_adj[e.index()],
            Direction::Forward => &[],
        };
        fwd.iter().chain(bwd.iter()).copied()
    }

    /// The stored triple behind a traversal step from `from` along `(rel, to)`.
    pub fn oriented_triple(&self, from: EntityId, rel: RelationId, to: EntityId) -> Triple {
        let forward = Triple::new(from, rel, to);
        if self.fwd_adj[from.index()].contains(&(rel, to)) {
            forward
        } else {
            Triple::new(to, rel, from)
        }
    }

    /// Resolve names case-insensitively with spaces treated as underscores.
    pub fn link_entities<S: AsRef<str>>(&self, names: &[S]) -> LinkResult {
        let mut out = LinkResult::default();
        for name in names {
            match self.entity_id(name.as_ref()) {
                Some(id) => out.ids.push(id),
                None => out.unresolved.push(name.as_ref().to_string()),
            }
        }
        out
    }
}

/// A multiple-choice question with its linked entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionContext {
    pub id: String,
    pub question_text: String,
    pub choices: Vec<Choice>,
    pub gold_label: Option<String>,
    pub source_entities: Vec<EntityId>,
    pub target_entities: BTreeMap<String, Vec<EntityId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

impl QuestionContext {
    pub fn labels(&self) -> Vec<&str> {
        self.choices.iter().map(|c| c.label.as_str()).collect()
    }

    /// Targets for one choice (empty when the label has none).
    pub fn targets_for(&self, label: &str) -> &[EntityId] {
        self.target_entities.get(label).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Union of targets over all choices, in choice order, deduplicated.
    pub fn all_targets(&self) -> Vec<EntityId> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for c in &self.choices {
            for &e in self.targets_for(&c.label) {
                if seen.insert(e) {
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn validate(&self, g: &KnowledgeGraph) -> Result<()> {
        let mut labels = HashSet::new();
        for c in &self.choices {
            if !labels.insert(c.label.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "question {}: duplicate choice label {}",
                    self.id, c.label
                )));
            }
        }
        if let Some(gold) = &self.gold_label {
            if !labels.contains(gold.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "question {}: gold label {gold} is not a choice",
                    self.id
                )));
            }
        }
        for &e in self.source_entities.iter().chain(self.target_entities.values().flatten()) {
            g.check_entity(e)?;
        }
        Ok(())
    }
}
