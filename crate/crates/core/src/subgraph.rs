//! Heuristic two-hop subgraph extraction with embedding-based pruning.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, GraphVectors};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, QuestionContext, Triple};

/// Default node budget after pruning.
pub const DEFAULT_NODE_BUDGET: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeTag {
    Topic,
    Answer,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Subgraph {
    pub nodes: BTreeSet<EntityId>,
    pub node_tags: BTreeMap<EntityId, NodeTag>,
    pub edges: BTreeSet<Triple>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceScore {
    pub entity: EntityId,
    pub score: f64,
}

/// Outcome of pruning, including whether the protected set alone exceeded `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub subgraph: Subgraph,
    pub scores: Vec<RelevanceScore>,
    pub over_budget: bool,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tag(&self, e: EntityId) -> Option<NodeTag> {
        self.node_tags.get(&e).copied()
    }

    pub fn protected(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.node_tags
            .iter()
            .filter(|(_, t)| **t != NodeTag::Bridge)
            .map(|(e, _)| *e)
    }

    /// Keep only `keep` nodes and the edges among them.
    fn restrict(&self, keep: &BTreeSet<EntityId>) -> Subgraph {
        Subgraph {
            nodes: keep.clone(),
            node_tags: self
                .node_tags
                .iter()
                .filter(|(e, _)| keep.contains(e))
                .map(|(e, t)| (*e, *t))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|t| keep.contains(&t.head) && keep.contains(&t.tail))
                .copied()
                .collect(),
        }
    }
}

/// All triples of `g` with both endpoints in `nodes`.
pub fn induced_edges(g: &KnowledgeGraph, nodes: &BTreeSet<EntityId>) -> BTreeSet<Triple> {
    let mut edges = BTreeSet::new();
    for &h in nodes {
        for &(rel, tail) in g.forward(h) {
            if nodes.contains(&tail) {
                edges.insert(Triple::new(h, rel, tail));
            }
        }
    }
    edges
}

/// Topic nodes are the question's sources and answer nodes the targets of
/// every choice; bridges are other entities adjacent (either direction) to at
/// least two distinct topic/answer nodes.
pub fn extract_two_hop(g: &KnowledgeGraph, q: &QuestionContext) -> Result<Subgraph> {
    let mut tags: BTreeMap<EntityId, NodeTag> = BTreeMap::new();
    for &e in &q.source_entities {
        g.check_entity(e)?;
        tags.insert(e, NodeTag::Topic);
    }
    for e in q.all_targets() {
        g.check_entity(e)?;
        tags.entry(e).or_insert(NodeTag::Answer);
    }
    if tags.is_empty() {
        return Err(Error::EmptySubgraph(q.id.clone()));
    }

    // bridge candidate -> first anchor seen, flipped to None once a second distinct one shows up
    let mut anchors: HashMap<EntityId, Option<EntityId>> = HashMap::new();
    for &anchor in tags.keys() {
        for (_, x) in g.neighbor_iter(anchor, crate::kg::Direction::Both) {
            if tags.contains_key(&x) {
                continue;
            }
            match anchors.get(&x) {
                None => {
                    anchors.insert(x, Some(anchor));
                }
                Some(Some(first)) if *first != anchor => {
                    anchors.insert(x, None);
                }
                _ => {}
            }
        }
    }
    for (x, state) in anchors {
        if state.is_none() {
            tags.insert(x, NodeTag::Bridge);
        }
    }
    let nodes: BTreeSet<EntityId> = tags.keys().copied().collect();
    let edges = induced_edges(g, &nodes);
    Ok(Subgraph {
        nodes,
        node_tags: tags,
        edges,
    })
}

/// Keep every topic/answer node and the `k - protected` best-scoring bridges
/// (score = cosine to the context, 0 when unavailable; ties to lower id).
pub fn score_and_prune(
    sub: &Subgraph,
    context: Option<&[f32]>,
    vectors: &GraphVectors<'_>,
    k: usize,
) -> Result<Pruned> {
    let mut scores = Vec::with_capacity(sub.nodes.len());
    for &e in &sub.nodes {
        let score = match (context, vectors.try_entity(e)) {
            (Some(c), Some(v)) => cosine(v, c)?.value,
            _ => 0.0,
        };
        scores.push(RelevanceScore { entity: e, score });
    }
    if sub.nodes.len() <= k {
        return Ok(Pruned {
            subgraph: sub.clone(),
            scores,
            over_budget: false,
        });
    }
    let mut keep: BTreeSet<EntityId> = sub.protected().collect();
    let over_budget = keep.len() > k;
    if over_budget {
        log::warn!(
            "{} protected nodes exceed the budget of {k}; keeping them and no bridges",
            keep.len()
        );
    }
    let mut bridges: Vec<&RelevanceScore> = scores
        .iter()
        .filter(|s| sub.tag(s.entity) == Some(NodeTag::Bridge))
        .collect();
    bridges.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entity.cmp(&b.entity)));
    let budget = k.saturating_sub(keep.len());
    keep.extend(bridges.iter().take(budget).map(|s| s.entity));
    Ok(Pruned {
        subgraph: sub.restrict(&keep),
        scores,
        over_budget,
    })
}

/// Edges touching topic nodes first, then answer nodes, then the rest, each
/// group in id order; truncated to `max_triples`.
pub fn to_triples(sub: &Subgraph, max_triples: usize) -> Vec<Triple> {
    let rank = |t: &Triple| {
        let tags = [sub.tag(t.head), sub.tag(t.tail)];
        if tags.contains(&Some(NodeTag::Topic)) {
            0
        } else if tags.contains(&Some(NodeTag::Answer)) {
            1
        } else {
            2
        }
    };
    let mut edges: Vec<Triple> = sub.edges.iter().copied().collect();
    edges.sort_by_key(|t| (rank(t), *t));
    edges.truncate(max_triples);
    edges
}
