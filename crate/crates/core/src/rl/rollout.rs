use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{softmax_scores, PolicyParams};
use super::reward::episode_return;
use super::{ReasoningChain, TrainConfig};
use crate::embeddings::{GraphVectors, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, KnowledgeGraph, QuestionContext, RelationId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateAction {
    pub rel: RelationId,
    pub tail: EntityId,
}

/// `(e_current, e_target - e_current)`.
pub fn state_vector(current: &[f32], target: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(current.len() * 2);
    s.extend(current.iter().map(|&x| x as f64));
    s.extend(current.iter().zip(target).map(|(&c, &t)| t - c as f64));
    s
}

/// `(relation vector, tail vector)`.
pub fn action_feature(a: &CandidateAction, vectors: &GraphVectors<'_>) -> Result<Vec<f64>> {
    let r = vectors.relation(a.rel)?;
    let t = vectors.entity(a.tail)?;
    Ok(r.iter().chain(t).map(|&x| x as f64).collect())
}

/// Unvisited neighbors of `current`, first occurrence of each `(rel, tail)`.
pub fn candidate_actions(
    g: &KnowledgeGraph,
    current: EntityId,
    visited: &HashSet<EntityId>,
    direction: Direction,
) -> Vec<CandidateAction> {
    let mut seen = HashSet::new();
    g.neighbor_iter(current, direction)
        .filter(|(_, t)| !visited.contains(t))
        .filter(|pair| seen.insert(*pair))
        .map(|(rel, tail)| CandidateAction { rel, tail })
        .collect()
}

/// One decision of an episode, kept for the policy-gradient update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Vec<f64>,
    /// Candidate features, `n x action_dim`, flattened.
    pub features: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

pub enum Sampling<'r> {
    Sample(&'r mut dyn RngCore),
    Greedy,
}

/// Mean of the target vectors; every target must be embedded.
pub(crate) fn target_vector(targets: &[EntityId], vectors: &GraphVectors<'_>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; vectors.dim()];
    for &t in targets {
        for (a, &x) in acc.iter_mut().zip(vectors.entity(t)?) {
            *a += x as f64;
        }
    }
    let n = targets.len().max(1) as f64;
    Ok(acc.into_iter().map(|x| x / n).collect())
}

/// Walk at most `cfg.max_steps` actions from `source`, never revisiting an
/// entity. Stops on any target or at a dead end. Rewards are left unset.
pub fn sample_rollout(
    g: &KnowledgeGraph,
    vectors: &GraphVectors<'_>,
    policy: &PolicyParams,
    source: EntityId,
    targets: &[EntityId],
    cfg: &TrainConfig,
    mut sampling: Sampling<'_>,
) -> Result<(ReasoningChain, Trajectory)> {
    g.check_entity(source)?;
    let target_set: HashSet<EntityId> = targets.iter().copied().collect();
    let mut trajectory = Trajectory::default();
    if target_set.contains(&source) {
        let mut chain = ReasoningChain::from_hops(g, source, &[]);
        chain.reached_target = true;
        return Ok((chain, trajectory));
    }
    let target_vec = target_vector(targets, vectors)?;
    let mut visited = HashSet::from([source]);
    let mut hops: Vec<(RelationId, EntityId)> = Vec::new();
    let mut current = source;
    let mut reached = false;
    let da = policy.action_dim();
    for _ in 0..cfg.max_steps {
        let actions = candidate_actions(g, current, &visited, cfg.direction);
        if actions.is_empty() {
            break;
        }
        let state = state_vector(vectors.entity(current)?, &target_vec);
        let mut features = Vec::with_capacity(actions.len() * da);
        for a in &actions {
            features.extend(action_feature(a, vectors)?);
        }
        if features.len() != actions.len() * da {
            return Err(Error::DimensionMismatch {
                expected: da,
                actual: features.len() / actions.len(),
            });
        }
        let (_, head) = policy.head(&state);
        let probs = softmax_scores(&features, &head, None);
        let chosen = match &mut sampling {
            Sampling::Greedy => argmax(&probs),
            Sampling::Sample(rng) => sample_index(&probs, rng.random::<f64>()),
        };
        trajectory.steps.push(StepRecord {
            state,
            features,
            chosen,
        });
        let a = actions[chosen];
        hops.push((a.rel, a.tail));
        visited.insert(a.tail);
        current = a.tail;
        if target_set.contains(&current) {
            reached = true;
            break;
        }
    }
    let mut chain = ReasoningChain::from_hops(g, source, &hops);
    chain.reached_target = reached;
    Ok((chain, trajectory))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

pub(crate) fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Best chain per `(source, choice)` pair: `n_rollouts` sampled walks plus one
/// greedy walk toward each choice's targets, keeping the highest return.
/// Identical walks are reported once.
#[allow(clippy::too_many_arguments)]
pub fn extract_paths(
    g: &KnowledgeGraph,
    vectors: &GraphVectors<'_>,
    policy: &PolicyParams,
    q: &QuestionContext,
    context: Option<&[f32]>,
    w: &ProjectionMatrix,
    cfg: &TrainConfig,
    n_rollouts: usize,
) -> Result<Vec<ReasoningChain>> {
    let mut out: Vec<ReasoningChain> = Vec::new();
    for &source in &q.source_entities {
        if vectors.try_entity(source).is_none() {
            log::debug!("{}: source {} has no embedding", q.id, g.entity_name(source));
            continue;
        }
        for choice in &q.choices {
            let targets: Vec<EntityId> = q
                .targets_for(&choice.label)
                .iter()
                .copied()
                .filter(|&t| vectors.try_entity(t).is_some())
                .collect();
            if targets.is_empty() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[q.id.as_bytes(), &source.0.to_le_bytes(), choice.label.as_bytes()],
            ));
            let mut best: Option<ReasoningChain> = None;
            for i in 0..=n_rollouts {
                let sampling = if i == n_rollouts {
                    Sampling::Greedy
                } else {
                    Sampling::Sample(&mut rng)
                };
                let (mut chain, _) = sample_rollout(g, vectors, policy, source, &targets, cfg, sampling)?;
                chain.rewards = episode_return(&chain, cfg, context, w, vectors)?;
                if best.as_ref().map_or(true, |b| chain.rewards.total > b.rewards.total) {
                    best = Some(chain);
                }
            }
            if let Some(chain) = best {
                if !out.iter().any(|c| c.same_path(&chain)) {
                    out.push(chain);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingTable;
    use crate::kg::GraphBuilder;

    #[test]
    fn state_vector_examples() {
        assert_eq!(state_vector(&[0.5, 0.5], &[1.0, 0.0]), vec![0.5, 0.5, 0.5, -0.5]);
        let s = state_vector(&[0.25, -1.0, 2.0], &[0.25, -1.0, 2.0]);
        assert_eq!(s.len(), 6);
        assert!(s[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn action_feature_concatenates() {
        let mut b = GraphBuilder::new();
        b.add("h", "r", "t");
        let g = b.build();
        let table = EmbeddingTable::new(
            2,
            vec!["h".into(), "r".into(), "t".into()],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let v = GraphVectors::new(&g, &table);
        let a = CandidateAction {
            rel: g.relation_id("r").unwrap(),
            tail: g.entity_id("t").unwrap(),
        };
        assert_eq!(action_feature(&a, &v).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let z = CandidateAction {
            rel: a.rel,
            tail: g.entity_id("h").unwrap(),
        };
        assert_eq!(action_feature(&z, &v).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sampling_follows_cumulative_mass() {
        assert_eq!(sample_index(&[0.2, 0.3, 0.5], 0.1), 0);
        assert_eq!(sample_index(&[0.2, 0.3, 0.5], 0.45), 1);
        assert_eq!(sample_index(&[0.2, 0.3, 0.5], 0.999_999_999), 2);
        assert_eq!(sample_index(&[0.5, 0.5, 0.0], 1.0), 1);
        assert_eq!(argmax(&[0.3, 0.3, 0.2]), 0);
    }
}
