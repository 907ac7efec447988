//! Reinforcement-learned path extraction over the knowledge graph.
//!
//! An episode walks from a source entity toward a set of target entities.
//! The state pairs the current entity vector with the offset to the target,
//! actions are the unvisited neighbors, and the episode return mixes
//! reachability, context relatedness and conciseness.

mod network;
mod reward;
mod rollout;
mod train;

pub use network::{policy_forward, policy_probs, Gradients, PolicyParams, KGPL_MAGIC, KGPL_VERSION};
pub use reward::{concise_reward, context_reward, episode_return, reach_reward};
pub(crate) use rollout::derive_seed;
pub use rollout::{
    action_feature, candidate_actions, extract_paths, sample_rollout, state_vector, CandidateAction,
    Sampling, StepRecord, Trajectory,
};
pub use train::{
    reinforce_gradient, surrogate_objective, train_reinforce, train_reinforce_from, LogRow, Optimizer,
    TrainingLog,
};

use serde::{Deserialize, Serialize};

use crate::kg::{Direction, EntityId, KnowledgeGraph, RelationId, Triple};

/// Per-component rewards of a finished walk.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_reach: f64,
    pub r_cr: f64,
    pub r_cs: f64,
    pub total: f64,
}

/// A walk from a source entity. `steps` keep the graph's stored orientation,
/// so a step taken against an edge still renders as the original fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub source: EntityId,
    pub steps: Vec<Triple>,
    walk: Vec<EntityId>,
    pub reached_target: bool,
    pub rewards: RewardBreakdown,
}

impl ReasoningChain {
    /// Build from a sequence of `(relation, next entity)` hops.
    pub fn from_hops(g: &KnowledgeGraph, source: EntityId, hops: &[(RelationId, EntityId)]) -> Self {
        let mut walk = Vec::with_capacity(hops.len() + 1);
        walk.push(source);
        let mut steps = Vec::with_capacity(hops.len());
        let mut current = source;
        for &(rel, next) in hops {
            steps.push(g.oriented_triple(current, rel, next));
            walk.push(next);
            current = next;
        }
        ReasoningChain {
            source,
            steps,
            walk,
            reached_target: false,
            rewards: RewardBreakdown::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Visited entities, source first.
    pub fn entities(&self) -> &[EntityId] {
        &self.walk
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.steps.iter().map(|t| t.rel)
    }

    pub fn last(&self) -> EntityId {
        *self.walk.last().expect("walk always holds the source")
    }

    /// Same walk, ignoring rewards.
    pub fn same_path(&self, other: &ReasoningChain) -> bool {
        self.walk == other.walk && self.steps == other.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub reach: f64,
    pub context: f64,
    pub concise: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            reach: 1.0,
            context: 0.5,
            concise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Maximum number of actions per episode (K).
    pub max_steps: usize,
    pub episodes: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub weights: RewardWeights,
    pub discount: f64,
    pub seed: u64,
    pub hidden: usize,
    pub direction: Direction,
    pub optimizer: Optimizer,
    /// Decay of the exponential running-mean baseline; 0 disables it.
    pub baseline_decay: f64,
    /// Episodes aggregated per training-log row.
    pub log_interval: usize,
    /// Std-dev of the first-layer initialization.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 4,
            episodes: 1000,
            learning_rate: 0.001,
            clip_norm: 5.0,
            weights: RewardWeights::default(),
            discount: 0.99,
            seed: 0,
            hidden: 64,
            direction: Direction::Both,
            optimizer: Optimizer::Adam,
            baseline_decay: 0.95,
            log_interval: 1,
            init_scale: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.max_steps < 1 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be > 0".into()));
        }
        if self.hidden == 0 || self.log_interval == 0 {
            return Err(Error::InvalidArgument("hidden and log_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::InvalidArgument("discount in [0,1], baseline_decay in [0,1)".into()));
        }
        Ok(())
    }
}
