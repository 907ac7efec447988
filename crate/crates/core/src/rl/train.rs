use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{softmax_scores, Gradients, PolicyParams};
use super::reward::episode_return;
use super::rollout::{sample_rollout, Sampling, Trajectory};
use super::TrainConfig;
use crate::embeddings::{EmbeddingTable, GraphVectors, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, QuestionContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Largest global gradient norm seen after clipping.
    pub max_clipped_norm: f64,
    pub clipped_updates: usize,
    pub updates: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_reward,success_rate,mean_len\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.mean_reward, r.success_rate, r.mean_len);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `sum_t A_t log pi(a_t | s_t)`, the function whose gradient REINFORCE follows.
pub fn surrogate_objective(params: &PolicyParams, trajectory: &Trajectory, advantages: &[f64]) -> f64 {
    trajectory
        .steps
        .iter()
        .zip(advantages)
        .map(|(step, &a)| {
            let (_, head) = params.head(&step.state);
            let probs = softmax_scores(&step.features, &head, None);
            a * probs[step.chosen].ln()
        })
        .sum()
}

/// Analytic gradient of [`surrogate_objective`].
pub fn reinforce_gradient(params: &PolicyParams, trajectory: &Trajectory, advantages: &[f64]) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    for (step, &a) in trajectory.steps.iter().zip(advantages) {
        if a != 0.0 {
            grads.accumulate_log_prob(params, &step.state, &step.features, step.chosen, a);
        }
    }
    grads
}

struct Task {
    question: usize,
    source: EntityId,
    targets: Vec<EntityId>,
}

/// Every (question, source) pair with embedded source and targets. The gold
/// choice's targets are used when known, otherwise all choices' targets.
fn trainable_tasks(questions: &[QuestionContext], vectors: &GraphVectors<'_>) -> Vec<Task> {
    let mut tasks = Vec::new();
    for (qi, q) in questions.iter().enumerate() {
        let gold = q
            .gold_label
            .as_deref()
            .map(|l| q.targets_for(l).to_vec())
            .filter(|t| !t.is_empty());
        let targets: Vec<EntityId> = gold
            .unwrap_or_else(|| q.all_targets())
            .into_iter()
            .filter(|&t| vectors.try_entity(t).is_some())
            .collect();
        if targets.is_empty() {
            continue;
        }
        for &source in &q.source_entities {
            if vectors.try_entity(source).is_some() {
                tasks.push(Task {
                    question: qi,
                    source,
                    targets: targets.clone(),
                });
            }
        }
    }
    tasks
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut PolicyParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (w, &g)) in params.as_mut_slice().iter_mut().zip(&grads.values).enumerate() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let delta = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            if delta != 0.0 {
                *w = (*w as f64 + delta) as f32;
            }
        }
    }
}

fn sgd_step(params: &mut PolicyParams, grads: &Gradients, lr: f64) {
    for (w, &g) in params.as_mut_slice().iter_mut().zip(&grads.values) {
        let delta = lr * g;
        if delta != 0.0 {
            *w = (*w as f64 + delta) as f32;
        }
    }
}

/// Train a freshly initialized policy; see [`train_reinforce_from`].
pub fn train_reinforce(
    g: &KnowledgeGraph,
    questions: &[QuestionContext],
    cfg: &TrainConfig,
    vectors: &GraphVectors<'_>,
    contexts: Option<&EmbeddingTable>,
    w: &ProjectionMatrix,
) -> Result<(PolicyParams, TrainingLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = vectors.dim();
    let init = PolicyParams::init(d, cfg.hidden, 2 * d, cfg.init_scale, &mut rng);
    train_with_rng(init, g, questions, cfg, vectors, contexts, w, &mut rng)
}

/// REINFORCE: one sampled episode per update, per-step weight
/// `discount^(T-1-t) * total - baseline`, global-norm clipping, ascent step.
pub fn train_reinforce_from(
    init: PolicyParams,
    g: &KnowledgeGraph,
    questions: &[QuestionContext],
    cfg: &TrainConfig,
    vectors: &GraphVectors<'_>,
    contexts: Option<&EmbeddingTable>,
    w: &ProjectionMatrix,
) -> Result<(PolicyParams, TrainingLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    train_with_rng(init, g, questions, cfg, vectors, contexts, w, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn train_with_rng(
    mut params: PolicyParams,
    g: &KnowledgeGraph,
    questions: &[QuestionContext],
    cfg: &TrainConfig,
    vectors: &GraphVectors<'_>,
    contexts: Option<&EmbeddingTable>,
    w: &ProjectionMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, TrainingLog)> {
    cfg.validate()?;
    let d = vectors.dim();
    if params.dim() != d || params.action_dim() != 2 * d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: params.dim(),
        });
    }
    let tasks = trainable_tasks(questions, vectors);
    if tasks.is_empty() {
        return Err(Error::NoTrainableQuestion);
    }
    let mut log = TrainingLog::default();
    let mut adam = Adam::new(params.len());
    let mut baseline: Option<f64> = None;
    let (mut sum_reward, mut successes, mut sum_len, mut in_window) = (0.0, 0usize, 0usize, 0usize);

    for episode in 0..cfg.episodes {
        let task = &tasks[rng.random_range(0..tasks.len())];
        let q = &questions[task.question];
        let (mut chain, trajectory) = sample_rollout(
            g,
            vectors,
            &params,
            task.source,
            &task.targets,
            cfg,
            Sampling::Sample(rng),
        )?;
        let context = contexts.and_then(|t| t.get(&q.id));
        chain.rewards = episode_return(&chain, cfg, context, w, vectors)?;
        let total = chain.rewards.total;

        let b = if cfg.baseline_decay > 0.0 { baseline.unwrap_or(0.0) } else { 0.0 };
        let horizon = trajectory.steps.len();
        let advantages: Vec<f64> = (0..horizon)
            .map(|t| cfg.discount.powi((horizon - 1 - t) as i32) * total - b)
            .collect();
        baseline = Some(match baseline {
            None => total,
            Some(prev) => cfg.baseline_decay * prev + (1.0 - cfg.baseline_decay) * total,
        });

        if horizon > 0 {
            let mut grads = reinforce_gradient(&params, &trajectory, &advantages);
            let raw = grads.norm();
            if !raw.is_finite() {
                return Err(Error::NonFiniteGradient {
                    episode,
                    detail: format!("gradient norm {raw} (source {})", g.entity_name(task.source)),
                });
            }
            let clipped = grads.clip(cfg.clip_norm);
            if raw > cfg.clip_norm {
                log.clipped_updates += 1;
            }
            log.max_clipped_norm = log.max_clipped_norm.max(clipped);
            log.updates += 1;
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(&mut params, &grads, cfg.learning_rate),
                Optimizer::Adam => adam.step(&mut params, &grads, cfg.learning_rate),
            }
            if !params.is_finite() {
                return Err(Error::NonFiniteGradient {
                    episode,
                    detail: "parameters became non-finite".into(),
                });
            }
        }

        sum_reward += total;
        sum_len += chain.len();
        successes += chain.reached_target as usize;
        in_window += 1;
        if in_window == cfg.log_interval || episode + 1 == cfg.episodes {
            let n = in_window as f64;
            log.rows.push(LogRow {
                epoch: log.rows.len(),
                mean_reward: sum_reward / n,
                success_rate: successes as f64 / n,
                mean_len: sum_len as f64 / n,
            });
            (sum_reward, successes, sum_len, in_window) = (0.0, 0, 0, 0);
        }
    }
    Ok((params, log))
}
