use super::{ReasoningChain, RewardBreakdown, TrainConfig};
use crate::embeddings::{cosine, project, GraphVectors, PathAccumulator, ProjectionMatrix};
use crate::error::Result;

/// +1 when the walk ended on a target within `max_steps` actions, else -1.
pub fn reach_reward(chain: &ReasoningChain, max_steps: usize) -> f64 {
    if chain.reached_target && chain.len() <= max_steps {
        1.0
    } else {
        -1.0
    }
}

/// Mean over steps of `cos(W * prefix_mean, c)`, where `prefix_mean` averages
/// every entity and relation vector walked through so far.
///
/// Empty chains and missing contexts contribute 0.
pub fn context_reward(
    chain: &ReasoningChain,
    context: Option<&[f32]>,
    w: &ProjectionMatrix,
    vectors: &GraphVectors<'_>,
) -> Result<f64> {
    let Some(c) = context else {
        return Ok(0.0);
    };
    if chain.is_empty() {
        return Ok(0.0);
    }
    let mut acc = PathAccumulator::new(vectors.dim());
    acc.push(vectors.entity(chain.source)?);
    let mut sum = 0.0;
    for (rel, node) in chain.relations().zip(chain.entities().iter().skip(1)) {
        acc.push(vectors.relation(rel)?);
        acc.push(vectors.entity(*node)?);
        let projected = project(w, &acc.mean())?;
        sum += cosine(&projected, c)?.value;
    }
    Ok(sum / chain.len() as f64)
}

/// `1 / |P|`; a zero-length chain scores 1.0.
pub fn concise_reward(chain: &ReasoningChain) -> f64 {
    if chain.is_empty() {
        1.0
    } else {
        1.0 / chain.len() as f64
    }
}

/// Weighted sum of the three components under `cfg.weights`.
pub fn episode_return(
    chain: &ReasoningChain,
    cfg: &TrainConfig,
    context: Option<&[f32]>,
    w: &ProjectionMatrix,
    vectors: &GraphVectors<'_>,
) -> Result<RewardBreakdown> {
    let r_reach = reach_reward(chain, cfg.max_steps);
    let r_cr = context_reward(chain, context, w, vectors)?;
    let r_cs = concise_reward(chain);
    Ok(combine(cfg, r_reach, r_cr, r_cs))
}

pub(crate) fn combine(cfg: &TrainConfig, r_reach: f64, r_cr: f64, r_cs: f64) -> RewardBreakdown {
    let wt = &cfg.weights;
    RewardBreakdown {
        r_reach,
        r_cr,
        r_cs,
        total: wt.reach * r_reach + wt.context * r_cr + wt.concise * r_cs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingTable;
    use crate::kg::GraphBuilder;
    use crate::rl::RewardWeights;

    fn chain_of(len: usize) -> (crate::kg::KnowledgeGraph, ReasoningChain) {
        let mut b = GraphBuilder::new();
        for i in 0..len.max(1) {
            b.add(&format!("n{i}"), "r", &format!("n{}", i + 1));
        }
        let g = b.build();
        let r = g.relation_id("r").unwrap();
        let hops: Vec<_> = (1..=len).map(|i| (r, g.entity_id(&format!("n{i}")).unwrap())).collect();
        let chain = ReasoningChain::from_hops(&g, g.entity_id("n0").unwrap(), &hops);
        (g, chain)
    }

    #[test]
    fn reach_examples() {
        let (_, mut c) = chain_of(3);
        c.reached_target = true;
        assert_eq!(reach_reward(&c, 5), 1.0);
        assert_eq!(reach_reward(&c, 2), -1.0);
        c.reached_target = false;
        assert_eq!(reach_reward(&c, 5), -1.0);
        let (_, mut zero) = chain_of(0);
        zero.reached_target = true;
        assert_eq!(reach_reward(&zero, 4), 1.0);
    }

    #[test]
    fn concise_examples() {
        assert_eq!(concise_reward(&chain_of(1).1), 1.0);
        assert_eq!(concise_reward(&chain_of(2).1), 0.5);
        assert_eq!(concise_reward(&chain_of(4).1), 0.25);
        assert_eq!(concise_reward(&chain_of(0).1), 1.0);
    }

    #[test]
    fn context_reward_two_step_mean() {
        // prefix 1 = mean(n0, r, n1) = (1, 0); prefix 2 adds r, n2 and lands on (0, 1)
        let (g, c) = chain_of(2);
        let table = EmbeddingTable::new(
            2,
            vec!["n0".into(), "r".into(), "n1".into(), "n2".into()],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, -3.0, 5.0],
        )
        .unwrap();
        let v = GraphVectors::new(&g, &table);
        let w = ProjectionMatrix::identity(2);
        let ctx = [1.0f32, 0.0];
        // prefix 2 = (1+1+1+1-3, 0+0+0+0+5)/5 = (1/5, 1): cosine with (1,0) = 0.196...
        let expected = (1.0 + (0.2 / (0.04f64 + 1.0).sqrt())) / 2.0;
        let got = context_reward(&c, Some(&ctx), &w, &v).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert_eq!(context_reward(&c, None, &w, &v).unwrap(), 0.0);
    }

    #[test]
    fn context_reward_cosines_one_and_zero() {
        let (g, c) = chain_of(2);
        // prefix 1 mean = (1,0); prefix 2 mean = (0, 1) needs n0+r+n1+r+n2 = (0,5)
        let table = EmbeddingTable::new(
            2,
            vec!["n0".into(), "r".into(), "n1".into(), "n2".into()],
            vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, -3.0, 5.0],
        )
        .unwrap();
        let v = GraphVectors::new(&g, &table);
        let got = context_reward(&c, Some(&[1.0, 0.0]), &ProjectionMatrix::identity(2), &v).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn return_mixes_components() {
        let cfg = TrainConfig::default();
        assert_eq!(combine(&cfg, 1.0, 1.0, 1.0).total, 2.0);
        assert_eq!(combine(&cfg, -1.0, 0.0, 0.25).total, -0.875);
        let zero = TrainConfig {
            weights: RewardWeights {
                reach: 0.0,
                context: 0.0,
                concise: 0.0,
            },
            ..TrainConfig::default()
        };
        assert_eq!(combine(&zero, -1.0, 0.3, 0.5).total, 0.0);
    }
}
