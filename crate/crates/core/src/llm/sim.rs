use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LlmClient, LlmReply, LlmRequest, SimHint};
use crate::error::{Error, Result};
use crate::prompt::{estimate_tokens, format_triple, parse_triples, Verbalizer};
use crate::rl::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    FactMatch,
    PerArmBernoulli,
    Contextual,
}

impl std::str::FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fact_match" => Ok(SimMode::FactMatch),
            "per_arm_bernoulli" => Ok(SimMode::PerArmBernoulli),
            "contextual" => Ok(SimMode::Contextual),
            other => Err(Error::InvalidArgument(format!("unknown oracle mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOracleConfig {
    pub mode: SimMode,
    /// Success probability per arm (`per_arm_bernoulli`).
    pub arm_probs: Vec<f64>,
    /// Success probability per cluster and arm (`contextual`).
    pub cluster_probs: Vec<Vec<f64>>,
    /// Example id to cluster index (`contextual`).
    pub clusters: HashMap<String, usize>,
    /// Success probability for prompts built without an arm.
    pub baseline_prob: f64,
    pub seed: u64,
}

impl Default for SimOracleConfig {
    fn default() -> Self {
        SimOracleConfig {
            mode: SimMode::FactMatch,
            arm_probs: Vec::new(),
            cluster_probs: Vec::new(),
            clusters: HashMap::new(),
            baseline_prob: 0.0,
            seed: 0,
        }
    }
}

impl SimOracleConfig {
    pub fn fact_match(seed: u64) -> Self {
        SimOracleConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn per_arm(probs: Vec<f64>, seed: u64) -> Self {
        SimOracleConfig {
            mode: SimMode::PerArmBernoulli,
            arm_probs: probs,
            seed,
            ..Default::default()
        }
    }

    pub fn contextual(cluster_probs: Vec<Vec<f64>>, clusters: HashMap<String, usize>, seed: u64) -> Self {
        SimOracleConfig {
            mode: SimMode::Contextual,
            cluster_probs,
            clusters,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .arm_probs
            .iter()
            .chain(self.cluster_probs.iter().flatten())
            .chain(std::iter::once(&self.baseline_prob));
        for &p in all {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("oracle probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Strings whose presence in a prompt counts as containing `fact`: the fact
/// itself, plus its triple and sentence renderings when it parses as
/// `(head, relation, tail)`.
pub(crate) fn fact_renderings(fact: &str) -> Vec<String> {
    let mut out = vec![fact.trim().to_string()];
    if let Some((h, r, t)) = parse_triples(fact).into_iter().next() {
        out.push(format_triple(&h, &r, &t));
        let sentence = Verbalizer::default().sentence(&h, &r, &t);
        out.push(sentence.trim_end_matches('.').to_string());
    }
    out.retain(|s| !s.is_empty());
    out.dedup();
    out
}

fn arm_bytes(hint: &SimHint) -> Vec<u8> {
    match hint.arm {
        Some(a) => (a.0 as u64).to_le_bytes().to_vec(),
        None => b"none".to_vec(),
    }
}

fn success_probability(cfg: &SimOracleConfig, hint: &SimHint) -> Result<f64> {
    let Some(arm) = hint.arm else {
        return Ok(cfg.baseline_prob);
    };
    let table = match cfg.mode {
        SimMode::PerArmBernoulli => &cfg.arm_probs,
        SimMode::Contextual => {
            let cluster = *cfg
                .clusters
                .get(&hint.example_id)
                .ok_or_else(|| Error::Config(format!("no oracle cluster for example {}", hint.example_id)))?;
            cfg.cluster_probs
                .get(cluster)
                .ok_or_else(|| Error::Config(format!("no probabilities for cluster {cluster}")))?
        }
        SimMode::FactMatch => unreachable!(),
    };
    table
        .get(arm.0)
        .copied()
        .ok_or_else(|| Error::Config(format!("no oracle probability for arm {}", arm.0)))
}

/// Deterministic stand-in for the answering model. Replies `(<gold>)` when
/// the oracle deems the prompt answerable, otherwise a wrong label drawn
/// uniformly from the non-gold labels, all seeded by (seed, example, arm).
pub fn simulate_oracle(cfg: &SimOracleConfig, prompt: &str, hint: &SimHint) -> Result<String> {
    if !hint.labels.contains(&hint.gold_label) {
        return Err(Error::Config(format!(
            "example {}: gold label `{}` is not among its choices",
            hint.example_id, hint.gold_label
        )));
    }
    let arm = arm_bytes(hint);
    let correct = match cfg.mode {
        SimMode::FactMatch => {
            let fact = hint.gold_fact.as_deref().ok_or_else(|| {
                Error::Config(format!("example {}: fact_match oracle needs a gold fact", hint.example_id))
            })?;
            fact_renderings(fact).iter().any(|r| prompt.contains(r.as_str()))
        }
        SimMode::PerArmBernoulli | SimMode::Contextual => {
            let p = success_probability(cfg, hint)?;
            let seed = derive_seed(cfg.seed, &[hint.example_id.as_bytes(), &arm, b"success"]);
            ChaCha8Rng::seed_from_u64(seed).random::<f64>() < p
        }
    };
    if correct {
        return Ok(format!("({})", hint.gold_label));
    }
    let wrong: Vec<&String> = hint.labels.iter().filter(|l| **l != hint.gold_label).collect();
    if wrong.is_empty() {
        return Ok("I cannot determine the answer.".to_string());
    }
    let seed = derive_seed(cfg.seed, &[hint.example_id.as_bytes(), &arm, b"wrong"]);
    let pick = ChaCha8Rng::seed_from_u64(seed).random_range(0..wrong.len());
    Ok(format!("({})", wrong[pick]))
}

pub struct SimClient {
    cfg: SimOracleConfig,
}

impl SimClient {
    pub fn new(cfg: SimOracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SimClient { cfg })
    }

    pub fn config(&self) -> &SimOracleConfig {
        &self.cfg
    }
}

impl LlmClient for SimClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmReply> {
        let hint = req
            .hint
            .as_ref()
            .ok_or_else(|| Error::Config("the simulated provider only answers dataset questions".into()))?;
        Ok(LlmReply {
            text: simulate_oracle(&self.cfg, &req.prompt, hint)?,
            prompt_tokens_est: estimate_tokens(&req.prompt),
            latency_ms: 0,
        })
    }

    fn model(&self) -> &str {
        "sim"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::ArmId;

    fn hint(id: &str, fact: Option<&str>, arm: Option<usize>) -> SimHint {
        SimHint {
            example_id: id.into(),
            labels: ["A", "B", "C", "D", "E"].map(String::from).to_vec(),
            gold_label: "C".into(),
            gold_fact: fact.map(String::from),
            arm: arm.map(ArmId),
        }
    }

    #[test]
    fn fact_match_detects_any_rendering() {
        let cfg = SimOracleConfig::fact_match(1);
        let h = hint("q1", Some("(revolving_door, at_location, bank)"), Some(0));
        let triple = "Background: (revolving_door, at_location, bank), (x, is_a, y)";
        assert_eq!(simulate_oracle(&cfg, triple, &h).unwrap(), "(C)");
        let sentence = "Background: revolving door is located at bank. Question: ...";
        assert_eq!(simulate_oracle(&cfg, sentence, &h).unwrap(), "(C)");
        let miss = simulate_oracle(&cfg, "Question: where?", &h).unwrap();
        assert_ne!(miss, "(C)");
        assert_eq!(miss, simulate_oracle(&cfg, "Question: where?", &h).unwrap());
    }

    #[test]
    fn fact_match_needs_fact() {
        let cfg = SimOracleConfig::fact_match(1);
        assert!(matches!(
            simulate_oracle(&cfg, "p", &hint("q", None, Some(0))),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_probabilities() {
        let cfg = SimOracleConfig::per_arm(vec![1.0, 0.0], 3);
        for i in 0..200 {
            let id = format!("q{i}");
            assert_eq!(simulate_oracle(&cfg, "p", &hint(&id, None, Some(0))).unwrap(), "(C)");
            assert_ne!(simulate_oracle(&cfg, "p", &hint(&id, None, Some(1))).unwrap(), "(C)");
        }
        assert!(simulate_oracle(&cfg, "p", &hint("q", None, Some(2))).is_err());
    }

    #[test]
    fn probabilities_validated() {
        assert!(SimClient::new(SimOracleConfig::per_arm(vec![0.5, 1.5], 0)).is_err());
    }

    #[test]
    fn contextual_uses_cluster_table() {
        let clusters = HashMap::from([("a".to_string(), 0), ("b".to_string(), 1)]);
        let cfg = SimOracleConfig::contextual(vec![vec![1.0, 0.0], vec![0.0, 1.0]], clusters, 0);
        assert_eq!(simulate_oracle(&cfg, "p", &hint("a", None, Some(0))).unwrap(), "(C)");
        assert_ne!(simulate_oracle(&cfg, "p", &hint("a", None, Some(1))).unwrap(), "(C)");
        assert_eq!(simulate_oracle(&cfg, "p", &hint("b", None, Some(1))).unwrap(), "(C)");
        assert!(simulate_oracle(&cfg, "p", &hint("zzz", None, Some(1))).is_err());
    }

    #[test]
    fn client_requires_hint() {
        let c = SimClient::new(SimOracleConfig::fact_match(0)).unwrap();
        assert!(c.complete(&LlmRequest::new("describe")).is_err());
    }
}
