//! Datasets, the question-to-prompt pipeline, bandit training against answer
//! feedback, and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{ArmId, BanditModel, BanditReward};
use crate::embeddings::{mock_embed, EmbeddingTable, GraphVectors, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::kg::{Choice, KnowledgeGraph, QuestionContext};
use crate::llm::{parse_answer, LlmClient, LlmRequest, ParsedAnswer, SimHint};
use crate::prompt::{
    assemble_prompt, render, render_graph_description, Extractor, KnowledgeBundle, RenderedPrompt, TemplateId,
    Verbalizer,
};
use crate::rl::{extract_paths, PolicyParams, TrainConfig};
use crate::subgraph::{extract_two_hop, score_and_prune, to_triples, DEFAULT_NODE_BUDGET};

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub answer: String,
    pub source_entities: Vec<String>,
    pub target_entities: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_fact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub context: QuestionContext,
    pub source_names: Vec<String>,
    pub target_names: BTreeMap<String, Vec<String>>,
    pub gold_fact: Option<String>,
}

impl QaExample {
    pub fn id(&self) -> &str {
        &self.context.id
    }

    pub fn gold_label(&self) -> Option<&str> {
        self.context.gold_label.as_deref()
    }

    /// Link names against `g`. Unresolved names are logged and dropped; the
    /// example is kept even when no source resolves.
    pub fn from_record(record: DatasetRecord, g: &KnowledgeGraph) -> Self {
        let sources = g.link_entities(&record.source_entities);
        for name in &sources.unresolved {
            log::warn!("{}: source entity `{name}` not in graph", record.id);
        }
        let mut targets = BTreeMap::new();
        for (label, names) in &record.target_entities {
            let linked = g.link_entities(names);
            for name in &linked.unresolved {
                log::warn!("{}: target entity `{name}` (choice {label}) not in graph", record.id);
            }
            targets.insert(label.clone(), linked.ids);
        }
        QaExample {
            context: QuestionContext {
                id: record.id,
                question_text: record.question,
                choices: record.choices,
                gold_label: Some(record.answer),
                source_entities: sources.ids,
                target_entities: targets,
            },
            source_names: record.source_entities,
            target_names: record.target_entities,
            gold_fact: record.gold_fact,
        }
    }

    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            id: self.context.id.clone(),
            question: self.context.question_text.clone(),
            choices: self.context.choices.clone(),
            answer: self.context.gold_label.clone().unwrap_or_default(),
            source_entities: self.source_names.clone(),
            target_entities: self.target_names.clone(),
            gold_fact: self.gold_fact.clone(),
        }
    }
}

fn check_record(r: &DatasetRecord) -> std::result::Result<(), String> {
    if r.id.is_empty() {
        return Err("empty id".into());
    }
    if r.choices.is_empty() {
        return Err("no choices".into());
    }
    let mut seen = std::collections::HashSet::new();
    for c in &r.choices {
        if c.label.is_empty() || !seen.insert(c.label.as_str()) {
            return Err(format!("empty or duplicate choice label `{}`", c.label));
        }
    }
    if !seen.contains(r.answer.as_str()) {
        return Err(format!("answer `{}` is not a choice label", r.answer));
    }
    if let Some(bad) = r.target_entities.keys().find(|l| !seen.contains(l.as_str())) {
        return Err(format!("target entities for unknown label `{bad}`"));
    }
    Ok(())
}

/// Parse dataset JSONL text; `origin` only labels errors.
pub fn parse_dataset(text: &str, origin: &Path, g: &KnowledgeGraph) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        check_record(&record).map_err(parse_err)?;
        let ex = QaExample::from_record(record, g);
        if ex.context.source_entities.is_empty() {
            log::info!("skipping {}: none of its source entities is in the graph", ex.id());
            continue;
        }
        out.push(ex);
    }
    if out.is_empty() {
        log::warn!("{}: no usable examples", origin.display());
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, g: &KnowledgeGraph) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, g)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(&ex.to_record()).expect("record serializes"));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    /// Dimension of generated question vectors when no context table is given.
    pub context_dim: usize,
    pub context_seed: u64,
    /// Maps path embeddings into context space for the relatedness reward.
    pub projection: Option<ProjectionMatrix>,
    pub rl: TrainConfig,
    pub n_rollouts: usize,
    pub node_budget: usize,
    pub max_triples: usize,
    pub verbalizer: Verbalizer,
    /// Ask the model to write graph descriptions instead of the template.
    pub describe_with_llm: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            context_dim: 32,
            context_seed: 0,
            projection: None,
            rl: TrainConfig::default(),
            n_rollouts: 4,
            node_budget: DEFAULT_NODE_BUDGET,
            max_triples: 40,
            verbalizer: Verbalizer::default(),
            describe_with_llm: false,
        }
    }
}

/// How the arm is chosen for each question.
#[derive(Debug, Clone, Copy)]
pub enum ArmSelection<'m> {
    Bandit(&'m BanditModel),
    Fixed(ArmId),
    /// No background knowledge at all.
    NoKg,
}

impl ArmSelection<'_> {
    pub fn mode_name(&self) -> &'static str {
        match self {
            ArmSelection::Bandit(_) => "knowgpt",
            ArmSelection::Fixed(_) => "fixed",
            ArmSelection::NoKg => "no_kg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub arm: Option<ArmId>,
    pub prompt: RenderedPrompt,
    pub reply: String,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    pub fallback_used: bool,
}

/// Everything needed to turn a question into an answered prompt.
pub struct Pipeline<'a> {
    pub graph: &'a KnowledgeGraph,
    pub vectors: GraphVectors<'a>,
    pub policy: Option<&'a PolicyParams>,
    pub contexts: Option<&'a EmbeddingTable>,
    pub gateway: &'a dyn LlmClient,
    pub settings: PipelineSettings,
}

impl<'a> Pipeline<'a> {
    pub fn new(graph: &'a KnowledgeGraph, table: &'a EmbeddingTable, gateway: &'a dyn LlmClient) -> Self {
        Pipeline {
            graph,
            vectors: GraphVectors::new(graph, table),
            policy: None,
            contexts: None,
            gateway,
            settings: PipelineSettings::default(),
        }
    }

    pub fn with_policy(mut self, policy: &'a PolicyParams) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn with_contexts(mut self, contexts: &'a EmbeddingTable) -> Self {
        self.contexts = Some(contexts);
        self
    }

    pub fn with_settings(mut self, settings: PipelineSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn context_dim(&self) -> usize {
        self.contexts.map_or(self.settings.context_dim, EmbeddingTable::dim)
    }

    /// Arms usable with the loaded components: RL arms need a policy.
    pub fn available_arms(&self) -> Vec<ArmId> {
        let n = if self.policy.is_some() { 6 } else { 3 };
        (0..n).map(ArmId).collect()
    }

    /// The question's context vector: its row in the context table, else a
    /// deterministic text embedding of question and choices.
    pub fn context_vector(&self, ex: &QaExample) -> Vec<f32> {
        if let Some(v) = self.contexts.and_then(|t| t.get(ex.id())) {
            return v.to_vec();
        }
        let mut text = ex.context.question_text.clone();
        for c in &ex.context.choices {
            text.push(' ');
            text.push_str(&c.text);
        }
        mock_embed(&text, self.context_dim(), self.settings.context_seed)
    }

    fn subgraph_bundle(&self, ex: &QaExample, context: &[f32]) -> Result<KnowledgeBundle> {
        let sub = match extract_two_hop(self.graph, &ex.context) {
            Ok(s) => s,
            Err(Error::EmptySubgraph(reason)) => {
                log::warn!("{}: empty subgraph ({reason})", ex.id());
                return Ok(KnowledgeBundle::new([], Extractor::Subgraph));
            }
            Err(e) => return Err(e),
        };
        let ctx = (context.len() == self.vectors.dim()).then_some(context);
        let pruned = score_and_prune(&sub, ctx, &self.vectors, self.settings.node_budget)?;
        Ok(KnowledgeBundle::new(
            to_triples(&pruned.subgraph, self.settings.max_triples),
            Extractor::Subgraph,
        ))
    }

    fn rl_bundle(&self, ex: &QaExample, context: &[f32]) -> Result<Option<KnowledgeBundle>> {
        let policy = self
            .policy
            .ok_or_else(|| Error::Config("the RL extractor needs a policy checkpoint".into()))?;
        let identity;
        let w = match &self.settings.projection {
            Some(w) => Some(w),
            None if context.len() == self.vectors.dim() => {
                identity = ProjectionMatrix::identity(context.len());
                Some(&identity)
            }
            None => None,
        };
        let (ctx, w) = match w {
            Some(w) if w.output_dim() == context.len() => (Some(context), w.clone()),
            _ => (None, ProjectionMatrix::identity(self.vectors.dim())),
        };
        let chains = extract_paths(
            self.graph,
            &self.vectors,
            policy,
            &ex.context,
            ctx,
            &w,
            &self.settings.rl,
            self.settings.n_rollouts,
        )?;
        let reaching: Vec<_> = chains.iter().filter(|c| c.reached_target && !c.is_empty()).collect();
        if reaching.is_empty() {
            return Ok(None);
        }
        Ok(Some(KnowledgeBundle::from_chains(reaching)))
    }

    /// Background knowledge for `arm`, and whether the RL extractor had to
    /// fall back to the subgraph.
    pub fn knowledge(&self, ex: &QaExample, arm: ArmId, context: &[f32]) -> Result<(String, bool)> {
        let (extractor, template) = arm
            .decode()
            .ok_or_else(|| Error::InvalidArgument(format!("no arm {}", arm.0)))?;
        let (bundle, fallback) = match extractor {
            Extractor::Subgraph => (self.subgraph_bundle(ex, context)?, false),
            Extractor::Rl => match self.rl_bundle(ex, context)? {
                Some(b) => (b, false),
                None => (self.subgraph_bundle(ex, context)?, true),
            },
        };
        let text = if template == TemplateId::GraphDescription && self.settings.describe_with_llm {
            render_graph_description(&bundle, self.graph, &self.settings.verbalizer, Some(self.gateway)).text
        } else {
            render(&bundle, self.graph, &self.settings.verbalizer, template)
        };
        Ok((text, fallback))
    }

    /// Choose the arm and build the prompt without calling the model.
    pub fn build_prompt(
        &self,
        ex: &QaExample,
        selection: ArmSelection<'_>,
    ) -> Result<(Option<ArmId>, RenderedPrompt, bool)> {
        let context = self.context_vector(ex);
        let arm = match selection {
            ArmSelection::NoKg => None,
            ArmSelection::Fixed(a) => Some(a),
            ArmSelection::Bandit(model) => Some(model.select_among(&context, &self.available_arms())?),
        };
        let Some(arm) = arm else {
            return Ok((None, assemble_prompt(&ex.context, "", TemplateId::Triples), false));
        };
        let (_, template) = arm
            .decode()
            .ok_or_else(|| Error::InvalidArgument(format!("no arm {}", arm.0)))?;
        let (text, fallback) = self.knowledge(ex, arm, &context)?;
        Ok((Some(arm), assemble_prompt(&ex.context, &text, template), fallback))
    }

    fn answer_inner(&self, ex: &QaExample, selection: ArmSelection<'_>) -> Result<Prediction> {
        let gold = ex
            .gold_label()
            .ok_or_else(|| Error::InvalidArgument("example has no gold label".into()))?
            .to_string();
        let (arm, prompt, fallback_used) = self.build_prompt(ex, selection)?;
        let hint = SimHint {
            example_id: ex.id().to_string(),
            labels: ex.context.labels().iter().map(|l| l.to_string()).collect(),
            gold_label: gold.clone(),
            gold_fact: ex.gold_fact.clone(),
            arm,
        };
        let reply = self
            .gateway
            .complete(&LlmRequest::new(prompt.text.clone()).with_hint(hint))?;
        let parsed = parse_answer(&reply.text, &ex.context.choices);
        let correct = parsed.parse_ok && parsed.label.as_deref() == Some(gold.as_str());
        Ok(Prediction {
            example_id: ex.id().to_string(),
            arm,
            prompt,
            reply: reply.text,
            parsed,
            correct,
            fallback_used,
        })
    }

    /// Arm choice, extraction (with RL-to-subgraph fallback), rendering,
    /// model call, parsing and scoring for one question.
    pub fn answer_question(&self, ex: &QaExample, selection: ArmSelection<'_>) -> Result<Prediction> {
        self.answer_inner(ex, selection).map_err(|e| Error::Example {
            id: ex.id().to_string(),
            source: Box::new(e),
        })
    }

    /// Sequential bandit training: each round samples an example uniformly
    /// with replacement, answers it with the selected arm and updates that arm.
    pub fn run_bandit_training(
        &self,
        examples: &[QaExample],
        model: &mut BanditModel,
        rounds: usize,
        seed: u64,
    ) -> Result<BanditRun> {
        let mut run = BanditRun::default();
        if rounds == 0 {
            return Ok(run);
        }
        if examples.is_empty() {
            return Err(Error::InvalidArgument("bandit training needs at least one example".into()));
        }
        if model.dim() != self.context_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                actual: self.context_dim(),
            });
        }
        let allowed = self.available_arms();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut correct = 0usize;
        for round in 0..rounds {
            let ex = &examples[rng.random_range(0..examples.len())];
            let context = self.context_vector(ex);
            let arm = model.select_among(&context, &allowed)?;
            let p = self.answer_question(ex, ArmSelection::Fixed(arm))?;
            let reward = reward_from_prediction(&p);
            model.update(arm, &context, reward)?;
            correct += p.correct as usize;
            run.selections.push(arm);
            run.rewards.push(reward);
            if (round + 1) % CURVE_INTERVAL == 0 || round + 1 == rounds {
                run.curve.push(CurveRow {
                    round: round + 1,
                    running_accuracy: correct as f64 / (round + 1) as f64,
                    arm,
                });
            }
        }
        Ok(run)
    }

    /// Answer every example with `selection` (the bandit is never updated),
    /// using up to `jobs` threads.
    pub fn evaluate(&self, examples: &[QaExample], selection: ArmSelection<'_>, jobs: usize) -> Result<EvalReport> {
        let start = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let predictions: Vec<Prediction> = pool.install(|| {
            examples
                .par_iter()
                .map(|ex| self.answer_question(ex, selection))
                .collect::<Result<_>>()
        })?;
        let mut report = EvalReport::from_predictions(selection.mode_name(), &predictions);
        report.cost.wall_clock_ms = start.elapsed().as_millis() as u64;
        Ok(report)
    }
}

/// 1 for a correct answer, 0 for a wrong or unparseable one.
pub fn reward_from_prediction(p: &Prediction) -> BanditReward {
    BanditReward::from_correct(p.correct)
}

pub const CURVE_INTERVAL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub running_accuracy: f64,
    /// Arm selected in this round.
    pub arm: ArmId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BanditRun {
    pub selections: Vec<ArmId>,
    pub rewards: Vec<BanditReward>,
    pub curve: Vec<CurveRow>,
}

impl BanditRun {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("round,running_accuracy,arm\n");
        for r in &self.curve {
            let _ = writeln!(s, "{},{:.6},{}", r.round, r.running_accuracy, r.arm.0);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub prompts: usize,
    pub total_tokens: usize,
    pub mean_tokens: f64,
    /// Tokens spent on background sections only.
    pub background_tokens: usize,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TemplateStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub arm: Option<usize>,
    pub label: Option<String>,
    pub correct: bool,
    pub parse_ok: bool,
    pub fallback_used: bool,
    pub tokens: usize,
    pub background_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: Option<u64>,
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Keyed by arm index, or `none` for prompts without background.
    pub arm_counts: BTreeMap<String, usize>,
    pub template_accuracy: BTreeMap<String, TemplateStats>,
    pub parse_failures: usize,
    pub parse_failure_rate: f64,
    pub fallbacks: usize,
    pub cost: CostLedger,
    pub predictions: Vec<PredictionRecord>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalReport {
    pub fn from_predictions(mode: &str, predictions: &[Prediction]) -> Self {
        let mut arm_counts = BTreeMap::new();
        let mut template_accuracy: BTreeMap<String, TemplateStats> = BTreeMap::new();
        let mut cost = CostLedger::default();
        let mut records = Vec::with_capacity(predictions.len());
        for p in predictions {
            let key = p.arm.map_or("none".to_string(), |a| a.0.to_string());
            *arm_counts.entry(key).or_insert(0) += 1;
            if let Some((_, t)) = p.arm.and_then(ArmId::decode) {
                let s = template_accuracy.entry(t.as_str().to_string()).or_default();
                s.count += 1;
                s.correct += p.correct as usize;
            }
            cost.prompts += 1;
            cost.total_tokens += p.prompt.token_estimate;
            cost.background_tokens += p.prompt.knowledge_tokens;
            records.push(PredictionRecord {
                id: p.example_id.clone(),
                arm: p.arm.map(|a| a.0),
                label: p.parsed.label.clone(),
                correct: p.correct,
                parse_ok: p.parsed.parse_ok,
                fallback_used: p.fallback_used,
                tokens: p.prompt.token_estimate,
                background_tokens: p.prompt.knowledge_tokens,
            });
        }
        for s in template_accuracy.values_mut() {
            s.accuracy = ratio(s.correct, s.count);
        }
        cost.mean_tokens = ratio(cost.total_tokens, cost.prompts);
        let correct = predictions.iter().filter(|p| p.correct).count();
        let parse_failures = predictions.iter().filter(|p| !p.parsed.parse_ok).count();
        EvalReport {
            mode: mode.to_string(),
            seed: None,
            examples: predictions.len(),
            correct,
            accuracy: ratio(correct, predictions.len()),
            arm_counts,
            template_accuracy,
            parse_failures,
            parse_failure_rate: ratio(parse_failures, predictions.len()),
            fallbacks: predictions.iter().filter(|p| p.fallback_used).count(),
            cost,
            predictions: records,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
