use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde_json::json;

use kgprompt_core::bandit::{ArmId, BanditModel, ARM_COUNT};
use kgprompt_core::embeddings::{EmbeddingTable, GraphVectors, ProjectionMatrix};
use kgprompt_core::eval::{load_dataset, ArmSelection, DatasetRecord, Pipeline, PipelineSettings, QaExample};
use kgprompt_core::kg::{Choice, KnowledgeGraph};
use kgprompt_core::llm::{
    parse_answer, Gateway, LlmClient, LlmReply, LlmRequest, ProviderConfig, ProviderKind, SimOracleConfig,
};
use kgprompt_core::rl::{train_reinforce, PolicyParams, RewardWeights, TrainConfig};

use crate::args::{
    AnswerArgs, EvaluateArgs, GraphArgs, ModeArg, OracleArg, PipelineArgs, ProviderArg, ProviderArgs, RlArgs,
    SelectionArgs, TrainBanditArgs, TrainPolicyArgs,
};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag}: no such file: {}", path.display())))
    }
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name: OsString = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn vocab_for(vectors: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| vectors.with_extension("vocab"))
}

/// Outputs must not overwrite any input of the same run.
fn check_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if inputs.iter().any(|i| canon(i) == canon(out)) {
        return Err(usage(format!("output {} would overwrite an input", out.display())));
    }
    Ok(())
}

fn write_manifest(artifact: &Path, command: &str, seed: u64, settings: serde_json::Value) -> Result<()> {
    let path = sibling(artifact, ".run.json");
    let body = json!({ "command": command, "seed": seed, "artifact": artifact, "settings": settings });
    fs::write(&path, serde_json::to_string_pretty(&body)?).with_context(|| format!("writing {}", path.display()))
}

struct Inputs {
    graph: KnowledgeGraph,
    table: EmbeddingTable,
    contexts: Option<EmbeddingTable>,
    projection: Option<ProjectionMatrix>,
}

impl Inputs {
    fn load(a: &GraphArgs) -> Result<Self> {
        let vocab = vocab_for(&a.embeddings, &a.vocab);
        require_file(&a.graph, "--graph")?;
        require_file(&a.embeddings, "--embeddings")?;
        require_file(&vocab, "--vocab")?;
        let ctx_vocab = a.ctx_embeddings.as_ref().map(|p| vocab_for(p, &a.ctx_vocab));
        if let (Some(p), Some(v)) = (&a.ctx_embeddings, &ctx_vocab) {
            require_file(p, "--ctx-embeddings")?;
            require_file(v, "--ctx-vocab")?;
        }
        if let Some(p) = &a.projection {
            require_file(p, "--projection")?;
        }
        let (graph, stats) = KnowledgeGraph::load_tsv(&a.graph)?;
        log::info!("graph: {stats:?}");
        let table = EmbeddingTable::load(&a.embeddings, &vocab)?;
        let contexts = match (&a.ctx_embeddings, &ctx_vocab) {
            (Some(p), Some(v)) => Some(EmbeddingTable::load(p, v)?),
            _ => None,
        };
        let projection = a.projection.as_ref().map(ProjectionMatrix::load).transpose()?;
        Ok(Inputs {
            graph,
            table,
            contexts,
            projection,
        })
    }

    fn dataset(&self, path: &Path) -> Result<Vec<QaExample>> {
        require_file(path, "--dataset")?;
        Ok(load_dataset(path, &self.graph)?)
    }
}

fn walk_config(rl: &RlArgs, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        max_steps: rl.max_steps,
        hidden: rl.hidden,
        direction: rl.direction.parse()?,
        seed,
        ..TrainConfig::default()
    })
}

fn pipeline_settings(p: &PipelineArgs, rl: &RlArgs, inputs: &Inputs, seed: u64) -> Result<PipelineSettings> {
    Ok(PipelineSettings {
        context_dim: p.context_dim,
        projection: inputs.projection.clone(),
        rl: walk_config(rl, seed)?,
        n_rollouts: p.n_rollouts,
        node_budget: p.node_budget,
        max_triples: p.max_triples,
        describe_with_llm: p.describe_with_llm,
        ..PipelineSettings::default()
    })
}

fn load_policy(p: &PipelineArgs) -> Result<Option<PolicyParams>> {
    match &p.policy {
        Some(path) if !p.no_rl => {
            require_file(path, "--policy")?;
            Ok(Some(PolicyParams::load(path)?))
        }
        _ => Ok(None),
    }
}

fn oracle_config(p: &ProviderArgs, seed: u64) -> Result<SimOracleConfig> {
    if let Some(path) = &p.oracle_config {
        require_file(path, "--oracle-config")?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: SimOracleConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing oracle configuration {}", path.display()))?;
        cfg.seed = seed;
        return Ok(cfg);
    }
    let mut cfg = match p.oracle {
        OracleArg::FactMatch => SimOracleConfig::fact_match(seed),
        OracleArg::PerArmBernoulli => {
            if p.arm_probs.is_empty() {
                return Err(usage("--oracle per-arm-bernoulli needs --arm-probs"));
            }
            SimOracleConfig::per_arm(p.arm_probs.clone(), seed)
        }
        OracleArg::Contextual => return Err(usage("--oracle contextual needs --oracle-config")),
    };
    cfg.baseline_prob = p.baseline_prob;
    Ok(cfg)
}

fn provider_config(p: &ProviderArgs) -> ProviderConfig {
    ProviderConfig {
        kind: match p.provider {
            ProviderArg::Http => ProviderKind::Http,
            ProviderArg::Sim => ProviderKind::Sim,
        },
        endpoint: p.endpoint.clone(),
        model: p.model.clone(),
        api_key_env: p.api_key_env.clone(),
        timeout_secs: p.timeout_secs,
        max_retries: p.max_retries,
        max_concurrent: p.max_concurrent,
        temperature: p.temperature,
        retry_base_ms: p.retry_base_ms,
    }
}

/// Provider plus cache; `default_cache` applies to the http provider only.
fn gateway(p: &ProviderArgs, seed: u64, default_cache: Option<PathBuf>) -> Result<Gateway> {
    let cfg = provider_config(p);
    let sim = match cfg.kind {
        ProviderKind::Sim => Some(oracle_config(p, seed)?),
        ProviderKind::Http => None,
    };
    let gw = Gateway::from_config(&cfg, sim)?;
    if p.no_cache {
        return Ok(gw);
    }
    let cache = p
        .cache
        .clone()
        .or(default_cache.filter(|_| cfg.kind == ProviderKind::Http));
    Ok(match cache {
        Some(path) => gw.with_cache_file(path)?,
        None => gw,
    })
}

fn provider_summary(p: &ProviderArgs, seed: u64) -> Result<serde_json::Value> {
    let mut v = json!({ "provider": provider_config(p) });
    if p.provider == ProviderArg::Sim {
        let o = oracle_config(p, seed)?;
        v["oracle"] = json!({ "mode": o.mode, "arm_probs": o.arm_probs, "baseline_prob": o.baseline_prob });
    }
    Ok(v)
}

pub fn train_policy(a: &TrainPolicyArgs) -> Result<()> {
    let inputs = Inputs::load(&a.graph)?;
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.policy, ".log.csv"));
    check_output(&a.policy, &[&a.graph.graph, &a.graph.embeddings, &a.dataset])?;
    check_output(&log_path, &[&a.graph.graph, &a.graph.embeddings, &a.dataset])?;
    let examples = inputs.dataset(&a.dataset)?;
    let questions: Vec<_> = examples.iter().map(|e| e.context.clone()).collect();
    let cfg = TrainConfig {
        max_steps: a.rl.max_steps,
        episodes: a.episodes,
        learning_rate: a.learning_rate,
        clip_norm: a.clip_norm,
        weights: RewardWeights {
            reach: a.w_reach,
            context: a.w_context,
            concise: a.w_concise,
        },
        discount: a.discount,
        seed: a.graph.seed,
        hidden: a.rl.hidden,
        direction: a.rl.direction.parse()?,
        optimizer: a.optimizer.parse()?,
        baseline_decay: a.baseline_decay,
        log_interval: a.log_interval,
        init_scale: a.init_scale,
    };
    if let Err(e) = cfg.validate() {
        return Err(usage(e.to_string()));
    }
    let vectors = GraphVectors::new(&inputs.graph, &inputs.table);
    let w = match (&inputs.contexts, &inputs.projection) {
        (_, Some(w)) => w.clone(),
        (Some(ctx), None) => ProjectionMatrix::default_for(vectors.dim(), ctx.dim())?,
        (None, None) => ProjectionMatrix::identity(vectors.dim()),
    };
    let (params, log) = train_reinforce(&inputs.graph, &questions, &cfg, &vectors, inputs.contexts.as_ref(), &w)?;
    params.save(&a.policy)?;
    log.write_csv(&log_path)?;
    write_manifest(&a.policy, "train-policy", cfg.seed, json!({ "train": cfg, "dataset": a.dataset }))?;
    let tail = log.rows.len().min(100).max(1);
    let recent = &log.rows[log.rows.len().saturating_sub(tail)..];
    let success = recent.iter().map(|r| r.success_rate).sum::<f64>() / recent.len().max(1) as f64;
    println!(
        "episodes={} updates={} recent_success_rate={success:.4} policy={} log={}",
        cfg.episodes,
        log.updates,
        a.policy.display(),
        log_path.display()
    );
    Ok(())
}

pub fn train_bandit(a: &TrainBanditArgs) -> Result<()> {
    if a.pipeline.policy.is_none() && !a.pipeline.no_rl {
        return Err(usage("train-bandit needs --policy, or --no-rl to use only subgraph arms"));
    }
    let inputs = Inputs::load(&a.graph)?;
    let curve_path = a.curve.clone().unwrap_or_else(|| sibling(&a.bandit, ".curve.csv"));
    let mut inputs_paths: Vec<&Path> = vec![&a.graph.graph, &a.graph.embeddings, &a.dataset];
    if let Some(r) = &a.resume {
        inputs_paths.push(r);
    }
    check_output(&a.bandit, &inputs_paths)?;
    check_output(&curve_path, &inputs_paths)?;
    let examples = inputs.dataset(&a.dataset)?;
    let policy = load_policy(&a.pipeline)?;
    let seed = a.graph.seed;
    let gw = gateway(&a.provider, seed, None)?;
    let mut pipeline = Pipeline::new(&inputs.graph, &inputs.table, &gw).with_settings(pipeline_settings(
        &a.pipeline,
        &a.rl,
        &inputs,
        seed,
    )?);
    if let Some(p) = &policy {
        pipeline = pipeline.with_policy(p);
    }
    if let Some(c) = &inputs.contexts {
        pipeline = pipeline.with_contexts(c);
    }
    let mut model = match &a.resume {
        Some(path) => {
            require_file(path, "--resume")?;
            BanditModel::load(path)?
        }
        None => BanditModel::new(pipeline.context_dim(), a.lambda, a.delta)?,
    };
    let before = model.total_observations();
    let run = pipeline.run_bandit_training(&examples, &mut model, a.rounds, seed)?;
    model.save(&a.bandit)?;
    fs::write(&curve_path, run.curve_csv()).with_context(|| format!("writing {}", curve_path.display()))?;
    write_manifest(
        &a.bandit,
        "train-bandit",
        seed,
        json!({
            "rounds": a.rounds,
            "lambda": model.lambda(),
            "delta": model.delta(),
            "resume": a.resume,
            "policy": a.pipeline.policy,
            "arms": pipeline.available_arms().iter().map(|x| x.0).collect::<Vec<_>>(),
            "dataset": a.dataset,
            "llm": provider_summary(&a.provider, seed)?,
        }),
    )?;
    let acc = run.curve.last().map_or(0.0, |r| r.running_accuracy);
    println!(
        "rounds={} observations={}->{} running_accuracy={acc:.4} bandit={} curve={}",
        a.rounds,
        before,
        model.total_observations(),
        a.bandit.display(),
        curve_path.display()
    );
    Ok(())
}

/// The bandit model a selection needs, loaded before borrowing it.
fn selection_model(s: &SelectionArgs) -> Result<Option<BanditModel>> {
    match s.mode {
        ModeArg::Knowgpt => {
            let path = s
                .bandit
                .as_ref()
                .ok_or_else(|| usage("--mode knowgpt needs --bandit"))?;
            require_file(path, "--bandit")?;
            Ok(Some(BanditModel::load(path)?))
        }
        _ => Ok(None),
    }
}

fn selection<'m>(s: &SelectionArgs, model: Option<&'m BanditModel>, has_policy: bool) -> Result<ArmSelection<'m>> {
    Ok(match s.mode {
        ModeArg::Knowgpt => ArmSelection::Bandit(model.expect("loaded by selection_model")),
        ModeArg::NoKg => ArmSelection::NoKg,
        ModeArg::Fixed => {
            let arm = s.arm.ok_or_else(|| usage("--mode fixed needs --arm"))?;
            if arm >= ARM_COUNT {
                return Err(usage(format!("--arm must be below {ARM_COUNT}")));
            }
            if arm >= 3 && !has_policy {
                return Err(usage(format!("arm {arm} walks the graph and needs --policy")));
            }
            ArmSelection::Fixed(ArmId(arm))
        }
    })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let inputs = Inputs::load(&a.graph)?;
    let mut input_paths: Vec<&Path> = vec![&a.graph.graph, &a.graph.embeddings, &a.dataset];
    if let Some(b) = &a.selection.bandit {
        input_paths.push(b);
    }
    check_output(&a.report, &input_paths)?;
    let model = selection_model(&a.selection)?;
    let policy = load_policy(&a.pipeline)?;
    let sel = selection(&a.selection, model.as_ref(), policy.is_some())?;
    let examples = inputs.dataset(&a.dataset)?;
    let seed = a.graph.seed;
    let gw = gateway(&a.provider, seed, Some(sibling(&a.report, ".cache.jsonl")))?;
    let mut pipeline = Pipeline::new(&inputs.graph, &inputs.table, &gw).with_settings(pipeline_settings(
        &a.pipeline,
        &a.rl,
        &inputs,
        seed,
    )?);
    if let Some(p) = &policy {
        pipeline = pipeline.with_policy(p);
    }
    if let Some(c) = &inputs.contexts {
        pipeline = pipeline.with_contexts(c);
    }
    let mut report = pipeline.evaluate(&examples, sel, a.jobs)?;
    report.seed = Some(seed);
    report.write_json(&a.report)?;
    println!("accuracy={:.4}", report.accuracy);
    log::info!(
        "{} examples, {} parse failures, mean tokens {:.1}",
        report.examples,
        report.parse_failures,
        report.cost.mean_tokens
    );
    Ok(())
}

/// Stand-in provider for dry runs; any call is a bug.
struct NoProvider;

impl LlmClient for NoProvider {
    fn complete(&self, _req: &LlmRequest) -> kgprompt_core::Result<LlmReply> {
        Err(kgprompt_core::Error::Config("dry run: the provider must not be called".into()))
    }

    fn model(&self) -> &str {
        "none"
    }
}

fn split_pair<'s>(s: &'s str, flag: &str) -> Result<(&'s str, &'s str)> {
    s.split_once('=')
        .map(|(l, r)| (l.trim(), r.trim()))
        .filter(|(l, _)| !l.is_empty())
        .ok_or_else(|| usage(format!("{flag} expects LABEL=VALUE, got `{s}`")))
}

fn inline_example(a: &AnswerArgs, g: &KnowledgeGraph) -> Result<QaExample> {
    let question = a.question.clone().unwrap_or_default();
    if a.choices.is_empty() {
        return Err(usage("an inline question needs at least one --choice"));
    }
    let mut choices = Vec::new();
    for c in &a.choices {
        let (label, text) = split_pair(c, "--choice")?;
        if choices.iter().any(|x: &Choice| x.label == label) {
            return Err(usage(format!("duplicate choice label `{label}`")));
        }
        choices.push(Choice {
            label: label.to_string(),
            text: text.to_string(),
        });
    }
    let mut targets: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in &a.targets {
        let (label, name) = split_pair(t, "--target")?;
        if !choices.iter().any(|c| c.label == label) {
            return Err(usage(format!("--target for unknown choice `{label}`")));
        }
        targets.entry(label.to_string()).or_default().push(name.to_string());
    }
    if let Some(gold) = &a.gold {
        if !choices.iter().any(|c| &c.label == gold) {
            return Err(usage(format!("--gold `{gold}` is not a choice label")));
        }
    }
    let record = DatasetRecord {
        id: "inline".into(),
        question,
        choices,
        answer: a.gold.clone().unwrap_or_default(),
        source_entities: a.sources.clone(),
        target_entities: targets,
        gold_fact: a.gold_fact.clone(),
    };
    let mut ex = QaExample::from_record(record, g);
    ex.context.gold_label = a.gold.clone();
    Ok(ex)
}

fn dataset_example(a: &AnswerArgs, inputs: &Inputs) -> Result<QaExample> {
    let path = a.dataset.as_ref().expect("clap requires --dataset with --id");
    let id = a.id.as_ref().expect("clap requires --id with --dataset");
    inputs
        .dataset(path)?
        .into_iter()
        .find(|e| e.id() == id)
        .ok_or_else(|| anyhow!("no example `{id}` in {}", path.display()))
}

pub fn answer(a: &AnswerArgs) -> Result<()> {
    let inputs = Inputs::load(&a.graph)?;
    let mut ex = match &a.id {
        Some(_) => dataset_example(a, &inputs)?,
        None => inline_example(a, &inputs.graph)?,
    };
    if a.id.is_some() {
        if let Some(g) = &a.gold {
            ex.context.gold_label = Some(g.clone());
        }
    }
    let unresolved: Vec<&String> = ex
        .source_names
        .iter()
        .filter(|n| inputs.graph.link_entities(&[n.as_str()]).ids.is_empty())
        .collect();
    for name in &unresolved {
        eprintln!("warning: entity `{name}` is not in the graph");
    }
    if ex.context.source_entities.is_empty() {
        eprintln!("warning: no question entity resolved; the prompt carries no background");
    }
    let model = selection_model(&a.selection)?;
    let policy = load_policy(&a.pipeline)?;
    let sel = selection(&a.selection, model.as_ref(), policy.is_some())?;
    let seed = a.graph.seed;
    let settings = pipeline_settings(&a.pipeline, &a.rl, &inputs, seed)?;
    let no_provider = NoProvider;
    let gw;
    let client: &dyn LlmClient = if a.dry_run {
        &no_provider
    } else {
        gw = gateway(&a.provider, seed, None)?;
        &gw
    };
    let mut pipeline = Pipeline::new(&inputs.graph, &inputs.table, client).with_settings(settings);
    if let Some(p) = &policy {
        pipeline = pipeline.with_policy(p);
    }
    if let Some(c) = &inputs.contexts {
        pipeline = pipeline.with_contexts(c);
    }

    let arm_line = |arm: Option<ArmId>, fallback: bool| match arm {
        None => "none (no background)".to_string(),
        Some(a) if fallback => format!("{a} (no walk reached an answer; used the subgraph)"),
        Some(a) => a.to_string(),
    };
    if a.dry_run {
        let (arm, prompt, fallback) = pipeline.build_prompt(&ex, sel)?;
        println!("== arm ==\n{}\n", arm_line(arm, fallback));
        println!("== prompt ==\n{}\n", prompt.text);
        println!("== reply ==\n(dry run: provider not called)\n");
        println!("== parsed ==\n(dry run)");
        return Ok(());
    }
    let (arm, prompt, fallback, reply, parsed, correct) = if ex.gold_label().is_some() {
        let p = pipeline.answer_question(&ex, sel)?;
        (p.arm, p.prompt, p.fallback_used, p.reply, p.parsed, Some(p.correct))
    } else {
        let (arm, prompt, fallback) = pipeline.build_prompt(&ex, sel)?;
        let reply = client.complete(&LlmRequest::new(prompt.text.clone()))?;
        let parsed = parse_answer(&reply.text, &ex.context.choices);
        (arm, prompt, fallback, reply.text, parsed, None)
    };
    println!("== arm ==\n{}\n", arm_line(arm, fallback));
    println!("== prompt ==\n{}\n", prompt.text);
    println!("== reply ==\n{reply}\n");
    let label = parsed.label.as_deref().unwrap_or("-");
    match correct {
        Some(c) => println!("== parsed ==\nlabel={label} parse_ok={} correct={c}", parsed.parse_ok),
        None => println!("== parsed ==\nlabel={label} parse_ok={}", parsed.parse_ok),
    }
    Ok(())
}
