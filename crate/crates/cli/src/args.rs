use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "kgprompt",
    version,
    about = "Knowledge-graph grounded prompting for multiple-choice question answering",
    args_override_self = true
)]
pub struct Cli {
    /// File of `key=value` lines supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the path-finding policy with REINFORCE.
    TrainPolicy(TrainPolicyArgs),
    /// Train the prompt-format bandit against model feedback.
    TrainBandit(TrainBanditArgs),
    /// Answer a dataset and write an accuracy report.
    Evaluate(EvaluateArgs),
    /// Build, send and parse the prompt for a single question.
    Answer(AnswerArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    /// Knowledge graph as `head<TAB>relation<TAB>tail` lines.
    #[arg(long, value_name = "TSV")]
    pub graph: PathBuf,
    /// Entity and relation vectors (KGEB).
    #[arg(long, value_name = "KGEB")]
    pub embeddings: PathBuf,
    /// Vocabulary for --embeddings; defaults to the same path with a `.vocab` extension.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Question context vectors keyed by example id (KGEB).
    #[arg(long, value_name = "KGEB")]
    pub ctx_embeddings: Option<PathBuf>,
    /// Vocabulary for --ctx-embeddings; defaults to the same path with a `.vocab` extension.
    #[arg(long, value_name = "FILE")]
    pub ctx_vocab: Option<PathBuf>,
    /// Projection from path space to context space: a KGEB file whose rows are matrix rows.
    #[arg(long, value_name = "FILE")]
    pub projection: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RlArgs {
    /// Maximum actions per walk.
    #[arg(long, default_value_t = 4)]
    pub max_steps: usize,
    /// Hidden width of the policy network.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Edge orientation walks may follow.
    #[arg(long, default_value = "both", value_parser = ["forward", "backward", "both"])]
    pub direction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Http,
    Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    #[value(alias = "fact_match")]
    FactMatch,
    #[value(alias = "per_arm_bernoulli")]
    PerArmBernoulli,
    Contextual,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderArg::Sim)]
    pub provider: ProviderArg,
    /// Chat-completion URL (http provider).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (http provider).
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "KNOWGPT_API_KEY")]
    pub api_key_env: String,
    #[arg(long, default_value_t = 60.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = 5)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 4)]
    pub max_concurrent: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// First retry delay in milliseconds; later retries double it.
    #[arg(long, default_value_t = 1000)]
    pub retry_base_ms: u64,
    /// Response cache (JSONL). Evaluation with the http provider caches by default.
    #[arg(long, value_name = "FILE")]
    pub cache: Option<PathBuf>,
    /// Disable the response cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Simulated model behaviour (sim provider).
    #[arg(long, value_enum, default_value_t = OracleArg::FactMatch)]
    pub oracle: OracleArg,
    /// Comma-separated success probability per arm (per-arm-bernoulli).
    #[arg(long, value_delimiter = ',', value_name = "P,...")]
    pub arm_probs: Vec<f64>,
    /// Success probability for prompts without background (bernoulli oracles).
    #[arg(long, default_value_t = 0.0)]
    pub baseline_prob: f64,
    /// JSON oracle configuration; overrides the other oracle flags except the seed.
    #[arg(long, value_name = "JSON")]
    pub oracle_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Policy checkpoint (KGPL) for the walk-based arms.
    #[arg(long, value_name = "KGPL")]
    pub policy: Option<PathBuf>,
    /// Restrict arms to the subgraph extractor.
    #[arg(long, conflicts_with = "policy")]
    pub no_rl: bool,
    /// Dimension of hashed question vectors when --ctx-embeddings is absent.
    #[arg(long, default_value_t = 32)]
    pub context_dim: usize,
    /// Walks sampled per source entity by the walk-based extractor.
    #[arg(long, default_value_t = 4)]
    pub n_rollouts: usize,
    /// Node budget of the pruned two-hop subgraph.
    #[arg(long, default_value_t = 200)]
    pub node_budget: usize,
    /// Most triples placed in one prompt.
    #[arg(long, default_value_t = 40)]
    pub max_triples: usize,
    /// Let the model write graph descriptions instead of the fixed template.
    #[arg(long)]
    pub describe_with_llm: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainPolicyArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Training questions (JSONL).
    #[arg(long, value_name = "JSONL")]
    pub dataset: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "KGPL")]
    pub policy: PathBuf,
    /// Output training log; defaults to `<policy>.log.csv`.
    #[arg(long, value_name = "CSV")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub rl: RlArgs,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 0.99)]
    pub discount: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_reach: f64,
    #[arg(long, default_value_t = 0.5)]
    pub w_context: f64,
    #[arg(long, default_value_t = 0.5)]
    pub w_concise: f64,
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    pub optimizer: String,
    /// Decay of the running-mean reward baseline; 0 disables it.
    #[arg(long, default_value_t = 0.95)]
    pub baseline_decay: f64,
    /// Std-dev of the first-layer initialization.
    #[arg(long, default_value_t = 0.5)]
    pub init_scale: f64,
    /// Episodes aggregated per log row.
    #[arg(long, default_value_t = 1)]
    pub log_interval: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainBanditArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Training questions (JSONL).
    #[arg(long, value_name = "JSONL")]
    pub dataset: PathBuf,
    /// Output bandit state (KGMB).
    #[arg(long, value_name = "KGMB")]
    pub bandit: PathBuf,
    /// Existing state to continue from; never modified.
    #[arg(long, value_name = "KGMB")]
    pub resume: Option<PathBuf>,
    /// Output learning curve; defaults to `<bandit>.curve.csv`.
    #[arg(long, value_name = "CSV")]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub rounds: usize,
    /// Ridge regularizer of each arm.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Confidence parameter of the exploration width.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub rl: RlArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Knowgpt,
    Fixed,
    #[value(alias = "no_kg")]
    NoKg,
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    /// How the prompt format is chosen.
    #[arg(long, value_enum, default_value_t = ModeArg::Knowgpt)]
    pub mode: ModeArg,
    /// Arm index for --mode fixed (0-2 subgraph, 3-5 walks; triples, sentences, description).
    #[arg(long)]
    pub arm: Option<usize>,
    /// Trained bandit state for --mode knowgpt.
    #[arg(long, value_name = "KGMB")]
    pub bandit: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Test questions (JSONL).
    #[arg(long, value_name = "JSONL")]
    pub dataset: PathBuf,
    /// Output report (JSON).
    #[arg(long, value_name = "JSON")]
    pub report: PathBuf,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub rl: RlArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnswerArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Dataset to take the question from (with --id).
    #[arg(long, value_name = "JSONL", requires = "id")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset", conflicts_with = "question")]
    pub id: Option<String>,
    /// Inline question text.
    #[arg(long, required_unless_present = "id")]
    pub question: Option<String>,
    /// Inline choice as `LABEL=text`; repeat for each choice.
    #[arg(long = "choice", value_name = "LABEL=TEXT")]
    pub choices: Vec<String>,
    /// Entity named in the question; repeatable.
    #[arg(long = "source", value_name = "NAME")]
    pub sources: Vec<String>,
    /// Entity for a choice as `LABEL=name`; repeatable.
    #[arg(long = "target", value_name = "LABEL=NAME")]
    pub targets: Vec<String>,
    /// Correct label, needed by the sim provider.
    #[arg(long = "gold")]
    pub gold: Option<String>,
    /// Fact the fact-match oracle looks for.
    #[arg(long)]
    pub gold_fact: Option<String>,
    /// Print the prompt without calling the provider.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub rl: RlArgs,
    #[command(flatten)]
    pub provider: ProviderArgs,
}
