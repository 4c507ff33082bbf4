//! `pref-teach` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pref_teach::domain::{load_corpus, save_corpus, CorpusStats};
use pref_teach::eval::evaluate;
use pref_teach::kb::KbFilter;
use pref_teach::nlu::{train_with_progress, NluModel, TrainConfig};
use pref_teach::simulator::{estimate_transitions, generate_corpus, seed_dialogues, CorpusConfig, VariationConfig};

use crate::chat::{run_chat, ChatOptions};
use crate::config::{Engine, ServiceConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "pref-teach", version, about = "Teach an assistant your preferences by talking to it")]
pub struct Cli {
    /// TOML config file for the service, chat and kb commands.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated corpus.
    Simulate(SimulateArgs),
    /// Train a model bundle on a corpus.
    Train(TrainArgs),
    /// Evaluate a bundle on a corpus, teacher forced.
    Eval(EvalArgs),
    /// Inspect the preference store.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Chat in the terminal.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Chance that a task opens with an unhappy-path event.
    #[arg(long)]
    pub error_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub catalog_features: Toggle,
    /// Encoder width.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Machine-readable report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Print a user's records as JSON.
    Dump {
        #[arg(long)]
        user: String,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// List users with stored data.
    Users {
        #[arg(long)]
        kb: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default)]
pub struct EngineArgs {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Preference store directory.
    #[arg(long)]
    pub kb: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long, default_value = "local")]
    pub user: String,
    /// Corpus file finished sessions are appended to.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Print each agent step with its probability.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub engine: EngineArgs,
}

fn merged(config: Option<&Path>, args: &EngineArgs) -> anyhow::Result<ServiceConfig> {
    let mut c = ServiceConfig::load(config)?;
    if args.bundle.is_some() {
        c.bundle = args.bundle.clone();
    }
    if args.schema.is_some() {
        c.schema = args.schema.clone();
    }
    if args.kb.is_some() {
        c.kb_dir = args.kb.clone();
    }
    Ok(c)
}

fn schema_of(path: &Option<PathBuf>) -> anyhow::Result<pref_teach::domain::DomainSchema> {
    ServiceConfig { schema: path.clone(), ..Default::default() }.load_schema()
}

pub fn simulate(args: &SimulateArgs, out: &mut impl Write) -> anyhow::Result<()> {
    let schema = schema_of(&args.schema)?;
    let mut variation = VariationConfig::default();
    if let Some(r) = args.error_rate {
        variation.error_injection_rate = r;
    }
    variation.validate()?;
    let tm = estimate_transitions(&seed_dialogues(&schema)?, variation.mixing_ratio, &schema)?;
    let config = CorpusConfig { n_dialogues: args.n, variation, seed: args.seed };
    let (dialogues, stats) = generate_corpus(&schema, &config, &tm)?;
    save_corpus(&args.out, &dialogues).with_context(|| format!("writing {}", args.out.display()))?;
    write!(out, "{}", CorpusStats::table(&[("simulated", stats)]))?;
    writeln!(out, "wrote {} dialogues to {}", dialogues.len(), args.out.display())?;
    Ok(())
}

pub fn train(args: &TrainArgs, out: &mut impl Write) -> anyhow::Result<()> {
    let schema = schema_of(&args.schema)?;
    let corpus = load_corpus(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let mut config = TrainConfig::default();
    config.epochs = args.epochs.unwrap_or(config.epochs);
    config.lr = args.lr.unwrap_or(config.lr);
    config.seed = args.seed.unwrap_or(config.seed);
    config.network.encoder.catalog_features = args.catalog_features == Toggle::On;
    if let Some(d) = args.dim {
        config.network.encoder.dim = d;
    }
    let bundle = train_with_progress(&schema, &corpus, &config, |s| {
        eprintln!("epoch {:>3}  loss {:.4}  (ner {:.4} ap {:.4} af {:.4})", s.epoch + 1, s.mean_loss, s.losses.ner, s.losses.ap, s.losses.af);
    })?;
    bundle.save(&args.out)?;
    writeln!(out, "trained on {} dialogues; {} parameters; wrote {}", corpus.len(), bundle.params.len(), args.out.display())?;
    Ok(())
}

pub fn eval(args: &EvalArgs, out: &mut impl Write) -> anyhow::Result<()> {
    let schema = schema_of(&args.schema)?;
    let model = NluModel::load(&args.bundle, &schema)?;
    let corpus = load_corpus(&args.corpus)?;
    let report = evaluate(&model, &schema, &corpus)?;
    write!(out, "{report}")?;
    if let Some(p) = &args.report {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

pub fn kb(config: Option<&Path>, command: &KbCommand, out: &mut impl Write) -> anyhow::Result<()> {
    let (dir, user) = match command {
        KbCommand::Dump { user, kb } => (kb, Some(user)),
        KbCommand::Users { kb } => (kb, None),
    };
    let mut c = ServiceConfig::load(config)?;
    if dir.is_some() {
        c.kb_dir = dir.clone();
    }
    if c.kb_dir.is_none() {
        bail!("no preference store directory; pass --kb or set kb_dir in the config");
    }
    let store = c.open_store(&c.load_schema()?)?;
    match user {
        Some(u) => writeln!(out, "{}", serde_json::to_string_pretty(&store.retrieve_kb(u, &KbFilter::default())?)?)?,
        None => {
            for u in store.users()? {
                writeln!(out, "{u}")?;
            }
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let config = cli.config.as_deref();
    match cli.command {
        Command::Simulate(a) => simulate(&a, &mut out),
        Command::Train(a) => train(&a, &mut out),
        Command::Eval(a) => eval(&a, &mut out),
        Command::Kb { command } => kb(config, &command, &mut out),
        Command::Serve(a) => {
            let mut c = merged(config, &a.engine)?;
            if let Some(b) = a.bind {
                c.bind = b;
            }
            let engine = Engine::from_config(&c)?;
            tokio::runtime::Runtime::new()?.block_on(crate::service::serve(&c, engine))
        }
        Command::Chat(a) => {
            let c = merged(config, &a.engine)?;
            let engine = Engine::from_config(&c)?;
            let options = ChatOptions { trace: a.trace, transcript: a.transcript, session_id: None };
            run_chat(&engine, &a.user, std::io::stdin().lock(), &mut out, &options)?;
            if c.kb_dir.is_none() {
                eprintln!("note: preferences were kept in memory; pass --kb to persist them");
            }
            Ok(())
        }
    }
}

