use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use rtn_core::datagen::{generate_corpus, Preset, SyntheticConfig, CORPUS_FILES};
use rtn_core::pipeline::{self, file_digest, PipelineConfig, Stage, VERSION};

/// Incident return-to-normal duration modelling.
#[derive(Parser, Debug)]
#[command(name = "rtn", version, about)]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (series CSV, incidents JSONL, manifest).
    Generate(GenerateArgs),
    /// Detect incident end times against the seasonal baseline.
    Label(RunArgs),
    /// Label, split and fit every static and dynamic model family.
    Train(RunArgs),
    /// Train (or reuse) all models and score them on the test split.
    Evaluate(RunArgs),
    /// Evaluate and attribute the sliding-window network's predictions.
    Explain(RunArgs),
    /// Run every stage end to end.
    Pipeline(RunArgs),
    /// Print the default pipeline configuration as JSON.
    DefaultConfig {
        /// Print the compact smoke configuration instead.
        #[arg(long)]
        smoke: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Linear,
    Nonlinear,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output directory (created when missing).
    #[arg(short, long)]
    out: PathBuf,
    /// JSON generator configuration; flags below override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Start from a covariate-effect preset instead of the defaults.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    links: Option<usize>,
    #[arg(long)]
    weeks: Option<usize>,
    /// Override any field: `--set key.sub=value` (value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Corpus directory written by `generate`.
    #[arg(long)]
    corpus: PathBuf,
    /// Work directory holding stage artifacts and manifests.
    #[arg(short, long)]
    work: PathBuf,
    /// JSON pipeline configuration; flags below override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Start from the compact smoke configuration.
    #[arg(long)]
    smoke: bool,
    /// Root seed for splits, forests and network searches.
    #[arg(long)]
    seed: Option<u64>,
    /// Random-search trials per network.
    #[arg(long)]
    trials: Option<usize>,
    /// Override any field: `--set nn.train.max_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("`{assignment}` is not KEY=VALUE"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().with_context(|| format!("`{key}`: `{part}` is not inside an object"))?;
        if !obj.contains_key(*part) {
            bail!("unknown configuration key `{key}`");
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

fn resolve<T: serde::Serialize + serde::de::DeserializeOwned>(base: T, file: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut v, over);
    }
    for s in sets {
        apply_set(&mut v, s)?;
    }
    Ok(serde_json::from_value(v)?)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let base = match a.preset {
        Some(PresetArg::Linear) => SyntheticConfig::preset(Preset::Linear),
        Some(PresetArg::Nonlinear) => SyntheticConfig::preset(Preset::Nonlinear),
        None => SyntheticConfig::default(),
    };
    let mut cfg = resolve(base, a.config.as_deref(), &a.sets)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.links {
        cfg.n_links = n;
    }
    if let Some(w) = a.weeks {
        cfg.weeks = w;
    }
    let corpus = generate_corpus(&cfg)?;
    corpus.save(&a.out)?;
    let outputs = CORPUS_FILES
        .iter()
        .map(|f| Ok((f.to_string(), file_digest(&a.out.join(f))?)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = serde_json::json!({
        "version": VERSION,
        "command": "generate",
        "config": cfg,
        "inputs": [],
        "outputs": outputs,
    });
    std::fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("{} links, {} incidents -> {}", corpus.links.len(), corpus.incidents().count(), a.out.display());
    Ok(())
}

fn cmd_run(a: &RunArgs, until: Stage, force_explain: bool) -> Result<()> {
    let base = if a.smoke { pipeline::smoke_config() } else { PipelineConfig::default() };
    let mut cfg = resolve(base, a.config.as_deref(), &a.sets)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trials {
        cfg.nn.trials = t;
    }
    if force_explain {
        cfg.explain.enabled = true;
    }
    let out = pipeline::run(&a.corpus, &a.work, &cfg, until)?;
    for (stage, cached) in &out.stages {
        println!("{:<12} {}", stage.name(), if *cached { "cached" } else { "done" });
    }
    if let Some(ev) = &out.evaluation {
        println!("{} report rows -> {}", ev.report.entries.len(), a.work.join(Stage::Evaluate.name()).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::new().parse_filters(level).init();
    if let Some(j) = cli.jobs {
        if !rtn_core::par::set_jobs(j) {
            log::warn!("--jobs {j} ignored: thread pool unavailable");
        }
    }
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Label(a) => cmd_run(a, Stage::Label, false),
        Command::Train(a) => cmd_run(a, Stage::FitDynamic, false),
        Command::Evaluate(a) => cmd_run(a, Stage::Evaluate, false),
        Command::Explain(a) => cmd_run(a, Stage::Explain, true),
        Command::Pipeline(a) => cmd_run(a, Stage::Explain, false),
        Command::DefaultConfig { smoke } => {
            let cfg = if *smoke { pipeline::smoke_config() } else { PipelineConfig::default() };
            serde_json::to_string_pretty(&cfg).map(|s| println!("{s}")).map_err(Into::into)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
