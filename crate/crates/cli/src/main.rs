use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use debias_core::corpus::{parse_records, synthesize_splits, tokenize, StyleLabel, TextExample, Vocabulary};
use debias_core::decoder::mask_sentence;
use debias_core::eval::format_table;
use debias_core::pipeline::{
    evaluate, load_splits, neutral_ids, train_models, transfer_examples, write_splits, CheckpointStore, Models,
    RunConfig, Splits, StageMode, Variant,
};
use debias_core::Error;

/// Explainer-masked, latent-guided text debiasing.
#[derive(Parser)]
#[command(name = "debias", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults are used when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides `paths.checkpoints`.
    #[arg(long, global = true, env = "DEBIAS_CHECKPOINTS")]
    checkpoints: Option<PathBuf>,
    /// Overrides `paths.reports`.
    #[arg(long, global = true)]
    reports: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/dev/test corpus to `paths.data`.
    Synth,
    /// Train every stage, reusing checkpoints whose inputs are unchanged.
    Train,
    /// Rewrite sentences: `original<TAB>transferred<TAB>n_masked` per line.
    Transfer {
        /// `label<TAB>text` lines; the test split when absent, `-` for stdin.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Decode without the latent vector.
        #[arg(long)]
        no_latent: bool,
        /// Use the decoder trained without the classifier term (needs --no-latent).
        #[arg(long, requires = "no_latent")]
        no_class_constraint: bool,
    },
    /// Print `token<TAB>weight<TAB>masked` for each token of each sentence.
    Explain {
        /// Sentence to explain; otherwise `--input` lines are used.
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score the test split with every decoder variant and write reports.
    Evaluate,
}

fn resolved_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.data {
        cfg.paths.data = p.clone();
    }
    if let Some(p) = &c.checkpoints {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &c.reports {
        cfg.paths.reports = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run_config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Splits, Error> {
    cfg.validate_data_paths()?;
    load_splits(&cfg.paths.data, cfg.data.max_len, cfg.data.min_count)
}

fn open_models(cfg: &RunConfig, data: &Splits, mode: StageMode) -> Result<Models, Error> {
    train_models(cfg, data, &CheckpointStore::at(&cfg.paths.checkpoints, mode))
}

fn read_examples(input: Option<&Path>, vocab: &Vocabulary, cfg: &RunConfig, data: &Splits) -> Result<Vec<TextExample>, Error> {
    let Some(path) = input else { return Ok(data.test.examples.clone()) };
    let text = if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(path)?
    };
    let mut out = Vec::new();
    for (label, t) in parse_records(path, &text)? {
        match tokenize(&t, vocab, cfg.data.max_len) {
            Ok(tokens) => out.push(TextExample::new(tokens, label)),
            Err(Error::EmptyText) => log::warn!("skipping empty sentence"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn emit(output: Option<&Path>, s: &str) -> Result<(), Error> {
    match output {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, s)?;
        }
        None => io::stdout().write_all(s.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolved_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let lex = cfg.lexicon()?;
            let splits: Splits =
                synthesize_splits(cfg.seed, cfg.data.n_train, cfg.data.n_dev, cfg.data.n_test, &lex)?.into();
            write_splits(&cfg.paths.data, &splits)?;
            write_resolved(&cfg, &cfg.paths.data)?;
            println!(
                "wrote {} / {} / {} examples, vocabulary {} to {}",
                splits.train.len(),
                splits.dev.len(),
                splits.test.len(),
                splits.vocab().len(),
                cfg.paths.data.display()
            );
        }
        Command::Train => {
            let data = load_data(&cfg)?;
            let models = open_models(&cfg, &data, StageMode::Train)?;
            write_resolved(&cfg, &cfg.paths.checkpoints)?;
            for m in &models.manifests {
                let state = if m.trained { "trained" } else { "reused" };
                println!("{:<34} {:<8} {}", m.stage, state, &m.checkpoint_sha256[..16]);
            }
        }
        Command::Transfer { input, output, no_latent, no_class_constraint } => {
            let data = load_data(&cfg)?;
            let models = open_models(&cfg, &data, StageMode::LoadOnly)?;
            let mut flags = cfg.ablation;
            flags.no_latent |= no_latent;
            flags.no_class_constraint |= no_class_constraint;
            let variant = Variant::from_flags(flags);
            let vocab = data.vocab().clone();
            let examples = read_examples(input.as_deref(), &vocab, &cfg, &data)?;
            let outs = transfer_examples(&models, &cfg, &examples, variant)?;
            let mut s = String::new();
            for o in &outs {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}",
                    vocab.decode(&o.masked.original.tokens),
                    vocab.decode(&o.tokens),
                    o.masked.masked_positions.len()
                );
            }
            emit(output.as_deref(), &s)?;
            if let Some(dir) = output.as_deref().and_then(Path::parent) {
                write_resolved(&cfg, dir)?;
            }
        }
        Command::Explain { text, input } => {
            let data = load_data(&cfg)?;
            let models = open_models(&cfg, &data, StageMode::LoadOnly)?;
            let vocab = data.vocab().clone();
            let examples = match text {
                Some(t) => vec![TextExample::new(tokenize(&t, &vocab, cfg.data.max_len)?, StyleLabel::Biased)],
                None => read_examples(input.as_deref(), &vocab, &cfg, &data)?,
            };
            let tcfg = models.transfer_config(&cfg, Variant::Full);
            let mut s = String::new();
            for (k, x) in examples.iter().enumerate() {
                let (attr, masked) = mask_sentence(x, &models.classifier, &tcfg)?;
                if k > 0 {
                    s.push('\n');
                }
                for (i, &t) in masked.original.tokens.iter().enumerate() {
                    let _ = writeln!(s, "{}\t{:.4}\t{}", vocab.surface(t), attr.weights[i], masked.is_masked(i));
                }
            }
            emit(None, &s)?;
        }
        Command::Evaluate => {
            let data = load_data(&cfg)?;
            let models = open_models(&cfg, &data, StageMode::LoadOnly)?;
            let neutral = neutral_ids(&cfg.lexicon()?, data.vocab());
            let ev = evaluate(&models, &cfg, &data, &neutral)?;
            let dir = &cfg.paths.reports;
            fs::create_dir_all(dir)?;
            let kv: Vec<String> = ev.rows.iter().map(|r| r.to_kv()).collect();
            fs::write(dir.join("metrics.txt"), kv.join("\n"))?;
            fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&ev.rows)?)?;
            write_resolved(&cfg, dir)?;
            print!("{}", format_table(&ev.rows));
            println!(
                "classifier accuracy on test: pipeline {:.2}, evaluation {:.2}",
                100.0 * ev.classifier_accuracy,
                100.0 * ev.eval_classifier_accuracy
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingStage(_) => 3,
        Error::Config(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
