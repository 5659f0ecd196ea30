use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sqworld::config::{comment_block, RunConfig};
use sqworld::eval::{evaluate, export_forecast};
use sqworld::gradsuite::run_suite;
use sqworld::model::{Sample, WorldModel};
use sqworld::nn::Checkpoint;
use sqworld::train::{held_out_samples, model_from_checkpoint, training_samples, Trainer};
use sqworld::world::{write_dataset, SceneSequence};

#[derive(Parser, Debug)]
#[command(name = "sqworld", version, about = "Sparse-query 4D occupancy world model on synthetic driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from (pretrain, train) or to load (eval, export).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Write `train.sequences` synthetic sequences and their manifests.
    Generate,
    /// Run only the pretraining epochs.
    Pretrain,
    /// Run the full pretraining + end-to-end schedule.
    Train,
    /// Score a checkpoint on held-out sequences.
    Eval,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Write forecast point clouds and the planned trajectory for one held-out sequence.
    Export {
        /// Held-out sequence index.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
    },
}

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    GradCheck,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::GradCheck => 3,
        }
    }
}

impl From<sqworld::Error> for Failure {
    fn from(e: sqworld::Error) -> Self {
        match e {
            sqworld::Error::Config { .. } => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

/// The effective config and the text it was read from.
struct Loaded {
    cfg: RunConfig,
    text: String,
}

fn load_config(cli: &Cli, ck: Option<&Checkpoint>) -> Result<Loaded, Failure> {
    let text = match (&cli.config, ck) {
        (Some(path), _) => std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?,
        (None, Some(ck)) => ck.meta_str("config")?.to_string(),
        (None, None) => RunConfig::default().to_toml(),
    };
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| usage(e))?;
    match (cli.seed, ck) {
        (Some(seed), _) => cfg.seed = seed,
        // a checkpoint remembers an earlier override
        (None, Some(ck)) if cli.config.is_none() => cfg.seed = ck.meta_parse("seed")?,
        _ => {}
    }
    if let Some(dir) = &cfg.data_dir {
        if !dir.is_dir() {
            return Err(usage(format!("data_dir {} does not exist; run `sqworld generate` first", dir.display())));
        }
    }
    Ok(Loaded { cfg, text })
}

fn read_checkpoint(path: Option<&PathBuf>, required: bool) -> Result<Option<Checkpoint>, Failure> {
    match path {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("checkpoint {} not found", p.display())));
            }
            Ok(Some(Checkpoint::load(p)?))
        }
        None if required => Err(usage("this command needs --checkpoint PATH")),
        None => Ok(None),
    }
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Echoes the config next to the outputs, once per directory.
fn echo_config(dir: &Path, text: &str) -> Outcome {
    write_text(&dir.join("config.toml"), text)
}

fn generate(cli: &Cli) -> Outcome {
    let Loaded { cfg, text } = load_config(cli, None)?;
    let dir = out_dir(cli, "data")?;
    let t0 = Instant::now();
    let dirs = write_dataset(&dir, &cfg.world, cfg.seed, cfg.train.sequences)?;
    echo_config(&dir, &text)?;
    println!(
        "wrote {} sequences (seeds {}..{}) to {} in {:.1}s",
        dirs.len(),
        cfg.seed,
        cfg.seed + dirs.len() as u64,
        dir.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train(cli: &Cli, pretrain_only: bool) -> Outcome {
    let ck = read_checkpoint(cli.checkpoint.as_ref(), false)?;
    let Loaded { cfg, text } = load_config(cli, ck.as_ref())?;
    let dir = out_dir(cli, "runs")?;
    let mut trainer = match &ck {
        Some(ck) => Trainer::resume(cfg, text.clone(), ck)?,
        None => Trainer::new(cfg, text.clone())?,
    };
    trainer = trainer.with_output(&dir)?;
    echo_config(&dir, &text)?;
    let data = training_samples(&trainer.cfg)?;
    let val = held_out_samples(&trainer.cfg, trainer.cfg.train.validation_sequences)?;
    let until = if pretrain_only { trainer.cfg.train.pretrain_epochs } else { trainer.total_epochs() };
    if trainer.epoch >= until {
        println!("checkpoint is already at epoch {}; nothing to do", trainer.epoch);
        return Ok(());
    }
    let t0 = Instant::now();
    trainer.run(until, &data, &val, |r| {
        let mut line = format!("epoch {:>3} {:<9} steps {:>5} lr {:.2e} loss {:.3}", r.epoch, format!("{:?}", r.phase), r.steps, r.lr, r.total);
        if let Some(v) = &r.validation {
            line += &format!(" | val loss {:.3} miou {:.3}", v.total, v.report.miou.iter().sum::<f64>() / v.report.miou.len() as f64);
        }
        if let Some(c) = r.churn {
            line += &format!(" | churn {c:.3}");
        }
        println!("{line} ({:.1}s)", t0.elapsed().as_secs_f64());
    })?;
    println!("logs and checkpoints in {}", dir.display());
    Ok(())
}

fn trained_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<WorldModel<f64>, Failure> {
    model_from_checkpoint(cfg, ck).map_err(|e| Failure::Runtime(anyhow::Error::new(e).context("checkpoint does not fit the configured model")))
}

fn eval(cli: &Cli) -> Outcome {
    let ck = read_checkpoint(cli.checkpoint.as_ref(), true)?.expect("required");
    let Loaded { cfg, text } = load_config(cli, Some(&ck))?;
    let dir = out_dir(cli, "eval")?;
    let model = trained_model(&cfg, &ck)?;
    let samples = held_out_samples(&cfg, cfg.eval.sequences)?;
    let report = evaluate(&model, &samples, cfg.world.n_classes)?;
    let header = comment_block(&text);
    write_text(&dir.join("eval.csv"), &(header.clone() + &report.to_csv()))?;
    let table = report.to_table();
    write_text(&dir.join("eval.txt"), &(header + &table))?;
    print!("{table}");
    Ok(())
}

fn gradcheck(cli: &Cli) -> Outcome {
    let Loaded { cfg, text } = load_config(cli, None)?;
    let entries = run_suite(&cfg)?;
    let mut lines = format!("{:<16} {:>7} {:>12} {:>9}  result\n", "check", "entries", "max_rel_err", "tolerance");
    for e in &entries {
        lines += &format!(
            "{:<16} {:>7} {:>12.3e} {:>9.0e}  {}\n",
            e.name,
            e.report.checked,
            e.report.max_rel_err,
            e.tolerance,
            if e.passed() { "pass" } else { "FAIL" }
        );
    }
    print!("{lines}");
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
        write_text(&dir.join("gradcheck.txt"), &(comment_block(&text) + &lines))?;
    }
    if entries.iter().all(|e| e.passed()) {
        Ok(())
    } else {
        Err(Failure::GradCheck)
    }
}

fn export(cli: &Cli, sequence: usize) -> Outcome {
    let ck = read_checkpoint(cli.checkpoint.as_ref(), true)?.expect("required");
    let Loaded { cfg, text } = load_config(cli, Some(&ck))?;
    let dir = out_dir(cli, "export")?;
    let model = trained_model(&cfg, &ck)?;
    let seed = cfg.seed.wrapping_add(cfg.eval.seed_offset).wrapping_add(sequence as u64);
    let sample = Sample::from_sequence(&SceneSequence::generate(seed, &cfg.world)?, &cfg.world)?;
    let pred = model.predict(&sample)?;
    let files = export_forecast(&pred, &dir, &text)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match cli.command {
        Command::Generate => generate(cli),
        Command::Pretrain => train(cli, true),
        Command::Train => train(cli, false),
        Command::Eval => eval(cli),
        Command::Gradcheck => gradcheck(cli),
        Command::Export { sequence } => export(cli, sequence),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) => eprintln!("error: {e:#}"),
                Failure::Runtime(e) => eprintln!("runtime error: {e:#}"),
                Failure::GradCheck => eprintln!("gradient check failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
