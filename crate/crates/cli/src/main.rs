//! `advrestore` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use advrestore::attack::Variant;
use advrestore::experiment::{Experiment, ExperimentConfig, ModelOverrides};
use advrestore::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "advrestore",
    version,
    about = "Adversarial restoration attacks on toy face models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic face dataset.
    GenData,
    /// Train the frozen autoencoder.
    TrainAutoencoder,
    /// Train the conditional restoration diffusion model.
    TrainRldm,
    /// Train surrogate, victim and adversarially trained victim models.
    TrainFr,
    /// Craft adversarial examples for every attack pair.
    Attack,
    /// Score the attack outputs and write the report.
    Evaluate,
    /// Run every stage and print the report.
    ReproduceReport,
}

#[derive(Debug, clap::Args)]
struct Options {
    /// TOML experiment configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Surrogate checkpoint used by attack and evaluate.
    #[arg(long, global = true)]
    surrogate: Option<PathBuf>,
    /// Comma-separated victim checkpoints used by evaluate.
    #[arg(long, global = true, value_delimiter = ',')]
    victims: Option<Vec<PathBuf>>,
    /// Attack variants (fim, dfanet, advrestore-fim, advrestore-dfanet).
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_variant)]
    variant: Option<Vec<Variant>>,
    /// L∞ budget on the [0, 1] pixel scale; fractions such as 8/255 are accepted.
    #[arg(long, global = true, value_parser = parse_fraction)]
    rho: Option<f64>,
    /// Sign-step size; fractions such as 1/255 are accepted.
    #[arg(long, global = true, value_parser = parse_fraction)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    n_max: Option<usize>,
    #[arg(long, global = true)]
    ddim_steps: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let bad = || format!("{s:?} is not a number or fraction");
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            );
            if b == 0.0 {
                return Err(bad());
            }
            Ok(a / b)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

impl Options {
    fn resolve(&self) -> Result<(ExperimentConfig, ModelOverrides), Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
                Error::MissingArtifact(p) => Error::Config(format!("config file {} not found", p.display())),
                other => other,
            })?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.variant {
            cfg.attack.variants = v.clone();
        }
        if let Some(v) = self.rho {
            cfg.attack.rho = v;
        }
        if let Some(v) = self.beta {
            cfg.attack.beta = v;
        }
        if let Some(v) = self.n_max {
            cfg.attack.n_max = v;
        }
        if let Some(v) = self.ddim_steps {
            cfg.schedule.ddim_steps = v;
        }
        let overrides = ModelOverrides {
            surrogate: self.surrogate.clone(),
            victims: self.victims.clone(),
        };
        Ok((cfg, overrides))
    }
}

/// Exit status and short tag for each failure class.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Invalid { .. } | Error::Diverged(_) | Error::Autodiff(_) => (1, "stage-failed"),
        Error::Config(_) => (3, "config"),
        Error::MissingArtifact(_) => (4, "missing-artifact"),
        Error::Checkpoint(_) | Error::Pgm { .. } => (5, "corrupt-artifact"),
        Error::Locked(_) => (6, "locked"),
        Error::Io { .. } => (7, "io"),
    }
}

fn run(cli: &Cli) -> Result<String, Error> {
    let (cfg, overrides) = cli.opts.resolve()?;
    let exp = Experiment::open(cfg)?;
    let out = exp.layout().root().display().to_string();
    Ok(match cli.command {
        Command::GenData => {
            let ds = exp.gen_data()?;
            format!(
                "gen-data: {} images, {} attack pairs in {out}",
                ds.records.len(),
                ds.manifest.attack_pairs.len()
            )
        }
        Command::TrainAutoencoder => {
            let s = exp.train_autoencoder()?;
            format!("train-autoencoder: test reconstruction PSNR {:.2} dB", s.test_psnr)
        }
        Command::TrainRldm => {
            let s = exp.train_rldm()?;
            format!(
                "train-rldm: restored PSNR {:.2} dB vs degraded {:.2} dB",
                s.restored_psnr, s.degraded_psnr
            )
        }
        Command::TrainFr => {
            let models = exp.train_fr()?;
            models
                .iter()
                .map(|m| {
                    format!(
                        "train-fr: {} threshold {:.4} accuracy {:.1}%",
                        m.name,
                        m.threshold.threshold,
                        100.0 * m.accuracy
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Attack => {
            let results = exp.attack(&overrides)?;
            results
                .iter()
                .map(|(v, pairs)| format!("attack: {} on {} pairs", v.flag(), pairs.len()))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Evaluate => exp.evaluate(&overrides)?,
        Command::ReproduceReport => exp.reproduce_report()?,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, tag) = classify(&e);
            eprintln!("error[{tag}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
