//! Subcommand-driven experiment runner: dataset generation, training,
//! low-shot domain adaptation, and evaluation.
//!
//! Exit codes: 0 success, 2 config error, 3 non-finite loss, 4 parameter-
//! partition violation, 5 missing inputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcrl::config::RunConfig;
use gcrl::error::GcrlError;
use gcrl::runner::{self, AdaptScope, EvalArgs};
use gcrl::simdata::DOMAIN_MSDS;

#[derive(Parser)]
#[command(
    name = "gcrl",
    about = "Causal trajectory forecasting: generate | train | adapt | eval",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigOpts {
    /// Config file of key=value lines applied over the dataset defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset family providing the baseline defaults.
    #[arg(long, default_value = "synthetic")]
    dataset: String,

    /// Named profile; `desk` shrinks counts/epochs for CPU-scale runs.
    #[arg(long)]
    profile: Option<String>,

    /// Individual key=value overrides (repeatable), applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run seed (shorthand for --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOpts {
    fn resolve(&self) -> gcrl::Result<RunConfig> {
        let mut cfg = RunConfig::for_dataset(&self.dataset)?;
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(profile) = &self.profile {
            cfg.apply_profile(profile)?;
        }
        cfg.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic circle-crossing domains.
    Generate {
        #[command(flatten)]
        opts: ConfigOpts,

        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,

        /// Domains to generate (default: the standard eight).
        #[arg(long, value_delimiter = ',')]
        msd: Option<Vec<f64>>,

        /// Scenes per training split (shorthand for --set count_train=N).
        #[arg(long)]
        count_train: Option<usize>,
    },

    /// Train a model; writes best.ckpt, loss.csv, and the config snapshot.
    Train {
        #[command(flatten)]
        opts: ConfigOpts,

        /// Dataset root produced by `generate`.
        #[arg(long)]
        data: PathBuf,

        /// Run output directory.
        #[arg(long)]
        out: PathBuf,

        /// Training domains (shorthand for --set train_msd=...).
        #[arg(long, value_delimiter = ',')]
        train_msd: Option<Vec<f64>>,

        /// Epoch count override.
        #[arg(long)]
        epochs: Option<usize>,

        /// Prior strategy (flow | gaussian).
        #[arg(long)]
        prior: Option<String>,

        /// Latent usage (both | s-only | z-only).
        #[arg(long)]
        latent_mode: Option<String>,

        /// Drop the reconstruction term from the objective.
        #[arg(long)]
        no_reconstruction: bool,

        /// Train with the velocity-noise channel at these intensities.
        #[arg(long, value_delimiter = ',')]
        noise_train_alphas: Option<Vec<f64>>,
    },

    /// Low-shot adaptation of a trained checkpoint to a target domain.
    Adapt {
        /// Source checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,

        /// Dataset root.
        #[arg(long)]
        data: PathBuf,

        /// Target domain separation distance.
        #[arg(long)]
        msd: f64,

        /// Number of 64-scene batches to fine-tune on (0 = no-op copy).
        #[arg(long, default_value_t = 6)]
        batches: usize,

        /// adaptable-set | gmm-weights-only
        #[arg(long, default_value = "gmm-weights-only")]
        scope: String,

        /// Output directory for adapted.ckpt.
        #[arg(long)]
        out: PathBuf,

        /// key=value overrides (e.g. adapt_epochs=50).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },

    /// Evaluate a checkpoint: best-of-N ADE/FDE, noise sweeps, MCC.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,

        /// Dataset root.
        #[arg(long)]
        data: PathBuf,

        /// Output directory for metrics.csv.
        #[arg(long)]
        out: PathBuf,

        /// Domains to evaluate (default: the checkpoint's test_msd).
        #[arg(long, value_delimiter = ',')]
        msd: Option<Vec<f64>>,

        /// Samples per agent for best-of-N.
        #[arg(long, default_value_t = 100)]
        best_of: usize,

        /// Noise-intensity sweep; each α gets its own metric rows.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,

        /// Second checkpoint: also emit MCC between the two models' latents.
        #[arg(long)]
        mcc: Option<PathBuf>,

        /// MCC mode (weak | strong).
        #[arg(long, default_value = "weak")]
        mode: String,

        /// Where predictions draw s from (posterior | prior).
        #[arg(long, default_value = "posterior")]
        s_from: String,
    },
}

fn exit_code_for(err: &GcrlError) -> u8 {
    match err {
        GcrlError::Config(_) => 2,
        GcrlError::NonFinite { .. } => 3,
        GcrlError::Partition(_) => 4,
        GcrlError::MissingInput(_) => 5,
        _ => 1,
    }
}

fn run() -> gcrl::Result<()> {
    match Cli::parse().command {
        Command::Generate {
            opts,
            out,
            msd,
            count_train,
        } => {
            let mut cfg = opts.resolve()?;
            if let Some(n) = count_train {
                cfg.count_train = n;
            }
            let domains = msd.unwrap_or_else(|| DOMAIN_MSDS.to_vec());
            runner::run_generate(&cfg, &domains, &out)?;
            println!("generated {} domain(s) under {}", domains.len(), out.display());
        }
        Command::Train {
            opts,
            data,
            out,
            train_msd,
            epochs,
            prior,
            latent_mode,
            no_reconstruction,
            noise_train_alphas,
        } => {
            let mut cfg = opts.resolve()?;
            if let Some(msds) = train_msd {
                cfg.train_msd = msds;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(p) = prior {
                cfg.prior = p;
            }
            if let Some(lm) = latent_mode {
                cfg.latent_mode = lm;
            }
            if no_reconstruction {
                cfg.use_reconstruction = false;
            }
            if let Some(alphas) = noise_train_alphas {
                cfg.noise_train_alphas = alphas;
            }
            cfg.validate()?;
            let outcome = runner::run_train(&cfg, &data, &out)?;
            println!(
                "trained {} epochs; best val ADE {:.4}; checkpoint {}",
                cfg.epochs,
                outcome.best_val_ade,
                outcome.checkpoint.display()
            );
        }
        Command::Adapt {
            checkpoint,
            data,
            msd,
            batches,
            scope,
            out,
            set,
        } => {
            let scope = AdaptScope::parse(&scope)?;
            let outcome = runner::run_adapt(&checkpoint, &data, msd, scope, batches, &out, &set)?;
            println!(
                "adapted on {batches} batch(es); {} scalar(s) changed; checkpoint {}",
                outcome.changed_scalars,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            msd,
            best_of,
            alpha,
            mcc,
            mode,
            s_from,
        } => {
            let rows = runner::run_eval(&EvalArgs {
                checkpoint,
                data_root: data,
                msd: msd.unwrap_or_default(),
                best_of,
                alphas: alpha.unwrap_or_default(),
                mcc_with: mcc,
                mcc_mode: mode,
                s_from,
                out_dir: out.clone(),
            })?;
            for r in &rows {
                println!(
                    "{}\t{:.6}\t{}{}",
                    r.metric,
                    r.value,
                    r.env,
                    r.alpha.map_or(String::new(), |a| format!("\talpha={a}"))
                );
            }
            println!("metrics written to {}", out.join("metrics.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
