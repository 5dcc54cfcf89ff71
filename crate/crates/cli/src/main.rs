//! `advtta`: synthetic data, preprocessing, adversarial training, collapse
//! diagnostics, test-time adaptation and reporting from the command line.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime failures.

use advtta::config::{ExperimentConfig, Preset, ShiftSection};
use advtta::pipeline::{self, TttEvalOptions};
use advtta::ttt::Driver;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "advtta", version, about = "Adversarial shape priors for test-time adaptation of segmentors")]
struct Cli {
    /// Directory under which each invocation creates its run directory.
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: `desk` (64x64, small widths) or `full`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set train.max_epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> advtta::Result<ExperimentConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        ExperimentConfig::load(preset, self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic cohort.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Resample, crop, normalise and split a raw dataset.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Raw dataset directory (the `dataset/` of a synth-data run).
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the segmentor and discriminator (and the DAE prior).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Preprocessed dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Disable spectral normalisation and tanh in the discriminator.
        #[arg(long)]
        no_smoothness: bool,
        /// Do not feed corrupted masks to the discriminator as fakes.
        #[arg(long)]
        no_fake_anchors: bool,
    },
    /// Classify the discriminator loss trace of a training run.
    Diagnose {
        /// Training run directory.
        run_dir: PathBuf,
    },
    /// Adapt on every test slice of a training run and score before/after.
    TttEval {
        /// Training run directory.
        run_dir: PathBuf,
        /// Shape prior driving the adaptation.
        #[arg(long, value_parser = ["adversarial", "dae"])]
        driver: Option<String>,
        /// Adaptor updates per test image (0 disables adaptation).
        #[arg(long)]
        n_iter: Option<usize>,
        /// Acquisition shift, e.g. `gamma=1.5,blur=1,noise=0.05` or `none`.
        #[arg(long)]
        shift: Option<String>,
        /// Evaluate only the first N test slices.
        #[arg(long)]
        max_instances: Option<usize>,
        /// Seed override (defaults to the training run's seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare several ttt-eval runs in one table.
    Report {
        /// ttt-eval run directories.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> advtta::Result<()> {
    let root = &cli.runs_root;
    match cli.command {
        Command::SynthData { cfg } => {
            let run = pipeline::cmd_synth_data(&cfg.resolve(&[])?, root)?;
            println!("{}", run.path().display());
        }
        Command::Preprocess { cfg, dataset } => {
            let run = pipeline::cmd_preprocess(&cfg.resolve(&[])?, &dataset, root)?;
            println!("{}", run.path().display());
        }
        Command::Train { cfg, dataset, no_smoothness, no_fake_anchors } => {
            let mut extra = Vec::new();
            if no_smoothness {
                extra.push("train.smoothness_on=false".to_string());
            }
            if no_fake_anchors {
                extra.push("train.fake_anchors_on=false".to_string());
            }
            let run = pipeline::cmd_train(&cfg.resolve(&extra)?, &dataset, root)?;
            println!("{}", run.path().display());
        }
        Command::Diagnose { run_dir } => {
            let v = pipeline::cmd_diagnose(&run_dir)?;
            let e = &v.evidence;
            println!(
                "{:?} (tail {} epochs, tol {}): real_train {:.4} fake_train {:.4} real_val {:.4} fake_val {:.4}",
                v.verdict, v.tail, v.tol, e.real_train, e.fake_train, e.real_val, e.fake_val
            );
        }
        Command::TttEval { run_dir, driver, n_iter, shift, max_instances, seed } => {
            let opts = TttEvalOptions {
                driver: driver.as_deref().map(str::parse::<Driver>).transpose()?,
                n_iter,
                shift: shift.as_deref().map(ShiftSection::parse).transpose()?,
                max_instances,
                seed,
            };
            let run = pipeline::cmd_ttt_eval(&run_dir, &opts, root)?;
            for s in pipeline::read_summary(run.path())? {
                println!(
                    "{:<13} before {:.4} ± {:.4}  after {:.4} ± {:.4}  p = {}",
                    s.metric,
                    s.before_mean,
                    s.before_std,
                    s.after_mean,
                    s.after_std,
                    s.wilcoxon.map_or("n/a".to_string(), |w| format!("{:.3e}", w.p_value))
                );
            }
            println!("{}", run.path().display());
        }
        Command::Report { run_dirs } => {
            let run = pipeline::cmd_report(&run_dirs, root)?;
            println!("{}", run.path().join(pipeline::REPORT_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
