//! Command-line front end over [`crate::pipeline`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::error::{Error, Result};
use crate::pipeline::{validate_config, GridStage, Pipeline, PipelineConfig};
use crate::synth::SynthSpec;
use crate::training::Precision;

#[derive(Debug, Parser)]
#[command(name = "acfsev", version, about = "Speech-feature severity classification pipeline")]
pub struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; replaces every seed in the config.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for per-file stages (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Floating-point precision of training and inference.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Work directory; overrides `paths.work_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub work: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Segment,
    Session,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `<out>/corpus`.
    Synth {
        /// `default` or a TOML synth spec.
        #[arg(long, default_value = "default")]
        spec: String,
        /// Work directory receiving the corpus.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Ingest, segment and standardize feature series.
    Features,
    /// Compute segment ACFs and fit the standardizer on the training split.
    Acf,
    /// Train the dilated CNN segment classifier.
    TrainSegment,
    /// Export segment embeddings and segment predictions.
    Embed,
    /// Train the session-level LSTM on embeddings.
    TrainSession,
    /// Train the baseline CNN on raw segment features.
    TrainBaseline,
    /// Plurality vote over segment predictions.
    Vote,
    /// Metrics, confusion matrices and reports on the test split.
    Evaluate,
    /// Grid search over model hyperparameters.
    Gridsearch {
        #[arg(long, value_enum, default_value = "segment")]
        stage: StageArg,
    },
    /// Finite-difference gradient checks for every layer.
    Gradcheck,
    /// Run every stage from features through evaluation.
    RunAll,
    /// Check a config file and list every violation.
    ValidateConfig {
        /// Config to check; falls back to `--config`.
        path: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = &cli.work {
        cfg.paths.work_dir = w.clone();
    }
    let precision = cli.precision.as_deref().map(str::parse::<Precision>).transpose()?;
    Ok(cfg.with_seed(cli.seed).with_precision(precision))
}

fn load_spec(spec: &str, seed: Option<u64>) -> Result<SynthSpec> {
    let mut s = if spec == "default" {
        SynthSpec::default()
    } else {
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(vec![e.to_string()]))?
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::ValidateConfig { path } = &cli.command {
        let Some(path) = path.as_ref().or(cli.config.as_ref()) else {
            return Err(Error::Argument("validate-config needs a config path".into()));
        };
        let problems = validate_config(path)?;
        if problems.is_empty() {
            println!("{}: ok", path.display());
            return Ok(());
        }
        return Err(Error::Config(problems));
    }

    let cfg = load_config(cli)?;
    let pipeline = Pipeline::new(cfg, cli.workers);
    match &cli.command {
        Command::Synth { spec, out } => {
            let spec = load_spec(spec, cli.seed.or(pipeline.config.seed))?;
            let dir = out.as_ref().map(|o| o.join("corpus"));
            let manifest = pipeline.synth(&spec, dir.as_deref())?;
            println!("{}", manifest.display());
        }
        Command::Features => {
            let s = pipeline.features()?;
            println!("{} sessions, {} segments", s.sessions, s.segments);
        }
        Command::Acf => {
            let st = pipeline.acf()?;
            println!("standardizer fitted on {} matrices", st.fitted_on);
        }
        Command::TrainSegment => report_training("segment", &pipeline.train_segment()?),
        Command::Embed => {
            let rows = pipeline.embed()?;
            println!("{} segment predictions", rows.len());
        }
        Command::TrainSession => report_training("session", &pipeline.train_session()?),
        Command::TrainBaseline => report_training("baseline", &pipeline.train_baseline()?),
        Command::Vote => {
            let preds = pipeline.vote()?;
            println!("{} voted sessions", preds.len());
        }
        Command::Evaluate => {
            for r in pipeline.evaluate()?.rows {
                println!(
                    "{:<15} {:<8} acc {:.4}  UAR {:.4}  F1 {:.4}/{:.4}/{:.4}",
                    r.model, r.level, r.accuracy, r.uar, r.f1_n, r.f1_m, r.f1_s
                );
            }
        }
        Command::Gridsearch { stage } => {
            let stage = match stage {
                StageArg::Segment => GridStage::Segment,
                StageArg::Session => GridStage::Session,
            };
            for r in pipeline.gridsearch(stage)? {
                println!("{:<40} val_loss {:.5}  val_uar {:.4}", r.candidate, r.val_loss, r.val_uar);
            }
        }
        Command::Gradcheck => {
            let rows = pipeline.gradcheck(pipeline.config.seed.unwrap_or(0))?;
            let mut failed = Vec::new();
            for r in &rows {
                println!("{:<36} {:.3e} (tol {:.0e}) {}", r.check, r.max_relative_error, r.tolerance, if r.passed { "ok" } else { "FAIL" });
                if !r.passed {
                    failed.push(r.check.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
        Command::RunAll => {
            for r in pipeline.run_all()?.rows {
                println!("{:<15} {:<8} acc {:.4}  UAR {:.4}", r.model, r.level, r.accuracy, r.uar);
            }
        }
        Command::ValidateConfig { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn report_training(stage: &str, ck: &crate::training::Checkpoint) {
    if let Some(h) = &ck.history {
        let best = h.best();
        info!("{stage}: {} epochs, best epoch {}", h.epochs.len(), h.best_epoch);
        println!(
            "{stage}: {} epochs, best epoch {}, val loss {:.5}, val UAR {:.4}",
            h.epochs.len(),
            h.best_epoch,
            best.map_or(f64::NAN, |b| b.val_loss),
            best.map_or(f64::NAN, |b| b.val_uar)
        );
    }
}

/// Parses `argv` (including the program name) and runs one subcommand.
/// Returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
