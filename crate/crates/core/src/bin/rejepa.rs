//! Command-line front end. Every subcommand validates its inputs, calls one
//! library entry point and serializes the result. Failures print a JSON
//! object `{"error": {"kind", "message", "fields"}}` on stderr and exit 1.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use rejepa::ablation::{run_ablation, AblationOptions, AblationSpec, TrialRecord};
use rejepa::config::{RunConfig, METRICS_FILE};
use rejepa::data::{load_archive, read_raw_image, split_holdout, write_archive, generate_synthetic_archive};
use rejepa::model::EncoderKind;
use rejepa::retrieval::{build_index, evaluate_model, load_index, query, save_index, Metric, Neighbor};
use rejepa::training::{fit, load_checkpoint, FitOptions, TrainState, FINAL_CHECKPOINT, LATEST_CHECKPOINT};
use rejepa::{Error, FieldError, Result};

#[derive(Parser)]
#[command(name = "rejepa", version, about = "Self-supervised pretraining and k-NN retrieval for multispectral images")]
struct Cli {
    /// Suppress the human-readable summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes checkpoints and the metrics stream.
    Train {
        config: PathBuf,
        /// Continue from `latest.ckpt` in the output directory if present.
        #[arg(long)]
        resume: bool,
    },
    /// Embed an archive with a checkpoint's target encoder into an index file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "euclidean")]
        metric: Metric,
    },
    /// Nearest neighbours of one raw image file; prints JSON.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Leave-one-out retrieval F1@k over an archive; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "euclidean")]
        metric: Metric,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation spec and write the summary table as CSV.
    Ablate {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-run checkpoints and metrics; defaults to the spec's output.dir.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
    },
    /// Write the synthetic archive of a run config as `train/` and `holdout/`.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    fields: Vec<FieldError>,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

fn report(kind: &str, message: String, fields: Vec<FieldError>) -> ExitCode {
    let body = ErrorReport {
        error: ErrorBody { kind, message, fields },
    };
    eprintln!("{}", serde_json::to_string(&body).expect("error report serializes"));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("usage", e.to_string().trim_end().to_string(), Vec::new()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let fields = match &e {
                Error::Config(fs) => fs.clone(),
                _ => Vec::new(),
            };
            report(e.kind(), e.to_string(), fields)
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    let say = |msg: String| {
        if !quiet {
            println!("{msg}");
        }
    };
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.prepare_data()?;
            let out_dir = cfg.output.dir.clone();
            let metrics_path = cfg.metrics_dir().join(METRICS_FILE);
            let latest = out_dir.join(LATEST_CHECKPOINT);
            let mut state = if resume && latest.exists() {
                let state = load_checkpoint(&latest)?;
                if state.model.config != cfg.model || state.config != cfg.train {
                    return Err(Error::config(
                        "resume",
                        format!("{} was written with a different model or train config", latest.display()),
                    ));
                }
                say(format!("resuming from {} at step {}", latest.display(), state.step));
                state
            } else {
                // a fresh run starts a fresh stream
                let _ = std::fs::remove_file(&metrics_path);
                TrainState::new(cfg.model.clone(), cfg.train.clone(), data.train.len())?
            };
            let opts = FitOptions {
                checkpoint_dir: Some(out_dir.clone()),
                metrics_path: Some(metrics_path.clone()),
                stop_at_step: None,
            };
            fit(&mut state, &data.train, &opts)?;
            let eval = evaluate_model(&state.model, &data.holdout, cfg.retrieval.metric, cfg.retrieval.k)?;
            if let Some(last) = state.history.last() {
                say(format!(
                    "trained {} steps ({} epochs); final loss {:.4} (L_pred {:.4}, v {:.4}, c {:.4})",
                    state.step, state.epoch, last.total, last.l_pred, last.v, last.c
                ));
            }
            say(format!(
                "held-out F1@{} = {:.4} over {} images",
                cfg.retrieval.k,
                eval.mean_f1,
                data.holdout.len()
            ));
            say(format!("checkpoint: {}", out_dir.join(FINAL_CHECKPOINT).display()));
            say(format!("metrics: {}", metrics_path.display()));
        }
        Command::Embed {
            checkpoint,
            archive,
            out,
            metric,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let (records, stats) = load_archive(&archive)?;
            let mut index = build_index(&state.model, &records, metric)?;
            index.band_stats = Some(stats);
            save_index(&index, &out)?;
            say(format!(
                "indexed {} images ({}-dim, {metric}) into {}",
                index.len(),
                index.dim(),
                out.display()
            ));
        }
        Command::Query {
            index,
            checkpoint,
            image,
            k,
        } => {
            let index = load_index(&index)?;
            if k == 0 || k > index.len() {
                return Err(Error::config("k", format!("must lie in 1..={} (index size)", index.len())));
            }
            let state = load_checkpoint(&checkpoint)?;
            let mut img = read_raw_image(&image)?;
            if let Some(stats) = &index.band_stats {
                stats.apply(&mut img)?;
            }
            let v = state.model.pooled_embedding(&img, EncoderKind::Target)?;
            let neighbors: Vec<Neighbor> = query(&index, v.view(), k, None)?;
            #[derive(Serialize)]
            struct QueryOutput {
                k: usize,
                metric: Metric,
                neighbors: Vec<Neighbor>,
            }
            print_json(&QueryOutput {
                k,
                metric: index.metric,
                neighbors,
            });
        }
        Command::Eval {
            checkpoint,
            archive,
            k,
            metric,
            out,
        } => {
            let (records, _) = load_archive(&archive)?;
            if k == 0 || k >= records.len() {
                return Err(Error::config(
                    "k",
                    format!(
                        "must lie in 1..={} (archive size {} minus the query itself)",
                        records.len().saturating_sub(1),
                        records.len()
                    ),
                ));
            }
            let state = load_checkpoint(&checkpoint)?;
            let report = evaluate_model(&state.model, &records, metric, k)?;
            match out {
                Some(path) => {
                    write_file(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
                    say(format!("F1@{k} = {:.4} over {} queries; report in {}", report.mean_f1, records.len(), path.display()));
                }
                None => print_json(&report),
            }
        }
        Command::Ablate { spec, out, runs_dir } => {
            let spec = AblationSpec::load(&spec)?;
            let data = spec.base().prepare_data()?;
            let runs_dir = runs_dir.unwrap_or_else(|| spec.output.dir.clone());
            let mut progress = |t: &TrialRecord| {
                if !quiet {
                    match (t.f1, &t.error) {
                        (Some(f1), _) => println!("{}={} trial {}: F1 {:.4}", spec.axis, t.setting, t.trial, f1),
                        (None, Some(e)) => println!("{}={} trial {}: failed ({e})", spec.axis, t.setting, t.trial),
                        _ => {}
                    }
                }
            };
            let table = run_ablation(
                &spec,
                &data.train,
                &data.holdout,
                AblationOptions {
                    runs_dir: Some(runs_dir.clone()),
                    on_trial: Some(&mut progress),
                },
            )?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            write_file(&out, &table.to_csv())?;
            let trials = runs_dir.join("trials.json");
            write_file(&trials, &serde_json::to_string_pretty(&table.trials).expect("trials serialize"))?;
            say(table.to_csv().trim_end().to_string());
            say(format!("table: {}; per-run records: {}", out.display(), trials.display()));
        }
        Command::Synth { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let records = generate_synthetic_archive(&cfg.data.synthetic)?;
            let (train, holdout) = split_holdout(records, cfg.data.holdout)?;
            write_archive(&out.join("train"), &train)?;
            write_archive(&out.join("holdout"), &holdout)?;
            say(format!(
                "wrote {} training and {} held-out images under {}",
                train.len(),
                holdout.len(),
                out.display()
            ));
        }
    }
    Ok(())
}
