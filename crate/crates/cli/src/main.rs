use std::path::PathBuf;
use std::process::ExitCode;

use capsroute::config::{parse_key_values, RunConfig};
use capsroute::eval::{evaluate_checkpoints, run_experiment, write_summary_tables, ExperimentReport, METRIC_NAMES};
use capsroute::signal::{
    build_dataset, load_corpus, synth_corpus, write_corpus, write_dataset, ChannelSet, LoadOptions,
};
use capsroute::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// EEG spectrogram drowsiness classification.
#[derive(Parser)]
#[command(name = "capsroute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Fz/Pz corpus and its recordings.csv.
    Synth {
        /// Alert and drowsy subject counts, e.g. `10,10`.
        #[arg(long, value_parser = parse_subjects)]
        subjects: (usize, usize),
        #[arg(long, default_value_t = 10.0)]
        minutes: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the spectrogram image set and dataset.csv from recordings.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_channels)]
        channels: ChannelSet,
        #[arg(long)]
        out: PathBuf,
        /// CSV recordings start with a header line.
        #[arg(long)]
        csv_header: bool,
    },
    /// Run the holdout experiment: train and evaluate every fold.
    Train(RunArgs),
    /// Re-evaluate the checkpoints of a finished run on the same folds.
    Eval(RunArgs),
    /// Run the experiment and also write the summary table and normalized
    /// confusion matrices.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    augment: Option<String>,
}

fn parse_subjects(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, d) = s.split_once(',').ok_or("expected ALERT,DROWSY")?;
    let a: usize = a.trim().parse().map_err(|_| format!("`{a}` is not a count"))?;
    let d: usize = d.trim().parse().map_err(|_| format!("`{d}` is not a count"))?;
    if a == 0 || d == 0 {
        return Err("both subject counts must be at least 1".into());
    }
    Ok((a, d))
}

fn parse_channels(s: &str) -> std::result::Result<ChannelSet, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Defaults, then the config file, then command-line flags.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut entries = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        entries = parse_key_values(&text)?;
    }
    let flags = [
        ("dataset", args.dataset.as_ref().map(|p| p.display().to_string())),
        ("channel_set", args.channels.clone()),
        ("model", args.model.clone()),
        ("epochs", args.epochs.clone()),
        ("batch_size", args.batch_size.clone()),
        ("seed", args.seed.clone()),
        ("out", args.out.as_ref().map(|p| p.display().to_string())),
        ("augment", args.augment.clone()),
    ];
    entries.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let mut problems = match cfg.apply(&entries) {
        Ok(()) => Vec::new(),
        Err(Error::Config(list)) => list,
        Err(e) => return Err(e),
    };
    problems.extend(cfg.problems());
    if cfg.dataset.is_none() {
        problems.push("dataset: no dataset manifest given".into());
    }
    if cfg.out.is_none() {
        problems.push("out: no output directory given".into());
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

fn print_summary(report: &ExperimentReport) {
    for f in &report.folds {
        let acc = f.metrics.accuracy.map_or("undefined".into(), |a| format!("{a:.4}"));
        println!(
            "fold {}: train {} (+{} augmented), test {}, accuracy {acc}",
            f.fold, f.train_size, f.augmented, f.test_size
        );
    }
    for (name, s) in METRIC_NAMES.iter().zip(&report.aggregate) {
        match s {
            Some(s) => println!(
                "{name}: {:.4} ± {}",
                s.mean,
                s.std.map_or("undefined".into(), |v| format!("{v:.4}"))
            ),
            None => println!("{name}: undefined"),
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("CAPSROUTE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("CAPSROUTE_THREADS: `{value}` is not a positive integer")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(vec![format!("CAPSROUTE_THREADS: {e}")]))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth {
            subjects: (alert, drowsy),
            minutes,
            out,
            seed,
        } => {
            let recordings = synth_corpus(alert, drowsy, minutes, seed)?;
            let rows = write_corpus(&out, &recordings)?;
            println!("wrote {} recordings to {}", rows.len(), out.display());
        }
        Command::Prepare {
            manifest,
            channels,
            out,
            csv_header,
        } => {
            let recordings = load_corpus(
                &manifest,
                LoadOptions {
                    csv_has_header: csv_header,
                },
            )?;
            let images = build_dataset(&recordings, channels)?;
            let path = write_dataset(&out, &images)?;
            println!("wrote {} images, manifest {}", images.len(), path.display());
        }
        Command::Train(args) => {
            let report = run_experiment(&resolve(&args)?)?;
            print_summary(&report);
        }
        Command::Eval(args) => {
            let report = evaluate_checkpoints(&resolve(&args)?)?;
            print_summary(&report);
        }
        Command::Report(args) => {
            let cfg = resolve(&args)?;
            let report = run_experiment(&cfg)?;
            write_summary_tables(cfg.out.as_deref().expect("validated"), &report)?;
            print_summary(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
