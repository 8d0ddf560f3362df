//! Batch experiment harness: training runs, evaluation, the four-way pooling
//! comparison, the gradient-check suite, corpus statistics, synthetic data
//! generation, and the length-bias probe.
//!
//! Exit codes: 0 success, 1 verification failure (a failed gradient check),
//! 2 usage, configuration, or data errors.

use clap::{Parser, Subcommand};
use mgtlab_core::checkpoint;
use mgtlab_core::config::RunConfig;
use mgtlab_core::data::{corpus_stats, read_jsonl, write_jsonl, CorpusStats, LengthBand};
use mgtlab_core::error::Error;
use mgtlab_core::gradsuite;
use mgtlab_core::metrics::Metrics;
use mgtlab_core::rng::Seeder;
use mgtlab_core::synth::{generate_synthetic_corpus, GenConfig};
use mgtlab_core::train::{
    compare_poolings, evaluate_model, format_compare_table, probe_length_bias, split_corpus,
    train_model, REPORT_SCHEMA_VERSION,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Serialize)]
struct StatsReport<'a> {
    schema_version: u32,
    #[serde(flatten)]
    stats: &'a CorpusStats,
}

#[derive(Serialize)]
struct MetricsReport<'a> {
    schema_version: u32,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

#[derive(Parser)]
#[command(
    name = "mgtlab",
    version,
    about = "Pooling-strategy lab for machine-text detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file; writes a JSON run report and
    /// optionally a checkpoint.
    Train {
        /// Flat key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all four pooling kinds on identical data and seed and report
    /// F1 and parameter counts per kind.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every operation, pooling pipeline, the head, and the focal
    /// loss against central finite differences.
    Gradcheck {
        /// Adds one deliberately corrupted backward rule; the run must then
        /// fail (sensitivity check of the harness itself).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Per-class corpus statistics (samples, avg words/chars, max words).
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic two-class corpus.
    GenData {
        #[arg(long, default_value_t = 1250)]
        n_per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output JSONL path; with --split, stem.train.jsonl etc.
        #[arg(long)]
        out: PathBuf,
        /// Write stratified 80/10/10 train/dev/test files instead of one file.
        #[arg(long)]
        split: bool,
    },
    /// Model metrics on a full dataset vs a length-controlled band, with a
    /// length-only baseline for reference.
    ProbeLength {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Word-count band "lo,hi"; omit hi for no upper bound, e.g. "30,63"
        /// or "100,".
        #[arg(long)]
        band: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Train {
            config,
            seed,
            out,
            checkpoint: ckpt,
        } => {
            let mut run = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                run.train.seed = seed;
            }
            let train_path = run
                .train_data
                .clone()
                .ok_or_else(|| Error::Config("config must set train_data".into()))?;
            let train_samples = read_jsonl(&train_path)?;
            let eval_samples = run.eval_data.clone().map(|p| read_jsonl(&p)).transpose()?;

            let outcome = train_model(&run, &train_samples, eval_samples.as_deref())?;
            println!("pooling: {}", outcome.report.pooling);
            println!("parameters: {}", outcome.report.parameter_counts.total);
            for (epoch, loss) in outcome.report.epoch_losses.iter().enumerate() {
                println!("epoch {epoch}: mean loss {loss:.6}");
            }
            let m = &outcome.report.metrics;
            println!(
                "metrics: F1 {:.4}  macro-F1 {:.4}  accuracy {:.4}  (TP {} FP {} FN {} TN {})",
                m.f1,
                m.macro_f1,
                m.accuracy,
                m.true_positive,
                m.false_positive,
                m.false_negative,
                m.true_negative
            );
            if let Some(path) = &ckpt {
                ensure_parent(path)?;
                checkpoint::save(path, &outcome.model, &outcome.vocab, &run, None)?;
                println!("checkpoint written to {}", path.display());
            }
            if let Some(path) = &out {
                write_json(path, &outcome.report)?;
                println!("report written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Evaluate {
            checkpoint: ckpt,
            data,
            out,
        } => {
            let loaded = checkpoint::load(&ckpt)?;
            let samples = read_jsonl(&data)?;
            let metrics = evaluate_model(
                &loaded.model,
                &loaded.vocab,
                &samples,
                loaded.run.train.max_seq_len,
                loaded.run.train.micro_batch,
            )?;
            println!(
                "F1 {:.4}  macro-F1 {:.4}  accuracy {:.4}  (TP {} FP {} FN {} TN {})",
                metrics.f1,
                metrics.macro_f1,
                metrics.accuracy,
                metrics.true_positive,
                metrics.false_positive,
                metrics.false_negative,
                metrics.true_negative
            );
            if let Some(path) = &out {
                write_json(
                    path,
                    &MetricsReport {
                        schema_version: REPORT_SCHEMA_VERSION,
                        metrics: &metrics,
                    },
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Compare { config, seed, out } => {
            let mut run = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                run.train.seed = seed;
            }
            let train_path = run
                .train_data
                .clone()
                .ok_or_else(|| Error::Config("config must set train_data".into()))?;
            let eval_path = run
                .eval_data
                .clone()
                .ok_or_else(|| Error::Config("compare needs eval_data for held-out F1".into()))?;
            let train_samples = read_jsonl(&train_path)?;
            let eval_samples = read_jsonl(&eval_path)?;
            let report = compare_poolings(&run, &train_samples, &eval_samples)?;
            print!("{}", format_compare_table(&report));
            if let Some(path) = &out {
                write_json(path, &report)?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck { inject_fault } => {
            let report = gradsuite::run_suite(inject_fault)?;
            print!("{}", gradsuite::format_report(&report));
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }

        Command::Stats { data, out } => {
            let samples = read_jsonl(&data)?;
            let stats = corpus_stats(&samples)?;
            for (class, name) in [(&stats.human, "human"), (&stats.machine, "machine")] {
                if class.samples == 0 {
                    return Err(Error::EmptyClass(name.to_string()));
                }
            }
            print_stats_table(&stats);
            if let Some(path) = &out {
                write_json(
                    path,
                    &StatsReport {
                        schema_version: REPORT_SCHEMA_VERSION,
                        stats: &stats,
                    },
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::GenData {
            n_per_class,
            seed,
            out,
            split,
        } => {
            let seeder = Seeder::new(seed);
            let corpus = generate_synthetic_corpus(n_per_class, &GenConfig::default(), &seeder)?;
            if split {
                let (train, dev, test) = split_corpus(&corpus, &seeder);
                let stem = out.with_extension("");
                let stem = stem.to_string_lossy();
                for (set, tag) in [(&train, "train"), (&dev, "dev"), (&test, "test")] {
                    let path = PathBuf::from(format!("{stem}.{tag}.jsonl"));
                    ensure_parent(&path)?;
                    write_jsonl(&path, set)?;
                    println!("{} samples -> {}", set.len(), path.display());
                }
            } else {
                ensure_parent(&out)?;
                write_jsonl(&out, &corpus)?;
                println!("{} samples -> {}", corpus.len(), out.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::ProbeLength {
            checkpoint: ckpt,
            data,
            band,
            out,
        } => {
            let band = parse_band(&band)?;
            let loaded = checkpoint::load(&ckpt)?;
            let samples = read_jsonl(&data)?;
            let report = probe_length_bias(
                &loaded.model,
                &loaded.vocab,
                &samples,
                band,
                loaded.run.train.max_seq_len,
                loaded.run.train.micro_batch,
            )?;
            println!("band: {band}");
            println!(
                "model    F1 full {:.4}  banded {:.4}  delta {:+.4}",
                report.full.f1, report.banded.f1, report.model_f1_delta
            );
            println!(
                "baseline F1 full {:.4}  banded {:.4}  delta {:+.4}  (length-only logistic)",
                report.baseline_full_f1, report.baseline_banded_f1, report.baseline_f1_delta
            );
            if let Some(path) = &out {
                write_json(path, &report)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_band(text: &str) -> Result<LengthBand, Error> {
    let bad = || Error::Config(format!("band {text:?} must look like \"lo,hi\" or \"lo,\""));
    let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim();
    let hi = if hi.is_empty() {
        None
    } else {
        Some(hi.parse().map_err(|_| bad())?)
    };
    if let Some(h) = hi {
        if h < lo {
            return Err(bad());
        }
    }
    Ok(LengthBand { lo, hi })
}

/// Rows match the reference dataset-statistics table: Samples, Avg. Words,
/// Avg. Characters, Max Words; columns Human and Machine; means to one
/// decimal.
fn print_stats_table(stats: &CorpusStats) {
    println!("{:<18} {:>12} {:>12}", "Statistic", "Human", "Machine");
    println!(
        "{:<18} {:>12} {:>12}",
        "Samples", stats.human.samples, stats.machine.samples
    );
    println!(
        "{:<18} {:>12.1} {:>12.1}",
        "Avg. Words", stats.human.avg_words, stats.machine.avg_words
    );
    println!(
        "{:<18} {:>12.1} {:>12.1}",
        "Avg. Characters", stats.human.avg_chars, stats.machine.avg_chars
    );
    println!(
        "{:<18} {:>12} {:>12}",
        "Max Words", stats.human.max_words, stats.machine.max_words
    );
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    ensure_parent(path)?;
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    Ok(())
}
