use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskcl::formats::write_scenes;
use maskcl::protocol::{build_protocol, class_ordering, slice_dataset, ProtocolSpec, TaskSpec};
use maskcl::runner::{collect_runs, gradcheck, render_curves, run_experiment, run_oracle, ExperimentConfig, OracleKind};
use maskcl::synthdata::{build_dataset, make_palette, mix_seed, ClassDef};
use maskcl::Result;

#[derive(Parser)]
#[command(name = "maskcl", version, about = "Continual panoptic segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subject {
    Match,
    Pq,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every step of a continual protocol.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss component.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the matcher or the PQ accumulator against exhaustive search.
    Oracle {
        subject: Subject,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic train and test sets with a JSON manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render PQ and mIoU curves for every run found under a directory.
    Plot {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

#[derive(Serialize)]
struct StepSplit<'a> {
    task: &'a TaskSpec,
    train_seeds: Vec<u64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    data_seed: u64,
    test_seed: u64,
    train_file: &'a str,
    test_file: &'a str,
    train_samples: usize,
    test_samples: usize,
    palette: &'a [ClassDef],
    steps: Vec<StepSplit<'a>>,
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = &cfg.data;
    let palette = make_palette(data.palette_size, data.thing_classes, data.channels, data.seed)?;
    let train = build_dataset(&palette, data.geometry(), data.train_per_class, mix_seed(data.seed))?;
    let test = build_dataset(&palette, data.geometry(), data.test_per_class, data.test_seed)?;
    let tasks = build_protocol(&ProtocolSpec {
        ordering: class_ordering(data.palette_size, cfg.protocol.ordering_seed),
        initial: cfg.protocol.initial,
        increment: cfg.protocol.increment,
        overlap_mode: cfg.protocol.overlap_mode,
    })?;
    fs::create_dir_all(out)?;
    write_scenes(BufWriter::new(File::create(out.join("train.cmfd"))?), &train)?;
    write_scenes(BufWriter::new(File::create(out.join("test.cmfd"))?), &test)?;
    let manifest = Manifest {
        data_seed: data.seed,
        test_seed: data.test_seed,
        train_file: "train.cmfd",
        test_file: "test.cmfd",
        train_samples: train.len(),
        test_samples: test.len(),
        palette: &palette,
        steps: tasks
            .iter()
            .map(|t| StepSplit {
                task: t,
                train_seeds: slice_dataset(&train, t, cfg.protocol.overlap_mode)
                    .iter()
                    .map(|s| s.seed)
                    .collect(),
            })
            .collect(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} train and {} test scenes to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let result = run_experiment(&cfg)?;
            let s = result.summary;
            println!(
                "{}: PQ base {} new {} all {} avg {} | mIoU all {}",
                cfg.name,
                fmt_opt(s.pq.base.map(|v| 100.0 * v)),
                fmt_opt(s.pq.new.map(|v| 100.0 * v)),
                fmt_opt(s.pq.all.map(|v| 100.0 * v)),
                fmt_opt(s.pq.avg.map(|v| 100.0 * v)),
                fmt_opt(s.miou.all.map(|v| 100.0 * v)),
            );
            println!("results in {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Gradcheck { probes, config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let report = gradcheck(&cfg, probes, seed)?;
            for c in &report.components {
                if c.active {
                    println!(
                        "{:<8} probes {:>4}  max rel {:.3e}  max abs {:.3e}  below floor {}",
                        c.component.name(),
                        c.probes,
                        c.max_rel_error,
                        c.max_abs_error,
                        c.below_floor
                    );
                    if let Some((name, idx, a, n)) = &c.worst {
                        println!("         worst {name}[{idx}] analytic {a:.9e} numeric {n:.9e}");
                    }
                } else {
                    println!("{:<8} inactive", c.component.name());
                }
            }
            println!("old model max change {:e}", report.old_model_max_change);
            Ok(report.max_rel_error() < 1e-4 && report.old_model_max_change == 0.0)
        }
        Command::Oracle { subject, trials, seed } => {
            let kind = match subject {
                Subject::Match => OracleKind::Match,
                Subject::Pq => OracleKind::Pq,
            };
            let report = run_oracle(kind, trials, seed)?;
            for f in &report.failures {
                println!("trial {} (seed {}): {}", f.trial, f.seed, f.detail);
            }
            println!("{}/{} trials agree", report.trials - report.failures.len(), report.trials);
            Ok(report.passed())
        }
        Command::GenData { config, out } => {
            gen_data(&load_config(config.as_deref())?, &out)?;
            Ok(true)
        }
        Command::Plot { from, out } => {
            let runs = collect_runs(&from)?;
            let path = out.unwrap_or_else(|| from.join("curves.svg"));
            fs::write(&path, render_curves(&runs))?;
            println!("{} runs plotted to {}", runs.len(), path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
