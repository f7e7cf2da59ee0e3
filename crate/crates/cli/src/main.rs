use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use prmseg::checkpoint::read_manifest;
use prmseg::data::{generate_dataset, PhantomSpec, Split};
use prmseg::eval::evaluate_checkpoint;
use prmseg::network::ArchitectureDescriptor;
use prmseg::pruning::Event;
use prmseg::report::{compare, render_comparison, render_grid, summarize, timeline, CheckpointEvaluation};
use prmseg::train::{self, TrainConfig, INITIAL_ARCHITECTURE};

/// Redundant-to-compact 3D segmentation: data, training, evaluation, inspection.
#[derive(Parser)]
#[command(name = "prmseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic organ/tumor phantoms and a dataset manifest.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Volume extents as D,H,W.
        #[arg(long, value_parser = parse_dims, default_value = "32,32,32")]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Train (or resume) a run described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sliding-window evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report path (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's architecture and branch-state grid.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Emit JSON only.
        #[arg(long)]
        json: bool,
    },
    /// Per-epoch branch-state matrix from an event log.
    Timeline {
        #[arg(long)]
        events: PathBuf,
        /// Initial architecture (defaults to the run directory's copy).
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare evaluation reports written by `eval --out`.
    Compare {
        /// `NAME=REPORT.json`, first entry is the baseline.
        #[arg(required = true, num_args = 1..)]
        reports: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected D,H,W, got {} values", v.len()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateData {
            out,
            count,
            dims,
            seed,
            train_fraction,
        } => {
            let spec = PhantomSpec::with_dims(dims);
            let m = generate_dataset(&out, count, &spec, seed, train_fraction)?;
            println!(
                "wrote {} cases ({} train / {} test) to {}",
                m.cases.len(),
                m.count(Split::Train),
                m.count(Split::Test),
                out.display()
            );
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let s = train::run(&cfg, resume.as_deref())?;
            println!(
                "trained {} epochs: params {} -> {} ({} events), final checkpoint {}",
                s.epochs,
                s.initial_params.effective,
                s.final_params.effective,
                s.events.len(),
                s.final_checkpoint.display()
            );
        }
        Command::Eval {
            config,
            ckpt,
            split,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let e = evaluate_checkpoint(&cfg, &ckpt, split)?;
            log::info!(
                "{} cases: DSC {:?}, NSD {:?}",
                e.report.cases.len(),
                e.report.mean_dice,
                e.report.mean_nsd
            );
            emit(out.as_deref(), &serde_json::to_string_pretty(&e)?)?;
        }
        Command::Inspect { ckpt, json } => {
            let m = read_manifest(&ckpt)?;
            let summary = summarize(&m.descriptor)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                println!(
                    "depth {}  channels {:?}  classes {}  epoch {}  p {}  phase {:?}",
                    summary.depth, summary.channels, summary.num_classes, m.epoch, m.controller.p, m.controller.phase
                );
                print!("{}", render_grid(&summary));
                println!(
                    "branch parameters: {} active, {} masked",
                    summary.active_branch_params, summary.masked_branch_params
                );
                println!("{}", serde_json::to_string(&summary)?);
            }
        }
        Command::Timeline { events, arch, epochs } => {
            let arch = match arch {
                Some(a) => a,
                None => events.parent().unwrap_or(Path::new(".")).join(INITIAL_ARCHITECTURE),
            };
            let initial: ArchitectureDescriptor = read_json(&arch)?;
            let text = fs::read_to_string(&events).with_context(|| format!("reading {}", events.display()))?;
            let log: Vec<Event> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("event line {}", i + 1)))
                .collect::<Result<_>>()?;
            println!("{}", serde_json::to_string_pretty(&timeline(&initial, &log, epochs)?)?);
        }
        Command::Compare { reports, out } => {
            let mut entries = Vec::new();
            for r in &reports {
                let Some((name, path)) = r.split_once('=') else {
                    bail!("expected NAME=REPORT.json, got {r:?}");
                };
                let e: CheckpointEvaluation = read_json(Path::new(path))?;
                entries.push((name.to_string(), e));
            }
            let c = compare(&entries)?;
            emit(out.as_deref(), &render_comparison(&c))?;
        }
    }
    Ok(())
}
