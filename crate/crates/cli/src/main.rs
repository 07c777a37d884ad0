//! `dynroute` command-line driver.
//!
//! Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynroute::config::{Detector, RunConfig};
use dynroute::route_export::{RouteFormat, RouteGraph};
use dynroute::synth::{generate_corpus, Corpus, SynthImage};
use dynroute::train::{evaluate_routing, pattern_histogram, train};
use dynroute::{Error, Result};

#[derive(Parser)]
#[command(name = "dynroute", version, about = "Scale-aware dynamic routing detector on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and training seeds (and DYNROUTE_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let cfg = cfg.apply_env_seed()?;
        Ok(match self.seed {
            Some(seed) => cfg.with_seed(seed),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch; writes checkpoint.ckpt and train_log.jsonl.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inference-mode routing statistics as CSV plus a printed summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One-row summary CSV.
        #[arg(long)]
        report: PathBuf,
        /// Per-image CSV; defaults to `<report stem>_samples.csv`.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Draw the route one image takes.
    ExportRoute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// dot or svg
        #[arg(long, default_value = "dot")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image C_net with aggregate rows.
    CostReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::load(dir)?;
    if corpus.is_empty() {
        return Err(Error::Usage(format!("{}: no images to evaluate", dir.display())));
    }
    Ok(corpus)
}

fn default_samples_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}_samples.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let corpus = generate_corpus(&cfg.data, &cfg.budget.intervals)?;
            corpus.write(&out)?;
            let patterns = corpus.scale_encodings(&cfg.budget.intervals)?;
            println!("wrote {} images to {}", corpus.len(), out.display());
            for (pattern, n) in pattern_histogram(&patterns) {
                println!("  pattern {pattern}: {n}");
            }
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let corpus = Corpus::load(&data)?;
            let outcome = train(&cfg, &corpus, &out)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.l_tot);
            println!(
                "trained {} steps, final L_tot {last:.4}\ncheckpoint {}\nlog {}",
                outcome.log.len(),
                outcome.checkpoint.display(),
                outcome.log_path.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            samples,
        } => {
            let (detector, params, cfg) = Detector::load(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let summary = evaluate_routing(&detector, &params, &cfg, &corpus)?;
            summary.write_csv(create(&report)?)?;
            let samples = samples.unwrap_or_else(|| default_samples_path(&report));
            summary.write_samples_csv(create(&samples)?)?;
            println!("{}", summary.describe());
        }
        Command::ExportRoute {
            checkpoint,
            image,
            format,
            out,
        } => {
            let format: RouteFormat = format.parse()?;
            let (detector, params, cfg) = Detector::load(&checkpoint)?;
            let img = SynthImage::load(&image)?;
            let (_, route, _) = detector.supernet.infer_sample(&params, &img.to_tensor(), None, 0)?;
            let graph = RouteGraph::build(&cfg.supernet, &route)?;
            std::fs::write(&out, graph.render(format)).map_err(|e| Error::Usage(format!("{}: {e}", out.display())))?;
            let active = graph.nodes.iter().filter(|n| n.active && n.layer > 0).count();
            println!("{} of {} nodes executed; wrote {}", active, graph.nodes.len() - 1, out.display());
        }
        Command::CostReport { checkpoint, data, out } => {
            let (detector, params, cfg) = Detector::load(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let report = evaluate_routing(&detector, &params, &cfg, &corpus)?.cost_report();
            report.write_csv(create(&out)?)?;
            if let Some(s) = report.summary() {
                println!(
                    "C_net mean {:.0} max {:.0} min {:.0} std {:.1} of C_tot {:.0}; routers {:.0} MAdds per image (not in C_net)",
                    s.mean, s.max, s.min, s.std, report.c_tot, report.router_mean
                );
            }
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
            ExitCode::from(exit_code(&e))
        }
    }
}
