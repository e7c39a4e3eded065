use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use cascade_seg::config::Config;
use cascade_seg::inference::predict;
use cascade_seg::metrics::evaluate_volume;
use cascade_seg::networks::{summary, Net1, Net2};
use cascade_seg::phantom::write_dataset;
use cascade_seg::sampler::Dataset;
use cascade_seg::trainer::{load_checkpoint, loss_trace_monotonicity_report, Models, StepReport, Trainer};
use cascade_seg::volumes::{load_volume, save_labels_like, LabelVolume};

#[derive(Parser)]
#[command(name = "cascade-seg", version, about = "Coarse-to-fine volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image/label pairs and a manifest.
    Phantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training step or the whole schedule.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// 1, 2, 3, 4 or all
        #[arg(long, default_value = "all")]
        step: String,
        /// Continue from these weights.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run a later step without its predecessors.
        #[arg(long)]
        from_scratch: bool,
        /// Where to write the checkpoint; the loss log goes next to it.
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
    },
    /// Label a volume at its native resolution.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Per-class Dice, Jaccard and ASD as CSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer table of both networks.
    Summary {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn report(r: &StepReport, trainer: &Trainer) {
    let trace: Vec<f64> = trainer.log().iter().filter(|l| l.step == r.step).map(|l| l.total()).collect();
    match loss_trace_monotonicity_report(&trace) {
        Ok(t) => println!(
            "step {}: {} iterations, smoothed loss {:.4} -> {:.4}{}",
            r.step,
            r.iterations,
            t.smoothed_start,
            t.smoothed_end,
            if t.decreasing { "" } else { " (stalled)" }
        ),
        Err(_) => println!("step {}: 0 iterations", r.step),
    }
}

fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    step: &str,
    resume: Option<&Path>,
    from_scratch: bool,
    checkpoint: &Path,
) -> anyhow::Result<()> {
    let only: Option<u8> = match step {
        "all" => None,
        s => Some(s.parse().ok().filter(|s| (1..=4).contains(s)).context("--step must be 1, 2, 3, 4 or all")?),
    };
    let cfg = load_config(config, seed)?;
    let models = match resume {
        Some(p) => load_checkpoint(p)?.models,
        None => Models::new(cfg.net1, cfg.net2, cfg.schedule.seed)?,
    };
    let dataset = Dataset::new(cfg.training_pairs()?, cfg.inference.coarse_spacing)?;
    let mut trainer = Trainer::new(models, dataset, cfg.sampler, cfg.loss, cfg.schedule, cfg.inference)?
        .with_csv_log(checkpoint.with_extension("csv"))
        .with_checkpoint(checkpoint);
    let reports = match only {
        None => trainer.run_all()?,
        Some(s) => vec![trainer.run_step(s, from_scratch)?],
    };
    for r in &reports {
        report(r, &trainer);
    }
    println!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

fn load_labels(path: &Path) -> anyhow::Result<LabelVolume> {
    Ok(load_volume(path)?.into_labels()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let entries = write_dataset(&out, &cfg.phantom, cfg.data.train_count, cfg.data.seed_base)?;
            println!("wrote {} phantoms to {}", entries.len(), out.display());
        }
        Command::Train { config, seed, step, resume, from_scratch, checkpoint } => {
            train(config.as_deref(), seed, &step, resume.as_deref(), from_scratch, &checkpoint)?;
        }
        Command::Predict { checkpoint, input, output } => {
            let ck = load_checkpoint(&checkpoint)?;
            let iv = load_volume(&input)?.into_intensity();
            let labels = predict(&iv, &ck.models.net1, &ck.models.net2, &ck.inference)?;
            save_labels_like(&output, &labels, &input)?;
        }
        Command::Evaluate { pred, truth, out } => {
            let p = load_labels(&pred)?;
            let t = load_labels(&truth)?;
            let n = p.num_classes().max(t.num_classes());
            let widen = |v: LabelVolume| LabelVolume::new(v.grid().clone(), n, v.into_labels());
            let csv = evaluate_volume(&widen(p)?, &widen(t)?)?.to_csv();
            match out {
                Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Summary { config, checkpoint } => {
            let (net1, net2) = match (checkpoint, config) {
                (Some(ck), _) => {
                    let m = load_checkpoint(ck)?.models;
                    (m.net1, m.net2)
                }
                (None, cfg) => {
                    let cfg = load_config(cfg.as_deref(), None)?;
                    (Net1::new(cfg.net1, cfg.schedule.seed)?, Net2::new(cfg.net2, cfg.schedule.seed)?)
                }
            };
            print!("{}", summary(&net1, &net2));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            let parts: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("error: {}", parts.join(" "));
            ExitCode::FAILURE
        }
    }
}
