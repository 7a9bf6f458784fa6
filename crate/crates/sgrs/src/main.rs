//! Command-line front end: dataset generation, training, evaluation,
//! ablation grids, threshold sweeps, and report rendering.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgrs::data::{generate_dataset, load_dataset, DatasetSpec};
use sgrs::harness::ablate::ablate;
use sgrs::harness::checkpoint::{latest_checkpoint, load_checkpoint};
use sgrs::harness::config::{Augmentation, RegionAssignment, RegionLoss, RunConfig, Variant};
use sgrs::harness::evaluate::{eval_csv_rows, evaluate_params, EVAL_HEADER};
use sgrs::harness::report::report;
use sgrs::harness::sweep::{sweep_tau, DEFAULT_TAUS};
use sgrs::harness::train::{train, TrainOptions};
use sgrs::loss::Normalization;
use sgrs::{Error, Result};

#[derive(Parser)]
#[command(name = "sgrs", about = "Semi-supervised segmentation trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-segmentation dataset.
    GenData(GenDataArgs),
    /// Train one configuration (optionally resuming its latest checkpoint).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval(EvalArgs),
    /// Run the variant, region-loss, and augmentation grids.
    Ablate(AblateArgs),
    /// Train once per entropy threshold and plot the resulting curve.
    SweepTau(SweepArgs),
    /// Render a run directory's logs into report.svg.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to write dataset.json + TSR files into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    num_test: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    radius_min: Option<f64>,
    #[arg(long)]
    radius_max: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Flags mirroring RunConfig; a `--config` JSON file supplies the base
/// and any flag given here overrides it.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with the full run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// baseline | ma | mt | ma_mt | full
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    t_warm: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Fix the mixup concentration instead of resampling it each step.
    #[arg(long)]
    alpha_fixed: Option<f64>,
    /// flip_h | flip_v | ma
    #[arg(long)]
    augmentation: Option<String>,
    /// sum | mean
    #[arg(long)]
    loss_normalization: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    batch_labeled: Option<usize>,
    #[arg(long)]
    batch_unlabeled: Option<usize>,
    /// Loss per region as omega_theta_delta, e.g. con_nr_x.
    #[arg(long)]
    region_losses: Option<String>,
    #[arg(long)]
    dump_regions: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// A run directory (latest checkpoint) or a specific checkpoint dir.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seed list shared by every grid row.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated entropy thresholds.
    #[arg(long)]
    taus: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing losses.csv and eval.csv.
    #[arg(long)]
    run: PathBuf,
}

fn config_err(msg: String) -> Error {
    Error::Config(msg)
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::ALL
        .iter()
        .copied()
        .find(|v| v.name() == s)
        .ok_or_else(|| config_err(format!("unknown variant {s:?}")))
}

fn parse_augmentation(s: &str) -> Result<Augmentation> {
    Augmentation::ALL
        .iter()
        .copied()
        .find(|a| a.name() == s)
        .ok_or_else(|| config_err(format!("unknown augmentation {s:?}")))
}

fn parse_normalization(s: &str) -> Result<Normalization> {
    match s {
        "sum" => Ok(Normalization::Sum),
        "mean" => Ok(Normalization::Mean),
        _ => Err(config_err(format!("unknown normalization {s:?}"))),
    }
}

fn parse_region_losses(s: &str) -> Result<RegionAssignment> {
    let tag = |t: &str| match t {
        "con" => Ok(RegionLoss::Con),
        "nr" => Ok(RegionLoss::Nr),
        "x" => Ok(RegionLoss::Excluded),
        _ => Err(config_err(format!("unknown region loss {t:?}"))),
    };
    let parts: Vec<&str> = s.split('_').collect();
    if parts.len() != 3 {
        return Err(config_err(format!(
            "region losses must be omega_theta_delta, got {s:?}"
        )));
    }
    Ok(RegionAssignment {
        omega: tag(parts[0])?,
        theta: tag(parts[1])?,
        delta: tag(parts[2])?,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| config_err(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?
        }
        None => {
            let dataset = args
                .dataset
                .clone()
                .ok_or_else(|| config_err("--dataset is required without --config".into()))?;
            let output = args
                .output
                .clone()
                .ok_or_else(|| config_err("--output is required without --config".into()))?;
            RunConfig::new(dataset, output)
        }
    };
    if let Some(v) = &args.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &args.output {
        cfg.output = v.clone();
    }
    if let Some(v) = &args.variant {
        cfg.variant = parse_variant(v)?;
    }
    if let Some(v) = args.labeled_ratio {
        cfg.labeled_ratio = v;
    }
    if let Some(v) = args.total_steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.t_warm {
        cfg.t_warm = Some(v);
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.ema_decay {
        cfg.ema_decay = v;
    }
    if let Some(v) = args.alpha_fixed {
        cfg.alpha_policy = sgrs::augment::AlphaPolicy::Fixed(v);
    }
    if let Some(v) = &args.augmentation {
        cfg.augmentation = parse_augmentation(v)?;
    }
    if let Some(v) = &args.loss_normalization {
        cfg.loss_normalization = parse_normalization(v)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.base_width {
        cfg.base_width = v;
    }
    if let Some(v) = args.batch_labeled {
        cfg.batch_labeled = v;
    }
    if let Some(v) = args.batch_unlabeled {
        cfg.batch_unlabeled = v;
    }
    if let Some(v) = &args.region_losses {
        cfg.region_losses = Some(parse_region_losses(v)?);
    }
    if args.dump_regions {
        cfg.dump_regions = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut spec = DatasetSpec::default();
            if let Some(v) = a.num_images {
                spec.num_images = v;
            }
            if let Some(v) = a.num_test {
                spec.num_test = v;
            }
            if let Some(v) = a.image_size {
                spec.image_size = v;
            }
            if let Some(v) = a.num_classes {
                spec.num_classes = v;
            }
            if let Some(v) = a.radius_min {
                spec.radius_min = v;
            }
            if let Some(v) = a.radius_max {
                spec.radius_max = v;
            }
            if let Some(v) = a.noise_sigma {
                spec.noise_sigma = v;
            }
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            generate_dataset(&spec, &a.out)?;
            println!(
                "wrote {} train + {} test images to {}",
                spec.num_images,
                spec.num_test,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = build_config(&a.config)?;
            let rec = train(
                &cfg,
                TrainOptions {
                    resume: a.resume,
                    stop_after: None,
                },
            )?;
            println!(
                "finished at step {} with mean dice {:.4} ({})",
                rec.final_step,
                rec.final_dice,
                cfg.output.display()
            );
        }
        Command::Eval(a) => {
            let dir = if a.checkpoint.join("manifest.json").exists() {
                a.checkpoint.clone()
            } else {
                latest_checkpoint(&a.checkpoint).ok_or_else(|| {
                    config_err(format!("no checkpoint under {}", a.checkpoint.display()))
                })?
            };
            let state = load_checkpoint(&dir, None)?;
            let dataset = load_dataset(&a.dataset)?;
            let (rows, mean) =
                evaluate_params(&state.student, &dataset.test, dataset.spec.image_size)?;
            print!("{EVAL_HEADER}\n{}", eval_csv_rows(state.step, &rows, &mean));
        }
        Command::Ablate(a) => {
            let cfg = build_config(&a.config)?;
            let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
            for grid in ablate(&cfg, &seeds)? {
                for row in &grid.rows {
                    println!(
                        "{}/{}: dice {:.4} +/- {:.4}{}",
                        grid.grid,
                        row.name,
                        row.mean,
                        row.std,
                        if row.flagged { " (default)" } else { "" }
                    );
                }
            }
        }
        Command::SweepTau(a) => {
            let cfg = build_config(&a.config)?;
            let taus = match &a.taus {
                Some(s) => parse_list(&s, "tau")?,
                None => DEFAULT_TAUS.to_vec(),
            };
            let out = sweep_tau(&cfg, &taus)?;
            for (tau, dice) in &out.points {
                println!("tau {tau:.4}: dice {dice:.4}");
            }
        }
        Command::Report(a) => {
            let out = report(&a.run)?;
            println!("wrote {}", out.display());
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
