//! Ablation grids: model variants, region-loss assignments, and
//! augmentation choices. Every row in a grid runs the same seed set so
//! differences are attributable to the ablated component alone.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{config_err, Result};

use super::config::{Augmentation, RegionAssignment, RegionLoss, RunConfig, Variant};
use super::svg;
use super::train::{train, TrainOptions};

pub const GRID_HEADER: &str = "name,seed,dice,note";

#[derive(Debug, Clone)]
pub struct RowOutcome {
    pub name: String,
    /// Marks the configuration the defaults use.
    pub flagged: bool,
    pub dice: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub grid: String,
    pub rows: Vec<RowOutcome>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type Configure<'a> = Box<dyn Fn(&mut RunConfig) + 'a>;

struct GridRow<'a> {
    name: String,
    flagged: bool,
    configure: Configure<'a>,
}

fn run_grid(
    base: &RunConfig,
    root: &Path,
    grid: &str,
    rows: Vec<GridRow<'_>>,
    seeds: &[u64],
) -> Result<GridOutcome> {
    if seeds.is_empty() {
        return Err(config_err("ablation needs at least one seed"));
    }
    let mut outcomes = Vec::new();
    let mut csv = String::from(GRID_HEADER);
    csv.push('\n');
    for row in &rows {
        let mut dice = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            (row.configure)(&mut cfg);
            cfg.seed = seed;
            cfg.output = root.join(grid).join(&row.name).join(format!("seed_{seed}"));
            let rec = train(&cfg, TrainOptions::default())?;
            dice.push(rec.final_dice);
        }
        let note = if row.flagged { "default" } else { "" };
        for (&seed, &d) in seeds.iter().zip(&dice) {
            csv.push_str(&format!("{},{seed},{d:.6},{note}\n", row.name));
        }
        let (mean, std) = mean_std(&dice);
        csv.push_str(&format!("{},mean,{mean:.6},{note}\n", row.name));
        csv.push_str(&format!("{},std,{std:.6},{note}\n", row.name));
        outcomes.push(RowOutcome {
            name: row.name.clone(),
            flagged: row.flagged,
            dice,
            mean,
            std,
        });
    }
    fs::create_dir_all(root)?;
    let csv_path = root.join(format!("{grid}.csv"));
    fs::write(&csv_path, csv)?;
    let labels: Vec<String> = outcomes.iter().map(|r| r.name.clone()).collect();
    let means: Vec<f64> = outcomes.iter().map(|r| r.mean).collect();
    let svg_path = root.join(format!("{grid}.svg"));
    fs::write(
        &svg_path,
        svg::bar_chart(&format!("mean dice by {grid}"), &labels, &means),
    )?;
    Ok(GridOutcome {
        grid: grid.to_string(),
        rows: outcomes,
        csv: csv_path,
        svg: svg_path,
    })
}

/// Five-row component grid: each variant adds one mechanism.
pub fn variant_grid(base: &RunConfig, root: &Path, seeds: &[u64]) -> Result<GridOutcome> {
    let rows = Variant::ALL
        .iter()
        .map(|&v| GridRow {
            name: v.name().to_string(),
            flagged: v == Variant::Full,
            configure: Box::new(move |cfg: &mut RunConfig| cfg.variant = v) as Configure<'_>,
        })
        .collect();
    run_grid(base, root, "variants", rows, seeds)
}

/// Region-loss grid: which loss (plain, smoothed, or none) each of the
/// three regions receives. The default assignment is flagged.
pub fn region_grid(base: &RunConfig, root: &Path, seeds: &[u64]) -> Result<GridOutcome> {
    use RegionLoss::{Con, Excluded, Nr};
    let assignments = [
        RegionAssignment { omega: Con, theta: Con, delta: Excluded },
        RegionAssignment { omega: Nr, theta: Con, delta: Excluded },
        RegionAssignment { omega: Nr, theta: Nr, delta: Excluded },
        RegionAssignment { omega: Nr, theta: Nr, delta: Nr },
        RegionAssignment { omega: Con, theta: Con, delta: Con },
        RegionAssignment::default(),
    ];
    let rows = assignments
        .into_iter()
        .map(|a| GridRow {
            name: a.name(),
            flagged: a == RegionAssignment::default(),
            configure: Box::new(move |cfg: &mut RunConfig| {
                cfg.variant = Variant::Full;
                cfg.region_losses = Some(a);
            }) as Configure<'_>,
        })
        .collect();
    run_grid(base, root, "regions", rows, seeds)
}

/// Augmentation grid for the full variant: horizontal flip, vertical
/// flip, and mixup as the source of the second unlabeled view.
pub fn augmentation_grid(base: &RunConfig, root: &Path, seeds: &[u64]) -> Result<GridOutcome> {
    let rows = Augmentation::ALL
        .iter()
        .map(|&a| GridRow {
            name: a.name().to_string(),
            flagged: a == Augmentation::Ma,
            configure: Box::new(move |cfg: &mut RunConfig| {
                cfg.variant = Variant::Full;
                cfg.augmentation = a;
            }) as Configure<'_>,
        })
        .collect();
    run_grid(base, root, "augmentations", rows, seeds)
}

/// Runs all three grids under `base.output`.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<Vec<GridOutcome>> {
    let root = base.output.clone();
    Ok(vec![
        variant_grid(base, &root, seeds)?,
        region_grid(base, &root, seeds)?,
        augmentation_grid(base, &root, seeds)?,
    ])
}
