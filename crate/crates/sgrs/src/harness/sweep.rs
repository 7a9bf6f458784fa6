//! Entropy-threshold sweep: one training run per tau, reported as a
//! Dice-vs-tau curve (CSV plus SVG).

use std::fs;
use std::path::PathBuf;

use crate::error::{config_err, Result};

use super::config::{RunConfig, Variant};
use super::svg;
use super::train::{train, TrainOptions};

/// Grid used when the caller does not supply thresholds.
pub const DEFAULT_TAUS: [f64; 7] = [0.05, 0.1, 0.2, 0.296, 0.4, 0.5, 0.6];

pub const SWEEP_HEADER: &str = "tau,dice";

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub points: Vec<(f64, f64)>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Trains the full variant once per threshold; everything else (seed
/// included) is held fixed so the curve isolates tau.
pub fn sweep_tau(base: &RunConfig, taus: &[f64]) -> Result<SweepOutcome> {
    if taus.is_empty() {
        return Err(config_err("tau sweep needs at least one threshold"));
    }
    let root = base.output.clone();
    fs::create_dir_all(&root)?;
    let mut points = Vec::new();
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for &tau in taus {
        let mut cfg = base.clone();
        cfg.variant = Variant::Full;
        cfg.tau = tau;
        cfg.output = root.join(format!("tau_{tau:.4}"));
        let rec = train(&cfg, TrainOptions::default())?;
        points.push((tau, rec.final_dice));
        csv.push_str(&format!("{tau:.6},{:.6}\n", rec.final_dice));
    }
    let csv_path = root.join("sweep_tau.csv");
    fs::write(&csv_path, csv)?;
    let svg_path = root.join("sweep_tau.svg");
    fs::write(
        &svg_path,
        svg::line_chart("dice vs entropy threshold", &[("dice".into(), points.clone())]),
    )?;
    Ok(SweepOutcome {
        points,
        csv: csv_path,
        svg: svg_path,
    })
}
