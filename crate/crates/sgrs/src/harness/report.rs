//! Renders a run directory's CSV logs into a single `report.svg`: loss
//! curves, held-out metrics, and region occupancy over training.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{contract_err, Result};

use super::evaluate::EVAL_HEADER;
use super::svg;
use super::train::LOSS_HEADER;

fn parse_csv(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(contract_err(format!(
                "{} header is {:?}, expected {:?}",
                path.display(),
                other.unwrap_or(""),
                header
            )))
        }
    }
    Ok(lines
        .map(|l| l.split(',').map(|c| c.to_string()).collect())
        .collect())
}

fn col(row: &[String], i: usize, path: &Path) -> Result<f64> {
    row.get(i)
        .and_then(|c| c.parse::<f64>().ok())
        .ok_or_else(|| contract_err(format!("bad numeric column {i} in {}", path.display())))
}

/// Builds `report.svg` from `losses.csv` and `eval.csv`.
pub fn report(run_dir: &Path) -> Result<PathBuf> {
    let losses_path = run_dir.join("losses.csv");
    let eval_path = run_dir.join("eval.csv");
    let loss_rows = parse_csv(&losses_path, LOSS_HEADER)?;
    let eval_rows = parse_csv(&eval_path, EVAL_HEADER)?;

    let mut sup = Vec::new();
    let mut con = Vec::new();
    let mut nr = Vec::new();
    let mut total = Vec::new();
    let mut lambda = Vec::new();
    let mut occupancy: [Vec<(f64, f64)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for row in &loss_rows {
        let step = col(row, 0, &losses_path)?;
        sup.push((step, col(row, 1, &losses_path)?));
        con.push((step, col(row, 2, &losses_path)?));
        nr.push((step, col(row, 3, &losses_path)?));
        lambda.push((step, col(row, 4, &losses_path)?));
        total.push((step, col(row, 5, &losses_path)?));
        let d = col(row, 6, &losses_path)?;
        let o = col(row, 7, &losses_path)?;
        let t = col(row, 8, &losses_path)?;
        let n = d + o + t;
        if n > 0.0 {
            occupancy[0].push((step, d / n));
            occupancy[1].push((step, o / n));
            occupancy[2].push((step, t / n));
        }
    }

    let mut dice = Vec::new();
    let mut jaccard = Vec::new();
    for row in &eval_rows {
        if row.get(1).map(String::as_str) == Some("mean") {
            let step = col(row, 0, &eval_path)?;
            dice.push((step, col(row, 2, &eval_path)?));
            jaccard.push((step, col(row, 3, &eval_path)?));
        }
    }

    let loss_chart = svg::line_chart(
        "training losses",
        &[
            ("sup".into(), sup),
            ("con".into(), con),
            ("nr".into(), nr),
            ("total".into(), total),
        ],
    );
    let metric_chart = svg::line_chart(
        "held-out overlap",
        &[("dice".into(), dice), ("jaccard".into(), jaccard)],
    );
    let schedule_chart = svg::line_chart(
        "region occupancy and ramp weight",
        &[
            ("delta".into(), occupancy[0].clone()),
            ("omega".into(), occupancy[1].clone()),
            ("theta".into(), occupancy[2].clone()),
            ("lambda_t".into(), lambda),
        ],
    );

    let out = run_dir.join("report.svg");
    fs::write(&out, svg::stack(&[loss_chart, metric_chart, schedule_chart]))?;
    Ok(out)
}
