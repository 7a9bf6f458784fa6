//! Held-out evaluation: forward every test image through a network,
//! binarize by argmax, and score against ground truth. Surface metrics
//! that are undefined (empty prediction or truth) fall back to the
//! image-diagonal sentinel with a note recording which side was empty.

use crate::data::{single_image, Sample};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::metrics::{self, MetricsReport};
use crate::net::NetworkParams;

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub image: String,
    pub report: MetricsReport,
    pub note: &'static str,
}

/// Scores one predicted label map against ground truth, substituting the
/// sentinel distance when surface metrics are undefined.
pub fn score_pair(pred: &LabelMap, truth: &LabelMap) -> Result<(MetricsReport, &'static str)> {
    let pred_fg = pred.foreground();
    let true_fg = truth.foreground();
    let (dice, jaccard) = metrics::overlap_metrics(&pred_fg, &true_fg)?;
    match metrics::report(&pred_fg, &true_fg) {
        Ok(r) => Ok((r, "")),
        Err(Error::EmptyMask(_)) => {
            let [_, h, w] = pred_fg.dims();
            let sentinel = metrics::empty_mask_sentinel(h, w);
            let note = match (pred_fg.count() == 0, true_fg.count() == 0) {
                (true, true) => "empty_both",
                (true, false) => "empty_pred",
                _ => "empty_gt",
            };
            Ok((
                MetricsReport {
                    dice,
                    jaccard,
                    hd95: sentinel,
                    asd: sentinel,
                },
                note,
            ))
        }
        Err(e) => Err(e),
    }
}

/// Per-image metrics plus their arithmetic mean for a sample set.
pub fn evaluate_params(
    params: &NetworkParams<f32>,
    samples: &[Sample],
    image_size: usize,
) -> Result<(Vec<EvalRow>, MetricsReport)> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut sums = [0.0f64; 4];
    for sample in samples {
        let logits = params.forward_tensor(&single_image(sample, image_size)?)?;
        let pred = LabelMap::argmax_channel(&logits)?;
        let truth = LabelMap::new([1, image_size, image_size], sample.labels.clone())?;
        let (report, note) = score_pair(&pred, &truth)?;
        sums[0] += report.dice;
        sums[1] += report.jaccard;
        sums[2] += report.hd95;
        sums[3] += report.asd;
        rows.push(EvalRow {
            image: sample.id.clone(),
            report,
            note,
        });
    }
    let n = samples.len().max(1) as f64;
    let mean = MetricsReport {
        dice: sums[0] / n,
        jaccard: sums[1] / n,
        hd95: sums[2] / n,
        asd: sums[3] / n,
    };
    Ok((rows, mean))
}

pub const EVAL_HEADER: &str = "step,image,dice,jaccard,hd95,asd,note";

pub fn eval_csv_rows(step: usize, rows: &[EvalRow], mean: &MetricsReport) -> String {
    let mut out = String::new();
    let fmt = |r: &MetricsReport| {
        format!(
            "{:.6},{:.6},{:.6},{:.6}",
            r.dice, r.jaccard, r.hd95, r.asd
        )
    };
    for row in rows {
        out.push_str(&format!(
            "{step},{},{},{}\n",
            row.image,
            fmt(&row.report),
            row.note
        ));
    }
    out.push_str(&format!("{step},mean,{},\n", fmt(mean)));
    out
}
