//! Regional training losses: masked cross entropy and Dice, their
//! label-smoothed noise-robust variants, the three composite objectives
//! (supervised, consistency, noise-robust), the Gaussian warmup weight,
//! and the total objective.
//!
//! All losses operate on probability maps already on the tape, take
//! targets and masks as constants, and return scalar tape values. Sums
//! run over masked pixels only; the optional mean normalization divides
//! cross-entropy terms by the masked pixel count while leaving Dice
//! (already ratio-normalized) untouched.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::label::{masked_one_hot, smoothed_weights, LabelMap, Mask};
use crate::tensor::{Scalar, Tape, Value};

/// Whether cross-entropy sums over masked pixels are left as sums or
/// divided by the masked pixel count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Label smoothing strength for the noise-robust cross entropy.
    pub epsilon: f64,
    /// Additive Dice denominator smoothing for the noise-robust Dice.
    pub eta: f64,
    /// Step at which the consistency weight reaches 1.
    pub t_warm: usize,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.2,
            eta: 20.0,
            t_warm: 800,
            normalization: Normalization::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && (0.0..1.0).contains(&self.epsilon)) {
            return Err(config_err(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(config_err(format!(
                "eta must be nonnegative, got {}",
                self.eta
            )));
        }
        if self.t_warm == 0 {
            return Err(config_err("t_warm must be positive".to_string()));
        }
        Ok(())
    }
}

/// Scalar loss components of one step, extracted for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub con: f64,
    pub nr: f64,
    pub lambda_t: f64,
    pub total: f64,
    pub delta_count: usize,
    pub omega_count: usize,
    pub theta_count: usize,
}

fn check_dims<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    target: &LabelMap,
    mask: &Mask,
) -> Result<(usize, usize, usize, usize)> {
    let d = tape.dims(probs);
    if d.len() != 4 {
        return Err(shape_err(format!(
            "loss expects probabilities [N,C,H,W], got {d:?}"
        )));
    }
    let want = [d[0], d[2], d[3]];
    if target.dims() != want || mask.dims() != want {
        return Err(shape_err(format!(
            "probs {d:?} need targets/masks {want:?}, got {:?} and {:?}",
            target.dims(),
            mask.dims()
        )));
    }
    Ok((d[0], d[1], d[2], d[3]))
}

/// -sum over masked pixels of ln p at the target class (cross entropy
/// against one-hot targets). Empty mask gives the empty-sum value 0.
pub fn masked_ce<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    target: &LabelMap,
    mask: &Mask,
) -> Result<Value> {
    let (_, c, _, _) = check_dims(tape, probs, target, mask)?;
    if mask.count() == 0 {
        return tape.scalar_const(0.0);
    }
    let weights = tape.constant(masked_one_hot::<T>(target, mask, c)?)?;
    let picked = tape.mul(weights, tape.ln(probs)?)?;
    tape.scalar_mul(tape.sum(picked)?, -1.0)
}

/// Cross entropy against the ε-smoothed target (1-ε on the labeled
/// class, ε/C everywhere), summed over masked pixels.
pub fn smoothed_ce<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    target: &LabelMap,
    mask: &Mask,
    epsilon: f64,
) -> Result<Value> {
    if !(epsilon.is_finite() && (0.0..1.0).contains(&epsilon)) {
        return Err(config_err(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let (_, c, _, _) = check_dims(tape, probs, target, mask)?;
    if mask.count() == 0 {
        return tape.scalar_const(0.0);
    }
    let weights = tape.constant(smoothed_weights::<T>(target, mask, c, epsilon)?)?;
    let picked = tape.mul(weights, tape.ln(probs)?)?;
    tape.scalar_mul(tape.sum(picked)?, -1.0)
}

/// 1 - 2·Σpy / (Σp² + Σy² + eta) with all sums restricted to masked
/// pixels (and spanning every class). `eta = 0` is the plain
/// squared-denominator Dice loss. Empty mask returns the constant 0
/// rather than the gradient-free formal limit.
fn dice_with_eta<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    target: &LabelMap,
    mask: &Mask,
    eta: f64,
) -> Result<Value> {
    let (_, c, _, _) = check_dims(tape, probs, target, mask)?;
    let pixels = mask.count();
    if pixels == 0 {
        return tape.scalar_const(0.0);
    }
    let one_hot = tape.constant(masked_one_hot::<T>(target, mask, c)?)?;
    let keep = tape.constant(mask.channel_weights::<T>(c))?;
    let masked_probs = tape.mul(probs, keep)?;
    let overlap = tape.scalar_mul(tape.sum(tape.mul(probs, one_hot)?)?, 2.0)?;
    let prob_sq = tape.sum(tape.mul(masked_probs, masked_probs)?)?;
    // one-hot targets make Σy² the masked pixel count
    let denom = tape.scalar_add(prob_sq, pixels as f64 + eta)?;
    let ratio = tape.div(overlap, denom)?;
    tape.scalar_add(tape.scalar_mul(ratio, -1.0)?, 1.0)
}

pub fn masked_dice<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    target: &LabelMap,
    mask: &Mask,
) -> Result<Value> {
    dice_with_eta(tape, probs, target, mask, 0.0)
}

pub fn smoothed_dice<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    target: &LabelMap,
    mask: &Mask,
    eta: f64,
) -> Result<Value> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(config_err(format!("eta must be nonnegative, got {eta}")));
    }
    dice_with_eta(tape, probs, target, mask, eta)
}

/// Divides a summed CE term by the masked pixel count under mean
/// normalization; identity under sum normalization or for empty masks.
fn normalize_ce<T: Scalar>(
    tape: &Tape<T>,
    ce: Value,
    mask: &Mask,
    cfg: &LossConfig,
) -> Result<Value> {
    match cfg.normalization {
        Normalization::Sum => Ok(ce),
        Normalization::Mean => {
            let n = mask.count();
            if n == 0 {
                Ok(ce)
            } else {
                tape.scalar_mul(ce, 1.0 / n as f64)
            }
        }
    }
}

/// Supervised loss on labeled data: CE + Dice over every pixel.
pub fn sup_loss<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    ground_truth: &LabelMap,
    cfg: &LossConfig,
) -> Result<Value> {
    let mask = Mask::full(ground_truth.dims(), true);
    let ce = normalize_ce(tape, masked_ce(tape, probs, ground_truth, &mask)?, &mask, cfg)?;
    tape.add(ce, masked_dice(tape, probs, ground_truth, &mask)?)
}

/// CE + Dice for one prediction stream against pseudo labels on one
/// region.
fn plain_stream<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    labels: &LabelMap,
    mask: &Mask,
    cfg: &LossConfig,
) -> Result<Value> {
    let ce = normalize_ce(tape, masked_ce(tape, probs, labels, mask)?, mask, cfg)?;
    tape.add(ce, masked_dice(tape, probs, labels, mask)?)
}

/// Smoothed CE + smoothed Dice for one stream on one region.
fn smoothed_stream<T: Scalar>(
    tape: &Tape<T>,
    probs: Value,
    labels: &LabelMap,
    mask: &Mask,
    cfg: &LossConfig,
) -> Result<Value> {
    let ce = normalize_ce(
        tape,
        smoothed_ce(tape, probs, labels, mask, cfg.epsilon)?,
        mask,
        cfg,
    )?;
    tape.add(ce, smoothed_dice(tape, probs, labels, mask, cfg.eta)?)
}

/// Consistency loss: plain CE + Dice against the pseudo labels on the
/// consistent region, applied to both the unlabeled and mixed streams.
pub fn con_loss<T: Scalar>(
    tape: &Tape<T>,
    probs_u: Value,
    probs_m: Value,
    pseudo: &LabelMap,
    omega: &Mask,
    cfg: &LossConfig,
) -> Result<Value> {
    let u = plain_stream(tape, probs_u, pseudo, omega, cfg)?;
    let m = plain_stream(tape, probs_m, pseudo, omega, cfg)?;
    tape.add(u, m)
}

/// Noise-robust loss: smoothed CE + smoothed Dice against the pseudo
/// labels on the inconsistent region, applied to both streams.
pub fn nr_loss<T: Scalar>(
    tape: &Tape<T>,
    probs_u: Value,
    probs_m: Value,
    pseudo: &LabelMap,
    theta: &Mask,
    cfg: &LossConfig,
) -> Result<Value> {
    let u = smoothed_stream(tape, probs_u, pseudo, theta, cfg)?;
    let m = smoothed_stream(tape, probs_m, pseudo, theta, cfg)?;
    tape.add(u, m)
}

/// Region loss pieces exposed for the ablation grids, which reassign
/// the plain/smoothed pair to arbitrary regions.
pub fn region_stream_loss<T: Scalar>(
    tape: &Tape<T>,
    smoothed: bool,
    probs: Value,
    labels: &LabelMap,
    mask: &Mask,
    cfg: &LossConfig,
) -> Result<Value> {
    if smoothed {
        smoothed_stream(tape, probs, labels, mask, cfg)
    } else {
        plain_stream(tape, probs, labels, mask, cfg)
    }
}

/// Gaussian warmup weight: exp(-5·(1 - t/t_warm)²) before t_warm,
/// then 1.
pub fn consistency_weight(t: usize, t_warm: usize) -> f64 {
    assert!(t_warm > 0, "t_warm must be positive");
    if t >= t_warm {
        return 1.0;
    }
    let frac = 1.0 - t as f64 / t_warm as f64;
    (-5.0 * frac * frac).exp()
}

/// total = sup + lambda(t)·(con + nr). The weight is a constant of the
/// step: gradient flows through the loss terms only.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    sup: Value,
    con: Value,
    nr: Value,
    t: usize,
    cfg: &LossConfig,
) -> Result<(Value, f64)> {
    let lambda_t = consistency_weight(t, cfg.t_warm);
    let weighted = tape.scalar_mul(tape.add(con, nr)?, lambda_t)?;
    Ok((tape.add(sup, weighted)?, lambda_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    const SUM_CFG: LossConfig = LossConfig {
        epsilon: 0.2,
        eta: 20.0,
        t_warm: 800,
        normalization: Normalization::Sum,
    };

    /// [1, 2, 1, P] probabilities from per-pixel pairs.
    fn pixel_probs(tape: &Tape<f64>, pixels: &[[f64; 2]]) -> Value {
        let p = pixels.len();
        let mut data = vec![0.0; 2 * p];
        for (i, pix) in pixels.iter().enumerate() {
            data[i] = pix[0];
            data[p + i] = pix[1];
        }
        tape.constant(Tensor::new(vec![1, 2, 1, p], data).unwrap()).unwrap()
    }

    fn labels(classes: &[u32]) -> LabelMap {
        LabelMap::new([1, 1, classes.len()], classes.to_vec()).unwrap()
    }

    fn mask(bits: &[bool]) -> Mask {
        Mask::new([1, 1, bits.len()], bits.to_vec()).unwrap()
    }

    fn random_probs(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let plane = h * w;
        let mut data = vec![0.0; n * c * plane];
        for i in 0..n {
            for p in 0..plane {
                let raw: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for (ch, &v) in raw.iter().enumerate() {
                    data[(i * c + ch) * plane + p] = v / sum;
                }
            }
        }
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    fn random_labels(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> LabelMap {
        LabelMap::new(
            [n, h, w],
            (0..n * h * w).map(|_| rng.below(c as u64) as u32).collect(),
        )
        .unwrap()
    }

    fn random_mask(rng: &mut Rng, n: usize, h: usize, w: usize) -> Mask {
        Mask::new([n, h, w], (0..n * h * w).map(|_| rng.uniform() < 0.5).collect()).unwrap()
    }

    #[test]
    fn ce_worked_values() {
        let tape = Tape::new();
        let p = pixel_probs(&tape, &[[0.8, 0.2]]);
        let ce = masked_ce(&tape, p, &labels(&[0]), &mask(&[true])).unwrap();
        assert!((tape.item(ce) - 0.2231).abs() < 1e-4);

        let perfect = pixel_probs(&tape, &[[1.0, 0.0], [0.0, 1.0]]);
        let z = masked_ce(&tape, perfect, &labels(&[0, 1]), &mask(&[true, true])).unwrap();
        assert_eq!(tape.item(z), 0.0);

        let empty = masked_ce(&tape, p, &labels(&[0]), &mask(&[false])).unwrap();
        assert_eq!(tape.item(empty), 0.0);
    }

    #[test]
    fn dice_worked_values() {
        let tape = Tape::new();
        let perfect = pixel_probs(&tape, &[[1.0, 0.0], [0.0, 1.0]]);
        let z = masked_dice(&tape, perfect, &labels(&[0, 1]), &mask(&[true, true])).unwrap();
        assert!(tape.item(z).abs() < 1e-12);

        let wrong = pixel_probs(&tape, &[[1.0, 0.0]]);
        let one = masked_dice(&tape, wrong, &labels(&[1]), &mask(&[true])).unwrap();
        assert!((tape.item(one) - 1.0).abs() < 1e-12);

        let p = pixel_probs(&tape, &[[0.8, 0.2]]);
        let d = masked_dice(&tape, p, &labels(&[0]), &mask(&[true])).unwrap();
        assert!((tape.item(d) - (1.0 - 1.6 / 1.68)).abs() < 1e-9);
        assert!((tape.item(d) - 0.0476).abs() < 1e-4);
    }

    #[test]
    fn smoothed_ce_worked_values() {
        let tape = Tape::new();
        let p = pixel_probs(&tape, &[[0.8, 0.2]]);
        let l = labels(&[0]);
        let m = mask(&[true]);
        let s = smoothed_ce(&tape, p, &l, &m, 0.2).unwrap();
        let want = -(0.9 * 0.8f64.ln() + 0.1 * 0.2f64.ln());
        assert!((tape.item(s) - want).abs() < 1e-9);
        assert!((tape.item(s) - 0.3618).abs() < 1e-4);

        let plain = masked_ce(&tape, p, &l, &m).unwrap();
        let zero_eps = smoothed_ce(&tape, p, &l, &m, 0.0).unwrap();
        assert!((tape.item(plain) - tape.item(zero_eps)).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_minimized_at_smoothed_target() {
        // with eps = 0.2, C = 2, target 0 the optimum is p = (0.9, 0.1)
        let value_at = |q: f64| -> f64 {
            let tape = Tape::new();
            let p = pixel_probs(&tape, &[[q, 1.0 - q]]);
            let s = smoothed_ce(&tape, p, &labels(&[0]), &mask(&[true]), 0.2).unwrap();
            tape.item(s)
        };
        let at_smoothed = value_at(0.9);
        for q in [0.5, 0.7, 0.8, 0.85, 0.89, 0.91, 0.95, 0.99] {
            assert!(
                value_at(q) > at_smoothed,
                "loss at {q} should exceed loss at 0.9"
            );
        }
    }

    #[test]
    fn smoothed_dice_worked_values() {
        let tape = Tape::new();
        let perfect = pixel_probs(&tape, &[[1.0, 0.0]]);
        let l = labels(&[0]);
        let m = mask(&[true]);
        let d = smoothed_dice(&tape, perfect, &l, &m, 20.0).unwrap();
        assert!((tape.item(d) - (1.0 - 2.0 / 22.0)).abs() < 1e-12);
        assert!((tape.item(d) - 0.9091).abs() < 1e-4);

        let zero_eta = smoothed_dice(&tape, perfect, &l, &m, 0.0).unwrap();
        let plain = masked_dice(&tape, perfect, &l, &m).unwrap();
        assert_eq!(tape.item(zero_eta), tape.item(plain));
    }

    #[test]
    fn smoothed_dice_rewards_larger_matched_regions() {
        let sized = |n: usize| -> f64 {
            let tape = Tape::new();
            let p = pixel_probs(&tape, &vec![[1.0, 0.0]; n]);
            let l = labels(&vec![0; n]);
            let m = mask(&vec![true; n]);
            tape.item(smoothed_dice(&tape, p, &l, &m, 20.0).unwrap())
        };
        assert!((sized(10) - 0.5).abs() < 1e-12);
        assert!((sized(100) - (1.0 - 200.0 / 220.0)).abs() < 1e-12);
        assert!(sized(100) < sized(10));
    }

    #[test]
    fn ce_is_mask_additive_dice_is_not() {
        let mut rng = Rng::new(41);
        let probs = random_probs(&mut rng, 1, 2, 4, 4);
        let target = random_labels(&mut rng, 1, 2, 4, 4);
        let a = Mask::new([1, 4, 4], (0..16).map(|i| i % 2 == 0).collect()).unwrap();
        let b = a.not();
        let union = a.or(&b);

        let eval = |f: &dyn Fn(&Tape<f64>, Value, &Mask) -> Value, m: &Mask| -> f64 {
            let tape = Tape::new();
            let p = tape.constant(probs.clone()).unwrap();
            tape.item(f(&tape, p, m))
        };
        let ce = |tape: &Tape<f64>, p: Value, m: &Mask| masked_ce(tape, p, &target, m).unwrap();
        assert!(
            (eval(&ce, &union) - eval(&ce, &a) - eval(&ce, &b)).abs() < 1e-9,
            "plain CE must be additive over disjoint masks"
        );
        let sce =
            |tape: &Tape<f64>, p: Value, m: &Mask| smoothed_ce(tape, p, &target, m, 0.2).unwrap();
        assert!(
            (eval(&sce, &union) - eval(&sce, &a) - eval(&sce, &b)).abs() < 1e-9,
            "smoothed CE must be additive over disjoint masks"
        );
        let dice =
            |tape: &Tape<f64>, p: Value, m: &Mask| masked_dice(tape, p, &target, m).unwrap();
        assert!(
            (eval(&dice, &union) - eval(&dice, &a) - eval(&dice, &b)).abs() > 1e-2,
            "Dice is a ratio and must not be mask-additive"
        );
    }

    #[test]
    fn full_mask_losses_match_scalar_references() {
        let mut rng = Rng::new(7);
        let (n, c, h, w) = (2, 3, 4, 4);
        let probs = random_probs(&mut rng, n, c, h, w);
        let target = random_labels(&mut rng, n, c, h, w);
        let full = Mask::full([n, h, w], true);
        let plane = h * w;

        // textbook scalar loops
        let mut ref_ce = 0.0;
        let mut ref_sce = 0.0;
        let (mut overlap, mut psq) = (0.0, 0.0);
        let (eps, eta) = (0.2, 20.0);
        for i in 0..n {
            for p in 0..plane {
                let y = target.data()[i * plane + p] as usize;
                for ch in 0..c {
                    let pr: f64 = probs.data()[(i * c + ch) * plane + p];
                    let onehot = if ch == y { 1.0 } else { 0.0 };
                    if ch == y {
                        ref_ce -= pr.ln();
                    }
                    ref_sce -= ((1.0 - eps) * onehot + eps / c as f64) * pr.ln();
                    overlap += pr * onehot;
                    psq += pr * pr;
                }
            }
        }
        let pixels = (n * plane) as f64;
        let ref_dice = 1.0 - 2.0 * overlap / (psq + pixels);
        let ref_sdice = 1.0 - 2.0 * overlap / (psq + pixels + eta);

        let tape = Tape::new();
        let p = tape.constant(probs).unwrap();
        let got_ce = tape.item(masked_ce(&tape, p, &target, &full).unwrap());
        let got_sce = tape.item(smoothed_ce(&tape, p, &target, &full, eps).unwrap());
        let got_dice = tape.item(masked_dice(&tape, p, &target, &full).unwrap());
        let got_sdice = tape.item(smoothed_dice(&tape, p, &target, &full, eta).unwrap());
        assert!((got_ce - ref_ce).abs() < 1e-6, "{got_ce} vs {ref_ce}");
        assert!((got_sce - ref_sce).abs() < 1e-6);
        assert!((got_dice - ref_dice).abs() < 1e-6);
        assert!((got_sdice - ref_sdice).abs() < 1e-6);
    }

    #[test]
    fn composite_losses_match_scalar_reference_on_region_masks() {
        let mut rng = Rng::new(13);
        let (n, c, h, w) = (1, 2, 4, 4);
        let probs_u = random_probs(&mut rng, n, c, h, w);
        let probs_m = random_probs(&mut rng, n, c, h, w);
        let pseudo = random_labels(&mut rng, n, c, h, w);
        let omega = random_mask(&mut rng, n, h, w);
        let theta = omega.not();

        let stream_ref = |probs: &Tensor<f64>, m: &Mask, smoothedv: bool| -> f64 {
            let plane = h * w;
            let (mut ce, mut overlap, mut psq, mut count) = (0.0, 0.0, 0.0, 0.0);
            let (eps, eta) = (0.2, 20.0);
            for p in 0..plane {
                if !m.data()[p] {
                    continue;
                }
                count += 1.0;
                let y = pseudo.data()[p] as usize;
                for ch in 0..c {
                    let pr = probs.data()[ch * plane + p];
                    let onehot = if ch == y { 1.0 } else { 0.0 };
                    if smoothedv {
                        ce -= ((1.0 - eps) * onehot + eps / c as f64) * pr.ln();
                    } else if ch == y {
                        ce -= pr.ln();
                    }
                    overlap += pr * onehot;
                    psq += pr * pr;
                }
            }
            if count == 0.0 {
                return 0.0;
            }
            let eta_term = if smoothedv { eta } else { 0.0 };
            ce + 1.0 - 2.0 * overlap / (psq + count + eta_term)
        };

        let tape = Tape::new();
        let pu = tape.constant(probs_u.clone()).unwrap();
        let pm = tape.constant(probs_m.clone()).unwrap();
        let got_con = tape.item(con_loss(&tape, pu, pm, &pseudo, &omega, &SUM_CFG).unwrap());
        let want_con = stream_ref(&probs_u, &omega, false) + stream_ref(&probs_m, &omega, false);
        assert!((got_con - want_con).abs() < 1e-6);

        let got_nr = tape.item(nr_loss(&tape, pu, pm, &pseudo, &theta, &SUM_CFG).unwrap());
        let want_nr = stream_ref(&probs_u, &theta, true) + stream_ref(&probs_m, &theta, true);
        assert!((got_nr - want_nr).abs() < 1e-6);

        // nr is symmetric in its streams
        let swapped = tape.item(nr_loss(&tape, pm, pu, &pseudo, &theta, &SUM_CFG).unwrap());
        assert!((got_nr - swapped).abs() < 1e-12);
    }

    #[test]
    fn sup_loss_is_full_mask_ce_plus_dice() {
        let mut rng = Rng::new(3);
        let probs = random_probs(&mut rng, 1, 2, 4, 4);
        let gt = random_labels(&mut rng, 1, 2, 4, 4);
        let full = Mask::full([1, 4, 4], true);
        let tape = Tape::new();
        let p = tape.constant(probs).unwrap();
        let sup = tape.item(sup_loss(&tape, p, &gt, &SUM_CFG).unwrap());
        let parts = tape.item(masked_ce(&tape, p, &gt, &full).unwrap())
            + tape.item(masked_dice(&tape, p, &gt, &full).unwrap());
        assert!((sup - parts).abs() < 1e-12);
    }

    #[test]
    fn disregarded_pixels_cannot_move_the_losses() {
        let mut rng = Rng::new(29);
        let (n, c, h, w) = (1, 2, 4, 4);
        let probs_u = random_probs(&mut rng, n, c, h, w);
        let probs_m = random_probs(&mut rng, n, c, h, w);
        let pseudo = random_labels(&mut rng, n, c, h, w);
        // a fixed three-way split of the 16 pixels
        let delta = Mask::new([1, 4, 4], (0..16).map(|i| i % 3 == 0).collect()).unwrap();
        let omega = Mask::new([1, 4, 4], (0..16).map(|i| i % 3 == 1).collect()).unwrap();
        let theta = Mask::new([1, 4, 4], (0..16).map(|i| i % 3 == 2).collect()).unwrap();

        let evaluate = |pu: &Tensor<f64>, pm: &Tensor<f64>| -> (f64, f64) {
            let tape = Tape::new();
            let u = tape.constant(pu.clone()).unwrap();
            let m = tape.constant(pm.clone()).unwrap();
            (
                tape.item(con_loss(&tape, u, m, &pseudo, &omega, &SUM_CFG).unwrap()),
                tape.item(nr_loss(&tape, u, m, &pseudo, &theta, &SUM_CFG).unwrap()),
            )
        };
        let (con_before, nr_before) = evaluate(&probs_u, &probs_m);

        // re-randomize the distributions at delta pixels only
        let mut pu2 = probs_u.clone();
        let mut pm2 = probs_m.clone();
        let plane = h * w;
        for p in 0..plane {
            if !delta.data()[p] {
                continue;
            }
            for t in [&mut pu2, &mut pm2] {
                let a = rng.uniform_range(0.1, 0.9);
                t.data_mut()[p] = a;
                t.data_mut()[plane + p] = 1.0 - a;
            }
        }
        assert_ne!(pu2.data(), probs_u.data());
        let (con_after, nr_after) = evaluate(&pu2, &pm2);
        assert_eq!(con_before, con_after, "con must ignore delta pixels exactly");
        assert_eq!(nr_before, nr_after, "nr must ignore delta pixels exactly");
    }

    #[test]
    fn warmup_weight_worked_values() {
        assert!((consistency_weight(0, 800) - 0.006738).abs() < 1e-6);
        assert_eq!(consistency_weight(800, 800), 1.0);
        assert_eq!(consistency_weight(5000, 800), 1.0);
        assert!((consistency_weight(400, 800) - 0.2865).abs() < 1e-4);
        // nondecreasing
        let mut prev = 0.0;
        for t in 0..1000 {
            let w = consistency_weight(t, 800);
            assert!(w >= prev && w > 0.0 && w <= 1.0);
            prev = w;
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let combine = |t: usize| -> (f64, f64) {
            let tape = Tape::new();
            let sup = tape.scalar_const(1.0).unwrap();
            let con = tape.scalar_const(2.0).unwrap();
            let nr = tape.scalar_const(3.0).unwrap();
            let (total, lam) = total_loss(&tape, sup, con, nr, t, &SUM_CFG).unwrap();
            (tape.item(total), lam)
        };
        let (warm, lam_warm) = combine(800);
        assert_eq!(warm, 6.0);
        assert_eq!(lam_warm, 1.0);
        let (cold, lam_cold) = combine(0);
        assert!((cold - 1.03369).abs() < 1e-4);
        assert!((cold - (1.0 + lam_cold * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn mean_normalization_scales_ce_only() {
        let mut rng = Rng::new(19);
        let probs = random_probs(&mut rng, 1, 2, 4, 4);
        let gt = random_labels(&mut rng, 1, 2, 4, 4);
        let full = Mask::full([1, 4, 4], true);
        let mean_cfg = LossConfig {
            normalization: Normalization::Mean,
            ..SUM_CFG
        };
        let tape = Tape::new();
        let p = tape.constant(probs).unwrap();
        let got = tape.item(sup_loss(&tape, p, &gt, &mean_cfg).unwrap());
        let want = tape.item(masked_ce(&tape, p, &gt, &full).unwrap()) / 16.0
            + tape.item(masked_dice(&tape, p, &gt, &full).unwrap());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_of_total_loss_match_finite_differences() {
        for (empty_omega, empty_theta) in [(false, false), (true, false), (false, true)] {
            let mut rng = Rng::new(31 + empty_omega as u64 + 2 * empty_theta as u64);
            let (n, c, h, w) = (1, 2, 4, 4);
            let len = n * c * h * w;
            let raw_l: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let raw_u: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let raw_m: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let gt = random_labels(&mut rng, n, c, h, w);
            let pseudo = random_labels(&mut rng, n, c, h, w);
            let omega = if empty_omega {
                Mask::new([n, h, w], vec![false; h * w]).unwrap()
            } else {
                Mask::new([1, 4, 4], (0..16).map(|i| i % 3 == 1).collect()).unwrap()
            };
            let theta = if empty_theta {
                Mask::new([n, h, w], vec![false; h * w]).unwrap()
            } else {
                Mask::new([1, 4, 4], (0..16).map(|i| i % 3 == 2).collect()).unwrap()
            };

            let forward = |l: &[f64], u: &[f64], m: &[f64]| -> (f64, Tape<f64>, Value, Value, Value) {
                let tape = Tape::new();
                let logits_l = tape
                    .leaf(Tensor::new(vec![n, c, h, w], l.to_vec()).unwrap(), true)
                    .unwrap();
                let logits_u = tape
                    .leaf(Tensor::new(vec![n, c, h, w], u.to_vec()).unwrap(), true)
                    .unwrap();
                let logits_m = tape
                    .leaf(Tensor::new(vec![n, c, h, w], m.to_vec()).unwrap(), true)
                    .unwrap();
                let pl = tape.softmax(logits_l).unwrap();
                let pu = tape.softmax(logits_u).unwrap();
                let pm = tape.softmax(logits_m).unwrap();
                let sup = sup_loss(&tape, pl, &gt, &SUM_CFG).unwrap();
                let con = con_loss(&tape, pu, pm, &pseudo, &omega, &SUM_CFG).unwrap();
                let nr = nr_loss(&tape, pu, pm, &pseudo, &theta, &SUM_CFG).unwrap();
                let (total, _) = total_loss(&tape, sup, con, nr, 100, &SUM_CFG).unwrap();
                (tape.item(total), tape, total, logits_l, logits_u)
            };

            let (_, tape, total, leaf_l, leaf_u) = forward(&raw_l, &raw_u, &raw_m);
            let grads = tape.backward(total).unwrap();
            let gl = grads.get(leaf_l).unwrap().clone();
            let gu = grads.get(leaf_u).unwrap().clone();

            let h_step = 1e-6;
            for idx in (0..len).step_by(5) {
                let mut bumped = raw_l.clone();
                bumped[idx] += h_step;
                let up = forward(&bumped, &raw_u, &raw_m).0;
                bumped[idx] -= 2.0 * h_step;
                let down = forward(&bumped, &raw_u, &raw_m).0;
                let fd = (up - down) / (2.0 * h_step);
                let an = gl.data()[idx];
                assert!(
                    (an - fd).abs() / an.abs().max(1.0) < 1e-4,
                    "labeled logit {idx}: analytic {an}, fd {fd}"
                );

                let mut bumped_u = raw_u.clone();
                bumped_u[idx] += h_step;
                let up = forward(&raw_l, &bumped_u, &raw_m).0;
                bumped_u[idx] -= 2.0 * h_step;
                let down = forward(&raw_l, &bumped_u, &raw_m).0;
                let fd = (up - down) / (2.0 * h_step);
                let an = gu.data()[idx];
                assert!(
                    (an - fd).abs() / an.abs().max(1.0) < 1e-4,
                    "unlabeled logit {idx}: analytic {an}, fd {fd} \
                     (empty_omega {empty_omega}, empty_theta {empty_theta})"
                );
            }
        }
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let tape = Tape::new();
        let p = pixel_probs(&tape, &[[0.5, 0.5]]);
        let l = labels(&[0]);
        let m = mask(&[true]);
        assert!(smoothed_ce(&tape, p, &l, &m, 1.0).is_err());
        assert!(smoothed_ce(&tape, p, &l, &m, -0.1).is_err());
        assert!(smoothed_dice(&tape, p, &l, &m, -1.0).is_err());
        assert!(LossConfig { epsilon: 1.0, ..SUM_CFG }.validate().is_err());
        assert!(LossConfig { eta: -1.0, ..SUM_CFG }.validate().is_err());
        assert!(LossConfig { t_warm: 0, ..SUM_CFG }.validate().is_err());
        assert!(SUM_CFG.validate().is_ok());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let tape = Tape::new();
        let p = pixel_probs(&tape, &[[0.5, 0.5], [0.5, 0.5]]);
        assert!(masked_ce(&tape, p, &labels(&[0]), &mask(&[true])).is_err());
        assert!(masked_dice(&tape, p, &labels(&[0, 1]), &mask(&[true])).is_err());
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(seed in 0u64..400) {
            let mut rng = Rng::new(seed);
            let probs = random_probs(&mut rng, 1, 2, 3, 3);
            let target = random_labels(&mut rng, 1, 2, 3, 3);
            let m = random_mask(&mut rng, 1, 3, 3);
            let tape = Tape::new();
            let p = tape.constant(probs).unwrap();
            prop_assert!(tape.item(masked_ce(&tape, p, &target, &m).unwrap()) >= 0.0);
            prop_assert!(tape.item(masked_dice(&tape, p, &target, &m).unwrap()) >= 0.0);
            prop_assert!(tape.item(smoothed_ce(&tape, p, &target, &m, 0.2).unwrap()) >= 0.0);
            prop_assert!(tape.item(smoothed_dice(&tape, p, &target, &m, 20.0).unwrap()) >= 0.0);
        }

        #[test]
        fn smoothed_ce_never_beats_its_optimum(q in 0.01f64..0.99) {
            // single pixel, C = 2, target 0: optimum at p = (0.9, 0.1)
            let at = |prob0: f64| -> f64 {
                let tape = Tape::new();
                let p = pixel_probs(&tape, &[[prob0, 1.0 - prob0]]);
                tape.item(smoothed_ce(&tape, p, &labels(&[0]), &mask(&[true]), 0.2).unwrap())
            };
            prop_assert!(at(q) >= at(0.9) - 1e-12);
        }
    }
}
