//! Training loop: pseudo labels, mixed stream, region partition, losses,
//! SGD, EMA, periodic evaluation and checkpointing.

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{draw_mix_coefficient, mix_augment, Flip};
use crate::data::{sample_batch, split, Dataset, Split};
use crate::error::{config_err, Result};
use crate::label::{LabelMap, Mask};
use crate::loss::{self, LossBreakdown, LossConfig};
use crate::net::NetworkParams;
use crate::rng::{derive_seed, Rng};
use crate::synergy::{partition_regions, RegionMasks};
use crate::teacher::ModelState;
use crate::tensor::{Tape, Tensor, Value};
use crate::tsr;

use super::checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint};
use super::config::{Augmentation, RegionAssignment, RegionLoss, RunConfig};
use super::evaluate::{eval_csv_rows, evaluate_params, EVAL_HEADER};

pub const LOSS_HEADER: &str = "step,sup,con,nr,lambda_t,total,delta,omega,theta";

/// Controls for resuming and for deliberately stopping partway through.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop after this many optimizer steps have been taken in this
    /// invocation, leaving the run resumable. `None` runs to completion.
    pub stop_after: Option<usize>,
}

/// Everything observable about one optimizer step, for tests.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub breakdown: LossBreakdown,
    /// Fingerprint of the teacher weights used to produce pseudo labels.
    pub teacher_before: u64,
    /// Fingerprint of the teacher weights after the EMA update.
    pub teacher_after: u64,
    pub mix_lambda: Option<f64>,
}

/// Summary of a completed (or stopped) training invocation.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub final_step: usize,
    pub final_dice: f64,
    pub losses_csv: PathBuf,
    pub eval_csv: PathBuf,
    pub checkpoint_dir: PathBuf,
}

fn fingerprint(net: &NetworkParams<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in net.params() {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// The second unlabeled view: either a mixup of unlabeled and labeled
/// images, or a flipped copy whose predictions must be flipped back
/// before they can be compared pixelwise with the first view.
enum MixedView {
    Mix,
    Flipped(Flip),
}

fn build_mixed(
    cfg: &RunConfig,
    unlabeled: &Tensor<f32>,
    labeled: &Tensor<f32>,
    step: usize,
) -> Result<(Tensor<f32>, MixedView, Option<f64>)> {
    match cfg.augmentation {
        Augmentation::Ma => {
            let mut rng = Rng::new(derive_seed(cfg.seed, "augment", step as u64));
            let mc = draw_mix_coefficient(&mut rng, cfg.alpha_policy)?;
            let mixed = mix_augment(unlabeled, labeled, mc.lambda)?;
            Ok((mixed, MixedView::Mix, Some(mc.lambda)))
        }
        Augmentation::FlipH => Ok((
            Flip::Horizontal.image(unlabeled),
            MixedView::Flipped(Flip::Horizontal),
            None,
        )),
        Augmentation::FlipV => Ok((
            Flip::Vertical.image(unlabeled),
            MixedView::Flipped(Flip::Vertical),
            None,
        )),
    }
}

/// Plain CE + Dice over the full mask, used by the non-regional variants.
fn full_stream_loss(
    tape: &Tape<f32>,
    probs: Value,
    labels: &LabelMap,
    lc: &LossConfig,
) -> Result<Value> {
    let mask = Mask::full(labels.dims(), true);
    loss::region_stream_loss(tape, false, probs, labels, &mask, lc)
}

struct StepOutput {
    breakdown: LossBreakdown,
    regions: Option<RegionMasks>,
    mix_lambda: Option<f64>,
}

/// One optimizer step. Advances the student (SGD) and the teacher (EMA
/// when the variant uses one; step counter only otherwise).
fn run_step(
    state: &mut ModelState<f32>,
    dataset: &Dataset,
    parts: &Split,
    cfg: &RunConfig,
    lc: &LossConfig,
    step: usize,
) -> Result<StepOutput> {
    let batch = sample_batch(
        dataset,
        parts,
        step,
        cfg.seed,
        cfg.batch_labeled,
        cfg.batch_unlabeled,
    )?;

    // Pseudo labels come from the teacher when the variant has one,
    // otherwise from the current student itself.
    let pseudo: LabelMap = if cfg.variant.uses_teacher() {
        state
            .generate_pseudo_labels(&batch.unlabeled_images)?
            .labels
    } else {
        let probs = state.student.predict_probs(&batch.unlabeled_images)?;
        LabelMap::argmax_channel(&probs)?
    };

    let mixed = if cfg.variant.uses_mixed_stream() {
        Some(build_mixed(
            cfg,
            &batch.unlabeled_images,
            &batch.labeled_images,
            step,
        )?)
    } else {
        None
    };

    let tape: Tape<f32> = Tape::new();
    let handles = state.student.register(&tape, true)?;

    let xl = tape.constant(batch.labeled_images.clone())?;
    let logits_l = state.student.forward(&tape, &handles, xl)?;
    let probs_l = tape.softmax(logits_l)?;
    let sup = loss::sup_loss(&tape, probs_l, &batch.ground_truth, lc)?;

    let xu = tape.constant(batch.unlabeled_images.clone())?;
    let logits_u = state.student.forward(&tape, &handles, xu)?;
    let probs_u = tape.softmax(logits_u)?;

    let (probs_m, view) = match &mixed {
        Some((images, view, _)) => {
            let xm = tape.constant(images.clone())?;
            let logits_m = state.student.forward(&tape, &handles, xm)?;
            Some((tape.softmax(logits_m)?, view))
        }
        None => None,
    }
    .map_or((None, None), |(p, v)| (Some(p), Some(v)));

    let zero = tape.scalar_const(0.0)?;
    let mut con = zero;
    let mut nr = zero;
    let mut regions: Option<RegionMasks> = None;

    if cfg.variant.uses_regions() {
        let probs_m = probs_m.expect("regional variant always has a mixed stream");
        let view = view.expect("regional variant always has a mixed stream");
        // Partition in the first view's frame: flip the second view's
        // probabilities back before comparing pixels.
        let pm_val = tape.value(probs_m);
        let pm_aligned = match view {
            MixedView::Mix => pm_val,
            MixedView::Flipped(Flip::Horizontal) => pm_val.flip_w(),
            MixedView::Flipped(Flip::Vertical) => pm_val.flip_h(),
        };
        let parts_masks =
            partition_regions(&tape.value(probs_u), &pm_aligned, cfg.tau)?;
        let assign = cfg.region_assignment();
        let (c, n) = regional_losses(
            &tape,
            probs_u,
            probs_m,
            &pseudo,
            &parts_masks,
            &assign,
            view,
            lc,
        )?;
        con = c;
        nr = n;
        regions = Some(parts_masks);
    } else {
        // Non-regional variants: plain loss against the pseudo labels on
        // every pixel of whichever unlabeled streams exist.
        con = tape.add(con, full_stream_loss(&tape, probs_u, &pseudo, lc)?)?;
        if let (Some(pm), Some(view)) = (probs_m, view) {
            let pseudo_m = match view {
                MixedView::Mix => pseudo.clone(),
                MixedView::Flipped(f) => flip_labels(f, &pseudo),
            };
            con = tape.add(con, full_stream_loss(&tape, pm, &pseudo_m, lc)?)?;
        }
    }

    let (total, lambda_t) = loss::total_loss(&tape, sup, con, nr, step, lc)?;
    let mut breakdown = LossBreakdown {
        sup: tape.item(sup) as f64,
        con: tape.item(con) as f64,
        nr: tape.item(nr) as f64,
        lambda_t,
        total: tape.item(total) as f64,
        delta_count: 0,
        omega_count: 0,
        theta_count: 0,
    };
    if let Some(r) = &regions {
        let (d, o, t) = r.counts();
        breakdown.delta_count = d;
        breakdown.omega_count = o;
        breakdown.theta_count = t;
    }

    let mut grads = tape.backward(total)?;
    let grad_vec: Vec<Option<Tensor<f32>>> =
        handles.iter().map(|&h| grads.take(h)).collect();
    state.student.apply_sgd(&grad_vec, &cfg.optimizer_config())?;

    if cfg.variant.uses_teacher() {
        state.ema_update();
    } else {
        state.step += 1;
    }

    Ok(StepOutput {
        breakdown,
        regions,
        mix_lambda: mixed.and_then(|(_, _, l)| l),
    })
}

fn flip_labels(f: &Flip, labels: &LabelMap) -> LabelMap {
    match f {
        Flip::Horizontal => labels.flip_w(),
        Flip::Vertical => labels.flip_h(),
    }
}

fn flip_mask(f: &Flip, mask: &Mask) -> Mask {
    match f {
        Flip::Horizontal => mask.flip_w(),
        Flip::Vertical => mask.flip_h(),
    }
}

/// Region-weighted losses on both unlabeled views. The masks live in the
/// first view's frame; for a flipped second view both the pseudo labels
/// and the masks are flipped into its frame.
#[allow(clippy::too_many_arguments)]
fn regional_losses(
    tape: &Tape<f32>,
    probs_u: Value,
    probs_m: Value,
    pseudo: &LabelMap,
    regions: &RegionMasks,
    assign: &RegionAssignment,
    view: &MixedView,
    lc: &LossConfig,
) -> Result<(Value, Value)> {
    let mut con = tape.scalar_const(0.0)?;
    let mut nr = tape.scalar_const(0.0)?;
    for (mask, kind) in [
        (&regions.omega, assign.omega),
        (&regions.theta, assign.theta),
        (&regions.delta, assign.delta),
    ] {
        let smoothed = match kind {
            RegionLoss::Con => false,
            RegionLoss::Nr => true,
            RegionLoss::Excluded => continue,
        };
        let term_u = loss::region_stream_loss(tape, smoothed, probs_u, pseudo, mask, lc)?;
        let (labels_m, mask_m) = match view {
            MixedView::Mix => (pseudo.clone(), mask.clone()),
            MixedView::Flipped(f) => (flip_labels(f, pseudo), flip_mask(f, mask)),
        };
        let term_m =
            loss::region_stream_loss(tape, smoothed, probs_m, &labels_m, &mask_m, lc)?;
        let pair = tape.add(term_u, term_m)?;
        if smoothed {
            nr = tape.add(nr, pair)?;
        } else {
            con = tape.add(con, pair)?;
        }
    }
    Ok((con, nr))
}

/// Rewrites a CSV so it only contains the header plus rows whose first
/// column parses to a step `keep(step)`.
fn truncate_csv(path: &Path, header: &str, keep: impl Fn(usize) -> bool) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    if path.exists() {
        let text = fs::read_to_string(path)?;
        for line in text.lines().skip(1) {
            let first = line.split(',').next().unwrap_or("");
            match first.parse::<usize>() {
                Ok(step) if keep(step) => {
                    out.push_str(line);
                    out.push('\n');
                }
                _ => {}
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn loss_row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
        b.sup, b.con, b.nr, b.lambda_t, b.total, b.delta_count, b.omega_count, b.theta_count
    )
}

pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<RunRecord> {
    train_with(cfg, opts, &mut |_| {})
}

/// Runs (or resumes) training, invoking `observe` after every step.
pub fn train_with(
    cfg: &RunConfig,
    opts: TrainOptions,
    observe: &mut dyn FnMut(&StepTrace),
) -> Result<RunRecord> {
    let dataset = crate::data::load_dataset(&cfg.dataset)?;
    cfg.validate(dataset.spec.num_classes)?;
    let lc = cfg.loss_config();
    let parts = split(dataset.train.len(), cfg.labeled_ratio, cfg.seed)?;
    let hash = cfg.dynamics_hash();

    let run_dir = cfg.output.clone();
    fs::create_dir_all(&run_dir)?;
    let snapshot = serde_json::to_string_pretty(cfg)
        .map_err(|e| config_err(format!("config serialization: {e}")))?;
    fs::write(run_dir.join("config.json"), snapshot + "\n")?;
    let losses_csv = run_dir.join("losses.csv");
    let eval_csv = run_dir.join("eval.csv");
    let ckpt_root = run_dir.join("checkpoints");

    let mut state;
    let start;
    if opts.resume {
        let dir = latest_checkpoint(&run_dir).ok_or_else(|| {
            config_err(format!("no checkpoint to resume under {}", ckpt_root.display()))
        })?;
        state = load_checkpoint(&dir, Some(&hash))?;
        start = state.step;
        if start > cfg.total_steps {
            return Err(config_err(format!(
                "checkpoint is at step {start}, beyond total_steps {}",
                cfg.total_steps
            )));
        }
    } else {
        let init = NetworkParams::<f32>::init(
            derive_seed(cfg.seed, "init", 0),
            cfg.base_width,
            dataset.spec.num_classes,
        )?;
        state = ModelState::new(init, cfg.ema_decay)?;
        start = 0;
    }

    // Loss rows exist for steps already taken; eval rows for boundaries
    // already crossed (boundary k is written right before checkpoint k).
    truncate_csv(&losses_csv, LOSS_HEADER, |s| s < start)?;
    truncate_csv(&eval_csv, EVAL_HEADER, |s| s <= start)?;

    let eval_and_checkpoint = |state: &ModelState<f32>| -> Result<()> {
        let (rows, mean) =
            evaluate_params(&state.student, &dataset.test, dataset.spec.image_size)?;
        append(&eval_csv, &eval_csv_rows(state.step, &rows, &mean))?;
        save_checkpoint(&run_dir, state, &hash)?;
        Ok(())
    };

    if cfg.total_steps == 0 && !opts.resume {
        eval_and_checkpoint(&state)?;
    }

    let mut taken = 0usize;
    for step in start..cfg.total_steps {
        if let Some(n) = opts.stop_after {
            if taken >= n {
                break;
            }
        }
        let before = fingerprint(&state.teacher);
        let out = run_step(&mut state, &dataset, &parts, cfg, &lc, step)?;
        let after = fingerprint(&state.teacher);
        append(&losses_csv, &loss_row(step, &out.breakdown))?;
        if cfg.dump_regions {
            if let Some(r) = &out.regions {
                let dir = run_dir.join("regions");
                fs::create_dir_all(&dir)?;
                let (dims, codes) = r.code_map();
                tsr::write_u8(&dir.join(format!("step_{step:06}.tsr")), &dims, &codes)?;
            }
        }
        observe(&StepTrace {
            step,
            breakdown: out.breakdown,
            teacher_before: before,
            teacher_after: after,
            mix_lambda: out.mix_lambda,
        });
        taken += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            eval_and_checkpoint(&state)?;
        }
    }

    let (_, mean) = evaluate_params(&state.student, &dataset.test, dataset.spec.image_size)?;
    Ok(RunRecord {
        final_step: state.step,
        final_dice: mean.dice,
        losses_csv,
        eval_csv,
        checkpoint_dir: ckpt_root,
    })
}
