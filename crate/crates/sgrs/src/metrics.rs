//! Binary segmentation quality metrics: Dice, Jaccard, 95th-percentile
//! Hausdorff distance, and average surface distance.
//!
//! Surface metrics use the symmetrized convention: the multiset of
//! nearest-boundary distances from prediction to ground truth and back,
//! combined, feeds both the percentile (hd95) and the mean (asd).
//! Boundaries are foreground pixels with at least one background
//! 4-neighbor, where pixels beyond the image border count as background.
//! Distances are exact brute force; masks here are desk-scale.

use crate::error::{shape_err, Error, Result};
use crate::label::Mask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
}

fn check_pair(pred: &Mask, gt: &Mask) -> Result<(usize, usize)> {
    if pred.dims() != gt.dims() {
        return Err(shape_err(format!(
            "mask dims differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let [n, h, w] = pred.dims();
    if n != 1 {
        return Err(shape_err(format!(
            "surface metrics take one image at a time, got {n} planes"
        )));
    }
    Ok((h, w))
}

/// dice = 2|P∩G| / (|P|+|G|), jaccard = |P∩G| / |P∪G|; both 1 when both
/// masks are empty (perfect agreement on "nothing").
pub fn overlap_metrics(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(shape_err(format!(
            "mask dims differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let (mut p_count, mut g_count) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
        p_count += p as usize;
        g_count += g as usize;
    }
    if p_count + g_count == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((
        2.0 * inter as f64 / (p_count + g_count) as f64,
        inter as f64 / union as f64,
    ))
}

/// Coordinates of foreground pixels with at least one background
/// 4-neighbor; the image border counts as background.
fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let [_, h, w] = mask.dims();
    let at = |y: usize, x: usize| mask.data()[y * w + x];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !at(y - 1, x)
                || !at(y + 1, x)
                || !at(y, x - 1)
                || !at(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(fy, fx) in from {
        let mut best = f64::INFINITY;
        for &(ty, tx) in to {
            let (dy, dx) = (fy as f64 - ty as f64, fx as f64 - tx as f64);
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        out.push(best.sqrt());
    }
}

/// Sorted multiset of nearest-boundary distances, prediction-to-truth
/// followed by truth-to-prediction, then sorted ascending.
pub fn surface_distances(pred: &Mask, gt: &Mask) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::EmptyMask(format!(
            "prediction has {} foreground pixels, truth has {}",
            pred.count(),
            gt.count()
        )));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let mut distances = Vec::with_capacity(bp.len() + bg.len());
    directed_distances(&bp, &bg, &mut distances);
    directed_distances(&bg, &bp, &mut distances);
    distances.sort_by(|a, b| a.total_cmp(b));
    Ok(distances)
}

/// Percentile by linear interpolation between closest order statistics:
/// rank h = (n-1)·q, value = v[floor h] + frac·(v[ceil h] - v[floor h]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(percentile(&surface_distances(pred, gt)?, 0.95))
}

pub fn asd(pred: &Mask, gt: &Mask) -> Result<f64> {
    let d = surface_distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// All four metrics from one distance computation. Fails with
/// EmptyMaskError when either mask has no foreground; callers substitute
/// [`empty_mask_sentinel`] and record a note.
pub fn report(pred: &Mask, gt: &Mask) -> Result<MetricsReport> {
    let (dice, jaccard) = overlap_metrics(pred, gt)?;
    let distances = surface_distances(pred, gt)?;
    Ok(MetricsReport {
        dice,
        jaccard,
        hd95: percentile(&distances, 0.95),
        asd: distances.iter().sum::<f64>() / distances.len() as f64,
    })
}

/// Worst-case stand-in distance when surface metrics are undefined: the
/// image diagonal.
pub fn empty_mask_sentinel(h: usize, w: usize) -> f64 {
    ((h * h + w * w) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut data = vec![false; h * w];
        for &(y, x) in on {
            data[y * w + x] = true;
        }
        Mask::new([1, h, w], data).unwrap()
    }

    fn rect_mask(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
        let mut data = vec![false; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = true;
            }
        }
        Mask::new([1, h, w], data).unwrap()
    }

    fn random_mask(rng: &mut Rng, h: usize, w: usize) -> Mask {
        loop {
            let data: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.3).collect();
            if data.iter().any(|&b| b) {
                return Mask::new([1, h, w], data).unwrap();
            }
        }
    }

    #[test]
    fn overlap_worked_values() {
        let a = rect_mask(8, 8, 1, 1, 4, 4);
        assert_eq!(overlap_metrics(&a, &a).unwrap(), (1.0, 1.0));

        let b = rect_mask(8, 8, 5, 5, 7, 7);
        assert_eq!(overlap_metrics(&a, &b).unwrap(), (0.0, 0.0));

        // |P| = 2, |G| = 2, overlap 1
        let p = mask_from(4, 4, &[(0, 0), (0, 1)]);
        let g = mask_from(4, 4, &[(0, 1), (0, 2)]);
        let (d, j) = overlap_metrics(&p, &g).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        assert!((j - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_masks_agree_perfectly() {
        let e = Mask::new([1, 4, 4], vec![false; 16]).unwrap();
        assert_eq!(overlap_metrics(&e, &e).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn boundary_of_a_filled_block_is_its_ring() {
        let m = rect_mask(16, 16, 3, 3, 6, 6); // 3x3 block
        let b = boundary(&m);
        assert_eq!(b.len(), 8, "3x3 block boundary is all but the center");
        assert!(!b.contains(&(4, 4)));

        let m5 = rect_mask(16, 16, 2, 2, 7, 7); // 5x5 block
        assert_eq!(boundary(&m5).len(), 16);
    }

    #[test]
    fn border_pixels_are_boundary() {
        // a mask hugging the image corner: the corner pixel has no
        // in-image background neighbor but the border counts
        let m = rect_mask(4, 4, 0, 0, 2, 2);
        let b = boundary(&m);
        assert!(b.contains(&(0, 0)));
        assert_eq!(b.len(), 4);

        // full image: every pixel still has the border as background
        let full = Mask::full([1, 3, 3], true);
        assert_eq!(boundary(&full).len(), 8, "all but the center");
    }

    #[test]
    fn identical_masks_have_zero_distances() {
        let m = rect_mask(16, 16, 4, 5, 9, 11);
        let d = surface_distances(&m, &m).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
        assert_eq!(hd95(&m, &m).unwrap(), 0.0);
        assert_eq!(asd(&m, &m).unwrap(), 0.0);
        let r = report(&m, &m).unwrap();
        assert_eq!(
            r,
            MetricsReport {
                dice: 1.0,
                jaccard: 1.0,
                hd95: 0.0,
                asd: 0.0
            }
        );
    }

    #[test]
    fn single_pixel_pair_distance_five() {
        let p = mask_from(8, 8, &[(0, 0)]);
        let g = mask_from(8, 8, &[(3, 4)]);
        let d = surface_distances(&p, &g).unwrap();
        assert_eq!(d, vec![5.0, 5.0]);
        assert_eq!(hd95(&p, &g).unwrap(), 5.0);
        assert_eq!(asd(&p, &g).unwrap(), 5.0);
    }

    #[test]
    fn nested_squares_distances() {
        let gt = rect_mask(16, 16, 2, 2, 7, 7); // 5x5
        let pred = rect_mask(16, 16, 3, 3, 6, 6); // concentric 3x3
        let d = surface_distances(&pred, &gt).unwrap();
        let has = |v: f64| d.iter().any(|&x| (x - v).abs() < 1e-9);
        assert!(has(1.0), "edge-center of outer ring is 1 from inner ring");
        assert!(has(2.0f64.sqrt()), "outer corner is sqrt(2) from inner corner");
    }

    #[test]
    fn percentile_rule_pinned() {
        // 21 values, rank h = 20*0.95 = 19 exactly -> the 20th value
        let mut vals = vec![0.0; 20];
        vals.push(10.0);
        assert_eq!(percentile(&vals, 0.95), 0.0);

        // interpolation between ranks: {0, 10}, h = 0.95
        assert!((percentile(&[0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 1.0), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 0.0), 1.0);
    }

    #[test]
    fn empty_mask_is_an_error_with_sentinel_available() {
        let empty = Mask::new([1, 8, 8], vec![false; 64]).unwrap();
        let full = rect_mask(8, 8, 2, 2, 5, 5);
        match surface_distances(&empty, &full) {
            Err(Error::EmptyMask(_)) => {}
            other => panic!("expected EmptyMask, got {other:?}"),
        }
        assert!(surface_distances(&full, &empty).is_err());
        assert!((empty_mask_sentinel(8, 8) - 128f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_translation_invariant() {
        let mut rng = Rng::new(6);
        for _ in 0..10 {
            let a = random_mask(&mut rng, 12, 12);
            let b = random_mask(&mut rng, 12, 12);
            assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
            assert_eq!(asd(&a, &b).unwrap(), asd(&b, &a).unwrap());
        }

        // shift both masks by (2, 3) inside a larger canvas
        let shift = |m: &Mask| -> Mask {
            let [_, h, w] = m.dims();
            let mut data = vec![false; (h + 4) * (w + 4)];
            for y in 0..h {
                for x in 0..w {
                    if m.data()[y * w + x] {
                        data[(y + 2) * (w + 4) + x + 3] = true;
                    }
                }
            }
            Mask::new([1, h + 4, w + 4], data).unwrap()
        };
        let pad = |m: &Mask| -> Mask {
            let [_, h, w] = m.dims();
            let mut data = vec![false; (h + 4) * (w + 4)];
            for y in 0..h {
                for x in 0..w {
                    data[y * (w + 4) + x] = m.data()[y * w + x];
                }
            }
            Mask::new([1, h + 4, w + 4], data).unwrap()
        };
        let a = random_mask(&mut rng, 10, 10);
        let b = random_mask(&mut rng, 10, 10);
        let base = report(&pad(&a), &pad(&b)).unwrap();
        let moved = report(&shift(&a), &shift(&b)).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn brute_force_reference_agreement() {
        // independent O(n^2) reference over full masks (not just
        // boundaries of the optimized form) restricted to boundary sets
        let mut rng = Rng::new(14);
        for _ in 0..50 {
            let a = random_mask(&mut rng, 16, 16);
            let b = random_mask(&mut rng, 16, 16);
            let got = surface_distances(&a, &b).unwrap();

            let bound = |m: &Mask| -> Vec<(i64, i64)> {
                let [_, h, w] = m.dims();
                let mut out = Vec::new();
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        if !m.data()[y as usize * w + x as usize] {
                            continue;
                        }
                        let bg = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                            .iter()
                            .any(|&(ny, nx)| {
                                ny < 0
                                    || nx < 0
                                    || ny >= h as i64
                                    || nx >= w as i64
                                    || !m.data()[ny as usize * w + nx as usize]
                            });
                        if bg {
                            out.push((y, x));
                        }
                    }
                }
                out
            };
            let (ba, bb) = (bound(&a), bound(&b));
            let mut want: Vec<f64> = ba
                .iter()
                .map(|&(y, x)| {
                    bb.iter()
                        .map(|&(ty, tx)| (((y - ty).pow(2) + (x - tx).pow(2)) as f64).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .chain(bb.iter().map(|&(y, x)| {
                    ba.iter()
                        .map(|&(ty, tx)| (((y - ty).pow(2) + (x - tx).pow(2)) as f64).sqrt())
                        .fold(f64::INFINITY, f64::min)
                }))
                .collect();
            want.sort_by(|p, q| p.total_cmp(q));
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = rect_mask(8, 8, 1, 1, 3, 3);
        let b = rect_mask(8, 10, 1, 1, 3, 3);
        assert!(overlap_metrics(&a, &b).is_err());
        assert!(surface_distances(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn jaccard_dice_relation(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let a = random_mask(&mut rng, 10, 10);
            let b = random_mask(&mut rng, 10, 10);
            let (d, j) = overlap_metrics(&a, &b).unwrap();
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        }
    }
}
