//! Synergy evaluation: per-pixel predictive entropy and the partition of
//! the pseudo-label domain into disregarded (delta), consistent (omega),
//! and inconsistent (theta) regions.
//!
//! A pixel is disregarded when the student is uncertain on either the
//! raw unlabeled image or its mixed counterpart (entropy above tau on
//! either stream). Certain pixels split by whether the two streams'
//! argmax classes agree.

use crate::error::{contract_err, shape_err, Result};
use crate::label::{LabelMap, Mask};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel entropy in nats, always stored in f64.
#[derive(Clone, Debug)]
pub struct EntropyMap {
    values: Tensor<f64>,
    num_classes: usize,
}

impl EntropyMap {
    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// ln C, the largest possible entropy.
    pub fn max_entropy(&self) -> f64 {
        (self.num_classes as f64).ln()
    }
}

/// Entropy -sum_c p_c ln p_c per pixel over `[N, C, H, W]`
/// probabilities, computed in f64 with p clamped to >= 1e-12 inside the
/// logarithm and the result clamped into [0, ln C] to absorb roundoff.
pub fn entropy_map<T: Scalar>(probs: &Tensor<T>) -> Result<EntropyMap> {
    let d = probs.dims();
    if d.len() != 4 {
        return Err(shape_err(format!(
            "entropy expects probabilities [N,C,H,W], got {d:?}"
        )));
    }
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let plane = h * w;
    let max_ent = (c as f64).ln();
    let mut values = vec![0.0f64; n * plane];
    for i in 0..n {
        for p in 0..plane {
            let mut sum = 0.0;
            let mut ent = 0.0;
            for ch in 0..c {
                let v = Scalar::to_f64(probs.data()[(i * c + ch) * plane + p]);
                if !(v.is_finite() && v >= -1e-7) {
                    return Err(contract_err(format!(
                        "probability {v} at pixel {p} of image {i} is not a valid distribution entry"
                    )));
                }
                sum += v;
                if v > 1e-12 {
                    ent -= v * v.ln();
                }
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(contract_err(format!(
                    "channel values at pixel {p} of image {i} sum to {sum}, not a distribution"
                )));
            }
            values[i * plane + p] = ent.clamp(0.0, max_ent);
        }
    }
    Ok(EntropyMap {
        values: Tensor::new(vec![n, h, w], values)?,
        num_classes: c,
    })
}

/// The three-way pixel partition, plus the threshold that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub delta: Mask,
    pub omega: Mask,
    pub theta: Mask,
}

impl RegionMasks {
    /// (|delta|, |omega|, |theta|) pixel counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.delta.count(), self.omega.count(), self.theta.count())
    }

    /// One byte per pixel for debug dumps: 0 = delta, 1 = omega,
    /// 2 = theta.
    pub fn code_map(&self) -> ([usize; 3], Vec<u8>) {
        let codes = self
            .delta
            .data()
            .iter()
            .zip(self.omega.data())
            .map(|(&d, &o)| if d { 0u8 } else if o { 1 } else { 2 })
            .collect();
        (self.delta.dims(), codes)
    }
}

/// Partitions pixels by student predictions on the unlabeled stream
/// (`probs_u`) and the mixed stream (`probs_m`):
/// delta = uncertain on either stream (entropy > tau), omega = certain
/// and classes agree, theta = certain and classes differ. Any finite
/// tau >= 0 is accepted so the endpoints are exercisable.
pub fn partition_regions<T: Scalar>(
    probs_u: &Tensor<T>,
    probs_m: &Tensor<T>,
    tau: f64,
) -> Result<RegionMasks> {
    if probs_u.dims() != probs_m.dims() {
        return Err(shape_err(format!(
            "stream dims differ: {:?} vs {:?}",
            probs_u.dims(),
            probs_m.dims()
        )));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(contract_err(format!(
            "entropy threshold must be finite and nonnegative, got {tau}"
        )));
    }
    let ent_u = entropy_map(probs_u)?;
    let ent_m = entropy_map(probs_m)?;
    let class_u = LabelMap::argmax_channel(probs_u)?;
    let class_m = LabelMap::argmax_channel(probs_m)?;

    let dims = class_u.dims();
    let n = class_u.len();
    let (mut delta, mut omega, mut theta) =
        (vec![false; n], vec![false; n], vec![false; n]);
    for i in 0..n {
        let uncertain = ent_u.values().data()[i] > tau || ent_m.values().data()[i] > tau;
        let agree = class_u.data()[i] == class_m.data()[i];
        delta[i] = uncertain;
        omega[i] = !uncertain && agree;
        theta[i] = !uncertain && !agree;
    }
    Ok(RegionMasks {
        delta: Mask::new(dims, delta)?,
        omega: Mask::new(dims, omega)?,
        theta: Mask::new(dims, theta)?,
    })
}
