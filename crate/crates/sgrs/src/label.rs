//! Class-index maps and boolean pixel masks.
//!
//! These are the integer-valued companions to the float tensors: ground
//! truth, pseudo labels, and the region masks that gate each loss term.
//! They never carry gradients; losses consume them as constant weight
//! tensors built by the helpers here.

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Per-pixel class indices, shape `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(shape_err(format!(
                "label dims {dims:?} imply {} elements, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(LabelMap { dims, data })
    }

    /// Channel argmax of a `[N, C, H, W]` probability or logit tensor.
    /// Ties break toward the lowest channel index.
    pub fn argmax_channel<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let d = t.dims();
        if d.len() != 4 {
            return Err(shape_err(format!("argmax expects [N,C,H,W], got {d:?}")));
        }
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        let hw = h * w;
        let src = t.data();
        let mut out = vec![0u32; n * hw];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut best = 0u32;
                let mut best_v = src[base + p];
                for ch in 1..c {
                    let v = src[base + ch * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = ch as u32;
                    }
                }
                out[b * hw + p] = best;
            }
        }
        Ok(LabelMap {
            dims: [n, h, w],
            data: out,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn max_class(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// One-hot expansion to `[N, C, H, W]`.
    pub fn one_hot<T: Scalar>(&self, num_classes: usize) -> Result<Tensor<T>> {
        let [n, h, w] = self.dims;
        let hw = h * w;
        let mut out = vec![T::zero(); n * num_classes * hw];
        for (i, &cls) in self.data.iter().enumerate() {
            if cls as usize >= num_classes {
                return Err(contract_err(format!(
                    "label {cls} out of range for {num_classes} classes"
                )));
            }
            let (b, p) = (i / hw, i % hw);
            out[(b * num_classes + cls as usize) * hw + p] = T::one();
        }
        Tensor::new(vec![n, num_classes, h, w], out)
    }

    /// Foreground mask: every pixel whose class is nonzero.
    pub fn foreground(&self) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&c| c != 0).collect(),
        }
    }

    pub fn flip_w(&self) -> Self {
        let [n, h, w] = self.dims;
        let mut out = self.data.clone();
        for b in 0..n {
            for y in 0..h {
                let row = &mut out[(b * h + y) * w..][..w];
                row.reverse();
            }
        }
        LabelMap {
            dims: self.dims,
            data: out,
        }
    }

    pub fn flip_h(&self) -> Self {
        let [n, h, w] = self.dims;
        let mut out = vec![0u32; self.data.len()];
        for b in 0..n {
            for y in 0..h {
                let src = &self.data[(b * h + y) * w..][..w];
                out[(b * h + (h - 1 - y)) * w..][..w].copy_from_slice(src);
            }
        }
        LabelMap {
            dims: self.dims,
            data: out,
        }
    }

    pub fn to_u8(&self) -> Result<Vec<u8>> {
        self.data
            .iter()
            .map(|&c| {
                u8::try_from(c).map_err(|_| contract_err(format!("class {c} does not fit in u8")))
            })
            .collect()
    }

    pub fn from_u8(dims: [usize; 3], data: &[u8]) -> Result<Self> {
        LabelMap::new(dims, data.iter().map(|&b| b as u32).collect())
    }
}

/// Boolean pixel map, shape `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(shape_err(format!(
                "mask dims {dims:?} imply {} elements, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn full(dims: [usize; 3], value: bool) -> Self {
        Mask {
            data: vec![value; dims.iter().product()],
            dims,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.data[i]
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        debug_assert_eq!(self.dims, other.dims);
        Mask {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn flip_w(&self) -> Self {
        let [n, h, w] = self.dims;
        let mut out = self.data.clone();
        for b in 0..n {
            for y in 0..h {
                out[(b * h + y) * w..][..w].reverse();
            }
        }
        Mask {
            dims: self.dims,
            data: out,
        }
    }

    pub fn flip_h(&self) -> Self {
        let [n, h, w] = self.dims;
        let mut out = vec![false; self.data.len()];
        for b in 0..n {
            for y in 0..h {
                let src = &self.data[(b * h + y) * w..][..w];
                out[(b * h + (h - 1 - y)) * w..][..w].copy_from_slice(src);
            }
        }
        Mask {
            dims: self.dims,
            data: out,
        }
    }

    /// `{0,1}` tensor of shape `[N, C, H, W]` with the mask value
    /// replicated across channels; multiplying by it realizes boolean
    /// masking on the tape.
    pub fn channel_weights<T: Scalar>(&self, num_classes: usize) -> Tensor<T> {
        let [n, h, w] = self.dims;
        let hw = h * w;
        let mut out = vec![T::zero(); n * num_classes * hw];
        for (i, &m) in self.data.iter().enumerate() {
            if m {
                let (b, p) = (i / hw, i % hw);
                for c in 0..num_classes {
                    out[(b * num_classes + c) * hw + p] = T::one();
                }
            }
        }
        Tensor::new(vec![n, num_classes, h, w], out).unwrap()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&b| b as u8).collect()
    }
}

/// Constant weight tensor for masked cross entropy: `mask ⊙ one_hot(y)`.
pub fn masked_one_hot<T: Scalar>(
    labels: &LabelMap,
    mask: &Mask,
    num_classes: usize,
) -> Result<Tensor<T>> {
    if labels.dims() != mask.dims() {
        return Err(shape_err(format!(
            "labels {:?} and mask {:?} disagree",
            labels.dims(),
            mask.dims()
        )));
    }
    let [n, h, w] = labels.dims();
    let hw = h * w;
    let mut out = vec![T::zero(); n * num_classes * hw];
    for (i, (&cls, &m)) in labels.data().iter().zip(mask.data()).enumerate() {
        if !m {
            continue;
        }
        if cls as usize >= num_classes {
            return Err(contract_err(format!(
                "label {cls} out of range for {num_classes} classes"
            )));
        }
        let (b, p) = (i / hw, i % hw);
        out[(b * num_classes + cls as usize) * hw + p] = T::one();
    }
    Tensor::new(vec![n, num_classes, h, w], out)
}

/// Constant weight tensor for label-smoothed cross entropy:
/// `mask ⊙ ((1−ε)·one_hot(y) + ε/C)`.
pub fn smoothed_weights<T: Scalar>(
    labels: &LabelMap,
    mask: &Mask,
    num_classes: usize,
    epsilon: f64,
) -> Result<Tensor<T>> {
    if labels.dims() != mask.dims() {
        return Err(shape_err(format!(
            "labels {:?} and mask {:?} disagree",
            labels.dims(),
            mask.dims()
        )));
    }
    let [n, h, w] = labels.dims();
    let hw = h * w;
    let off = lit::<T>(epsilon / num_classes as f64);
    let on = lit::<T>(1.0 - epsilon) + off;
    let mut out = vec![T::zero(); n * num_classes * hw];
    for (i, (&cls, &m)) in labels.data().iter().zip(mask.data()).enumerate() {
        if !m {
            continue;
        }
        if cls as usize >= num_classes {
            return Err(contract_err(format!(
                "label {cls} out of range for {num_classes} classes"
            )));
        }
        let (b, p) = (i / hw, i % hw);
        for c in 0..num_classes {
            out[(b * num_classes + c) * hw + p] = if c == cls as usize { on } else { off };
        }
    }
    Tensor::new(vec![n, num_classes, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_toward_lowest_channel() {
        let t = Tensor::new(vec![1, 3, 1, 2], vec![0.4, 0.1, 0.4, 0.8, 0.2, 0.1]).unwrap();
        let labels = LabelMap::argmax_channel::<f64>(&t).unwrap();
        // pixel 0: channels (0.4, 0.4, 0.2) -> tie between 0 and 1 -> 0
        // pixel 1: channels (0.1, 0.8, 0.1) -> 1
        assert_eq!(labels.data(), &[0, 1]);
    }

    #[test]
    fn one_hot_places_single_one_per_pixel() {
        let labels = LabelMap::new([1, 1, 2], vec![1, 0]).unwrap();
        let oh: Tensor<f64> = labels.one_hot(2).unwrap();
        assert_eq!(oh.dims(), &[1, 2, 1, 2]);
        assert_eq!(oh.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range_class() {
        let labels = LabelMap::new([1, 1, 1], vec![3]).unwrap();
        assert!(labels.one_hot::<f64>(2).is_err());
    }

    #[test]
    fn masked_one_hot_zeroes_unmasked_pixels() {
        let labels = LabelMap::new([1, 1, 2], vec![0, 1]).unwrap();
        let mask = Mask::new([1, 1, 2], vec![true, false]).unwrap();
        let w: Tensor<f64> = masked_one_hot(&labels, &mask, 2).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn smoothed_weights_mix_one_hot_with_uniform() {
        let labels = LabelMap::new([1, 1, 1], vec![0]).unwrap();
        let mask = Mask::full([1, 1, 1], true);
        let w: Tensor<f64> = smoothed_weights(&labels, &mask, 2, 0.2).unwrap();
        // (1-eps) + eps/C = 0.9, eps/C = 0.1
        assert!((w.data()[0] - 0.9).abs() < 1e-12);
        assert!((w.data()[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn smoothed_weights_at_zero_epsilon_equal_one_hot() {
        let labels = LabelMap::new([1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let mask = Mask::new([1, 2, 2], vec![true, true, false, true]).unwrap();
        let a: Tensor<f64> = smoothed_weights(&labels, &mask, 2, 0.0).unwrap();
        let b: Tensor<f64> = masked_one_hot(&labels, &mask, 2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mask_algebra() {
        let a = Mask::new([1, 1, 3], vec![true, false, true]).unwrap();
        let b = Mask::new([1, 1, 3], vec![true, true, false]).unwrap();
        assert_eq!(a.and(&b).data(), &[true, false, false]);
        assert_eq!(a.or(&b).data(), &[true, true, true]);
        assert_eq!(a.not().data(), &[false, true, false]);
        assert_eq!(a.count(), 2);
    }

    #[test]
    fn label_and_mask_flips_are_involutions() {
        let labels = LabelMap::new([1, 2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(labels.flip_w().flip_w(), labels);
        assert_eq!(labels.flip_h().flip_h(), labels);
        assert_eq!(labels.flip_w().data(), &[2, 1, 0, 5, 4, 3]);
        assert_eq!(labels.flip_h().data(), &[3, 4, 5, 0, 1, 2]);

        let m = Mask::new([1, 2, 2], vec![true, false, false, false]).unwrap();
        assert_eq!(m.flip_w().data(), &[false, true, false, false]);
        assert_eq!(m.flip_h().data(), &[false, false, true, false]);
        assert_eq!(m.flip_w().flip_w(), m);
    }

    #[test]
    fn channel_weights_replicate_mask() {
        let m = Mask::new([1, 1, 2], vec![true, false]).unwrap();
        let w: Tensor<f32> = m.channel_weights(2);
        assert_eq!(w.dims(), &[1, 2, 1, 2]);
        assert_eq!(w.data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
