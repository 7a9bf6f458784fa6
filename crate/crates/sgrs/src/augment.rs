//! Input augmentations for the unlabeled stream: convex mixing against
//! labeled images, and axis flips.
//!
//! The mix coefficient is drawn as b ~ Beta(a, a) and folded to
//! lambda = max(b, 1-b), so the unlabeled image always dominates the
//! mixture and can keep its pseudo label.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::label::{LabelMap, Mask};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the Beta concentration `a` is chosen each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum AlphaPolicy {
    /// a ~ U(0, 1] independently per step (default).
    PerStepUniform,
    /// Constant a in (0, 1] for every step.
    Fixed(f64),
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::PerStepUniform
    }
}

impl AlphaPolicy {
    pub fn validate(&self) -> Result<()> {
        if let AlphaPolicy::Fixed(a) = *self {
            if !(a.is_finite() && a > 0.0 && a <= 1.0) {
                return Err(config_err(format!(
                    "fixed mix concentration must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixCoefficient {
    pub alpha: f64,
    /// Raw Beta(alpha, alpha) sample.
    pub beta_sample: f64,
    /// max(b, 1-b), always in [0.5, 1].
    pub lambda: f64,
}

/// ln(e^a + e^b) without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Johnk's Beta sampler in log space, stable for small concentrations
/// where u^(1/a) underflows: accept (x, y) = (u^(1/a), v^(1/a)) when
/// x + y <= 1 and return x / (x + y), all on logarithms.
fn sample_beta_symmetric(rng: &mut Rng, alpha: f64) -> f64 {
    loop {
        let log_x = rng.uniform_open().ln() / alpha;
        let log_y = rng.uniform_open().ln() / alpha;
        let log_sum = log_add_exp(log_x, log_y);
        if log_sum <= 0.0 {
            return (log_x - log_sum).exp();
        }
    }
}

pub fn draw_mix_coefficient(rng: &mut Rng, policy: AlphaPolicy) -> Result<MixCoefficient> {
    policy.validate()?;
    let alpha = match policy {
        AlphaPolicy::PerStepUniform => rng.uniform_open(),
        AlphaPolicy::Fixed(a) => a,
    };
    let beta_sample = sample_beta_symmetric(rng, alpha);
    Ok(MixCoefficient {
        alpha,
        beta_sample,
        lambda: beta_sample.max(1.0 - beta_sample),
    })
}

/// Pixelwise convex combination lambda * unlabeled + (1 - lambda) *
/// labeled. Unlabeled image i is paired with labeled image i mod n_l, so
/// the two stacks may have different batch sizes.
pub fn mix_augment(
    unlabeled: &Tensor<f32>,
    labeled: &Tensor<f32>,
    lambda: f64,
) -> Result<Tensor<f32>> {
    if !(0.5..=1.0).contains(&lambda) {
        return Err(contract_err(format!(
            "mix coefficient must lie in [0.5, 1], got {lambda}"
        )));
    }
    let (ud, ld) = (unlabeled.dims(), labeled.dims());
    if ud.len() != 4 || ld.len() != 4 || ud[1..] != ld[1..] || ld[0] == 0 {
        return Err(shape_err(format!(
            "cannot mix unlabeled {ud:?} with labeled {ld:?}"
        )));
    }
    let per_image = ud[1] * ud[2] * ud[3];
    let (lam, inv) = (lambda as f32, (1.0 - lambda) as f32);
    let mut data = Vec::with_capacity(unlabeled.len());
    for (i, u_img) in unlabeled.data().chunks(per_image).enumerate() {
        let l_img = &labeled.data()[(i % ld[0]) * per_image..][..per_image];
        data.extend(u_img.iter().zip(l_img).map(|(&u, &l)| lam * u + inv * l));
    }
    Tensor::new(ud.to_vec(), data)
}

/// Axis flips, named by the visual effect on an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    /// Mirror left-right (reverses the width axis).
    Horizontal,
    /// Mirror top-bottom (reverses the height axis).
    Vertical,
}

impl Flip {
    pub fn image<T: crate::tensor::Scalar>(&self, t: &Tensor<T>) -> Tensor<T> {
        match self {
            Flip::Horizontal => t.flip_w(),
            Flip::Vertical => t.flip_h(),
        }
    }

    pub fn labels(&self, l: &LabelMap) -> LabelMap {
        match self {
            Flip::Horizontal => l.flip_w(),
            Flip::Vertical => l.flip_h(),
        }
    }

    pub fn mask(&self, m: &Mask) -> Mask {
        match self {
            Flip::Horizontal => m.flip_w(),
            Flip::Vertical => m.flip_h(),
        }
    }
}
