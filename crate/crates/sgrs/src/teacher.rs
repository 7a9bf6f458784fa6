//! Student/teacher parameter pair with exponential-moving-average
//! updates, and pseudo-label generation from the teacher.
//!
//! The teacher is never trained directly: it starts as a copy of the
//! student and only ever moves through [`ModelState::ema_update`]. Its
//! forward passes run on a throwaway tape with constant leaves, so no
//! gradient can reach it by construction.

use crate::error::{config_err, contract_err, Result};
use crate::label::LabelMap;
use crate::net::NetworkParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ModelState<T: Scalar> {
    pub student: NetworkParams<T>,
    pub teacher: NetworkParams<T>,
    ema_decay: f64,
    pub step: usize,
}

/// Teacher predictions on one batch of unlabeled images.
#[derive(Clone, Debug)]
pub struct PseudoLabels<T: Scalar> {
    /// Softmax probabilities `[N, C, H, W]`.
    pub teacher_probs: Tensor<T>,
    /// Channel argmax of `teacher_probs`.
    pub labels: LabelMap,
}

fn check_decay(ema_decay: f64) -> Result<()> {
    if !(ema_decay.is_finite() && (0.0..1.0).contains(&ema_decay)) {
        return Err(config_err(format!(
            "ema_decay must lie in [0, 1), got {ema_decay}"
        )));
    }
    Ok(())
}

impl<T: Scalar> ModelState<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: NetworkParams<T>, ema_decay: f64) -> Result<Self> {
        check_decay(ema_decay)?;
        let teacher = student.clone();
        Ok(ModelState {
            student,
            teacher,
            ema_decay,
            step: 0,
        })
    }

    /// Restores a checkpointed pair; both nets must share a topology.
    pub fn from_parts(
        student: NetworkParams<T>,
        teacher: NetworkParams<T>,
        ema_decay: f64,
        step: usize,
    ) -> Result<Self> {
        check_decay(ema_decay)?;
        if student.base_width() != teacher.base_width()
            || student.num_classes() != teacher.num_classes()
        {
            return Err(contract_err(format!(
                "student topology (width {}, classes {}) differs from teacher (width {}, classes {})",
                student.base_width(),
                student.num_classes(),
                teacher.base_width(),
                teacher.num_classes()
            )));
        }
        Ok(ModelState {
            student,
            teacher,
            ema_decay,
            step,
        })
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    /// teacher <- decay * teacher + (1 - decay) * student, elementwise;
    /// advances the step counter. Called once per step after the student
    /// update.
    pub fn ema_update(&mut self) {
        let d = T::from_f64(self.ema_decay);
        let keep = T::from_f64(1.0 - self.ema_decay);
        for ((_, t), (_, s)) in self
            .teacher
            .params_mut()
            .iter_mut()
            .zip(self.student.params())
        {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = d * *tv + keep * sv;
            }
        }
        self.step += 1;
    }

    /// Teacher probabilities and their argmax for a batch of unlabeled
    /// images. Recomputed from scratch every call; records no gradients.
    pub fn generate_pseudo_labels(&self, unlabeled: &Tensor<T>) -> Result<PseudoLabels<T>> {
        let teacher_probs = self.teacher.predict_probs(unlabeled)?;
        let labels = LabelMap::argmax_channel(&teacher_probs)?;
        Ok(PseudoLabels {
            teacher_probs,
            labels,
        })
    }
}
