//! Miniature 2D encoder-decoder segmentation network and its SGD update.
//!
//! Topology (base width `w`, `C` output classes):
//! two encoder stages (conv-relu-conv-relu, then 2x2 maxpool), a
//! bottleneck, two decoder stages (2x nearest upsample, concat with the
//! matching encoder activation, conv-relu-conv-relu), and a final 1x1
//! conv to `C` channels. All 3x3 convs use padding 1, so spatial dims
//! are preserved end to end.

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{lit, Scalar, Tape, Tensor, Value};

/// `(name, out_channels, in_channels, kernel)` for every conv, in
/// execution order. Decoder inputs concatenate the upsampled stream
/// first, then the skip connection.
fn layer_plan(w: usize, c: usize) -> Vec<(&'static str, usize, usize, usize)> {
    vec![
        ("enc1.c1", w, 1, 3),
        ("enc1.c2", w, w, 3),
        ("enc2.c1", 2 * w, w, 3),
        ("enc2.c2", 2 * w, 2 * w, 3),
        ("mid.c1", 4 * w, 2 * w, 3),
        ("mid.c2", 4 * w, 4 * w, 3),
        ("dec2.c1", 2 * w, 6 * w, 3),
        ("dec2.c2", 2 * w, 2 * w, 3),
        ("dec1.c1", w, 3 * w, 3),
        ("dec1.c2", w, w, 3),
        ("head", c, w, 1),
    ]
}

/// Ordered named parameters of one network instance.
#[derive(Clone, Debug)]
pub struct NetworkParams<T: Scalar> {
    base_width: usize,
    num_classes: usize,
    params: Vec<(String, Tensor<T>)>,
}

/// Plain SGD with decoupled-from-nothing weight decay:
/// `p ← p − lr·(g + weight_decay·p)`, no momentum.
#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err(format!(
                "weight_decay must be nonnegative and finite, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Kaiming-style initialization: kernel elements drawn from
    /// Normal(0, sqrt(2 / fan_in)), biases zero. Fully determined by the
    /// seed.
    pub fn init(seed: u64, base_width: usize, num_classes: usize) -> Result<Self> {
        if base_width < 2 {
            return Err(config_err(format!(
                "base_width must be at least 2, got {base_width}"
            )));
        }
        if num_classes < 2 {
            return Err(config_err(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        for (name, cout, cin, k) in layer_plan(base_width, num_classes) {
            let fan_in = cin * k * k;
            let std = (2.0 / fan_in as f64).sqrt();
            let n = cout * cin * k * k;
            let data: Vec<T> = (0..n).map(|_| lit::<T>(rng.normal() * std)).collect();
            params.push((
                format!("{name}.weight"),
                Tensor::new(vec![cout, cin, k, k], data)?,
            ));
            params.push((format!("{name}.bias"), Tensor::zeros(vec![cout])));
        }
        Ok(NetworkParams {
            base_width,
            num_classes,
            params,
        })
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn from_parts(
        base_width: usize,
        num_classes: usize,
        params: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let expected: Vec<(String, Vec<usize>)> = layer_plan(base_width, num_classes)
            .into_iter()
            .flat_map(|(name, cout, cin, k)| {
                [
                    (format!("{name}.weight"), vec![cout, cin, k, k]),
                    (format!("{name}.bias"), vec![cout]),
                ]
            })
            .collect();
        if params.len() != expected.len() {
            return Err(contract_err(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, t), (en, ed)) in params.iter().zip(&expected) {
            if name != en || t.dims() != ed.as_slice() {
                return Err(contract_err(format!(
                    "parameter {name} {:?} does not match expected {en} {ed:?}",
                    t.dims()
                )));
            }
        }
        Ok(NetworkParams {
            base_width,
            num_classes,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            base_width: self.base_width,
            num_classes: self.num_classes,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Puts every parameter on the tape, in order. Trainable parameters
    /// become gradient leaves; a teacher registered with
    /// `trainable = false` can never receive gradients.
    pub fn register(&self, tape: &Tape<T>, trainable: bool) -> Result<Vec<Value>> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Runs the network over images already on the tape. `handles` must
    /// come from [`register`](Self::register) on the same tape.
    pub fn forward(&self, tape: &Tape<T>, handles: &[Value], images: Value) -> Result<Value> {
        if handles.len() != self.params.len() {
            return Err(contract_err(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                handles.len()
            )));
        }
        let dims = tape.dims(images);
        if dims.len() != 4 || dims[1] != 1 {
            return Err(shape_err(format!(
                "network input must be [N,1,H,W], got {dims:?}"
            )));
        }
        if dims[2] % 4 != 0 || dims[3] % 4 != 0 {
            return Err(shape_err(format!(
                "input H and W must be divisible by 4 (two pooling stages), got {}x{}",
                dims[2], dims[3]
            )));
        }
        let mut cursor = 0usize;
        let mut conv_block = |tape: &Tape<T>, x: Value| -> Result<Value> {
            let mut h = x;
            for _ in 0..2 {
                let (w, b) = (handles[cursor], handles[cursor + 1]);
                cursor += 2;
                h = tape.relu(tape.conv2d(h, w, b, 1)?)?;
            }
            Ok(h)
        };
        let e1 = conv_block(tape, images)?;
        let p1 = tape.maxpool2(e1)?;
        let e2 = conv_block(tape, p1)?;
        let p2 = tape.maxpool2(e2)?;
        let mid = conv_block(tape, p2)?;
        let u2 = tape.upsample2(mid)?;
        let d2 = conv_block(tape, tape.concat(u2, e2)?)?;
        let u1 = tape.upsample2(d2)?;
        let d1 = conv_block(tape, tape.concat(u1, e1)?)?;
        let (hw, hb) = (handles[cursor], handles[cursor + 1]);
        tape.conv2d(d1, hw, hb, 0)
    }

    /// Gradient-free forward over a plain tensor (teacher inference,
    /// evaluation).
    pub fn forward_tensor(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let handles = self.register(&tape, false)?;
        let x = tape.constant(images.clone())?;
        let logits = self.forward(&tape, &handles, x)?;
        Ok(tape.value(logits))
    }

    /// Gradient-free class probabilities `[N, C, H, W]`.
    pub fn predict_probs(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let handles = self.register(&tape, false)?;
        let x = tape.constant(images.clone())?;
        let logits = self.forward(&tape, &handles, x)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs))
    }

    /// One SGD step. `grads` aligns with the parameter order; a missing
    /// gradient means only weight decay applies to that tensor.
    pub fn apply_sgd(
        &mut self,
        grads: &[Option<Tensor<T>>],
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(contract_err(format!(
                "expected {} gradients, got {}",
                self.params.len(),
                grads.len()
            )));
        }
        let lr = lit::<T>(cfg.learning_rate);
        let wd = lit::<T>(cfg.weight_decay);
        for ((name, p), g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                if g.dims() != p.dims() {
                    return Err(contract_err(format!(
                        "gradient for {name} has shape {:?}, parameter is {:?}",
                        g.dims(),
                        p.dims()
                    )));
                }
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv = *pv - lr * (gv + wd * *pv);
                }
            } else {
                for pv in p.data_mut().iter_mut() {
                    *pv = *pv - lr * wd * *pv;
                }
            }
        }
        Ok(())
    }

    /// Total scalar count across all parameter tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }
}
