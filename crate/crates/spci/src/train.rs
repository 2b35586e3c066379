//! A deliberately small end-to-end training demonstration: two conv stages,
//! the attention block, global average pooling, and a linear head classify
//! four synthetic 16x16 patterns under plain SGD. The point is not accuracy
//! but that gradients flow through every piece and the loss drops.

use crate::attention::{register_spci, spci_forward_on_tape, Modes, SpciParams};
use crate::error::{Error, Result};
use crate::init::{init_conv, init_spci, mix_seed};
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::ops::{PoolAxis, PoolMode};
use crate::tape::{Gradients, Tape, TapeBn, TapeConv};
use crate::tensor::{Shape, Tensor};
use crate::Mode;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

pub const TOY_CLASSES: usize = 4;
pub const TOY_BATCH: usize = 8;
pub const TOY_SIDE: usize = 16;
pub const TOY_DEFAULT_STEPS: usize = 200;
pub const TOY_DEFAULT_LR: f64 = 0.05;

/// Two downsampling stages, the attention block at the deepest width,
/// then a 1x1 classification head over the pooled descriptor.
pub struct ToyModel {
    pub conv1: ConvLayer<f32>,
    pub conv2: ConvLayer<f32>,
    pub spci: SpciParams<f32>,
    pub head: ConvLayer<f32>,
}

impl ToyModel {
    pub fn new(seed: u64) -> Result<Self> {
        let mut r1 = ChaCha8Rng::seed_from_u64(mix_seed(seed, 21));
        let mut r2 = ChaCha8Rng::seed_from_u64(mix_seed(seed, 22));
        let mut r3 = ChaCha8Rng::seed_from_u64(mix_seed(seed, 23));
        Ok(ToyModel {
            conv1: init_conv(8, 1, 3, &mut r1)?,
            conv2: init_conv(16, 8, 3, &mut r2)?,
            spci: init_spci(16, 16, 16, 0.1, mix_seed(seed, 24))?,
            head: init_conv(TOY_CLASSES, 16, 1, &mut r3)?,
        })
    }
}

/// One bright quadrant per class over a dim noise floor; class k lights
/// quadrant k in row-major quadrant order. Linearly separable by
/// construction and fixed for the whole run.
pub fn make_toy_batch(seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 31));
    let half = TOY_SIDE / 2;
    let labels: Vec<usize> = (0..TOY_BATCH).map(|i| i % TOY_CLASSES).collect();
    let mut x = Tensor::zeros(Shape::new(TOY_BATCH, 1, TOY_SIDE, TOY_SIDE));
    for (n, &label) in labels.iter().enumerate() {
        let (qy, qx) = (label / 2, label % 2);
        for y in 0..TOY_SIDE {
            for xx in 0..TOY_SIDE {
                let noise = 0.25 * rng.random::<f64>() as f32;
                let bright = (y / half, xx / half) == (qy, qx);
                *x.at_mut(n, 0, y, xx) = noise + if bright { 0.75 } else { 0.0 };
            }
        }
    }
    (x, labels)
}

pub struct TrainResult {
    pub losses: Vec<f32>,
    pub diverged: bool,
}

impl TrainResult {
    pub fn initial(&self) -> f32 {
        self.losses[0]
    }

    pub fn last(&self) -> f32 {
        *self.losses.last().expect("at least the initial loss")
    }

    /// Per-step lines `step loss`, loss in scientific notation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (step, loss) in self.losses.iter().enumerate() {
            writeln!(s, "{step} {loss:.9e}").unwrap();
        }
        s
    }
}

struct ToyHandles<T> {
    conv1: TapeConv,
    conv2: TapeConv,
    spci: crate::attention::TapeSpci<T>,
    head: TapeConv,
}

fn apply_conv_update(conv: &mut ConvLayer<f32>, handle: &TapeConv, grads: &Gradients<f32>, lr: f32) {
    let wshape = conv.weight().shape();
    let gw = grads.wrt_or_zeros(handle.weight, wshape);
    for (w, g) in conv.weight_mut().data_mut().iter_mut().zip(gw.data()) {
        *w -= lr * g;
    }
    let c = conv.bias().len();
    let gb = grads.wrt_or_zeros(handle.bias, Shape::new(1, c, 1, 1));
    for (b, g) in conv.bias_mut().iter_mut().zip(gb.data()) {
        *b -= lr * g;
    }
}

fn apply_bn_param_update(
    bn: &mut BatchNormLayer<f32>,
    handle: &TapeBn<f32>,
    grads: &Gradients<f32>,
    lr: f32,
) {
    let c = bn.channels();
    let gg = grads.wrt_or_zeros(handle.gamma, Shape::new(1, c, 1, 1));
    for (v, g) in bn.gamma.iter_mut().zip(gg.data()) {
        *v -= lr * g;
    }
    let gb = grads.wrt_or_zeros(handle.beta, Shape::new(1, c, 1, 1));
    for (v, g) in bn.beta.iter_mut().zip(gb.data()) {
        *v -= lr * g;
    }
}

/// Runs `steps` SGD updates on the fixed batch and records `steps + 1`
/// losses, the first before any update. Batchnorm runs in train mode
/// (running statistics updated each forward); dropout stays in eval mode
/// so the objective is deterministic and lr = 0 leaves the trajectory
/// flat. Stops early when the loss exceeds 10x its initial value.
pub fn train_toy(seed: u64, steps: usize, lr: f64) -> Result<TrainResult> {
    if !(0.0..=10.0).contains(&lr) {
        return Err(Error::config(format!("learning rate {lr} out of range")));
    }
    let mut model = ToyModel::new(seed)?;
    let (batch, labels) = make_toy_batch(seed);
    let modes = Modes {
        bn: Mode::Train,
        dropout: Mode::Eval,
    };
    let lr = lr as f32;
    let mut losses = Vec::with_capacity(steps + 1);
    let mut diverged = false;
    for step in 0..=steps {
        let mut tape: Tape<f32> = Tape::new();
        let handles = ToyHandles {
            conv1: tape.register_conv(&model.conv1),
            conv2: tape.register_conv(&model.conv2),
            spci: register_spci(&mut tape, &model.spci),
            head: tape.register_conv(&model.head),
        };
        let mut cur = tape.input(batch.clone());
        cur = tape.conv2d(cur, &handles.conv1)?;
        cur = tape.relu(cur)?;
        cur = tape.downsample2(cur)?;
        cur = tape.conv2d(cur, &handles.conv2)?;
        cur = tape.relu(cur)?;
        cur = tape.downsample2(cur)?;
        let spci_out = spci_forward_on_tape(&mut tape, cur, &handles.spci, modes, 0)?;
        let pooled = tape.pool(spci_out.out, PoolMode::Avg, PoolAxis::Spatial)?;
        let logits = tape.conv2d(pooled, &handles.head)?;
        let loss_var = tape.softmax_xent(logits, &labels)?;
        let loss = tape.value(loss_var).data()[0];
        losses.push(loss);
        if !loss.is_finite() || loss > 10.0 * losses[0] {
            diverged = true;
            break;
        }
        if step == steps {
            break;
        }
        let grads = tape.backward(loss_var, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0))?;
        apply_conv_update(&mut model.conv1, &handles.conv1, &grads, lr);
        apply_conv_update(&mut model.conv2, &handles.conv2, &grads, lr);
        apply_conv_update(&mut model.spci.ssg.conv1, &handles.spci.ssg_conv1, &grads, lr);
        apply_conv_update(&mut model.spci.ssg.conv2, &handles.spci.ssg_conv2, &grads, lr);
        apply_conv_update(&mut model.spci.transform, &handles.spci.transform, &grads, lr);
        apply_conv_update(&mut model.spci.pfm.conv7, &handles.spci.pfm_conv7, &grads, lr);
        apply_conv_update(&mut model.spci.cdm.conv1, &handles.spci.cdm_conv1, &grads, lr);
        apply_bn_param_update(&mut model.spci.cdm.bn1, &handles.spci.cdm_bn1, &grads, lr);
        apply_conv_update(&mut model.spci.cdm.conv2, &handles.spci.cdm_conv2, &grads, lr);
        apply_bn_param_update(&mut model.spci.cdm.bn2, &handles.spci.cdm_bn2, &grads, lr);
        apply_conv_update(&mut model.spci.cdm.conv3, &handles.spci.cdm_conv3, &grads, lr);
        if let Some(stats) = &spci_out.bn1_stats {
            model.spci.cdm.bn1.apply_batch_update(stats);
        }
        if let Some(stats) = &spci_out.bn2_stats {
            model.spci.cdm.bn2.apply_batch_update(stats);
        }
    }
    Ok(TrainResult { losses, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let result = train_toy(3, 10, 0.0).unwrap();
        assert_eq!(result.losses.len(), 11);
        assert!(!result.diverged);
        let first = result.losses[0];
        assert!(result.losses.iter().all(|&l| l == first), "{:?}", result.losses);
    }

    #[test]
    fn trajectory_is_deterministic() {
        let a = train_toy(7, 25, TOY_DEFAULT_LR).unwrap();
        let b = train_toy(7, 25, TOY_DEFAULT_LR).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn default_run_halves_the_loss() {
        let result = train_toy(0, TOY_DEFAULT_STEPS, TOY_DEFAULT_LR).unwrap();
        assert!(!result.diverged);
        assert_eq!(result.losses.len(), TOY_DEFAULT_STEPS + 1);
        assert!(
            result.last() <= 0.5 * result.initial(),
            "initial {} final {}",
            result.initial(),
            result.last()
        );
    }

    #[test]
    fn batch_is_class_balanced_and_bounded() {
        let (x, labels) = make_toy_batch(5);
        assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(x.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        // The bright quadrant dominates: sample 0 is class 0 (top-left).
        let quadrant_mean = |n: usize, qy: usize, qx: usize| {
            let mut sum = 0.0;
            for y in 0..8 {
                for xx in 0..8 {
                    sum += x.at(n, 0, qy * 8 + y, qx * 8 + xx);
                }
            }
            sum / 64.0
        };
        assert!(quadrant_mean(0, 0, 0) > quadrant_mean(0, 0, 1) + 0.5);
        assert!(quadrant_mean(3, 1, 1) > quadrant_mean(3, 0, 0) + 0.5);
    }

    #[test]
    fn bad_learning_rate_is_config_error() {
        assert!(train_toy(0, 1, -0.5).is_err());
        assert!(train_toy(0, 1, 11.0).is_err());
    }
}
