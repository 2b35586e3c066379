//! A toy five-stage convolutional backbone exposing the two taps a neck
//! would consume: P3 at 1/8 resolution and P5 at 1/32. An attention block
//! can be inserted after either tap stage (or both); the block then feeds
//! both the tap and the next stage, so insertion never changes tap shapes.
//!
//! Each stage is a stride-1 same-padding 3x3 conv, relu, then 2x decimation,
//! which computes the same function as the classic stride-2 conv.

use crate::attention::{
    register_spci, spci_forward, spci_forward_on_tape, Modes, SpciDiagnostics, SpciParams,
    TapeSpci, TapeSpciOut, DEFAULT_DROPOUT, DEFAULT_REDUCTION,
};
use crate::error::{Error, Result};
use crate::init::{init_conv, init_spci, mix_seed};
use crate::layers::ConvLayer;
use crate::ops::{downsample2, relu};
use crate::ops::conv::conv2d;
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeConv, Var};
use crate::tensor::Tensor;
use crate::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STAGE_COUNT: usize = 5;
pub const DEFAULT_CHANNELS: [usize; STAGE_COUNT] = [8, 16, 32, 64, 128];
pub const DEFAULT_IN_CHANNELS: usize = 3;

/// Which tap stages get an attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpciAt {
    None,
    P3,
    P5,
    Both,
}

impl SpciAt {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(SpciAt::None),
            "p3" => Some(SpciAt::P3),
            "p5" => Some(SpciAt::P5),
            "p3p5" => Some(SpciAt::Both),
            _ => None,
        }
    }

    pub fn has_p3(self) -> bool {
        matches!(self, SpciAt::P3 | SpciAt::Both)
    }

    pub fn has_p5(self) -> bool {
        matches!(self, SpciAt::P5 | SpciAt::Both)
    }
}

impl std::fmt::Display for SpciAt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpciAt::None => "none",
            SpciAt::P3 => "p3",
            SpciAt::P5 => "p5",
            SpciAt::Both => "p3p5",
        })
    }
}

/// One stage of the chain: its tap name and output width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub name: &'static str,
    pub out_channels: usize,
}

pub const STAGE_NAMES: [&str; STAGE_COUNT] = ["P1", "P2", "P3", "P4", "P5"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub channels: [usize; STAGE_COUNT],
    pub spci_at: SpciAt,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: DEFAULT_IN_CHANNELS,
            input_h: 64,
            input_w: 64,
            channels: DEFAULT_CHANNELS,
            spci_at: SpciAt::Both,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h % 32 != 0 || self.input_w % 32 != 0 {
            return Err(Error::config(format!(
                "input size {}x{} must be a multiple of 32",
                self.input_h, self.input_w
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("stage channels must be positive"));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(format!(
                "stage channels must be non-decreasing with depth, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

pub struct Backbone<T> {
    cfg: BackboneConfig,
    stages: Vec<(StageSpec, ConvLayer<T>)>,
    spci_p3: Option<SpciParams<T>>,
    spci_p5: Option<SpciParams<T>>,
}

/// Seed salts for the per-block parameter streams.
const SALT_STAGE: u64 = 0x57A6E;
const SALT_SPCI_P3: u64 = 0x5BC1_0003;
const SALT_SPCI_P5: u64 = 0x5BC1_0005;
const SALT_DROPOUT_P3: u64 = 0xD0_0003;
const SALT_DROPOUT_P5: u64 = 0xD0_0005;

pub fn build_backbone<T: Scalar>(cfg: BackboneConfig) -> Result<Backbone<T>> {
    cfg.validate()?;
    let mut stages = Vec::with_capacity(STAGE_COUNT);
    let mut c_prev = cfg.in_channels;
    for (i, (&c_out, name)) in cfg.channels.iter().zip(STAGE_NAMES).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SALT_STAGE + i as u64));
        let conv = init_conv(c_out, c_prev, 3, &mut rng)?;
        stages.push((
            StageSpec {
                name,
                out_channels: c_out,
            },
            conv,
        ));
        c_prev = c_out;
    }
    let spci_p3 = if cfg.spci_at.has_p3() {
        let c = cfg.channels[2];
        Some(init_spci(
            c,
            c,
            DEFAULT_REDUCTION,
            DEFAULT_DROPOUT,
            mix_seed(cfg.seed, SALT_SPCI_P3),
        )?)
    } else {
        None
    };
    let spci_p5 = if cfg.spci_at.has_p5() {
        let c = cfg.channels[4];
        Some(init_spci(
            c,
            c,
            DEFAULT_REDUCTION,
            DEFAULT_DROPOUT,
            mix_seed(cfg.seed, SALT_SPCI_P5),
        )?)
    } else {
        None
    };
    Ok(Backbone {
        cfg,
        stages,
        spci_p3,
        spci_p5,
    })
}

/// The two tap tensors plus, where a block is inserted, its diagnostics.
pub struct Taps<T> {
    pub p3: Tensor<T>,
    pub p5: Tensor<T>,
    pub p3_diag: Option<SpciDiagnostics<T>>,
    pub p5_diag: Option<SpciDiagnostics<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[(StageSpec, ConvLayer<T>)] {
        &self.stages
    }

    pub fn spci_p3(&self) -> Option<&SpciParams<T>> {
        self.spci_p3.as_ref()
    }

    pub fn spci_p5(&self) -> Option<&SpciParams<T>> {
        self.spci_p5.as_ref()
    }

    pub fn spci_p3_mut(&mut self) -> Option<&mut SpciParams<T>> {
        self.spci_p3.as_mut()
    }

    pub fn spci_p5_mut(&mut self) -> Option<&mut SpciParams<T>> {
        self.spci_p5.as_mut()
    }

    /// Both insertion sites at once, P3 first.
    pub fn spci_sites_mut(&mut self) -> [Option<&mut SpciParams<T>>; 2] {
        [self.spci_p3.as_mut(), self.spci_p5.as_mut()]
    }

    /// Stored scalars: stage convs plus any inserted attention blocks.
    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|(_, conv)| conv.param_count())
            .sum::<usize>()
            + self.spci_p3.as_ref().map_or(0, |p| p.param_count())
            + self.spci_p5.as_ref().map_or(0, |p| p.param_count())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != self.cfg.in_channels || s.h != self.cfg.input_h || s.w != self.cfg.input_w {
            return Err(Error::shape(
                "backbone_forward",
                format!(
                    "[N,{},{},{}]",
                    self.cfg.in_channels, self.cfg.input_h, self.cfg.input_w
                ),
                s,
            ));
        }
        Ok(())
    }

    /// Eval-batchnorm forward. `seed` drives dropout when `dropout_mode` is
    /// train; each inserted block gets its own derived stream.
    pub fn forward_with_taps(
        &self,
        x: &Tensor<T>,
        dropout_mode: Mode,
        seed: u64,
    ) -> Result<Taps<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut p3 = None;
        let mut p3_diag = None;
        let mut p5_diag = None;
        for (i, (_, conv)) in self.stages.iter().enumerate() {
            cur = downsample2(&relu(&conv2d(&cur, conv)?))?;
            if i == 2 {
                if let Some(spci) = &self.spci_p3 {
                    let res = spci_forward(
                        &cur,
                        spci,
                        dropout_mode,
                        mix_seed(seed, SALT_DROPOUT_P3),
                    )?;
                    cur = res.out;
                    p3_diag = Some(res.diag);
                }
                p3 = Some(cur.clone());
            }
        }
        if let Some(spci) = &self.spci_p5 {
            let res = spci_forward(&cur, spci, dropout_mode, mix_seed(seed, SALT_DROPOUT_P5))?;
            cur = res.out;
            p5_diag = Some(res.diag);
        }
        Ok(Taps {
            p3: p3.expect("stage 3 always runs"),
            p5: cur,
            p3_diag,
            p5_diag,
        })
    }

    /// Forward with independent batchnorm / dropout switches; train-mode
    /// batchnorm updates running statistics inside the inserted blocks.
    pub fn forward_with_taps_train(
        &mut self,
        x: &Tensor<T>,
        modes: Modes,
        seed: u64,
    ) -> Result<Taps<T>> {
        if modes.bn == Mode::Eval {
            return self.forward_with_taps(x, modes.dropout, seed);
        }
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut p3 = None;
        let mut p3_diag = None;
        let mut p5_diag = None;
        for i in 0..self.stages.len() {
            cur = downsample2(&relu(&conv2d(&cur, &self.stages[i].1)?))?;
            if i == 2 {
                if let Some(spci) = &mut self.spci_p3 {
                    let res = crate::attention::spci_forward_train(
                        &cur,
                        spci,
                        modes,
                        mix_seed(seed, SALT_DROPOUT_P3),
                    )?;
                    cur = res.out;
                    p3_diag = Some(res.diag);
                }
                p3 = Some(cur.clone());
            }
        }
        if let Some(spci) = &mut self.spci_p5 {
            let res = crate::attention::spci_forward_train(
                &cur,
                spci,
                modes,
                mix_seed(seed, SALT_DROPOUT_P5),
            )?;
            cur = res.out;
            p5_diag = Some(res.diag);
        }
        Ok(Taps {
            p3: p3.expect("stage 3 always runs"),
            p5: cur,
            p3_diag,
            p5_diag,
        })
    }
}

/// Backbone parameters registered on a tape.
pub struct TapeBackbone<T> {
    pub stage_convs: Vec<TapeConv>,
    pub spci_p3: Option<TapeSpci<T>>,
    pub spci_p5: Option<TapeSpci<T>>,
}

/// Tap vars of a tape forward, plus the inserted blocks' outputs (which
/// carry train-mode batchnorm statistics).
pub struct TapeTaps<T> {
    pub p3: Var,
    pub p5: Var,
    pub p3_spci: Option<TapeSpciOut<T>>,
    pub p5_spci: Option<TapeSpciOut<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn register_on_tape(&self, tape: &mut Tape<T>) -> TapeBackbone<T> {
        TapeBackbone {
            stage_convs: self
                .stages
                .iter()
                .map(|(_, conv)| tape.register_conv(conv))
                .collect(),
            spci_p3: self.spci_p3.as_ref().map(|p| register_spci(tape, p)),
            spci_p5: self.spci_p5.as_ref().map(|p| register_spci(tape, p)),
        }
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        handles: &TapeBackbone<T>,
        modes: Modes,
        seed: u64,
    ) -> Result<TapeTaps<T>> {
        self.check_input(tape.value(x))?;
        let mut cur = x;
        let mut p3 = None;
        let mut p3_spci = None;
        let mut p5_spci = None;
        for (i, conv) in handles.stage_convs.iter().enumerate() {
            cur = tape.conv2d(cur, conv)?;
            cur = tape.relu(cur)?;
            cur = tape.downsample2(cur)?;
            if i == 2 {
                if let Some(spci) = &handles.spci_p3 {
                    let res = spci_forward_on_tape(
                        tape,
                        cur,
                        spci,
                        modes,
                        mix_seed(seed, SALT_DROPOUT_P3),
                    )?;
                    cur = res.out;
                    p3_spci = Some(res);
                }
                p3 = Some(cur);
            }
        }
        if let Some(spci) = &handles.spci_p5 {
            let res =
                spci_forward_on_tape(tape, cur, spci, modes, mix_seed(seed, SALT_DROPOUT_P5))?;
            cur = res.out;
            p5_spci = Some(res);
        }
        Ok(TapeTaps {
            p3: p3.expect("stage 3 always runs"),
            p5: cur,
            p3_spci,
            p5_spci,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_tensor;
    use crate::tensor::Shape;

    #[test]
    fn downsampling_arithmetic_64_input() {
        let cfg = BackboneConfig::default();
        let bb: Backbone<f32> = build_backbone(cfg).unwrap();
        let x = seeded_tensor(Shape::new(1, 3, 64, 64), -1.0, 1.0, 5);
        let taps = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        assert_eq!(taps.p3.shape(), Shape::new(1, 32, 8, 8));
        assert_eq!(taps.p5.shape(), Shape::new(1, 128, 2, 2));
    }

    #[test]
    fn indivisible_input_size_rejected() {
        let cfg = BackboneConfig {
            input_h: 60,
            ..Default::default()
        };
        assert!(build_backbone::<f32>(cfg).is_err());
    }

    #[test]
    fn decreasing_channels_rejected() {
        let cfg = BackboneConfig {
            channels: [8, 16, 12, 64, 128],
            ..Default::default()
        };
        assert!(build_backbone::<f32>(cfg).is_err());
    }

    #[test]
    fn insertion_is_shape_transparent() {
        let base: Backbone<f32> = build_backbone(BackboneConfig {
            spci_at: SpciAt::None,
            ..Default::default()
        })
        .unwrap();
        let x = seeded_tensor(Shape::new(2, 3, 64, 64), -1.0, 1.0, 6);
        let base_taps = base.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        for spci_at in [SpciAt::P3, SpciAt::P5, SpciAt::Both] {
            let bb: Backbone<f32> = build_backbone(BackboneConfig {
                spci_at,
                ..Default::default()
            })
            .unwrap();
            let taps = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
            assert_eq!(taps.p3.shape(), base_taps.p3.shape(), "{spci_at}");
            assert_eq!(taps.p5.shape(), base_taps.p5.shape(), "{spci_at}");
        }
    }

    #[test]
    fn empty_insertion_matches_baseline_values() {
        let bb: Backbone<f32> = build_backbone(BackboneConfig {
            spci_at: SpciAt::None,
            ..Default::default()
        })
        .unwrap();
        assert!(bb.spci_p3().is_none() && bb.spci_p5().is_none());
        let x = seeded_tensor(Shape::new(1, 3, 64, 64), -1.0, 1.0, 7);
        let a = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        assert!(a.p3_diag.is_none() && a.p5_diag.is_none());
        let b = bb.forward_with_taps(&x, Mode::Eval, 123).unwrap();
        // No dropout in eval mode, so the seed is inert.
        assert_eq!(a.p3, b.p3);
        assert_eq!(a.p5, b.p5);
    }

    #[test]
    fn zero_input_gives_zero_taps() {
        // Stage convs and attention biases are all zero-initialized biases;
        // with a zero input every pre-activation stays zero and the gates
        // multiply zeros.
        let bb: Backbone<f32> = build_backbone(BackboneConfig::default()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 64));
        let taps = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        assert!(taps.p3.data().iter().all(|&v| v == 0.0));
        assert!(taps.p5.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let bb: Backbone<f32> = build_backbone(BackboneConfig::default()).unwrap();
        let x = seeded_tensor(Shape::new(1, 3, 64, 64), -2.0, 2.0, 8);
        let a = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        let b = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        assert_eq!(a.p3, b.p3);
        assert_eq!(a.p5, b.p5);
        assert!(a.p3.all_finite() && a.p5.all_finite());
    }

    #[test]
    fn param_count_difference_is_exactly_two_blocks() {
        let none: Backbone<f32> = build_backbone(BackboneConfig {
            spci_at: SpciAt::None,
            ..Default::default()
        })
        .unwrap();
        let both: Backbone<f32> = build_backbone(BackboneConfig::default()).unwrap();
        let diff = both.param_count() - none.param_count();
        let expected = both.spci_p3().unwrap().param_count()
            + both.spci_p5().unwrap().param_count();
        assert_eq!(diff, expected);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let bb: Backbone<f32> = build_backbone(BackboneConfig::default()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 32, 64));
        assert!(bb.forward_with_taps(&x, Mode::Eval, 0).is_err());
        let x = Tensor::zeros(Shape::new(1, 4, 64, 64));
        assert!(bb.forward_with_taps(&x, Mode::Eval, 0).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let bb: Backbone<f64> = build_backbone(BackboneConfig::default()).unwrap();
        let x = seeded_tensor(Shape::new(1, 3, 64, 64), -1.0, 1.0, 9);
        let plain = bb.forward_with_taps(&x, Mode::Eval, 0).unwrap();
        let mut tape = Tape::new();
        let handles = bb.register_on_tape(&mut tape);
        let xv = tape.input(x);
        let taps = bb
            .forward_on_tape(&mut tape, xv, &handles, Modes::eval(), 0)
            .unwrap();
        assert_eq!(tape.value(taps.p3), &plain.p3);
        assert_eq!(tape.value(taps.p5), &plain.p5);
    }

    #[test]
    fn loss_on_tap_reaches_stage_one_parameters() {
        for spci_at in [SpciAt::None, SpciAt::Both] {
            let bb: Backbone<f64> = build_backbone(BackboneConfig {
                spci_at,
                ..Default::default()
            })
            .unwrap();
            let x = seeded_tensor(Shape::new(1, 3, 64, 64), -1.0, 1.0, 10);
            let mut tape = Tape::new();
            let handles = bb.register_on_tape(&mut tape);
            let xv = tape.input(x);
            let taps = bb
                .forward_on_tape(&mut tape, xv, &handles, Modes::eval(), 0)
                .unwrap();
            let loss = tape.sum(taps.p5).unwrap();
            let grads = tape
                .backward(loss, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0))
                .unwrap();
            let g = grads
                .wrt(handles.stage_convs[0].weight)
                .expect("stage 1 weight gradient present");
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "stage 1 gradient all zero with spci_at {spci_at}"
            );
        }
    }
}
