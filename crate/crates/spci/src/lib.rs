//! A small NCHW tensor engine with reverse-mode differentiation, plus the
//! selective-perspective-class integration (SPCI) attention block built on
//! top of it: a channel gate (SSG), a spatial gate (PFM), a full-tensor
//! gate (CDM), and their fused composition, inserted into a toy multi-stage
//! backbone at the P3/P5 taps.
//!
//! Everything runs in either `f32` (production) or `f64` (verification);
//! the `verify` module holds the independent oracles the test suite uses.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod init;
pub mod io;
pub mod layers;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use attention::{spci_forward, spci_forward_train, Modes, SpciParams};
pub use backbone::{build_backbone, Backbone, BackboneConfig, SpciAt};
pub use error::{Error, Result};
pub use init::init_spci;
pub use io::{load_spci, parse_backbone_config, read_backbone_config, read_spct, save_spci, write_spct};
pub use scalar::{Precision, Scalar};
pub use tensor::{Shape, Tensor};

/// Whether an op behaves as during training or during inference. Only
/// batchnorm (statistics source) and dropout (masking) consult this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "train" => Some(Mode::Train),
            "eval" => Some(Mode::Eval),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        })
    }
}
