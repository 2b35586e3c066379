//! On-disk formats: SPCT tensor files, attention weight manifests, and the
//! plain-text backbone config.

pub mod config;
pub mod manifest;
pub mod spct;

pub use config::{parse_backbone_config, read_backbone_config};
pub use manifest::{load_spci, save_spci};
pub use spct::{read_spct, write_spct, SPCT_MAGIC};
