//! Plain-text backbone config. One `key value` pair per line, keys named
//! exactly after the struct fields: `in_channels`, `input_h`, `input_w`,
//! `channels` (five comma-separated widths), `spci_at`, `seed`. Blank
//! lines and `#` comments are skipped; unknown or repeated keys are errors.
//! Every key is optional and falls back to the default config.

use crate::backbone::{BackboneConfig, SpciAt, STAGE_COUNT};
use crate::error::{Error, Result};
use std::collections::HashSet;
use std::path::Path;

pub fn parse_backbone_config(text: &str) -> Result<BackboneConfig> {
    let mut cfg = BackboneConfig::default();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let context = |detail: String| Error::config(format!("line {}: {detail}", lineno + 1));
        let (key, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| context(format!("expected `key value`, got {line:?}")))?;
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(context(format!("repeated key {key:?}")));
        }
        let usize_value = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| context(format!("{key}: {value:?} is not a positive integer")))
        };
        match key {
            "in_channels" => cfg.in_channels = usize_value()?,
            "input_h" => cfg.input_h = usize_value()?,
            "input_w" => cfg.input_w = usize_value()?,
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| context(format!("seed: {value:?} is not an integer")))?
            }
            "spci_at" => {
                cfg.spci_at = SpciAt::parse(value).ok_or_else(|| {
                    context(format!(
                        "spci_at: {value:?} is not one of none, p3, p5, p3p5"
                    ))
                })?
            }
            "channels" => {
                let widths: Vec<usize> = value
                    .split(',')
                    .map(|part| part.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| context(format!("channels: {value:?}")))?;
                if widths.len() != STAGE_COUNT {
                    return Err(context(format!(
                        "channels: need {STAGE_COUNT} widths, got {}",
                        widths.len()
                    )));
                }
                cfg.channels.copy_from_slice(&widths);
            }
            _ => return Err(context(format!("unknown key {key:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_backbone_config(path: &Path) -> Result<BackboneConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path.display(), e))?;
    parse_backbone_config(&text)
}
