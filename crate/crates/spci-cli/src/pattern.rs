//! Synthetic inputs for runs without a tensor file.

use spci::init::{mix_seed, seeded_tensor};
use spci::{Error, Result, Shape, Tensor};

pub const PATTERN_NAMES: [&str; 4] = ["zeros", "ones", "checkerboard", "noise"];

/// `zeros` and `ones` are constant; `checkerboard` tiles 8x8 blocks of 0
/// and 1 (all channels alike); `noise` is uniform [0,1) from the seed.
pub fn synthetic_input(name: &str, c: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f32>> {
    let shape = Shape::new(1, c, h, w);
    match name {
        "zeros" => Ok(Tensor::zeros(shape)),
        "ones" => Ok(Tensor::full(shape, 1.0)),
        "checkerboard" => Ok(Tensor::from_fn(shape, |_, _, y, x| {
            ((y / 8 + x / 8) % 2) as f32
        })),
        "noise" => Ok(seeded_tensor(shape, 0.0, 1.0, mix_seed(seed, 0xF00D))),
        _ => Err(Error::config(format!(
            "unknown input {name:?}: expected a .spct path or one of {PATTERN_NAMES:?}"
        ))),
    }
}

pub fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bail = || Error::config(format!("size {text:?} must be HxW, e.g. 64x64"));
    let (h, w) = text.split_once('x').ok_or_else(bail)?;
    let h = h.parse().map_err(|_| bail())?;
    let w = w.parse().map_err(|_| bail())?;
    if h == 0 || w == 0 {
        return Err(bail());
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_tiles_are_8_wide() {
        let t = synthetic_input("checkerboard", 1, 32, 32, 0).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 0, 8), 1.0);
        assert_eq!(t.at(0, 0, 8, 0), 1.0);
        assert_eq!(t.at(0, 0, 8, 8), 0.0);
        assert_eq!(t.at(0, 0, 7, 7), 0.0);
    }

    #[test]
    fn noise_is_seed_deterministic_and_bounded() {
        let a = synthetic_input("noise", 2, 16, 16, 9).unwrap();
        let b = synthetic_input("noise", 2, 16, 16, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_input("noise", 2, 16, 16, 10).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn size_parser_accepts_hxw_only() {
        assert_eq!(parse_size("96x64").unwrap(), (96, 64));
        assert!(parse_size("96").is_err());
        assert!(parse_size("0x64").is_err());
        assert!(parse_size("ax b").is_err());
    }
}
