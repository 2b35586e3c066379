//! Seeded parameter initialization. All draws happen in f64 through a
//! counter-less ChaCha stream and are then converted, so an f32 model and
//! its f64 verification lift see the same underlying values.

use crate::attention::{cdm_mid_channels, ssg_mid_channels, CdmParams, PfmParams, SpciParams, SsgParams};
use crate::error::Result;
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Splitmix64 step; derives independent stream seeds from one master seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Uniform in [lo, hi), drawn in f64 then converted.
pub fn random_tensor<T: Scalar>(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..shape.numel() {
        let u: f64 = rng.random();
        data.push(T::from_f64(lo + u * (hi - lo)));
    }
    Tensor::from_vec(shape, data).expect("length matches by construction")
}

/// Seeded convenience wrapper around [`random_tensor`].
pub fn seeded_tensor<T: Scalar>(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(shape, lo, hi, &mut rng)
}

/// Zero-mean uniform with bound sqrt(6 / fan_in), fan_in = C_in * k * k;
/// biases start at zero.
pub fn init_conv<T: Scalar>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvLayer<T>> {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let weight = random_tensor(Shape::new(c_out, c_in, k, k), -bound, bound, rng);
    ConvLayer::new(weight, vec![T::zero(); c_out])
}

/// Fresh SPCI parameters. Weight tensors are drawn in a fixed order (SSG
/// conv1, SSG conv2, transform, PFM conv7, CDM conv1, conv2, conv3) so a
/// seed pins the whole parameter set bit-exactly.
pub fn init_spci<T: Scalar>(
    c_in: usize,
    c_out: usize,
    r: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<SpciParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_mid_ssg = ssg_mid_channels(c_in, r);
    let c_mid_cdm = cdm_mid_channels(c_out);

    let ssg = SsgParams {
        conv1: init_conv(c_mid_ssg, c_in, 1, &mut rng)?,
        conv2: init_conv(c_in, c_mid_ssg, 1, &mut rng)?,
        reduction: r,
    };
    let transform = init_conv(c_out, c_in, 1, &mut rng)?;
    let pfm = PfmParams {
        conv7: init_conv(1, 2, 7, &mut rng)?,
    };
    let cdm = CdmParams {
        conv1: init_conv(c_mid_cdm, c_out, 1, &mut rng)?,
        bn1: BatchNormLayer::new(c_mid_cdm),
        conv2: init_conv(c_mid_cdm, c_mid_cdm, 3, &mut rng)?,
        bn2: BatchNormLayer::new(c_mid_cdm),
        conv3: init_conv(c_out, c_mid_cdm, 1, &mut rng)?,
    };

    SpciParams::new(ssg, transform, pfm, cdm, dropout_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_spreads_salts() {
        let a = mix_seed(42, 1);
        let b = mix_seed(42, 2);
        let c = mix_seed(43, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix_seed(42, 1));
    }

    #[test]
    fn equal_seeds_give_bit_identical_params() {
        let a: SpciParams<f32> = init_spci(8, 8, 16, 0.1, 77).unwrap();
        let b: SpciParams<f32> = init_spci(8, 8, 16, 0.1, 77).unwrap();
        assert_eq!(a.ssg.conv1.weight(), b.ssg.conv1.weight());
        assert_eq!(a.transform.weight(), b.transform.weight());
        assert_eq!(a.cdm.conv2.weight(), b.cdm.conv2.weight());
        let c: SpciParams<f32> = init_spci(8, 8, 16, 0.1, 78).unwrap();
        assert_ne!(a.transform.weight(), c.transform.weight());
    }

    #[test]
    fn conv_draws_stay_within_fan_in_bound_and_center_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer: ConvLayer<f64> = init_conv(8, 8, 3, &mut rng).unwrap();
        let bound = (6.0f64 / (8.0 * 9.0)).sqrt();
        for &v in layer.weight().data() {
            assert!(v.abs() <= bound);
        }
        // Mean of n uniform draws on [-b, b]: sd = b/sqrt(3n); allow 3 sd.
        let n = layer.weight().numel() as f64;
        let mean = layer.weight().mean();
        assert!(mean.abs() <= 3.0 * bound / (3.0 * n).sqrt(), "mean {mean}");
        assert!(layer.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn ssg_floor_clamp_engages_at_small_widths() {
        assert_eq!(ssg_mid_channels(8, 16), 8);
        assert_eq!(ssg_mid_channels(256, 16), 16);
        assert_eq!(cdm_mid_channels(8), 8);
        assert_eq!(cdm_mid_channels(64), 32);
    }
}
