//! Randomized property checks over the tensor ops and the attention block:
//! shape laws, linearity, permutation invariance and equivariance, the open
//! unit interval of the gate weights, and the attenuation bound.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spci::attention::{cdm_forward, pfm_forward, spci_forward, ssg_forward};
use spci::init::{init_conv, init_spci, random_tensor};
use spci::ops::{conv2d, pool, PoolAxis, PoolMode};
use spci::{Mode, Shape, Tensor};

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1..=2usize, 1..=6usize, 1..=9usize, 1..=9usize)
}

fn permute_spatial(f: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = f.shape();
    Tensor::from_fn(s, |n, c, y, x| {
        let p = perm[y * s.w + x];
        f.at(n, c, p / s.w, p % s.w)
    })
}

fn permute_channels(f: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(f.shape(), |n, c, y, x| f.at(n, perm[c], y, x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_same_padding_preserves_spatial_extent(
        (n, c_in, h, w) in dims(),
        c_out in 1..=6usize,
        k_pick in 0..3usize,
        seed in any::<u64>(),
    ) {
        let k = [1usize, 3, 7][k_pick];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = init_conv::<f64>(c_out, c_in, k, &mut rng).unwrap();
        let x = random_tensor::<f64>(Shape::new(n, c_in, h, w), -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &layer).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, c_out, h, w));
    }

    #[test]
    fn conv_is_linear_when_bias_is_zero(
        (n, c_in, h, w) in dims(),
        c_out in 1..=6usize,
        k_pick in 0..3usize,
        seed in any::<u64>(),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let k = [1usize, 3, 7][k_pick];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = init_conv::<f64>(c_out, c_in, k, &mut rng).unwrap();
        layer.bias_mut().fill(0.0);
        let x = random_tensor::<f64>(Shape::new(n, c_in, h, w), -1.0, 1.0, &mut rng);
        let y = random_tensor::<f64>(Shape::new(n, c_in, h, w), -1.0, 1.0, &mut rng);
        let mixed = Tensor::from_fn(x.shape(), |ni, c, yy, xx| {
            a * x.at(ni, c, yy, xx) + b * y.at(ni, c, yy, xx)
        });
        let lhs = conv2d(&mixed, &layer).unwrap();
        let cx = conv2d(&x, &layer).unwrap();
        let cy = conv2d(&y, &layer).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |ni, c, yy, xx| {
            a * cx.at(ni, c, yy, xx) + b * cy.at(ni, c, yy, xx)
        });
        prop_assert!(lhs.max_rel_diff(&rhs) < 1e-5);
    }

    #[test]
    fn spatial_pool_ignores_pixel_order(
        (n, c, h, w) in dims(),
        seed in any::<u64>(),
        perm_seed in any::<u32>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_tensor::<f64>(Shape::new(n, c, h, w), -1.0, 1.0, &mut rng);
        // A seeded shuffle keeps the permutation independent of proptest's
        // shrinking of the tensor dims.
        let mut perm: Vec<usize> = (0..h * w).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed as u64);
        for i in (1..perm.len()).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let g = permute_spatial(&f, &perm);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let a = pool(&f, mode, PoolAxis::Spatial);
            let b = pool(&g, mode, PoolAxis::Spatial);
            prop_assert!(a.max_rel_diff(&b) <= 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn channel_pool_ignores_channel_order(
        (n, c, h, w) in dims(),
        seed in any::<u64>(),
        perm_seed in any::<u32>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_tensor::<f64>(Shape::new(n, c, h, w), -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..c).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed as u64);
        for i in (1..perm.len()).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let g = permute_channels(&f, &perm);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let a = pool(&f, mode, PoolAxis::Channel);
            let b = pool(&g, mode, PoolAxis::Channel);
            prop_assert!(a.max_rel_diff(&b) <= 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn attention_weights_fill_the_open_unit_interval(
        c in 2..=10usize,
        (n, h, w) in (1..=2usize, 3..=8usize, 3..=8usize),
        seed in any::<u64>(),
        scale_pick in 0..3usize,
    ) {
        let scale = [1.0, 64.0, 1e3][scale_pick];
        let params = init_spci::<f32>(c, c, 16, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
        let x = random_tensor::<f32>(Shape::new(n, c, h, w), -scale, scale, &mut rng);
        let out = spci_forward(&x, &params, Mode::Eval, 0).unwrap();
        for map in [&out.diag.w_s, &out.diag.w_p, &out.diag.w_c] {
            for &v in map.as_ref().unwrap().data() {
                prop_assert!(v > 0.0 && v < 1.0, "{v} escaped (0,1)");
            }
        }
    }

    #[test]
    fn gates_never_amplify(
        c in 2..=10usize,
        (n, h, w) in (1..=2usize, 3..=8usize, 3..=8usize),
        seed in any::<u64>(),
    ) {
        let mut params = init_spci::<f64>(c, c, 16, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77E);
        for b in params.cdm.conv3.bias_mut() {
            *b = rng.random_range(-2.0..2.0);
        }
        let f = random_tensor::<f64>(Shape::new(n, c, h, w), -5.0, 5.0, &mut rng);
        let gated = [
            ssg_forward(&f, &params.ssg).unwrap().out,
            pfm_forward(&f, &params.pfm).unwrap().out,
            cdm_forward(&f, &params.cdm).unwrap().out,
        ];
        for out in &gated {
            for (&o, &i) in out.data().iter().zip(f.data()) {
                prop_assert!(o.abs() <= i.abs(), "gate amplified {i} to {o}");
            }
        }
    }

    #[test]
    fn block_output_shape_follows_the_transform(
        c_in in 2..=9usize,
        c_out in 2..=9usize,
        (n, h, w) in (1..=3usize, 2..=9usize, 2..=9usize),
        seed in any::<u64>(),
    ) {
        let params = init_spci::<f64>(c_in, c_out, 16, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5447);
        let x = random_tensor::<f64>(Shape::new(n, c_in, h, w), -1.0, 1.0, &mut rng);
        let out = spci_forward(&x, &params, Mode::Eval, 0).unwrap();
        prop_assert_eq!(out.out.shape(), Shape::new(n, c_out, h, w));
        prop_assert_eq!(out.diag.w_s.unwrap().shape(), Shape::new(n, c_in, 1, 1));
        prop_assert_eq!(out.diag.w_p.unwrap().shape(), Shape::new(n, 1, h, w));
        prop_assert_eq!(out.diag.w_c.unwrap().shape(), Shape::new(n, c_out, h, w));
    }

    #[test]
    fn channel_gate_is_spatially_equivariant(
        (n, c, h, w) in (1..=2usize, 2..=8usize, 2..=7usize, 2..=7usize),
        seed in any::<u64>(),
        perm_seed in any::<u32>(),
    ) {
        let params = init_spci::<f64>(c, c, 16, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE0_01);
        let f = random_tensor::<f64>(Shape::new(n, c, h, w), -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed as u64);
        for i in (1..perm.len()).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let base = ssg_forward(&f, &params.ssg).unwrap();
        let moved = ssg_forward(&permute_spatial(&f, &perm), &params.ssg).unwrap();
        prop_assert!(base.weights.max_rel_diff(&moved.weights) <= 1e-12);
        prop_assert!(permute_spatial(&base.out, &perm).max_rel_diff(&moved.out) <= 1e-12);
    }

    #[test]
    fn spatial_gate_is_channel_equivariant(
        (n, c, h, w) in (1..=2usize, 2..=8usize, 2..=7usize, 2..=7usize),
        seed in any::<u64>(),
        perm_seed in any::<u32>(),
    ) {
        let params = init_spci::<f64>(c, c, 16, 0.1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE0_02);
        let f = random_tensor::<f64>(Shape::new(n, c, h, w), -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..c).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed as u64);
        for i in (1..perm.len()).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let base = pfm_forward(&f, &params.pfm).unwrap();
        let moved = pfm_forward(&permute_channels(&f, &perm), &params.pfm).unwrap();
        prop_assert!(base.weights.max_rel_diff(&moved.weights) <= 1e-12);
        prop_assert!(permute_channels(&base.out, &perm).max_rel_diff(&moved.out) <= 1e-12);
    }
}
