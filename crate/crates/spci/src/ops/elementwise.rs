//! Pointwise and structural ops: activations, channel concat, broadcast
//! multiply, three-way add, inverted dropout, and 2x decimation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// relu'(0) = 0: only strictly positive inputs pass gradient.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// Logistic sigmoid with its codomain kept strictly open: in finite
/// precision 1/(1+e^-t) rounds to exactly 0 or 1 once |t| is large, so the
/// result is clamped to the nearest representable values inside (0,1).
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    x.map(|v| (T::one() / (T::one() + (-v).exp())).max(lo).min(hi))
}

/// Uses the saved output: d sigmoid = y (1 - y).
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * v * (T::one() - v);
    }
    dx
}

/// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W], a's channels first.
pub fn concat_channel<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape("concat_channel", sa, sb));
    }
    let mut out = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
    let (ahw, bhw) = (sa.c * sa.h * sa.w, sb.c * sb.h * sb.w);
    let stride = ahw + bhw;
    for n in 0..sa.n {
        out.data_mut()[n * stride..n * stride + ahw]
            .copy_from_slice(&a.data()[n * ahw..(n + 1) * ahw]);
        out.data_mut()[n * stride + ahw..(n + 1) * stride]
            .copy_from_slice(&b.data()[n * bhw..(n + 1) * bhw]);
    }
    Ok(out)
}

/// Inverse of [`concat_channel`] on the gradient side.
pub fn concat_channel_backward<T: Scalar>(
    sa: Shape,
    sb: Shape,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut da = Tensor::zeros(sa);
    let mut db = Tensor::zeros(sb);
    let (ahw, bhw) = (sa.c * sa.h * sa.w, sb.c * sb.h * sb.w);
    let stride = ahw + bhw;
    for n in 0..sa.n {
        da.data_mut()[n * ahw..(n + 1) * ahw]
            .copy_from_slice(&dy.data()[n * stride..n * stride + ahw]);
        db.data_mut()[n * bhw..(n + 1) * bhw]
            .copy_from_slice(&dy.data()[n * stride + ahw..(n + 1) * stride]);
    }
    (da, db)
}

fn broadcast_ok(xs: Shape, ws: Shape) -> bool {
    ws.n == xs.n
        && (ws.c == xs.c || ws.c == 1)
        && (ws.h == xs.h || ws.h == 1)
        && (ws.w == xs.w || ws.w == 1)
}

/// Multiply x by w, where w may have singleton channel and/or spatial axes:
/// [N,C,1,1] channel weights, [N,1,H,W] spatial weights, or [N,C,H,W].
pub fn mul_broadcast<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if !broadcast_ok(xs, ws) {
        return Err(Error::shape("mul_broadcast", xs, ws));
    }
    let mut out = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wc = if ws.c == 1 { 0 } else { c };
            for h in 0..xs.h {
                let wh = if ws.h == 1 { 0 } else { h };
                for ww in 0..xs.w {
                    let wwi = if ws.w == 1 { 0 } else { ww };
                    *out.at_mut(n, c, h, ww) = x.at(n, c, h, ww) * w.at(n, wc, wh, wwi);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`mul_broadcast`]: dx = dy*w broadcast, dw = dy*x reduced
/// over the axes w broadcasts across.
pub fn mul_broadcast_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (xs, ws) = (x.shape(), w.shape());
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wc = if ws.c == 1 { 0 } else { c };
            for h in 0..xs.h {
                let wh = if ws.h == 1 { 0 } else { h };
                for ww in 0..xs.w {
                    let wwi = if ws.w == 1 { 0 } else { ww };
                    let g = dy.at(n, c, h, ww);
                    *dx.at_mut(n, c, h, ww) = g * w.at(n, wc, wh, wwi);
                    let acc = dw.at_mut(n, wc, wh, wwi);
                    *acc = *acc + g * x.at(n, c, h, ww);
                }
            }
        }
    }
    (dx, dw)
}

/// Three-way elementwise sum; the fusion point of the attention block.
pub fn add3<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::shape(
            "add3",
            a.shape(),
            format!("{} and {}", b.shape(), c.shape()),
        ));
    }
    let mut out = a.clone();
    for ((o, &bv), &cv) in out.data_mut().iter_mut().zip(b.data()).zip(c.data()) {
        *o = *o + bv + cv;
    }
    Ok(out)
}

/// The survivor mask dropout uses for a given element count, rate, and seed.
pub fn dropout_mask(numel: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..numel).map(|_| rng.random::<f64>() >= p).collect()
}

/// Inverted dropout: train mode zeroes each element with probability p and
/// scales survivors by 1/(1-p); eval mode is the identity. Deterministic
/// under (seed, shape).
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    Ok(dropout_with_mask(x, p, mode, seed)?.0)
}

/// [`dropout`] plus the survivor mask (empty in eval mode), which the tape
/// stores for the backward pass.
pub fn dropout_with_mask<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "dropout rate must lie in [0,1), got {p}"
        )));
    }
    match mode {
        Mode::Eval => Ok((x.clone(), Vec::new())),
        Mode::Train => {
            let mask = dropout_mask(x.numel(), p, seed);
            let scale = T::from_f64(1.0 / (1.0 - p));
            let mut out = x.clone();
            for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
                *v = if keep { *v * scale } else { T::zero() };
            }
            Ok((out, mask))
        }
    }
}

pub fn dropout_backward<T: Scalar>(mask: &[bool], p: f64, dy: &Tensor<T>) -> Tensor<T> {
    if mask.is_empty() {
        return dy.clone();
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut dx = dy.clone();
    for (g, &keep) in dx.data_mut().iter_mut().zip(mask) {
        *g = if keep { *g * scale } else { T::zero() };
    }
    dx
}

/// Keep every second row and column (offset 0). Composing a stride-1
/// same-padding conv with this equals the classic stride-2 conv.
pub fn downsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape("downsample2", "even H and W", s));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    Ok(Tensor::from_fn(out_shape, |n, c, h, w| {
        x.at(n, c, 2 * h, 2 * w)
    }))
}

pub fn downsample2_backward<T: Scalar>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let s = dy.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    *dx.at_mut(n, c, 2 * h, 2 * w) = dy.at(n, c, h, w);
                }
            }
        }
    }
    dx
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    acc
}
