//! Stride-1 same-padding 2-D convolution via im2col plus a small GEMM.
//! The verification crate checks this path against a six-loop oracle that
//! shares none of this code.

use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// c[m][n] += a[m][kk] * b[kk][n], row major, sequential accumulation order.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, kk: usize, n: usize) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), kk * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &a[i * kk..(i + 1) * kk];
        let out = &mut c[i * n..(i + 1) * n];
        for (l, &av) in row.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out[j] = out[j] + av * brow[j];
            }
        }
    }
}

/// Unfold one batch item into a [C_in*k*k, H*W] column matrix with zero
/// padding. Column order follows output scan order (h, then w).
fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, k: usize, pad: usize, cols: &mut [T]) {
    let s = x.shape();
    let (c_in, h, w) = (s.c, s.h, s.w);
    debug_assert_eq!(cols.len(), c_in * k * k * h * w);
    let hw = h * w;
    let mut row = 0;
    for ic in 0..c_in {
        for kh in 0..k {
            for kw in 0..k {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..h {
                    let ih = oh + kh;
                    for ow in 0..w {
                        let iw = ow + kw;
                        dst[oh * w + ow] = if ih >= pad && ih - pad < h && iw >= pad && iw - pad < w
                        {
                            x.at(n, ic, ih - pad, iw - pad)
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. Output spatial size equals input spatial size.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    conv2d_with(x, layer.weight(), layer.bias())
}

/// [`conv2d`] on raw weight/bias tensors; the tape's entry point, where
/// parameters live as tape values rather than inside a layer struct.
pub fn conv2d_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws.n, ws.c, ws.h);
    let pad = k / 2;
    debug_assert_eq!(ws.h, ws.w, "square kernels only");
    debug_assert_eq!(bias.len(), c_out);
    let s = x.shape();
    if s.c != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("{c_in} input channels"),
            s,
        ));
    }
    let hw = s.h * s.w;
    let rows = c_in * k * k;

    let mut out = Tensor::zeros(Shape::new(s.n, c_out, s.h, s.w));
    let mut cols = vec![T::zero(); rows * hw];
    for n in 0..s.n {
        im2col(x, n, k, pad, &mut cols);
        let dst = &mut out.data_mut()[n * c_out * hw..(n + 1) * c_out * hw];
        gemm_acc(weight.data(), &cols, dst, c_out, rows, hw);
    }
    for n in 0..s.n {
        for oc in 0..c_out {
            let b = bias[oc];
            let base = (n * c_out + oc) * hw;
            for i in 0..hw {
                let v = &mut out.data_mut()[base + i];
                *v = *v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight, and bias. `dy` has the output
/// shape. Written as direct loops; shares no structure with the forward.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let s = x.shape();
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws.n, ws.c, ws.h);
    let pad = k / 2;
    debug_assert_eq!(dy.shape(), Shape::new(s.n, c_out, s.h, s.w));

    let mut db = vec![T::zero(); c_out];
    for n in 0..s.n {
        for oc in 0..c_out {
            for oh in 0..s.h {
                for ow in 0..s.w {
                    db[oc] = db[oc] + dy.at(n, oc, oh, ow);
                }
            }
        }
    }

    let mut dw = Tensor::zeros(ws);
    for oc in 0..c_out {
        for ic in 0..c_in {
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        for oh in 0..s.h {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= s.h {
                                continue;
                            }
                            for ow in 0..s.w {
                                let iw = ow + kw;
                                if iw < pad || iw - pad >= s.w {
                                    continue;
                                }
                                acc = acc + dy.at(n, oc, oh, ow) * x.at(n, ic, ih - pad, iw - pad);
                            }
                        }
                    }
                    *dw.at_mut(oc, ic, kh, kw) = acc;
                }
            }
        }
    }

    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for oc in 0..c_out {
            for oh in 0..s.h {
                for ow in 0..s.w {
                    let g = dy.at(n, oc, oh, ow);
                    for ic in 0..c_in {
                        for kh in 0..k {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= s.h {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = ow + kw;
                                if iw < pad || iw - pad >= s.w {
                                    continue;
                                }
                                let v = dx.at_mut(n, ic, ih - pad, iw - pad);
                                *v = *v + g * weight.at(oc, ic, kh, kw);
                            }
                        }
                    }
                }
            }
        }
    }

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: Shape) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            (i * 0.37) % 2.0 - 1.0
        })
    }

    #[test]
    fn identity_1x1_reproduces_input() {
        let x = seq_tensor(Shape::new(2, 3, 4, 5));
        let layer = ConvLayer::<f64>::identity(3);
        let y = conv2d(&x, &layer).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shifted_delta_3x3_shifts_with_zero_border() {
        // Kernel hot at (kh=0, kw=1): y[h][w] = x[h-1][w] under same padding.
        let mut w = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        *w.at_mut(0, 0, 0, 1) = 1.0;
        let layer = ConvLayer::new(w, vec![0.0]).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, h, w| (h * 3 + w) as f64);
        let y = conv2d(&x, &layer).unwrap();
        for h in 0..3 {
            for ww in 0..3 {
                let expect = if h == 0 { 0.0 } else { x.at(0, 0, h - 1, ww) };
                assert_eq!(y.at(0, 0, h, ww), expect);
            }
        }
    }

    #[test]
    fn bias_adds_per_output_channel() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let layer = ConvLayer::new(
            Tensor::zeros(Shape::new(3, 2, 1, 1)),
            vec![1.0, -2.0, 0.5],
        )
        .unwrap();
        let y = conv2d(&x, &layer).unwrap();
        for (oc, expect) in [(0, 1.0), (1, -2.0), (2, 0.5)] {
            for h in 0..2 {
                for w in 0..2 {
                    assert_eq!(y.at(0, oc, h, w), expect);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let layer = ConvLayer::<f64>::zeros(1, 3, 1).unwrap();
        assert!(conv2d(&x, &layer).is_err());
    }

    #[test]
    fn ones_3x3_on_impulse_sums_neighborhood() {
        let layer = ConvLayer::new(
            Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64),
            vec![0.0],
        )
        .unwrap();
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 5, 5));
        *x.at_mut(0, 0, 2, 2) = 1.0;
        let y = conv2d(&x, &layer).unwrap();
        for h in 0..5 {
            for w in 0..5 {
                let inside = (1..=3).contains(&h) && (1..=3).contains(&w);
                assert_eq!(y.at(0, 0, h, w), if inside { 1.0 } else { 0.0 });
            }
        }
    }
}
