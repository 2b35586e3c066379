//! Global pooling along either the spatial plane or the channel axis.
//! Spatial pooling squeezes [N,C,H,W] to [N,C,1,1]; channel pooling
//! squeezes it to [N,1,H,W].

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    Spatial,
    Channel,
}

pub fn pool<T: Scalar>(x: &Tensor<T>, mode: PoolMode, axis: PoolAxis) -> Tensor<T> {
    pool_with_argmax(x, mode, axis).0
}

/// Same as [`pool`] but for max mode also returns, per output element, the
/// flat index into `x` of the chosen maximum. Ties go to the first maximal
/// element in scan order, which is the element the backward pass credits.
pub fn pool_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    mode: PoolMode,
    axis: PoolAxis,
) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    match axis {
        PoolAxis::Spatial => {
            let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
            let mut arg = Vec::new();
            let hw = s.h * s.w;
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = s.index(n, c, 0, 0);
                    let plane = &x.data()[base..base + hw];
                    match mode {
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for &v in plane {
                                acc = acc + v;
                            }
                            *out.at_mut(n, c, 0, 0) = acc / T::from_f64(hw as f64);
                        }
                        PoolMode::Max => {
                            let mut best = plane[0];
                            let mut best_i = 0;
                            for (i, &v) in plane.iter().enumerate().skip(1) {
                                if v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                            *out.at_mut(n, c, 0, 0) = best;
                            arg.push(base + best_i);
                        }
                    }
                }
            }
            (out, arg)
        }
        PoolAxis::Channel => {
            let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
            let mut arg = Vec::new();
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        match mode {
                            PoolMode::Avg => {
                                let mut acc = T::zero();
                                for c in 0..s.c {
                                    acc = acc + x.at(n, c, h, w);
                                }
                                *out.at_mut(n, 0, h, w) = acc / T::from_f64(s.c as f64);
                            }
                            PoolMode::Max => {
                                let mut best = x.at(n, 0, h, w);
                                let mut best_c = 0;
                                for c in 1..s.c {
                                    let v = x.at(n, c, h, w);
                                    if v > best {
                                        best = v;
                                        best_c = c;
                                    }
                                }
                                *out.at_mut(n, 0, h, w) = best;
                                arg.push(s.index(n, best_c, h, w));
                            }
                        }
                    }
                }
            }
            (out, arg)
        }
    }
}

/// Gradient of [`pool`]. `argmax` must be the companion of the forward call
/// for max mode and is ignored for avg mode.
pub fn pool_backward<T: Scalar>(
    x_shape: Shape,
    mode: PoolMode,
    axis: PoolAxis,
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    match (mode, axis) {
        (PoolMode::Avg, PoolAxis::Spatial) => {
            let scale = T::one() / T::from_f64((x_shape.h * x_shape.w) as f64);
            for n in 0..x_shape.n {
                for c in 0..x_shape.c {
                    let g = dy.at(n, c, 0, 0) * scale;
                    for h in 0..x_shape.h {
                        for w in 0..x_shape.w {
                            *dx.at_mut(n, c, h, w) = g;
                        }
                    }
                }
            }
        }
        (PoolMode::Avg, PoolAxis::Channel) => {
            let scale = T::one() / T::from_f64(x_shape.c as f64);
            for n in 0..x_shape.n {
                for h in 0..x_shape.h {
                    for w in 0..x_shape.w {
                        let g = dy.at(n, 0, h, w) * scale;
                        for c in 0..x_shape.c {
                            *dx.at_mut(n, c, h, w) = g;
                        }
                    }
                }
            }
        }
        (PoolMode::Max, _) => {
            // dy scans its own elements in the same order argmax was filled.
            for (i, &src) in argmax.iter().enumerate() {
                dx.data_mut()[src] = dx.data_mut()[src] + dy.data()[i];
            }
        }
    }
    dx
}
