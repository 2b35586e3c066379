//! Per-channel batch normalization over N, H, W.
//!
//! Normalization always divides by the biased (1/m) variance; the running
//! variance is updated with the unbiased estimate, which is where the
//! train-mode m >= 2 precondition comes from.

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, BnBatchStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_channels<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    layer: &BatchNormLayer<T>,
) -> Result<()> {
    if x.shape().c != layer.channels() {
        return Err(Error::shape(
            op,
            format!("{} channels", layer.channels()),
            x.shape(),
        ));
    }
    Ok(())
}

/// Standardize with the running statistics, then apply the affine pair.
pub fn batchnorm_eval<T: Scalar>(x: &Tensor<T>, layer: &BatchNormLayer<T>) -> Result<Tensor<T>> {
    check_channels("batchnorm_eval", x, layer)?;
    Ok(bn_eval_raw(
        x,
        &layer.gamma,
        &layer.beta,
        &layer.running_mean,
        &layer.running_var,
        layer.eps,
    ))
}

/// Eval-mode normalization from raw per-channel slices (lengths must equal
/// x.C); the tape's entry point.
pub fn bn_eval_raw<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Tensor<T> {
    let s = x.shape();
    debug_assert_eq!(gamma.len(), s.c);
    let mut out = x.clone();
    for c in 0..s.c {
        let invstd = T::one() / (running_var[c] + eps).sqrt();
        let (g, b, mu) = (gamma[c], beta[c], running_mean[c]);
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = out.at_mut(n, c, h, w);
                    *v = g * (*v - mu) * invstd + b;
                }
            }
        }
    }
    out
}

/// Per-channel mean and biased variance over N, H, W, accumulated in scan
/// order (n outermost) so results are deterministic per build.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BnBatchStats<T> {
    let s = x.shape();
    let m = s.n * s.h * s.w;
    let mf = T::from_f64(m as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    acc = acc + x.at(n, c, h, w);
                }
            }
        }
        mean[c] = acc / mf;
        let mut sq = T::zero();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let d = x.at(n, c, h, w) - mean[c];
                    sq = sq + d * d;
                }
            }
        }
        var[c] = sq / mf;
    }
    BnBatchStats { mean, var, count: m }
}

/// Standardize with this batch's statistics. Does not touch the running
/// statistics; callers fold the returned stats in via `apply_batch_update`
/// once the step is accepted.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    layer: &BatchNormLayer<T>,
) -> Result<(Tensor<T>, BnBatchStats<T>)> {
    check_channels("batchnorm_train", x, layer)?;
    bn_train_raw(x, &layer.gamma, &layer.beta, layer.eps)
}

/// Train-mode normalization from raw per-channel slices; the tape's entry
/// point. Returns the batch statistics for the caller to fold into running
/// statistics (or discard).
pub fn bn_train_raw<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnBatchStats<T>)> {
    let s = x.shape();
    debug_assert_eq!(gamma.len(), s.c);
    if s.n * s.h * s.w < 2 {
        return Err(Error::shape(
            "batchnorm_train",
            "at least 2 values per channel (N*H*W >= 2)",
            s,
        ));
    }
    let stats = batch_stats(x);
    let mut out = x.clone();
    for c in 0..s.c {
        let invstd = T::one() / (stats.var[c] + eps).sqrt();
        let (g, b, mu) = (gamma[c], beta[c], stats.mean[c]);
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = out.at_mut(n, c, h, w);
                    *v = g * (*v - mu) * invstd + b;
                }
            }
        }
    }
    Ok((out, stats))
}

/// Train forward that also folds the batch statistics into the running ones.
pub fn batchnorm_train_update<T: Scalar>(
    x: &Tensor<T>,
    layer: &mut BatchNormLayer<T>,
) -> Result<Tensor<T>> {
    let (out, stats) = batchnorm_train(x, layer)?;
    layer.apply_batch_update(&stats);
    Ok(out)
}

/// Eval-mode gradients. The running statistics are constants, so dx is a
/// plain per-channel scale of dy.
pub fn bn_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    layer_gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let mut dx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let invstd = T::one() / (running_var[c] + eps).sqrt();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let g = dy.at(n, c, h, w);
                    let xhat = (x.at(n, c, h, w) - running_mean[c]) * invstd;
                    dgamma[c] = dgamma[c] + g * xhat;
                    dbeta[c] = dbeta[c] + g;
                    *dx.at_mut(n, c, h, w) = g * layer_gamma[c] * invstd;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Train-mode gradients; accounts for the loss flowing through the batch
/// mean and variance as well as through the normalized values.
pub fn bn_train_backward<T: Scalar>(
    x: &Tensor<T>,
    layer_gamma: &[T],
    stats: &BnBatchStats<T>,
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let m = T::from_f64((s.n * s.h * s.w) as f64);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let invstd = T::one() / (stats.var[c] + eps).sqrt();
        let mu = stats.mean[c];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let g = dy.at(n, c, h, w);
                    let xhat = (x.at(n, c, h, w) - mu) * invstd;
                    let dxhat = g * layer_gamma[c];
                    dgamma[c] = dgamma[c] + g * xhat;
                    dbeta[c] = dbeta[c] + g;
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
        }
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let xhat = (x.at(n, c, h, w) - mu) * invstd;
                    let dxhat = dy.at(n, c, h, w) * layer_gamma[c];
                    *dx.at_mut(n, c, h, w) =
                        invstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
