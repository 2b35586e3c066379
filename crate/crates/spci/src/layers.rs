//! Parameter containers for the two layer kinds the engine knows about.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Kernel sizes the conv kernels are written and tested for.
pub const SUPPORTED_KERNELS: [usize; 3] = [1, 3, 7];

/// A 2-D convolution layer, stride 1, same-padding (pad = k/2).
///
/// Weight layout is [C_out, C_in, k, k] riding the rank-4 tensor type
/// (n extent = C_out, c extent = C_in).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    weight: Tensor<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w || !SUPPORTED_KERNELS.contains(&s.h) {
            return Err(Error::shape(
                "conv_layer",
                "square kernel with k in {1,3,7}",
                format!("{}x{}", s.h, s.w),
            ));
        }
        if bias.len() != s.n {
            return Err(Error::shape(
                "conv_layer",
                format!("bias length {}", s.n),
                format!("bias length {}", bias.len()),
            ));
        }
        Ok(ConvLayer { weight, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            vec![T::zero(); c_out],
        )
    }

    /// 1x1 layer mapping every channel to itself; the neutral transform.
    pub fn identity(c: usize) -> Self {
        let weight = Tensor::from_fn(Shape::new(c, c, 1, 1), |oc, ic, _, _| {
            if oc == ic {
                T::one()
            } else {
                T::zero()
            }
        });
        ConvLayer {
            weight,
            bias: vec![T::zero(); c],
        }
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn k(&self) -> usize {
        self.weight.shape().h
    }

    pub fn padding(&self) -> usize {
        self.k() / 2
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Mini-batch statistics produced by a train-mode batchnorm forward.
///
/// `var` is the biased (divide by m) variance used for normalization;
/// the running update converts it to the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values per channel, N*H*W. At least 2 in train mode.
    pub count: usize,
}

/// Per-channel batch normalization. Whether a forward uses batch statistics
/// or the running ones is a call-site decision (`Mode`), not layer state,
/// so eval forwards can share a layer immutably.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    /// Invariant: entries strictly positive.
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

pub const BN_DEFAULT_EPS: f64 = 1e-5;
pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(c: usize) -> Self {
        BatchNormLayer {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            eps: T::from_f64(BN_DEFAULT_EPS),
            momentum: T::from_f64(BN_DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Learned plus running values, the convention used by the cost model.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    /// Momentum blend of the running statistics with one batch's statistics.
    /// The variance folded in is the unbiased one (m/(m-1) correction), which
    /// is why train mode requires at least two values per channel.
    pub fn apply_batch_update(&mut self, stats: &BnBatchStats<T>) {
        debug_assert!(stats.count >= 2);
        let m = self.momentum;
        let keep = T::one() - m;
        let correction =
            T::from_f64(stats.count as f64) / T::from_f64((stats.count - 1) as f64);
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.var[c] * correction;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormLayer<U> {
        let lift = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BatchNormLayer {
            gamma: lift(&self.gamma),
            beta: lift(&self.beta),
            running_mean: lift(&self.running_mean),
            running_var: lift(&self.running_var),
            eps: U::from_f64(self.eps.as_f64()),
            momentum: U::from_f64(self.momentum.as_f64()),
        }
    }
}
