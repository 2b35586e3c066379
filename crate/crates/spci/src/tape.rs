//! Reverse-mode differentiation over a Wengert list. A forward pass appends
//! one record per op; `backward` replays the records in reverse, pushing
//! gradients from one seed tensor back to every input and parameter.
//!
//! A tape is single-use: after `backward` it refuses further work instead of
//! silently differentiating a stale graph. Distinct tapes are independent
//! and may run on different threads.

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, BnBatchStats, ConvLayer};
use crate::ops::conv::{conv2d_backward, conv2d_with};
use crate::ops::elementwise::{
    add3, concat_channel, concat_channel_backward, downsample2, downsample2_backward,
    dropout_backward, dropout_with_mask, mul_broadcast, mul_broadcast_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, sum_all,
};
use crate::ops::loss::{softmax_xent, softmax_xent_backward};
use crate::ops::norm::{
    bn_eval_backward, bn_eval_raw, bn_train_backward, bn_train_raw,
};
use crate::ops::pool::{pool_backward, pool_with_argmax, PoolAxis, PoolMode};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::Mode;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A conv layer's parameters registered on a tape. The bias rides as a
/// [1,C_out,1,1] tensor so its gradient comes back through the same path
/// as every other value.
#[derive(Clone, Copy, Debug)]
pub struct TapeConv {
    pub weight: Var,
    pub bias: Var,
}

/// A batchnorm layer registered on a tape. Gamma and beta are tape values
/// (shape [1,C,1,1]); the running statistics are captured by value because
/// they are constants of the forward pass.
#[derive(Clone, Debug)]
pub struct TapeBn<T> {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Vec<T>,
    running_var: Vec<T>,
    eps: T,
}

enum Record<T> {
    Conv {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
    },
    Pool {
        x: Var,
        out: Var,
        mode: PoolMode,
        axis: PoolAxis,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
        out: Var,
    },
    Sigmoid {
        x: Var,
        out: Var,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        running_mean: Vec<T>,
        running_var: Vec<T>,
        eps: T,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        stats: BnBatchStats<T>,
        eps: T,
    },
    Concat {
        a: Var,
        b: Var,
        out: Var,
    },
    MulBroadcast {
        x: Var,
        w: Var,
        out: Var,
    },
    Add3 {
        a: Var,
        b: Var,
        c: Var,
        out: Var,
    },
    Dropout {
        x: Var,
        out: Var,
        mask: Vec<bool>,
        p: f64,
    },
    Downsample {
        x: Var,
        out: Var,
    },
    Sum {
        x: Var,
        out: Var,
    },
    SoftmaxXent {
        logits: Var,
        out: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

pub struct Tape<T> {
    vals: Vec<Tensor<T>>,
    records: Vec<Record<T>>,
    consumed: bool,
}

/// Gradients returned by `Tape::backward`, indexed by the vars of the tape
/// that produced them. Vars never touched by the loss have no entry.
pub struct Gradients<T> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as a flat vector; zeros if the var was never reached.
    pub fn wrt_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        match self.wrt(v) {
            Some(g) => {
                debug_assert_eq!(g.shape(), shape);
                g.clone()
            }
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            records: Vec::new(),
            consumed: false,
        }
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, t: Tensor<T>) -> Var {
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    /// Place a leaf value (an input or a parameter) on the tape.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn register_conv(&mut self, layer: &ConvLayer<T>) -> TapeConv {
        let weight = self.push(layer.weight().clone());
        let bias = self.push(
            Tensor::from_vec(
                Shape::new(1, layer.c_out(), 1, 1),
                layer.bias().to_vec(),
            )
            .expect("bias length equals C_out by layer invariant"),
        );
        TapeConv { weight, bias }
    }

    pub fn register_bn(&mut self, layer: &BatchNormLayer<T>) -> TapeBn<T> {
        let c = layer.channels();
        let gamma = self.push(
            Tensor::from_vec(Shape::new(1, c, 1, 1), layer.gamma.clone())
                .expect("gamma length equals channel count"),
        );
        let beta = self.push(
            Tensor::from_vec(Shape::new(1, c, 1, 1), layer.beta.clone())
                .expect("beta length equals channel count"),
        );
        TapeBn {
            gamma,
            beta,
            running_mean: layer.running_mean.clone(),
            running_var: layer.running_var.clone(),
            eps: layer.eps,
        }
    }

    pub fn conv2d(&mut self, x: Var, conv: &TapeConv) -> Result<Var> {
        self.guard()?;
        let out = conv2d_with(
            &self.vals[x.0],
            &self.vals[conv.weight.0],
            self.vals[conv.bias.0].data(),
        )?;
        let out = self.push(out);
        self.records.push(Record::Conv {
            x,
            w: conv.weight,
            b: conv.bias,
            out,
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let out = self.push(relu(&self.vals[x.0]));
        self.records.push(Record::Relu { x, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let out = self.push(sigmoid(&self.vals[x.0]));
        self.records.push(Record::Sigmoid { x, out });
        Ok(out)
    }

    pub fn pool(&mut self, x: Var, mode: PoolMode, axis: PoolAxis) -> Result<Var> {
        self.guard()?;
        let (out, argmax) = pool_with_argmax(&self.vals[x.0], mode, axis);
        let out = self.push(out);
        self.records.push(Record::Pool {
            x,
            out,
            mode,
            axis,
            argmax,
        });
        Ok(out)
    }

    /// Train mode also hands back the batch statistics so the caller can
    /// fold them into the layer's running statistics after the step.
    pub fn batchnorm(
        &mut self,
        x: Var,
        bn: &TapeBn<T>,
        mode: Mode,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        self.guard()?;
        let gamma = self.vals[bn.gamma.0].data().to_vec();
        let beta = self.vals[bn.beta.0].data().to_vec();
        match mode {
            Mode::Eval => {
                let out = bn_eval_raw(
                    &self.vals[x.0],
                    &gamma,
                    &beta,
                    &bn.running_mean,
                    &bn.running_var,
                    bn.eps,
                );
                let out = self.push(out);
                self.records.push(Record::BnEval {
                    x,
                    gamma: bn.gamma,
                    beta: bn.beta,
                    out,
                    running_mean: bn.running_mean.clone(),
                    running_var: bn.running_var.clone(),
                    eps: bn.eps,
                });
                Ok((out, None))
            }
            Mode::Train => {
                let (out, stats) = bn_train_raw(&self.vals[x.0], &gamma, &beta, bn.eps)?;
                let out = self.push(out);
                self.records.push(Record::BnTrain {
                    x,
                    gamma: bn.gamma,
                    beta: bn.beta,
                    out,
                    stats: stats.clone(),
                    eps: bn.eps,
                });
                Ok((out, Some(stats)))
            }
        }
    }

    pub fn concat_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let out = concat_channel(&self.vals[a.0], &self.vals[b.0])?;
        let out = self.push(out);
        self.records.push(Record::Concat { a, b, out });
        Ok(out)
    }

    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        self.guard()?;
        let out = mul_broadcast(&self.vals[x.0], &self.vals[w.0])?;
        let out = self.push(out);
        self.records.push(Record::MulBroadcast { x, w, out });
        Ok(out)
    }

    pub fn add3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        self.guard()?;
        let out = add3(&self.vals[a.0], &self.vals[b.0], &self.vals[c.0])?;
        let out = self.push(out);
        self.records.push(Record::Add3 { a, b, c, out });
        Ok(out)
    }

    /// Eval mode records nothing and returns `x` itself; the op is the
    /// identity there, so the graph is unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var> {
        self.guard()?;
        if mode == Mode::Eval {
            // Still validate the rate so eval and train reject alike.
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!(
                    "dropout rate must lie in [0,1), got {p}"
                )));
            }
            return Ok(x);
        }
        let (out, mask) = dropout_with_mask(&self.vals[x.0], p, mode, seed)?;
        let out = self.push(out);
        self.records.push(Record::Dropout { x, out, mask, p });
        Ok(out)
    }

    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let out = downsample2(&self.vals[x.0])?;
        let out = self.push(out);
        self.records.push(Record::Downsample { x, out });
        Ok(out)
    }

    /// Reduce to a [1,1,1,1] scalar; the usual way to seed a backward pass.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let total = sum_all(&self.vals[x.0]);
        let out = self.push(Tensor::full(Shape::new(1, 1, 1, 1), total));
        self.records.push(Record::Sum { x, out });
        Ok(out)
    }

    /// Mean softmax cross-entropy as a [1,1,1,1] scalar.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.guard()?;
        let (loss, probs) = softmax_xent(&self.vals[logits.0], labels)?;
        let out = self.push(Tensor::full(Shape::new(1, 1, 1, 1), loss));
        self.records.push(Record::SoftmaxXent {
            logits,
            out,
            probs,
            labels: labels.to_vec(),
        });
        Ok(out)
    }

    /// Run the reverse sweep from `output`, seeded with `seed_grad` (which
    /// must match the output's shape). Consumes the tape's ability to
    /// record or differentiate again.
    pub fn backward(&mut self, output: Var, seed_grad: &Tensor<T>) -> Result<Gradients<T>> {
        self.guard()?;
        self.consumed = true;
        let out_shape = self.vals[output.0].shape();
        if seed_grad.shape() != out_shape {
            return Err(Error::shape("backward", out_shape, seed_grad.shape()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.vals.len()];
        grads[output.0] = Some(seed_grad.clone());

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
            match &mut grads[v.0] {
                Some(g) => {
                    debug_assert_eq!(g.shape(), delta.shape());
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + *b;
                    }
                }
                slot => *slot = Some(delta),
            }
        }

        for rec in self.records.iter().rev() {
            match rec {
                Record::Conv { x, w, b, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let (dx, dw, db) = conv2d_backward(&self.vals[x.0], &self.vals[w.0], &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    let c_out = db.len();
                    acc(
                        &mut grads,
                        *b,
                        Tensor::from_vec(Shape::new(1, c_out, 1, 1), db)
                            .expect("bias gradient length equals C_out"),
                    );
                }
                Record::Pool {
                    x,
                    out,
                    mode,
                    axis,
                    argmax,
                } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let dx = pool_backward(self.vals[x.0].shape(), *mode, *axis, argmax, &dy);
                    acc(&mut grads, *x, dx);
                }
                Record::Relu { x, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    acc(&mut grads, *x, relu_backward(&self.vals[x.0], &dy));
                }
                Record::Sigmoid { x, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    acc(&mut grads, *x, sigmoid_backward(&self.vals[out.0], &dy));
                }
                Record::BnEval {
                    x,
                    gamma,
                    beta,
                    out,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let (dx, dgamma, dbeta) = bn_eval_backward(
                        &self.vals[x.0],
                        self.vals[gamma.0].data(),
                        running_mean,
                        running_var,
                        *eps,
                        &dy,
                    );
                    let c = dgamma.len();
                    acc(&mut grads, *x, dx);
                    acc(
                        &mut grads,
                        *gamma,
                        Tensor::from_vec(Shape::new(1, c, 1, 1), dgamma).expect("length C"),
                    );
                    acc(
                        &mut grads,
                        *beta,
                        Tensor::from_vec(Shape::new(1, c, 1, 1), dbeta).expect("length C"),
                    );
                }
                Record::BnTrain {
                    x,
                    gamma,
                    beta,
                    out,
                    stats,
                    eps,
                } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let (dx, dgamma, dbeta) = bn_train_backward(
                        &self.vals[x.0],
                        self.vals[gamma.0].data(),
                        stats,
                        *eps,
                        &dy,
                    );
                    let c = dgamma.len();
                    acc(&mut grads, *x, dx);
                    acc(
                        &mut grads,
                        *gamma,
                        Tensor::from_vec(Shape::new(1, c, 1, 1), dgamma).expect("length C"),
                    );
                    acc(
                        &mut grads,
                        *beta,
                        Tensor::from_vec(Shape::new(1, c, 1, 1), dbeta).expect("length C"),
                    );
                }
                Record::Concat { a, b, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let (da, db) = concat_channel_backward(
                        self.vals[a.0].shape(),
                        self.vals[b.0].shape(),
                        &dy,
                    );
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Record::MulBroadcast { x, w, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let (dx, dw) = mul_broadcast_backward(&self.vals[x.0], &self.vals[w.0], &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Record::Add3 { a, b, c, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *c, dy);
                }
                Record::Dropout { x, out, mask, p } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    acc(&mut grads, *x, dropout_backward(mask, *p, &dy));
                }
                Record::Downsample { x, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    acc(
                        &mut grads,
                        *x,
                        downsample2_backward(self.vals[x.0].shape(), &dy),
                    );
                }
                Record::Sum { x, out } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let g = dy.at(0, 0, 0, 0);
                    acc(&mut grads, *x, Tensor::full(self.vals[x.0].shape(), g));
                }
                Record::SoftmaxXent {
                    logits,
                    out,
                    probs,
                    labels,
                } => {
                    let Some(dy) = grads[out.0].clone() else { continue };
                    let g = dy.at(0, 0, 0, 0);
                    acc(&mut grads, *logits, softmax_xent_backward(probs, labels, g));
                }
            }
        }

        Ok(Gradients { inner: grads })
    }
}
