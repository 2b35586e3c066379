//! The SPCI attention block: a channel gate driven by a squeezed global
//! descriptor (SSG), a spatial gate driven by channel-pooled maps (PFM), a
//! full-tensor gate built from a small conv stack with batchnorm (CDM), and
//! the composition that fuses the three branch outputs by plain addition
//! followed by dropout.

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::ops::{
    add3, concat_channel, conv2d, dropout, mul_broadcast, pool, relu, sigmoid, PoolAxis, PoolMode,
};
use crate::ops::norm::{batchnorm_eval, batchnorm_train_update};
use crate::layers::BnBatchStats;
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeBn, TapeConv, Var};
use crate::tensor::Tensor;
use crate::Mode;

/// Squeeze width of the channel gate: max(ceil(C/r), 8).
pub fn ssg_mid_channels(c: usize, r: usize) -> usize {
    c.div_ceil(r).max(8)
}

/// Mid width of the full-tensor gate: max(ceil(C/2), 8).
pub fn cdm_mid_channels(c: usize) -> usize {
    c.div_ceil(2).max(8)
}

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Channel gate parameters: two 1x1 convs around the squeezed descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct SsgParams<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub reduction: usize,
}

/// Spatial gate parameters: one 7x7 conv over the two pooled maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmParams<T> {
    pub conv7: ConvLayer<T>,
}

/// Full-tensor gate parameters: 1x1 / 3x3 / 1x1 convs with batchnorm after
/// the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct CdmParams<T> {
    pub conv1: ConvLayer<T>,
    pub bn1: BatchNormLayer<T>,
    pub conv2: ConvLayer<T>,
    pub bn2: BatchNormLayer<T>,
    pub conv3: ConvLayer<T>,
}

/// The whole block. Disabled submodules stay in the structure (their
/// parameters persist and serialize) but behave as the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SpciParams<T> {
    pub ssg: SsgParams<T>,
    pub transform: ConvLayer<T>,
    pub pfm: PfmParams<T>,
    pub cdm: CdmParams<T>,
    pub dropout_rate: f64,
    pub ssg_on: bool,
    pub pfm_on: bool,
    pub cdm_on: bool,
}

impl<T: Scalar> SpciParams<T> {
    /// Validates the wiring the forward pass depends on: the SSG convs close
    /// over C_in, the transform maps C_in to C_out, the PFM conv is 7x7 over
    /// exactly the two pooled maps, and the CDM convs chain over C_out.
    pub fn new(
        ssg: SsgParams<T>,
        transform: ConvLayer<T>,
        pfm: PfmParams<T>,
        cdm: CdmParams<T>,
        dropout_rate: f64,
    ) -> Result<Self> {
        let c_in = transform.c_in();
        let c_out = transform.c_out();
        let fail = |what: &str, expected: String, got: String| -> Result<Self> {
            Err(Error::shape(
                "spci_params",
                format!("{what}: {expected}"),
                got,
            ))
        };
        if ssg.conv1.c_in() != c_in || ssg.conv2.c_out() != c_in {
            return fail(
                "ssg convs must close over C_in",
                format!("{c_in} -> mid -> {c_in}"),
                format!(
                    "{} -> {} / {} -> {}",
                    ssg.conv1.c_in(),
                    ssg.conv1.c_out(),
                    ssg.conv2.c_in(),
                    ssg.conv2.c_out()
                ),
            );
        }
        if ssg.conv1.c_out() != ssg.conv2.c_in() {
            return fail(
                "ssg mid widths must agree",
                format!("{}", ssg.conv1.c_out()),
                format!("{}", ssg.conv2.c_in()),
            );
        }
        if ssg.conv1.k() != 1 || ssg.conv2.k() != 1 || transform.k() != 1 {
            return fail(
                "ssg and transform convs must be 1x1",
                "k = 1".into(),
                format!("{}/{}/{}", ssg.conv1.k(), ssg.conv2.k(), transform.k()),
            );
        }
        if ssg.reduction == 0 {
            return Err(Error::config("ssg reduction must be positive"));
        }
        if pfm.conv7.c_in() != 2 || pfm.conv7.c_out() != 1 || pfm.conv7.k() != 7 {
            return fail(
                "pfm conv must be 7x7 mapping 2 pooled maps to 1",
                "2 -> 1, k = 7".into(),
                format!(
                    "{} -> {}, k = {}",
                    pfm.conv7.c_in(),
                    pfm.conv7.c_out(),
                    pfm.conv7.k()
                ),
            );
        }
        let mid = cdm.conv1.c_out();
        if cdm.conv1.c_in() != c_out
            || cdm.conv2.c_in() != mid
            || cdm.conv2.c_out() != mid
            || cdm.conv3.c_in() != mid
            || cdm.conv3.c_out() != c_out
            || cdm.bn1.channels() != mid
            || cdm.bn2.channels() != mid
        {
            return fail(
                "cdm stack must chain C_out -> mid -> mid -> C_out with matching norms",
                format!("{c_out} -> {mid} -> {mid} -> {c_out}"),
                format!(
                    "{} -> {} -> {} -> {} (norms {}/{})",
                    cdm.conv1.c_in(),
                    cdm.conv1.c_out(),
                    cdm.conv2.c_out(),
                    cdm.conv3.c_out(),
                    cdm.bn1.channels(),
                    cdm.bn2.channels()
                ),
            );
        }
        if cdm.conv1.k() != 1 || cdm.conv2.k() != 3 || cdm.conv3.k() != 1 {
            return fail(
                "cdm kernels must be 1x1 / 3x3 / 1x1",
                "1, 3, 1".into(),
                format!("{}, {}, {}", cdm.conv1.k(), cdm.conv2.k(), cdm.conv3.k()),
            );
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate must lie in [0,1), got {dropout_rate}"
            )));
        }
        Ok(SpciParams {
            ssg,
            transform,
            pfm,
            cdm,
            dropout_rate,
            ssg_on: true,
            pfm_on: true,
            cdm_on: true,
        })
    }

    pub fn c_in(&self) -> usize {
        self.transform.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.transform.c_out()
    }

    /// Stored scalars across all submodules (enable flags keep parameters
    /// in place, so they do not change this count).
    pub fn param_count(&self) -> usize {
        self.ssg.conv1.param_count()
            + self.ssg.conv2.param_count()
            + self.transform.param_count()
            + self.pfm.conv7.param_count()
            + self.cdm.conv1.param_count()
            + self.cdm.bn1.param_count()
            + self.cdm.conv2.param_count()
            + self.cdm.bn2.param_count()
            + self.cdm.conv3.param_count()
    }

    pub fn cast<U: Scalar>(&self) -> SpciParams<U> {
        SpciParams {
            ssg: SsgParams {
                conv1: self.ssg.conv1.cast(),
                conv2: self.ssg.conv2.cast(),
                reduction: self.ssg.reduction,
            },
            transform: self.transform.cast(),
            pfm: PfmParams {
                conv7: self.pfm.conv7.cast(),
            },
            cdm: CdmParams {
                conv1: self.cdm.conv1.cast(),
                bn1: self.cdm.bn1.cast(),
                conv2: self.cdm.conv2.cast(),
                bn2: self.cdm.bn2.cast(),
                conv3: self.cdm.conv3.cast(),
            },
            dropout_rate: self.dropout_rate,
            ssg_on: self.ssg_on,
            pfm_on: self.pfm_on,
            cdm_on: self.cdm_on,
        }
    }
}

/// Output of one gate submodule: the gated tensor plus the gate weights.
#[derive(Clone, Debug)]
pub struct GateOutput<T> {
    pub out: Tensor<T>,
    pub weights: Tensor<T>,
}

/// Mode switches for the two mode-sensitive ops. They are independent in
/// the CLI, so they are independent here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modes {
    pub bn: Mode,
    pub dropout: Mode,
}

impl Modes {
    pub fn eval() -> Self {
        Modes {
            bn: Mode::Eval,
            dropout: Mode::Eval,
        }
    }

    pub fn train() -> Self {
        Modes {
            bn: Mode::Train,
            dropout: Mode::Train,
        }
    }
}

/// Channel gate: squeeze spatially, excite through the two 1x1 convs, gate.
/// Weights are [N,C,1,1].
pub fn ssg_forward<T: Scalar>(f: &Tensor<T>, params: &SsgParams<T>) -> Result<GateOutput<T>> {
    if f.shape().c != params.conv1.c_in() {
        return Err(Error::shape(
            "ssg_forward",
            format!("{} channels", params.conv1.c_in()),
            f.shape(),
        ));
    }
    let descriptor = pool(f, PoolMode::Avg, PoolAxis::Spatial);
    let excited = relu(&conv2d(&descriptor, &params.conv1)?);
    let weights = sigmoid(&conv2d(&excited, &params.conv2)?);
    let out = mul_broadcast(f, &weights)?;
    Ok(GateOutput { out, weights })
}

/// Spatial gate: pool across channels (avg and max), stack the two maps,
/// run the 7x7 conv, gate. Weights are [N,1,H,W].
pub fn pfm_forward<T: Scalar>(f: &Tensor<T>, params: &PfmParams<T>) -> Result<GateOutput<T>> {
    let avg = pool(f, PoolMode::Avg, PoolAxis::Channel);
    let max = pool(f, PoolMode::Max, PoolAxis::Channel);
    let stacked = concat_channel(&avg, &max)?;
    let weights = sigmoid(&conv2d(&stacked, &params.conv7)?);
    let out = mul_broadcast(f, &weights)?;
    Ok(GateOutput { out, weights })
}

fn cdm_weights_eval<T: Scalar>(f: &Tensor<T>, params: &CdmParams<T>) -> Result<Tensor<T>> {
    let x1 = relu(&batchnorm_eval(&conv2d(f, &params.conv1)?, &params.bn1)?);
    let x2 = relu(&batchnorm_eval(&conv2d(&x1, &params.conv2)?, &params.bn2)?);
    Ok(sigmoid(&conv2d(&x2, &params.conv3)?))
}

/// Full-tensor gate with batchnorm frozen at the running statistics.
/// Weights are [N,C,H,W].
pub fn cdm_forward<T: Scalar>(f: &Tensor<T>, params: &CdmParams<T>) -> Result<GateOutput<T>> {
    let weights = cdm_weights_eval(f, params)?;
    let out = mul_broadcast(f, &weights)?;
    Ok(GateOutput { out, weights })
}

/// Full-tensor gate normalizing by batch statistics; folds them into the
/// running statistics as a side effect.
pub fn cdm_forward_train<T: Scalar>(
    f: &Tensor<T>,
    params: &mut CdmParams<T>,
) -> Result<GateOutput<T>> {
    let x1 = relu(&batchnorm_train_update(
        &conv2d(f, &params.conv1)?,
        &mut params.bn1,
    )?);
    let x2 = relu(&batchnorm_train_update(
        &conv2d(&x1, &params.conv2)?,
        &mut params.bn2,
    )?);
    let weights = sigmoid(&conv2d(&x2, &params.conv3)?);
    let out = mul_broadcast(f, &weights)?;
    Ok(GateOutput { out, weights })
}

/// Per-branch tensors the block exposes alongside its output. Gate weights
/// are present only for enabled submodules; alpha, beta, gamma are the three
/// summands entering the fusion.
#[derive(Clone, Debug)]
pub struct SpciDiagnostics<T> {
    pub w_s: Option<Tensor<T>>,
    pub w_p: Option<Tensor<T>>,
    pub w_c: Option<Tensor<T>>,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SpciOutput<T> {
    pub out: Tensor<T>,
    pub diag: SpciDiagnostics<T>,
}

enum CdmRef<'a, T> {
    Eval(&'a CdmParams<T>),
    Train(&'a mut CdmParams<T>),
}

#[allow(clippy::too_many_arguments)]
fn spci_wiring<T: Scalar>(
    f: &Tensor<T>,
    ssg: &SsgParams<T>,
    transform: &ConvLayer<T>,
    pfm: &PfmParams<T>,
    cdm: CdmRef<'_, T>,
    enabled: (bool, bool, bool),
    dropout_rate: f64,
    dropout_mode: Mode,
    seed: u64,
) -> Result<SpciOutput<T>> {
    let (ssg_on, pfm_on, cdm_on) = enabled;
    if f.shape().c != transform.c_in() {
        return Err(Error::shape(
            "spci_forward",
            format!("{} channels", transform.c_in()),
            f.shape(),
        ));
    }

    let (selected, w_s) = if ssg_on {
        let gate = ssg_forward(f, ssg)?;
        (gate.out, Some(gate.weights))
    } else {
        (f.clone(), None)
    };
    let alpha = conv2d(&selected, transform)?;

    let (beta, w_p) = if pfm_on {
        let gate = pfm_forward(&alpha, pfm)?;
        (gate.out, Some(gate.weights))
    } else {
        (alpha.clone(), None)
    };

    let (gamma, w_c) = if cdm_on {
        let gate = match cdm {
            CdmRef::Eval(p) => cdm_forward(&beta, p)?,
            CdmRef::Train(p) => cdm_forward_train(&beta, p)?,
        };
        (gate.out, Some(gate.weights))
    } else {
        (beta.clone(), None)
    };

    let fused = add3(&alpha, &beta, &gamma)?;
    let out = dropout(&fused, dropout_rate, dropout_mode, seed)?;
    Ok(SpciOutput {
        out,
        diag: SpciDiagnostics {
            w_s,
            w_p,
            w_c,
            alpha,
            beta,
            gamma,
        },
    })
}

/// Forward with batchnorm in eval mode (shareable parameters). The seed
/// only matters when `dropout_mode` is train.
pub fn spci_forward<T: Scalar>(
    f: &Tensor<T>,
    params: &SpciParams<T>,
    dropout_mode: Mode,
    seed: u64,
) -> Result<SpciOutput<T>> {
    spci_wiring(
        f,
        &params.ssg,
        &params.transform,
        &params.pfm,
        CdmRef::Eval(&params.cdm),
        (params.ssg_on, params.pfm_on, params.cdm_on),
        params.dropout_rate,
        dropout_mode,
        seed,
    )
}

/// Forward with independent batchnorm / dropout mode switches. Train-mode
/// batchnorm updates the running statistics in place, hence `&mut`.
pub fn spci_forward_train<T: Scalar>(
    f: &Tensor<T>,
    params: &mut SpciParams<T>,
    modes: Modes,
    seed: u64,
) -> Result<SpciOutput<T>> {
    let SpciParams {
        ssg,
        transform,
        pfm,
        cdm,
        dropout_rate,
        ssg_on,
        pfm_on,
        cdm_on,
    } = params;
    let cdm_ref = match modes.bn {
        Mode::Eval => CdmRef::Eval(&*cdm),
        Mode::Train => CdmRef::Train(cdm),
    };
    spci_wiring(
        f,
        ssg,
        transform,
        pfm,
        cdm_ref,
        (*ssg_on, *pfm_on, *cdm_on),
        *dropout_rate,
        modes.dropout,
        seed,
    )
}

/// SPCI parameters registered on a tape, for differentiable forwards.
#[derive(Clone, Debug)]
pub struct TapeSpci<T> {
    pub ssg_conv1: TapeConv,
    pub ssg_conv2: TapeConv,
    pub transform: TapeConv,
    pub pfm_conv7: TapeConv,
    pub cdm_conv1: TapeConv,
    pub cdm_bn1: TapeBn<T>,
    pub cdm_conv2: TapeConv,
    pub cdm_bn2: TapeBn<T>,
    pub cdm_conv3: TapeConv,
    ssg_on: bool,
    pfm_on: bool,
    cdm_on: bool,
    dropout_rate: f64,
}

/// Result of a tape forward: the output var plus, in train mode, the batch
/// statistics the caller folds into the layer once the step is accepted.
#[derive(Clone, Debug)]
pub struct TapeSpciOut<T> {
    pub out: Var,
    pub bn1_stats: Option<BnBatchStats<T>>,
    pub bn2_stats: Option<BnBatchStats<T>>,
}

pub fn register_spci<T: Scalar>(tape: &mut Tape<T>, params: &SpciParams<T>) -> TapeSpci<T> {
    TapeSpci {
        ssg_conv1: tape.register_conv(&params.ssg.conv1),
        ssg_conv2: tape.register_conv(&params.ssg.conv2),
        transform: tape.register_conv(&params.transform),
        pfm_conv7: tape.register_conv(&params.pfm.conv7),
        cdm_conv1: tape.register_conv(&params.cdm.conv1),
        cdm_bn1: tape.register_bn(&params.cdm.bn1),
        cdm_conv2: tape.register_conv(&params.cdm.conv2),
        cdm_bn2: tape.register_bn(&params.cdm.bn2),
        cdm_conv3: tape.register_conv(&params.cdm.conv3),
        ssg_on: params.ssg_on,
        pfm_on: params.pfm_on,
        cdm_on: params.cdm_on,
        dropout_rate: params.dropout_rate,
    }
}

/// The same pipeline as [`spci_forward`], recorded on a tape. Gate weights
/// and fusion intermediates become tape values reachable by the backward
/// sweep.
pub fn spci_forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: &TapeSpci<T>,
    modes: Modes,
    seed: u64,
) -> Result<TapeSpciOut<T>> {
    let selected = if h.ssg_on {
        let descriptor = tape.pool(x, PoolMode::Avg, PoolAxis::Spatial)?;
        let excited = tape.conv2d(descriptor, &h.ssg_conv1)?;
        let excited = tape.relu(excited)?;
        let w_s = tape.conv2d(excited, &h.ssg_conv2)?;
        let w_s = tape.sigmoid(w_s)?;
        tape.mul_broadcast(x, w_s)?
    } else {
        x
    };
    let alpha = tape.conv2d(selected, &h.transform)?;

    let beta = if h.pfm_on {
        let avg = tape.pool(alpha, PoolMode::Avg, PoolAxis::Channel)?;
        let max = tape.pool(alpha, PoolMode::Max, PoolAxis::Channel)?;
        let stacked = tape.concat_channel(avg, max)?;
        let w_p = tape.conv2d(stacked, &h.pfm_conv7)?;
        let w_p = tape.sigmoid(w_p)?;
        tape.mul_broadcast(alpha, w_p)?
    } else {
        alpha
    };

    let (gamma, bn1_stats, bn2_stats) = if h.cdm_on {
        let c1 = tape.conv2d(beta, &h.cdm_conv1)?;
        let (b1, bn1_stats) = tape.batchnorm(c1, &h.cdm_bn1, modes.bn)?;
        let x1 = tape.relu(b1)?;
        let c2 = tape.conv2d(x1, &h.cdm_conv2)?;
        let (b2, bn2_stats) = tape.batchnorm(c2, &h.cdm_bn2, modes.bn)?;
        let x2 = tape.relu(b2)?;
        let w_c = tape.conv2d(x2, &h.cdm_conv3)?;
        let w_c = tape.sigmoid(w_c)?;
        (tape.mul_broadcast(beta, w_c)?, bn1_stats, bn2_stats)
    } else {
        (beta, None, None)
    };

    let fused = tape.add3(alpha, beta, gamma)?;
    let out = tape.dropout(fused, h.dropout_rate, modes.dropout, seed)?;
    Ok(TapeSpciOut {
        out,
        bn1_stats,
        bn2_stats,
    })
}
