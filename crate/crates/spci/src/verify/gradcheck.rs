//! Central-difference gradient checking for the attention block. The
//! numeric side drives the plain forward pass through perturbed parameter
//! vectors; the analytic side replays the tape. The two share only the
//! forward definition itself.

use crate::attention::{
    pfm_forward, register_spci, spci_forward, spci_forward_on_tape, ssg_forward, Modes, SpciParams,
};
use crate::error::{Error, Result};
use crate::init::{init_spci, mix_seed, seeded_tensor};
use crate::layers::ConvLayer;
use crate::ops::conv::conv2d;
use crate::ops::norm::batchnorm_eval;
use crate::ops::{pool, relu, sum_all, PoolAxis, PoolMode};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::Mode;
use std::fmt::Write as _;

/// |a-n| / max(|a|, |n|, 1e-8); the floor keeps zero-gradient
/// coordinates from dividing by zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central differences (f(t+h) - f(t-h)) / 2h per coordinate.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step size must be positive");
    let mut scratch = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = scratch[i];
            scratch[i] = orig + h;
            let plus = f(&scratch);
            scratch[i] = orig - h;
            let minus = f(&scratch);
            scratch[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// The block's differentiable parameters in a fixed flat order. Batchnorm
/// running statistics are eval-mode constants and stay out of the vector.
pub fn param_groups(params: &SpciParams<f64>) -> Vec<(String, usize)> {
    let conv = |name: &str, l: &ConvLayer<f64>| {
        vec![
            (format!("{name}.weight"), l.weight().numel()),
            (format!("{name}.bias"), l.bias().len()),
        ]
    };
    let bn = |name: &str, c: usize| {
        vec![(format!("{name}.gamma"), c), (format!("{name}.beta"), c)]
    };
    let mut out = Vec::new();
    out.extend(conv("ssg.conv1", &params.ssg.conv1));
    out.extend(conv("ssg.conv2", &params.ssg.conv2));
    out.extend(conv("transform", &params.transform));
    out.extend(conv("pfm.conv7", &params.pfm.conv7));
    out.extend(conv("cdm.conv1", &params.cdm.conv1));
    out.extend(bn("cdm.bn1", params.cdm.bn1.channels()));
    out.extend(conv("cdm.conv2", &params.cdm.conv2));
    out.extend(bn("cdm.bn2", params.cdm.bn2.channels()));
    out.extend(conv("cdm.conv3", &params.cdm.conv3));
    out
}

pub fn flatten_params(p: &SpciParams<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<f64>, l: &ConvLayer<f64>| {
        out.extend_from_slice(l.weight().data());
        out.extend_from_slice(l.bias());
    };
    conv(&mut out, &p.ssg.conv1);
    conv(&mut out, &p.ssg.conv2);
    conv(&mut out, &p.transform);
    conv(&mut out, &p.pfm.conv7);
    conv(&mut out, &p.cdm.conv1);
    out.extend_from_slice(&p.cdm.bn1.gamma);
    out.extend_from_slice(&p.cdm.bn1.beta);
    conv(&mut out, &p.cdm.conv2);
    out.extend_from_slice(&p.cdm.bn2.gamma);
    out.extend_from_slice(&p.cdm.bn2.beta);
    conv(&mut out, &p.cdm.conv3);
    out
}

struct Cursor<'a> {
    flat: &'a [f64],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.flat[self.pos..self.pos + n];
        self.pos += n;
        s
    }
}

pub fn load_params(p: &mut SpciParams<f64>, flat: &[f64]) {
    let mut cur = Cursor { flat, pos: 0 };
    let conv = |cur: &mut Cursor, l: &mut ConvLayer<f64>| {
        let n = l.weight().numel();
        l.weight_mut().data_mut().copy_from_slice(cur.take(n));
        let c = l.bias().len();
        l.bias_mut().copy_from_slice(cur.take(c));
    };
    conv(&mut cur, &mut p.ssg.conv1);
    conv(&mut cur, &mut p.ssg.conv2);
    conv(&mut cur, &mut p.transform);
    conv(&mut cur, &mut p.pfm.conv7);
    conv(&mut cur, &mut p.cdm.conv1);
    let c1 = p.cdm.bn1.channels();
    p.cdm.bn1.gamma.copy_from_slice(cur.take(c1));
    p.cdm.bn1.beta.copy_from_slice(cur.take(c1));
    conv(&mut cur, &mut p.cdm.conv2);
    let c2 = p.cdm.bn2.channels();
    p.cdm.bn2.gamma.copy_from_slice(cur.take(c2));
    p.cdm.bn2.beta.copy_from_slice(cur.take(c2));
    conv(&mut cur, &mut p.cdm.conv3);
    assert_eq!(cur.pos, flat.len(), "flat vector length mismatch");
}

fn analytic_flat(params: &SpciParams<f64>, x: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let h = register_spci(&mut tape, params);
    let xv = tape.input(x.clone());
    let out = spci_forward_on_tape(&mut tape, xv, &h, Modes::eval(), 0)?;
    let loss = tape.sum(out.out)?;
    let grads = tape.backward(loss, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0))?;
    let input_grad = grads.wrt_or_zeros(xv, x.shape()).data().to_vec();
    let bias_shape = |c: usize| Shape::new(1, c, 1, 1);
    let mut flat = Vec::new();
    let conv = |flat: &mut Vec<f64>, handle: &crate::tape::TapeConv, layer: &ConvLayer<f64>| {
        flat.extend_from_slice(
            grads
                .wrt_or_zeros(handle.weight, layer.weight().shape())
                .data(),
        );
        flat.extend_from_slice(grads.wrt_or_zeros(handle.bias, bias_shape(layer.bias().len())).data());
    };
    conv(&mut flat, &h.ssg_conv1, &params.ssg.conv1);
    conv(&mut flat, &h.ssg_conv2, &params.ssg.conv2);
    conv(&mut flat, &h.transform, &params.transform);
    conv(&mut flat, &h.pfm_conv7, &params.pfm.conv7);
    conv(&mut flat, &h.cdm_conv1, &params.cdm.conv1);
    let c1 = params.cdm.bn1.channels();
    flat.extend_from_slice(grads.wrt_or_zeros(h.cdm_bn1.gamma, bias_shape(c1)).data());
    flat.extend_from_slice(grads.wrt_or_zeros(h.cdm_bn1.beta, bias_shape(c1)).data());
    conv(&mut flat, &h.cdm_conv2, &params.cdm.conv2);
    let c2 = params.cdm.bn2.channels();
    flat.extend_from_slice(grads.wrt_or_zeros(h.cdm_bn2.gamma, bias_shape(c2)).data());
    flat.extend_from_slice(grads.wrt_or_zeros(h.cdm_bn2.beta, bias_shape(c2)).data());
    conv(&mut flat, &h.cdm_conv3, &params.cdm.conv3);
    Ok((flat, input_grad))
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub h: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "h {:e}", self.h).unwrap();
        writeln!(s, "tolerance {:e}", self.tolerance).unwrap();
        writeln!(s, "pass {}", if self.passed() { 1 } else { 0 }).unwrap();
        writeln!(s, "max_rel_err {:e}", self.max_rel_err()).unwrap();
        if let Some(worst) = self.worst() {
            writeln!(s, "worst_param {}", worst.name).unwrap();
        }
        for e in &self.entries {
            writeln!(s, "{}.max_rel_err {:e}", e.name, e.max_rel_err).unwrap();
            writeln!(s, "{}.worst_index {}", e.name, e.worst_index).unwrap();
        }
        s
    }
}

/// Checks every parameter coordinate of the block, and every input
/// coordinate, against central differences of a sum-of-outputs loss,
/// batchnorm and dropout in eval mode.
pub fn gradcheck_spci(
    params: &SpciParams<f64>,
    x: &Tensor<f64>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::config("step size must be positive"));
    }
    let (analytic, analytic_input) = analytic_flat(params, x)?;
    let theta = flatten_params(params);
    let mut scratch = params.clone();
    let numeric = finite_diff_grad(
        |flat| {
            load_params(&mut scratch, flat);
            let out = spci_forward(x, &scratch, Mode::Eval, 0).expect("perturbed forward");
            sum_all(&out.out)
        },
        &theta,
        h,
    );
    let mut x_scratch = x.clone();
    let numeric_input = finite_diff_grad(
        |flat| {
            x_scratch.data_mut().copy_from_slice(flat);
            let out = spci_forward(&x_scratch, params, Mode::Eval, 0).expect("perturbed forward");
            sum_all(&out.out)
        },
        x.data(),
        h,
    );
    let mut entries = Vec::new();
    let mut offset = 0;
    let worst_of = |analytic: &[f64], numeric: &[f64]| {
        let mut worst = (0.0f64, 0usize);
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let e = rel_err(*a, *n);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        worst
    };
    for (name, len) in param_groups(params) {
        let (err, idx) = worst_of(&analytic[offset..offset + len], &numeric[offset..offset + len]);
        entries.push(GradCheckEntry {
            name,
            max_rel_err: err,
            worst_index: idx,
        });
        offset += len;
    }
    let (err, idx) = worst_of(&analytic_input, &numeric_input);
    entries.push(GradCheckEntry {
        name: "input".to_string(),
        max_rel_err: err,
        worst_index: idx,
    });
    Ok(GradCheckReport {
        entries,
        h,
        tolerance,
    })
}

/// Rejects test inputs that place any relu pre-activation, or any
/// channel-max margin feeding the spatial gate, within `margin` of its
/// kink; central differences are only trustworthy on smooth neighborhoods.
pub fn smooth_probe(params: &SpciParams<f64>, x: &Tensor<f64>, margin: f64) -> Result<bool> {
    let min_abs = |t: &Tensor<f64>| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let s = if params.ssg_on {
        let gap = pool(x, PoolMode::Avg, PoolAxis::Spatial);
        let pre = conv2d(&gap, &params.ssg.conv1)?;
        if min_abs(&pre) < margin {
            return Ok(false);
        }
        ssg_forward(x, &params.ssg)?.out
    } else {
        x.clone()
    };
    let alpha = conv2d(&s, &params.transform)?;
    if params.pfm_on {
        let sh = alpha.shape();
        for n in 0..sh.n {
            for y in 0..sh.h {
                for xx in 0..sh.w {
                    let mut top = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for c in 0..sh.c {
                        let v = alpha.at(n, c, y, xx);
                        if v > top {
                            second = top;
                            top = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                    if sh.c > 1 && top - second < margin {
                        return Ok(false);
                    }
                }
            }
        }
    }
    let beta = if params.pfm_on {
        pfm_forward(&alpha, &params.pfm)?.out
    } else {
        alpha
    };
    if params.cdm_on {
        let cdm = &params.cdm;
        let pre1 = batchnorm_eval(&conv2d(&beta, &cdm.conv1)?, &cdm.bn1)?;
        if min_abs(&pre1) < margin {
            return Ok(false);
        }
        let pre2 = batchnorm_eval(&conv2d(&relu(&pre1), &cdm.conv2)?, &cdm.bn2)?;
        if min_abs(&pre2) < margin {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Seeded end-to-end check: C-channel block, [1,C,6,6] input, retrying the
/// input seed until the smoothness probe accepts the test point.
pub fn gradcheck_spci_seeded(
    c: usize,
    base_seed: u64,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let params = init_spci::<f64>(c, c, 16, 0.1, base_seed)?;
    for attempt in 0..20 {
        let x = seeded_tensor(Shape::new(1, c, 6, 6), -1.0, 1.0, mix_seed(base_seed, 100 + attempt));
        if smooth_probe(&params, &x, 1e-3)? {
            return gradcheck_spci(&params, &x, h, tolerance);
        }
    }
    Err(Error::config(
        "no smooth test point found in 20 attempts; widen the margin or change the seed",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_two_theta() {
        let theta = vec![0.5, -1.5, 2.0, 0.0];
        let g = finite_diff_grad(|t| t.iter().map(|v| v * v).sum(), &theta, 1e-5);
        for (gi, ti) in g.iter().zip(&theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-8, "{gi} vs {}", 2.0 * ti);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 7.25, &[1.0, 2.0, 3.0], 1e-4);
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn flatten_load_round_trips() {
        let params = init_spci::<f64>(8, 8, 16, 0.1, 3).unwrap();
        let flat = flatten_params(&params);
        let total: usize = param_groups(&params).iter().map(|(_, n)| n).sum();
        assert_eq!(flat.len(), total);
        let mut other = init_spci::<f64>(8, 8, 16, 0.1, 999).unwrap();
        load_params(&mut other, &flat);
        assert_eq!(flatten_params(&other), flat);
    }

    #[test]
    fn rel_err_floors_tiny_denominators() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn full_block_gradcheck_passes() {
        let report = gradcheck_spci_seeded(8, 5, 1e-4, 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel err {:e} at {:?}",
            report.max_rel_err(),
            report.worst().map(|e| &e.name)
        );
        let text = report.to_text();
        assert!(text.contains("pass 1"));
        assert!(text.contains("cdm.bn2.beta.max_rel_err"));
        assert!(text.contains("input.max_rel_err"));
    }

    #[test]
    fn gradcheck_covers_disabled_submodules_too() {
        let mut params = init_spci::<f64>(8, 8, 16, 0.1, 6).unwrap();
        params.pfm_on = false;
        let x = seeded_tensor(Shape::new(1, 8, 5, 5), -1.0, 1.0, 11);
        assert!(smooth_probe(&params, &x, 1e-3).unwrap());
        let report = gradcheck_spci(&params, &x, 1e-4, 1e-4).unwrap();
        assert!(report.passed(), "max {:e}", report.max_rel_err());
        // The disabled gate contributes nothing, so its error is exactly 0.
        let pfm = report
            .entries
            .iter()
            .find(|e| e.name == "pfm.conv7.weight")
            .unwrap();
        assert_eq!(pfm.max_rel_err, 0.0);
    }

    #[test]
    fn halving_h_is_stable_on_smooth_points() {
        let params = init_spci::<f64>(8, 8, 16, 0.1, 7).unwrap();
        let x = (0..20)
            .map(|i| seeded_tensor(Shape::new(1, 8, 4, 4), -1.0, 1.0, 13 + i))
            .find(|x| smooth_probe(&params, x, 1e-3).unwrap())
            .expect("a smooth test point exists");
        let theta = flatten_params(&params);
        let mut scratch = params.clone();
        let mut loss = |flat: &[f64]| {
            load_params(&mut scratch, flat);
            sum_all(&spci_forward(&x, &scratch, Mode::Eval, 0).unwrap().out)
        };
        let coarse = finite_diff_grad(&mut loss, &theta, 1e-3);
        let fine = finite_diff_grad(&mut loss, &theta, 1e-4);
        let worst = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| rel_err(*a, *b))
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "h instability {worst:e}");
    }
}
