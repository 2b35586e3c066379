//! Definitional convolution, kept deliberately naive: scalar loops over
//! every output element and kernel cell, double precision only, no shared
//! code with the production im2col path. Agreement between the two is
//! evidence, not tautology.

use crate::error::Result;
use crate::layers::ConvLayer;
use crate::tensor::Tensor;

pub fn naive_conv_oracle(x: &Tensor<f64>, layer: &ConvLayer<f64>) -> Result<Tensor<f64>> {
    let s = x.shape();
    if s.c != layer.c_in() {
        return Err(crate::error::Error::shape(
            "naive_conv_oracle",
            format!("C_in {}", layer.c_in()),
            s,
        ));
    }
    let k = layer.k();
    let pad = layer.padding() as isize;
    let mut out = Tensor::zeros(crate::tensor::Shape::new(s.n, layer.c_out(), s.h, s.w));
    for n in 0..s.n {
        for co in 0..layer.c_out() {
            for oy in 0..s.h {
                for ox in 0..s.w {
                    let mut acc = layer.bias()[co];
                    for ci in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad;
                                let ix = ox as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += x.at(n, ci, iy as usize, ix as usize)
                                    * layer.weight().at(co, ci, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(n, co, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}
