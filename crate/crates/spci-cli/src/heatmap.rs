//! Attention maps rendered as binary portable graymaps (P5): two-byte
//! magic, ASCII dimensions, maxval 255, then one raw byte per pixel.
//! Weights live in (0,1) and map linearly via round(v*255).

use spci::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapSource {
    ChannelStrip,
    SpatialPlane,
    PerChannelPlane,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub source: HeatmapSource,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

impl Heatmap {
    /// Channel weights [N,C,1,1] for one sample, as a 1-pixel-tall strip.
    pub fn from_channel_strip<T: Scalar>(w_s: &Tensor<T>, n: usize) -> Heatmap {
        let c = w_s.shape().c;
        Heatmap {
            source: HeatmapSource::ChannelStrip,
            width: c,
            height: 1,
            pixels: (0..c).map(|i| to_byte(w_s.at(n, i, 0, 0))).collect(),
        }
    }

    /// Spatial weights [N,1,H,W] for one sample.
    pub fn from_spatial_plane<T: Scalar>(w_p: &Tensor<T>, n: usize) -> Heatmap {
        let s = w_p.shape();
        let mut pixels = Vec::with_capacity(s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                pixels.push(to_byte(w_p.at(n, 0, y, x)));
            }
        }
        Heatmap {
            source: HeatmapSource::SpatialPlane,
            width: s.w,
            height: s.h,
            pixels,
        }
    }

    /// One channel plane of full-tensor weights [N,C,H,W].
    pub fn from_channel_plane<T: Scalar>(w_c: &Tensor<T>, n: usize, c: usize) -> Heatmap {
        let s = w_c.shape();
        let mut pixels = Vec::with_capacity(s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                pixels.push(to_byte(w_c.at(n, c, y, x)));
            }
        }
        Heatmap {
            source: HeatmapSource::PerChannelPlane,
            width: s.w,
            height: s.h,
            pixels,
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}
