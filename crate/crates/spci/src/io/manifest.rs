//! Attention-block weight manifests. A manifest is plain text: header lines
//! `c_in`, `c_out`, `r`, `c_mid_cdm`, `dropout`, `flags`, `bn_eps`,
//! `bn_momentum`, then one line per parameter tensor in the form
//! `layer.name NxCxHxW file.spct`. Tensor files live next to the manifest.
//!
//! Every tensor the block owns appears, disabled submodules included; the
//! `flags` line alone records which submodules run. Scalar header values are
//! printed with Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact end to end.

use crate::attention::{cdm_mid_channels, ssg_mid_channels, CdmParams, PfmParams, SpciParams, SsgParams};
use crate::error::{Error, Result};
use crate::io::spct::{read_spct, write_spct};
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

fn file_name_for(layer: &str) -> String {
    format!("{}.spct", layer.replace('.', "_"))
}

fn bias_tensor<T: Scalar>(bias: &[T]) -> Tensor<T> {
    Tensor::from_vec(Shape::new(1, bias.len(), 1, 1), bias.to_vec())
        .expect("bias length matches its own shape")
}

fn vec_tensor<T: Scalar>(v: &[T]) -> Tensor<T> {
    Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v.to_vec())
        .expect("vector length matches its own shape")
}

/// The manifest's tensor inventory for given widths, in file order.
/// Conv biases and batchnorm vectors are stored as [1,C,1,1].
fn inventory(c_in: usize, c_mid_ssg: usize, c_out: usize, c_mid_cdm: usize) -> Vec<(String, Shape)> {
    let conv = |name: &str, c_out: usize, c_in: usize, k: usize| {
        vec![
            (format!("{name}.weight"), Shape::new(c_out, c_in, k, k)),
            (format!("{name}.bias"), Shape::new(1, c_out, 1, 1)),
        ]
    };
    let bn = |name: &str, c: usize| {
        ["gamma", "beta", "running_mean", "running_var"]
            .into_iter()
            .map(|part| (format!("{name}.{part}"), Shape::new(1, c, 1, 1)))
            .collect::<Vec<_>>()
    };
    let mut out = Vec::new();
    out.extend(conv("ssg.conv1", c_mid_ssg, c_in, 1));
    out.extend(conv("ssg.conv2", c_in, c_mid_ssg, 1));
    out.extend(conv("transform", c_out, c_in, 1));
    out.extend(conv("pfm.conv7", 1, 2, 7));
    out.extend(conv("cdm.conv1", c_mid_cdm, c_out, 1));
    out.extend(bn("cdm.bn1", c_mid_cdm));
    out.extend(conv("cdm.conv2", c_mid_cdm, c_mid_cdm, 3));
    out.extend(bn("cdm.bn2", c_mid_cdm));
    out.extend(conv("cdm.conv3", c_out, c_mid_cdm, 1));
    out
}

fn collect_tensors<T: Scalar>(params: &SpciParams<T>) -> Vec<(String, Tensor<T>)> {
    let conv = |name: &str, layer: &ConvLayer<T>| {
        vec![
            (format!("{name}.weight"), layer.weight().clone()),
            (format!("{name}.bias"), bias_tensor(layer.bias())),
        ]
    };
    let bn = |name: &str, layer: &BatchNormLayer<T>| {
        vec![
            (format!("{name}.gamma"), vec_tensor(&layer.gamma)),
            (format!("{name}.beta"), vec_tensor(&layer.beta)),
            (format!("{name}.running_mean"), vec_tensor(&layer.running_mean)),
            (format!("{name}.running_var"), vec_tensor(&layer.running_var)),
        ]
    };
    let mut out = Vec::new();
    out.extend(conv("ssg.conv1", &params.ssg.conv1));
    out.extend(conv("ssg.conv2", &params.ssg.conv2));
    out.extend(conv("transform", &params.transform));
    out.extend(conv("pfm.conv7", &params.pfm.conv7));
    out.extend(conv("cdm.conv1", &params.cdm.conv1));
    out.extend(bn("cdm.bn1", &params.cdm.bn1));
    out.extend(conv("cdm.conv2", &params.cdm.conv2));
    out.extend(bn("cdm.bn2", &params.cdm.bn2));
    out.extend(conv("cdm.conv3", &params.cdm.conv3));
    out
}

pub fn save_spci<T: Scalar>(params: &SpciParams<T>, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let flag = |b: bool| if b { 1 } else { 0 };
    let mut text = String::new();
    writeln!(text, "c_in {}", params.c_in()).unwrap();
    writeln!(text, "c_out {}", params.c_out()).unwrap();
    writeln!(text, "r {}", params.ssg.reduction).unwrap();
    writeln!(text, "c_mid_cdm {}", params.cdm.conv1.c_out()).unwrap();
    writeln!(text, "dropout {}", params.dropout_rate).unwrap();
    writeln!(
        text,
        "flags ssg={} pfm={} cdm={}",
        flag(params.ssg_on),
        flag(params.pfm_on),
        flag(params.cdm_on)
    )
    .unwrap();
    writeln!(text, "bn_eps {}", params.cdm.bn1.eps.as_f64()).unwrap();
    writeln!(text, "bn_momentum {}", params.cdm.bn1.momentum.as_f64()).unwrap();
    for (name, tensor) in collect_tensors(params) {
        let file = file_name_for(&name);
        write_spct(&dir.join(&file), &tensor)?;
        writeln!(text, "{name} {} {file}", tensor.shape()).unwrap();
    }
    std::fs::write(manifest_path, text).map_err(|e| Error::io_at(manifest_path.display(), e))?;
    Ok(())
}

fn parse_shape(text: &str) -> Option<Shape> {
    let mut dims = [0usize; 4];
    let mut parts = text.split('x');
    for slot in &mut dims {
        *slot = parts.next()?.parse().ok()?;
        if *slot == 0 {
            return None;
        }
    }
    if parts.next().is_some() {
        return None;
    }
    Some(Shape::new(dims[0], dims[1], dims[2], dims[3]))
}

struct Header {
    c_in: usize,
    c_out: usize,
    r: usize,
    c_mid_cdm: usize,
    dropout: f64,
    flags: (bool, bool, bool),
    bn_eps: f64,
    bn_momentum: f64,
}

const HEADER_KEYS: [&str; 8] = [
    "c_in",
    "c_out",
    "r",
    "c_mid_cdm",
    "dropout",
    "flags",
    "bn_eps",
    "bn_momentum",
];

fn parse_flags(path: &Path, rest: &[&str]) -> Result<(bool, bool, bool)> {
    let mut ssg = None;
    let mut pfm = None;
    let mut cdm = None;
    for token in rest {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::malformed(path.display(), format!("flag token {token:?}")))?;
        let parsed = match value {
            "0" => false,
            "1" => true,
            _ => return Err(Error::malformed(path.display(), format!("flag value {token:?}"))),
        };
        let slot = match key {
            "ssg" => &mut ssg,
            "pfm" => &mut pfm,
            "cdm" => &mut cdm,
            _ => return Err(Error::malformed(path.display(), format!("unknown flag {key:?}"))),
        };
        if slot.replace(parsed).is_some() {
            return Err(Error::malformed(path.display(), format!("duplicate flag {key:?}")));
        }
    }
    match (ssg, pfm, cdm) {
        (Some(s), Some(p), Some(c)) => Ok((s, p, c)),
        _ => Err(Error::malformed(path.display(), "flags line must set ssg, pfm, cdm")),
    }
}

fn parse_manifest(path: &Path, text: &str) -> Result<(Header, HashMap<String, (Shape, String)>)> {
    let mut headers: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut tensors: HashMap<String, (Shape, String)> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let context = |detail: String| Error::malformed(path.display(), format!("line {}: {detail}", lineno + 1));
        if HEADER_KEYS.contains(&tokens[0]) {
            if headers.insert(tokens[0], tokens[1..].to_vec()).is_some() {
                return Err(context(format!("duplicate header {:?}", tokens[0])));
            }
            continue;
        }
        if tokens.len() != 3 {
            return Err(context(format!(
                "expected `layer.name NxCxHxW file`, got {line:?}"
            )));
        }
        let shape = parse_shape(tokens[1])
            .ok_or_else(|| context(format!("bad shape {:?}", tokens[1])))?;
        if tensors
            .insert(tokens[0].to_string(), (shape, tokens[2].to_string()))
            .is_some()
        {
            return Err(context(format!("duplicate tensor {:?}", tokens[0])));
        }
    }
    let scalar_header = |key: &str| -> Result<&str> {
        let tokens = headers
            .get(key)
            .ok_or_else(|| Error::malformed(path.display(), format!("missing header {key:?}")))?;
        if tokens.len() != 1 {
            return Err(Error::malformed(path.display(), format!("header {key:?} wants one value")));
        }
        Ok(tokens[0])
    };
    let usize_header = |key: &str| -> Result<usize> {
        scalar_header(key)?
            .parse()
            .map_err(|_| Error::malformed(path.display(), format!("header {key:?} is not an integer")))
    };
    let f64_header = |key: &str| -> Result<f64> {
        scalar_header(key)?
            .parse()
            .map_err(|_| Error::malformed(path.display(), format!("header {key:?} is not a number")))
    };
    let header = Header {
        c_in: usize_header("c_in")?,
        c_out: usize_header("c_out")?,
        r: usize_header("r")?,
        c_mid_cdm: usize_header("c_mid_cdm")?,
        dropout: f64_header("dropout")?,
        flags: parse_flags(
            path,
            headers
                .get("flags")
                .ok_or_else(|| Error::malformed(path.display(), "missing header \"flags\""))?,
        )?,
        bn_eps: f64_header("bn_eps")?,
        bn_momentum: f64_header("bn_momentum")?,
    };
    Ok((header, tensors))
}

pub fn load_spci<T: Scalar>(manifest_path: &Path) -> Result<SpciParams<T>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io_at(manifest_path.display(), e))?;
    let (header, lines) = parse_manifest(manifest_path, &text)?;
    if header.c_in == 0 || header.c_out == 0 || header.r == 0 {
        return Err(Error::malformed(manifest_path.display(), "zero width in header"));
    }
    if header.c_mid_cdm != cdm_mid_channels(header.c_out) {
        return Err(Error::ManifestShape {
            path: manifest_path.display().to_string(),
            detail: format!(
                "c_mid_cdm {} does not match c_out {} (want {})",
                header.c_mid_cdm,
                header.c_out,
                cdm_mid_channels(header.c_out)
            ),
        });
    }
    let c_mid_ssg = ssg_mid_channels(header.c_in, header.r);
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let expected = inventory(header.c_in, c_mid_ssg, header.c_out, header.c_mid_cdm);
    if lines.len() != expected.len() {
        let named: Vec<&String> = lines.keys().collect();
        return Err(Error::malformed(
            manifest_path.display(),
            format!(
                "manifest lists {} tensors, expected {} ({named:?})",
                lines.len(),
                expected.len()
            ),
        ));
    }
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::new();
    for (name, shape) in &expected {
        let (declared, file) = lines.get(name).ok_or_else(|| {
            Error::malformed(manifest_path.display(), format!("missing tensor {name:?}"))
        })?;
        if declared != shape {
            return Err(Error::ManifestShape {
                path: manifest_path.display().to_string(),
                detail: format!("{name} declared {declared}, wiring needs {shape}"),
            });
        }
        let tensor = read_spct(&dir.join(file))?;
        if tensor.shape() != *shape {
            return Err(Error::ManifestShape {
                path: manifest_path.display().to_string(),
                detail: format!("{name} file holds {}, manifest says {shape}", tensor.shape()),
            });
        }
        loaded.insert(name.clone(), tensor);
    }
    let mut take = |name: &str| loaded.remove(name).expect("inventory covered");
    let mut conv = |name: &str| -> Result<ConvLayer<T>> {
        let weight = take(&format!("{name}.weight"));
        let bias = take(&format!("{name}.bias")).into_vec();
        ConvLayer::new(weight, bias)
    };
    let ssg = SsgParams {
        conv1: conv("ssg.conv1")?,
        conv2: conv("ssg.conv2")?,
        reduction: header.r,
    };
    let transform = conv("transform")?;
    let pfm = PfmParams {
        conv7: conv("pfm.conv7")?,
    };
    let cdm_conv1 = conv("cdm.conv1")?;
    let cdm_conv2 = conv("cdm.conv2")?;
    let cdm_conv3 = conv("cdm.conv3")?;
    let mut bn = |name: &str| -> BatchNormLayer<T> {
        let mut layer = BatchNormLayer::new(header.c_mid_cdm);
        layer.gamma = take(&format!("{name}.gamma")).into_vec();
        layer.beta = take(&format!("{name}.beta")).into_vec();
        layer.running_mean = take(&format!("{name}.running_mean")).into_vec();
        layer.running_var = take(&format!("{name}.running_var")).into_vec();
        layer.eps = T::from_f64(header.bn_eps);
        layer.momentum = T::from_f64(header.bn_momentum);
        layer
    };
    let cdm = CdmParams {
        conv1: cdm_conv1,
        bn1: bn("cdm.bn1"),
        conv2: cdm_conv2,
        bn2: bn("cdm.bn2"),
        conv3: cdm_conv3,
    };
    let mut params = SpciParams::new(ssg, transform, pfm, cdm, header.dropout).map_err(|e| {
        Error::ManifestShape {
            path: manifest_path.display().to_string(),
            detail: format!("wiring rejected: {e}"),
        }
    })?;
    params.ssg_on = header.flags.0;
    params.pfm_on = header.flags.1;
    params.cdm_on = header.flags.2;
    Ok(params)
}
