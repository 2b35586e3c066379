//! Single-tensor files: one ASCII header line `SPCT1 N C H W precision`,
//! then exactly N*C*H*W little-endian scalars in row-major order.

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::tensor::{Shape, Tensor};
use std::fs;
use std::path::Path;

pub const SPCT_MAGIC: &str = "SPCT1";

pub fn write_spct<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    let mut buf = Vec::with_capacity(32 + t.numel() * T::PRECISION.size());
    buf.extend_from_slice(
        format!(
            "{SPCT_MAGIC} {} {} {} {} {}\n",
            s.n,
            s.c,
            s.h,
            s.w,
            T::PRECISION.token()
        )
        .as_bytes(),
    );
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    fs::write(path, buf).map_err(|e| Error::io_at(path.display(), e))?;
    Ok(())
}

pub fn read_spct<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path.display(), e))?;
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::malformed(path.display(), "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::malformed(path.display(), "header is not ASCII text"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::malformed(
            path.display(),
            format!("header has {} fields, expected 6", fields.len()),
        ));
    }
    if fields[0] != SPCT_MAGIC {
        return Err(Error::malformed(
            path.display(),
            format!("bad magic {:?}", fields[0]),
        ));
    }
    let mut dims = [0usize; 4];
    for (slot, (text, name)) in dims
        .iter_mut()
        .zip(fields[1..5].iter().zip(["N", "C", "H", "W"]))
    {
        *slot = text.parse().map_err(|_| {
            Error::malformed(path.display(), format!("{name} extent {text:?} is not a number"))
        })?;
        if *slot == 0 {
            return Err(Error::malformed(path.display(), format!("{name} extent is zero")));
        }
    }
    let precision = Precision::from_token(fields[5])
        .ok_or_else(|| Error::malformed(path.display(), format!("unknown precision {:?}", fields[5])))?;
    if precision != T::PRECISION {
        return Err(Error::PrecisionMismatch {
            path: path.display().to_string(),
            expected: T::PRECISION,
            got: precision,
        });
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::malformed(path.display(), "extents overflow"))?;
    let expected = numel
        .checked_mul(precision.size())
        .ok_or_else(|| Error::malformed(path.display(), "payload size overflows"))?;
    let payload = &bytes[header_end + 1..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::malformed(
            path.display(),
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let data = payload
        .chunks_exact(precision.size())
        .map(T::read_le)
        .collect();
    Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)
}
