//! Binary head checkpoints, in the dataset file layout: `C: u64`, `d: u64`, `C*d`
//! row-major `f64` weights, then `C` bias values, the temperature as `f64` and the
//! cosine flag as one byte. All little endian.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::ClassifierParams;
use crate::datagen::ByteReader;
use crate::error::{Error, Result};

pub fn params_to_bytes(p: &ClassifierParams) -> Vec<u8> {
    let (c, d) = p.weights.dim();
    let mut out = Vec::with_capacity(16 + (c * d + c + 1) * 8 + 1);
    out.extend_from_slice(&(c as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in p.weights.iter().chain(p.bias.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&p.temperature.to_le_bytes());
    out.push(u8::from(p.cosine_mode));
    out
}

pub fn params_from_bytes(buf: &[u8]) -> std::result::Result<ClassifierParams, String> {
    let mut r = ByteReader::new(buf);
    let c = r.u64()? as usize;
    let d = r.u64()? as usize;
    let weights = (0..c.checked_mul(d).ok_or("header overflow")?)
        .map(|_| r.f64())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let bias = (0..c).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
    let temperature = r.f64()?;
    let cosine_mode = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(format!("bad cosine flag {b}")),
    };
    r.finish()?;
    if !(temperature > 0.0) {
        return Err(format!("nonpositive temperature {temperature}"));
    }
    Ok(ClassifierParams {
        weights: Array2::from_shape_vec((c, d), weights).map_err(|e| e.to_string())?,
        bias: Array1::from(bias),
        temperature,
        cosine_mode,
    })
}

pub fn write_params(p: &ClassifierParams, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ClassifierParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&buf).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}
