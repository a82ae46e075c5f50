//! Dataset files.
//!
//! JSONL: one [`SampleRecord`] per line.
//!
//! Binary (all little endian): `N: u64`, `d: u64`, then `N*d` row-major `f64`
//! features, `N` class ids as `u64`, `N` domain bytes (0 source, 1 target), `N`
//! labeled bytes (0/1), `N` split bytes (0 train, 1 val, 2 test).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Domain, FeatureDataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub domain: Domain,
    pub labeled: bool,
    pub split: Split,
}

pub fn write_jsonl(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..ds.len() {
        let rec = SampleRecord {
            features: ds.features.row(i).to_vec(),
            class_id: ds.class_ids[i],
            domain: ds.domain,
            labeled: ds.labeled_mask[i],
            split: ds.splits[i],
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<FeatureDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        records.push(rec);
    }
    let format_err = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let first = records
        .first()
        .ok_or_else(|| format_err("no samples".into()))?;
    let (domain, d) = (first.domain, first.features.len());
    let mut flat = Vec::with_capacity(records.len() * d);
    for (line, r) in records.iter().enumerate() {
        if r.features.len() != d || r.domain != domain {
            return Err(format_err(format!(
                "record {line} disagrees with the first record on dimension or domain"
            )));
        }
        flat.extend_from_slice(&r.features);
    }
    let features = Array2::from_shape_vec((records.len(), d), flat)
        .map_err(|e| format_err(e.to_string()))?;
    FeatureDataset::new(
        features,
        records.iter().map(|r| r.class_id).collect(),
        domain,
        records.iter().map(|r| r.labeled).collect(),
        records.iter().map(|r| r.split).collect(),
    )
}

fn domain_byte(d: Domain) -> u8 {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

fn split_byte(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

pub fn to_binary_bytes(ds: &FeatureDataset) -> Vec<u8> {
    let (n, d) = ds.features.dim();
    let mut out = Vec::with_capacity(16 + n * d * 8 + n * 11);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in ds.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &c in &ds.class_ids {
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    out.extend(std::iter::repeat_n(domain_byte(ds.domain), n));
    out.extend(ds.labeled_mask.iter().map(|&l| u8::from(l)));
    out.extend(ds.splits.iter().map(|&s| split_byte(s)));
    out
}

/// Little-endian cursor shared with the parameter checkpoint format.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn finish(&self) -> std::result::Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

pub fn from_binary_bytes(buf: &[u8]) -> std::result::Result<FeatureDataset, String> {
    let mut r = ByteReader::new(buf);
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let len = n.checked_mul(d).ok_or("header overflow")?;
    let mut flat = Vec::with_capacity(len.min(buf.len() / 8));
    for _ in 0..len {
        flat.push(r.f64()?);
    }
    let class_ids = (0..n).map(|_| r.u64().map(|c| c as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let domains = r.take(n)?;
    let domain = match domains.first().copied().unwrap_or(1) {
        0 => Domain::Source,
        1 => Domain::Target,
        b => return Err(format!("bad domain byte {b}")),
    };
    if domains.iter().any(|&b| b != domain_byte(domain)) {
        return Err("mixed domains in one dataset".into());
    }
    let labeled = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("bad labeled byte {b}")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let splits = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            b => Err(format!("bad split byte {b}")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    let features = Array2::from_shape_vec((n, d), flat).map_err(|e| e.to_string())?;
    FeatureDataset::new(features, class_ids, domain, labeled, splits).map_err(|e| e.to_string())
}

pub fn write_binary(ds: &FeatureDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_binary_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: &Path) -> Result<FeatureDataset> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_binary_bytes(&buf).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the binary encoding, hex encoded.
pub fn dataset_digest(ds: &FeatureDataset) -> String {
    hex(&Sha256::digest(to_binary_bytes(ds)))
}
