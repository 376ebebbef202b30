//! Tensor container files.
//!
//! Layout: a little-endian `u32` header length, a JSON header
//! `{"shape": [...], "dtype": "f32"|"i8", "polarity": ...}`, then the raw
//! value blob. Dense tensors store `f32` little-endian; spike tensors
//! store `i8`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spike::{Polarity, SpikeTensor};
use crate::tensor::DenseTensor;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    polarity: Option<Polarity>,
}

fn write_container(path: &Path, header: &Header, blob: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let head = serde_json::to_vec(header)?;
    w.write_all(&(head.len() as u32).to_le_bytes())?;
    w.write_all(&head)?;
    w.write_all(blob)?;
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|_| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        detail: "file shorter than header length prefix".into(),
    })?;
    let head_len = u32::from_le_bytes(len_bytes) as usize;
    let mut head = vec![0u8; head_len];
    r.read_exact(&mut head).map_err(|_| Error::Format {
        path: path.display().to_string(),
        offset: 4,
        detail: format!("truncated JSON header (expected {head_len} bytes)"),
    })?;
    let header: Header = serde_json::from_slice(&head).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 4,
        detail: format!("bad header JSON: {e}"),
    })?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    Ok((header, blob))
}

/// Writes a dense tensor; values are narrowed to `f32`.
pub fn write_dense(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        polarity: None,
    };
    let mut blob = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_container(path.as_ref(), &header, &blob)
}

pub fn read_dense(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let (header, blob) = read_container(path)?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 4,
            detail: format!("expected dtype f32, found {}", header.dtype),
        });
    }
    let want: usize = header.shape.iter().product();
    if blob.len() != want * 4 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 4 + blob.len() as u64,
            detail: format!("blob holds {} bytes, want {}", blob.len(), want * 4),
        });
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DenseTensor::from_vec(&header.shape, data)
}

/// Writes a spike tensor as `i8`, recording polarity in the header.
pub fn write_spikes(path: impl AsRef<Path>, t: &SpikeTensor) -> Result<()> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "i8".into(),
        polarity: Some(t.polarity()),
    };
    let blob: Vec<u8> = t.values().iter().map(|v| *v as u8).collect();
    write_container(path.as_ref(), &header, &blob)
}

pub fn read_spikes(path: impl AsRef<Path>) -> Result<SpikeTensor> {
    let path = path.as_ref();
    let (header, blob) = read_container(path)?;
    if header.dtype != "i8" {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 4,
            detail: format!("expected dtype i8, found {}", header.dtype),
        });
    }
    let polarity = header.polarity.unwrap_or(Polarity::Ternary);
    let values: Vec<i8> = blob.iter().map(|b| *b as i8).collect();
    SpikeTensor::from_values(&header.shape, values, polarity)
}
