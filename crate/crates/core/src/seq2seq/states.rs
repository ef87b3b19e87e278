//! Hidden-state matrices and the HSD dump format.
//!
//! HSD layout (little-endian): magic `HSD1`, `u32` width, `u32` record count,
//! then per record `u32` sentence id, `u32` row count and `rows × width`
//! `f32` values in row-major order.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const HSD_MAGIC: &[u8; 4] = b"HSD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enc" | "encoder" => Ok(Side::Encoder),
            "dec" | "decoder" => Ok(Side::Decoder),
            _ => Err(Error::Config(format!("unknown side {s:?} (expected enc or dec)"))),
        }
    }
}

/// One hidden vector per subword position of a sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMatrix {
    pub side: Side,
    pub sentence_id: u32,
    dim: usize,
    data: Vec<f32>,
}

impl StateMatrix {
    pub fn new(side: Side, sentence_id: u32, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::EmptyInput("state matrix"));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len() % dim,
                context: "state matrix buffer",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite hidden state".into()));
        }
        Ok(StateMatrix {
            side,
            sentence_id,
            dim,
            data,
        })
    }

    /// Rounds a computed `f64` matrix to storage precision.
    pub fn from_mat(side: Side, sentence_id: u32, m: &Mat) -> Result<Self> {
        Self::new(
            side,
            sentence_id,
            m.cols(),
            m.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows(), self.dim, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Column-wise mean of the rows.
    pub fn average(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        for i in 0..self.rows() {
            for (a, &v) in acc.iter_mut().zip(self.row(i)) {
                *a += f64::from(v);
            }
        }
        let n = self.rows() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

pub fn write_hsd(path: &Path, dim: usize, records: &[StateMatrix]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(HSD_MAGIC).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u32).to_le_bytes()).map_err(io)?;
    for r in records {
        if r.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: r.dim,
                context: "HSD record width",
            });
        }
        w.write_all(&r.sentence_id.to_le_bytes()).map_err(io)?;
        w.write_all(&(r.rows() as u32).to_le_bytes()).map_err(io)?;
        for v in &r.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(path, format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads an HSD file; the side is not stored in the format and is supplied
/// by the caller.
pub fn read_hsd(path: &Path, side: Side) -> Result<(usize, Vec<StateMatrix>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(path, format!("missing header: {e}")))?;
    if &magic != HSD_MAGIC {
        return Err(Error::format(path, "bad magic, expected HSD1"));
    }
    let dim = read_u32(&mut r, path)? as usize;
    let count = read_u32(&mut r, path)? as usize;
    if dim == 0 {
        return Err(Error::format(path, "zero state width"));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = read_u32(&mut r, path)?;
        let rows = read_u32(&mut r, path)? as usize;
        let mut buf = vec![0u8; rows * dim * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::format(path, format!("truncated record {id}: {e}")))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records
            .push(StateMatrix::new(side, id, dim, data).map_err(|e| Error::format(path, format!("record {id}: {e}")))?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok((dim, records))
}
