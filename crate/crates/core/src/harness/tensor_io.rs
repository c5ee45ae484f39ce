//! Binary Q/K/V dumps.
//!
//! ```text
//! QKV <version> <heads> <S> <d>\n
//! <magic: 1.0f32 little-endian>
//! per head: Q, K, V as S·d little-endian f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::attention::{AttentionHead, HeadSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: f32 = 1.0;
const MAX_HEADER_LEN: usize = 256;

/// Header fields of a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u32,
    pub heads: usize,
    pub seq_len: usize,
    pub d: usize,
}

impl TensorHeader {
    pub fn payload_values(&self) -> Option<usize> {
        self.heads
            .checked_mul(3)?
            .checked_mul(self.seq_len)?
            .checked_mul(self.d)
    }
}

/// Serialises a head set. Values are stored as f32; inputs that are not
/// exactly representable are rounded to nearest.
pub fn encode_tensors(heads: &HeadSet) -> Result<Vec<u8>> {
    let (s, d) = (heads.seq_len(), heads.dim());
    let header = format!("QKV {FORMAT_VERSION} {} {s} {d}\n", heads.len());
    let mut out = Vec::with_capacity(header.len() + 4 + 12 * heads.len() * s * d);
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    for head in heads.heads() {
        for m in [&head.q, &head.k, &head.v] {
            for &x in m.as_slice() {
                let y = x as f32;
                if !y.is_finite() {
                    return Err(Error::invalid(format!(
                        "value {x} in head {} does not fit in f32",
                        head.head_id
                    )));
                }
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_tensors(heads: &HeadSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensors(heads)?)?;
    Ok(())
}

pub fn parse_header(bytes: &[u8]) -> Result<(TensorHeader, usize)> {
    let limit = bytes.len().min(MAX_HEADER_LEN);
    let Some(nl) = bytes[..limit].iter().position(|&b| b == b'\n') else {
        return Err(Error::format(limit, "header line not terminated by newline"));
    };
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|e| Error::format(e.valid_up_to(), "header is not ASCII"))?;
    let fields = split_with_offsets(line);
    if fields.first().map(|f| f.1) != Some("QKV") {
        return Err(Error::format(0, "missing QKV tag"));
    }
    if fields.len() != 5 {
        return Err(Error::format(
            0,
            format!("expected `QKV <version> <heads> <S> <d>`, got {} fields", fields.len()),
        ));
    }
    let offset_of = |i: usize| fields[i].0;
    let num = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .1
            .parse::<usize>()
            .map_err(|_| Error::format(offset_of(i), format!("bad {name} `{}`", fields[i].1)))
    };
    let version = num(1, "version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::format(offset_of(1), format!("unsupported version {version}")));
    }
    let header = TensorHeader {
        version: FORMAT_VERSION,
        heads: num(2, "head count")?,
        seq_len: num(3, "sequence length")?,
        d: num(4, "head dimension")?,
    };
    for (i, v) in [(2, header.heads), (3, header.seq_len), (4, header.d)] {
        if v == 0 {
            return Err(Error::format(offset_of(i), "dimensions must be at least 1"));
        }
    }
    Ok((header, nl + 1))
}

fn split_with_offsets(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices().chain([(line.len(), ' ')]) {
        match (c.is_ascii_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(lo)) => {
                out.push((lo, &line[lo..i]));
                start = None;
            }
            _ => {}
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<HeadSet> {
    let (header, mut pos) = parse_header(bytes)?;
    let magic = bytes
        .get(pos..pos + 4)
        .ok_or_else(|| Error::format(bytes.len(), "truncated before magic value"))?;
    let magic: [u8; 4] = magic.try_into().expect("4 bytes");
    if f32::from_le_bytes(magic) != MAGIC {
        let why = if f32::from_be_bytes(magic) == MAGIC {
            "magic value is big-endian; payload must be little-endian"
        } else {
            "bad magic value"
        };
        return Err(Error::format(pos, why));
    }
    pos += 4;
    let n = header
        .payload_values()
        .ok_or_else(|| Error::format(0, "declared dimensions overflow"))?;
    let expected_end = n
        .checked_mul(4)
        .and_then(|b| b.checked_add(pos))
        .ok_or_else(|| Error::format(0, "declared dimensions overflow"))?;
    if bytes.len() < expected_end {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: expected {expected_end} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected_end {
        return Err(Error::format(expected_end, "trailing bytes after payload"));
    }
    let per = header.seq_len * header.d;
    let read_matrix = |pos: &mut usize| -> Result<Matrix> {
        let mut data = Vec::with_capacity(per);
        for chunk in bytes[*pos..*pos + 4 * per].chunks_exact(4) {
            let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !x.is_finite() {
                return Err(Error::format(
                    *pos + 4 * data.len(),
                    format!("non-finite value {x}"),
                ));
            }
            data.push(f64::from(x));
        }
        *pos += 4 * per;
        Matrix::new(header.seq_len, header.d, data)
    };
    let heads = (0..header.heads)
        .map(|h| {
            let q = read_matrix(&mut pos)?;
            let k = read_matrix(&mut pos)?;
            let v = read_matrix(&mut pos)?;
            AttentionHead::new(q, k, v, h)
        })
        .collect::<Result<Vec<_>>>()?;
    HeadSet::new(heads)
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<HeadSet> {
    decode_tensors(&fs::read(path)?)
}
