//! 8-bit grayscale PGM (P5) export of probability matrices and masks.
//!
//! Probabilities are drawn on a log scale from `LOG_FLOOR` (black) to 1
//! (white); masks are white where active. Downsampling max-pools square
//! cells of `downsample × downsample` entries.

use std::fs;
use std::path::Path;

use crate::attention::{probability_row, AttentionHead};
use crate::cra::AttentionMask;
use crate::error::{Error, Result};
use crate::filtering::BlockMask;
use crate::matrix::Matrix;

pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }

    /// Parses a binary PGM with maxval 255. Comments are not supported.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = |what: &str| -> Result<(usize, &[u8])> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(start, format!("missing {what}")));
            }
            Ok((start, &bytes[start..pos]))
        };
        let (at, magic) = token("magic")?;
        if magic != b"P5" {
            return Err(Error::format(at, "not a binary PGM (P5)"));
        }
        let mut num = |what: &str| -> Result<usize> {
            let (at, t) = token(what)?;
            std::str::from_utf8(t)
                .ok()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::format(at, format!("bad {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::format(0, format!("maxval {maxval} unsupported")));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let end = start + width * height;
        if bytes.len() < end {
            return Err(Error::format(bytes.len(), "truncated raster"));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[start..end].to_vec(),
        })
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }
}

fn check_downsample(downsample: usize) -> Result<()> {
    if downsample == 0 {
        return Err(Error::invalid("downsample factor must be at least 1"));
    }
    Ok(())
}

fn gray_of_probability(p: f64) -> u8 {
    if p <= 0.0 {
        return 0;
    }
    let t = (p.max(LOG_FLOOR).log10() - LOG_FLOOR.log10()) / -LOG_FLOOR.log10();
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Max-pooled grid of `f(i)` rows fed one at a time.
struct Pool {
    n: usize,
    ds: usize,
    cells: Vec<f64>,
}

impl Pool {
    fn new(rows: usize, cols: usize, ds: usize) -> (Self, usize) {
        let w = cols.div_ceil(ds);
        let h = rows.div_ceil(ds);
        (
            Self {
                n: w,
                ds,
                cells: vec![0.0; w * h],
            },
            h,
        )
    }

    fn add_row(&mut self, i: usize, row: &[f64]) {
        let base = (i / self.ds) * self.n;
        for (j, &x) in row.iter().enumerate() {
            let c = &mut self.cells[base + j / self.ds];
            if x > *c {
                *c = x;
            }
        }
    }
}

/// Heatmap of a probability matrix.
pub fn probability_image(p: &Matrix, downsample: usize) -> Result<GrayImage> {
    check_downsample(downsample)?;
    let (mut pool, height) = Pool::new(p.rows(), p.cols(), downsample);
    for i in 0..p.rows() {
        pool.add_row(i, p.row(i));
    }
    Ok(GrayImage {
        width: pool.n,
        height,
        pixels: pool.cells.iter().map(|&x| gray_of_probability(x)).collect(),
    })
}

/// Heatmap of a head's dense causal probabilities, computed one row at a
/// time.
pub fn head_probability_image(head: &AttentionHead, downsample: usize) -> Result<GrayImage> {
    check_downsample(downsample)?;
    let s = head.seq_len();
    let (mut pool, height) = Pool::new(s, s, downsample);
    let mut buf = Vec::with_capacity(s);
    for i in 0..s {
        probability_row(head, i, &mut buf);
        pool.add_row(i, &buf);
    }
    Ok(GrayImage {
        width: pool.n,
        height,
        pixels: pool.cells.iter().map(|&x| gray_of_probability(x)).collect(),
    })
}

/// Entry-level picture of a mask: white where some entry in the cell is
/// active.
pub fn mask_image(mask: &dyn AttentionMask, downsample: usize) -> Result<GrayImage> {
    check_downsample(downsample)?;
    let s = mask.seq_len();
    let w = s.div_ceil(downsample);
    let mut pixels = vec![0u8; w * w];
    for q in 0..s {
        let base = (q / downsample) * w;
        mask.for_each_active_run(q, &mut |lo, hi| {
            for x in lo / downsample..=(hi - 1) / downsample {
                pixels[base + x] = 255;
            }
        });
    }
    Ok(GrayImage {
        width: w,
        height: w,
        pixels,
    })
}

/// Rebuilds a block mask from a full-resolution mask image: a block is
/// active when any of its pixels is brighter than mid-gray.
pub fn block_mask_from_image(img: &GrayImage, blk: usize) -> Result<BlockMask> {
    if img.width != img.height {
        return Err(Error::shape(format!(
            "mask image must be square, got {}x{}",
            img.width, img.height
        )));
    }
    let s = img.width;
    let n = s.div_ceil(blk.max(1));
    let mut rows = vec![Vec::new(); n];
    for (qb, row) in rows.iter_mut().enumerate() {
        for kb in 0..=qb {
            let hit = (qb * blk..((qb + 1) * blk).min(s))
                .any(|y| (kb * blk..((kb + 1) * blk).min(s)).any(|x| img.get(x, y) > 127));
            if hit {
                row.push(kb);
            }
        }
    }
    BlockMask::new(s, blk, rows)
}
