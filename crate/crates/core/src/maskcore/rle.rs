//! COCO-style run-length encoding.
//!
//! Runs are taken in column-major order and alternate background and
//! foreground, always starting with a (possibly zero-length) background run.
//! Both the plain integer list and the compact COCO string form are read;
//! the integer list is written.

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Runs(Vec<u64>),
    Compressed(String),
}

impl Rle {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// The run list, decompressing the string form if needed.
    pub fn runs(&self) -> Result<Vec<u64>> {
        match &self.counts {
            RleCounts::Runs(r) => Ok(r.clone()),
            RleCounts::Compressed(s) => decompress(s),
        }
    }

    /// Foreground pixel count.
    pub fn area(&self) -> Result<u64> {
        Ok(self.runs()?.iter().skip(1).step_by(2).sum())
    }

    /// Same encoding with the counts in the compact string form.
    pub fn compressed(&self) -> Result<Rle> {
        Ok(Rle {
            size: self.size,
            counts: RleCounts::Compressed(compress(&self.runs()?)),
        })
    }
}

pub fn encode(m: &BinaryMask) -> Rle {
    let (h, w) = m.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..w {
        for r in 0..h {
            let v = m.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts: RleCounts::Runs(counts),
    }
}

pub fn decode(rle: &Rle) -> Result<BinaryMask> {
    let (h, w) = (rle.height(), rle.width());
    if h == 0 || w == 0 {
        return Err(Error::Format {
            offset: 0,
            message: format!("rle size {h}x{w} has a zero dimension"),
        });
    }
    let runs = rle.runs()?;
    let total: u64 = runs.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::Format {
            offset: 0,
            message: format!("rle runs cover {total} pixels, expected {}", h * w),
        });
    }
    let mut mask = BinaryMask::new(h, w);
    let mut idx = 0usize;
    for (k, &run) in runs.iter().enumerate() {
        let fg = k % 2 == 1;
        for _ in 0..run {
            if fg {
                mask.set(idx % h, idx / h, true);
            }
            idx += 1;
        }
    }
    Ok(mask)
}

/// COCO string compression: delta-coded runs in 5-bit groups offset by 48.
pub fn compress(runs: &[u64]) -> String {
    let mut out = String::new();
    for (i, &run) in runs.iter().enumerate() {
        let mut x = run as i64;
        if i > 2 {
            x -= runs[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn decompress(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut runs: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::Format {
                    offset: p,
                    message: "truncated compressed rle".into(),
                });
            };
            if !(48..48 + 64).contains(&b) || k > 12 {
                return Err(Error::Format {
                    offset: p,
                    message: format!("invalid rle character {:?}", b as char),
                });
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        let m = runs.len();
        if m > 2 {
            x += runs[m - 2];
        }
        if x < 0 {
            return Err(Error::Format {
                offset: p,
                message: "negative run length".into(),
            });
        }
        runs.push(x);
    }
    Ok(runs.into_iter().map(|x| x as u64).collect())
}
