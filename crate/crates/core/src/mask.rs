//! Run-length encoded binary masks.
//!
//! Runs are row-major and alternate zero/one, always starting with a
//! zero-run (which may be empty). `[0, 4]` is a full 2x2 mask, `[4]` an
//! empty one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

#[derive(Deserialize)]
struct RawMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl TryFrom<RawMask> for BinaryMask {
    type Error = Error;

    fn try_from(raw: RawMask) -> Result<Self> {
        BinaryMask::from_runs(raw.width, raw.height, raw.runs)
    }
}

impl BinaryMask {
    /// Builds a mask from its run lengths, checking that they cover the frame.
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = width as u64 * height as u64;
        if total != expected {
            return Err(Error::MalformedMask(format!(
                "runs sum to {total}, expected {width}x{height} = {expected}"
            )));
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Encodes a row-major bitmap. Any nonzero byte counts as set.
    pub fn encode(bitmap: &[u8], width: u32, height: u32) -> Result<Self> {
        let expected = width as usize * height as usize;
        if bitmap.len() != expected {
            return Err(Error::Dimension(format!(
                "bitmap has {} entries, expected {width}x{height} = {expected}",
                bitmap.len()
            )));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bitmap {
            let bit = b != 0;
            if bit != current {
                runs.push(len);
                len = 0;
                current = bit;
            }
            len += 1;
        }
        runs.push(len);
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bitmap = Vec::with_capacity(width as usize * height as usize);
        for v in 0..height {
            for u in 0..width {
                bitmap.push(f(u, v) as u8);
            }
        }
        Self::encode(&bitmap, width, height).expect("bitmap sized from dimensions")
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            runs: vec![width * height],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn decode(&self) -> Result<Vec<u8>> {
        let expected = self.width as usize * self.height as usize;
        let total: usize = self.runs.iter().map(|&r| r as usize).sum();
        if total != expected {
            return Err(Error::MalformedMask(format!(
                "runs sum to {total}, expected {expected}"
            )));
        }
        let mut out = Vec::with_capacity(expected);
        for (i, &run) in self.runs.iter().enumerate() {
            let bit = (i % 2) as u8;
            out.extend(std::iter::repeat(bit).take(run as usize));
        }
        Ok(out)
    }

    /// Half-open index ranges of set pixels, in row-major order.
    pub fn set_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let mut start = 0usize;
        self.runs.iter().enumerate().filter_map(move |(i, &run)| {
            let begin = start;
            start += run as usize;
            (i % 2 == 1 && run > 0).then_some(begin..start)
        })
    }

    /// Row-major indices of set pixels.
    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.set_ranges().flatten()
    }

    pub fn count_ones(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn get(&self, u: u32, v: u32) -> bool {
        if u >= self.width || v >= self.height {
            return false;
        }
        let idx = v as usize * self.width as usize + u as usize;
        let mut start = 0usize;
        for (i, &run) in self.runs.iter().enumerate() {
            start += run as usize;
            if idx < start {
                return i % 2 == 1;
            }
        }
        false
    }

    /// Number of pixels set in both masks.
    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_same_dims(other)?;
        let mut a = self.set_ranges().peekable();
        let mut b = other.set_ranges().peekable();
        let mut count = 0;
        while let (Some(ra), Some(rb)) = (a.peek(), b.peek()) {
            let lo = ra.start.max(rb.start);
            let hi = ra.end.min(rb.end);
            if lo < hi {
                count += hi - lo;
            }
            if ra.end <= rb.end {
                a.next();
            } else {
                b.next();
            }
        }
        Ok(count)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.combine(other, |a, b| a | b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.combine(other, |a, b| a & !b & 1)
    }

    fn combine(&self, other: &BinaryMask, op: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        let a = self.decode()?;
        let b = other.decode()?;
        let merged: Vec<u8> = a.iter().zip(&b).map(|(&x, &y)| op(x, y)).collect();
        BinaryMask::encode(&merged, self.width, self.height)
    }

    pub fn check_dims(&self, width: u32, height: u32) -> Result<()> {
        if self.dims() != (width, height) {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, frame is {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        other.check_dims(self.width, self.height)
    }
}
