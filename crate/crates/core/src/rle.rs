//! Row-major run-length encoding of boolean masks.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// `runs` alternate between the value in `starts_with` and its negation;
/// they are all positive and sum to `width * height`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub starts_with: u8,
    pub runs: Vec<u32>,
}

impl MaskRle {
    pub fn encode(width: u32, height: u32, mask: &[bool]) -> Result<Self> {
        if mask.len() != (width as usize) * (height as usize) {
            return Err(contract(format!("{} mask values for {width}x{height}", mask.len())));
        }
        let mut runs = Vec::new();
        let mut iter = mask.iter();
        let first = iter.next().copied().unwrap_or(false);
        let (mut current, mut len) = (first, u32::from(!mask.is_empty()));
        for &m in iter {
            if m == current {
                len += 1;
            } else {
                runs.push(len);
                current = m;
                len = 1;
            }
        }
        if len > 0 {
            runs.push(len);
        }
        Ok(Self {
            width,
            height,
            starts_with: u8::from(first),
            runs,
        })
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        if self.starts_with > 1 {
            return Err(contract("startsWith must be 0 or 1"));
        }
        let n = (self.width as usize) * (self.height as usize);
        if self.runs.contains(&0) {
            return Err(contract("mask runs must be positive"));
        }
        let total: u64 = self.runs.iter().map(|&r| u64::from(r)).sum();
        if total != n as u64 {
            return Err(contract(format!("mask runs cover {total} pixels, expected {n}")));
        }
        let mut out = Vec::with_capacity(n);
        let mut v = self.starts_with == 1;
        for &r in &self.runs {
            out.extend(std::iter::repeat_n(v, r as usize));
            v = !v;
        }
        Ok(out)
    }

    pub fn count_set(&self) -> u64 {
        let skip = usize::from(self.starts_with == 0);
        self.runs.iter().skip(skip).step_by(2).map(|&r| u64::from(r)).sum()
    }
}
