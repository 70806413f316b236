use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two overlapping windows `[a1, b1)` and `[a2, b2)` of one series, with
/// `0 <= a1 <= a2 < b1 <= b2 <= T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropPair {
    pub a1: usize,
    pub b1: usize,
    pub a2: usize,
    pub b2: usize,
}

impl CropPair {
    pub fn window1(&self) -> Range<usize> {
        self.a1..self.b1
    }

    pub fn window2(&self) -> Range<usize> {
        self.a2..self.b2
    }

    /// Shared timestamps, in series coordinates.
    pub fn overlap(&self) -> Range<usize> {
        self.a2..self.b1
    }

    pub fn overlap_len(&self) -> usize {
        self.b1 - self.a2
    }

    /// Overlap expressed in window-1 coordinates.
    pub fn overlap_in_window1(&self) -> Range<usize> {
        self.a2 - self.a1..self.b1 - self.a1
    }

    /// Overlap expressed in window-2 coordinates.
    pub fn overlap_in_window2(&self) -> Range<usize> {
        0..self.b1 - self.a2
    }

    pub fn is_valid(&self, len: usize) -> bool {
        self.a1 <= self.a2 && self.a2 < self.b1 && self.b1 <= self.b2 && self.b2 <= len
    }
}

/// Draws uniformly among all valid crop pairs for a series of length `len`.
///
/// Valid pairs are in bijection with non-decreasing 4-tuples
/// `(a1, a2, b1 - 1, b2 - 1)` over `0..len`, which in turn map to 4-subsets
/// of `0..len + 3`.
pub fn random_crop<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<CropPair> {
    if len < 2 {
        return Err(Error::invalid("random_crop", format!("series length {len} < 2")));
    }
    let mut picks = rand::seq::index::sample(rng, len + 3, 4).into_vec();
    picks.sort_unstable();
    let x: Vec<usize> = picks.iter().enumerate().map(|(k, &c)| c - k).collect();
    Ok(CropPair {
        a1: x[0],
        a2: x[1],
        b1: x[2] + 1,
        b2: x[3] + 1,
    })
}
