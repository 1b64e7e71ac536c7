//! Dataset files, weight persistence and image grids.

pub mod cifar;
pub mod grid;
pub mod idx;
pub mod split;
pub mod weights;

pub use cifar::{interleaved_to_planar, load_cifar_bin, parse_cifar_bin, planar_to_interleaved, CIFAR_RECORD};
pub use grid::{export_grid, to_byte};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use split::{scale, seeded_subset, stratified_sample, DatasetSplit, RawImages};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHT_MAGIC, WEIGHT_VERSION};

use crate::error::{Error, Result};

/// Bounds-checked reader over a byte slice that reports offsets in errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u16_le(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}
