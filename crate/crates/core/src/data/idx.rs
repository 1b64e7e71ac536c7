//! MNIST IDX files.

use std::fs;
use std::path::Path;

use super::split::RawImages;
use super::Reader;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// `(count, rows, cols, pixels)` from an IDX3 image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("image file magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let pixels = r.take(n * rows * cols, "pixel data")?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("label file magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = r.u32_be("label count")? as usize;
    let start = r.offset();
    let labels = r.take(n, "label data")?.to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(start + i as u64, format!("label {} outside 0..=9", labels[i])));
    }
    Ok(labels)
}

/// Reads an image file and its label file as `N x rows x cols x 1` bytes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::format(4, format!("{n} images but {} labels", labels.len())));
    }
    Ok(RawImages { count: n, height: rows, width: cols, channels: 1, pixels, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_hand_built_records() {
        let px: Vec<u8> = (0..12).collect();
        let (n, r, c, p) = parse_idx_images(&images_file(3, 2, 2, &px)).unwrap();
        assert_eq!((n, r, c), (3, 2, 2));
        assert_eq!(p, px);
        let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 5, 9];
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![5, 9]);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut f = images_file(1, 1, 1, &[0]);
        assert!(matches!(parse_idx_labels(&f), Err(Error::Format { offset: 0, .. })));
        f[3] = 0x01;
        assert!(matches!(parse_idx_images(&f), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let f = images_file(2, 2, 2, &[1, 2, 3]);
        match parse_idx_images(&f) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lab = dir.path().join("l");
        std::fs::write(&img, images_file(2, 1, 1, &[0, 255])).unwrap();
        std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Format { .. })));
        std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 3, 12]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Format { offset: 9, .. })));
    }
}
