//! CIFAR-10 binary batches: one label byte then 1024 R, 1024 G, 1024 B bytes.

use std::fs;
use std::path::Path;

use super::split::RawImages;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
const PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + 3 * PLANE;

/// Channel-planar `RRR..GGG..BBB..` to row-major `RGBRGB..`.
pub fn planar_to_interleaved(planar: &[u8]) -> Vec<u8> {
    let plane = planar.len() / 3;
    let mut out = vec![0; planar.len()];
    for i in 0..plane {
        for c in 0..3 {
            out[i * 3 + c] = planar[c * plane + i];
        }
    }
    out
}

pub fn interleaved_to_planar(interleaved: &[u8]) -> Vec<u8> {
    let plane = interleaved.len() / 3;
    let mut out = vec![0; interleaved.len()];
    for i in 0..plane {
        for c in 0..3 {
            out[c * plane + i] = interleaved[i * 3 + c];
        }
    }
    out
}

/// Labels and interleaved pixels of every record in one batch file.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!("size {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3 * PLANE);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format((i * CIFAR_RECORD) as u64, format!("label {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend(planar_to_interleaved(&rec[1..]));
    }
    Ok((labels, pixels))
}

/// Concatenates the given batch files as `N x 32 x 32 x 3` bytes.
pub fn load_cifar_bin<P: AsRef<Path>>(batch_paths: &[P]) -> Result<RawImages> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in batch_paths {
        let (l, px) = parse_cifar_bin(&fs::read(p)?)?;
        labels.extend(l);
        pixels.extend(px);
    }
    Ok(RawImages { count: labels.len(), height: CIFAR_SIDE, width: CIFAR_SIDE, channels: 3, pixels, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_record_decodes_by_hand() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(10, PLANE));
        rec.extend(std::iter::repeat_n(20, PLANE));
        rec.extend(std::iter::repeat_n(30, PLANE));
        rec[1 + 33] = 11; // R at row 1, col 1
        rec[1 + 2 * PLANE + 33] = 33; // B at row 1, col 1
        let (labels, px) = parse_cifar_bin(&rec).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(px.len(), 3072);
        assert_eq!(&px[0..3], &[10, 20, 30]);
        assert_eq!(&px[33 * 3..33 * 3 + 3], &[11, 20, 33]);
    }

    #[test]
    fn size_must_be_record_multiple() {
        assert!(matches!(parse_cifar_bin(&vec![0; CIFAR_RECORD + 5]), Err(Error::Format { .. })));
        assert!(parse_cifar_bin(&[]).is_err());
    }

    proptest! {
        #[test]
        fn interleave_round_trip(data in proptest::collection::vec(any::<u8>(), 1..40usize)) {
            let v: Vec<u8> = data.iter().cycle().take(data.len() * 3).copied().collect();
            prop_assert_eq!(planar_to_interleaved(&interleaved_to_planar(&v)), v.clone());
            prop_assert_eq!(interleaved_to_planar(&planar_to_interleaved(&v)), v);
        }
    }
}
