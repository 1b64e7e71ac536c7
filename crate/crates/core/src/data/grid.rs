//! PNG export of image grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `round(v * 255)` with halves rounding up, clamped to the byte range.
pub fn to_byte(v: f32) -> u8 {
    (f64::from(v) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes `rows` of `[H,W,C]` images (C = 1 or 3) as one 8-bit PNG with
/// rows stacked top to bottom. Short rows are padded with black.
pub fn export_grid(rows: &[Vec<Tensor<f32>>], path: &Path) -> Result<()> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Argument("grid has no images".into()))?;
    let shape = first.shape().to_vec();
    let (h, w, c) = match shape[..] {
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => return Err(Error::shape(format!("grid images must be [H,W,1|3], got {shape:?}"))),
    };
    if let Some(bad) = rows.iter().flatten().find(|t| t.shape() != shape) {
        return Err(Error::shape(format!("mixed grid shapes {shape:?} and {:?}", bad.shape())));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (width, height) = (cols * w, rows.len() * h);
    let mut pixels = vec![0u8; width * height * c];
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            for y in 0..h {
                let dst = ((r * h + y) * width + k * w) * c;
                let src = y * w * c;
                for (d, &v) in pixels[dst..dst + w * c].iter_mut().zip(&img.data()[src..src + w * c]) {
                    *d = to_byte(v);
                }
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}
