//! `MGWT` weight container.
//!
//! ```text
//! "MGWT"  u16 version
//! u32 metadata length, UTF-8 `key=value` lines
//! u32 parameter count
//! per parameter: u32 name length, name, u32 rank, rank x u32 dims, f32 data
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Reader;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{EpochStats, ModelSpec, TrainedModel};

pub const WEIGHT_MAGIC: &[u8; 4] = b"MGWT";
pub const WEIGHT_VERSION: u16 = 1;

pub fn write_weights<W: Write>(model: &TrainedModel<f32>, mut out: W) -> Result<()> {
    let spec = model.spec();
    let mut meta = format!(
        "dataset={}\nrole={}\nspec_hash={}\nseed={}\nepochs={}\n",
        spec.dataset,
        if spec.is_classifier() { "classifier" } else { "autoencoder" },
        spec.hash(),
        model.seed(),
        model.epochs_trained()
    );
    for h in model.history() {
        let acc = h.accuracy.map_or("-".to_string(), |a| a.to_string());
        meta.push_str(&format!("history.{}={},{},{}\n", h.epoch, h.loss, acc, h.examples));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(model.weights().len() as u32).to_le_bytes());
    for (name, t) in model.named_weights() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_weights(model: &TrainedModel<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_weights(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Decodes a container and binds it to `spec`, which must hash identically.
pub fn read_weights(spec: &ModelSpec, bytes: &[u8]) -> Result<TrainedModel<f32>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != WEIGHT_MAGIC {
        return Err(Error::format(0, "bad magic, not an MGWT file"));
    }
    let version = r.u16_le("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let meta_len = r.u32_le("metadata length")? as usize;
    let meta_at = r.offset();
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(meta_at, format!("metadata is not UTF-8: {e}")))?;

    let mut hash = None;
    let mut seed = 0;
    let mut history = Vec::new();
    for line in meta.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(meta_at, format!("metadata line {line:?} lacks '='")))?;
        match k {
            "spec_hash" => hash = Some(v),
            "seed" => seed = v.parse().map_err(|_| Error::format(meta_at, format!("bad seed {v:?}")))?,
            _ if k.starts_with("history.") => history.push(parse_history(k, v).ok_or_else(|| {
                Error::format(meta_at, format!("bad history line {line:?}"))
            })?),
            _ => {}
        }
    }
    match hash {
        Some(h) if h == spec.hash() => {}
        Some(h) => {
            return Err(Error::Validation(format!(
                "weights were saved for spec {h}, loading into {} ({})",
                spec.hash(),
                spec.canonical()
            )))
        }
        None => return Err(Error::format(meta_at, "metadata has no spec_hash")),
    }

    let count = r.u32_le("parameter count")? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32_le("name length")? as usize;
        let at = r.offset();
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
        let rank = r.u32_le("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32_le("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let at = r.offset();
        let data: Vec<f32> = r
            .take(n * 4, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        named.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    TrainedModel::from_parts(spec.clone(), named, history, seed)
}

fn parse_history(key: &str, value: &str) -> Option<EpochStats> {
    let epoch = key.strip_prefix("history.")?.parse().ok()?;
    let mut parts = value.split(',');
    let loss = parts.next()?.parse().ok()?;
    let accuracy = match parts.next()? {
        "-" => None,
        a => Some(a.parse().ok()?),
    };
    let examples = parts.next()?.parse().ok()?;
    Some(EpochStats { epoch, loss, accuracy, examples })
}

pub fn load_weights(spec: &ModelSpec, path: &Path) -> Result<TrainedModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::WeightFile { path: path.to_path_buf(), msg: e.to_string() })?;
    read_weights(spec, &bytes).map_err(|e| Error::WeightFile { path: path.to_path_buf(), msg: e.to_string() })
}
