//! Flat little-endian parameter snapshots.
//!
//! ```text
//! magic      4 bytes  "QSDW"
//! version    u32      1
//! layers     u32      number of dense layers L
//! sharing    u8       0 per_example, 1 per_batch
//! per hidden layer (L - 1 entries):
//!   mode     u8       0 none, 1 standard, 2 dist_p, 3 dist_q, 4 qsd
//!   drop     f64
//!   alpha    f64
//! per layer, weights then bias, each:
//!   ndim     u32
//!   dims     u32 x ndim
//!   values   f64 x product(dims), row-major
//! ```

use std::path::Path;

use super::{Dense, MlpModel, Tensor};
use crate::dilution::{DilutionConfig, DilutionMode, MaskSharing};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"QSDW";
const VERSION: u32 = 1;

pub fn encode_snapshot(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.parameter_count() * 8);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    out.push(model.sharing().code());
    for cfg in model.dilution() {
        out.push(cfg.mode().code());
        out.extend_from_slice(&cfg.drop_rate().to_le_bytes());
        out.extend_from_slice(&cfg.alpha().to_le_bytes());
    }
    for layer in model.layers() {
        for t in [&layer.weights, &layer.bias] {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn tensor(&mut self, field: &str) -> Result<Tensor> {
        let ndim = self.u32(field)? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(Error::format(self.path, field, format!("rank {ndim}")));
        }
        let dims = (0..ndim)
            .map(|_| self.u32(field).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = self.take(count * 8, field)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&dims, data).map_err(|e| Error::format(self.path, field, e.to_string()))
    }
}

pub fn decode_snapshot(bytes: &[u8], path: &Path) -> Result<MlpModel> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != SNAPSHOT_MAGIC {
        return Err(Error::format(path, "magic", "not a parameter snapshot"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let layers = r.u32("layer count")? as usize;
    if layers == 0 {
        return Err(Error::format(path, "layer count", "zero layers"));
    }
    let code = r.take(1, "mask sharing")?[0];
    let sharing = MaskSharing::from_code(code)
        .ok_or_else(|| Error::format(path, "mask sharing", format!("unknown code {code}")))?;
    let mut dilution = Vec::with_capacity(layers - 1);
    for h in 0..layers - 1 {
        let field = format!("dilution config {}", h + 1);
        let code = r.take(1, &field)?[0];
        let mode = DilutionMode::from_code(code)
            .ok_or_else(|| Error::format(path, &field, format!("unknown mode code {code}")))?;
        let drop = r.f64(&field)?;
        let alpha = r.f64(&field)?;
        dilution.push(
            DilutionConfig::new(mode, drop, alpha)
                .map_err(|e| Error::format(path, &field, e.to_string()))?,
        );
    }
    let mut dense = Vec::with_capacity(layers);
    for l in 0..layers {
        let weights = r.tensor(&format!("layer {} weights", l + 1))?;
        let bias = r.tensor(&format!("layer {} bias", l + 1))?;
        dense.push(Dense { weights, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            "trailer",
            "unexpected bytes after last tensor",
        ));
    }
    let mut model = MlpModel::from_layers(dense, dilution)
        .map_err(|e| Error::format(path, "layers", e.to_string()))?;
    model.set_sharing(sharing);
    Ok(model)
}

/// Writes atomically: the snapshot goes to a sibling temp file first.
pub fn write_snapshot(model: &MlpModel, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode_snapshot(model))
}

pub fn read_snapshot(path: &Path) -> Result<MlpModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes, path)
}
