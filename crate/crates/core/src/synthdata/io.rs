//! Binary containers and dataset files.
//!
//! Feature file: `ZSLAFEAT`, then little-endian u32 version, W, H, C, N and
//! `N·W·H·C` f32 values. Checkpoints share a second layout: 8-byte magic,
//! u32 version, u32 header length, a JSON header and an f32 payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::oracle::FeatureMap;
use super::scene::{Dataset, LabelSet};
use super::SynthError;

pub const FEATURE_MAGIC: &[u8; 8] = b"ZSLAFEAT";
pub const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> SynthError {
    SynthError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_bytes(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), SynthError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn put_f32s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SynthError> {
        if self.pos + n > self.bytes.len() {
            return Err(SynthError::Truncated {
                path: self.path.display().to_string(),
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, SynthError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| malformed(self.path, "size overflow"))?)?;
        let out: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(malformed(self.path, "non-finite value in payload"));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<(), SynthError> {
        if self.pos != self.bytes.len() {
            return Err(malformed(self.path, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 8]) -> Result<(), SynthError> {
    let got = r.take(8).map_err(|_| malformed(r.path, "malformed feature file: missing header"))?;
    if got != magic {
        return Err(malformed(
            r.path,
            format!("malformed feature file: bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(malformed(r.path, format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn save_features(path: &Path, maps: &[FeatureMap]) -> Result<(), SynthError> {
    let (w, h, c) = maps
        .first()
        .map(|m| (m.width, m.height, m.channels))
        .unwrap_or((0, 0, 0));
    if maps.iter().any(|m| (m.width, m.height, m.channels) != (w, h, c)) {
        return Err(SynthError::DimensionMismatch("feature maps differ in shape".into()));
    }
    let dims = [w, h, c, maps.len()];
    if dims.iter().any(|d| u32::try_from(*d).is_err()) {
        return Err(SynthError::DimensionMismatch("dimension exceeds u32".into()));
    }
    write_bytes(path, |out| {
        out.write_all(FEATURE_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for m in maps {
            put_f32s(out, &m.data)?;
        }
        Ok(())
    })
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureMap>, SynthError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    check_magic(&mut r, FEATURE_MAGIC)?;
    let (w, h, c, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let per = w * h * c;
    let expected = r.pos + per * n * 4;
    if bytes.len() < expected {
        return Err(SynthError::Truncated {
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut maps = Vec::with_capacity(n);
    for _ in 0..n {
        maps.push(FeatureMap {
            width: w,
            height: h,
            channels: c,
            data: r.f32s(per)?,
        });
    }
    r.finish()?;
    Ok(maps)
}

/// Checks that loaded features line up with a dataset definition.
pub fn check_features(maps: &[FeatureMap], ds: &Dataset) -> Result<(), SynthError> {
    let cfg = &ds.config;
    if maps.len() != ds.scenes.len() {
        return Err(SynthError::DimensionMismatch(format!(
            "{} feature maps for {} scenes",
            maps.len(),
            ds.scenes.len()
        )));
    }
    if let Some(m) = maps.iter().find(|m| (m.width, m.height, m.channels) != (cfg.width, cfg.height, cfg.channels)) {
        return Err(SynthError::DimensionMismatch(format!(
            "feature map {}x{}x{} does not match dataset grid {}x{}x{}",
            m.width, m.height, m.channels, cfg.width, cfg.height, cfg.channels
        )));
    }
    Ok(())
}

/// Writes a checkpoint container: magic, version, JSON header, f32 payload.
pub fn write_container<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<(), SynthError> {
    let json = serde_json::to_vec(header).map_err(|e| malformed(path, e.to_string()))?;
    write_bytes(path, |out| {
        out.write_all(magic)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        out.write_all(&(payload.len() as u32).to_le_bytes())?;
        put_f32s(out, payload)
    })
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f64>), SynthError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let got = r.take(8)?;
    if got != magic {
        return Err(malformed(path, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header = serde_json::from_slice(r.take(len)?).map_err(|e| malformed(path, format!("header: {e}")))?;
    let n = r.u32()? as usize;
    let payload = r.f32s(n)?;
    r.finish()?;
    Ok((header, payload))
}

pub fn save_manifest(path: &Path, ds: &Dataset) -> Result<(), SynthError> {
    let json = serde_json::to_vec_pretty(ds).map_err(|e| malformed(path, e.to_string()))?;
    write_bytes(path, |w| w.write_all(&json))
}

pub fn load_manifest(path: &Path) -> Result<Dataset, SynthError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut ds: Dataset = serde_json::from_slice(&bytes).map_err(|e| malformed(path, format!("manifest: {e}")))?;
    ds.config.validate()?;
    ds.relabel();
    Ok(ds)
}

/// One row per (scene, attribute): `scene_id,attribute_id,value,loc_i,loc_j`,
/// locations left empty for negatives.
pub fn save_labels(path: &Path, labels: &[LabelSet]) -> Result<(), SynthError> {
    let to_err = |e: csv::Error| malformed(path, e.to_string());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["scene_id", "attribute_id", "value", "loc_i", "loc_j"]).map_err(to_err)?;
    for (sid, l) in labels.iter().enumerate() {
        for (k, (&p, loc)) in l.phi.iter().zip(&l.locations).enumerate() {
            let (li, lj) = loc.map(|(i, j)| (i.to_string(), j.to_string())).unwrap_or_default();
            w.write_record([sid.to_string(), k.to_string(), u8::from(p).to_string(), li, lj])
                .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_labels(path: &Path, n_scenes: usize, n_attributes: usize) -> Result<Vec<LabelSet>, SynthError> {
    let to_err = |e: csv::Error| malformed(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    let mut labels = vec![
        LabelSet {
            phi: vec![false; n_attributes],
            locations: vec![None; n_attributes],
        };
        n_scenes
    ];
    for rec in r.records() {
        let rec = rec.map_err(to_err)?;
        let field = |i: usize| -> Result<Option<usize>, SynthError> {
            let s = rec.get(i).ok_or_else(|| malformed(path, "short row"))?;
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| malformed(path, format!("bad integer {s:?}")))
        };
        let (sid, k, v) = match (field(0)?, field(1)?, field(2)?) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(malformed(path, "missing scene, attribute or value")),
        };
        if sid >= n_scenes || k >= n_attributes || v > 1 {
            return Err(SynthError::DimensionMismatch(format!("label row ({sid},{k},{v}) out of range")));
        }
        labels[sid].phi[k] = v == 1;
        labels[sid].locations[k] = match (field(3)?, field(4)?) {
            (Some(i), Some(j)) => Some((i, j)),
            _ => None,
        };
    }
    Ok(labels)
}
