//! Per-patch feature embeddings: the MILF on-disk format, an import path
//! for externally computed CNN embeddings, and a deterministic statistical
//! extractor for desk-scale runs.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tiling::Magnification;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MILF_MAGIC: &[u8; 4] = b"MILF";
pub const MILF_VERSION: u16 = 1;

/// One slide's bag of instance embeddings plus its slide-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub mag: Magnification,
    /// K x d instance embeddings, row order matching the patch manifest.
    pub embeddings: Matrix,
    /// None = unlabeled.
    pub label: Option<usize>,
}

impl FeatureBag {
    pub fn num_instances(&self) -> usize {
        self.embeddings.rows
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }
}

/// Ordered class names with dense ids from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut seen = names.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != names.len() {
            return Err(Error::Config("duplicate class names".into()));
        }
        Ok(LabelSpace { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

pub const BASELINE_DIM: usize = 64;

/// Deterministic 64-d statistical embedding of a 256x256 RGB patch, all
/// components scaled to [0,1]: channel mean/variance (6), 16-bin channel
/// histograms (48), gradient-magnitude mean/variance (2), saturation
/// mean/variance (2), foreground fraction (1), zero padding to 64.
pub fn baseline_extract(patch: &image::RgbImage) -> Result<Vec<f64>> {
    if patch.width() != 256 || patch.height() != 256 {
        return Err(Error::shape(
            "baseline_extract",
            (patch.height() as usize, patch.width() as usize),
            (256, 256),
        ));
    }
    let n = (256 * 256) as f64;
    let mut feat = Vec::with_capacity(BASELINE_DIM);

    // channel means/variances on [0,1] values
    let mut sums = [0.0f64; 3];
    let mut sqs = [0.0f64; 3];
    for p in patch.pixels() {
        for c in 0..3 {
            let v = p.0[c] as f64 / 255.0;
            sums[c] += v;
            sqs[c] += v * v;
        }
    }
    for c in 0..3 {
        let mean = sums[c] / n;
        feat.push(mean);
        feat.push((sqs[c] / n - mean * mean).max(0.0));
    }

    // 16-bin histograms per channel, mass fractions
    let mut hist = [[0u32; 16]; 3];
    for p in patch.pixels() {
        for c in 0..3 {
            hist[c][(p.0[c] / 16) as usize] += 1;
        }
    }
    for ch in &hist {
        for &b in ch {
            feat.push(b as f64 / n);
        }
    }

    // gradient magnitude of the grayscale image, central differences
    let gray: Vec<f64> = patch
        .pixels()
        .map(|p| (0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64) / 255.0)
        .collect();
    let mut gsum = 0.0;
    let mut gsq = 0.0;
    for y in 0..256usize {
        for x in 0..256usize {
            let gx = gray[y * 256 + (x + 1).min(255)] - gray[y * 256 + x.saturating_sub(1)];
            let gy = gray[(y + 1).min(255) * 256 + x] - gray[y.saturating_sub(1) * 256 + x];
            // /sqrt(8) keeps the magnitude of a unit-range image in [0,1]
            let m = (gx * gx + gy * gy).sqrt() / (8.0f64).sqrt();
            gsum += m;
            gsq += m * m;
        }
    }
    let gmean = gsum / n;
    feat.push(gmean);
    feat.push((gsq / n - gmean * gmean).max(0.0));

    // HSV saturation mean/variance and foreground fraction
    let mut ssum = 0.0;
    let mut ssq = 0.0;
    let mut fg = 0u32;
    for p in patch.pixels() {
        let s = saturation(p.0[0], p.0[1], p.0[2]);
        ssum += s;
        ssq += s * s;
        if s > 8.0 / 255.0 {
            fg += 1;
        }
    }
    let smean = ssum / n;
    feat.push(smean);
    feat.push((ssq / n - smean * smean).max(0.0));
    feat.push(fg as f64 / n);

    feat.resize(BASELINE_DIM, 0.0);
    Ok(feat)
}

pub fn saturation(r: u8, g: u8, b: u8) -> f64 {
    let max = r.max(g).max(b) as f64;
    let min = r.min(g).min(b) as f64;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a bag to the MILF layout:
/// magic | version u16 | flags u16 | d u32 | K u32 | id len u16 + UTF-8 |
/// label i16 (-1 = unlabeled) | mag u8 | K*d f32 LE row-major | CRC32(payload).
pub fn encode_embeddings(bag: &FeatureBag) -> Result<Vec<u8>> {
    if bag.num_instances() == 0 {
        return Err(Error::EmptyBag);
    }
    if bag.slide_id.len() > u16::MAX as usize {
        return Err(Error::Param("slide id too long".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MILF_MAGIC);
    push_u16(&mut buf, MILF_VERSION);
    push_u16(&mut buf, 0); // flags
    push_u32(&mut buf, bag.dim() as u32);
    push_u32(&mut buf, bag.num_instances() as u32);
    push_u16(&mut buf, bag.slide_id.len() as u16);
    buf.extend_from_slice(bag.slide_id.as_bytes());
    let label: i16 = match bag.label {
        Some(l) => {
            if l > i16::MAX as usize {
                return Err(Error::Param(format!("label id {l} too large")));
            }
            l as i16
        }
        None => -1,
    };
    buf.extend_from_slice(&label.to_le_bytes());
    buf.push(bag.mag.tag_byte());
    let payload_start = buf.len();
    for &v in &bag.embeddings.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[payload_start..]);
    push_u32(&mut buf, crc);
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

/// Parse a MILF byte stream, validating magic, version, dimensions, row
/// count, and payload checksum.
pub fn decode_embeddings(data: &[u8]) -> Result<FeatureBag> {
    let mut cur = Cursor { data, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MILF_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = cur.u16()?;
    if version != MILF_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let _flags = cur.u16()?;
    let d = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    if d == 0 || k == 0 {
        return Err(Error::Format(format!("degenerate shape {k}x{d}")));
    }
    let payload_len = k
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("shape overflow".into()))?;
    let id_len = cur.u16()? as usize;
    let id_bytes = cur.take(id_len)?;
    let slide_id = std::str::from_utf8(id_bytes)
        .map_err(|_| Error::Format("slide id is not UTF-8".into()))?
        .to_string();
    let label_raw = cur.i16()?;
    let label = if label_raw < 0 {
        None
    } else {
        Some(label_raw as usize)
    };
    let mag = Magnification::from_tag_byte(cur.take(1)?[0])?;
    let payload = cur.take(payload_len)?;
    let stored_crc = cur.u32()?;
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::Format(format!(
            "payload checksum mismatch: computed {crc:08x}, stored {stored_crc:08x}"
        )));
    }
    if cur.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            data.len() - cur.pos
        )));
    }
    let mut values = Vec::with_capacity(k * d);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(FeatureBag {
        slide_id,
        mag,
        embeddings: Matrix::from_vec(k, d, values),
        label,
    })
}

pub fn write_embeddings(bag: &FeatureBag, path: &Path) -> Result<()> {
    let bytes = encode_embeddings(bag)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<FeatureBag> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    decode_embeddings(&data)
}

/// Sidecar descriptor for importing an external f32 embedding stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportDescriptor {
    pub slide_id: String,
    /// Embedding dimension of each record (e.g. 1024 or 512).
    pub dim: usize,
    pub mag: String,
    #[serde(default)]
    pub label: Option<usize>,
    /// Path to the raw little-endian f32 record stream, relative to the
    /// descriptor file.
    pub data: String,
}

pub fn parse_import_descriptor(text: &str) -> Result<ImportDescriptor> {
    let desc: ImportDescriptor =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("descriptor: {e}")))?;
    if desc.dim == 0 {
        return Err(Error::Format("descriptor dim must be > 0".into()));
    }
    Magnification::parse(&desc.mag)?;
    Ok(desc)
}

/// Turn a raw f32 record stream plus its descriptor into a bag.
pub fn import_external(desc: &ImportDescriptor, raw: &[u8]) -> Result<FeatureBag> {
    let rec_bytes = desc.dim * 4;
    if raw.is_empty() || raw.len() % rec_bytes != 0 {
        return Err(Error::Format(format!(
            "stream length {} is not a multiple of {} (d={} f32 records)",
            raw.len(),
            rec_bytes,
            desc.dim
        )));
    }
    let k = raw.len() / rec_bytes;
    let mut values = Vec::with_capacity(k * desc.dim);
    for chunk in raw.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(FeatureBag {
        slide_id: desc.slide_id.clone(),
        mag: Magnification::parse(&desc.mag)?,
        embeddings: Matrix::from_vec(k, desc.dim, values),
        label: desc.label,
    })
}
