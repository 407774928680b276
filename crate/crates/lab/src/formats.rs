//! Binary model checkpoints (`TIMM`) and datasets (`TIMD`).
//!
//! All integers and floats are little-endian. Checkpoint layout, version 1:
//!
//! ```text
//! "TIMM" u32:version
//! u32:input_dim u32:hidden_count u32×hidden_count u32:embed_dim u32:num_classes u64:seed
//! f64:temperature u32:tensor_count
//! per tensor: u32:rank u32×rank f64×len
//! ```
//!
//! Dataset layout, version 1:
//!
//! ```text
//! "TIMD" u32:version u32:num_classes u32:num_superclasses u32:image_side u32:N
//! u16×num_classes superclass map, u16×N labels, u8×(N·image_side²) pixels
//! ```
//!
//! Pixels are stored as `round(p·255)` and widened to `b / 255` on load, so
//! datasets whose pixels already sit on the 1/255 grid round-trip bit-exactly.

use std::fs;
use std::path::Path;

use thiserror::Error;
use tima_core::data::Dataset;
use tima_core::model::{DualEncoder, EncoderConfig};
use tima_core::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TIMM";
pub const DATASET_MAGIC: &[u8; 4] = b"TIMD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic {
        expected: &'static str,
        found: Vec<u8>,
    },
    #[error("file truncated while reading {what}")]
    TruncatedFile { what: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("{0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid contents: {0}")]
    Invalid(#[from] tima_core::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(FormatError::TruncatedFile { what });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn magic(&mut self, expected: &'static [u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(expected).unwrap_or("?"),
                found: found.to_vec(),
            });
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<()> {
        match self.bytes.len() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &DualEncoder) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, cfg.input_dim);
    put_u32(&mut out, cfg.hidden_dims.len());
    for &h in &cfg.hidden_dims {
        put_u32(&mut out, h);
    }
    put_u32(&mut out, cfg.embed_dim);
    put_u32(&mut out, cfg.num_classes);
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&model.temperature().to_le_bytes());
    put_u32(&mut out, model.params().len());
    for t in model.params() {
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DualEncoder> {
    let mut r = Reader { bytes };
    r.magic(CHECKPOINT_MAGIC)?;
    let input_dim = r.usize("input_dim")?;
    let hidden_count = r.usize("hidden layer count")?;
    let hidden_dims = (0..hidden_count)
        .map(|_| r.usize("hidden dims"))
        .collect::<Result<Vec<_>>>()?;
    let embed_dim = r.usize("embed_dim")?;
    let num_classes = r.usize("num_classes")?;
    let seed = r.u64("seed")?;
    let config = EncoderConfig {
        input_dim,
        hidden_dims,
        embed_dim,
        num_classes,
        seed,
    };
    let temperature = r.f64("temperature")?;
    let count = r.usize("tensor count")?;
    // Bound allocations by what the file could possibly hold.
    if count > bytes.len() {
        return Err(FormatError::TruncatedFile { what: "tensors" });
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.usize("tensor rank")?;
        let shape = (0..rank)
            .map(|_| r.usize("tensor dims"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or(FormatError::TruncatedFile {
                what: "tensor data",
            })?;
        let data = (0..len)
            .map(|_| r.f64("tensor data"))
            .collect::<Result<Vec<_>>>()?;
        params.push(Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok(DualEncoder::from_parts(config, temperature, params)?)
}

pub fn save_checkpoint(model: &DualEncoder, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model))?)
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoder> {
    decode_checkpoint(&fs::read(path)?)
}

fn put_u16(out: &mut Vec<u8>, v: usize) {
    let v = u16::try_from(v).expect("class id exceeds u16");
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(24 + data.num_classes() * 2 + data.len() * 2 + data.pixels().len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, data.num_classes());
    put_u32(&mut out, data.num_superclasses());
    put_u32(&mut out, data.image_side());
    put_u32(&mut out, data.len());
    for &s in data.superclass_of() {
        put_u16(&mut out, s);
    }
    for &y in data.labels() {
        put_u16(&mut out, y);
    }
    out.extend(
        data.pixels()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes };
    r.magic(DATASET_MAGIC)?;
    let classes = r.usize("num_classes")?;
    let superclasses = r.usize("num_superclasses")?;
    let side = r.usize("image_side")?;
    let n = r.usize("sample count")?;
    let superclass_of = (0..classes)
        .map(|_| r.u16("superclass map").map(usize::from))
        .collect::<Result<Vec<_>>>()?;
    let labels = r.take(n.saturating_mul(2), "labels")?;
    let labels = labels
        .chunks_exact(2)
        .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    let count = n.checked_mul(side).and_then(|v| v.checked_mul(side));
    let count = count.ok_or(FormatError::TruncatedFile { what: "pixels" })?;
    let pixels = r
        .take(count, "pixels")?
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    r.finish()?;
    Ok(Dataset::new(
        side,
        superclasses,
        superclass_of,
        labels,
        pixels,
    )?)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_dataset(data))?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
