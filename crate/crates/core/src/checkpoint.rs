//! Binary model and adapter files.
//!
//! Model file (all integers u64 and all floats f64, little-endian):
//!
//! ```text
//! magic  b"FLMODEL\0"
//! u32    version (1)
//! u64 ×8 vocab_size, d_model, n_heads, n_layers, ff_dim, max_seq_len, n_classes, seed
//! per parameter, in EncoderModel::parameters order:
//!        rows, cols, rows·cols doubles
//! ```
//!
//! Adapter file:
//!
//! ```text
//! magic  b"FLLORA\0\0"
//! u32    version (1)
//! u64    rank
//! f64    alpha
//! u64    seed
//! u64    number of targets, then one byte per target matrix code
//! u64    trainable length n, then n doubles
//! ```
//!
//! The trainable block is the flattened trainable vector: each adapter's A
//! then B in site order, then the classifier head weight and bias.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lora::{attach_adapters, AdaptedModel, LoraConfig, TrainableVector};
use crate::model::{EncoderModel, Matrix, ModelConfig};

pub const MODEL_MAGIC: &[u8; 8] = b"FLMODEL\0";
pub const ADAPTER_MAGIC: &[u8; 8] = b"FLLORA\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any single length field, to reject corrupt headers before
/// allocating.
const MAX_LEN: u64 = 1 << 32;

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::Checkpoint(format!("{what} {v} is implausibly large")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if &self.bytes::<8>()? != magic {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut rest = Vec::new();
        self.inner
            .read_to_end(&mut rest)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if rest.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())))
        }
    }
}

pub fn write_model<W: Write>(model: &EncoderModel, mut w: W) -> std::io::Result<()> {
    let c = model.config();
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.ff_dim, c.max_seq_len, c.n_classes] {
        put_u64(&mut w, v as u64)?;
    }
    put_u64(&mut w, c.seed)?;
    for (_, t) in model.parameters() {
        put_u64(&mut w, t.rows() as u64)?;
        put_u64(&mut w, t.cols() as u64)?;
        put_f64s(&mut w, t.data())?;
    }
    w.flush()
}

pub fn read_model<R: Read>(r: R) -> Result<EncoderModel> {
    let mut r = Reader { inner: r };
    r.header(MODEL_MAGIC)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.len("model dimension")?;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_layers: dims[3],
        ff_dim: dims[4],
        max_seq_len: dims[5],
        n_classes: dims[6],
        seed: r.u64()?,
    };
    config.validate()?;
    let expected = EncoderModel::init(&config)?;
    let mut params = Vec::new();
    for (name, t) in expected.parameters() {
        let rows = r.len("rows")?;
        let cols = r.len("cols")?;
        if (rows, cols) != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {rows}x{cols}, expected {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        params.push(Tensor::new(rows, cols, r.f64s(rows * cols)?)?);
    }
    r.expect_eof()?;
    EncoderModel::from_parameters(&config, params)
}

pub fn write_adapters<W: Write>(model: &AdaptedModel, mut w: W) -> std::io::Result<()> {
    let c = model.lora_config();
    w.write_all(ADAPTER_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    put_u64(&mut w, c.rank as u64)?;
    w.write_all(&c.alpha.to_le_bytes())?;
    put_u64(&mut w, c.seed)?;
    put_u64(&mut w, c.targets.len() as u64)?;
    for m in &c.targets {
        w.write_all(&[m.code()])?;
    }
    let theta = model.extract_trainable();
    put_u64(&mut w, theta.len() as u64)?;
    put_f64s(&mut w, theta.as_slice())?;
    w.flush()
}

/// Rebuilds an adapted model on top of `base` from an adapter file.
pub fn read_adapters<R: Read>(r: R, base: Arc<EncoderModel>) -> Result<AdaptedModel> {
    let mut r = Reader { inner: r };
    r.header(ADAPTER_MAGIC)?;
    let rank = r.len("rank")?;
    let alpha = r.f64()?;
    let seed = r.u64()?;
    let n_targets = r.len("target count")?;
    let targets = (0..n_targets)
        .map(|_| {
            let [code] = r.bytes::<1>()?;
            Matrix::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown matrix code {code}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = LoraConfig {
        rank,
        alpha,
        targets,
        seed,
    };
    let mut model = attach_adapters(base, &config)?;
    let n = r.len("trainable length")?;
    let expected = model.trainable_param_count().trainable;
    if n != expected {
        return Err(Error::Checkpoint(format!(
            "adapter file holds {n} trainable values, model expects {expected}"
        )));
    }
    model.load_trainable(&TrainableVector::new(r.f64s(n)?))?;
    r.expect_eof()?;
    Ok(model)
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(file))
}

pub fn save_adapters(model: &AdaptedModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_adapters(model, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_adapters(path: &Path, base: Arc<EncoderModel>) -> Result<AdaptedModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_adapters(std::io::BufReader::new(file), base)
}
