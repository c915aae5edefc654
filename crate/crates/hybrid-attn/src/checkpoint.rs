//! Binary checkpoints.
//!
//! ```text
//! magic "HYATCKPT" | version u32 | precision u8 (0 = f32, 1 = f64)
//! config_len u64 | config text (flat dotted echo)
//! step u64 | n_params u64
//! per param: name_len u32 | name | rank u32 | dims u64.. | values (little-endian)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hybrid_attn_core::real::{Precision, Real};
use hybrid_attn_core::tensor::Tensor;
use hybrid_attn_core::ParamStore;

const MAGIC: &[u8; 8] = b"HYATCKPT";
const VERSION: u32 = 1;

/// Parameters as read from disk, in whichever precision they were saved.
#[derive(Debug, Clone)]
pub enum StoredParams {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

impl StoredParams {
    /// Converts to the requested scalar type.
    pub fn into_store<T: Real>(self) -> ParamStore<T> {
        match self {
            StoredParams::F32(p) => p.cast(),
            StoredParams::F64(p) => p.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: StoredParams,
}

/// Scalars a checkpoint can hold.
pub trait StoredReal: Real {
    const TAG: u8;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn wrap(store: ParamStore<Self>) -> StoredParams;
}

impl StoredReal for f32 {
    const TAG: u8 = 0;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn wrap(store: ParamStore<Self>) -> StoredParams {
        StoredParams::F32(store)
    }
}

impl StoredReal for f64 {
    const TAG: u8 = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn wrap(store: ParamStore<Self>) -> StoredParams {
        StoredParams::F64(store)
    }
}

pub fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => f32::TAG,
        Precision::F64 => f64::TAG,
    }
}

pub fn encode<T: StoredReal>(config_text: &str, step: u64, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::TAG);
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!("checkpoint truncated at byte {}", self.pos);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).context("length does not fit in memory")
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).context("checkpoint text is not UTF-8")
    }
}

fn decode_params<T: StoredReal>(c: &mut Cursor<'_>, count: usize) -> Result<ParamStore<T>> {
    let width = std::mem::size_of::<T>();
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .context("parameter size overflows")?;
        let raw = c.take(n.checked_mul(width).context("parameter size overflows")?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        store.insert(&name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    ensure!(c.take(8)? == MAGIC, "not a checkpoint (bad magic)");
    let version = c.u32()?;
    ensure!(
        version == VERSION,
        "unsupported checkpoint version {version}"
    );
    let tag = c.take(1)?[0];
    let text_len = c.len()?;
    let config_text = c.string(text_len)?;
    let step = c.u64()?;
    let count = c.len()?;
    let params = match tag {
        0 => f32::wrap(decode_params::<f32>(&mut c, count)?),
        1 => f64::wrap(decode_params::<f64>(&mut c, count)?),
        t => bail!("unknown precision tag {t}"),
    };
    ensure!(c.pos == bytes.len(), "trailing bytes after checkpoint");
    Ok(Checkpoint {
        config_text,
        step,
        params,
    })
}

pub fn save<T: StoredReal>(
    path: &Path,
    config_text: &str,
    step: u64,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut f =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&encode(config_text, step, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    decode(&bytes).with_context(|| format!("reading {}", path.display()))
}
