//! Binary tensor container.
//!
//! Layout (little-endian): magic `PSNF`, version `u16`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, dtype `u8` (0 = f32),
//! rank `u8`, `rank` dims as `u32`, payload.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::params::{param_name, ModelParams, Partition};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSNF";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes named tensors in the given order.
pub fn encode_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
    let count = u32::try_from(entries.len()).map_err(|_| Error::Config("too many tensors".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("`{name}` has rank {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("`{name}` dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Size in bytes of the container holding exactly `params`.
pub fn encoded_len(params: &ModelParams) -> usize {
    10 + params
        .iter()
        .map(|(n, t)| 2 + n.len() + 2 + 4 * t.rank() + 4 * t.numel())
        .sum::<usize>()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated: {what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn fail(&self, at: usize, message: String) -> Error {
        Error::Format {
            offset: at as u64,
            message,
        }
    }
}

/// Parses a container into its named tensors, in stored order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic; not a PSNF container".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported container version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| r.fail(at + 2, format!("name is not UTF-8: {e}")))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(r.fail(dtype_at, format!("`{name}` has unknown dtype tag {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(dtype_at, format!("`{name}` shape {shape:?} overflows")))?;
        let payload = r.take(numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    encode_tensors(params.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut params = ModelParams::new();
    for (name, t) in decode_tensors(bytes)? {
        params.insert(name, t)?;
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode(&std::fs::read(path)?)
}

/// Stores a dataset as `images` plus `labels` (as f32) and a scalar `classes`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let labels = Tensor::from_vec(ds.labels.iter().map(|&l| l as f32).collect());
    let classes = Tensor::from_vec(vec![ds.classes as f32]);
    encode_tensors([("images", &ds.images), ("labels", &labels), ("classes", &classes)])
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut entries = decode_tensors(bytes)?;
    let mut take = |key: &str| -> Result<Tensor> {
        let i = entries
            .iter()
            .position(|(n, _)| n == key)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("dataset container lacks `{key}`"),
            })?;
        Ok(entries.remove(i).1)
    };
    let images = take("images")?;
    let labels = take("labels")?.data().iter().map(|&l| l as usize).collect();
    let classes = take("classes")?.data().first().copied().unwrap_or(0.0) as usize;
    Dataset::new(images, labels, classes)
}

/// Adapts a parameter set to `net`'s naming. A single-group regulated
/// network names its upper layers `group0/...` where an unregulated network
/// uses `shared/...`; such parameters are renamed when shapes agree.
pub fn conform(net: &Network, params: &ModelParams) -> Result<ModelParams> {
    let mut out = ModelParams::new();
    for slot in net.param_slots() {
        let field = slot.name.rsplit('.').next().unwrap_or("");
        let mut candidates = vec![slot.name.clone()];
        match slot.group {
            None => candidates.push(param_name(Partition::Group(0), slot.layer, field)),
            Some(0) if net.mapping().is_some_and(|m| m.group_count() == 1) => {
                candidates.push(param_name(Partition::Shared, slot.layer, field))
            }
            _ => {}
        }
        let found = candidates.iter().find_map(|n| params.get(n));
        let t = found.ok_or_else(|| Error::Alignment(format!("checkpoint lacks `{}`", slot.name)))?;
        if t.shape() != slot.shape.as_slice() {
            return Err(Error::Alignment(format!(
                "`{}` has shape {:?} in the checkpoint, network expects {:?}",
                slot.name,
                t.shape(),
                slot.shape
            )));
        }
        out.insert(slot.name, t.clone())?;
    }
    if out.len() != params.len() {
        return Err(Error::Alignment(format!(
            "checkpoint holds {} tensors, network uses {}",
            params.len(),
            out.len()
        )));
    }
    Ok(out)
}
