//! Binary checkpoint: header, config, tensor directory, payload, optimizer section.
//!
//! ```text
//! "UMGM" | version u32 | sha256(config json) [32]
//! config_len u32 | config json
//! n u32 | n x (name_len u32, name, dtype u8, ndim u32, dims u64.., offset u64, nbytes u64)
//! payload_len u64 | payload
//! step u64 | k u32 | k x (param index u32, m bytes, v bytes)
//! ```
//!
//! Integers are little-endian; offsets are relative to the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Moments, OptimizerState};
use crate::adapters::AdapterConfig;
use crate::encoders::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"UMGM";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub adapter: Option<AdapterConfig>,
}

impl ModelSpec {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        ModelSpec {
            encoder: model.config.clone(),
            adapter: model.adapters().map(|a| a.config.clone()),
        }
    }

    pub fn json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.json().as_bytes()).into()
    }

    /// A model with this layout; values are placeholders until loaded.
    pub fn build<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::new(self.encoder.clone(), 0)?;
        if let Some(a) = &self.adapter {
            model.attach_adapters(a.clone(), 0)?;
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, opt: &OptimizerState<T>) -> Vec<u8> {
    let spec = ModelSpec::of(model);
    let json = spec.json();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&spec.digest());
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());

    let mut payload = Vec::new();
    put_u32(&mut out, model.params.len() as u32);
    for (_, p) in model.params.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        put_u32(&mut out, p.value.ndim() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, payload.len() as u64);
        put_u64(&mut out, (p.value.len() * T::DTYPE.size()) as u64);
        put_tensor(&mut payload, &p.value);
    }
    put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);

    put_u64(&mut out, opt.step);
    put_u32(&mut out, opt.moments.len() as u32);
    for (&idx, mo) in &opt.moments {
        put_u32(&mut out, idx as u32);
        put_tensor(&mut out, &mo.m);
        put_tensor(&mut out, &mo.v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<R>(&self, at: usize, detail: impl Into<String>) -> Result<R> {
        Err(Error::Format {
            offset: at as u64,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(self.pos, format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = self.take(n * size, what)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(shape, data)
    }
}

/// Reads only the header and embedded spec.
pub fn read_spec(bytes: &[u8]) -> Result<ModelSpec> {
    let mut r = Reader { bytes, pos: 0 };
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<ModelSpec> {
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, expected UMGM");
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(at, format!("unsupported version {version}, expected {VERSION}"));
    }
    let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let json = r.take(len, "config")?;
    let spec: ModelSpec = match serde_json::from_slice(json) {
        Ok(s) => s,
        Err(e) => return r.fail(at, format!("config json: {e}")),
    };
    if Sha256::digest(json).as_slice() != digest {
        return r.fail(at, "config digest does not match the embedded config");
    }
    Ok(spec)
}

/// Decodes a checkpoint. With `expected`, a different model config is refused.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<(Model<T>, OptimizerState<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    let spec = header(&mut r)?;
    if let Some(e) = expected {
        if e.digest() != spec.digest() {
            return Err(Error::Contract(format!(
                "checkpoint config digest {} does not match expected {}",
                hex(&spec.digest()),
                hex(&e.digest())
            )));
        }
    }
    let mut model: Model<T> = spec.build()?;

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
        nbytes: usize,
        at: usize,
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail(at, "tensor name is not utf-8"),
        };
        let code = r.u8("dtype")?;
        match DType::from_code(code) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => return r.fail(at, format!("{name}: dtype {d:?}, loader expects {:?}", T::DTYPE)),
            None => return r.fail(at, format!("{name}: unknown dtype code {code}")),
        }
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return r.fail(at, format!("{name}: ndim {ndim}"));
        }
        let shape = (0..ndim).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")? as usize;
        let nbytes = r.u64("nbytes")? as usize;
        entries.push(Entry {
            name,
            shape,
            offset,
            nbytes,
            at,
        });
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload_start = r.pos;
    let payload = r.take(payload_len, "payload")?;

    if entries.len() != model.params.len() {
        return r.fail(payload_start, format!("{} tensors, model has {}", entries.len(), model.params.len()));
    }
    for e in &entries {
        let Some(id) = model.params.find(&e.name) else {
            return r.fail(e.at, format!("unknown tensor {}", e.name));
        };
        let n: usize = e.shape.iter().product();
        if e.nbytes != n * T::DTYPE.size() || e.offset.checked_add(e.nbytes).is_none_or(|end| end > payload.len()) {
            return r.fail(e.at, format!("{}: byte range {}+{} invalid", e.name, e.offset, e.nbytes));
        }
        let mut sub = Reader {
            bytes: &payload[e.offset..e.offset + e.nbytes],
            pos: 0,
        };
        let t = sub.tensor::<T>(&e.shape, &e.name)?;
        if let Err(err) = model.params.set(id, t) {
            return r.fail(e.at, err.to_string());
        }
    }

    let step = r.u64("optimizer step")?;
    let k = r.u32("moment count")? as usize;
    let mut opt = OptimizerState { step, ..Default::default() };
    for _ in 0..k {
        let at = r.pos;
        let idx = r.u32("moment index")? as usize;
        if idx >= model.params.len() {
            return r.fail(at, format!("moment for parameter {idx} of {}", model.params.len()));
        }
        let shape = model.params.iter().nth(idx).unwrap().1.value.shape().to_vec();
        let m = r.tensor(&shape, "first moment")?;
        let v = r.tensor(&shape, "second moment")?;
        opt.moments.insert(idx, Moments { m, v });
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((model, opt))
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file and renames, so a failed write keeps the old file.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, opt: &OptimizerState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, opt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelSpec>) -> Result<(Model<T>, OptimizerState<T>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, expected)
}
