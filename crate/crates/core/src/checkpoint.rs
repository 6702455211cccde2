//! Binary checkpoint: `"IANC"`, format version, JSON metadata, then a table
//! of named tensors. Everything little-endian, data NCHW row-major.
//!
//! ```text
//! magic[4] version:u32 meta_len:u64 meta[meta_len] count:u64
//! repeat count: name_len:u32 name dtype:u8 rank:u32 dims:u64[rank] data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::ian::{IanModel, ModelConfig, TrainConfig, Trainer};
use crate::scalar::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IANC";
pub const VERSION: u32 = 1;

/// A stored tensor at its own precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form metadata; keys this crate does not know survive a re-save.
    pub metadata: Map<String, Value>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(corrupt("truncated checkpoint"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows usize"))
    }
}

fn write_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<T: Real>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let bytes = r.take(n.checked_mul(size).ok_or_else(|| corrupt("tensor size overflow"))?)?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(format!("bad tensor: {e}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(meta);
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            match t {
                StoredTensor::F32(t) => write_tensor(&mut out, t),
                StoredTensor::F64(t) => write_tensor(&mut out, t),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let magic = r.take(4).map_err(|_| corrupt("not a checkpoint: file too short"))?;
        if magic != MAGIC {
            return Err(corrupt(format!("not a checkpoint: bad magic {magic:?}, expected \"IANC\"")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version} (this build reads {VERSION})")));
        }
        let meta_len = r.len()?;
        let metadata: Map<String, Value> = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(read_tensor(&mut r, shape)?),
                DType::F64 => StoredTensor::F64(read_tensor(&mut r, shape)?),
            };
            tensors.insert(name, t);
        }
        if !r.buf.is_empty() {
            return Err(corrupt("trailing bytes after tensor table"));
        }
        Ok(Self { metadata, tensors })
    }

    /// Write via a sibling temp file and rename, so `path` is never partial.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file_name = path.file_name().ok_or_else(|| corrupt("checkpoint path has no file name"))?;
        let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn meta<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self.metadata.get(key).ok_or_else(|| corrupt(format!("metadata lacks {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| corrupt(format!("metadata {key:?}: {e}")))
    }

    fn set_meta(&mut self, key: &str, v: impl serde::Serialize) {
        self.metadata.insert(key.to_string(), serde_json::to_value(v).expect("plain config serializes"));
    }

    /// Model weights and running statistics plus architecture metadata.
    pub fn store_model<T: Real>(&mut self, model: &IanModel<T>) {
        self.set_meta("model", &model.config);
        self.set_meta("image_size", model.config.image_size);
        self.set_meta("latent_dim", model.config.latent_dim);
        self.set_meta("mdc", model.config.mdc);
        for (n, t) in &model.params {
            self.tensors.insert(format!("param/{n}"), StoredTensor::from_tensor(t));
        }
        for (n, t) in &model.buffers {
            self.tensors.insert(format!("buffer/{n}"), StoredTensor::from_tensor(t));
        }
    }

    pub fn model<T: Real>(&self) -> Result<IanModel<T>> {
        let config: ModelConfig = self.meta("model")?;
        config.validate()?;
        let pick = |prefix: &str| -> BTreeMap<String, Tensor<T>> {
            self.tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.to_tensor())))
                .collect()
        };
        let model = IanModel {
            params: pick("param/"),
            buffers: pick("buffer/"),
            config,
        };
        // shape check against a freshly built reference
        let reference = IanModel::<T>::new(model.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        for (n, t) in &reference.params {
            match model.params.get(n) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(corrupt(format!("{n}: shape {:?}, expected {:?}", p.shape(), t.shape()))),
                None => return Err(corrupt(format!("missing parameter {n}"))),
            }
        }
        for n in reference.buffers.keys() {
            if !model.buffers.contains_key(n) {
                return Err(corrupt(format!("missing buffer {n}")));
            }
        }
        Ok(model)
    }

    /// Full trainer state: model, optimizer moments, step and training config.
    pub fn store_trainer<T: Real>(&mut self, trainer: &Trainer<T>) {
        self.store_model(&trainer.model);
        self.set_meta("train", &trainer.config);
        self.set_meta("lambda", trainer.config.weights);
        self.set_meta("seed", trainer.config.seed);
        self.set_meta("step", trainer.step);
        let (adam_steps, moments) = trainer.optim.state();
        self.set_meta("adam_steps", adam_steps);
        self.tensors.retain(|k, _| !k.starts_with("adam/"));
        for (n, t) in moments {
            self.tensors.insert(format!("adam/{n}"), StoredTensor::from_tensor(t));
        }
    }

    pub fn trainer<T: Real>(&self) -> Result<Trainer<T>> {
        let model = self.model()?;
        let config: TrainConfig = self.meta("train")?;
        let mut trainer = Trainer::new(model, config);
        trainer.step = self.meta("step")?;
        let moments = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("adam/").map(|n| (n.to_string(), v.to_tensor())))
            .collect();
        trainer.optim.restore(self.meta("adam_steps")?, moments);
        Ok(trainer)
    }
}
