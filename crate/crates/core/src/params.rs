//! Named parameter storage, initialisation, gradients, and the checkpoint
//! file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"LPSRCKPT"  u32 version  u64 config_len  config JSON (UTF-8)
//! u32 count
//! count x { u32 name_len  name  4 x u64 shape  f32 data[prod(shape)] }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"LPSRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Redraw every tensor, biases included, from [`kaiming_uniform`]. Used
    /// to probe a network away from its structured initialisation.
    pub fn randomize(&mut self, rng: &mut impl Rng) {
        for t in &mut self.tensors {
            *t = kaiming_uniform(t.shape(), rng);
        }
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Overwrite values from `other`, which must hold the same names and shapes
    /// in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] {
                return Err(Error::config(format!(
                    "parameter {i} is {:?}, expected {:?}",
                    other.names[i], self.names[i]
                )));
            }
            if self.tensors[i].shape() != other.tensors[i].shape() {
                return Err(Error::config(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    self.names[i],
                    other.tensors[i].shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// He-uniform initialisation over the fan-in `shape[1] * shape[2] * shape[3]`.
pub fn kaiming_uniform(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, config_json: &str, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config_json.len() as u64).to_le_bytes())?;
    out.write_all(config_json.as_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        let t = params.get(id);
        for d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns the config JSON text and the stored parameters.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    let path = path.as_ref();
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input).map_err(|e| bad(e.to_string()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_len = read_u64(&mut input).map_err(|e| bad(e.to_string()))? as usize;
    let mut config = vec![0u8; config_len];
    input
        .read_exact(&mut config)
        .map_err(|e| bad(format!("truncated config: {e}")))?;
    let config = String::from_utf8(config).map_err(|e| bad(format!("config is not UTF-8: {e}")))?;
    let count = read_u32(&mut input).map_err(|e| bad(e.to_string()))?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let read = |input: &mut BufReader<File>| -> std::io::Result<(String, Tensor)> {
            let name_len = read_u32(input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u64(input)? as usize;
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let name = String::from_utf8_lossy(&name).into_owned();
            Ok((name, Tensor::new(shape, data).expect("length matches shape")))
        };
        let (name, tensor) = read(&mut input).map_err(|e| bad(format!("truncated parameter: {e}")))?;
        params.add(name, tensor);
    }
    Ok((config, params))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
