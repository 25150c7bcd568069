//! Named parameter storage with a canonical flat ordering.
//!
//! Parameters live in a BTreeMap so every walk over them (flattening,
//! serialization, optimizer updates) visits names in sorted order. The flat
//! vector layout is therefore a stable function of the parameter set, which
//! keeps clipping norms, noise application, and checkpoints reproducible.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"PSTO";
const VERSION: u32 = 1;

#[derive(Debug)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named parameter tensors plus matching gradient slots.
#[derive(Debug, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { slots: BTreeMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        if self.slots.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.slots.insert(name.to_string(), Slot { value, grad });
        Ok(())
    }

    /// Registers a parameter drawn elementwise from uniform(-scale, scale).
    pub fn insert_random(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TensorError> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    /// Registers a zero-initialized parameter.
    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<(), TensorError> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// Parameter names in canonical (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total element count across all parameters.
    pub fn flat_dim(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `contribution` (row-major, same layout as the value) into the
    /// gradient slot of `name`.
    pub fn accumulate_grad(
        &mut self,
        name: &str,
        contribution: &[f64],
    ) -> Result<(), TensorError> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        debug_assert_eq!(slot.grad.numel(), contribution.len());
        for (g, c) in slot.grad.data_mut().iter_mut().zip(contribution) {
            *g += c;
        }
        Ok(())
    }

    /// Gradients flattened in canonical order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_dim());
        for slot in self.slots.values() {
            out.extend_from_slice(slot.grad.data());
        }
        out
    }

    /// Parameter values flattened in canonical order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_dim());
        for slot in self.slots.values() {
            out.extend_from_slice(slot.value.data());
        }
        out
    }

    /// Overwrites parameter values from a flat vector in canonical order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        if flat.len() != self.flat_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "assign_flat",
                detail: format!("store holds {} values, got {}", self.flat_dim(), flat.len()),
            });
        }
        let mut off = 0;
        for slot in self.slots.values_mut() {
            let n = slot.value.numel();
            slot.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Deep copy of values (gradients reset to zero).
    pub fn snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, slot) in &self.slots {
            out.insert(name, slot.value.clone()).expect("names unique by construction");
        }
        out
    }

    /// Binary serialization: magic, version, parameter count, then per
    /// parameter the name, shape, and little-endian f64 values, all in
    /// canonical order. Gradients are transient and not persisted.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.slots.len() as u64).to_le_bytes())?;
        for (name, slot) in &self.slots {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(slot.value.shape().len() as u32).to_le_bytes())?;
            for &d in slot.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in slot.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TensorError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::MalformedCheckpoint(
                "bad magic bytes".to_string(),
            ));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(TensorError::MalformedCheckpoint(format!(
                "unsupported version {}",
                version
            )));
        }
        let count = read_u64(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| TensorError::MalformedCheckpoint("non-utf8 name".to_string()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
