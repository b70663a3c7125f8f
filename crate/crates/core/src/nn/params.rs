//! Parameter storage and the named-tensor container.
//!
//! Container layout (little-endian): magic `F0VP`, u32 version, u32 count,
//! then per tensor: u32 name length, UTF-8 name, u8 trainable flag, u32 rank,
//! u64 per dimension, f64 values.

use std::io::{Read, Write};

use super::{NnError, Result, Tensor};

pub const PARAMS_MAGIC: [u8; 4] = *b"F0VP";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    has_grad: bool,
    /// Buffers (running statistics) are stored but never optimized.
    trainable: bool,
    frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            has_grad: false,
            trainable,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub fn has_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].has_grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Trainable and not frozen: receives gradients and optimizer updates.
    pub fn is_optimized(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.trainable && !e.frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = true;
                n += 1;
            }
        }
        n
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        for (a, b) in e.grad.iter_mut().zip(g) {
            *a += b;
        }
        e.has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.has_grad = false;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                trainable: e.trainable,
                tensor: e.value.clone(),
            })
            .collect()
    }

    /// Overwrites values by name; every stored tensor must be present with a
    /// matching shape.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(NnError::Format(format!(
                "container has {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for nt in named {
            let id = self
                .find(&nt.name)
                .ok_or_else(|| NnError::UnknownParam(nt.name.clone()))?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != nt.tensor.shape() {
                return Err(NnError::Shape {
                    op: "load_named",
                    left: e.value.shape().to_vec(),
                    right: nt.tensor.shape().to_vec(),
                });
            }
            e.value = nt.tensor.clone();
        }
        Ok(())
    }
}

pub fn write_named_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(&PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::from(t.trainable)])?;
        let shape = t.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| NnError::Format(format!("truncated while reading {what}")))?;
    Ok(buf)
}

pub fn read_named_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if magic != PARAMS_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != PARAMS_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "count")?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        if len > 4096 {
            return Err(NnError::Format("implausible name length".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| NnError::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| NnError::Format("name not UTF-8".into()))?;
        let [flag] = read_exact::<_, 1>(&mut r, "flag")?;
        let rank = u32::from_le_bytes(read_exact(&mut r, "rank")?) as usize;
        if rank > 8 {
            return Err(NnError::Format("implausible rank".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r, "dim")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r, "values")?));
        }
        out.push(NamedTensor {
            name,
            trainable: flag != 0,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}
