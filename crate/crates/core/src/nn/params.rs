use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Who owns a parameter and when it may be updated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "subject", rename_all = "snake_case")]
pub enum ParamRole {
    /// Shared weights, trained during pretraining only.
    Shared,
    /// Never trained (random Fourier projections).
    Frozen,
    /// Target-side LoRA vector of a subject.
    Target(String),
    /// Retrieved-side LoRA vector of a subject.
    Retrieved(String),
}

impl ParamRole {
    pub fn subject(&self) -> Option<&str> {
        match self {
            ParamRole::Target(s) | ParamRole::Retrieved(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub value: Vec<T>,
}

/// Named, role-tagged parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], role: ParamRole, value: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("parameter {name:?} registered twice")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "parameter {name:?}: shape {shape:?} vs {} values",
                value.len()
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            role,
            value,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_where(&self, pred: impl Fn(&ParamRole) -> bool) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| pred(&p.role)).map(|(id, _)| id).collect()
    }

    /// Scalar count of parameters matching `pred`.
    pub fn count(&self, pred: impl Fn(&ParamRole) -> bool) -> usize {
        self.params.iter().filter(|p| pred(&p.role)).map(|p| p.value.len()).sum()
    }

    /// Size of Γ, the shared trainable weights.
    pub fn shared_trainable_count(&self) -> usize {
        self.count(|r| *r == ParamRole::Shared)
    }

    /// Subjects owning at least one parameter of the given side.
    pub fn subjects(&self, target_side: bool) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .filter_map(|p| match (&p.role, target_side) {
                (ParamRole::Target(s), true) | (ParamRole::Retrieved(s), false) => Some(s.clone()),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    role: p.role.clone(),
                    value: p.value.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for p in &self.params {
            if let Some(i) = p.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "parameter {:?} has non-finite value {:?} at {i}",
                    p.name, p.value[i]
                )));
            }
        }
        Ok(())
    }

    /// Copies values of same-named, same-shaped parameters from `other`.
    /// Missing names are an error.
    pub fn assign_from(&mut self, other: &ParamStore<T>, pred: impl Fn(&ParamRole) -> bool) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| pred(&p.role)) {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {:?}", p.name)))?;
            let src = other.param(id);
            if src.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?}: checkpoint shape {:?}, model shape {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&src.value);
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Untracked parameters
/// never receive a buffer, which lets layers skip their weight gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
    tracked: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    /// Tracks every parameter.
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::masked(store, |_| true)
    }

    /// Tracks parameters whose role satisfies `pred`.
    pub fn masked(store: &ParamStore<T>, pred: impl Fn(&ParamRole) -> bool) -> Self {
        Self {
            slots: vec![None; store.len()],
            tracked: store.params.iter().map(|p| pred(&p.role)).collect(),
        }
    }

    pub fn tracks(&self, id: ParamId) -> bool {
        self.tracked.get(id.0).copied().unwrap_or(false)
    }

    /// Zero-initialized on first access; `None` for untracked parameters.
    pub fn slot(&mut self, id: ParamId, len: usize) -> Option<&mut [T]> {
        if !self.tracks(id) {
            return None;
        }
        Some(self.slots[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (id, g) in self.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for parameter #{}", id.0)));
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"RANFCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload section.
    offset: u64,
    role: ParamRole,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Writes `MAGIC`, a little-endian u64 header length, the JSON header and
/// the little-endian f32 payloads.
pub fn save_params<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut offset = 0u64;
    let tensors = store
        .params
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                dtype: "f32".into(),
                offset,
                role: p.role.clone(),
            };
            offset += 4 * p.value.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        metadata: metadata.clone(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &store.params {
        for v in &p.value {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Inverse of [`save_params`].
pub fn load_params<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, BTreeMap<String, serde_json::Value>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter container".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    for t in header.tensors {
        if t.dtype != "f32" {
            return Err(bad(format!("tensor {:?} has unsupported dtype {:?}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(bad(format!("tensor {:?} runs past the end of the file", t.name)));
        }
        let value = payload[start..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        store.add(t.name, &t.shape, t.role, value)?;
    }
    Ok((store, header.metadata))
}
