//! Named trainable parameters and their on-disk form.
//!
//! A parameter set is stored as two files: `manifest.json` listing each
//! tensor's name, shape and byte offset, and `params.bin` holding the raw
//! little-endian f32 values back to back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_to_string, to_json_bytes, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "glosslab-tensors";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name: name.to_string(), value, grad });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a backward pass's gradients into the stored buffers.
    pub fn accumulate(&mut self, grads: &super::Gradients) {
        for (id, g) in grads.params() {
            let dst = &mut self.params[id.0].grad;
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    /// Mutable value and read-only gradient of one parameter.
    pub(crate) fn value_and_grad(&mut self, id: ParamId) -> (&mut [f32], &[f32]) {
        let p = &mut self.params[id.0];
        (p.value.data_mut(), &p.grad)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
                offset += 4 * p.value.numel() as u64;
                e
            })
            .collect();
        Manifest { format: FORMAT.to_string(), version: VERSION, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.num_scalars());
        for p in &self.params {
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(PARAMS_FILE), &self.to_bytes())?;
        write_atomic(&dir.join(MANIFEST_FILE), &to_json_bytes(&self.manifest())?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = read_to_string(&dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format("tensor manifest", e.to_string()))?;
        let bytes = read_bytes(&dir.join(PARAMS_FILE))?;
        Self::from_parts(&manifest, &bytes)
    }

    pub fn from_parts(manifest: &Manifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::format(
                "tensor manifest",
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > bytes.len() {
                return Err(Error::format("tensor data", format!("tensor {} overruns the data file", e.name)));
            }
            let data =
                bytes[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if store.id(&e.name).is_some() {
                return Err(Error::format("tensor manifest", format!("duplicate tensor {}", e.name)));
            }
            store.add(&e.name, Tensor::new(e.shape.clone(), data)?);
        }
        Ok(store)
    }

    /// Overwrites values from `other` for every name both stores share and
    /// checks shapes; fails if a parameter of `self` is missing.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {}", p.name)))?;
            let v = other.value(src);
            if v.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: p.value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
