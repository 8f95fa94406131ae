//! Named parameter collections, their binding onto a tape, and the
//! parameter container file.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "VNPT"  u32 version=1
//! u32 header_len, header bytes (UTF-8, empty for a bare parameter file)
//! u32 count
//! count x { u32 name_len, name, u32 rank, rank x u64 extent, f64 values (row-major) }
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor under `name`. Panics on a duplicate name (a model-construction bug).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian-initialized parameter with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut SplitMix64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| T::of(std * rng.normal()));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Replace every tensor from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("parameter names differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("assign_from", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Record every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Record every parameter as a constant (no gradients kept).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self, header: &str) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(b"VNPT");
        w.u32(1);
        w.string(header);
        w.u32(self.tensors.len() as u32);
        for (name, t) in self.iter() {
            w.string(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data().iter().map(|x| x.to_f64_lossy()));
        }
        w.buf
    }

    /// Parse a container, returning the header text and the parameters.
    pub fn from_bytes(bytes: &[u8]) -> Result<(String, Self)> {
        let mut r = Reader::new(bytes);
        if r.bytes(4, "magic")? != b"VNPT" {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected VNPT".into() });
        }
        let version = r.u32("version")?;
        if version != 1 {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let header = r.string("header")?;
        let count = r.u32("entry count")?;
        let mut set = Self::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            if set.index.contains_key(&name) {
                return r.fail(format!("duplicate parameter {name}"));
            }
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return r.fail(format!("implausible rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(n) = n else { return r.fail("extent overflow") };
            let vals = r.f64s(n, "parameter values")?;
            set.add(name, Tensor::from_f64(&shape, &vals)?);
        }
        if !r.at_end() {
            return r.fail("trailing bytes after last parameter");
        }
        Ok((header, set))
    }

    pub fn save(&self, path: impl AsRef<Path>, header: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(header))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(String, Self)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Parameters taken from variables already on a tape, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients for each parameter, aligned with the originating [`ParamSet`].
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.take(v.id())).collect()
    }
}
