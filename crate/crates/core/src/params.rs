//! Named parameter collections and the `CSLW` checkpoint format.
//!
//! Layout (little-endian): magic `CSLW`, version `u32`, parameter count
//! `u32`, then per parameter: name length `u16`, UTF-8 name, rank `u8`, one
//! `u32` per dimension, and the values as 32-bit floats.

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{put_f32s, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSLW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Initialization std for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Truncated-normal weight of the given shape.
    pub fn init_weight(&mut self, name: &str, shape: &[usize], rng: &mut SeedRng) -> Result<ParamId> {
        let n = shape.iter().product::<usize>();
        let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(INIT_STD)).collect();
        self.insert(name, Tensor::from_f64(shape.to_vec(), &data)?)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Places every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values from `other` for every name both stores share with
    /// equal shapes. Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(src) = other.by_name(name) {
                if src.shape() == self.values[i].shape() {
                    self.values[i] = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

pub fn encode_checkpoint<T: Real>(params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.rank() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let f: Vec<f32> = value.data().iter().map(|&x| Real::to_f64(x) as f32).collect();
        put_f32s(&mut out, &f);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "parameter name")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if shape.contains(&0) {
            return Err(Error::format(at, format!("zero dimension in `{name}`")));
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(at, "dimension overflow"))?;
        let data = r.f32s(n, "parameter payload")?;
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    if !r.is_at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last parameter"));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Real>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut rng = SeedRng::new(5);
        let mut p = ParamStore::new();
        p.init_weight("w", &[3, 4], &mut rng).unwrap();
        p.init_zeros("b", &[4]).unwrap();
        p.insert("odd", Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap()).unwrap();
        p
    }

    #[test]
    fn roundtrip_bit_exact() {
        let p = sample();
        let bytes = encode_checkpoint(&p).unwrap();
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_checkpoint(&q).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::<f32>::new();
        p.init_zeros("a", &[1]).unwrap();
        assert!(p.init_zeros("a", &[1]).is_err());
    }
}
