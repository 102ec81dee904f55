//! Named model parameters with gradients, and their wire format.
//!
//! A `ParameterSet` is the unit exchanged between clients and the server:
//! a flat, ordered collection of named tensors. Iteration order is the
//! definition order and is identical across processes that build the same
//! model, which the federated protocol relies on.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FLPM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Register a parameter. Names must be unique; the gradient starts at zero.
    pub fn define(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.entries[id].grad
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].grad
    }

    /// Split access for a weight/bias pair during backward: the weight value
    /// plus mutable gradients of both entries, without copies.
    pub fn entry_pair_mut(&mut self, wid: usize, bid: usize) -> (&Tensor, &mut Tensor, &mut Tensor) {
        let [w, b] = self
            .entries
            .get_disjoint_mut([wid, bid])
            .expect("weight and bias ids are distinct and in range");
        let ParamEntry { ref value, ref mut grad, .. } = *w;
        (value, grad, &mut b.grad)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// True when both sets have identical names, order and shapes.
    pub fn same_structure(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// values += factor * (other values). Structures must match.
    pub fn add_scaled_values(&mut self, other: &ParameterSet, factor: Real) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::protocol("parameter set structure mismatch".to_string()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            for (d, s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d += factor * s;
            }
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.same_structure(other)
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> Real {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, Real::max)
    }

    /// FNV-1a over names, shapes and value bytes. Stable audit checksum.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in e.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                eat(&(*v as f64).to_le_bytes());
            }
        }
        h
    }

    /// Versioned binary layout: magic, format version, then per entry the
    /// name, rank, dims and raw little-endian values. Values are stored as
    /// f64 regardless of build precision (f32 builds widen losslessly).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.value.rank() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&(*v as f64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParameterSet> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::data(format!("{}: truncated header", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::data(format!("{}: bad magic bytes", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported format version {version}",
                path.display()
            )));
        }
        let mut set = ParameterSet::new();
        loop {
            let name_len = match read_u32_opt(&mut r)? {
                Some(n) => n as usize,
                None => break,
            };
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::data("parameter name is not valid UTF-8".to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b) as Real);
            }
            set.define(name, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// None at clean EOF, Some(value) otherwise.
fn read_u32_opt(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::data("truncated parameter entry".to_string()));
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.define("layer0.weight", Tensor::new(vec![2, 3], vec![0.5, -1.0, 3.25, 0.0, 2.0, -0.125]).unwrap())
            .unwrap();
        ps.define("layer0.bias", Tensor::from_slice(&[1.0, -2.0, 0.0625])).unwrap();
        ps
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = sample_set();
        assert!(ps.define("layer0.bias", Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ps = sample_set();
        let dir = std::env::temp_dir().join(format!("fedcache-params-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.flpm");
        ps.save(&path).unwrap();
        let back = ParameterSet::load(&path).unwrap();
        assert!(ps.bit_eq(&back));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = std::env::temp_dir().join(format!("fedcache-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.flpm");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = ParameterSet::load(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checksum_tracks_values() {
        let ps = sample_set();
        let mut ps2 = sample_set();
        assert_eq!(ps.checksum(), ps2.checksum());
        ps2.value_mut(0).data_mut()[0] += 1.0;
        assert_ne!(ps.checksum(), ps2.checksum());
    }
}
