//! Named parameter collections and the `SFWT` binary container.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::{Result, Tensor, TensorError};

pub const SFWT_MAGIC: &[u8; 4] = b"SFWT";
pub const SFWT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("invalid tensor record `{name}`: {source}")]
    BadTensor { name: String, source: TensorError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Ordered, named collection of tensors. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a trainable tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.insert_with(name.into(), tensor, true);
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.insert_with(name.into(), tensor, false);
    }

    fn insert_with(&mut self, name: String, tensor: Tensor, trainable: bool) {
        match self.index.get(&name) {
            Some(&i) => {
                self.entries[i].tensor = tensor;
                self.entries[i].trainable = trainable;
            }
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push(Entry { name, tensor, trainable });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|&i| self.entries[i].trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|e| (e.name.as_str(), &mut e.tensor))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Entries whose name starts with `prefix`, in order.
    pub fn section(&self, prefix: &str) -> ModelParams {
        let mut out = ModelParams::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            out.insert_with(e.name.clone(), e.tensor.clone(), e.trainable);
        }
        out
    }

    /// Inserts or replaces every entry of `other`.
    pub fn merge(&mut self, other: &ModelParams) {
        for e in &other.entries {
            self.insert_with(e.name.clone(), e.tensor.clone(), e.trainable);
        }
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| other.get(&e.name).map(|t| (e, t)))
            .flat_map(|(e, t)| e.tensor.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.tensor.max_abs()).fold(0.0, f64::max)
    }

    /// Binds every entry as a graph leaf; trainable entries receive gradients.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                let id = if e.trainable { graph.param(e.tensor.clone()) } else { graph.input(e.tensor.clone()) };
                (e.name.clone(), id)
            })
            .collect::<Vec<_>>();
        let index = ids.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Binding { ids, index }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(SFWT_MAGIC)?;
        w.write_all(&SFWT_VERSION.to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.tensor.rank() as u32).to_le_bytes())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Decodes a container. All loaded tensors are trainable.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CodecError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != SFWT_MAGIC {
            return Err(CodecError::BadMagic(magic));
        }
        let version = read_u32(&mut r, "version")?;
        if version != SFWT_VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let mut params = ModelParams::new();
        while !r.is_empty() {
            let len = read_u32(&mut r, "name length")? as usize;
            if r.len() < len {
                return Err(CodecError::Truncated("name"));
            }
            let name = std::str::from_utf8(&r[..len]).map_err(|_| CodecError::BadName)?.to_string();
            r = &r[len..];
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, "extent")? as usize);
            }
            let numel: usize = shape.iter().product();
            if r.len() < numel * 8 {
                return Err(CodecError::Truncated("data"));
            }
            let data = r[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[numel * 8..];
            let tensor = Tensor::new(shape, data).map_err(|source| CodecError::BadTensor { name: name.clone(), source })?;
            params.insert(name, tensor);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, CodecError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8], what: &'static str) -> std::result::Result<(), CodecError> {
    if r.len() < out.len() {
        return Err(CodecError::Truncated(what));
    }
    out.copy_from_slice(&r[..out.len()]);
    *r = &r[out.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &'static str) -> std::result::Result<u32, CodecError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], what: &'static str) -> std::result::Result<u64, CodecError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Graph node ids of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<(String, NodeId)>,
    index: HashMap<String, usize>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i].1)
            .ok_or_else(|| TensorError::ShapeMismatch { op: "bind", detail: format!("unknown parameter `{name}`") })
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).map(|&i| self.ids[i].1)
    }

    /// Gradients keyed by parameter name.
    pub fn collect(&self, grads: &Gradients) -> NamedGrads {
        let map = self
            .ids
            .iter()
            .filter_map(|(n, id)| grads.wrt(*id).map(|g| (n.clone(), g.clone())))
            .collect();
        NamedGrads { map }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NamedGrads {
    map: HashMap<String, Tensor>,
}

impl NamedGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"SFWT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(&bytes[12..13], b"w");
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[33..41].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 49);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(ModelParams::from_bytes(b"NOPE\x01\0\0\0"), Err(CodecError::BadMagic(_))));
        let mut p = ModelParams::new();
        p.insert("x", Tensor::from_vec(vec![1.0, 2.0]));
        let bytes = p.to_bytes();
        assert!(matches!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]), Err(CodecError::Truncated(_))));
    }

    #[test]
    fn section_keeps_prefix_in_order() {
        let mut p = ModelParams::new();
        p.insert("enc.a", Tensor::scalar(1.0));
        p.insert("dec.a", Tensor::scalar(2.0));
        p.insert("enc.b", Tensor::scalar(3.0));
        let s = p.section("enc.");
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["enc.a", "enc.b"]);
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 1..4), any::<u64>()), 0..6)
        ) {
            let mut p = ModelParams::new();
            for (i, (shape, bits)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|k| f64::from_bits(bits.wrapping_mul(k as u64 + 1) & !(0x7ffu64 << 52) | (0x3ffu64 << 52)))
                    .collect();
                p.insert(format!("t{i}.ü"), Tensor::new(shape.clone(), data).unwrap());
            }
            let bytes = p.to_bytes();
            let back = ModelParams::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
