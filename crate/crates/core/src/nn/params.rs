//! Named parameter storage and the binary parameter archive.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Parameters (trainable) and buffers (e.g. batch-norm population statistics)
/// of one model. Each store has a process-unique id so a [`super::Graph`] can
/// bind several models at once.
pub struct ParamStore<T: Real = f32> {
    uid: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Real> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.entries.iter().map(|e| (&e.name, e.value.shape()))).finish()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    /// Clones get a fresh identity: they are independent parameter sets.
    fn clone(&self) -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), entries: self.entries.clone() }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), entries: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        value.expect_shape(entry.value.shape())?;
        entry.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Flattened trainable parameters, in entry order.
    pub fn flat_trainable(&self) -> Vec<T> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`Self::flat_trainable`].
    pub fn set_flat_trainable(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::Shape(format!(
                "expected {} trainable values, got {}",
                self.num_trainable(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Draws `shape` from `N(mean, std^2)`.
pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(mean + std * z)
    })
}

/// Draws `shape` from `U(-bound, bound)`.
pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

const ARCHIVE_MAGIC: &[u8; 8] = b"FWPARAM\0";
pub const ARCHIVE_VERSION: u32 = 1;

/// Ordered collection of named `f32` tensors with a stable binary encoding:
///
/// ```text
/// magic "FWPARAM\0" | u32 version | u32 count |
///   count x (u32 name_len | name | u32 ndim | ndim x u32 dim | f32 data...)
/// ```
///
/// All integers and floats are little-endian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for e in &store.entries {
            self.tensors.push((format!("{prefix}{}", e.name), e.value.clone()));
        }
    }

    /// Overwrites every entry of `store` from `{prefix}{name}`; names and
    /// shapes must match exactly.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for e in &mut store.entries {
            let key = format!("{prefix}{}", e.name);
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Corrupt(format!("archive has no tensor {key:?}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor {key:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(Error::Corrupt("not a parameter archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Version { what: "parameter archive", found: version, expected: ARCHIVE_VERSION });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes after archive", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "archive truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Streams a file through SHA-256.
pub fn sha256_file(path: &std::path::Path) -> Result<String> {
    use crate::error::IoContext;
    use std::io::Read;
    let mut file = std::fs::File::open(path).at(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl ParamStore<f32> {
    /// SHA-256 over the archive encoding of every entry (parameters and buffers).
    pub fn content_hash(&self) -> String {
        let mut a = Archive::default();
        a.push_store("", self);
        sha256_hex(&a.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add("w", normal(&mut rng, &[2, 3], 0.0, 1.0), true);
        s.add("stats", Tensor::full(&[3], 0.5), false);
        s
    }

    #[test]
    fn archive_truncation_is_reported() {
        let mut a = Archive::default();
        a.push_store("m.", &store());
        let bytes = a.to_bytes();
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
        for cut in [0, 7, 12, bytes.len() - 1] {
            match Archive::from_bytes(&bytes[..cut]) {
                Err(Error::Corrupt(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn archive_version_is_checked() {
        let mut bytes = Archive::default().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Archive::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn flat_trainable_skips_buffers() {
        let mut s = store();
        assert_eq!(s.num_trainable(), 6);
        let flat: Vec<f32> = (0..6).map(|v| v as f32).collect();
        s.set_flat_trainable(&flat).unwrap();
        assert_eq!(s.flat_trainable(), flat);
        assert_eq!(s.get(ParamId(1)).data(), &[0.5; 3]);
    }

    #[test]
    fn hash_tracks_content() {
        let s = store();
        let h = s.content_hash();
        assert_eq!(h, s.clone().content_hash());
        let mut t = s.clone();
        t.get_mut(ParamId(0)).data_mut()[0] += 1.0;
        assert_ne!(h, t.content_hash());
    }
}
