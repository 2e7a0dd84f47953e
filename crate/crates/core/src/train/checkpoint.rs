//! Binary checkpoints.
//!
//! ```text
//! "TCNA" | u16 version | u32 entries
//! entry: u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | u32 dims[ndim] | payload (LE)
//! u32 crc32 of everything after the magic
//! ```
//!
//! Metadata travels as ordinary f64 tensors named `meta.*`. 64-bit integers
//! are split into four 16-bit limbs so they survive the f64 encoding exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{join, Module, Slot};
use crate::tensor::{DType, Element, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TCNA";
pub const VERSION: u16 = 1;
pub const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

fn u64_to_limbs(v: u64) -> [f64; 4] {
    [0, 16, 32, 48].map(|s| ((v >> s) & 0xffff) as f64)
}

fn limbs_to_u64(l: &[f64]) -> Option<u64> {
    l.iter().enumerate().try_fold(0u64, |acc, (i, &x)| {
        (x >= 0.0 && x < 65536.0 && x.fract() == 0.0).then(|| acc | ((x as u64) << (16 * i)))
    })
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    /// Inserts or replaces a tensor.
    pub fn insert<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size_in_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let entry = Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        };
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.find(name).map(|e| e.shape.as_slice())
    }

    /// Reads a tensor, converting from the stored dtype if needed.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => e
                .payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => e.payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        Tensor::new(e.shape.clone(), data)
    }

    pub fn set_meta(&mut self, key: &str, values: &[f64]) {
        let t = Tensor::new(vec![values.len().max(1)], if values.is_empty() { vec![0.0] } else { values.to_vec() })
            .expect("non-empty");
        self.insert(&format!("{META_PREFIX}{key}"), &t);
    }

    pub fn meta(&self, key: &str) -> Result<Vec<f64>> {
        Ok(self.get::<f64>(&format!("{META_PREFIX}{key}"))?.into_data())
    }

    pub fn set_meta_u64(&mut self, key: &str, values: &[u64]) {
        let limbs: Vec<f64> = values.iter().flat_map(|&v| u64_to_limbs(v)).collect();
        self.set_meta(key, &limbs);
    }

    pub fn meta_u64(&self, key: &str) -> Result<Vec<u64>> {
        let limbs = self.meta(key)?;
        if limbs.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("`{META_PREFIX}{key}` is not a u64 record")));
        }
        limbs
            .chunks(4)
            .map(|c| limbs_to_u64(c).ok_or_else(|| Error::Checkpoint(format!("`{META_PREFIX}{key}` has an invalid limb"))))
            .collect()
    }

    /// Stores every tensor of `model` under `prefix`.
    pub fn store_module<T: Element, M: Module<T> + ?Sized>(&mut self, model: &M, prefix: &str) {
        model.visit(prefix, &mut |name, t| self.insert(name, t));
    }

    pub fn from_module<T: Element, M: Module<T> + ?Sized>(model: &M) -> Self {
        let mut c = Self::new();
        c.store_module(model, "");
        c
    }

    /// Overwrites the tensors of `model` with the entries under `prefix`.
    ///
    /// Every model tensor must be present with its exact shape, and every
    /// non-metadata entry under `prefix` must belong to the model.
    pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(&self, model: &mut M, prefix: &str) -> Result<()> {
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        model.visit(prefix, &mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
        let mut loaded = HashMap::with_capacity(expected.len());
        for (name, shape) in &expected {
            let stored = self.shape(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{name}` (model expects shape {shape:?})"))
            })?;
            if stored != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {stored:?} in the checkpoint but the model expects {shape:?}; \
                     check that the model configuration matches the one used for training"
                )));
            }
            loaded.insert(name.clone(), self.get::<T>(name)?);
        }
        let scope = if prefix.is_empty() { String::new() } else { join(prefix, "") };
        if let Some(extra) = self
            .names()
            .filter(|n| n.starts_with(&scope) && !n.starts_with(META_PREFIX))
            .find(|n| !loaded.contains_key(*n))
        {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}` for this model")));
        }
        model.visit_mut(prefix, &mut |name, slot| {
            let t = loaded.remove(name).expect("checked above");
            match slot {
                Slot::Param { value, .. } | Slot::Buffer(value) => *value = t,
            }
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(err("bad magic, expected \"TCNA\"".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = u16::from_le_bytes(r.take(2).map_err(&err)?.try_into().unwrap());
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let r = &mut r;
        let count = r.u32().map_err(&err)?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2).map_err(&err)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len).map_err(&err)?)
                .map_err(|_| err(format!("entry name at offset {at} is not UTF-8")))?
                .to_string();
            let code = r.take(1).map_err(&err)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| err(format!("unknown dtype code {code} for `{name}` at offset {}", r.pos - 1)))?;
            let ndim = r.take(1).map_err(&err)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32().map_err(&err)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(dtype.size_in_bytes(), |a, &d| a.checked_mul(d))
                .ok_or_else(|| err(format!("implausible shape {shape:?} for `{name}`")))?;
            if ndim == 0 || shape.contains(&0) {
                return Err(err(format!("invalid shape {shape:?} for `{name}`")));
            }
            let payload = r.take(n).map_err(&err)?.to_vec();
            if entries.iter().any(|e: &Entry| e.name == name) {
                return Err(err(format!("duplicate entry `{name}`")));
            }
            entries.push(Entry {
                name,
                dtype,
                shape,
                payload,
            });
        }
        let body_end = r.pos;
        let stored = u32::from_le_bytes(r.take(4).map_err(&err)?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(err(format!("{} unexpected bytes after offset {}", bytes.len() - r.pos, r.pos)));
        }
        let actual = crc32fast::hash(&bytes[4..body_end]);
        if stored != actual {
            return Err(err(format!(
                "checksum mismatch (stored {stored:#010x}, computed {actual:#010x}); the file is corrupt"
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!(
                "truncated at offset {}: needed {n} more bytes",
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::{Branch, BranchConfig};
    use crate::nn::{state_hash, Mode};
    use crate::tensor::Rng;

    fn small() -> BranchConfig {
        BranchConfig {
            channels: 6,
            dilations: vec![1, 2],
            ..BranchConfig::new(3, 4, 2, 3)
        }
    }

    fn trained_branch() -> Branch<f32> {
        let mut rng = Rng::new(1);
        let mut b = Branch::new(small(), &mut rng).unwrap();
        // move the running statistics away from their initial values
        let x = Tensor::normal(&mut rng, 0.5, 2.0, [4, 3, 7]).unwrap();
        b.forward(&x, Mode::Train, Some(&mut rng)).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = trained_branch();
        let mut ck = Checkpoint::from_module(&b);
        ck.set_meta("epoch", &[3.0]);
        ck.set_meta_u64("rng", &[u64::MAX, 0x0123_4567_89ab_cdef]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("m.ckpt")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta_u64("rng").unwrap(), vec![u64::MAX, 0x0123_4567_89ab_cdef]);

        let mut fresh = Branch::<f32>::new(small(), &mut Rng::new(9)).unwrap();
        assert_ne!(state_hash(&fresh), state_hash(&b));
        back.load_module(&mut fresh, "").unwrap();
        assert_eq!(state_hash(&fresh), state_hash(&b));
    }

    #[test]
    fn file_round_trip() {
        let ck = Checkpoint::from_module(&trained_branch());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let again = Checkpoint::load(&p).unwrap();
        let q = dir.path().join("b.ckpt");
        again.save(&q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_module(&trained_branch()).to_bytes();
        let p = Path::new("m.ckpt");
        let msg = |b: &[u8]| Checkpoint::from_bytes(b, p).unwrap_err().to_string();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(msg(&flipped).contains("checksum"));
        assert!(msg(&bytes[..bytes.len() - 10]).contains("truncated at offset"));
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(msg(&magic).contains("magic"));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(msg(&version).contains("version"));

        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f32>::zeros([2]));
        let mut raw = ck.to_bytes();
        let code_at = 4 + 2 + 4 + 2 + 1;
        raw[code_at] = 5;
        let end = raw.len() - 4;
        let crc = crc32fast::hash(&raw[4..end]);
        raw[end..].copy_from_slice(&crc.to_le_bytes());
        assert!(msg(&raw).contains("unknown dtype code 5"));
    }

    #[test]
    fn shape_mismatch_is_named() {
        let ck = Checkpoint::from_module(&trained_branch());
        let other = BranchConfig {
            channels: 8,
            ..small()
        };
        let mut wrong = Branch::<f32>::new(other, &mut Rng::new(2)).unwrap();
        let err = ck.load_module(&mut wrong, "").unwrap_err().to_string();
        assert!(err.contains("embed.weight") && err.contains("[6, 3, 1]"), "{err}");
    }

    #[test]
    fn f32_entries_widen_exactly() {
        let mut ck = Checkpoint::new();
        let t = Tensor::new(vec![3], vec![0.1f32, -2.5, 1e-30]).unwrap();
        ck.insert("t", &t);
        let wide: Tensor<f64> = ck.get("t").unwrap();
        assert_eq!(wide.cast::<f32>(), t);
    }
}
