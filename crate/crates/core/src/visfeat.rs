//! Visual relationship features.
//!
//! Features are computed outside this crate (by a CNN over the subject,
//! object and enclosing boxes) and delivered in the RFV1 file format:
//!
//! ```text
//! "RFV1"  u32 dim  u32 count
//! count x { u16 key_len, key bytes (UTF-8 "image_id|subj_id|obj_id"), dim x f32 }
//! ```
//!
//! All integers and floats are little-endian. [`stub_visual`] provides a
//! deterministic stand-in when no feature file is available.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader};
use crate::rng;

const MAGIC: &[u8; 4] = b"RFV1";
pub const DEFAULT_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationshipKey {
    pub image_id: String,
    pub subject: usize,
    pub object: usize,
}

impl RelationshipKey {
    pub fn new(image_id: impl Into<String>, subject: usize, object: usize) -> Result<Self> {
        if subject == object {
            return Err(Error::invalid(format!("relationship key with subject == object ({subject})")));
        }
        Ok(RelationshipKey {
            image_id: image_id.into(),
            subject,
            object,
        })
    }

    /// Parses `image_id|subj|obj`; the image id may itself contain `|`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.rsplitn(3, '|');
        let (obj, subj, image) = (parts.next(), parts.next(), parts.next());
        match (image, subj.and_then(|v| v.parse().ok()), obj.and_then(|v| v.parse().ok())) {
            (Some(image), Some(subj), Some(obj)) => RelationshipKey::new(image, subj, obj),
            _ => Err(Error::Parse(format!("bad relationship key '{s}'"))),
        }
    }
}

impl fmt::Display for RelationshipKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.image_id, self.subject, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    entries: HashMap<RelationshipKey, Vec<f64>>,
}

/// What to do when a pair has no stored feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Error,
    Stub { seed: u64 },
    Skip,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        Ok(FeatureStore {
            dim,
            entries: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: RelationshipKey, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature for {key}")));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::invalid(format!("duplicate feature key {key}")));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn get_visual(&self, key: &RelationshipKey) -> Result<&[f64]> {
        self.entries
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature(key.to_string()))
    }

    /// Resolves a key under `policy`; `Ok(None)` means skip the pair.
    pub fn resolve(&self, key: &RelationshipKey, policy: MissingPolicy) -> Result<Option<Vec<f64>>> {
        match (self.entries.get(key), policy) {
            (Some(v), _) => Ok(Some(v.clone())),
            (None, MissingPolicy::Error) => Err(Error::MissingFeature(key.to_string())),
            (None, MissingPolicy::Stub { seed }) => Ok(Some(stub_visual(key, self.dim, seed))),
            (None, MissingPolicy::Skip) => Ok(None),
        }
    }

    /// RFV1 bytes with entries sorted by key.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut keys: Vec<&RelationshipKey> = self.entries.keys().collect();
        keys.sort();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
        for k in keys {
            let text = k.to_string();
            out.extend_from_slice(&(text.len() as u16).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            for v in &self.entries[k] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Parse("byte offset 0: bad magic, expected RFV1".into()));
        }
        let dim = r.u32("dimension")? as usize;
        let count = r.u32("entry count")? as usize;
        let mut store = FeatureStore::new(dim).map_err(|e| Error::Parse(format!("byte offset 4: {e}")))?;
        for _ in 0..count {
            let start = r.offset();
            let len = r.u16("key length")? as usize;
            let key = std::str::from_utf8(r.take(len, "key")?)
                .map_err(|_| Error::Parse(format!("byte offset {start}: key is not UTF-8")))?;
            let key = RelationshipKey::parse(key).map_err(|e| Error::Parse(format!("byte offset {start}: {e}")))?;
            let v = r
                .take(dim * 4, "feature vector")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store
                .insert(key, v)
                .map_err(|e| Error::Parse(format!("byte offset {start}: {e}")))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Parse(format!(
                "byte offset {}: {} trailing bytes",
                r.offset(),
                r.remaining()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Deterministic pseudo-feature with components in `[-1, 1)`.
///
/// Component `i` is `splitmix64(fnv1a64(key) ^ splitmix64(seed) + i)` mapped
/// to `[-1, 1)` through its top 53 bits, where `key` is the
/// `image_id|subj|obj` string. Pure integer arithmetic, so the output is the
/// same on every platform.
pub fn stub_visual(key: &RelationshipKey, dim: usize, seed: u64) -> Vec<f64> {
    let base = rng::fnv1a64(key.to_string().as_bytes()) ^ rng::splitmix64(seed);
    (0..dim as u64)
        .map(|i| rng::unit_symmetric(rng::splitmix64(base.wrapping_add(i))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(img: &str, s: usize, o: usize) -> RelationshipKey {
        RelationshipKey::new(img, s, o).unwrap()
    }

    /// RFV1 writer written against the format description only.
    fn handmade(dim: u32, entries: &[(&str, Vec<f32>)]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"RFV1");
        b.extend_from_slice(&dim.to_le_bytes());
        b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (k, v) in entries {
            b.extend_from_slice(&(k.len() as u16).to_le_bytes());
            b.extend_from_slice(k.as_bytes());
            for x in v {
                b.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        b
    }

    #[test]
    fn loads_handmade_file() {
        let bytes = handmade(4, &[("a.jpg|0|1", vec![0.1, -2.0, 3.5, 1e-7]), ("a.jpg|1|0", vec![0.0, 1.0, 2.0, 3.0])]);
        let s = FeatureStore::from_bytes(&bytes).unwrap();
        assert_eq!((s.len(), s.dim()), (2, 4));
        let v = s.get_visual(&key("a.jpg", 0, 1)).unwrap();
        assert_eq!(v.iter().map(|x| *x as f32).collect::<Vec<_>>(), vec![0.1f32, -2.0, 3.5, 1e-7]);
        assert_eq!(s.to_bytes(), bytes);
    }

    #[test]
    fn empty_file_is_valid() {
        let s = FeatureStore::from_bytes(&handmade(8, &[])).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.dim(), 8);
    }

    #[test]
    fn truncation_and_corruption() {
        let mut bytes = handmade(2, &[("x|0|1", vec![1.0, 2.0]), ("x|1|0", vec![3.0, 4.0])]);
        bytes.pop();
        let err = FeatureStore::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("offset 34"), "{err}");
        let mut bad = handmade(2, &[]);
        bad[3] = b'2';
        assert!(FeatureStore::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let dup = handmade(1, &[("x|0|1", vec![1.0]), ("x|0|1", vec![2.0])]);
        let err = FeatureStore::from_bytes(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("offset 23"), "{err}");
    }

    #[test]
    fn lookup_and_policies() {
        let mut s = FeatureStore::new(3).unwrap();
        s.insert(key("i", 0, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.get_visual(&key("i", 0, 1)).unwrap(), s.get_visual(&key("i", 0, 1)).unwrap());
        let missing = key("i", 1, 0);
        assert!(matches!(s.get_visual(&missing), Err(Error::MissingFeature(k)) if k == "i|1|0"));
        assert_eq!(s.resolve(&missing, MissingPolicy::Skip).unwrap(), None);
        assert_eq!(
            s.resolve(&missing, MissingPolicy::Stub { seed: 2 }).unwrap().unwrap(),
            stub_visual(&missing, 3, 2)
        );
        assert!(s.resolve(&missing, MissingPolicy::Error).is_err());
    }

    #[test]
    fn key_format() {
        let k = RelationshipKey::parse("dir|img.jpg|3|12").unwrap();
        assert_eq!(k, key("dir|img.jpg", 3, 12));
        assert_eq!(k.to_string(), "dir|img.jpg|3|12");
        assert!(RelationshipKey::parse("img|1|1").is_err());
        assert!(RelationshipKey::parse("img|x|1").is_err());
    }

    #[test]
    fn stub_properties() {
        let a = stub_visual(&key("img", 0, 1), 64, 9);
        assert_eq!(a, stub_visual(&key("img", 0, 1), 64, 9));
        assert_ne!(a, stub_visual(&key("img", 1, 0), 64, 9));
        assert_ne!(a, stub_visual(&key("img", 0, 1), 64, 10));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let one = stub_visual(&key("img", 0, 1), 1, 0);
        assert_eq!(one.len(), 1);
        assert!((-1.0..=1.0).contains(&one[0]));
    }

    #[test]
    fn stub_is_platform_stable() {
        // Frozen from the integer definition; any change breaks portability.
        let v = stub_visual(&key("img.jpg", 0, 1), 3, 0);
        let base = crate::rng::fnv1a64(b"img.jpg|0|1") ^ crate::rng::splitmix64(0);
        let expect: Vec<f64> = (0..3)
            .map(|i| {
                let w = crate::rng::splitmix64(base.wrapping_add(i));
                2.0 * ((w >> 11) as f64 / 9007199254740992.0) - 1.0
            })
            .collect();
        assert_eq!(v, expect);
    }
}
