//! Binary feature cache.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFC1" | u32 d | u32 count | count × ( u16 key_len | key (UTF-8) | d × f32 )
//! ```
//!
//! Entries are written in key order so identical contents produce identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::RwLock;

use crate::error::{CoreError, Result};
use crate::schedule::AggregateMode;
use crate::vector::FeatureVector;

pub const CACHE_MAGIC: [u8; 4] = *b"PFC1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub backend_id: String,
    pub n_scales: usize,
    pub schedule_hash: String,
    pub mode: AggregateMode,
    pub image_id: String,
}

impl CacheKey {
    pub fn encode(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.backend_id,
            self.n_scales,
            self.schedule_hash,
            self.mode.as_str(),
            self.image_id
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.splitn(5, '|');
        let backend_id = parts.next()?.to_owned();
        let n_scales = parts.next()?.parse().ok()?;
        let schedule_hash = parts.next()?.to_owned();
        let mode = match parts.next()? {
            "norm" => AggregateMode::Renormalize,
            "raw" => AggregateMode::Raw,
            _ => return None,
        };
        let image_id = parts.next()?.to_owned();
        Some(Self {
            backend_id,
            n_scales,
            schedule_hash,
            mode,
            image_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCacheEntry {
    pub key: CacheKey,
    pub feature: FeatureVector,
}

/// Serializes `entries` in iteration order.
pub fn write_entries<'a, W, I>(w: &mut W, dim: usize, entries: I) -> Result<()>
where
    W: Write,
    I: ExactSizeIterator<Item = (&'a str, &'a [f32])>,
{
    let dim_u32 = u32::try_from(dim).map_err(|_| CoreError::Cache("dimension exceeds u32".into()))?;
    let count = u32::try_from(entries.len()).map_err(|_| CoreError::Cache("too many entries".into()))?;
    w.write_all(&CACHE_MAGIC)?;
    w.write_all(&dim_u32.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (key, values) in entries {
        let key_len = u16::try_from(key.len())
            .map_err(|_| CoreError::Cache(format!("key longer than {} bytes", u16::MAX)))?;
        if values.len() != dim {
            return Err(CoreError::DimensionMismatch {
                expected: dim,
                actual: values.len(),
            });
        }
        w.write_all(&key_len.to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Result of parsing a cache stream: everything readable up to the first problem.
#[derive(Debug, Default)]
pub struct ParsedCache {
    pub dim: Option<usize>,
    pub entries: Vec<(String, Vec<f32>)>,
    pub error: Option<String>,
}

pub fn read_entries<R: Read>(r: &mut R) -> ParsedCache {
    let mut out = ParsedCache::default();
    if let Err(e) = read_into(r, &mut out) {
        out.error = Some(e);
    }
    out
}

fn read_into<R: Read>(r: &mut R, out: &mut ParsedCache) -> std::result::Result<(), String> {
    let io = |e: io::Error| format!("truncated cache: {e}");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != CACHE_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 {
        return Err("zero feature dimension".into());
    }
    out.dim = Some(dim);
    r.read_exact(&mut u32buf).map_err(io)?;
    let count = u32::from_le_bytes(u32buf);
    let mut payload = vec![0u8; dim * 4];
    for i in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(io)?;
        let mut key = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut key).map_err(io)?;
        let key = String::from_utf8(key).map_err(|_| format!("entry {i} has a non-UTF-8 key"))?;
        r.read_exact(&mut payload).map_err(io)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.entries.push((key, values));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(()),
        Ok(_) => Err("trailing bytes after last entry".into()),
        Err(e) => Err(io(e)),
    }
}

/// Keyed feature store for one encoder dimension, optionally backed by a file.
///
/// Readers share a lock; writes take it exclusively. Identical puts are no-ops.
#[derive(Debug)]
pub struct FeatureCache {
    path: Option<PathBuf>,
    dim: usize,
    entries: RwLock<BTreeMap<String, Vec<f32>>>,
    dirty: AtomicBool,
    load_error: Option<String>,
}

impl FeatureCache {
    pub fn in_memory(dim: usize) -> Self {
        Self {
            path: None,
            dim,
            entries: RwLock::new(BTreeMap::new()),
            dirty: AtomicBool::new(false),
            load_error: None,
        }
    }

    /// Opens `path`. Corrupt or mismatched files are reported and their unreadable
    /// entries dropped; the next [`save`](Self::save) rewrites the file without them.
    pub fn open(path: impl Into<PathBuf>, dim: usize) -> Result<Self> {
        let path = path.into();
        let mut cache = Self::in_memory(dim);
        cache.path = Some(path.clone());
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(e.into()),
        };
        let parsed = read_entries(&mut io::BufReader::new(file));
        let mut problem = parsed.error;
        if let Some(file_dim) = parsed.dim {
            if file_dim != dim {
                problem = Some(format!("file holds d={file_dim}, expected d={dim}"));
            } else {
                cache.entries.get_mut().extend(parsed.entries);
            }
        }
        if let Some(problem) = problem {
            log::warn!(
                "feature cache {} is corrupt ({problem}); kept {} entries, evicted the rest",
                path.display(),
                cache.entries.get_mut().len()
            );
            cache.dirty.store(true, Ordering::Relaxed);
            cache.load_error = Some(problem);
        }
        Ok(cache)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Problem found while loading, if any.
    pub fn load_error(&self) -> Option<&str> {
        self.load_error.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<FeatureCacheEntry> {
        let values = self.entries.read().get(&key.encode())?.clone();
        let feature = match key.mode {
            AggregateMode::Renormalize => FeatureVector::from_normalized(values),
            AggregateMode::Raw => FeatureVector::new(values),
        }
        .ok()?;
        Some(FeatureCacheEntry {
            key: key.clone(),
            feature,
        })
    }

    pub fn put(&self, key: &CacheKey, feature: &FeatureVector) -> Result<()> {
        feature.check_dim(self.dim)?;
        let encoded = key.encode();
        if encoded.len() > usize::from(u16::MAX) {
            return Err(CoreError::Cache(format!("key `{encoded}` is too long")));
        }
        let mut entries = self.entries.write();
        if entries.get(&encoded).map(Vec::as_slice) != Some(feature.as_slice()) {
            entries.insert(encoded, feature.as_slice().to_vec());
            self.dirty.store(true, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn remove(&self, key: &CacheKey) -> bool {
        let removed = self.entries.write().remove(&key.encode()).is_some();
        if removed {
            self.dirty.store(true, Ordering::Relaxed);
        }
        removed
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.read().keys().cloned().collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries.read();
        let mut buf = Vec::with_capacity(12 + entries.len() * (self.dim * 4 + 48));
        write_entries(
            &mut buf,
            self.dim,
            entries.iter().map(|(k, v)| (k.as_str(), v.as_slice())),
        )?;
        Ok(buf)
    }

    /// Writes the cache to its file via a temporary file and rename. No-op when clean.
    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if !self.dirty.load(Ordering::Relaxed) && path.exists() {
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("pfc.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        self.dirty.store(false, Ordering::Relaxed);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(id: &str) -> CacheKey {
        CacheKey {
            backend_id: "mock-1".into(),
            n_scales: 3,
            schedule_hash: "abcd".into(),
            mode: AggregateMode::Renormalize,
            image_id: id.into(),
        }
    }

    #[test]
    fn exact_byte_layout() {
        let mut buf = Vec::new();
        write_entries(&mut buf, 2, [("ab", &[1.0f32, -2.5][..])].into_iter()).unwrap();
        let mut expected = b"PFC1".to_vec();
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn key_round_trip_allows_separator_in_image_id() {
        let mut k = key("real/cat|dog/1.png");
        k.mode = AggregateMode::Raw;
        assert_eq!(CacheKey::parse(&k.encode()), Some(k));
        assert_eq!(CacheKey::parse("nope"), None);
    }

    #[test]
    fn get_after_put_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pfc");
        let cache = FeatureCache::open(&path, 3).unwrap();
        let f = FeatureVector::from_normalized(vec![0.6, 0.8, 0.0]).unwrap();
        cache.put(&key("x"), &f).unwrap();
        assert_eq!(cache.get(&key("x")).unwrap().feature, f);
        assert!(cache.get(&key("y")).is_none());
        cache.save().unwrap();
        let reopened = FeatureCache::open(&path, 3).unwrap();
        assert_eq!(reopened.get(&key("x")).unwrap().feature, f);
        assert!(reopened.load_error().is_none());
        assert!(cache.put(&key("z"), &FeatureVector::new(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn truncated_file_keeps_prefix_and_evicts_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pfc");
        let cache = FeatureCache::open(&path, 2).unwrap();
        cache.put(&key("a"), &FeatureVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        cache.put(&key("b"), &FeatureVector::new(vec![0.0, 1.0]).unwrap()).unwrap();
        cache.save().unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();

        let damaged = FeatureCache::open(&path, 2).unwrap();
        assert!(damaged.load_error().is_some());
        assert!(damaged.get(&key("a")).is_some());
        assert!(damaged.get(&key("b")).is_none());
        damaged.save().unwrap();
        assert!(FeatureCache::open(&path, 2).unwrap().load_error().is_none());
    }

    #[test]
    fn garbage_and_wrong_dimension_are_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pfc");
        fs::write(&path, b"XXXXgarbage").unwrap();
        let c = FeatureCache::open(&path, 4).unwrap();
        assert!(c.is_empty());
        assert!(c.load_error().unwrap().contains("magic"));

        let other = FeatureCache::open(dir.path().join("d.pfc"), 2).unwrap();
        other.put(&key("a"), &FeatureVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        other.save().unwrap();
        let mismatched = FeatureCache::open(dir.path().join("d.pfc"), 5).unwrap();
        assert!(mismatched.is_empty());
        assert!(mismatched.load_error().is_some());
    }

    proptest! {
        #[test]
        fn put_get_put_is_byte_stable(
            vals in prop::collection::vec(prop::collection::vec(any::<u32>(), 4), 1..20)
        ) {
            let cache = FeatureCache::in_memory(4);
            for (i, v) in vals.iter().enumerate() {
                // arbitrary finite bit patterns
                let floats: Vec<f32> = v.iter().map(|b| f32::from_bits(b & 0x7f7f_ffff)).collect();
                cache.put(&key(&i.to_string()), &FeatureVector::new(floats).unwrap()).unwrap();
            }
            let first = cache.to_bytes().unwrap();
            let parsed = read_entries(&mut first.as_slice());
            prop_assert!(parsed.error.is_none());
            let again = FeatureCache::in_memory(4);
            for (k, v) in &parsed.entries {
                let k = CacheKey::parse(k).unwrap();
                let got = cache.get(&k).unwrap().feature;
                prop_assert_eq!(got.as_slice(), v.as_slice());
                again.put(&k, &got).unwrap();
            }
            prop_assert_eq!(again.to_bytes().unwrap(), first);
        }
    }
}
