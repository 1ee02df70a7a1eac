use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use diffsim_core::{AttentionSite, IPTokenSet, ProjectedLatents};
use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::key::CacheKey;
use crate::safetensors;

pub const CACHE_DIR_ENV: &str = "DIFFSIM_CACHE_DIR";

const PAYLOAD_EXT: &str = "safetensors";
const SIDECAR_EXT: &str = "json";

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ProjectedLatents,
    IpTokens,
}

/// JSON metadata stored next to every payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: u32,
    pub kind: EntryKind,
    pub key: CacheKey,
    pub dtype: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Hex SHA-256 of the payload file.
    pub checksum: String,
    pub payload_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<AttentionSite>,
    pub source_id: String,
    pub created_unix: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub entries_before: usize,
    pub bytes_before: u64,
    pub evicted: usize,
    pub bytes_after: u64,
}

/// On-disk cache rooted at a directory; one subdirectory per backend, one
/// safetensors payload plus JSON sidecar per key.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    root: PathBuf,
}

impl FeatureStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(FeatureStore { root })
    }

    /// Opens the store named by `DIFFSIM_CACHE_DIR`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => FeatureStore::open(PathBuf::from(dir)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn paths(&self, key: &CacheKey) -> (PathBuf, PathBuf) {
        let dir = self.root.join(&key.backend_id);
        let stem = key.digest();
        (
            dir.join(format!("{stem}.{PAYLOAD_EXT}")),
            dir.join(format!("{stem}.{SIDECAR_EXT}")),
        )
    }

    pub fn put(&self, key: &CacheKey, latents: &ProjectedLatents) -> Result<()> {
        let (q, k, v) = (latents.q(), latents.k(), latents.v());
        let (qd, kd, vd) = (contiguous(q), contiguous(k), contiguous(v));
        let tensors: [(&str, &[usize], &[f32]); 3] =
            [("q", q.shape(), &qd), ("k", k.shape(), &kd), ("v", v.shape(), &vd)];
        self.write_entry(
            key,
            EntryKind::ProjectedLatents,
            &tensors,
            Some(latents.site().clone()),
            latents.source_id(),
        )
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<ProjectedLatents>> {
        let Some((sidecar, mut tensors, payload)) = self.read_entry(key, EntryKind::ProjectedLatents)? else {
            return Ok(None);
        };
        let integrity = |reason: String| Error::Integrity {
            key: key.canonical(),
            path: payload.clone(),
            reason,
        };
        let mut take = |name: &str| -> Result<Array3<f32>> {
            tensors
                .remove(name)
                .ok_or_else(|| integrity(format!("missing tensor `{name}`")))?
                .into_dimensionality::<Ix3>()
                .map_err(|e| integrity(e.to_string()))
        };
        let (q, k, v) = (take("q")?, take("k")?, take("v")?);
        let site = sidecar.site.ok_or_else(|| integrity("sidecar lacks site".into()))?;
        let latents = ProjectedLatents::new(q, k, v, site, sidecar.source_id)
            .map_err(|e| integrity(e.to_string()))?;
        Ok(Some(latents))
    }

    pub fn put_tokens(&self, key: &CacheKey, tokens: &IPTokenSet) -> Result<()> {
        let data = contiguous(&tokens.tokens);
        let t: [(&str, &[usize], &[f32]); 1] = [("tokens", tokens.tokens.shape(), &data)];
        self.write_entry(key, EntryKind::IpTokens, &t, None, &tokens.source_id)
    }

    pub fn get_tokens(&self, key: &CacheKey) -> Result<Option<IPTokenSet>> {
        let Some((sidecar, mut tensors, payload)) = self.read_entry(key, EntryKind::IpTokens)? else {
            return Ok(None);
        };
        let integrity = |reason: String| Error::Integrity {
            key: key.canonical(),
            path: payload.clone(),
            reason,
        };
        let tokens: Array2<f32> = tensors
            .remove("tokens")
            .ok_or_else(|| integrity("missing tensor `tokens`".into()))?
            .into_dimensionality::<Ix2>()
            .map_err(|e| integrity(e.to_string()))?;
        Ok(Some(IPTokenSet::new(tokens, sidecar.source_id).map_err(|e| integrity(e.to_string()))?))
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.paths(key).1.exists()
    }

    fn write_entry(
        &self,
        key: &CacheKey,
        kind: EntryKind,
        tensors: &[(&str, &[usize], &[f32])],
        site: Option<AttentionSite>,
        source_id: &str,
    ) -> Result<()> {
        let (payload_path, sidecar_path) = self.paths(key);
        let dir = payload_path.parent().expect("entry paths have a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let bytes = safetensors::serialize_f32(tensors, &BTreeMap::new());
        let sidecar = Sidecar {
            format: 1,
            kind,
            key: key.clone(),
            dtype: "f32le".into(),
            shapes: tensors.iter().map(|(n, s, _)| (n.to_string(), s.to_vec())).collect(),
            checksum: hex::encode(Sha256::digest(&bytes)),
            payload_bytes: bytes.len() as u64,
            site,
            source_id: source_id.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        // payload first: readers key off the sidecar
        atomic_write(&payload_path, &bytes)?;
        atomic_write(&sidecar_path, &json)?;
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn read_entry(
        &self,
        key: &CacheKey,
        kind: EntryKind,
    ) -> Result<Option<(Sidecar, BTreeMap<String, ArrayD<f32>>, PathBuf)>> {
        let (payload_path, sidecar_path) = self.paths(key);
        let json = match fs::read(&sidecar_path) {
            Ok(j) => j,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&sidecar_path, e)),
        };
        let integrity = |path: &Path, reason: String| Error::Integrity {
            key: key.canonical(),
            path: path.to_path_buf(),
            reason,
        };
        let sidecar: Sidecar =
            serde_json::from_slice(&json).map_err(|e| integrity(&sidecar_path, e.to_string()))?;
        if sidecar.key != *key {
            return Err(integrity(&sidecar_path, "sidecar key does not match".into()));
        }
        if sidecar.kind != kind {
            return Err(integrity(&sidecar_path, format!("entry holds {:?}", sidecar.kind)));
        }
        let bytes = match fs::read(&payload_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(integrity(&payload_path, "payload missing".into()))
            }
            Err(e) => return Err(Error::io(&payload_path, e)),
        };
        let checksum = hex::encode(Sha256::digest(&bytes));
        if checksum != sidecar.checksum {
            return Err(integrity(
                &payload_path,
                format!("checksum {checksum} != recorded {}", sidecar.checksum),
            ));
        }
        let tensors = safetensors::deserialize(&bytes, &payload_path)
            .map_err(|e| integrity(&payload_path, e.to_string()))?;
        for (name, shape) in &sidecar.shapes {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(integrity(&payload_path, format!("shape of `{name}` disagrees"))),
            }
        }
        touch(&payload_path);
        Ok(Some((sidecar, tensors, payload_path)))
    }

    /// All entries as (payload path, sidecar path, bytes, last use).
    fn entries(&self) -> Result<Vec<(PathBuf, PathBuf, u64, SystemTime)>> {
        let mut out = Vec::new();
        let top = match fs::read_dir(&self.root) {
            Ok(t) => t,
            Err(e) => return Err(Error::io(&self.root, e)),
        };
        for backend_dir in top {
            let backend_dir = backend_dir.map_err(|e| Error::io(&self.root, e))?.path();
            if !backend_dir.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&backend_dir).map_err(|e| Error::io(&backend_dir, e))? {
                let path = entry.map_err(|e| Error::io(&backend_dir, e))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some(SIDECAR_EXT) {
                    continue;
                }
                let payload = path.with_extension(PAYLOAD_EXT);
                let (size, used) = match fs::metadata(&payload) {
                    Ok(m) => (m.len(), m.modified().unwrap_or(UNIX_EPOCH)),
                    Err(_) => (0, UNIX_EPOCH),
                };
                let sidecar_len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
                out.push((payload, path, size + sidecar_len, used));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.entries()?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn total_bytes(&self) -> Result<u64> {
        Ok(self.entries()?.iter().map(|e| e.2).sum())
    }

    /// Evicts least recently used entries until the cache fits in
    /// `budget_bytes`. Reads refresh an entry's payload mtime.
    pub fn gc(&self, budget_bytes: u64) -> Result<GcReport> {
        let mut entries = self.entries()?;
        let bytes_before: u64 = entries.iter().map(|e| e.2).sum();
        let mut report = GcReport {
            entries_before: entries.len(),
            bytes_before,
            evicted: 0,
            bytes_after: bytes_before,
        };
        entries.sort_by(|a, b| a.3.cmp(&b.3).then_with(|| a.1.cmp(&b.1)));
        for (payload, sidecar, size, _) in entries {
            if report.bytes_after <= budget_bytes {
                break;
            }
            // sidecar first so concurrent readers see "absent", not corrupt
            remove_if_exists(&sidecar)?;
            remove_if_exists(&payload)?;
            report.bytes_after -= size;
            report.evicted += 1;
        }
        Ok(report)
    }
}

fn contiguous<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> Vec<f32> {
    a.iter().copied().collect()
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn touch(path: &Path) {
    if let Ok(f) = File::options().append(true).open(path) {
        let _ = f.set_modified(SystemTime::now());
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffsim_testkit::{random_latents, rng};

    fn key(seed: u64) -> CacheKey {
        CacheKey {
            image_hash: format!("{seed:016x}"),
            backend_id: "toy-self".into(),
            site: "toy-self:self:layer_0:0:t500:r512".into(),
            noise_seed: seed,
            resolution: 512,
            variant: String::new(),
        }
    }

    #[test]
    fn put_get_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let p = random_latents(&mut rng(1), 2, 5, 3);
        assert!(store.get(&key(1)).unwrap().is_none());
        store.put(&key(1), &p).unwrap();
        assert_eq!(store.get(&key(1)).unwrap().unwrap(), p);
        assert!(store.get(&key(2)).unwrap().is_none());
    }

    #[test]
    fn second_put_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let p = random_latents(&mut rng(2), 1, 3, 2);
        store.put(&key(5), &p).unwrap();
        store.put(&key(5), &p).unwrap();
        assert_eq!(store.len().unwrap(), 1);
        assert_eq!(store.get(&key(5)).unwrap().unwrap(), p);
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("toy-self"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn corrupted_payload_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let p = random_latents(&mut rng(3), 1, 4, 2);
        store.put(&key(3), &p).unwrap();
        let (payload, _) = store.paths(&key(3));
        let mut bytes = fs::read(&payload).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&payload, bytes).unwrap();
        match store.get(&key(3)) {
            Err(Error::Integrity { key: k, .. }) => assert_eq!(k, key(3).canonical()),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_payload_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        store.put(&key(4), &random_latents(&mut rng(4), 1, 2, 2)).unwrap();
        fs::remove_file(store.paths(&key(4)).0).unwrap();
        assert!(matches!(store.get(&key(4)), Err(Error::Integrity { .. })));
    }

    #[test]
    fn concurrent_readers() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let p = random_latents(&mut rng(6), 2, 4, 4);
        store.put(&key(6), &p).unwrap();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..8).map(|_| s.spawn(|| store.get(&key(6)).unwrap().unwrap())).collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), p);
            }
        });
    }

    #[test]
    fn tokens_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        let tokens = IPTokenSet::new(Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f32), "img").unwrap();
        store.put_tokens(&key(7), &tokens).unwrap();
        assert_eq!(store.get_tokens(&key(7)).unwrap().unwrap(), tokens);
        assert!(matches!(store.get(&key(7)), Err(Error::Integrity { .. })));
    }

    #[test]
    fn gc_evicts_least_recently_used() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path()).unwrap();
        for i in 0..4 {
            store.put(&key(i), &random_latents(&mut rng(i), 1, 8, 4)).unwrap();
            let (payload, _) = store.paths(&key(i));
            let t = UNIX_EPOCH + std::time::Duration::from_secs(1_000_000 + i * 10);
            File::options().append(true).open(&payload).unwrap().set_modified(t).unwrap();
        }
        // reading entry 0 makes it the most recently used
        store.get(&key(0)).unwrap().unwrap();
        let per_entry = store.total_bytes().unwrap() / 4;
        let report = store.gc(per_entry * 2 + per_entry / 2).unwrap();
        assert_eq!(report.entries_before, 4);
        assert_eq!(report.evicted, 2);
        assert!(store.contains(&key(0)));
        assert!(!store.contains(&key(1)));
        assert!(!store.contains(&key(2)));
        assert!(store.contains(&key(3)));
        assert!(store.gc(0).unwrap().bytes_after == 0);
        assert!(store.is_empty().unwrap());
    }
}
