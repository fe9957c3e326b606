//! Run-directory checkpoint store and rollout log.
//!
//! ```text
//! <root>/ckpt/v{NNNNNN}_{hash8}.spdc     delta artifacts (v0 is the dense genesis)
//! <root>/full/v{NNNNNN}_{hash8}.spdc     dense snapshots broadcast in full mode
//! <root>/rollouts/v{NNNNNN}.log          length-prefixed rollout records
//! ```
//!
//! Files are written to a temporary name, synced, then renamed, so a reader
//! never sees a partial artifact.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use sparsync_core::{CheckpointView, CodecError, Digest};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("version conflict: expected {expected}, got {found}")]
    VersionConflict { expected: u64, found: u64 },
    #[error("version {0} not found")]
    NotFound(u64),
    #[error("stored artifact for version {0} failed verification: {1}")]
    Corrupt(u64, CodecError),
    #[error("invalid artifact: {0}")]
    Invalid(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEntry {
    pub version: u64,
    pub body_hash: Digest,
    pub path: PathBuf,
    pub len: u64,
    pub created_at: SystemTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutBatch {
    pub job_id: u64,
    pub actor_id: u64,
    pub behavior_version: u64,
    pub token_count: u64,
    pub submitted_at_us: u64,
    pub payload: Vec<u8>,
}

impl RolloutBatch {
    /// `len u32 | job u64 | actor u64 | behavior u64 | tokens u64 | at_us u64 | payload`,
    /// where `len` counts everything after itself.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(44 + self.payload.len());
        out.extend_from_slice(&((40 + self.payload.len()) as u32).to_le_bytes());
        for v in [
            self.job_id,
            self.actor_id,
            self.behavior_version,
            self.token_count,
            self.submitted_at_us,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode_all(mut bytes: &[u8]) -> io::Result<Vec<RolloutBatch>> {
        let bad = || io::Error::new(io::ErrorKind::InvalidData, "truncated rollout record");
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let len = u32::from_le_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
            let rec = bytes.get(4..4 + len).ok_or_else(bad)?;
            if len < 40 {
                return Err(bad());
            }
            let u = |i: usize| u64::from_le_bytes(rec[i * 8..i * 8 + 8].try_into().unwrap());
            out.push(RolloutBatch {
                job_id: u(0),
                actor_id: u(1),
                behavior_version: u(2),
                token_count: u(3),
                submitted_at_us: u(4),
                payload: rec[40..].to_vec(),
            });
            bytes = &bytes[4 + len..];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RolloutAggregate {
    pub batches: u64,
    pub tokens: u64,
}

pub struct CheckpointStore {
    root: PathBuf,
    entries: BTreeMap<u64, StoreEntry>,
    full: BTreeMap<u64, StoreEntry>,
    rollouts: BTreeMap<u64, RolloutAggregate>,
}

fn file_name(version: u64, hash: &Digest) -> String {
    format!("v{version:06}_{}.spdc", hash.short_hex())
}

fn parse_version(name: &str) -> Option<u64> {
    name.strip_prefix('v')?.split('_').next()?.parse().ok()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl CheckpointStore {
    /// Opens (or creates) a run directory, indexing existing artifacts.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["ckpt", "full", "rollouts"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let mut store = Self {
            root,
            entries: BTreeMap::new(),
            full: BTreeMap::new(),
            rollouts: BTreeMap::new(),
        };
        store.entries = store.scan("ckpt")?;
        store.full = store.scan("full")?;
        if let Some((&last, _)) = store.entries.iter().next_back() {
            if last + 1 != store.entries.len() as u64 {
                return Err(StoreError::VersionConflict {
                    expected: store.entries.len() as u64,
                    found: last + 1,
                });
            }
        }
        for entry in fs::read_dir(store.root.join("rollouts"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(v) = name.strip_suffix(".log").and_then(parse_version) {
                let batches = RolloutBatch::decode_all(&fs::read(entry.path())?)?;
                let agg = store.rollouts.entry(v).or_default();
                agg.batches += batches.len() as u64;
                agg.tokens += batches.iter().map(|b| b.token_count).sum::<u64>();
            }
        }
        Ok(store)
    }

    fn scan(&self, sub: &str) -> Result<BTreeMap<u64, StoreEntry>, StoreError> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(self.root.join(sub))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".spdc") {
                continue;
            }
            let Some(version) = parse_version(&name) else { continue };
            let mut header = [0u8; sparsync_core::codec::HEADER_LEN];
            File::open(entry.path())?.read_exact(&mut header)?;
            let h = sparsync_core::CheckpointHeader::parse(&header).map_err(|e| StoreError::Corrupt(version, e))?;
            let meta = entry.metadata()?;
            out.insert(
                version,
                StoreEntry {
                    version,
                    body_hash: h.body_hash,
                    path: entry.path(),
                    len: meta.len(),
                    created_at: meta.modified().unwrap_or(SystemTime::UNIX_EPOCH),
                },
            );
        }
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn latest(&self) -> Option<u64> {
        self.entries.keys().next_back().copied()
    }

    pub fn entry(&self, version: u64) -> Option<&StoreEntry> {
        self.entries.get(&version)
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.entries.values()
    }

    /// Stores the next delta. The artifact is parsed and its hash checked
    /// before anything touches the disk.
    pub fn put_checkpoint(&mut self, bytes: &[u8]) -> Result<StoreEntry, StoreError> {
        let view = CheckpointView::parse(bytes)?;
        let version = view.header().version;
        let expected = self.latest().map_or(0, |v| v + 1);
        if version != expected {
            return Err(StoreError::VersionConflict {
                expected,
                found: version,
            });
        }
        let entry = self.write_entry("ckpt", version, view.header().body_hash, bytes)?;
        self.entries.insert(version, entry.clone());
        Ok(entry)
    }

    /// Stores a dense snapshot used by full-broadcast mode.
    pub fn put_full(&mut self, bytes: &[u8]) -> Result<StoreEntry, StoreError> {
        let view = CheckpointView::parse(bytes)?;
        let version = view.header().version;
        let entry = self.write_entry("full", version, view.header().body_hash, bytes)?;
        self.full.insert(version, entry.clone());
        Ok(entry)
    }

    fn write_entry(&self, sub: &str, version: u64, hash: Digest, bytes: &[u8]) -> Result<StoreEntry, StoreError> {
        let path = self.root.join(sub).join(file_name(version, &hash));
        write_atomic(&path, bytes)?;
        Ok(StoreEntry {
            version,
            body_hash: hash,
            path,
            len: bytes.len() as u64,
            created_at: SystemTime::now(),
        })
    }

    fn read_verified(entry: &StoreEntry) -> Result<Vec<u8>, StoreError> {
        let bytes = fs::read(&entry.path)?;
        let view = CheckpointView::parse(&bytes).map_err(|e| StoreError::Corrupt(entry.version, e))?;
        if view.header().body_hash != entry.body_hash || view.header().version != entry.version {
            return Err(StoreError::Corrupt(entry.version, CodecError::HashMismatch));
        }
        Ok(bytes)
    }

    /// Exact stored bytes, re-verified on read.
    pub fn get_checkpoint(&self, version: u64) -> Result<Vec<u8>, StoreError> {
        let entry = self.entries.get(&version).ok_or(StoreError::NotFound(version))?;
        Self::read_verified(entry)
    }

    pub fn get_full(&self, version: u64) -> Result<Vec<u8>, StoreError> {
        let entry = self.full.get(&version).ok_or(StoreError::NotFound(version))?;
        Self::read_verified(entry)
    }

    pub fn full_entry(&self, version: u64) -> Option<&StoreEntry> {
        self.full.get(&version)
    }

    /// Appends to the buffer of `batch.behavior_version`; returns the
    /// number of batches now held for that version.
    pub fn append_rollouts(&mut self, batch: &RolloutBatch) -> Result<u64, StoreError> {
        let path = self
            .root
            .join("rollouts")
            .join(format!("v{:06}.log", batch.behavior_version));
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&batch.encode())?;
        let agg = self.rollouts.entry(batch.behavior_version).or_default();
        agg.batches += 1;
        agg.tokens += batch.token_count;
        Ok(agg.batches)
    }

    pub fn rollout_aggregate(&self, version: u64) -> RolloutAggregate {
        self.rollouts.get(&version).copied().unwrap_or_default()
    }

    pub fn read_rollouts(&self, version: u64) -> Result<Vec<RolloutBatch>, StoreError> {
        let path = self.root.join("rollouts").join(format!("v{version:06}.log"));
        match fs::read(path) {
            Ok(bytes) => Ok(RolloutBatch::decode_all(&bytes)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsync_core::{DeltaCheckpoint, ElementType, TensorDelta};

    fn ckpt(version: u64, seed: u8) -> Vec<u8> {
        let t = TensorDelta::from_indices("w", 100, &[seed as u64 % 100], vec![seed, 1], sparsync_core::DeltaMode::Replace)
            .unwrap();
        DeltaCheckpoint::new(version, version.wrapping_sub(1), ElementType::Bf16, vec![t])
            .unwrap()
            .to_bytes()
    }

    #[test]
    fn put_get_and_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CheckpointStore::open(dir.path()).unwrap();
        let v0 = ckpt(0, 1);
        let v1 = ckpt(1, 2);
        s.put_checkpoint(&v0).unwrap();
        let e = s.put_checkpoint(&v1).unwrap();
        assert!(e.path.file_name().unwrap().to_string_lossy().starts_with("v000001_"));
        assert_eq!(s.get_checkpoint(1).unwrap(), v1);
        assert!(matches!(
            s.put_checkpoint(&ckpt(3, 3)),
            Err(StoreError::VersionConflict { expected: 2, found: 3 })
        ));
        assert!(matches!(s.get_checkpoint(7), Err(StoreError::NotFound(7))));
    }

    #[test]
    fn reopen_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<Vec<u8>> = (0..100).map(|v| ckpt(v, v as u8)).collect();
        {
            let mut s = CheckpointStore::open(dir.path()).unwrap();
            for b in &bytes {
                s.put_checkpoint(b).unwrap();
            }
        }
        let s = CheckpointStore::open(dir.path()).unwrap();
        assert_eq!(s.latest(), Some(99));
        for (v, b) in bytes.iter().enumerate() {
            assert_eq!(&s.get_checkpoint(v as u64).unwrap(), b);
        }
    }

    #[test]
    fn corrupt_file_detected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CheckpointStore::open(dir.path()).unwrap();
        let e = s.put_checkpoint(&ckpt(0, 1)).unwrap();
        let mut raw = fs::read(&e.path).unwrap();
        let n = raw.len();
        raw[n - 2] ^= 0xFF;
        fs::write(&e.path, raw).unwrap();
        assert!(matches!(s.get_checkpoint(0), Err(StoreError::Corrupt(0, _))));
    }

    #[test]
    fn rollout_aggregation() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CheckpointStore::open(dir.path()).unwrap();
        let b = |job, v, tokens| RolloutBatch {
            job_id: job,
            actor_id: 1,
            behavior_version: v,
            token_count: tokens,
            submitted_at_us: 5,
            payload: vec![1, 2, 3],
        };
        s.append_rollouts(&b(1, 0, 10)).unwrap();
        assert_eq!(s.append_rollouts(&b(2, 0, 32)).unwrap(), 2);
        s.append_rollouts(&b(3, 1, 7)).unwrap();
        assert_eq!(s.rollout_aggregate(0), RolloutAggregate { batches: 2, tokens: 42 });
        assert_eq!(s.rollout_aggregate(1).batches, 1);
        assert_eq!(s.read_rollouts(0).unwrap()[1], b(2, 0, 32));
        let reopened = CheckpointStore::open(dir.path()).unwrap();
        assert_eq!(reopened.rollout_aggregate(0).tokens, 42);
    }
}
