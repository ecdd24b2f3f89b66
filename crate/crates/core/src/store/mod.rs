//! Content-addressed, versioned model-artifact storage.
//!
//! Four artifact classes (Index, Metadata, Tensor, Model) are stored as
//! content-addressed blobs; snapshots map `(kind, name)` to blob
//! references and are immutable once committed. Changed Tensor/Model
//! artifacts become block deltas against their parent when that halves the
//! stored size; chains cap at depth 8. Branches advance by optimistic
//! compare-and-set; merges are three-way at the artifact level, resolving
//! double-writes by policy and recording every conflict.
//!
//! On-disk layout: `objects/<hh>/<hash>` blob files (1-byte tag: full or
//! delta), `snapshots/<version>.json`, `branches/<name>` head pointers,
//! `conflicts/<merge-version>.json`.

pub mod delta;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;
use delta::{apply_delta, make_delta, DeltaError};

/// Tensor/Model blobs at or above this size are delta-candidates.
pub const DELTA_MIN_SIZE: usize = 1024;
/// Deltas deeper than this re-materialize as full blobs.
pub const MAX_DELTA_DEPTH: u32 = 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("branch `{0}` already exists")]
    DuplicateBranch(String),
    #[error("unknown version `{0}`")]
    UnknownVersion(String),
    #[error("branch `{branch}` moved: expected head {expected}, found {actual}; retry")]
    HeadMoved {
        branch: String,
        expected: String,
        actual: String,
    },
    #[error("branches share no common ancestor")]
    NoCommonAncestor,
    #[error("no compatible snapshot: {0}")]
    NoCompatibleSnapshot(String),
    #[error("corruption: {0}")]
    Corruption(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("encoding: {0}")]
    Json(String),
    #[error(transparent)]
    Delta(#[from] DeltaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArtifactKind {
    Index,
    Metadata,
    Tensor,
    Model,
}

impl ArtifactKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactKind::Index => "index",
            ArtifactKind::Metadata => "metadata",
            ArtifactKind::Tensor => "tensor",
            ArtifactKind::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<ArtifactKind> {
        match s.to_ascii_lowercase().as_str() {
            "index" => Some(ArtifactKind::Index),
            "metadata" => Some(ArtifactKind::Metadata),
            "tensor" => Some(ArtifactKind::Tensor),
            "model" => Some(ArtifactKind::Model),
            _ => None,
        }
    }

    fn delta_eligible(&self) -> bool {
        matches!(self, ArtifactKind::Tensor | ArtifactKind::Model)
    }
}

/// Manifest key for an artifact: `kind/name`, unique per snapshot.
pub fn artifact_key(kind: ArtifactKind, name: &str) -> String {
    format!("{}/{name}", kind.as_str())
}

pub fn parse_artifact_key(key: &str) -> Option<(ArtifactKind, &str)> {
    let (kind, name) = key.split_once('/')?;
    Some((ArtifactKind::parse(kind)?, name))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "encoding")]
pub enum Encoding {
    Full,
    Delta { base: String, depth: u32 },
}

impl Encoding {
    pub fn depth(&self) -> u32 {
        match self {
            Encoding::Full => 0,
            Encoding::Delta { depth, .. } => *depth,
        }
    }
}

/// Reference to a stored blob; the hash is the sha-256 of the logical
/// (reconstructed) bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub hash: String,
    pub size: u64,
    #[serde(flatten)]
    pub encoding: Encoding,
}

/// The minimal checkable compatibility contract: required fields with
/// kinds, a task objective tag and a metric name. Empty strings accept
/// anything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompatDescriptor {
    #[serde(default)]
    pub required_fields: BTreeMap<String, String>,
    #[serde(default)]
    pub objective: String,
    #[serde(default)]
    pub metric: String,
}

/// What a task offers when resolving a model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TaskFit {
    pub objective: String,
    pub metric: String,
    pub fields: BTreeMap<String, String>,
}

impl CompatDescriptor {
    /// Failed checks, empty when the descriptor accepts the task.
    pub fn failed_checks(&self, fit: &TaskFit) -> Vec<String> {
        let mut failures = Vec::new();
        for (field, kind) in &self.required_fields {
            match fit.fields.get(field) {
                None => failures.push(format!("missing required field `{field}`")),
                Some(k) if k != kind => {
                    failures.push(format!("field `{field}` has kind {k}, requires {kind}"))
                }
                _ => {}
            }
        }
        if !self.objective.is_empty() && !fit.objective.is_empty() && self.objective != fit.objective
        {
            failures.push(format!(
                "objective `{}` does not match required `{}`",
                fit.objective, self.objective
            ));
        }
        if !self.metric.is_empty() && !fit.metric.is_empty() && self.metric != fit.metric {
            failures.push(format!(
                "metric `{}` does not match required `{}`",
                fit.metric, self.metric
            ));
        }
        failures
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub lineage: String,
    pub created_ms: i64,
    #[serde(default)]
    pub compat: CompatDescriptor,
}

/// An immutable, content-addressed model version.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: String,
    pub parents: Vec<String>,
    pub manifest: BTreeMap<String, BlobRef>,
    pub meta: SnapshotMeta,
}

impl Snapshot {
    fn compute_version(
        parents: &[String],
        manifest: &BTreeMap<String, BlobRef>,
        meta: &SnapshotMeta,
    ) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            parents: &'a [String],
            manifest: &'a BTreeMap<String, BlobRef>,
            meta: &'a SnapshotMeta,
        }
        let body = serde_json::to_string(&Canonical {
            parents,
            manifest,
            meta,
        })
        .expect("snapshot serializes");
        sha256_hex(body.as_bytes())
    }

    fn build(parents: Vec<String>, manifest: BTreeMap<String, BlobRef>, meta: SnapshotMeta) -> Self {
        let version = Self::compute_version(&parents, &manifest, &meta);
        Snapshot {
            version,
            parents,
            manifest,
            meta,
        }
    }

    pub fn artifact(&self, kind: ArtifactKind, name: &str) -> Option<&BlobRef> {
        self.manifest.get(&artifact_key(kind, name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MergePolicy {
    PreferA,
    PreferB,
    PreferHigherEval(String),
}

impl MergePolicy {
    pub fn parse(s: &str) -> Option<MergePolicy> {
        match s {
            "prefer-a" => Some(MergePolicy::PreferA),
            "prefer-b" => Some(MergePolicy::PreferB),
            other => other
                .strip_prefix("prefer-higher-eval:")
                .map(|m| MergePolicy::PreferHigherEval(m.to_string())),
        }
    }

    fn describe(&self) -> String {
        match self {
            MergePolicy::PreferA => "prefer-a".into(),
            MergePolicy::PreferB => "prefer-b".into(),
            MergePolicy::PreferHigherEval(m) => format!("prefer-higher-eval:{m}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub merge_version: String,
    pub key: String,
    /// Which side won: "a" or "b".
    pub chosen: String,
    pub policy: String,
    #[serde(default)]
    pub note: Option<String>,
    pub at_ms: i64,
}

/// File-backed store. Writers serialize on an internal lock; readers go
/// straight to disk.
pub struct ModelStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

pub const DEFAULT_BRANCH: &str = "main";

impl ModelStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("snapshots"))?;
        fs::create_dir_all(root.join("branches"))?;
        fs::create_dir_all(root.join("conflicts"))?;
        let store = ModelStore {
            root,
            write_lock: Mutex::new(()),
        };
        if !store.branch_path(DEFAULT_BRANCH).exists() {
            let rootsnap = Snapshot::build(
                Vec::new(),
                BTreeMap::new(),
                SnapshotMeta {
                    lineage: "root".into(),
                    created_ms: 0,
                    compat: CompatDescriptor::default(),
                },
            );
            store.write_snapshot(&rootsnap)?;
            store.write_branch_head(DEFAULT_BRANCH, &rootsnap.version)?;
        }
        Ok(store)
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(&hash[..2]).join(hash)
    }

    fn snapshot_path(&self, version: &str) -> PathBuf {
        self.root.join("snapshots").join(format!("{version}.json"))
    }

    fn branch_path(&self, name: &str) -> PathBuf {
        self.root.join("branches").join(name)
    }

    fn write_branch_head(&self, name: &str, version: &str) -> Result<(), StoreError> {
        fs::write(self.branch_path(name), version)?;
        Ok(())
    }

    pub fn branch_head(&self, name: &str) -> Result<String, StoreError> {
        let path = self.branch_path(name);
        if !path.exists() {
            return Err(StoreError::UnknownBranch(name.to_string()));
        }
        Ok(fs::read_to_string(path)?.trim().to_string())
    }

    pub fn branches(&self) -> Result<Vec<String>, StoreError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(self.root.join("branches"))? {
            names.push(entry?.file_name().to_string_lossy().to_string());
        }
        names.sort();
        Ok(names)
    }

    fn write_snapshot(&self, snapshot: &Snapshot) -> Result<(), StoreError> {
        let path = self.snapshot_path(&snapshot.version);
        if !path.exists() {
            let body = serde_json::to_vec_pretty(snapshot).map_err(|e| StoreError::Json(e.to_string()))?;
            fs::write(path, body)?;
        }
        Ok(())
    }

    pub fn load_snapshot(&self, version: &str) -> Result<Snapshot, StoreError> {
        let path = self.snapshot_path(version);
        if !path.exists() {
            return Err(StoreError::UnknownVersion(version.to_string()));
        }
        let snapshot: Snapshot = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| StoreError::Json(e.to_string()))?;
        // Version ids are recomputable; a mismatch means tampering or rot.
        let recomputed =
            Snapshot::compute_version(&snapshot.parents, &snapshot.manifest, &snapshot.meta);
        if recomputed != snapshot.version || snapshot.version != version {
            return Err(StoreError::Corruption(format!(
                "snapshot {version} fails version recomputation"
            )));
        }
        Ok(snapshot)
    }

    pub fn snapshot_versions(&self) -> Result<Vec<String>, StoreError> {
        let mut versions = Vec::new();
        for entry in fs::read_dir(self.root.join("snapshots"))? {
            let name = entry?.file_name().to_string_lossy().to_string();
            if let Some(v) = name.strip_suffix(".json") {
                versions.push(v.to_string());
            }
        }
        versions.sort();
        Ok(versions)
    }

    fn object_exists(&self, hash: &str) -> bool {
        self.object_path(hash).exists()
    }

    fn read_object(&self, hash: &str) -> Result<(u8, Vec<u8>), StoreError> {
        let path = self.object_path(hash);
        if !path.exists() {
            return Err(StoreError::Corruption(format!("missing object {hash}")));
        }
        let raw = fs::read(path)?;
        if raw.is_empty() {
            return Err(StoreError::Corruption(format!("empty object {hash}")));
        }
        Ok((raw[0], raw[1..].to_vec()))
    }

    fn stored_encoding(&self, hash: &str) -> Result<Encoding, StoreError> {
        let (tag, payload) = self.read_object(hash)?;
        match tag {
            0 => Ok(Encoding::Full),
            1 => {
                if payload.len() < 64 + 8 {
                    return Err(StoreError::Corruption(format!("short delta object {hash}")));
                }
                let base = String::from_utf8(payload[..64].to_vec())
                    .map_err(|_| StoreError::Corruption("bad base hash".into()))?;
                let depth = u32::from_le_bytes(payload[64..68].try_into().unwrap());
                Ok(Encoding::Delta { base, depth })
            }
            t => Err(StoreError::Corruption(format!("unknown object tag {t}"))),
        }
    }

    fn write_full_object(&self, hash: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.object_path(hash);
        if path.exists() {
            return Ok(()); // content addressed: idempotent
        }
        fs::create_dir_all(path.parent().unwrap())?;
        let mut raw = Vec::with_capacity(bytes.len() + 1);
        raw.push(0u8);
        raw.extend_from_slice(bytes);
        fs::write(path, raw)?;
        Ok(())
    }

    fn write_delta_object(
        &self,
        hash: &str,
        base_hash: &str,
        depth: u32,
        ops: &[u8],
    ) -> Result<(), StoreError> {
        let path = self.object_path(hash);
        if path.exists() {
            return Ok(());
        }
        fs::create_dir_all(path.parent().unwrap())?;
        let mut raw = Vec::with_capacity(ops.len() + 1 + 68);
        raw.push(1u8);
        raw.extend_from_slice(base_hash.as_bytes());
        raw.extend_from_slice(&depth.to_le_bytes());
        raw.extend_from_slice(ops);
        fs::write(path, raw)?;
        Ok(())
    }

    /// Reconstructs a blob's logical bytes. Delta chains apply base-first;
    /// the output digest must equal the requested hash.
    pub fn reconstruct(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        self.reconstruct_guarded(hash, 0)
    }

    fn reconstruct_guarded(&self, hash: &str, depth: u32) -> Result<Vec<u8>, StoreError> {
        if depth > 64 {
            return Err(StoreError::Corruption("delta chain too deep".into()));
        }
        let (tag, payload) = self.read_object(hash)?;
        let bytes = match tag {
            0 => payload,
            1 => {
                if payload.len() < 68 {
                    return Err(StoreError::Corruption(format!("short delta object {hash}")));
                }
                let base_hash = std::str::from_utf8(&payload[..64])
                    .map_err(|_| StoreError::Corruption("bad base hash".into()))?;
                let base = self.reconstruct_guarded(base_hash, depth + 1)?;
                apply_delta(&base, &payload[68..])?
            }
            t => return Err(StoreError::Corruption(format!("unknown object tag {t}"))),
        };
        let digest = sha256_hex(&bytes);
        if digest != hash {
            return Err(StoreError::Corruption(format!(
                "object {hash} reconstructs to digest {digest}"
            )));
        }
        Ok(bytes)
    }

    /// Commits changes on a branch. Unchanged artifacts keep the parent's
    /// references; changed Tensor/Model artifacts become deltas against
    /// the parent blob when the delta is under half the full size.
    /// `expected_head` enables optimistic concurrency: a moved head is a
    /// retryable error.
    pub fn commit(
        &self,
        branch: &str,
        changes: BTreeMap<(ArtifactKind, String), Vec<u8>>,
        meta: SnapshotMeta,
        expected_head: Option<&str>,
    ) -> Result<Snapshot, StoreError> {
        let _guard = self.write_lock.lock().unwrap();
        let head = self.branch_head(branch)?;
        if let Some(expected) = expected_head {
            if expected != head {
                return Err(StoreError::HeadMoved {
                    branch: branch.to_string(),
                    expected: expected.to_string(),
                    actual: head,
                });
            }
        }
        let parent = self.load_snapshot(&head)?;
        let mut manifest = parent.manifest.clone();

        for ((kind, name), bytes) in changes {
            let key = artifact_key(kind, &name);
            let hash = sha256_hex(&bytes);
            if let Some(existing) = parent.manifest.get(&key) {
                if existing.hash == hash {
                    continue; // unchanged: keep the parent's ref, no re-store
                }
            }
            let blob_ref = if self.object_exists(&hash) {
                BlobRef {
                    hash: hash.clone(),
                    size: bytes.len() as u64,
                    encoding: self.stored_encoding(&hash)?,
                }
            } else {
                let parent_ref = parent.manifest.get(&key);
                let delta_base = parent_ref.filter(|r| {
                    kind.delta_eligible()
                        && bytes.len() >= DELTA_MIN_SIZE
                        && r.encoding.depth() < MAX_DELTA_DEPTH
                });
                match delta_base {
                    Some(base_ref) => {
                        let base_bytes = self.reconstruct(&base_ref.hash)?;
                        let ops = make_delta(&base_bytes, &bytes);
                        if ops.len() + 69 < bytes.len() / 2 {
                            let depth = base_ref.encoding.depth() + 1;
                            self.write_delta_object(&hash, &base_ref.hash, depth, &ops)?;
                            BlobRef {
                                hash: hash.clone(),
                                size: bytes.len() as u64,
                                encoding: Encoding::Delta {
                                    base: base_ref.hash.clone(),
                                    depth,
                                },
                            }
                        } else {
                            self.write_full_object(&hash, &bytes)?;
                            BlobRef {
                                hash: hash.clone(),
                                size: bytes.len() as u64,
                                encoding: Encoding::Full,
                            }
                        }
                    }
                    None => {
                        self.write_full_object(&hash, &bytes)?;
                        BlobRef {
                            hash: hash.clone(),
                            size: bytes.len() as u64,
                            encoding: Encoding::Full,
                        }
                    }
                }
            };
            manifest.insert(key, blob_ref);
        }

        let snapshot = Snapshot::build(vec![head], manifest, meta);
        self.write_snapshot(&snapshot)?;
        self.write_branch_head(branch, &snapshot.version)?;
        Ok(snapshot)
    }

    pub fn create_branch(&self, from_version: &str, name: &str) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock().unwrap();
        if self.branch_path(name).exists() {
            return Err(StoreError::DuplicateBranch(name.to_string()));
        }
        // The version must exist.
        self.load_snapshot(from_version)?;
        self.write_branch_head(name, from_version)
    }

    /// Ancestry of a version, youngest first.
    pub fn log(&self, version: &str) -> Result<Vec<Snapshot>, StoreError> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        queue.push_back(version.to_string());
        let mut out = Vec::new();
        while let Some(v) = queue.pop_front() {
            if !seen.insert(v.clone()) {
                continue;
            }
            let snap = self.load_snapshot(&v)?;
            for p in &snap.parents {
                queue.push_back(p.clone());
            }
            out.push(snap);
        }
        out.sort_by(|a, b| {
            b.meta
                .created_ms
                .cmp(&a.meta.created_ms)
                .then_with(|| a.version.cmp(&b.version))
        });
        Ok(out)
    }

    fn ancestors(&self, version: &str) -> Result<HashSet<String>, StoreError> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        queue.push_back(version.to_string());
        while let Some(v) = queue.pop_front() {
            if !seen.insert(v.clone()) {
                continue;
            }
            for p in &self.load_snapshot(&v)?.parents {
                queue.push_back(p.clone());
            }
        }
        Ok(seen)
    }

    /// Newest snapshot whose compatibility descriptor accepts the task and
    /// schema; among compatible snapshots, descendants beat ancestors.
    pub fn resolve(&self, fit: &TaskFit) -> Result<Snapshot, StoreError> {
        let mut compatible = Vec::new();
        let mut rejections = Vec::new();
        for version in self.snapshot_versions()? {
            let snap = self.load_snapshot(&version)?;
            if snap.manifest.is_empty() {
                continue; // root
            }
            let failures = snap.meta.compat.failed_checks(fit);
            if failures.is_empty() {
                compatible.push(snap);
            } else {
                rejections.push(format!("{}: {}", &version[..12.min(version.len())], failures.join("; ")));
            }
        }
        if compatible.is_empty() {
            return Err(StoreError::NoCompatibleSnapshot(if rejections.is_empty() {
                "store holds no snapshots".into()
            } else {
                rejections.join(" | ")
            }));
        }
        // Drop candidates that are ancestors of other candidates.
        let mut ancestor_of_other: HashSet<String> = HashSet::new();
        for snap in &compatible {
            let mut anc = self.ancestors(&snap.version)?;
            anc.remove(&snap.version);
            ancestor_of_other.extend(anc);
        }
        let mut frontier: Vec<Snapshot> = compatible
            .into_iter()
            .filter(|s| !ancestor_of_other.contains(&s.version))
            .collect();
        frontier.sort_by(|a, b| {
            b.meta
                .created_ms
                .cmp(&a.meta.created_ms)
                .then_with(|| a.version.cmp(&b.version))
        });
        Ok(frontier.remove(0))
    }

    /// Three-way merge of two branch heads at the artifact level. The
    /// merge snapshot advances branch `a`; both inputs remain addressable
    /// for side-by-side comparison.
    pub fn merge(
        &self,
        branch_a: &str,
        branch_b: &str,
        policy: MergePolicy,
    ) -> Result<(Snapshot, Vec<ConflictRecord>), StoreError> {
        let _guard = self.write_lock.lock().unwrap();
        let head_a = self.branch_head(branch_a)?;
        let head_b = self.branch_head(branch_b)?;
        let snap_a = self.load_snapshot(&head_a)?;
        let snap_b = self.load_snapshot(&head_b)?;

        let anc_a = self.ancestors(&head_a)?;
        let anc_b = self.ancestors(&head_b)?;
        let common: Vec<&String> = anc_a.intersection(&anc_b).collect();
        if common.is_empty() {
            return Err(StoreError::NoCommonAncestor);
        }
        // Deepest common ancestor: exclude any that is an ancestor of
        // another common ancestor.
        let mut best: Option<Snapshot> = None;
        for v in &common {
            let snap = self.load_snapshot(v)?;
            let better = match &best {
                None => true,
                Some(b) => {
                    let b_anc = self.ancestors(&b.version)?;
                    if b_anc.contains(&snap.version) {
                        false
                    } else {
                        let s_anc = self.ancestors(&snap.version)?;
                        s_anc.contains(&b.version)
                            || (snap.meta.created_ms, &snap.version)
                                > (b.meta.created_ms, &b.version)
                    }
                }
            };
            if better {
                best = Some(snap);
            }
        }
        let ancestor = best.unwrap();

        let mut keys: Vec<String> = snap_a
            .manifest
            .keys()
            .chain(snap_b.manifest.keys())
            .chain(ancestor.manifest.keys())
            .cloned()
            .collect();
        keys.sort();
        keys.dedup();

        // Lazily evaluated eval metric per side for prefer-higher-eval.
        let eval_of = |snap: &Snapshot, metric: &str| -> Option<f64> {
            for (key, blob) in &snap.manifest {
                if !key.starts_with("metadata/") {
                    continue;
                }
                let Ok(bytes) = self.reconstruct(&blob.hash) else {
                    continue;
                };
                let Ok(json) = serde_json::from_slice::<serde_json::Value>(&bytes) else {
                    continue;
                };
                if let Some(v) = json
                    .get("metrics")
                    .and_then(|m| m.get(metric))
                    .and_then(|v| v.as_f64())
                {
                    return Some(v);
                }
            }
            None
        };

        let mut manifest: BTreeMap<String, BlobRef> = BTreeMap::new();
        let mut conflicts: Vec<ConflictRecord> = Vec::new();
        let created_ms = snap_a.meta.created_ms.max(snap_b.meta.created_ms);

        for key in keys {
            let in_a = snap_a.manifest.get(&key);
            let in_b = snap_b.manifest.get(&key);
            let in_anc = ancestor.manifest.get(&key);
            let changed_a = in_a != in_anc;
            let changed_b = in_b != in_anc;
            let chosen = match (changed_a, changed_b) {
                (false, false) => in_anc.cloned(),
                (true, false) => in_a.cloned(),
                (false, true) => in_b.cloned(),
                (true, true) => {
                    if in_a == in_b {
                        in_a.cloned()
                    } else {
                        let (side, blob, note) = match &policy {
                            MergePolicy::PreferA => ("a", in_a.cloned(), None),
                            MergePolicy::PreferB => ("b", in_b.cloned(), None),
                            MergePolicy::PreferHigherEval(metric) => {
                                match (eval_of(&snap_a, metric), eval_of(&snap_b, metric)) {
                                    (Some(ea), Some(eb)) => {
                                        if eb > ea {
                                            ("b", in_b.cloned(), None)
                                        } else {
                                            ("a", in_a.cloned(), None)
                                        }
                                    }
                                    _ => (
                                        "a",
                                        in_a.cloned(),
                                        Some(format!(
                                            "eval metric `{metric}` missing; fell back to prefer-a"
                                        )),
                                    ),
                                }
                            }
                        };
                        conflicts.push(ConflictRecord {
                            merge_version: String::new(), // filled below
                            key: key.clone(),
                            chosen: side.to_string(),
                            policy: policy.describe(),
                            note,
                            at_ms: created_ms,
                        });
                        blob
                    }
                }
            };
            if let Some(blob) = chosen {
                manifest.insert(key, blob);
            }
        }

        // Metadata merges with the same three-way rule, treating the whole
        // descriptor as the unit.
        let compat = {
            let a_changed = snap_a.meta.compat != ancestor.meta.compat;
            let b_changed = snap_b.meta.compat != ancestor.meta.compat;
            match (a_changed, b_changed) {
                (_, false) => snap_a.meta.compat.clone(),
                (false, true) => snap_b.meta.compat.clone(),
                (true, true) => match &policy {
                    MergePolicy::PreferB => snap_b.meta.compat.clone(),
                    _ => snap_a.meta.compat.clone(),
                },
            }
        };

        let meta = SnapshotMeta {
            lineage: format!(
                "merge {} + {} ({})",
                &head_a[..12.min(head_a.len())],
                &head_b[..12.min(head_b.len())],
                policy.describe()
            ),
            created_ms,
            compat,
        };
        let snapshot = Snapshot::build(vec![head_a, head_b], manifest, meta);
        for c in conflicts.iter_mut() {
            c.merge_version = snapshot.version.clone();
        }
        self.write_snapshot(&snapshot)?;
        self.write_branch_head(branch_a, &snapshot.version)?;
        if !conflicts.is_empty() {
            let path = self
                .root
                .join("conflicts")
                .join(format!("{}.json", snapshot.version));
            fs::write(
                path,
                serde_json::to_vec_pretty(&conflicts).map_err(|e| StoreError::Json(e.to_string()))?,
            )?;
        }
        Ok((snapshot, conflicts))
    }

    pub fn conflicts_for(&self, merge_version: &str) -> Result<Vec<ConflictRecord>, StoreError> {
        let path = self
            .root
            .join("conflicts")
            .join(format!("{merge_version}.json"));
        if !path.exists() {
            return Ok(Vec::new());
        }
        serde_json::from_slice(&fs::read(path)?).map_err(|e| StoreError::Json(e.to_string()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
