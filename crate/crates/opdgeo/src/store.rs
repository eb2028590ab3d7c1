//! Bit-exact persistence: checkpoint tensor archives, run manifests, and
//! metric tables. Everything an experiment writes can be reloaded, diffed,
//! and digest-checked byte for byte.
//!
//! Layout under a runs root:
//!
//! ```text
//! runs/<id>/manifest.json        run manifest
//! runs/<id>/ckpt/<step>.json     archive manifest (one checkpoint)
//! runs/<id>/ckpt/<step>.bin      archive blob
//! runs/<id>/metrics/<name>.csv   metric tables
//! ```
//!
//! Parameters live in memory as f64 and on disk as little-endian f32 in one
//! contiguous row-major blob per checkpoint (halves disk use; f32 rounding
//! moves the spectral metrics by well under 1e-5 at this scale). Writers own
//! a run directory exclusively; readers are lock-free. All writes go through
//! a temp-file rename so a torn write never leaves a half-written artifact.

use std::fmt::Write as _;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{ModulePath, UpdateDelta};
use crate::linalg::DenseMatrix;
use crate::toylab::{PolicyConfig, ToyPolicy, ToylabError};

/// Bumped only on breaking changes to the on-disk format.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON failure at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported archive format version {found}, this build reads {supported}")]
    Version { found: u32, supported: u32 },
    #[error("corrupt archive at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("run {run_id} has no checkpoint for step {step}")]
    MissingStep { run_id: String, step: usize },
    #[error("architecture mismatch between checkpoints: {details}")]
    ArchitectureMismatch { details: String },
    #[error("invalid manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Toylab(#[from] ToylabError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Write via a sibling temp file and atomic rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Hex-encoded SHA-256, the digest convention for every stored artifact.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

/// One tensor's placement inside an archive blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

/// Archive manifest: format version, tensor directory, the model config the
/// tensors instantiate, the seed the run was created with, and the SHA-256
/// of the blob (so the manifest digest pins every blob byte).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorMeta>,
    pub model_config: PolicyConfig,
    pub creation_seed: u64,
    pub blob_sha256: String,
}

/// A checkpoint: manifest plus one contiguous little-endian f32 blob,
/// tensors concatenated row-major in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub manifest: ArchiveManifest,
    pub blob: Vec<u8>,
}

impl TensorArchive {
    /// Snapshot a policy: every module, canonical path order, f64 → f32.
    pub fn from_policy(policy: &ToyPolicy, creation_seed: u64) -> Self {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for path in policy.module_paths() {
            let m = policy.module(&path).expect("module_paths returns existing paths");
            let byte_offset = blob.len() as u64;
            for &v in m.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorMeta {
                name: path.to_string(),
                shape: vec![m.rows(), m.cols()],
                dtype: "f32".into(),
                byte_offset,
                byte_length: blob.len() as u64 - byte_offset,
            });
        }
        let manifest = ArchiveManifest {
            format_version: FORMAT_VERSION,
            tensors,
            model_config: policy.config().clone(),
            creation_seed,
            blob_sha256: sha256_hex(&blob),
        };
        Self { manifest, blob }
    }

    /// Validate the tensor directory against the blob: contiguous,
    /// non-overlapping, correctly sized f32 runs covering the whole blob.
    fn check(&self, path: &Path) -> Result<(), StoreError> {
        let corrupt = |reason: String| StoreError::Corrupt { path: path.to_path_buf(), reason };
        if self.manifest.format_version != FORMAT_VERSION {
            return Err(StoreError::Version {
                found: self.manifest.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let mut cursor = 0u64;
        for t in &self.manifest.tensors {
            if t.dtype != "f32" {
                return Err(corrupt(format!("tensor {} has dtype {}, want f32", t.name, t.dtype)));
            }
            if t.byte_offset != cursor {
                return Err(corrupt(format!(
                    "tensor {} starts at byte {}, want contiguous offset {cursor}",
                    t.name, t.byte_offset
                )));
            }
            let want_len = 4 * t.shape.iter().product::<usize>() as u64;
            if t.byte_length != want_len {
                return Err(corrupt(format!(
                    "tensor {} has byte_length {}, want 4*prod(shape) = {want_len}",
                    t.name, t.byte_length
                )));
            }
            cursor += t.byte_length;
        }
        if cursor != self.blob.len() as u64 {
            return Err(corrupt(format!(
                "tensors cover {cursor} bytes but blob has {}",
                self.blob.len()
            )));
        }
        if self.manifest.blob_sha256 != sha256_hex(&self.blob) {
            return Err(corrupt("blob SHA-256 does not match the manifest".into()));
        }
        Ok(())
    }

    /// Decode one tensor, promoted to f64.
    pub fn tensor(&self, name: &str) -> Result<DenseMatrix, StoreError> {
        let meta = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| StoreError::BadManifest(format!("no tensor named {name}")))?;
        let lo = meta.byte_offset as usize;
        let hi = lo + meta.byte_length as usize;
        let data: Vec<f64> = self.blob[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        DenseMatrix::new(meta.shape[0], meta.shape[1], data)
            .map_err(|e| StoreError::BadManifest(format!("tensor {name}: {e}")))
    }

    /// Rebuild the policy (parameters carry f32 rounding).
    pub fn to_policy(&self) -> Result<ToyPolicy, StoreError> {
        let mut policy = ToyPolicy::init(self.manifest.model_config.clone(), 0)?;
        for meta in &self.manifest.tensors {
            let path: ModulePath = meta
                .name
                .parse()
                .map_err(|_| StoreError::BadManifest(format!("unknown tensor {}", meta.name)))?;
            policy = policy.with_module(&path, self.tensor(&meta.name)?)?;
        }
        Ok(policy)
    }

    /// SHA-256 of the manifest bytes. Because the manifest embeds the
    /// blob's SHA-256, this digest changes whenever any blob byte changes.
    pub fn digest(&self) -> String {
        sha256_hex(&self.manifest_bytes())
    }

    fn manifest_bytes(&self) -> Vec<u8> {
        let mut bytes =
            serde_json::to_vec_pretty(&self.manifest).expect("archive manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Write manifest + blob (atomically, each).
    pub fn save(&self, json_path: &Path, bin_path: &Path) -> Result<(), StoreError> {
        write_atomic(json_path, &self.manifest_bytes())?;
        write_atomic(bin_path, &self.blob)
    }

    /// Load and fully validate an archive pair.
    pub fn load(json_path: &Path, bin_path: &Path) -> Result<Self, StoreError> {
        let manifest_bytes = fs::read(json_path).map_err(io_err(json_path))?;
        let manifest: ArchiveManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|source| StoreError::Json { path: json_path.to_path_buf(), source })?;
        let blob = fs::read(bin_path).map_err(io_err(bin_path))?;
        let archive = Self { manifest, blob };
        archive.check(json_path)?;
        Ok(archive)
    }
}

/// Reference to one stored checkpoint, paths relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub step: usize,
    pub manifest_path: String,
    pub blob_path: String,
    /// The archive digest (see [`TensorArchive::digest`]).
    pub digest: String,
}

/// Reference to one metric table, path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricTableRef {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to replay or audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub config_digest: String,
    pub checkpoints: Vec<CheckpointRef>,
    pub metrics: Vec<MetricTableRef>,
}

impl RunManifest {
    /// Checkpoint steps must strictly increase and include step 0.
    pub fn validate(&self) -> Result<(), StoreError> {
        match self.checkpoints.first() {
            None => return Err(StoreError::BadManifest("no checkpoints recorded".into())),
            Some(first) if first.step != 0 => {
                return Err(StoreError::BadManifest(format!(
                    "first checkpoint is step {}, want step 0",
                    first.step
                )));
            }
            Some(_) => {}
        }
        for pair in self.checkpoints.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(StoreError::BadManifest(format!(
                    "checkpoint steps not strictly increasing: {} then {}",
                    pair[0].step, pair[1].step
                )));
            }
        }
        Ok(())
    }

    fn bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("run manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 of the manifest bytes; covers every checkpoint and metric
    /// digest, so a rerun reproduces it iff it reproduced every artifact.
    pub fn digest(&self) -> String {
        sha256_hex(&self.bytes())
    }
}

/// A single run's directory. The constructor owns layout; all artifact
/// writes go through this handle.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    run_id: String,
}

impl RunDir {
    /// Create (or reuse) `runs_root/<run_id>` with its `ckpt/` and
    /// `metrics/` subdirectories.
    pub fn create(runs_root: &Path, run_id: &str) -> Result<Self, StoreError> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) {
            return Err(StoreError::BadManifest(format!("invalid run id {run_id:?}")));
        }
        let root = runs_root.join(run_id);
        for sub in ["ckpt", "metrics"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root, run_id: run_id.to_string() })
    }

    /// Open an existing run directory.
    pub fn open(runs_root: &Path, run_id: &str) -> Result<Self, StoreError> {
        let root = runs_root.join(run_id);
        if !root.join("ckpt").is_dir() {
            return Err(StoreError::MissingStep { run_id: run_id.to_string(), step: 0 });
        }
        Ok(Self { root, run_id: run_id.to_string() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    fn ckpt_paths(&self, step: usize) -> (PathBuf, PathBuf) {
        (
            self.root.join("ckpt").join(format!("{step}.json")),
            self.root.join("ckpt").join(format!("{step}.bin")),
        )
    }

    /// Persist a policy as the checkpoint for `step`.
    pub fn save_checkpoint(
        &self,
        policy: &ToyPolicy,
        step: usize,
        creation_seed: u64,
    ) -> Result<CheckpointRef, StoreError> {
        let archive = TensorArchive::from_policy(policy, creation_seed);
        let (json_path, bin_path) = self.ckpt_paths(step);
        archive.save(&json_path, &bin_path)?;
        Ok(CheckpointRef {
            step,
            manifest_path: format!("ckpt/{step}.json"),
            blob_path: format!("ckpt/{step}.bin"),
            digest: archive.digest(),
        })
    }

    /// Load the archive for `step`; missing files report the step.
    pub fn load_archive(&self, step: usize) -> Result<TensorArchive, StoreError> {
        let (json_path, bin_path) = self.ckpt_paths(step);
        if !json_path.is_file() || !bin_path.is_file() {
            return Err(StoreError::MissingStep { run_id: self.run_id.clone(), step });
        }
        TensorArchive::load(&json_path, &bin_path)
    }

    /// Load the policy stored for `step` (f32-rounded parameters).
    pub fn load_checkpoint(&self, step: usize) -> Result<ToyPolicy, StoreError> {
        self.load_archive(step)?.to_policy()
    }

    /// Update delta between two stored checkpoints: `step_b` minus
    /// `step_a`, promoted to f64 before subtraction. The two archives must
    /// agree tensor-for-tensor on names and shapes; a mismatch reports
    /// every divergent tensor.
    pub fn load_delta(&self, step_a: usize, step_b: usize) -> Result<UpdateDelta, StoreError> {
        let a = self.load_archive(step_a)?;
        let b = self.load_archive(step_b)?;
        let mut divergent = Vec::new();
        let mut names_a: Vec<&TensorMeta> = a.manifest.tensors.iter().collect();
        let mut names_b: Vec<&TensorMeta> = b.manifest.tensors.iter().collect();
        names_a.sort_by(|x, y| x.name.cmp(&y.name));
        names_b.sort_by(|x, y| x.name.cmp(&y.name));
        let mut ia = names_a.iter().peekable();
        let mut ib = names_b.iter().peekable();
        loop {
            match (ia.peek(), ib.peek()) {
                (None, None) => break,
                (Some(ta), None) => {
                    divergent.push(format!("{} only in step {step_a}", ta.name));
                    ia.next();
                }
                (None, Some(tb)) => {
                    divergent.push(format!("{} only in step {step_b}", tb.name));
                    ib.next();
                }
                (Some(ta), Some(tb)) => match ta.name.cmp(&tb.name) {
                    std::cmp::Ordering::Less => {
                        divergent.push(format!("{} only in step {step_a}", ta.name));
                        ia.next();
                    }
                    std::cmp::Ordering::Greater => {
                        divergent.push(format!("{} only in step {step_b}", tb.name));
                        ib.next();
                    }
                    std::cmp::Ordering::Equal => {
                        if ta.shape != tb.shape {
                            divergent.push(format!(
                                "{} shape {:?} vs {:?}",
                                ta.name, ta.shape, tb.shape
                            ));
                        }
                        ia.next();
                        ib.next();
                    }
                },
            }
        }
        if !divergent.is_empty() {
            return Err(StoreError::ArchitectureMismatch { details: divergent.join("; ") });
        }
        let mut delta = UpdateDelta::new();
        for meta in &a.manifest.tensors {
            let path: ModulePath = meta
                .name
                .parse()
                .map_err(|_| StoreError::BadManifest(format!("unknown tensor {}", meta.name)))?;
            let ma = a.tensor(&meta.name)?;
            let mb = b.tensor(&meta.name)?;
            let diff = mb
                .sub(&ma)
                .map_err(|e| StoreError::BadManifest(format!("tensor {}: {e}", meta.name)))?;
            delta.insert(path, diff);
        }
        Ok(delta)
    }

    /// Write a metric table and return its reference.
    pub fn write_metrics_csv(&self, name: &str, csv: &str) -> Result<MetricTableRef, StoreError> {
        if name.is_empty() || name.contains(['/', '\\', '.']) {
            return Err(StoreError::BadManifest(format!("invalid metric table name {name:?}")));
        }
        let path = self.root.join("metrics").join(format!("{name}.csv"));
        write_atomic(&path, csv.as_bytes())?;
        Ok(MetricTableRef {
            name: name.to_string(),
            path: format!("metrics/{name}.csv"),
            sha256: sha256_hex(csv.as_bytes()),
        })
    }

    /// Write a JSON report at the run root and return its reference.
    pub fn write_report_json(
        &self,
        name: &str,
        value: &serde_json::Value,
    ) -> Result<MetricTableRef, StoreError> {
        if name.is_empty() || name.contains(['/', '\\', '.']) {
            return Err(StoreError::BadManifest(format!("invalid report name {name:?}")));
        }
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|source| StoreError::Json { path: self.root.clone(), source })?;
        bytes.push(b'\n');
        let rel = format!("{name}.json");
        write_atomic(&self.root.join(&rel), &bytes)?;
        Ok(MetricTableRef { name: name.to_string(), path: rel, sha256: sha256_hex(&bytes) })
    }

    /// Validate and write the run manifest.
    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        manifest.validate()?;
        write_atomic(&self.root.join("manifest.json"), &manifest.bytes())
    }

    /// Load and validate the run manifest.
    pub fn load_manifest(&self) -> Result<RunManifest, StoreError> {
        let path = self.root.join("manifest.json");
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .map_err(io_err(&path))?
            .read_to_end(&mut bytes)
            .map_err(io_err(&path))?;
        let manifest: RunManifest = serde_json::from_slice(&bytes)
            .map_err(|source| StoreError::Json { path, source })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::summarize;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig { vocab_size: 9, context_len: 5, d_model: 8, hidden: 12, layers: 2 }
    }

    fn runs_root() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let policy = ToyPolicy::init(small_cfg(), 21).unwrap();
        let archive = TensorArchive::from_policy(&policy, 21);
        let dir = runs_root();
        let j1 = dir.path().join("a.json");
        let b1 = dir.path().join("a.bin");
        archive.save(&j1, &b1).unwrap();
        let loaded = TensorArchive::load(&j1, &b1).unwrap();
        let j2 = dir.path().join("b.json");
        let b2 = dir.path().join("b.bin");
        loaded.save(&j2, &b2).unwrap();
        assert_eq!(fs::read(&j1).unwrap(), fs::read(&j2).unwrap());
        assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
        assert_eq!(archive.digest(), loaded.digest());
    }

    #[test]
    fn identical_policies_save_byte_identical_archives() {
        let policy = ToyPolicy::init(small_cfg(), 8).unwrap();
        let a = TensorArchive::from_policy(&policy, 8);
        let b = TensorArchive::from_policy(&policy.clone(), 8);
        assert_eq!(a.blob, b.blob);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn parameters_survive_at_f32_granularity() {
        let policy = ToyPolicy::init(small_cfg(), 33).unwrap();
        let archive = TensorArchive::from_policy(&policy, 33);
        let back = archive.to_policy().unwrap();
        assert_eq!(*back.config(), small_cfg());
        for path in policy.module_paths() {
            let orig = policy.module(&path).unwrap();
            let got = back.module(&path).unwrap();
            for (o, g) in orig.data().iter().zip(got.data()) {
                assert_eq!((*o as f32).to_bits(), (*g as f32).to_bits(), "module {path}");
            }
        }
    }

    #[test]
    fn layout_is_contiguous_little_endian_f32() {
        let policy = ToyPolicy::init(small_cfg(), 5).unwrap();
        let archive = TensorArchive::from_policy(&policy, 5);
        let mut cursor = 0u64;
        for t in &archive.manifest.tensors {
            assert_eq!(t.byte_offset, cursor);
            assert_eq!(t.byte_length, 4 * t.shape.iter().product::<usize>() as u64);
            assert_eq!(t.dtype, "f32");
            cursor += t.byte_length;
        }
        assert_eq!(cursor, archive.blob.len() as u64);
        // First stored value is the embedding's (0,0) entry as LE f32.
        let first = f32::from_le_bytes(archive.blob[0..4].try_into().unwrap());
        let want = policy.module(&ModulePath::Embedding).unwrap().data()[0] as f32;
        assert_eq!(first.to_bits(), want.to_bits());
    }

    #[test]
    fn corrupted_archives_are_rejected_on_load() {
        let policy = ToyPolicy::init(small_cfg(), 13).unwrap();
        let archive = TensorArchive::from_policy(&policy, 13);
        let dir = runs_root();
        let j = dir.path().join("c.json");
        let b = dir.path().join("c.bin");

        // Flipped blob byte: SHA mismatch.
        archive.save(&j, &b).unwrap();
        let mut blob = fs::read(&b).unwrap();
        blob[7] ^= 0x40;
        fs::write(&b, &blob).unwrap();
        assert!(matches!(
            TensorArchive::load(&j, &b),
            Err(StoreError::Corrupt { .. })
        ));

        // Wrong format version.
        let mut bad = archive.clone();
        bad.manifest.format_version = FORMAT_VERSION + 1;
        bad.save(&j, &b).unwrap();
        assert!(matches!(TensorArchive::load(&j, &b), Err(StoreError::Version { .. })));

        // Non-contiguous offsets.
        let mut bad = archive.clone();
        bad.manifest.tensors[1].byte_offset += 4;
        bad.save(&j, &b).unwrap();
        assert!(matches!(TensorArchive::load(&j, &b), Err(StoreError::Corrupt { .. })));

        // Wrong dtype.
        let mut bad = archive.clone();
        bad.manifest.tensors[0].dtype = "f64".into();
        bad.save(&j, &b).unwrap();
        assert!(matches!(TensorArchive::load(&j, &b), Err(StoreError::Corrupt { .. })));

        // Truncated blob.
        archive.save(&j, &b).unwrap();
        let blob = fs::read(&b).unwrap();
        fs::write(&b, &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(TensorArchive::load(&j, &b), Err(StoreError::Corrupt { .. })));
    }

    #[test]
    fn archive_digest_tracks_blob_bytes() {
        let policy = ToyPolicy::init(small_cfg(), 2).unwrap();
        let a = TensorArchive::from_policy(&policy, 2);
        // Perturb one parameter by one f32 ulp worth of change.
        let path = ModulePath::Embedding;
        let m = policy.module(&path).unwrap();
        let mut data = m.data().to_vec();
        data[0] = (data[0] as f32 + f32::EPSILON) as f64;
        let perturbed = policy
            .with_module(&path, DenseMatrix::new(m.rows(), m.cols(), data).unwrap())
            .unwrap();
        let b = TensorArchive::from_policy(&perturbed, 2);
        assert_ne!(a.blob, b.blob);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn run_manifest_enforces_step_zero_and_strict_increase() {
        let ckpt = |step: usize| CheckpointRef {
            step,
            manifest_path: format!("ckpt/{step}.json"),
            blob_path: format!("ckpt/{step}.bin"),
            digest: "d".into(),
        };
        let mut manifest = RunManifest {
            run_id: "r".into(),
            mode: "opd".into(),
            seed: 1,
            config_digest: "c".into(),
            checkpoints: vec![ckpt(0), ckpt(20), ckpt(40)],
            metrics: vec![],
        };
        manifest.validate().unwrap();

        manifest.checkpoints = vec![ckpt(20), ckpt(40)];
        assert!(matches!(manifest.validate(), Err(StoreError::BadManifest(_))));

        manifest.checkpoints = vec![ckpt(0), ckpt(40), ckpt(40)];
        assert!(matches!(manifest.validate(), Err(StoreError::BadManifest(_))));

        manifest.checkpoints = vec![];
        assert!(matches!(manifest.validate(), Err(StoreError::BadManifest(_))));
    }

    #[test]
    fn run_dir_round_trips_checkpoints_and_manifest() {
        let root = runs_root();
        let run = RunDir::create(root.path(), "demo-1").unwrap();
        let policy = ToyPolicy::init(small_cfg(), 17).unwrap();
        let r0 = run.save_checkpoint(&policy, 0, 17).unwrap();
        let back = run.load_checkpoint(0).unwrap();
        assert_eq!(
            TensorArchive::from_policy(&back, 17).blob,
            TensorArchive::from_policy(&policy, 17).blob
        );
        let table = run.write_metrics_csv("steps", "step,loss\n0,1.5\n").unwrap();
        let manifest = RunManifest {
            run_id: "demo-1".into(),
            mode: "opd".into(),
            seed: 17,
            config_digest: "abc".into(),
            checkpoints: vec![r0],
            metrics: vec![table],
        };
        run.write_manifest(&manifest).unwrap();
        let reopened = RunDir::open(root.path(), "demo-1").unwrap();
        let loaded = reopened.load_manifest().unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.digest(), manifest.digest());
        assert!(RunDir::open(root.path(), "absent").is_err());
        assert!(RunDir::create(root.path(), "../escape").is_err());
        assert!(run.write_metrics_csv("bad/name", "x\n").is_err());
    }

    #[test]
    fn load_delta_matches_in_memory_subtraction_at_f32_granularity() {
        let root = runs_root();
        let run = RunDir::create(root.path(), "delta-run").unwrap();
        let a = ToyPolicy::init(small_cfg(), 1).unwrap();
        let b = ToyPolicy::init(small_cfg(), 2).unwrap();
        run.save_checkpoint(&a, 0, 1).unwrap();
        run.save_checkpoint(&b, 50, 1).unwrap();
        let disk = run.load_delta(0, 50).unwrap();
        let mem = b.delta_from(&a).unwrap();
        assert_eq!(disk.len(), mem.len());
        for (path, dm) in disk.iter() {
            let mm = mem.get(path).unwrap();
            for (x, y) in dm.data().iter().zip(mm.data()) {
                // Two f32 roundings, then f64 subtraction.
                assert!((x - y).abs() < 1e-6, "module {path}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn load_delta_edge_cases() {
        let root = runs_root();
        let run = RunDir::create(root.path(), "edges").unwrap();
        let a = ToyPolicy::init(small_cfg(), 1).unwrap();
        run.save_checkpoint(&a, 0, 1).unwrap();

        // Same step twice: exactly zero.
        let zero = run.load_delta(0, 0).unwrap();
        assert_eq!(zero.frobenius_norm(), 0.0);

        // Missing step names the step.
        match run.load_delta(0, 99) {
            Err(StoreError::MissingStep { step: 99, .. }) => {}
            other => panic!("want MissingStep, got {other:?}"),
        }

        // Architecture mismatch lists the divergent tensors.
        let wide = PolicyConfig { d_model: 10, ..small_cfg() };
        let c = ToyPolicy::init(wide, 3).unwrap();
        run.save_checkpoint(&c, 100, 3).unwrap();
        match run.load_delta(0, 100) {
            Err(StoreError::ArchitectureMismatch { details }) => {
                assert!(details.contains("embed"), "details: {details}");
                assert!(details.contains("shape"), "details: {details}");
            }
            other => panic!("want ArchitectureMismatch, got {other:?}"),
        }
    }

    #[test]
    fn f32_storage_moves_spectral_metrics_by_less_than_1e5() {
        // The design tolerates f32 checkpoints because the analysis metrics
        // barely move under f32 rounding at this scale.
        let a = ToyPolicy::init(small_cfg(), 1).unwrap();
        let b = ToyPolicy::init(small_cfg(), 2).unwrap();
        let exact = b.delta_from(&a).unwrap();
        let root = runs_root();
        let run = RunDir::create(root.path(), "sens").unwrap();
        run.save_checkpoint(&a, 0, 1).unwrap();
        run.save_checkpoint(&b, 1, 1).unwrap();
        let rounded = run.load_delta(0, 1).unwrap();
        for (path, m) in exact.iter() {
            let se = summarize(m, &path.to_string()).unwrap();
            let sr = summarize(rounded.get(path).unwrap(), &path.to_string()).unwrap();
            assert!((se.spectral_norm - sr.spectral_norm).abs() < 1e-5);
            assert!((se.spec_frob_ratio - sr.spec_frob_ratio).abs() < 1e-5);
            assert!((se.effective_rank - sr.effective_rank).abs() < 1e-5);
            assert!((se.top1pct_norm_ratio - sr.top1pct_norm_ratio).abs() < 1e-5);
        }
    }
}
