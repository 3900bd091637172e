//! On-disk formats: feature files, annotation JSON, checkpoints and dataset
//! directories.
//!
//! Feature file layout, little-endian throughout:
//!
//! ```text
//! magic "AVSF" | version u32 | n_frames u32 | dim u32 | n_frames·dim f32, row-major
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! magic "AVSC" | version u32 | header_len u32 | header JSON | f64 tensor data | SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Video;
use crate::error::{Error, Result};
use crate::labels::{ActionnessRank, AnnotationSet, SigmaRule, UserAnnotation};
use crate::model::{ModelConfig, ModelParameters};
use crate::numerics::Matrix;
use crate::segmentation::{Segment, SegmentList};
use crate::training::TrainConfig;

pub const FEATURE_MAGIC: [u8; 4] = *b"AVSF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVSC";
pub const CHECKPOINT_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn magic_of(bytes: &[u8]) -> [u8; 4] {
    let mut m = [0u8; 4];
    let k = bytes.len().min(4);
    m[..k].copy_from_slice(&bytes[..k]);
    m
}

fn malformed(path: &Path, field: &str, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

// ---------------------------------------------------------------- features

/// Serializes features as f32. Values that overflow f32 are rejected.
pub fn encode_features(features: &Matrix) -> Result<Vec<u8>> {
    let (n, d) = features.shape();
    let too_big = |x: usize| u32::try_from(x).map_err(|_| Error::InvalidArgument(format!("dimension {x} exceeds u32")));
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * n * d);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&too_big(n)?.to_le_bytes());
    out.extend_from_slice(&too_big(d)?.to_le_bytes());
    for (i, &x) in features.as_slice().iter().enumerate() {
        let v = x as f32;
        if !v.is_finite() {
            return Err(Error::non_finite(format!("feature entry {i} does not fit in f32")));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file, promoting entries to f64.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic_of(bytes),
        });
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: FEATURE_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::VersionUnsupported {
            path: path.to_path_buf(),
            version,
        });
    }
    let n = u32_at(bytes, 8) as usize;
    let d = u32_at(bytes, 12) as usize;
    let expected = FEATURE_HEADER_LEN as u64 + 4 * n as u64 * d as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 > expected {
        return Err(malformed(
            path,
            "payload",
            format!("{} trailing bytes", bytes.len() as u64 - expected),
        ));
    }
    if n == 0 || d == 0 {
        return Err(malformed(path, "shape", format!("empty feature matrix {n}x{d}")));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteEntry {
                path: path.to_path_buf(),
                offset: (FEATURE_HEADER_LEN + 4 * i) as u64,
            });
        }
        data.push(v as f64);
    }
    Matrix::new(n, d, data)
}

pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    write_bytes(path, &encode_features(features)?)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    decode_features(&read_bytes(path)?, path)
}

// ------------------------------------------------------------- annotations

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    /// Sorted frame indices in the user's summary.
    pub summary_frames: Vec<usize>,
    pub segment_ranks: Vec<ActionnessRank>,
}

/// JSON form of one video's annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub video_id: String,
    pub fps: f64,
    pub n_frames: usize,
    pub segments: Vec<Segment>,
    pub users: Vec<UserRecord>,
}

impl AnnotationFile {
    pub fn from_set(set: &AnnotationSet) -> Self {
        Self {
            video_id: set.video_id.clone(),
            fps: 1.0,
            n_frames: set.n_frames(),
            segments: set.segments.as_slice().to_vec(),
            users: set
                .users
                .iter()
                .map(|u| UserRecord {
                    summary_frames: u.summary.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
                    segment_ranks: u.segment_ranks.clone(),
                })
                .collect(),
        }
    }

    pub fn into_set(self, path: &Path) -> Result<AnnotationSet> {
        if self.fps != 1.0 {
            return Err(malformed(path, "fps", format!("expected 1, got {}", self.fps)));
        }
        let segments = SegmentList::new(self.segments).map_err(|e| malformed(path, "segments", e.to_string()))?;
        if segments.n_frames() != self.n_frames {
            return Err(malformed(
                path,
                "segments",
                format!("cover {} frames, n_frames is {}", segments.n_frames(), self.n_frames),
            ));
        }
        let mut users = Vec::with_capacity(self.users.len());
        for (k, u) in self.users.into_iter().enumerate() {
            let mut summary = vec![false; self.n_frames];
            for &f in &u.summary_frames {
                if f >= self.n_frames {
                    return Err(malformed(
                        path,
                        &format!("users[{k}].summary_frames"),
                        format!("frame {f} out of range for {} frames", self.n_frames),
                    ));
                }
                summary[f] = true;
            }
            if u.segment_ranks.len() != segments.len() {
                return Err(malformed(
                    path,
                    &format!("users[{k}].segment_ranks"),
                    format!("{} ranks for {} segments", u.segment_ranks.len(), segments.len()),
                ));
            }
            users.push(UserAnnotation {
                summary,
                segment_ranks: u.segment_ranks,
            });
        }
        AnnotationSet::new(self.video_id, segments, users).map_err(|e| malformed(path, "users", e.to_string()))
    }
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    read_json::<AnnotationFile>(path)?.into_set(path)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    write_json(path, &AnnotationFile::from_set(set))
}

// ------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: Option<TrainConfig>,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Trained parameters plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let tensors = self.params.named_tensors();
        let header = CheckpointHeader {
            model: self.params.config,
            train: self.train_config.clone(),
            seed: self.seed,
            tensors: tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &tensors {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic_of(bytes),
            });
        }
        let min_len = 12 + DIGEST_LEN;
        if bytes.len() < min_len {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: min_len as u64,
                found: bytes.len() as u64,
            });
        }
        let version = u32_at(bytes, 4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionUnsupported {
                path: path.to_path_buf(),
                version,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
            });
        }
        let header_len = u32_at(bytes, 8) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| malformed(path, "header_len", format!("{header_len} exceeds file size")))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[12..header_end]).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut params = ModelParameters::zeros(header.model);
        let mut payload = &body[header_end..];
        {
            let slots = params.named_tensors_mut();
            if slots.len() != header.tensors.len() {
                return Err(malformed(
                    path,
                    "tensors",
                    format!("expected {} tensors, found {}", slots.len(), header.tensors.len()),
                ));
            }
            for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
                if name != entry.name || slot.rows() != entry.rows || slot.cols() != entry.cols {
                    return Err(malformed(
                        path,
                        &entry.name,
                        format!("expected {name} {}x{}, found {}x{}", slot.rows(), slot.cols(), entry.rows, entry.cols),
                    ));
                }
                let need = 8 * entry.rows * entry.cols;
                if payload.len() < need {
                    return Err(malformed(path, &entry.name, "tensor data runs past the end of the file"));
                }
                let (data, rest) = payload.split_at(need);
                for (dst, chunk) in slot.as_mut_slice().iter_mut().zip(data.chunks_exact(8)) {
                    *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                    if !dst.is_finite() {
                        return Err(malformed(path, &entry.name, "non-finite parameter"));
                    }
                }
                payload = rest;
            }
        }
        if !payload.is_empty() {
            return Err(malformed(path, "payload", format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            params,
            train_config: header.train,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }
}

// ---------------------------------------------------------------- datasets

pub const INDEX_FILE: &str = "index.json";

/// `index.json` of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub videos: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.avsf"))
}

pub fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

pub fn write_video(dir: &Path, features: &Matrix, annotations: &AnnotationSet) -> Result<()> {
    write_features(&feature_path(dir, &annotations.video_id), features)?;
    write_annotations(&annotation_path(dir, &annotations.video_id), annotations)
}

/// Lists the video ids of a dataset directory: from `index.json` when
/// present, otherwise every `<id>.json` with a matching `<id>.avsf`.
pub fn dataset_ids(dir: &Path) -> Result<Vec<String>> {
    let index = dir.join(INDEX_FILE);
    if index.exists() {
        return Ok(read_json::<DatasetIndex>(&index)?.videos);
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "avsf") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if annotation_path(dir, stem).exists() {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_video(dir: &Path, id: &str, sigma_rule: SigmaRule) -> Result<Video> {
    let features = read_features(&feature_path(dir, id))?;
    let annotations = read_annotations(&annotation_path(dir, id))?;
    Video::new(features, annotations, sigma_rule)
}

pub fn load_dataset(dir: &Path, sigma_rule: SigmaRule) -> Result<Vec<Video>> {
    let ids = dataset_ids(dir)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset("directory holds no videos"));
    }
    ids.iter().map(|id| load_video(dir, id, sigma_rule)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    fn small_annotations() -> AnnotationSet {
        let segs = SegmentList::from_boundaries(6, &[2, 4]).unwrap();
        let r = |v| ActionnessRank::new(v).unwrap();
        let users = vec![
            UserAnnotation {
                summary: vec![true, true, false, false, false, false],
                segment_ranks: vec![r(3), r(0), r(1)],
            },
            UserAnnotation {
                summary: vec![false, false, true, true, false, false],
                segment_ranks: vec![r(2), r(0), r(1)],
            },
        ];
        AnnotationSet::new("v", segs, users).unwrap()
    }

    #[test]
    fn feature_layout_is_exact() {
        let m = Matrix::new(2, 3, vec![1.0, -2.5, 0.0, 3.25, 1e-3, 7.0]).unwrap();
        let bytes = encode_features(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"AVSF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        let back = decode_features(&bytes, &p()).unwrap();
        assert_eq!(back.as_slice()[3], 3.25);
        assert_eq!(back.as_slice()[4], 1e-3f32 as f64);
    }

    #[test]
    fn feature_errors() {
        let m = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let good = encode_features(&m).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad, &p()), Err(Error::BadMagic { found, .. }) if &found == b"XVSF"));
        assert!(matches!(
            decode_features(&good[..good.len() - 1], &p()),
            Err(Error::TruncatedFile { expected: 24, found: 23, .. })
        ));
        let mut nan = good.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan, &p()), Err(Error::NonFiniteEntry { offset: 20, .. })));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_features(&v2, &p()), Err(Error::VersionUnsupported { version: 2, .. })));
        let big = Matrix::new(1, 1, vec![1e300]).unwrap();
        assert!(encode_features(&big).is_err());
    }

    #[test]
    fn annotation_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let set = small_annotations();
        let path = dir.path().join("v.json");
        write_annotations(&path, &set).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), set);

        let mut file = AnnotationFile::from_set(&set);
        file.fps = 25.0;
        assert!(matches!(file.into_set(&path), Err(Error::Malformed { field, .. }) if field == "fps"));
        let mut file = AnnotationFile::from_set(&set);
        file.users[1].summary_frames.push(6);
        assert!(matches!(file.into_set(&path), Err(Error::Malformed { .. })));
        let mut file = AnnotationFile::from_set(&set);
        file.segments[1] = Segment::new(3, 4);
        assert!(matches!(file.into_set(&path), Err(Error::Malformed { field, .. }) if field == "segments"));
        let text = r#"{"video_id":"x","fps":1,"n_frames":2,"segments":[[0,2]],"users":[{"summary_frames":[0],"segment_ranks":[4]}]}"#;
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_annotations(&path), Err(Error::Json { .. })));
    }

    fn tiny_checkpoint(seed: u64) -> Checkpoint {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden: 2,
            head_hidden: 2,
            phi_dim: 2,
        };
        Checkpoint {
            params: ModelParameters::init(cfg, &mut seeded(seed, 0)),
            train_config: Some(TrainConfig::default()),
            seed,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ck = tiny_checkpoint(4);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes, &p()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avsc");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let bytes = tiny_checkpoint(4).encode().unwrap();
        let mut flipped = bytes.clone();
        let at = bytes.len() - DIGEST_LEN - 5;
        flipped[at] ^= 0x01;
        assert!(matches!(Checkpoint::decode(&flipped, &p()), Err(Error::ChecksumMismatch { .. })));
        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&future, &p()),
            Err(Error::VersionUnsupported { version: 2, .. })
        ));
        assert!(matches!(Checkpoint::decode(b"AVSF", &p()), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..20], &p()), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = small_annotations();
        let mut rng = seeded(1, 0);
        let feats = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0f32..1.0) as f64);
        write_video(dir.path(), &feats, &set).unwrap();
        let videos = load_dataset(dir.path(), SigmaRule::default()).unwrap();
        assert_eq!(videos.len(), 1);
        assert_eq!(videos[0].features, feats);
        assert_eq!(videos[0].annotations, set);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(empty.path(), SigmaRule::default()), Err(Error::EmptyDataset(_))));
    }

    proptest! {
        #[test]
        fn feature_round_trip(n in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = seeded(seed, 0);
            let m = Matrix::from_fn(n, d, |_, _| rng.random_range(-1e3f32..1e3) as f64);
            let bytes = encode_features(&m).unwrap();
            prop_assert_eq!(bytes.len(), 16 + 4 * n * d);
            prop_assert_eq!(decode_features(&bytes, &p()).unwrap(), m);
        }
    }
}
