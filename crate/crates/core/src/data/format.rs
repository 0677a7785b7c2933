//! VADF feature files and their JSON manifests.
//!
//! VADF layout (little-endian): `"VADF"`, `u16` version = 1, `u32` dim,
//! `u64` segment count, then `f32` values row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, put_f32s, Reader};
use crate::error::{Error, Result};
use crate::numeric::Tensor2;

pub const FEATURE_MAGIC: [u8; 4] = *b"VADF";
pub const FEATURE_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_SEGMENT_LEN: usize = 16;

pub fn encode_features(features: &Tensor2) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 4 * features.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    put_f32s(&mut out, features.data());
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor2> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u16("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "feature file",
            version: version.into(),
        });
    }
    let dim = r.u32("dim")? as usize;
    let count = usize::try_from(r.u64("segment count")?)
        .map_err(|_| Error::Malformed("segment count overflows usize".into()))?;
    if dim == 0 {
        return Err(Error::Malformed(format!("{}: zero feature dim", path.display())));
    }
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Malformed("feature size overflows".into()))?;
    let values = r.f32s(n, "feature values")?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{}: {} trailing bytes after {count}x{dim} features",
            path.display(),
            r.remaining()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Malformed(format!(
            "{}: non-finite feature value at row {} col {}",
            path.display(),
            i / dim,
            i % dim
        )));
    }
    Tensor2::from_vec(count, dim, values)
}

pub fn write_features(path: &Path, features: &Tensor2) -> Result<()> {
    binio::write_atomic(path, &encode_features(features))
}

pub fn read_features(path: &Path) -> Result<Tensor2> {
    decode_features(&binio::read_file(path)?, path)
}

/// One video: a contiguous run of feature rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_count: usize,
    pub segment_offset: usize,
    pub segment_count: usize,
    /// Per-frame 0/1 ground truth. Read only by evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub segment_len: usize,
    pub videos: Vec<VideoRecord>,
}

impl Manifest {
    pub fn new(segment_len: usize, videos: Vec<VideoRecord>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            segment_len,
            videos,
        }
    }

    pub fn segment_total(&self) -> usize {
        self.videos.iter().map(|v| v.segment_count).sum()
    }

    pub fn has_labels(&self) -> bool {
        !self.videos.is_empty() && self.videos.iter().all(|v| v.labels.is_some())
    }

    /// Copy with every label array removed.
    pub fn without_labels(&self) -> Self {
        let mut m = self.clone();
        m.videos.iter_mut().for_each(|v| v.labels = None);
        m
    }

    /// Checks segment counts, contiguity, and label shape against
    /// `n_segments` feature rows.
    pub fn validate(&self, n_segments: usize) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "manifest",
                version: self.version,
            });
        }
        if self.segment_len == 0 {
            return Err(Error::Manifest("segment_len must be positive".into()));
        }
        let mut next = 0usize;
        for v in &self.videos {
            let expected = v.frame_count.div_ceil(self.segment_len);
            if v.segment_count != expected {
                return Err(Error::Manifest(format!(
                    "video {}: {} frames need {expected} segments of {}, manifest says {}",
                    v.video_id, v.frame_count, self.segment_len, v.segment_count
                )));
            }
            if v.segment_offset != next {
                return Err(Error::Manifest(format!(
                    "video {}: segment_offset {} but previous videos end at {next}",
                    v.video_id, v.segment_offset
                )));
            }
            if let Some(labels) = &v.labels {
                if labels.len() != v.frame_count {
                    return Err(Error::Manifest(format!(
                        "video {}: {} labels for {} frames",
                        v.video_id,
                        labels.len(),
                        v.frame_count
                    )));
                }
                if labels.iter().any(|&l| l > 1) {
                    return Err(Error::Manifest(format!(
                        "video {}: labels must be 0 or 1",
                        v.video_id
                    )));
                }
            }
            next += v.segment_count;
        }
        if next != n_segments {
            let who = self
                .videos
                .last()
                .map_or("<none>".to_string(), |v| v.video_id.clone());
            return Err(Error::Manifest(format!(
                "manifest covers {next} segments (last video {who}), feature file has {n_segments}"
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        binio::write_atomic(path, s.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest::new(
            16,
            vec![
                VideoRecord {
                    video_id: "a".into(),
                    frame_count: 32,
                    segment_offset: 0,
                    segment_count: 2,
                    labels: Some(vec![0; 32]),
                },
                VideoRecord {
                    video_id: "b".into(),
                    frame_count: 20,
                    segment_offset: 2,
                    segment_count: 2,
                    labels: None,
                },
            ],
        )
    }

    #[test]
    fn manifest_checks() {
        let m = manifest();
        m.validate(4).unwrap();
        assert!(m.validate(5).is_err());
        let mut bad = m.clone();
        bad.videos[1].segment_count = 3;
        let err = bad.validate(5).unwrap_err().to_string();
        assert!(err.contains("video b"), "{err}");
        let mut bad = m.clone();
        bad.videos[1].segment_offset = 1;
        assert!(bad.validate(4).is_err());
        let mut bad = m;
        bad.videos[0].labels = Some(vec![2; 32]);
        assert!(bad.validate(4).is_err());
    }

    #[test]
    fn labels_are_optional_in_json() {
        let m = manifest().without_labels();
        let s = serde_json::to_string(&m).unwrap();
        assert!(!s.contains("labels"));
        let back: Manifest = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(!back.has_labels());
    }

    #[test]
    fn feature_bytes_layout() {
        let t = Tensor2::from_rows(&[&[1.0, -2.5], &[0.5, 3.0]]);
        let b = encode_features(&t);
        assert_eq!(&b[..4], b"VADF");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
        assert_eq!(b.len(), 18 + 16);
        assert_eq!(decode_features(&b, Path::new("m")).unwrap(), t);
    }

    #[test]
    fn truncated_features() {
        let t = Tensor2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = encode_features(&t);
        for cut in [3, 10, 17, b.len() - 1] {
            let err = decode_features(&b[..cut], Path::new("f")).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
        let mut bad = b;
        bad[1] = b'X';
        assert!(matches!(
            decode_features(&bad, Path::new("f")),
            Err(Error::BadMagic { .. })
        ));
    }
}
