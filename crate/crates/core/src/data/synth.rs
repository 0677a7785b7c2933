//! Synthetic segment features for desk-scale experiments.
//!
//! Normal segments come from an isotropic Gaussian around the origin;
//! anomalous segments from the same Gaussian shifted by `shift` along a
//! random sign vector in every dimension. Segments are grouped into
//! pseudo-videos: runs of normal segments, some with one contiguous
//! anomalous interval embedded.

use super::format::{Manifest, VideoRecord};
use super::FeatureSet;
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, Rng, Stream, Tensor2};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub dim: usize,
    /// Per-dimension offset of the anomalous cluster, in units of the
    /// normal standard deviation.
    pub shift: f64,
    pub normal_std: f64,
    pub anomaly_std: f64,
    pub segment_len: usize,
    /// Mean number of segments per pseudo-video.
    pub segments_per_video: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 20_000,
            n_anomalous: 1_000,
            dim: 64,
            shift: 3.0,
            normal_std: 1.0,
            anomaly_std: 1.0,
            segment_len: 16,
            segments_per_video: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_normal < self.n_anomalous {
            return bad(format!(
                "anomalies must be rarer than normal segments ({} < {})",
                self.n_normal, self.n_anomalous
            ));
        }
        if self.n_normal == 0 || self.dim == 0 || self.segment_len == 0 {
            return bad("n_normal, dim and segment_len must be positive".into());
        }
        if self.segments_per_video < 2 {
            return bad("segments_per_video must be at least 2".into());
        }
        if !(self.normal_std > 0.0 && self.anomaly_std > 0.0 && self.shift.is_finite()) {
            return bad("cluster spreads must be positive and shift finite".into());
        }
        Ok(())
    }

    /// Direction of the anomalous shift: `±shift` per dimension.
    pub fn shift_vector(&self) -> Vec<f64> {
        let mut rng = Rng::stream(derive_seed(self.seed, 1), Stream::Synth);
        (0..self.dim)
            .map(|_| if rng.below(2) == 0 { -self.shift } else { self.shift })
            .collect()
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let (videos, is_anomalous) = layout(cfg);
    let shift = cfg.shift_vector();

    // Separate stream from the layout; one draw per entry regardless of kind.
    let mut rng = Rng::stream(cfg.seed, Stream::Synth);
    let total = is_anomalous.len();
    let mut data = Vec::with_capacity(total * cfg.dim);
    for &anom in &is_anomalous {
        for &s in &shift {
            let z = rng.normal();
            let v = if anom {
                s + cfg.anomaly_std * z
            } else {
                cfg.normal_std * z
            };
            // Stored at file precision so a save/load round trip is exact.
            data.push(v as f32 as f64);
        }
    }
    let features = Tensor2::from_vec(total, cfg.dim, data)?;
    FeatureSet::new(features, Manifest::new(cfg.segment_len, videos))
}

/// Builds the video list and the per-segment anomaly flags.
fn layout(cfg: &SynthConfig) -> (Vec<VideoRecord>, Vec<bool>) {
    let mut rng = Rng::stream(cfg.seed, Stream::SynthLayout);

    let mut runs = Vec::new();
    let mut left = cfg.n_anomalous;
    while left > 0 {
        let len = (4 + rng.below(13)).min(left);
        runs.push(len);
        left -= len;
    }

    let total = cfg.n_normal + cfg.n_anomalous;
    let n_videos = total
        .div_ceil(cfg.segments_per_video)
        .max(runs.len() * 2)
        .min(cfg.n_normal.max(1));
    // Roughly half the videos carry an anomalous interval.
    let mut carries: Vec<bool> = (0..n_videos).map(|i| i < runs.len()).collect();
    rng.shuffle(&mut carries);

    let base = cfg.n_normal / n_videos;
    let extra = cfg.n_normal % n_videos;
    let mut videos = Vec::with_capacity(n_videos);
    let mut flags = Vec::with_capacity(total);
    let mut run_iter = runs.into_iter();
    let mut offset = 0;
    for (v, &carry) in carries.iter().enumerate() {
        let normal = base + usize::from(v < extra);
        let run = if carry { run_iter.next().unwrap_or(0) } else { 0 };
        let before = if run > 0 { rng.below(normal + 1) } else { normal };
        let mut seg_flags = vec![false; before];
        seg_flags.extend(std::iter::repeat_n(true, run));
        seg_flags.extend(std::iter::repeat_n(false, normal - before));
        let segments = seg_flags.len();

        // Trim the last segment to a random partial length.
        let trim = rng.below(cfg.segment_len);
        let frame_count = segments * cfg.segment_len - trim;
        let labels = (0..frame_count)
            .map(|f| u8::from(seg_flags[f / cfg.segment_len]))
            .collect();
        videos.push(VideoRecord {
            video_id: format!("synth_{v:05}"),
            frame_count,
            segment_offset: offset,
            segment_count: segments,
            labels: Some(labels),
        });
        offset += segments;
        flags.extend(seg_flags);
    }
    (videos, flags)
}
