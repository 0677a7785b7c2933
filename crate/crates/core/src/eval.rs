//! Frame-level ROC-AUC over segment scores broadcast to frames.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::scoring::ScoreTable;

/// Repeats each segment score `segment_len` times and truncates to
/// `frame_count`.
pub fn expand_segments(scores: &[f64], segment_len: usize, frame_count: usize) -> Result<Vec<f64>> {
    if segment_len == 0 {
        return Err(Error::InvalidArgument("segment_len must be positive".into()));
    }
    if scores.len() != frame_count.div_ceil(segment_len) {
        return Err(Error::Manifest(format!(
            "{} segment scores cannot cover {frame_count} frames at {segment_len} per segment",
            scores.len()
        )));
    }
    Ok((0..frame_count).map(|f| scores[f / segment_len]).collect())
}

/// Mann–Whitney AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dims("roc_auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score passed to roc_auc".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::UndefinedAuc("no positive frames"));
    }
    if n_neg == 0 {
        return Err(Error::UndefinedAuc("no negative frames"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, doubled so midranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank (i+1+j)/2.
        let pos = order[i..j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        rank_sum2 += pos * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R_pos − P(P+1)/2, doubled.
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoFrames {
    pub video_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub frame_count: usize,
    pub positive_count: usize,
    /// AUC of the binary flags broadcast to frames.
    pub flag_auc: f64,
    pub flagged_frames: usize,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip)]
    pub videos: Vec<VideoFrames>,
}

impl EvalReport {
    /// One row per frame: `video_id, frame, score, label`.
    pub fn write_frames_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["video_id", "frame", "score", "label"])?;
        for v in &self.videos {
            for (f, (s, l)) in v.scores.iter().zip(&v.labels).enumerate() {
                w.write_record([
                    v.video_id.as_str(),
                    &f.to_string(),
                    &s.to_string(),
                    &l.to_string(),
                ])?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(path, e.into_error()))?;
        crate::binio::write_atomic(path, &bytes)
    }
}

/// Expands every video's scores to frames and computes one global AUC.
pub fn evaluate(table: &ScoreTable, manifest: &Manifest) -> Result<EvalReport> {
    let mut by_video: HashMap<&str, Vec<(usize, f64, bool)>> = HashMap::new();
    for row in &table.rows {
        by_video
            .entry(row.video_id.as_str())
            .or_default()
            .push((row.segment_index, row.mse, row.flagged == 1));
    }
    if by_video.len() != manifest.videos.len() {
        let known: std::collections::HashSet<&str> =
            manifest.videos.iter().map(|v| v.video_id.as_str()).collect();
        if let Some(extra) = by_video.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Manifest(format!("scored video {extra} is not in the manifest")));
        }
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let (mut all_scores, mut all_flags, mut all_labels) = (Vec::new(), Vec::new(), Vec::new());
    for v in &manifest.videos {
        let labels = v.labels.as_ref().ok_or_else(|| {
            Error::Manifest(format!("video {} has no frame labels; evaluation needs them", v.video_id))
        })?;
        let mut segs = by_video.remove(v.video_id.as_str()).ok_or_else(|| {
            Error::Manifest(format!("video {} has no scores", v.video_id))
        })?;
        segs.sort_by_key(|s| s.0);
        if segs.iter().enumerate().any(|(i, s)| s.0 != i) || segs.len() != v.segment_count {
            return Err(Error::Manifest(format!(
                "video {}: scored segments do not match its {} segments",
                v.video_id, v.segment_count
            )));
        }
        let seg_scores: Vec<f64> = segs.iter().map(|s| s.1).collect();
        let seg_flags: Vec<f64> = segs.iter().map(|s| f64::from(u8::from(s.2))).collect();
        let scores = expand_segments(&seg_scores, manifest.segment_len, v.frame_count)?;
        all_flags.extend(expand_segments(&seg_flags, manifest.segment_len, v.frame_count)?);
        all_scores.extend_from_slice(&scores);
        all_labels.extend_from_slice(labels);
        videos.push(VideoFrames {
            video_id: v.video_id.clone(),
            scores,
            labels: labels.clone(),
        });
    }

    let auc = roc_auc(&all_scores, &all_labels)?;
    let flag_auc = roc_auc(&all_flags, &all_labels)?;
    let positive_count = all_labels.iter().filter(|&&l| l == 1).count();
    let flagged_frames = all_flags.iter().filter(|&&f| f == 1.0).count();
    let hits = all_flags
        .iter()
        .zip(&all_labels)
        .filter(|&(&f, &l)| f == 1.0 && l == 1)
        .count();
    Ok(EvalReport {
        auc,
        frame_count: all_labels.len(),
        positive_count,
        flag_auc,
        flagged_frames,
        precision: if flagged_frames == 0 { 0.0 } else { hits as f64 / flagged_frames as f64 },
        recall: hits as f64 / positive_count as f64,
        videos,
    })
}
