//! Per-batch anomaly decisions from reconstruction error with the
//! data-driven threshold `L_th = μ_p + k·σ_p`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{center_with, FeatureSet};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, Denoiser, Model};
use crate::numeric::{Rng, Stream, Tensor2};
use crate::sampler::{partial_reconstruct, NoiseSchedule, DEFAULT_LMS_ORDER};

pub const DEFAULT_SCORE_BATCH: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringConfig {
    pub start_t: usize,
    pub k: f64,
    pub batch_size: usize,
    pub order: usize,
}

impl ScoringConfig {
    /// Defaults for a schedule of `steps` levels: `t = T − 1`, `k = 1`.
    pub fn for_steps(steps: usize) -> Self {
        Self {
            start_t: steps.saturating_sub(1),
            k: 1.0,
            batch_size: DEFAULT_SCORE_BATCH,
            order: DEFAULT_LMS_ORDER,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.start_t >= schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "start index t = {} must be below T = {}",
                self.start_t,
                schedule.steps()
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "scoring batch size must be at least 2".into(),
            ));
        }
        if !self.k.is_finite() {
            return Err(Error::InvalidArgument("k must be finite".into()));
        }
        if self.order == 0 {
            return Err(Error::InvalidArgument("LMS order must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchDecision {
    pub losses: Vec<f64>,
    pub mu_p: f64,
    pub sigma_p: f64,
    pub l_th: f64,
    pub flags: Vec<bool>,
}

impl BatchDecision {
    /// Thresholds `losses` at `μ + k·σ` (population σ, strict `>`).
    pub fn from_losses(losses: Vec<f64>, k: f64) -> Result<Self> {
        let (mu_p, sigma_p, l_th) = batch_threshold(&losses, k)?;
        let flags = losses.iter().map(|&l| l > l_th).collect();
        Ok(Self {
            losses,
            mu_p,
            sigma_p,
            l_th,
            flags,
        })
    }

    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Mean squared error of each row.
pub fn mse_per_instance(fea: &Tensor2, fea_hat: &Tensor2) -> Result<Vec<f64>> {
    fea.expect_same_shape("mse_per_instance", fea_hat)?;
    let dim = fea.cols() as f64;
    Ok((0..fea.rows())
        .map(|r| {
            fea.row(r)
                .iter()
                .zip(fea_hat.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / dim
        })
        .collect())
}

/// `(μ_p, σ_p, μ_p + k·σ_p)` with the population standard deviation.
pub fn batch_threshold(losses: &[f64], k: f64) -> Result<(f64, f64, f64)> {
    if losses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "threshold needs at least 2 losses, got {}",
            losses.len()
        )));
    }
    let n = losses.len() as f64;
    let mu = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    Ok((mu, sigma, mu + k * sigma))
}

pub fn score_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &ScoringConfig,
    batch: &Tensor2,
    rng: &mut Rng,
) -> Result<BatchDecision> {
    if batch.rows() == 0 {
        return Err(Error::InvalidArgument("cannot score an empty batch".into()));
    }
    let recon = partial_reconstruct(denoiser, schedule, batch, cfg.start_t, cfg.order, rng)?;
    let losses = mse_per_instance(batch, &recon)?;
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reconstruction loss at row {i}")));
    }
    BatchDecision::from_losses(losses, cfg.k)
}

/// Per-segment output of a scoring run, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub batches: Vec<BatchSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub segment_index: usize,
    pub mse: f64,
    pub flagged: u8,
    pub batch_id: usize,
    pub l_th: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSummary {
    pub mu_p: f64,
    pub sigma_p: f64,
    pub l_th: f64,
    pub size: usize,
    pub flagged: usize,
}

impl ScoreTable {
    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mse).collect()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.flagged == 1).collect()
    }

    /// Recomputes flags for a different `k` from the stored raw scores;
    /// batch membership is unchanged.
    pub fn rethreshold(&self, k: f64) -> Result<Self> {
        let mut out = self.clone();
        let mut start = 0;
        for (b, summary) in out.batches.iter_mut().enumerate() {
            let rows = &mut out.rows[start..start + summary.size];
            let losses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
            let d = BatchDecision::from_losses(losses, k)?;
            for (row, &f) in rows.iter_mut().zip(&d.flags) {
                debug_assert_eq!(row.batch_id, b);
                row.flagged = u8::from(f);
                row.l_th = d.l_th;
            }
            *summary = BatchSummary {
                mu_p: d.mu_p,
                sigma_p: d.sigma_p,
                l_th: d.l_th,
                size: summary.size,
                flagged: d.flagged(),
            };
            start += summary.size;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(path, e.into_error()))?;
        crate::binio::write_atomic(path, &bytes)
    }

    /// Reads rows back; batch summaries are rebuilt from `batch_id`/`l_th`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Malformed(format!("{}: {other:?}", path.display())),
        })?;
        let rows = r.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?;
        let mut batches: Vec<BatchSummary> = Vec::new();
        for row in &rows {
            if row.batch_id == batches.len() {
                batches.push(BatchSummary {
                    mu_p: f64::NAN,
                    sigma_p: f64::NAN,
                    l_th: row.l_th,
                    size: 0,
                    flagged: 0,
                });
            } else if row.batch_id + 1 != batches.len() {
                return Err(Error::Malformed(format!(
                    "{}: batch ids must be contiguous and ascending",
                    path.display()
                )));
            }
            let b = batches.last_mut().expect("pushed above");
            b.size += 1;
            b.flagged += usize::from(row.flagged);
        }
        Ok(Self { rows, batches })
    }
}

/// Scores every segment in manifest order, `batch_size` rows at a time.
/// The checkpoint's centering (if any) is applied first; `use_ema`
/// selects the averaged weights.
pub fn score_dataset(
    checkpoint: &Checkpoint,
    schedule: &NoiseSchedule,
    cfg: &ScoringConfig,
    dataset: &FeatureSet,
    use_ema: bool,
    seed: u64,
) -> Result<ScoreTable> {
    cfg.validate(schedule)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset has no segments".into()));
    }
    let params = if use_ema { &checkpoint.ema } else { &checkpoint.params };
    if params.config().input_dim != dataset.dim() {
        return Err(Error::dims(
            "checkpoint input_dim vs feature dim",
            params.config().input_dim,
            dataset.dim(),
        ));
    }
    let model = Model {
        params: params.clone(),
        precond: checkpoint.preconditioner()?,
    };
    let features = center_with(&dataset.features, checkpoint.meta.center.as_deref())?;
    score_features(&model, schedule, cfg, &features, dataset, seed)
}

/// As [`score_dataset`] for an arbitrary denoiser and pre-processed features.
pub fn score_features<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &ScoringConfig,
    features: &Tensor2,
    dataset: &FeatureSet,
    seed: u64,
) -> Result<ScoreTable> {
    cfg.validate(schedule)?;
    let n = features.rows();
    if n != dataset.len() {
        return Err(Error::dims("scored rows vs manifest", dataset.len(), n));
    }
    // A batch of one cannot be thresholded; fold it into the previous one.
    let mut bounds: Vec<(usize, usize)> = (0..n)
        .step_by(cfg.batch_size)
        .map(|s| (s, (s + cfg.batch_size).min(n)))
        .collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|&(s, e)| e - s < 2) {
        let (_, end) = bounds.pop().expect("len > 1");
        bounds.last_mut().expect("len > 0").1 = end;
    }

    let mut rng = Rng::stream(seed, Stream::SampleNoise);
    let mut losses = Vec::with_capacity(n);
    let mut batches = Vec::with_capacity(bounds.len());
    let mut per_row = Vec::with_capacity(n);
    for (b, &(s, e)) in bounds.iter().enumerate() {
        let d = score_batch(denoiser, schedule, cfg, &features.slice_rows(s, e), &mut rng)?;
        batches.push(BatchSummary {
            mu_p: d.mu_p,
            sigma_p: d.sigma_p,
            l_th: d.l_th,
            size: e - s,
            flagged: d.flagged(),
        });
        for (&l, &f) in d.losses.iter().zip(&d.flags) {
            per_row.push((b, f, d.l_th));
            losses.push(l);
        }
    }

    let mut rows = Vec::with_capacity(n);
    for v in &dataset.manifest.videos {
        for s in 0..v.segment_count {
            let i = v.segment_offset + s;
            let (batch_id, f, l_th) = per_row[i];
            rows.push(ScoreRow {
                video_id: v.video_id.clone(),
                segment_index: s,
                mse: losses[i],
                flagged: u8::from(f),
                batch_id,
                l_th,
            });
        }
    }
    Ok(ScoreTable { rows, batches })
}
