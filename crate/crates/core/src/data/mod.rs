//! Feature sets, manifests, noise-scale estimation, batching, and the
//! synthetic generator.

mod format;
mod synth;

pub use format::{
    decode_features, encode_features, read_features, write_features, Manifest, VideoRecord,
    DEFAULT_SEGMENT_LEN, FEATURE_MAGIC, FEATURE_VERSION, MANIFEST_VERSION,
};
pub use synth::{synth_generate, SynthConfig};

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor2};

/// Segment features plus the manifest tying rows to videos and frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor2,
    pub manifest: Manifest,
}

impl FeatureSet {
    pub fn new(features: Tensor2, manifest: Manifest) -> Result<Self> {
        manifest.validate(features.rows())?;
        Ok(Self { features, manifest })
    }

    pub fn load(features: &Path, manifest: &Path) -> Result<Self> {
        let f = read_features(features)?;
        let m = Manifest::read(manifest)?;
        Self::new(f, m)
    }

    pub fn save(&self, features: &Path, manifest: &Path) -> Result<()> {
        write_features(features, &self.features)?;
        self.manifest.write(manifest)
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Loads a feature file and its manifest.
pub fn load_features(features: &Path, manifest: &Path) -> Result<FeatureSet> {
    FeatureSet::load(features, manifest)
}

/// Pooled data scale and optional per-dimension centering.
#[derive(Clone, Debug, PartialEq)]
pub struct DataStats {
    pub sigma_data: f64,
    pub center: Option<Vec<f64>>,
}

impl DataStats {
    /// Computes the centering vector (when requested) and then σ_data of the
    /// centered features.
    pub fn fit(features: &Tensor2, center: bool) -> Result<Self> {
        let center = center.then(|| column_means(features));
        let mut stats = Self {
            sigma_data: 1.0,
            center,
        };
        stats.sigma_data = estimate_sigma_data(&stats.apply(features)?)?.sigma_data;
        Ok(stats)
    }

    /// Subtracts the centering vector, if any.
    pub fn apply(&self, features: &Tensor2) -> Result<Tensor2> {
        center_with(features, self.center.as_deref())
    }
}

pub(crate) fn center_with(features: &Tensor2, center: Option<&[f64]>) -> Result<Tensor2> {
    let Some(c) = center else {
        return Ok(features.clone());
    };
    if c.len() != features.cols() {
        return Err(Error::dims("center", features.cols(), c.len()));
    }
    let mut out = features.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(c) {
            *v -= m;
        }
    }
    Ok(out)
}

fn column_means(features: &Tensor2) -> Vec<f64> {
    let n = features.rows().max(1) as f64;
    features.col_sums().into_iter().map(|s| s / n).collect()
}

/// Population standard deviation of every entry, pooled across dimensions.
pub fn estimate_sigma_data(features: &Tensor2) -> Result<DataStats> {
    if features.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 segments to estimate sigma_data, got {}",
            features.rows()
        )));
    }
    let n = features.len() as f64;
    let mean = features.data().iter().sum::<f64>() / n;
    let var = features
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let sigma_data = var.sqrt();
    if !(sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(Error::Degenerate(format!(
            "features have zero or non-finite spread (sigma_data = {sigma_data})"
        )));
    }
    Ok(DataStats {
        sigma_data,
        center: None,
    })
}

/// Partitions `0..n` into batches of `batch_size` (last may be short).
/// With an rng the order is a fresh permutation; without, it is `0..n`.
pub fn make_batches(n: usize, batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
