//! Versioned binary checkpoint.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "VADW"  u16 version
//! u32 input_dim  u32 embed_dim  u8 activation
//! u32 n_enc  u32 × n_enc   u32 n_dec  u32 × n_dec
//! f64 sigma_data  f64 p_mean  f64 p_std  u64 step
//! u8 has_center  [f32 × input_dim]
//! f32 × embed_dim/2              Fourier frequencies
//! f32 × param_count              parameters, declaration order
//! f32 × param_count              EMA parameters, same order
//! ```

use std::path::Path;

use super::{DenoiserParams, HiddenLayer, NetworkConfig, Preconditioner};
use crate::binio::{self, put_f32s, Reader};
use crate::error::{Error, Result};
use crate::numeric::{Activation, Tensor2};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VADW";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything scoring needs besides the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub step: u64,
    /// Per-dimension means subtracted before training, if centering was on.
    pub center: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn preconditioner(&self) -> Result<Preconditioner> {
        Preconditioner::new(self.meta.sigma_data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.params.config();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(cfg.embed_dim as u32).to_le_bytes());
        out.push(cfg.activation.code());
        for widths in [&cfg.encoder_widths, &cfg.decoder_widths] {
            out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
            for &w in widths.iter() {
                out.extend_from_slice(&(w as u32).to_le_bytes());
            }
        }
        let m = &self.meta;
        out.extend_from_slice(&m.sigma_data.to_le_bytes());
        out.extend_from_slice(&m.p_mean.to_le_bytes());
        out.extend_from_slice(&m.p_std.to_le_bytes());
        out.extend_from_slice(&m.step.to_le_bytes());
        match &m.center {
            Some(c) => {
                out.push(1);
                put_f32s(&mut out, c);
            }
            None => out.push(0),
        }
        put_f32s(&mut out, self.params.frequencies());
        for p in [&self.params, &self.ema] {
            for t in p.tensors() {
                put_f32s(&mut out, t.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                version: version.into(),
            });
        }
        let input_dim = r.u32("input_dim")? as usize;
        let embed_dim = r.u32("embed_dim")? as usize;
        let code = r.u8("activation")?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::Malformed(format!("unknown activation code {code}")))?;
        let mut read_widths = |what| -> Result<Vec<usize>> {
            let n = r.u32(what)? as usize;
            (0..n).map(|_| Ok(r.u32(what)? as usize)).collect()
        };
        let encoder_widths = read_widths("encoder widths")?;
        let decoder_widths = read_widths("decoder widths")?;
        let config = NetworkConfig {
            input_dim,
            encoder_widths,
            decoder_widths,
            embed_dim,
            activation,
        };
        config.validate()?;
        let sigma_data = r.f64("sigma_data")?;
        let p_mean = r.f64("p_mean")?;
        let p_std = r.f64("p_std")?;
        let step = r.u64("step")?;
        let center = match r.u8("center flag")? {
            0 => None,
            1 => Some(r.f32s(input_dim, "center")?),
            f => return Err(Error::Malformed(format!("bad center flag {f}"))),
        };
        let frequencies = r.f32s(embed_dim / 2, "frequencies")?;
        let params = read_params(&mut r, &config, frequencies.clone())?;
        let ema = read_params(&mut r, &config, frequencies)?;
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!(
                "{}: {} trailing bytes",
                r.path().display(),
                r.remaining()
            )));
        }
        Ok(Self {
            params,
            ema,
            meta: CheckpointMeta {
                sigma_data,
                p_mean,
                p_std,
                step,
                center,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }

    /// The checkpoint as it reads back from disk (weights rounded to `f32`).
    pub fn round_trip(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes(), Path::new("<memory>"))
    }
}

fn read_params(
    r: &mut Reader<'_>,
    config: &NetworkConfig,
    frequencies: Vec<f64>,
) -> Result<DenoiserParams> {
    let mut tensor = |rows: usize, cols: usize, what: &str| -> Result<Tensor2> {
        Tensor2::from_vec(rows, cols, r.f32s(rows * cols, what)?)
    };
    let mut hidden = Vec::new();
    let mut fan_in = config.input_dim;
    for width in config.hidden_widths() {
        hidden.push(HiddenLayer {
            weight: tensor(fan_in, width, "weight")?,
            bias: tensor(1, width, "bias")?,
            film_weight: tensor(config.embed_dim, 2 * width, "film weight")?,
            film_bias: tensor(1, 2 * width, "film bias")?,
        });
        fan_in = width;
    }
    let out_weight = tensor(fan_in, config.input_dim, "output weight")?;
    let out_bias = tensor(1, config.input_dim, "output bias")?;
    Ok(DenoiserParams::from_parts(
        config.clone(),
        frequencies,
        hidden,
        out_weight,
        out_bias,
    ))
}
