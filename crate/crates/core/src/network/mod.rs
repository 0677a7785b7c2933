//! The denoiser: an encoder-decoder MLP conditioned on the noise level
//! through Fourier features and FiLM, wrapped in the EDM preconditioning
//! `D(x; σ) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x; c_noise(σ))`.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numeric::{affine, film_packed, Activation, Rng, Stream, Tape, Tensor2, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Length of the Fourier embedding; half cosines, half sines.
    pub embed_dim: usize,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_widths: vec![1024, 512, 256],
            decoder_widths: vec![256, 512, 1024],
            embed_dim: 128,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        if self.hidden_widths().any(|w| w == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Encoder then decoder widths, in forward order.
    pub fn hidden_widths(&self) -> impl Iterator<Item = usize> + '_ {
        self.encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .copied()
    }

    /// Trainable scalar count (Fourier frequencies excluded).
    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for w in self.hidden_widths() {
            total += fan_in * w + w + self.embed_dim * 2 * w + 2 * w;
            fan_in = w;
        }
        total + fan_in * self.input_dim + self.input_dim
    }
}

/// One hidden block: affine, activation, then FiLM from the noise embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    pub weight: Tensor2,
    pub bias: Tensor2,
    /// Projects the embedding to `[gamma | beta]`.
    pub film_weight: Tensor2,
    pub film_bias: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    config: NetworkConfig,
    frequencies: Vec<f64>,
    pub hidden: Vec<HiddenLayer>,
    pub out_weight: Tensor2,
    pub out_bias: Tensor2,
}

impl DenoiserParams {
    /// Fan-in uniform hidden weights, zero output layer, FiLM starting at the
    /// identity (`gamma = 1`, `beta = 0`).
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, Stream::Init);
        let frequencies = Self::draw_frequencies(&config, seed);
        let mut hidden = Vec::new();
        let mut fan_in = config.input_dim;
        for width in config.hidden_widths() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = uniform(&mut rng, fan_in, width, bound);
            let mut film_bias = Tensor2::zeros(1, 2 * width);
            film_bias.data_mut()[..width].fill(1.0);
            hidden.push(HiddenLayer {
                weight,
                bias: Tensor2::zeros(1, width),
                film_weight: Tensor2::zeros(config.embed_dim, 2 * width),
                film_bias,
            });
            fan_in = width;
        }
        Ok(Self {
            out_weight: Tensor2::zeros(fan_in, config.input_dim),
            out_bias: Tensor2::zeros(1, config.input_dim),
            config,
            frequencies,
            hidden,
        })
    }

    /// Every tensor, including the output layer and FiLM projections, drawn
    /// at random. Used where a zero output layer would hide gradient errors.
    pub fn init_random(config: NetworkConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::init(config, seed)?;
        let mut rng = Rng::stream(seed ^ 0xA5A5_5A5A, Stream::Init);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += scale * rng.uniform(-1.0, 1.0);
            }
        }
        Ok(p)
    }

    /// All trainable tensors zero except the FiLM gamma bias, so `F ≡ 0`.
    pub fn zeroed(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut p = Self::init(config, seed)?;
        for layer in &mut p.hidden {
            layer.weight.data_mut().fill(0.0);
        }
        Ok(p)
    }

    fn draw_frequencies(config: &NetworkConfig, seed: u64) -> Vec<f64> {
        let mut rng = Rng::stream(seed, Stream::Fourier);
        (0..config.embed_dim / 2).map(|_| rng.normal()).collect()
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        frequencies: Vec<f64>,
        hidden: Vec<HiddenLayer>,
        out_weight: Tensor2,
        out_bias: Tensor2,
    ) -> Self {
        Self {
            config,
            frequencies,
            hidden,
            out_weight,
            out_bias,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Trainable tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for l in &self.hidden {
            out.extend([&l.weight, &l.bias, &l.film_weight, &l.film_bias]);
        }
        out.push(&self.out_weight);
        out.push(&self.out_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for l in &mut self.hidden {
            out.extend([
                &mut l.weight,
                &mut l.bias,
                &mut l.film_weight,
                &mut l.film_bias,
            ]);
        }
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `[cos(2π f_i c) | sin(2π f_i c)]` over the fixed frequencies.
    pub fn fourier_embed(&self, c_noise: f64) -> Vec<f64> {
        let mut emb = Vec::with_capacity(self.config.embed_dim);
        emb.extend(self.frequencies.iter().map(|f| (2.0 * PI * f * c_noise).cos()));
        emb.extend(self.frequencies.iter().map(|f| (2.0 * PI * f * c_noise).sin()));
        emb
    }

    fn embed_rows(&self, c_noise: &[f64]) -> Tensor2 {
        let data = c_noise.iter().flat_map(|&c| self.fourier_embed(c)).collect();
        Tensor2::from_vec(c_noise.len(), self.config.embed_dim, data)
            .expect("embedding length is embed_dim")
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::dims("forward_raw", self.config.input_dim, x.cols()));
        }
        Ok(())
    }

    /// Raw network `F(x; c_noise)` with one noise level for the whole batch.
    pub fn forward_raw(&self, x_scaled: &Tensor2, c_noise: f64) -> Result<Tensor2> {
        self.check_input(x_scaled)?;
        let emb = Tensor2::row_vector(&self.fourier_embed(c_noise));
        self.forward_with_embedding(x_scaled, &emb)
    }

    /// Raw network with a separate noise level per row.
    pub fn forward_raw_rows(&self, x_scaled: &Tensor2, c_noise: &[f64]) -> Result<Tensor2> {
        self.check_input(x_scaled)?;
        if c_noise.len() != x_scaled.rows() {
            return Err(Error::dims("forward_raw_rows", x_scaled.rows(), c_noise.len()));
        }
        self.forward_with_embedding(x_scaled, &self.embed_rows(c_noise))
    }

    fn forward_with_embedding(&self, x: &Tensor2, emb: &Tensor2) -> Result<Tensor2> {
        let act = self.config.activation;
        let mut h = x.clone();
        for layer in &self.hidden {
            let a = act.apply(&affine(&h, &layer.weight, layer.bias.data())?);
            let m = affine(emb, &layer.film_weight, layer.film_bias.data())?;
            h = film_packed(&a, &m)?;
        }
        affine(&h, &self.out_weight, self.out_bias.data())
    }

    /// Records the raw forward pass with per-row noise levels on `tape`.
    /// Returns the output and the parameter leaves in declaration order.
    pub fn record(
        &self,
        tape: &mut Tape,
        x_scaled: &Tensor2,
        c_noise: &[f64],
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(x_scaled)?;
        if c_noise.len() != x_scaled.rows() {
            return Err(Error::dims("record", x_scaled.rows(), c_noise.len()));
        }
        let act = self.config.activation;
        let emb = tape.constant(self.embed_rows(c_noise));
        let mut h = tape.constant(x_scaled.clone());
        let mut leaves = Vec::with_capacity(4 * self.hidden.len() + 2);
        for layer in &self.hidden {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            let fw = tape.param(layer.film_weight.clone());
            let fb = tape.param(layer.film_bias.clone());
            leaves.extend([w, b, fw, fb]);
            let a = tape.affine(h, w, b)?;
            let a = tape.activate(a, act);
            let m = tape.affine(emb, fw, fb)?;
            h = tape.film(a, m)?;
        }
        let w = tape.param(self.out_weight.clone());
        let b = tape.param(self.out_bias.clone());
        leaves.extend([w, b]);
        let out = tape.affine(h, w, b)?;
        Ok((out, leaves))
    }
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor2::from_vec(rows, cols, data).expect("length matches by construction")
}

/// The four σ-dependent factors around the raw network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scalings {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioner {
    sigma_data: f64,
}

impl Preconditioner {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data.is_finite() && sigma_data > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_data must be finite and positive, got {sigma_data}"
            )));
        }
        Ok(Self { sigma_data })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn scalings(&self, sigma: f64) -> Result<Scalings> {
        check_sigma(sigma)?;
        let sd = self.sigma_data;
        let total = sigma * sigma + sd * sd;
        Ok(Scalings {
            c_skip: sd * sd / total,
            c_out: sigma * sd / total.sqrt(),
            c_in: 1.0 / total.sqrt(),
            c_noise: 0.25 * sigma.ln(),
        })
    }

    /// `λ(σ) = (σ² + σ_d²) / (σ·σ_d)²`, the reciprocal of `c_out²`.
    pub fn loss_weight(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        let sd = self.sigma_data;
        Ok((sigma * sigma + sd * sd) / (sigma * sd).powi(2))
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and positive, got {sigma}"
        )));
    }
    Ok(())
}

/// Anything that maps a noisy batch at level σ to a clean estimate.
pub trait Denoiser {
    fn input_dim(&self) -> usize;
    fn denoise(&self, x: &Tensor2, sigma: f64) -> Result<Tensor2>;
}

/// Preconditioned denoiser `D(x; σ) = c_skip·x + c_out·F(c_in·x; c_noise)`.
pub fn denoise(
    params: &DenoiserParams,
    precond: &Preconditioner,
    x: &Tensor2,
    sigma: f64,
) -> Result<Tensor2> {
    let s = precond.scalings(sigma)?;
    let raw = params.forward_raw(&x.scale(s.c_in), s.c_noise)?;
    let mut out = x.scale(s.c_skip);
    out.add_scaled_assign(s.c_out, &raw)?;
    Ok(out)
}

/// Parameters plus the preconditioner they were trained with.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: DenoiserParams,
    pub precond: Preconditioner,
}

impl Denoiser for Model {
    fn input_dim(&self) -> usize {
        self.params.config().input_dim
    }

    fn denoise(&self, x: &Tensor2, sigma: f64) -> Result<Tensor2> {
        denoise(&self.params, &self.precond, x, sigma)
    }
}
