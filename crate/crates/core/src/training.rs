//! Denoising score matching with log-normal noise levels, AdamW under an
//! inverse learning-rate decay, and an exponential moving average of the
//! weights.

use std::path::Path;

use log::info;

use crate::data::{make_batches, DataStats};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, CheckpointMeta, DenoiserParams, NetworkConfig, Preconditioner};
use crate::numeric::{Rng, Stream, Tape, Tensor2};

pub const MAX_EPOCHS: usize = 50;

/// `ln σ ~ N(p_mean, p_std²)` during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainNoiseConfig {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for TrainNoiseConfig {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl TrainNoiseConfig {
    pub fn new(p_mean: f64, p_std: f64) -> Result<Self> {
        if !(p_std > 0.0 && p_std.is_finite()) || !p_mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "p_std must be positive and p_mean finite, got ({p_mean}, {p_std})"
            )));
        }
        Ok(Self { p_mean, p_std })
    }
}

pub fn sample_train_sigma(rng: &mut Rng, cfg: &TrainNoiseConfig, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (cfg.p_mean + cfg.p_std * rng.normal()).exp())
        .collect()
}

pub fn loss_weight(p: &Preconditioner, sigma: f64) -> Result<f64> {
    p.loss_weight(sigma)
}

/// Rows per forward/backward chunk inside one optimizer batch. Gradients
/// are summed over chunks in order.
const MICRO_BATCH: usize = 1024;

#[derive(Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    /// Aligned with [`DenoiserParams::tensors`].
    pub grads: Vec<Tensor2>,
}

/// Weighted denoising loss with freshly drawn noise:
/// `mean_i λ(σ_i)·‖D(x_i + σ_i ε_i; σ_i) − x_i‖² / dim`.
pub fn dsm_loss(
    params: &DenoiserParams,
    precond: &Preconditioner,
    batch: &Tensor2,
    sigmas: &[f64],
    rng: &mut Rng,
) -> Result<LossAndGrads> {
    let noise = rng.gaussian(batch.rows(), batch.cols());
    dsm_loss_with_noise(params, precond, batch, sigmas, &noise)
}

pub fn dsm_loss_with_noise(
    params: &DenoiserParams,
    precond: &Preconditioner,
    batch: &Tensor2,
    sigmas: &[f64],
    noise: &Tensor2,
) -> Result<LossAndGrads> {
    check_batch(params, batch, sigmas, noise)?;
    let n = batch.rows();
    let dim = batch.cols() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor2> = params
        .tensors()
        .iter()
        .map(|t| Tensor2::zeros(t.rows(), t.cols()))
        .collect();

    let mut start = 0;
    while start < n {
        let end = (start + MICRO_BATCH).min(n);
        let prep = Prepared::new(precond, batch, sigmas, noise, start, end)?;
        let mut tape = Tape::new();
        let (out, leaves) = params.record(&mut tape, &prep.x_in, &prep.c_noise)?;
        let raw = tape.value(out);

        // dL/dF_i = 2 λ_i c_out_i (D_i − x_i) / (n·dim)
        let mut seed = Tensor2::zeros(end - start, batch.cols());
        for r in 0..end - start {
            let (c_skip, c_out, weight) = (prep.c_skip[r], prep.c_out[r], prep.weight[r]);
            let clean = batch.row(start + r);
            let noisy = prep.noisy.row(r);
            let mut sq = 0.0;
            let srow = seed.row_mut(r);
            for c in 0..clean.len() {
                let resid = c_skip * noisy[c] + c_out * raw.get(r, c) - clean[c];
                sq += resid * resid;
                srow[c] = 2.0 * weight * c_out * resid / (n as f64 * dim);
            }
            total += weight * sq / dim;
        }
        let mut g = tape.backward(out, &seed)?;
        for (acc, leaf) in grads.iter_mut().zip(leaves) {
            if let Some(gl) = g.take(leaf) {
                acc.add_scaled_assign(1.0, &gl)?;
            }
        }
        start = end;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    Ok(LossAndGrads { loss, grads })
}

/// Loss only, through the inference forward path.
pub fn dsm_loss_value(
    params: &DenoiserParams,
    precond: &Preconditioner,
    batch: &Tensor2,
    sigmas: &[f64],
    noise: &Tensor2,
) -> Result<f64> {
    check_batch(params, batch, sigmas, noise)?;
    let prep = Prepared::new(precond, batch, sigmas, noise, 0, batch.rows())?;
    let raw = params.forward_raw_rows(&prep.x_in, &prep.c_noise)?;
    let dim = batch.cols() as f64;
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let mut sq = 0.0;
        for c in 0..batch.cols() {
            let d = prep.c_skip[r] * prep.noisy.get(r, c) + prep.c_out[r] * raw.get(r, c);
            sq += (d - batch.get(r, c)).powi(2);
        }
        total += prep.weight[r] * sq / dim;
    }
    Ok(total / batch.rows() as f64)
}

fn check_batch(
    params: &DenoiserParams,
    batch: &Tensor2,
    sigmas: &[f64],
    noise: &Tensor2,
) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if batch.cols() != params.config().input_dim {
        return Err(Error::dims("dsm_loss", params.config().input_dim, batch.cols()));
    }
    if sigmas.len() != batch.rows() {
        return Err(Error::dims("dsm_loss sigmas", batch.rows(), sigmas.len()));
    }
    batch.expect_same_shape("dsm_loss noise", noise)
}

/// Per-row noisy inputs and scalings for rows `[start, end)`.
struct Prepared {
    noisy: Tensor2,
    x_in: Tensor2,
    c_noise: Vec<f64>,
    c_skip: Vec<f64>,
    c_out: Vec<f64>,
    weight: Vec<f64>,
}

impl Prepared {
    fn new(
        precond: &Preconditioner,
        batch: &Tensor2,
        sigmas: &[f64],
        noise: &Tensor2,
        start: usize,
        end: usize,
    ) -> Result<Self> {
        let rows = end - start;
        let cols = batch.cols();
        let mut noisy = Tensor2::zeros(rows, cols);
        let mut x_in = Tensor2::zeros(rows, cols);
        let mut out = Self {
            noisy: Tensor2::zeros(0, cols),
            x_in: Tensor2::zeros(0, cols),
            c_noise: Vec::with_capacity(rows),
            c_skip: Vec::with_capacity(rows),
            c_out: Vec::with_capacity(rows),
            weight: Vec::with_capacity(rows),
        };
        for r in 0..rows {
            let sigma = sigmas[start + r];
            let s = precond.scalings(sigma)?;
            let (x, e) = (batch.row(start + r), noise.row(start + r));
            for c in 0..cols {
                let v = x[c] + sigma * e[c];
                noisy.set(r, c, v);
                x_in.set(r, c, s.c_in * v);
            }
            out.c_noise.push(s.c_noise);
            out.c_skip.push(s.c_skip);
            out.c_out.push(s.c_out);
            out.weight.push(precond.loss_weight(sigma)?);
        }
        out.noisy = noisy;
        out.x_in = x_in;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub inv_gamma: f64,
    pub power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            weight_decay: 1e-4,
            inv_gamma: 20_000.0,
            power: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.999,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.weight_decay >= 0.0
            && self.inv_gamma > 0.0
            && self.power >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.ema_decay);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid optimizer config {self:?}"
            )));
        }
        Ok(())
    }
}

/// `base_lr / (1 + step / inv_gamma)^power`
pub fn inverse_lr(cfg: &OptimizerConfig, step: u64) -> f64 {
    cfg.base_lr / (1.0 + step as f64 / cfg.inv_gamma).powf(cfg.power)
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Tensor2::zeros(r, c), Tensor2::zeros(r, c)))
            .unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn lr(&self) -> f64 {
        inverse_lr(&self.cfg, self.step)
    }

    pub fn update(&mut self, params: Vec<&mut Tensor2>, grads: &[Tensor2]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dims("adam_step", self.m.len(), grads.len()));
        }
        let lr = self.lr();
        let t = (self.step + 1) as i32;
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            p.expect_same_shape("adam_step", g)?;
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] -= lr * (update + weight_decay * p[i]);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// `ema ← d·ema + (1 − d)·params`
pub fn ema_update(ema: &mut DenoiserParams, params: &DenoiserParams, decay: f64) {
    for (e, p) in ema.tensors_mut().into_iter().zip(params.tensors()) {
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
}

/// Optimizer plus EMA copy.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub adam: AdamW,
    pub ema: DenoiserParams,
    pub ema_decay: f64,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, params: &DenoiserParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: AdamW::new(cfg, params.tensors().iter().map(|t| t.shape())),
            ema: params.clone(),
            ema_decay: cfg.ema_decay,
        })
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grads: &[Tensor2]) -> Result<()> {
        self.adam.update(params.tensors_mut(), grads)?;
        ema_update(&mut self.ema, params, self.ema_decay);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub noise: TrainNoiseConfig,
    pub optim: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Subtract per-dimension means before training.
    pub center: bool,
    /// Hidden widths and embedding size; `input_dim` comes from the data.
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::new(1);
        Self {
            noise: TrainNoiseConfig::default(),
            optim: OptimizerConfig::default(),
            epochs: MAX_EPOCHS,
            batch_size: 8192,
            seed: 0,
            center: false,
            encoder_widths: net.encoder_widths,
            decoder_widths: net.decoder_widths,
            embed_dim: net.embed_dim,
        }
    }
}

impl TrainConfig {
    pub fn network(&self, input_dim: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            embed_dim: self.embed_dim,
            ..NetworkConfig::new(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::InvalidArgument(format!(
                "epochs must be in 1..={MAX_EPOCHS}, got {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        TrainNoiseConfig::new(self.noise.p_mean, self.noise.p_std)?;
        self.optim.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub log: Vec<EpochLog>,
    pub step: u64,
}

/// Trains on `features` (already centered if requested). Row labels are not
/// an input here; only the feature matrix is.
pub fn fit(
    features: &Tensor2,
    precond: &Preconditioner,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.rows() == 0 {
        return Err(Error::InvalidArgument("training set has no rows".into()));
    }
    let mut params = DenoiserParams::init(cfg.network(features.cols()), cfg.seed)?;
    let mut state = OptimizerState::new(cfg.optim, &params)?;
    let mut shuffle_rng = Rng::stream(cfg.seed, Stream::Shuffle);
    let mut noise_rng = Rng::stream(cfg.seed, Stream::TrainNoise);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut rows_seen = 0usize;
        let lr = state.adam.lr();
        for idx in make_batches(features.rows(), cfg.batch_size, Some(&mut shuffle_rng)) {
            let batch = features.select_rows(&idx);
            let sigmas = sample_train_sigma(&mut noise_rng, &cfg.noise, batch.rows());
            let out = dsm_loss(&params, precond, &batch, &sigmas, &mut noise_rng)?;
            state.step(&mut params, &out.grads)?;
            loss_sum += out.loss * batch.rows() as f64;
            rows_seen += batch.rows();
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            step: state.adam.step_count(),
            lr,
            mean_loss: loss_sum / rows_seen as f64,
        };
        info!(
            "epoch {} step {} lr {:.3e} loss {:.6}",
            entry.epoch, entry.step, entry.lr, entry.mean_loss
        );
        on_epoch(&entry);
        log.push(entry);
    }
    let step = state.adam.step_count();
    Ok(TrainOutcome {
        params,
        ema: state.ema,
        log,
        step,
    })
}

/// Centering, σ_data estimation, and training, packaged as a checkpoint
/// whose weights are already rounded to their on-disk precision.
pub fn train_checkpoint(
    features: &Tensor2,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let stats = DataStats::fit(features, cfg.center)?;
    let prepared = stats.apply(features)?;
    let sigma_data = stats.sigma_data;
    let precond = Preconditioner::new(sigma_data)?;
    let outcome = fit(&prepared, &precond, cfg, on_epoch)?;
    let ck = Checkpoint {
        params: outcome.params,
        ema: outcome.ema,
        meta: CheckpointMeta {
            sigma_data,
            p_mean: cfg.noise.p_mean,
            p_std: cfg.noise.p_std,
            step: outcome.step,
            center: stats.center,
        },
    };
    Ok((ck.round_trip()?, outcome.log))
}

/// CSV with columns `epoch,step,lr,mean_loss`.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "lr", "mean_loss"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.step.to_string(),
            e.lr.to_string(),
            e.mean_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::denoise;
    use crate::numeric::Activation;

    fn tiny(dim: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim: dim,
            encoder_widths: vec![6, 3],
            decoder_widths: vec![3, 6],
            embed_dim: 4,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn degenerate_sigma_distribution() {
        let cfg = TrainNoiseConfig {
            p_mean: 0.3,
            p_std: 1e-300,
        };
        let s = sample_train_sigma(&mut Rng::new(1), &cfg, 5);
        assert!(s.iter().all(|&v| v == 0.3_f64.exp()));
    }

    #[test]
    fn log_sigma_mean_over_a_million_draws() {
        // std of the sample mean is 1.2e-3; the window is 5 of those.
        let cfg = TrainNoiseConfig::default();
        let s = sample_train_sigma(&mut Rng::new(21), &cfg, 1_000_000);
        assert!(s.iter().all(|&v| v > 0.0));
        let mean = s.iter().map(|v| v.ln()).sum::<f64>() / s.len() as f64;
        assert!((-1.206..=-1.194).contains(&mean), "{mean}");
    }

    #[test]
    fn loss_weight_values() {
        let p = Preconditioner::new(1.0).unwrap();
        assert_eq!(loss_weight(&p, 1.0).unwrap(), 2.0);
        let p = Preconditioner::new(0.5).unwrap();
        assert!((loss_weight(&p, 80.0).unwrap() - 6400.25 / 1600.0).abs() < 1e-12);
        assert!(loss_weight(&p, 0.0).is_err());
    }

    #[test]
    fn loss_weight_cancels_output_scaling() {
        for sd in [0.25, 0.5, 1.0, 2.0, 7.3] {
            let p = Preconditioner::new(sd).unwrap();
            for i in 0..1000 {
                let sigma = 10f64.powf(-4.0 + 7.0 * i as f64 / 999.0);
                let c_out = p.scalings(sigma).unwrap().c_out;
                let prod = p.loss_weight(sigma).unwrap() * c_out * c_out;
                assert!((prod - 1.0).abs() <= 1e-12, "sd {sd} sigma {sigma}: {prod}");
            }
        }
    }

    #[test]
    fn single_row_matches_hand_composition() {
        let params = DenoiserParams::init_random(tiny(5), 3, 0.3).unwrap();
        let pre = Preconditioner::new(0.9).unwrap();
        let mut rng = Rng::new(5);
        let x = rng.gaussian(1, 5);
        let eps = rng.gaussian(1, 5);
        let sigma = 0.7;
        let noisy = x.add(&eps.scale(sigma)).unwrap();
        let d = denoise(&params, &pre, &noisy, sigma).unwrap();
        let mse = d.sub(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>() / 5.0;
        let want = pre.loss_weight(sigma).unwrap() * mse;
        let got = dsm_loss_with_noise(&params, &pre, &x, &[sigma], &eps).unwrap();
        assert!((got.loss - want).abs() <= 1e-10);
        let value = dsm_loss_value(&params, &pre, &x, &[sigma], &eps).unwrap();
        assert!((value - want).abs() <= 1e-10);
    }

    #[test]
    fn zero_network_residual_vanishes_at_tiny_sigma() {
        // D → x as σ → 0, but λ(σ) grows as 1/σ², so the weighted loss
        // tends to mean‖ε‖²/dim rather than to zero.
        let params = DenoiserParams::zeroed(tiny(4), 1).unwrap();
        let pre = Preconditioner::new(1.0).unwrap();
        let mut rng = Rng::new(2);
        let x = rng.gaussian(8, 4);
        let eps = rng.gaussian(8, 4);
        let sigma = 1e-6;
        let noisy = x.add(&eps.scale(sigma)).unwrap();
        let d = denoise(&params, &pre, &noisy, sigma).unwrap();
        assert!(d.sub(&x).unwrap().max_abs() < 1e-5);

        let got = dsm_loss_with_noise(&params, &pre, &x, &[sigma; 8], &eps).unwrap();
        let s = pre.scalings(sigma).unwrap();
        let mut want = 0.0;
        for r in 0..8 {
            let sq: f64 = (0..4)
                .map(|c| (s.c_skip * (x.get(r, c) + sigma * eps.get(r, c)) - x.get(r, c)).powi(2))
                .sum();
            want += pre.loss_weight(sigma).unwrap() * sq / 4.0;
        }
        want /= 8.0;
        assert!(got.loss >= 0.0);
        assert!((got.loss - want).abs() <= 1e-9 * want);
        let eps_energy = eps.data().iter().map(|v| v * v).sum::<f64>() / 32.0;
        assert!((got.loss - eps_energy).abs() < 1e-4 * eps_energy);
    }

    #[test]
    fn empty_batch_rejected() {
        let params = DenoiserParams::init(tiny(3), 0).unwrap();
        let pre = Preconditioner::new(1.0).unwrap();
        let empty = Tensor2::zeros(0, 3);
        assert!(dsm_loss_with_noise(&params, &pre, &empty, &[], &empty).is_err());
    }

    #[test]
    fn microbatching_matches_single_pass() {
        let params = DenoiserParams::init_random(tiny(3), 9, 0.3).unwrap();
        let pre = Preconditioner::new(1.1).unwrap();
        let mut rng = Rng::new(3);
        let n = MICRO_BATCH + 37;
        let x = rng.gaussian(n, 3);
        let eps = rng.gaussian(n, 3);
        let sig = sample_train_sigma(&mut rng, &TrainNoiseConfig::default(), n);
        let full = dsm_loss_with_noise(&params, &pre, &x, &sig, &eps).unwrap();
        let value = dsm_loss_value(&params, &pre, &x, &sig, &eps).unwrap();
        assert!((full.loss - value).abs() <= 1e-10 * value);
    }

    #[test]
    fn inverse_lr_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(inverse_lr(&cfg, 0), 2e-4);
        assert!((inverse_lr(&cfg, 20_000) - 1e-4).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for step in (0..=100_000).step_by(7) {
            let lr = inverse_lr(&cfg, step);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = Tensor2::row_vector(&[1.5, -2.0]);
        let before = w.clone();
        let mut adam = AdamW::new(cfg, [(1, 2)]);
        for _ in 0..5 {
            adam.update(vec![&mut w], &[Tensor2::zeros(1, 2)]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimizerConfig {
            base_lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = Tensor2::row_vector(&[1.0]);
        let mut adam = AdamW::new(cfg, [(1, 1)]);
        let grad = Tensor2::row_vector(&[2.0 * w.data()[0]]);
        adam.update(vec![&mut w], &[grad]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-6, "{}", w.data()[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut adam = AdamW::new(OptimizerConfig::default(), [(1, 2)]);
        let mut w = Tensor2::zeros(1, 2);
        assert!(adam.update(vec![&mut w], &[Tensor2::zeros(2, 1)]).is_err());
    }

    #[test]
    fn ema_limits_and_geometric_decay() {
        let cfg = tiny(3);
        let start = DenoiserParams::init_random(cfg, 1, 0.5).unwrap();
        let mut target = start.clone();
        let mut rng = Rng::new(99);
        for t in target.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.normal());
        }

        let mut e = start.clone();
        ema_update(&mut e, &target, 0.0);
        assert_eq!(e, target);

        let mut e = start.clone();
        ema_update(&mut e, &target, 1.0);
        assert_eq!(e, start);

        let d: f64 = 0.9;
        let mut e = start.clone();
        for k in 1..=30 {
            ema_update(&mut e, &target, d);
            for ((et, tt), st) in e.tensors().iter().zip(target.tensors()).zip(start.tensors()) {
                for ((&ev, &tv), &sv) in et.data().iter().zip(tt.data()).zip(st.data()) {
                    let want = tv + d.powi(k) * (sv - tv);
                    assert!((ev - want).abs() <= 1e-12);
                }
            }
        }
    }

    fn small_train(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed,
            encoder_widths: vec![8, 4],
            decoder_widths: vec![4, 8],
            embed_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let x = Rng::new(4).gaussian(40, 3);
        let pre = Preconditioner::new(1.0).unwrap();
        let a = fit(&x, &pre, &small_train(7), |_| {}).unwrap();
        let b = fit(&x, &pre, &small_train(7), |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
        assert_eq!(a.log, b.log);
        assert_eq!(a.step, 9);
        assert_eq!(a.log[0].lr, 2e-4);
    }

    #[test]
    fn epoch_limit_enforced() {
        let x = Rng::new(4).gaussian(4, 3);
        let pre = Preconditioner::new(1.0).unwrap();
        let cfg = TrainConfig {
            epochs: MAX_EPOCHS + 1,
            ..small_train(0)
        };
        assert!(fit(&x, &pre, &cfg, |_| {}).is_err());
        assert_eq!(TrainConfig::default().epochs, MAX_EPOCHS);
    }
}
