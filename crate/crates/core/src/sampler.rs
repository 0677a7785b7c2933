//! Karras noise schedules and a linear multistep solver for the
//! probability-flow ODE `dx/dσ = (x − D(x; σ)) / σ`.

use crate::error::{Error, Result};
use crate::network::{check_sigma, Denoiser};
use crate::numeric::{Rng, Tensor2};
use crate::training::TrainNoiseConfig;

pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_LMS_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Number of denoiser evaluations for a full run, `T`.
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl ScheduleConfig {
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        let cfg = Self {
            steps,
            sigma_min,
            sigma_max,
            rho,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bounds tied to the training noise via [`noise_bounds`].
    pub fn from_training_noise(noise: &TrainNoiseConfig, steps: usize, rho: f64) -> Result<Self> {
        let (lo, hi) = noise_bounds(noise);
        Self::new(steps, lo, hi, rho)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.steps >= 2
            && self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.sigma_max.is_finite()
            && self.rho > 0.0
            && self.rho.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2, 0 < sigma_min < sigma_max, rho > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Descending noise levels `σ_0 = σ_max > … > σ_{T−1} = σ_min > σ_T = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `T`, the number of solver steps from index 0.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }
}

/// `σ_i = (σ_max^{1/ρ} + i/(T−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for
/// `i < T`, then `σ_T = 0`. The two ends are pinned to the configured bounds.
pub fn karras_schedule(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let t = cfg.steps;
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut sigmas: Vec<f64> = (0..t)
        .map(|i| (hi + i as f64 / (t - 1) as f64 * (lo - hi)).powf(cfg.rho))
        .collect();
    sigmas[0] = cfg.sigma_max;
    sigmas[t - 1] = cfg.sigma_min;
    sigmas.push(0.0);
    if sigmas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Numeric(format!(
            "schedule is not strictly decreasing: {sigmas:?}"
        )));
    }
    Ok(NoiseSchedule { sigmas })
}

/// `(σ_min, σ_max) = (e^{P_mean − 5·P_std}, e^{P_mean + 5·P_std})`
pub fn noise_bounds(cfg: &TrainNoiseConfig) -> (f64, f64) {
    (
        (cfg.p_mean - 5.0 * cfg.p_std).exp(),
        (cfg.p_mean + 5.0 * cfg.p_std).exp(),
    )
}

/// `(x − D(x; σ)) / σ`, i.e. `−σ` times the score `(D − x)/σ²`.
pub fn ode_derivative<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &Tensor2,
    sigma: f64,
) -> Result<Tensor2> {
    check_sigma(sigma)?;
    let d = denoiser.denoise(x, sigma)?;
    x.zip_map(&d, |xv, dv| (xv - dv) / sigma)
}

/// Weight of the derivative taken `lag` steps back when stepping from
/// `σ_i` to `σ_{i+1}` with `order` points: the exact integral over
/// `[σ_i, σ_{i+1}]` of the Lagrange basis polynomial through
/// `σ_i, σ_{i−1}, …, σ_{i−order+1}` that is one at `σ_{i−lag}`.
pub fn lms_coefficient(sigmas: &[f64], i: usize, order: usize, lag: usize) -> f64 {
    debug_assert!(lag < order && order <= i + 1 && i + 1 < sigmas.len());
    let origin = sigmas[i];
    // Polynomial in u = τ − σ_i, lowest power first.
    let mut poly = vec![1.0];
    for k in 0..order {
        if k == lag {
            continue;
        }
        let root = sigmas[i - k] - origin;
        let denom = sigmas[i - lag] - sigmas[i - k];
        let mut next = vec![0.0; poly.len() + 1];
        for (n, &a) in poly.iter().enumerate() {
            next[n + 1] += a / denom;
            next[n] -= a * root / denom;
        }
        poly = next;
    }
    let h = sigmas[i + 1] - origin;
    poly.iter()
        .enumerate()
        .map(|(n, &a)| a * h.powi(n as i32 + 1) / (n + 1) as f64)
        .sum()
}

/// Integrates from `σ_start` down to `σ_T = 0` with a linear multistep
/// method of at most `order` points. `x_start` must already be at noise
/// level `σ_start`.
pub fn lms_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x_start: &Tensor2,
    start_index: usize,
    order: usize,
) -> Result<Tensor2> {
    let t = schedule.steps();
    if start_index > t {
        return Err(Error::InvalidArgument(format!(
            "start index {start_index} outside 0..={t}"
        )));
    }
    if order == 0 {
        return Err(Error::InvalidArgument("LMS order must be at least 1".into()));
    }
    let sigmas = schedule.sigmas();
    let mut x = x_start.clone();
    let mut history: Vec<Tensor2> = Vec::with_capacity(order);
    for i in start_index..t {
        let d = ode_derivative(denoiser, &x, sigmas[i])?;
        if history.len() == order {
            history.remove(0);
        }
        history.push(d);
        let cur = history.len();
        for lag in 0..cur {
            let c = lms_coefficient(sigmas, i, cur, lag);
            x.add_scaled_assign(c, &history[cur - 1 - lag])?;
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite sample after step {i} (sigma {})",
                sigmas[i]
            )));
        }
    }
    Ok(x)
}

/// `fea + σ_t·ε`
pub fn corrupt(schedule: &NoiseSchedule, fea: &Tensor2, t: usize, rng: &mut Rng) -> Result<Tensor2> {
    check_start(schedule, t)?;
    let eps = rng.gaussian(fea.rows(), fea.cols());
    let mut noisy = fea.clone();
    noisy.add_scaled_assign(schedule.sigma(t), &eps)?;
    Ok(noisy)
}

/// Corrupts `fea` to level `σ_t` and integrates back to zero noise.
pub fn partial_reconstruct<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    fea: &Tensor2,
    t: usize,
    order: usize,
    rng: &mut Rng,
) -> Result<Tensor2> {
    if fea.cols() != denoiser.input_dim() {
        return Err(Error::dims("partial_reconstruct", denoiser.input_dim(), fea.cols()));
    }
    let noisy = corrupt(schedule, fea, t, rng)?;
    lms_sample(denoiser, schedule, &noisy, t, order)
}

fn check_start(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t >= schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "start index t = {t} must be below T = {}",
            schedule.steps()
        )));
    }
    Ok(())
}
