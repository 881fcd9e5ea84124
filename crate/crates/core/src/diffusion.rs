//! Forward noising, input normalization, velocity-parameterization algebra and
//! the hybrid non-identical DDIM update.
//!
//! All vectors here are flat real vectors. A complex `N_a x N_c` channel is laid
//! out with the real and imaginary parts of each element interleaved, so a time
//! matrix is expanded with [`TimeMatrix::expand`] before it is applied.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::{Schedule, Stepping, TimeMatrix, TimeStepper, CLEAN_BETA};

/// How the noisy state is scaled before it is handed to a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Input is used as is; samples already have norm `sqrt(d)`.
    IdenticalTotalPower,
    /// Input is divided element-wise by `beta` and rescaled to norm `sqrt(d)`.
    IdenticalNoisePower,
}

/// Element-wise signal and noise fractions for one time matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMaps {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NoiseMaps {
    /// Maps for `tau`, with each time entry covering `planes` consecutive reals.
    pub fn new(schedule: &Schedule, tau: &TimeMatrix, planes: usize) -> Result<Self> {
        tau.validate(schedule)?;
        let (alpha, beta) = schedule.alpha_beta(&tau.expand(planes))?;
        Ok(Self { alpha, beta })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws `xi ~ N(0, I)` and returns `(alpha * h0 + beta * xi, xi)`.
pub fn forward_noise<R: Rng + ?Sized>(
    h0: &[f64],
    maps: &NoiseMaps,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("signal", maps.len(), h0.len())?;
    let xi = standard_normal(h0.len(), rng);
    let ht = h0
        .iter()
        .zip(&xi)
        .zip(maps.alpha.iter().zip(&maps.beta))
        .map(|((&h, &x), (&a, &b))| a * h + b * x)
        .collect();
    Ok((ht, xi))
}

/// Scales `h` for the network according to `mode`.
///
/// Under [`NormalizationMode::IdenticalNoisePower`] the result is
/// `Z * h / beta` with `Z = sqrt(d) / ||1 / beta||`; entries of `beta` below
/// `1e-6` are clamped to `1e-6`.
pub fn normalize_input(h: &[f64], beta: &[f64], mode: NormalizationMode) -> Result<Vec<f64>> {
    check_len("beta map", h.len(), beta.len())?;
    match mode {
        NormalizationMode::IdenticalTotalPower => Ok(h.to_vec()),
        NormalizationMode::IdenticalNoisePower => {
            let inv: Vec<f64> = beta.iter().map(|&b| 1.0 / b.max(CLEAN_BETA)).collect();
            let norm = inv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let z = (h.len() as f64).sqrt() / norm;
            Ok(h.iter().zip(&inv).map(|(&x, &w)| z * w * x).collect())
        }
    }
}

/// Velocity target `alpha * xi - beta * h0`.
pub fn velocity_target(h0: &[f64], xi: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    check_len("noise", h0.len(), xi.len())?;
    check_len("alpha map", h0.len(), alpha.len())?;
    check_len("beta map", h0.len(), beta.len())?;
    Ok((0..h0.len()).map(|i| alpha[i] * xi[i] - beta[i] * h0[i]).collect())
}

/// Clean estimate `alpha * g - beta * v` from a velocity prediction.
pub fn recover_x0(g: &[f64], v: &[f64], alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    check_len("velocity", g.len(), v.len())?;
    check_len("alpha map", g.len(), alpha.len())?;
    check_len("beta map", g.len(), beta.len())?;
    Ok((0..g.len()).map(|i| alpha[i] * g[i] - beta[i] * v[i]).collect())
}

/// One hybrid DDIM update with fresh Gaussian noise drawn from `rng`.
pub fn ddim_step<R: Rng + ?Sized>(
    g: &[f64],
    d_hat: &[f64],
    current: &NoiseMaps,
    next: &NoiseMaps,
    eps: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let noise = standard_normal(g.len(), rng);
    ddim_step_with_noise(g, d_hat, current, next, eps, &noise)
}

/// The hybrid DDIM update with caller-supplied noise:
///
/// ```text
/// g_next = (alpha_next - eps alpha beta_next / beta) d_hat
///        + eps (beta_next / beta) g + sqrt(1 - eps^2) beta_next xi
/// ```
///
/// Elements whose `beta` is below `1e-6` are already clean and pass through.
pub fn ddim_step_with_noise(
    g: &[f64],
    d_hat: &[f64],
    current: &NoiseMaps,
    next: &NoiseMaps,
    eps: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Domain(format!("hybrid weight {eps} outside [0, 1]")));
    }
    let n = g.len();
    check_len("denoised estimate", n, d_hat.len())?;
    check_len("current maps", n, current.len())?;
    check_len("next maps", n, next.len())?;
    check_len("noise", n, noise.len())?;
    let stochastic = (1.0 - eps * eps).max(0.0).sqrt();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (current.alpha[i], current.beta[i]);
        let (an, bn) = (next.alpha[i], next.beta[i]);
        if an < a * (1.0 - 1e-12) {
            return Err(Error::Domain(format!(
                "element {i}: signal fraction decreases from {a} to {an}"
            )));
        }
        if b < CLEAN_BETA {
            out.push(g[i]);
            continue;
        }
        let ratio = bn / b;
        out.push((an - eps * a * ratio) * d_hat[i] + eps * ratio * g[i] + stochastic * bn * noise[i]);
    }
    Ok(out)
}

/// Anything that can estimate the clean sample from a noisy state.
pub trait Denoiser: Sync {
    /// Posterior-mean style estimate of the clean signal given `g` at time `tau`.
    fn denoise(&self, g: &[f64], tau: &TimeMatrix, maps: &NoiseMaps) -> Result<Vec<f64>>;
}

/// Settings of the generation loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Number of DDIM updates.
    pub steps: usize,
    /// Hybrid weight of the DDIM update (1 = deterministic).
    pub eps_hybrid: f64,
    pub stepping: Stepping,
    /// Keep a copy of the state after every step.
    #[serde(default)]
    pub record_trajectory: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eps_hybrid: 0.4,
            stepping: Stepping::TAU_WATERFILLING,
            record_trajectory: false,
        }
    }
}

/// State after a generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub tau_mean: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub output: Vec<f64>,
    /// Initial state plus one entry per step, when recording was requested.
    pub trajectory: Vec<Snapshot>,
}

/// Runs the non-identical DDIM loop from `(h_init, tau0)` down to `tau = 0`.
///
/// The denoiser sees the current state; the DDIM algebra always uses the
/// un-normalized state.
pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    h_init: &[f64],
    tau0: &TimeMatrix,
    planes: usize,
    config: &GenerationConfig,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Generation> {
    check_len("initial state", tau0.len() * planes, h_init.len())?;
    tau0.validate(schedule)?;
    let stepper = TimeStepper::new(tau0.clone(), config.steps, config.stepping)?;
    let mut g = h_init.to_vec();
    let mut trajectory = Vec::new();
    if config.record_trajectory {
        trajectory.push(Snapshot { step: 0, tau_mean: tau0.mean(), state: g.clone() });
    }
    if tau0.is_zero() {
        return Ok(Generation { output: g, trajectory });
    }
    let mut tau = tau0.clone();
    let mut maps = NoiseMaps::new(schedule, &tau, planes)?;
    for k in 1..=config.steps {
        let tau_next = stepper.next(&tau, k, schedule)?;
        let next_maps = NoiseMaps::new(schedule, &tau_next, planes)?;
        let d_hat = denoiser.denoise(&g, &tau, &maps)?;
        g = ddim_step(&g, &d_hat, &maps, &next_maps, config.eps_hybrid, rng)?;
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state entry {bad} at generation step {k}")));
        }
        tau = tau_next;
        maps = next_maps;
        if config.record_trajectory {
            trajectory.push(Snapshot { step: k, tau_mean: tau.mean(), state: g.clone() });
        }
    }
    Ok(Generation { output: g, trajectory })
}
