//! Analytic denoisers, an exact forward-SDE simulator and two-sample statistics.
//!
//! Nothing here is learned: a Gaussian-mixture prior has a closed-form
//! posterior mean, so the generation loop can be checked against the prior it
//! is supposed to reproduce.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate, Denoiser, GenerationConfig, NoiseMaps};
use crate::error::{check_len, Error, Result};
use crate::rng::stream;
use crate::schedule::{Schedule, Stepping, TimeMatrix};

/// Isotropic Gaussian mixture `sum_k w_k N(m_k, sigma0^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigma0: f64,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigma0: f64) -> Result<Self> {
        let prior = Self { weights, means, sigma0 };
        prior.validate()?;
        Ok(prior)
    }

    /// Two equally weighted modes at `-1` and `+1` with `sigma0 = 0.3`.
    pub fn reference(dim: usize) -> Self {
        Self { weights: vec![0.5, 0.5], means: vec![vec![-1.0; dim], vec![1.0; dim]], sigma0: 0.3 }
    }

    /// Single Gaussian `N(mean, sigma0^2 I)`.
    pub fn gaussian(mean: Vec<f64>, sigma0: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], sigma0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(Error::Config(format!(
                "{} weights for {} means",
                self.weights.len(),
                self.means.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}")));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::Config(format!("sigma0 = {} must be positive", self.sigma0)));
        }
        let dim = self.means[0].len();
        if dim == 0 {
            return Err(Error::Config("mixture means are empty".into()));
        }
        for m in &self.means {
            check_len("mixture mean", dim, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("mixture mean is not finite".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .map(|m| m + self.sigma0 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `n` draws, draw `i` taken from stream `i` of `seed`.
    pub fn sample_many(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..n).into_par_iter().map(|i| self.sample(&mut stream(seed, i as u64))).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Exact moments of the prior itself.
    pub fn moments(&self) -> Moments {
        self.noised_moments(&vec![1.0; self.dim()], &vec![0.0; self.dim()])
    }

    /// Exact moments of `alpha * H0 + beta * xi` with `H0` drawn from the prior.
    pub fn noised_moments(&self, alpha: &[f64], beta: &[f64]) -> Moments {
        let means: Vec<Vec<f64>> = self
            .means
            .iter()
            .map(|m| m.iter().zip(alpha).map(|(v, a)| a * v).collect())
            .collect();
        let vars: Vec<f64> = alpha
            .iter()
            .zip(beta)
            .map(|(a, b)| a * a * self.sigma0 * self.sigma0 + b * b)
            .collect();
        Moments::of_mixture(&self.weights, &means, &vars)
    }
}

/// First and second moments of a distribution, with the variance of each
/// centered product so that sample covariances can be turned into z-scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// `Var[(X_i - mu_i)(X_j - mu_j)]`.
    pub product_var: Vec<Vec<f64>>,
}

impl Moments {
    /// Moments of a mixture of Gaussians with diagonal covariance `diag(vars)`
    /// shared by all components.
    fn of_mixture(weights: &[f64], means: &[Vec<f64>], vars: &[f64]) -> Self {
        let d = vars.len();
        let mut mean = vec![0.0; d];
        for (w, m) in weights.iter().zip(means) {
            for i in 0..d {
                mean[i] += w * m[i];
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        let mut fourth = vec![vec![0.0; d]; d];
        for (w, m) in weights.iter().zip(means) {
            let a: Vec<f64> = (0..d).map(|i| m[i] - mean[i]).collect();
            for i in 0..d {
                for j in 0..d {
                    if i == j {
                        let (x, s) = (a[i] * a[i], vars[i]);
                        cov[i][i] += w * (x + s);
                        fourth[i][i] += w * (x * x + 6.0 * x * s + 3.0 * s * s);
                    } else {
                        cov[i][j] += w * a[i] * a[j];
                        fourth[i][j] += w * (a[i] * a[i] + vars[i]) * (a[j] * a[j] + vars[j]);
                    }
                }
            }
        }
        let product_var = (0..d)
            .map(|i| (0..d).map(|j| (fourth[i][j] - cov[i][j] * cov[i][j]).max(0.0)).collect())
            .collect();
        Self { mean, cov, product_var }
    }
}

/// Sample mean and (biased) sample covariance.
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = dimension(samples)?;
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n);
    Ok((mean, cov))
}

/// Largest mean and covariance deviations, in standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub max_mean_z: f64,
    pub max_cov_z: f64,
}

impl MomentCheck {
    pub fn within(&self, z: f64) -> bool {
        self.max_mean_z <= z && self.max_cov_z <= z
    }
}

pub fn check_moments(samples: &[Vec<f64>], target: &Moments) -> Result<MomentCheck> {
    let (mean, cov) = sample_moments(samples)?;
    check_len("moment target", mean.len(), target.mean.len())?;
    let n = samples.len() as f64;
    let mut max_mean_z: f64 = 0.0;
    let mut max_cov_z: f64 = 0.0;
    for i in 0..mean.len() {
        let se = (target.cov[i][i] / n).sqrt();
        max_mean_z = max_mean_z.max(z_score(mean[i] - target.mean[i], se));
        for j in 0..mean.len() {
            let se = (target.product_var[i][j] / n).sqrt();
            max_cov_z = max_cov_z.max(z_score(cov[i][j] - target.cov[i][j], se));
        }
    }
    Ok(MomentCheck { max_mean_z, max_cov_z })
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `E[H0 | alpha * H0 + beta * xi = h]` under `prior`.
pub fn gmm_posterior_mean(h: &[f64], alpha: &[f64], beta: &[f64], prior: &GmmPrior) -> Result<Vec<f64>> {
    let d = prior.dim();
    check_len("observation", d, h.len())?;
    check_len("alpha", d, alpha.len())?;
    check_len("beta", d, beta.len())?;
    let s2 = prior.sigma0 * prior.sigma0;
    let var: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| a * a * s2 + b * b).collect();
    let logits: Vec<f64> = prior
        .weights
        .iter()
        .zip(&prior.means)
        .map(|(w, m)| {
            let quad: f64 = (0..d).map(|i| (h[i] - alpha[i] * m[i]).powi(2) / var[i]).sum();
            w.ln() - 0.5 * quad
        })
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonFinite("all mixture responsibilities vanished".into()));
    }
    let r: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = r.iter().sum();
    let mut out = vec![0.0; d];
    for (rk, m) in r.iter().zip(&prior.means) {
        let rk = rk / z;
        for i in 0..d {
            let post = m[i] + alpha[i] * s2 / var[i] * (h[i] - alpha[i] * m[i]);
            out[i] += rk * post;
        }
    }
    for i in 0..d {
        if beta[i] == 0.0 {
            out[i] = h[i];
        }
    }
    Ok(out)
}

/// Posterior mean for a time vector `tau`.
pub fn gmm_denoiser(h: &[f64], tau: &[f64], prior: &GmmPrior, schedule: &Schedule) -> Result<Vec<f64>> {
    let (alpha, beta) = schedule.alpha_beta(tau)?;
    gmm_posterior_mean(h, &alpha, &beta, prior)
}

/// The posterior mean as a [`Denoiser`], optionally shifted by a constant bias.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    pub prior: GmmPrior,
    pub bias: f64,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior) -> Self {
        Self { prior, bias: 0.0 }
    }
}

impl Denoiser for GmmDenoiser {
    fn denoise(&self, g: &[f64], _tau: &TimeMatrix, maps: &NoiseMaps) -> Result<Vec<f64>> {
        let mut out = gmm_posterior_mean(g, &maps.alpha, &maps.beta, &self.prior)?;
        if self.bias != 0.0 {
            out.iter_mut().for_each(|v| *v += self.bias);
        }
        Ok(out)
    }
}

/// Integration scheme for the forward SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeMethod {
    /// `H <- r H + sqrt(1 - r^2) xi` with `r = alpha_s / alpha_{s-1}`; exact in law.
    #[default]
    Multiplicative,
    /// `H <- H + dlog(alpha) H + sqrt(-2 dlog(alpha)) xi`.
    Euler,
}

/// Element-wise `alpha` path from `tau = 0` to `tau_final` in `n_substeps`
/// equal time increments.
pub fn alpha_path(schedule: &Schedule, tau_final: &[f64], n_substeps: usize) -> Result<Vec<Vec<f64>>> {
    if n_substeps == 0 {
        return Err(Error::Domain("alpha path needs at least one substep".into()));
    }
    (0..=n_substeps)
        .map(|s| {
            let frac = s as f64 / n_substeps as f64;
            tau_final.iter().map(|t| schedule.gamma(t * frac)).collect()
        })
        .collect()
}

/// Integrates the forward SDE along `path` (a sequence of element-wise `alpha`
/// vectors starting at or below 1 and non-increasing per element).
pub fn simulate_forward_sde<R: Rng + ?Sized>(
    h0: &[f64],
    path: &[Vec<f64>],
    method: SdeMethod,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_path(path, h0.len())?;
    let mut h = h0.to_vec();
    for pair in path.windows(2) {
        for i in 0..h.len() {
            let (prev, cur) = (pair[0][i], pair[1][i]);
            let xi: f64 = rng.sample(StandardNormal);
            match method {
                SdeMethod::Multiplicative => {
                    let r = if prev > 0.0 { cur / prev } else { 1.0 };
                    h[i] = r * h[i] + (1.0 - r * r).max(0.0).sqrt() * xi;
                }
                SdeMethod::Euler => {
                    let dlog = if prev > 0.0 && cur > 0.0 { cur.ln() - prev.ln() } else { 0.0 };
                    h[i] += dlog * h[i] + (-2.0 * dlog).max(0.0).sqrt() * xi;
                }
            }
        }
    }
    Ok(h)
}

fn check_path(path: &[Vec<f64>], d: usize) -> Result<()> {
    if path.len() < 2 {
        return Err(Error::Domain("alpha path needs a start and an end".into()));
    }
    for (s, a) in path.iter().enumerate() {
        check_len("alpha path entry", d, a.len())?;
        for (i, &v) in a.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("alpha {v} outside [0, 1] at substep {s}")));
            }
            if s > 0 && v > path[s - 1][i] {
                return Err(Error::Domain(format!("alpha path increases at substep {s}, element {i}")));
            }
        }
    }
    Ok(())
}

fn dimension(samples: &[Vec<f64>]) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::Domain("empty sample set".into()))?;
    for s in samples {
        check_len("sample", first.len(), s.len())?;
    }
    Ok(first.len())
}

/// Mean Euclidean distance over all pairs `(x, y)`, summed in a fixed order.
fn mean_cross_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = x
        .par_iter()
        .map(|a| {
            y.iter()
                .map(|b| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                .sum()
        })
        .collect();
    rows.iter().sum::<f64>() / (x.len() as f64 * y.len() as f64)
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` between two empirical
/// distributions (V-statistic).
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let dx = dimension(x)?;
    let dy = dimension(y)?;
    check_len("sample dimension", dx, dy)?;
    let e = 2.0 * mean_cross_distance(x, y) - mean_cross_distance(x, x) - mean_cross_distance(y, y);
    Ok(e.max(0.0))
}

/// A sample set with its self-distance term cached, for repeated comparisons.
pub struct EnergySample {
    samples: Vec<Vec<f64>>,
    self_term: f64,
}

impl EnergySample {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        dimension(&samples)?;
        let self_term = mean_cross_distance(&samples, &samples);
        Ok(Self { samples, self_term })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn distance(&self, other: &EnergySample) -> Result<f64> {
        check_len("sample dimension", self.samples[0].len(), other.samples[0].len())?;
        let cross = mean_cross_distance(&self.samples, &other.samples);
        Ok((2.0 * cross - self.self_term - other.self_term).max(0.0))
    }
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_x - F_y|`.
pub fn ks_statistic(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Domain("empty sample for KS statistic".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(best)
}

/// Settings of the forward-law check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardLawConfig {
    pub prior: GmmPrior,
    pub tau_final: Vec<f64>,
    pub n_substeps: usize,
    pub n_samples: usize,
    pub method: SdeMethod,
    pub max_energy: f64,
    pub max_z: f64,
}

impl Default for ForwardLawConfig {
    fn default() -> Self {
        Self {
            prior: GmmPrior::reference(2),
            tau_final: vec![500.0, 250.0],
            n_substeps: 200,
            n_samples: 10_000,
            method: SdeMethod::Multiplicative,
            max_energy: 0.02,
            max_z: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardLawReport {
    pub tau_final: Vec<f64>,
    pub method: SdeMethod,
    pub n_samples: usize,
    pub energy_distance: f64,
    pub simulated: MomentCheck,
    pub direct: MomentCheck,
    pub max_energy: f64,
    pub max_z: f64,
    pub passed: bool,
}

/// Compares SDE integration from prior draws against direct sampling of
/// `alpha * H0 + beta * xi`, and both against the exact noised moments.
pub fn check_forward_law(config: &ForwardLawConfig, schedule: &Schedule, seed: u64) -> Result<ForwardLawReport> {
    let prior = &config.prior;
    prior.validate()?;
    check_len("final time", prior.dim(), config.tau_final.len())?;
    let path = alpha_path(schedule, &config.tau_final, config.n_substeps)?;
    check_path(&path, prior.dim())?;
    let (alpha, beta) = schedule.alpha_beta(&config.tau_final)?;
    let simulated: Vec<Vec<f64>> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let h0 = prior.sample(&mut rng);
            simulate_forward_sde(&h0, &path, config.method, &mut rng)
        })
        .collect::<Result<_>>()?;
    let direct_seed = seed.wrapping_add(1);
    let direct: Vec<Vec<f64>> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(direct_seed, i as u64);
            let h0 = prior.sample(&mut rng);
            (0..h0.len())
                .map(|k| alpha[k] * h0[k] + beta[k] * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let target = prior.noised_moments(&alpha, &beta);
    let energy = energy_distance(&simulated, &direct)?;
    let sim_check = check_moments(&simulated, &target)?;
    let direct_check = check_moments(&direct, &target)?;
    Ok(ForwardLawReport {
        tau_final: config.tau_final.clone(),
        method: config.method,
        n_samples: config.n_samples,
        energy_distance: energy,
        simulated: sim_check,
        direct: direct_check,
        max_energy: config.max_energy,
        max_z: config.max_z,
        passed: energy < config.max_energy && sim_check.within(config.max_z),
    })
}

/// Settings of the generation-correctness check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationCheckConfig {
    pub prior: GmmPrior,
    /// Starting time vectors, one entry per coordinate.
    pub t0_patterns: Vec<Vec<f64>>,
    pub steppings: Vec<Stepping>,
    pub eps_values: Vec<f64>,
    pub steps: usize,
    pub n_samples: usize,
    /// Constant added to every denoiser output; nonzero values sabotage the check.
    pub denoiser_bias: f64,
    pub max_energy: f64,
    pub max_pairwise_energy: f64,
    pub max_z: f64,
}

impl Default for GenerationCheckConfig {
    fn default() -> Self {
        Self {
            prior: GmmPrior::reference(2),
            t0_patterns: vec![vec![500.0, 250.0]],
            steppings: vec![
                Stepping::TAU_LINEAR,
                Stepping::TAU_WATERFILLING,
                Stepping::ALPHA_LINEAR,
                Stepping::ALPHA_WATERFILLING,
            ],
            eps_values: vec![0.4, 1.0],
            steps: 200,
            n_samples: 10_000,
            denoiser_bias: 0.0,
            max_energy: 0.05,
            max_pairwise_energy: 0.05,
            max_z: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCase {
    pub t0: Vec<f64>,
    pub stepping: Stepping,
    pub eps_hybrid: f64,
    pub energy_distance: f64,
    pub sample_mean: Vec<f64>,
    pub sample_cov: Vec<Vec<f64>>,
    pub moments: MomentCheck,
    /// Every output equals its input bit for bit (expected when `t0 = 0`).
    pub identity: bool,
    pub energy_pass: bool,
    pub moment_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCase {
    pub t0: Vec<f64>,
    pub eps_hybrid: f64,
    pub first: Stepping,
    pub second: Stepping,
    pub energy_distance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_samples: usize,
    pub steps: usize,
    pub target: Moments,
    pub max_energy: f64,
    pub max_pairwise_energy: f64,
    pub max_z: f64,
    pub cases: Vec<GenerationCase>,
    pub pairwise: Vec<PairwiseCase>,
    pub passed: bool,
}

/// Starts from `alpha * H0 + beta * xi` at each `t0`, runs [`generate`] with
/// the exact posterior mean and compares the outputs with fresh prior draws
/// and with each other.
pub fn check_theorem2(config: &GenerationCheckConfig, schedule: &Schedule, seed: u64) -> Result<GenerationReport> {
    let prior = &config.prior;
    prior.validate()?;
    if config.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let d = prior.dim();
    let denoiser = GmmDenoiser { prior: prior.clone(), bias: config.denoiser_bias };
    let target = prior.moments();
    let reference = EnergySample::new(prior.sample_many(config.n_samples, seed))?;
    let mut cases = Vec::new();
    let mut pairwise = Vec::new();
    for (p, t0) in config.t0_patterns.iter().enumerate() {
        check_len("starting time", d, t0.len())?;
        let tau0 = TimeMatrix::new(1, d, t0.clone())?;
        let maps0 = NoiseMaps::new(schedule, &tau0, 1)?;
        let start_seed = seed.wrapping_add(1 + p as u64);
        let starts: Vec<Vec<f64>> = (0..config.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(start_seed, i as u64);
                let h0 = prior.sample(&mut rng);
                (0..d)
                    .map(|k| maps0.alpha[k] * h0[k] + maps0.beta[k] * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        for &eps in &config.eps_values {
            let mut outputs: Vec<(Stepping, EnergySample)> = Vec::new();
            for (r, &stepping) in config.steppings.iter().enumerate() {
                let gen = GenerationConfig { steps: config.steps, eps_hybrid: eps, stepping, record_trajectory: false };
                let run_seed = seed.wrapping_add(1_000 + 100 * p as u64 + r as u64);
                let out: Vec<Vec<f64>> = starts
                    .par_iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let mut rng = stream(run_seed, i as u64);
                        generate(&denoiser, g, &tau0, 1, &gen, schedule, &mut rng).map(|g| g.output)
                    })
                    .collect::<Result<_>>()?;
                let identity = out == starts;
                let (sample_mean, sample_cov) = sample_moments(&out)?;
                let moments = check_moments(&out, &target)?;
                let sample = EnergySample::new(out)?;
                let energy = sample.distance(&reference)?;
                log::info!("t0={t0:?} eps={eps} {stepping}: energy {energy:.4}, z {moments:?}");
                cases.push(GenerationCase {
                    t0: t0.clone(),
                    stepping,
                    eps_hybrid: eps,
                    energy_distance: energy,
                    sample_mean,
                    sample_cov,
                    moments,
                    identity,
                    energy_pass: energy < config.max_energy,
                    moment_pass: moments.within(config.max_z),
                });
                outputs.push((stepping, sample));
            }
            for a in 0..outputs.len() {
                for b in a + 1..outputs.len() {
                    let energy = outputs[a].1.distance(&outputs[b].1)?;
                    pairwise.push(PairwiseCase {
                        t0: t0.clone(),
                        eps_hybrid: eps,
                        first: outputs[a].0,
                        second: outputs[b].0,
                        energy_distance: energy,
                        pass: energy < config.max_pairwise_energy,
                    });
                }
            }
        }
    }
    let passed = cases.iter().all(|c| c.energy_pass && c.moment_pass) && pairwise.iter().all(|p| p.pass);
    Ok(GenerationReport {
        n_samples: config.n_samples,
        steps: config.steps,
        target,
        max_energy: config.max_energy,
        max_pairwise_energy: config.max_pairwise_energy,
        max_z: config.max_z,
        cases,
        pairwise,
        passed,
    })
}
