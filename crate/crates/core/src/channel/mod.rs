//! Synthetic multi-antenna OFDM channels, observation noise maps and the
//! mapping from a noisy observation to a diffusion starting point.
//!
//! Channels use the same flat layout as the model: element `(a, c)` of an
//! `N_a x N_c` complex matrix sits at `2 (a N_c + c)` (real part) and
//! `2 (a N_c + c) + 1` (imaginary part). Every sample is scaled so that this
//! real vector has norm `sqrt(2 N_a N_c)`.
//!
//! Observation noise is Gaussian with unit variance per real component after
//! scaling by the reliability `M`: `H_bar = M * H + n`. Noise maps hold the
//! per-real-component variance `sigma^2` of the unscaled noise, so that
//! `M = 1 / sigma` on observed elements.

mod dataset;

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::{Schedule, TimeMatrix};

pub use dataset::{normalize, read_dataset, write_dataset, ChannelDataset};

/// Parameters of the multipath generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub min_paths: usize,
    pub max_paths: usize,
    pub subcarrier_spacing_hz: f64,
    /// Path delays are uniform in `[0, delay_spread_s]`.
    pub delay_spread_s: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self { min_paths: 3, max_paths: 8, subcarrier_spacing_hz: 300e3, delay_spread_s: 1e-6 }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_paths == 0 || self.min_paths > self.max_paths {
            return Err(Error::Config(format!("path count range {}..={} is invalid", self.min_paths, self.max_paths)));
        }
        if !(self.subcarrier_spacing_hz > 0.0 && self.delay_spread_s >= 0.0) {
            return Err(Error::Config("subcarrier spacing must be positive and delay spread nonnegative".into()));
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain_re: f64,
    pub gain_im: f64,
    pub delay_s: f64,
    /// Angle of departure in radians.
    pub angle: f64,
}

/// `H[a, c] = sum_p g_p exp(-j 2 pi c df tau_p) exp(-j pi a sin(theta_p))`, unscaled.
pub fn channel_from_paths(paths: &[Path], n_antennas: usize, n_subcarriers: usize, spacing_hz: f64) -> Vec<f64> {
    let mut h = vec![0.0; 2 * n_antennas * n_subcarriers];
    for p in paths {
        for a in 0..n_antennas {
            for c in 0..n_subcarriers {
                let phase = -2.0 * PI * c as f64 * spacing_hz * p.delay_s - PI * a as f64 * p.angle.sin();
                let (s, co) = phase.sin_cos();
                let k = 2 * (a * n_subcarriers + c);
                h[k] += p.gain_re * co - p.gain_im * s;
                h[k + 1] += p.gain_re * s + p.gain_im * co;
            }
        }
    }
    h
}

/// A random multipath channel scaled to norm `sqrt(2 N_a N_c)`.
pub fn synth_channel<R: Rng + ?Sized>(
    params: &ChannelParams,
    n_antennas: usize,
    n_subcarriers: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.validate()?;
    let count = rng.random_range(params.min_paths..=params.max_paths);
    let scale = (0.5 / count as f64).sqrt();
    let paths: Vec<Path> = (0..count)
        .map(|_| Path {
            gain_re: scale * rng.sample::<f64, _>(StandardNormal),
            gain_im: scale * rng.sample::<f64, _>(StandardNormal),
            delay_s: rng.random::<f64>() * params.delay_spread_s,
            angle: rng.random_range(-PI / 2.0..PI / 2.0),
        })
        .collect();
    normalize(&channel_from_paths(&paths, n_antennas, n_subcarriers, params.subcarrier_spacing_hz))
}

/// Generation-time observation patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPatternKind {
    White,
    Exp,
    Salt,
    SaltRec,
    Pilot,
    PilotCar,
}

impl InitPatternKind {
    pub const ALL: [InitPatternKind; 6] = [
        InitPatternKind::White,
        InitPatternKind::Exp,
        InitPatternKind::Salt,
        InitPatternKind::SaltRec,
        InitPatternKind::Pilot,
        InitPatternKind::PilotCar,
    ];

    pub fn default_snr_db(self) -> f64 {
        match self {
            InitPatternKind::White => -10.0,
            InitPatternKind::Exp => -5.0,
            InitPatternKind::Salt | InitPatternKind::SaltRec => 0.0,
            InitPatternKind::Pilot | InitPatternKind::PilotCar => 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitPatternSpec {
    pub kind: InitPatternKind,
    /// Defaults to the pattern's own SNR.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default = "pattern_defaults::keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "pattern_defaults::exp_rate")]
    pub exp_rate: f64,
    #[serde(default = "pattern_defaults::salt_rec_period")]
    pub salt_rec_period: (usize, usize),
    #[serde(default = "pattern_defaults::pilot_spacing")]
    pub pilot_spacing: usize,
    #[serde(default = "pattern_defaults::pilot_car_period")]
    pub pilot_car_period: usize,
    #[serde(default = "pattern_defaults::background_fraction")]
    pub background_fraction: f64,
}

mod pattern_defaults {
    pub fn keep_fraction() -> f64 {
        0.3
    }
    pub fn exp_rate() -> f64 {
        0.5
    }
    pub fn salt_rec_period() -> (usize, usize) {
        (8, 8)
    }
    pub fn pilot_spacing() -> usize {
        2
    }
    pub fn pilot_car_period() -> usize {
        8
    }
    pub fn background_fraction() -> f64 {
        0.1
    }
}

impl InitPatternSpec {
    pub fn new(kind: InitPatternKind) -> Self {
        Self {
            kind,
            snr_db: None,
            keep_fraction: pattern_defaults::keep_fraction(),
            exp_rate: pattern_defaults::exp_rate(),
            salt_rec_period: pattern_defaults::salt_rec_period(),
            pilot_spacing: pattern_defaults::pilot_spacing(),
            pilot_car_period: pattern_defaults::pilot_car_period(),
            background_fraction: pattern_defaults::background_fraction(),
        }
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db.unwrap_or_else(|| self.kind.default_snr_db())
    }

    pub fn validate(&self, n_antennas: usize, n_subcarriers: usize) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !self.snr_db().is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        if !in_unit(self.keep_fraction) || !in_unit(self.background_fraction) {
            return Err(Error::Config("pattern fractions must lie in (0, 1]".into()));
        }
        if !(self.exp_rate.is_finite() && self.exp_rate > 0.0) {
            return Err(Error::Config("exp_rate must be positive".into()));
        }
        let periods = match self.kind {
            InitPatternKind::SaltRec => vec![(self.salt_rec_period.0, n_antennas), (self.salt_rec_period.1, n_subcarriers)],
            InitPatternKind::Pilot => vec![(self.pilot_spacing, n_antennas), (self.pilot_spacing, n_subcarriers)],
            InitPatternKind::PilotCar => vec![(self.pilot_car_period, n_subcarriers)],
            _ => vec![],
        };
        for (p, dim) in periods {
            if p == 0 || p > dim {
                return Err(Error::Config(format!("period {p} does not fit dimension {dim}")));
            }
        }
        Ok(())
    }
}

/// Per-element reliability and the noise map it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Reliability {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    /// Amplitude reliability per complex element; zero where unobserved.
    pub m: Vec<f64>,
    /// Noise variance per real component, per complex element.
    pub noise_var: Vec<f64>,
    /// Elements that carry a structured observation.
    pub observed: Vec<bool>,
}

/// Builds the noise map of `spec` and converts it to reliabilities.
///
/// The total `sum sigma^2` equals `N / snr` with `N = N_a N_c`, so that the
/// signal energy `2N` over the noise energy `2 sum sigma^2` is the SNR. A
/// `background_fraction` of that total is spread evenly over every element;
/// the rest follows the pattern on the observed elements only.
pub fn make_reliability<R: Rng + ?Sized>(
    spec: &InitPatternSpec,
    n_antennas: usize,
    n_subcarriers: usize,
    rng: &mut R,
) -> Result<Reliability> {
    spec.validate(n_antennas, n_subcarriers)?;
    let n = n_antennas * n_subcarriers;
    let budget = n as f64 / 10f64.powf(spec.snr_db() / 10.0);
    let exp = Exp::new(spec.exp_rate).map_err(|e| Error::Config(e.to_string()))?;
    let keep = |count: usize| ((spec.keep_fraction * count as f64).round() as usize).max(1);
    let mut observed = vec![true; n];
    let mut weight = vec![1.0; n];
    match spec.kind {
        InitPatternKind::White => {}
        InitPatternKind::Exp => weight.iter_mut().for_each(|w| *w = exp.sample(rng)),
        InitPatternKind::Salt => {
            observed.fill(false);
            for i in sample_indices(rng, n, keep(n)) {
                observed[i] = true;
            }
        }
        InitPatternKind::SaltRec => {
            let (pa, pc) = spec.salt_rec_period;
            let mut tile_kept = vec![false; pa * pc];
            for i in sample_indices(rng, pa * pc, keep(pa * pc)) {
                tile_kept[i] = true;
            }
            let tile_weight: Vec<f64> = (0..pa * pc).map(|_| exp.sample(rng)).collect();
            for a in 0..n_antennas {
                for c in 0..n_subcarriers {
                    let t = (a % pa) * pc + c % pc;
                    observed[a * n_subcarriers + c] = tile_kept[t];
                    weight[a * n_subcarriers + c] = tile_weight[t];
                }
            }
        }
        InitPatternKind::Pilot => {
            let s = spec.pilot_spacing;
            for a in 0..n_antennas {
                for c in 0..n_subcarriers {
                    observed[a * n_subcarriers + c] = a % s == 0 && c % s == 0;
                }
            }
        }
        InitPatternKind::PilotCar => {
            let p = spec.pilot_car_period;
            for a in 0..n_antennas {
                for c in 0..n_subcarriers {
                    observed[a * n_subcarriers + c] = c % p == 0;
                }
            }
        }
    }
    let structured: f64 = (0..n).filter(|&i| observed[i]).map(|i| weight[i]).sum();
    if !(structured > 0.0) {
        return Err(Error::Domain("pattern observes no element".into()));
    }
    let background = spec.background_fraction * budget / n as f64;
    let scale = (1.0 - spec.background_fraction) * budget / structured;
    let noise_var: Vec<f64> =
        (0..n).map(|i| background + if observed[i] { scale * weight[i] } else { 0.0 }).collect();
    let m = (0..n).map(|i| if observed[i] { 1.0 / noise_var[i].sqrt() } else { 0.0 }).collect();
    Ok(Reliability { n_antennas, n_subcarriers, m, noise_var, observed })
}

/// `H_bar = M * H + n` with `n ~ N(0, 1)` per real component.
pub fn observe<R: Rng + ?Sized>(h: &[f64], reliability: &Reliability, rng: &mut R) -> Result<Vec<f64>> {
    check_len("channel", 2 * reliability.m.len(), h.len())?;
    Ok(h.iter()
        .enumerate()
        .map(|(k, v)| reliability.m[k / 2] * v + rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Starting state and time matrix for a noisy observation:
/// `h_init = H_bar / (M + 1)`, `tau0 = gamma^-1(M / (M + 1))`.
pub fn init_diffusion_state(h_bar: &[f64], reliability: &Reliability, schedule: &Schedule) -> Result<(Vec<f64>, TimeMatrix)> {
    check_len("observation", 2 * reliability.m.len(), h_bar.len())?;
    let h_init = h_bar.iter().enumerate().map(|(k, v)| v / (reliability.m[k / 2] + 1.0)).collect();
    let tau = reliability
        .m
        .iter()
        .map(|&m| schedule.gamma_inverse(m / (m + 1.0)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((h_init, TimeMatrix::new(reliability.n_antennas, reliability.n_subcarriers, tau)?))
}

/// Identical-diffusion baseline: the same starting state with one scalar time
/// `gamma^-1(mean(M / (M + 1)))` for every element.
pub fn identical_init(h_bar: &[f64], reliability: &Reliability, schedule: &Schedule) -> Result<(Vec<f64>, TimeMatrix)> {
    let (h_init, _) = init_diffusion_state(h_bar, reliability, schedule)?;
    let mean = reliability.m.iter().map(|&m| m / (m + 1.0)).sum::<f64>() / reliability.m.len() as f64;
    let t = schedule.gamma_inverse(mean)?;
    Ok((h_init, TimeMatrix::filled(reliability.n_antennas, reliability.n_subcarriers, t)))
}

/// `||h_hat - h||^2 / ||h||^2`.
pub fn nmse(h_hat: &[f64], h: &[f64]) -> Result<f64> {
    check_len("estimate", h.len(), h_hat.len())?;
    let den: f64 = h.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::Domain("NMSE against a zero reference".into()));
    }
    let num: f64 = h_hat.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / den)
}
