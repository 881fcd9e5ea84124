//! Interleaved MLP-Mixer denoiser with per-antenna and per-subcarrier time
//! embeddings.
//!
//! A sample is an `N_a x N_c` complex matrix stored as a flat real vector with
//! the real and imaginary parts of element `(a, c)` at `2 (a N_c + c)` and
//! `2 (a N_c + c) + 1`. Each block runs an antenna sublayer (an MLP over the
//! `2 N_a` reals of one subcarrier column) and then a subcarrier sublayer (an
//! MLP over the `2 N_c` reals of one antenna row), both pre-normalized and
//! residual.
//!
//! Time enters at four sites per block: the input and output of the antenna
//! MLP (sites 0 and 1) and of the subcarrier MLP (sites 2 and 3). The time
//! matrix is first reduced to `tau_c` (one time per antenna) and `tau_a` (one
//! time per subcarrier); see [`reduce_time`]. At an active site the embedding
//! of each reduced time is projected to two features and added to every
//! element of the corresponding antenna row or subcarrier column.
//!
//! Gradients are written by hand, layer by layer.

mod checkpoint;
mod mixer;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{normalize_input, recover_x0, Denoiser, NoiseMaps, NormalizationMode};
use crate::error::{check_len, Error, Result};
use crate::schedule::{Schedule, TimeMatrix};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

/// Number of real features per matrix element.
pub const FEATURES: usize = 2;
/// Injection sites per block.
pub const SITES: usize = 4;

/// Which reduced time vector feeds which site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingScheme {
    /// `tau_a` at sites 0 and 1, `tau_c` at sites 2 and 3.
    RowWise,
    /// `tau_c` at sites 0 and 1, `tau_a` at sites 2 and 3.
    ColumnWise,
    /// Both vectors at sites 0 and 3; sites 1 and 2 unused.
    Together,
}

/// How a row or column of the time matrix is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAveraging {
    /// Arithmetic mean of the times.
    TauAvg,
    /// Mean of `gamma(tau)`, mapped back through the inverse schedule.
    AlphaAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_K * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_K * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Identity => 1.0,
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Reduced time axis: `Antenna` holds `tau_c` (length `N_a`), `Subcarrier`
/// holds `tau_a` (length `N_c`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Antenna = 0,
    Subcarrier = 1,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::Antenna, Axis::Subcarrier];
}

impl EmbeddingScheme {
    /// Whether the embedding of `axis` is injected at `site`.
    pub fn is_active(self, site: usize, axis: Axis) -> bool {
        use Axis::*;
        use EmbeddingScheme::*;
        matches!(
            (self, site, axis),
            (RowWise, 0 | 1, Subcarrier)
                | (RowWise, 2 | 3, Antenna)
                | (ColumnWise, 0 | 1, Antenna)
                | (ColumnWise, 2 | 3, Subcarrier)
                | (Together, 0 | 3, _)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    #[serde(default = "defaults::n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "defaults::hidden_mult")]
    pub hidden_mult: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::scheme")]
    pub embedding_scheme: EmbeddingScheme,
    #[serde(default = "defaults::averaging")]
    pub averaging: TimeAveraging,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "defaults::max_time")]
    pub max_time: u32,
}

mod defaults {
    use super::*;
    pub fn n_blocks() -> usize {
        4
    }
    pub fn hidden_mult() -> usize {
        2
    }
    pub fn embed_dim() -> usize {
        64
    }
    pub fn scheme() -> EmbeddingScheme {
        EmbeddingScheme::ColumnWise
    }
    pub fn averaging() -> TimeAveraging {
        TimeAveraging::AlphaAvg
    }
    pub fn max_time() -> u32 {
        crate::schedule::DEFAULT_MAX_TIME
    }
}

impl MixerConfig {
    /// Default sizes for an `n_antennas x n_subcarriers` grid.
    pub fn new(n_antennas: usize, n_subcarriers: usize) -> Self {
        Self {
            n_antennas,
            n_subcarriers,
            n_blocks: defaults::n_blocks(),
            hidden_mult: defaults::hidden_mult(),
            embed_dim: defaults::embed_dim(),
            embedding_scheme: defaults::scheme(),
            averaging: defaults::averaging(),
            activation: Activation::Gelu,
            max_time: defaults::max_time(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0 || self.n_subcarriers == 0 || self.hidden_mult == 0 || self.max_time == 0 {
            return Err(Error::Config(format!("mixer sizes must be positive: {self:?}")));
        }
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim {} must be even and at least 4", self.embed_dim)));
        }
        Ok(())
    }

    /// Length of one flattened sample.
    pub fn sample_len(&self) -> usize {
        self.n_antennas * self.n_subcarriers * FEATURES
    }
}

/// `tau` reduced along each axis and rounded to integer times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbeddingVectors {
    /// One time per antenna (averaged over subcarriers).
    pub tau_c: Vec<u32>,
    /// One time per subcarrier (averaged over antennas).
    pub tau_a: Vec<u32>,
}

impl TimeEmbeddingVectors {
    fn axis(&self, axis: Axis) -> &[u32] {
        match axis {
            Axis::Antenna => &self.tau_c,
            Axis::Subcarrier => &self.tau_a,
        }
    }
}

/// Row and column averages of `tau`, rounded half away from zero.
pub fn reduce_time(tau: &TimeMatrix, averaging: TimeAveraging, schedule: &Schedule) -> Result<TimeEmbeddingVectors> {
    tau.validate(schedule)?;
    let (rows, cols) = (tau.rows(), tau.cols());
    let values: Vec<f64> = match averaging {
        TimeAveraging::TauAvg => tau.values().to_vec(),
        TimeAveraging::AlphaAvg => tau.values().iter().map(|&t| schedule.gamma(t)).collect::<Result<_>>()?,
    };
    let finish = |mean: f64| -> Result<u32> {
        let t = match averaging {
            TimeAveraging::TauAvg => mean,
            TimeAveraging::AlphaAvg => schedule.gamma_inverse(mean)?,
        };
        Ok(t.round().clamp(0.0, schedule.max_time_f64()) as u32)
    };
    let tau_c = (0..rows)
        .map(|i| finish(values[i * cols..(i + 1) * cols].iter().sum::<f64>() / cols as f64))
        .collect::<Result<_>>()?;
    let tau_a = (0..cols)
        .map(|j| finish((0..rows).map(|i| values[i * cols + j]).sum::<f64>() / rows as f64))
        .collect::<Result<_>>()?;
    Ok(TimeEmbeddingVectors { tau_c, tau_a })
}

/// `[cos(w_k t)..., sin(w_k t)...]` with `dim / 2` periods spaced
/// geometrically from 1 to `4 max_time`.
pub fn sinusoidal_features(t: u32, dim: usize, max_time: u32) -> Vec<f64> {
    let half = dim / 2;
    let top = 4.0 * f64::from(max_time);
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let period = if half > 1 { top.powf(k as f64 / (half - 1) as f64) } else { top };
        let w = std::f64::consts::TAU / period;
        let x = w * f64::from(t);
        out[k] = x.cos();
        out[half + k] = x.sin();
    }
    out
}

/// Parameter offsets of one sublayer.
#[derive(Debug, Clone)]
struct SublayerLayout {
    width: usize,
    hidden: usize,
    ln_gain: usize,
    ln_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl SublayerLayout {
    fn new(width: usize, hidden: usize, offset: &mut usize) -> Self {
        let mut take = |n: usize| {
            let at = *offset;
            *offset += n;
            at
        };
        Self {
            width,
            hidden,
            ln_gain: take(width),
            ln_bias: take(width),
            w1: take(hidden * width),
            b1: take(hidden),
            w2: take(width * hidden),
            b2: take(width),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    antenna: SublayerLayout,
    subcarrier: SublayerLayout,
    /// Offset of the `2 x E` projection for `[site][axis]`.
    proj: [[usize; 2]; SITES],
}

/// Canonical parameter order:
/// 1. embedding tables, for site 0..4 and axis (antenna, subcarrier): `A` (`E x E`, row-major) then `b` (`E`);
/// 2. for each block: antenna sublayer (norm gain, norm bias, `W1`, `b1`, `W2`, `b2`), the same for the
///    subcarrier sublayer, then the `2 x E` projections for site 0..4 and axis (antenna, subcarrier);
/// 3. head: `2 x 2` matrix then a bias of 2.
#[derive(Debug, Clone)]
struct Layout {
    tables: [[usize; 2]; SITES],
    blocks: Vec<BlockLayout>,
    head: usize,
    total: usize,
}

impl Layout {
    fn new(config: &MixerConfig) -> Self {
        let e = config.embed_dim;
        let mut offset = 0;
        let mut tables = [[0; 2]; SITES];
        for site in tables.iter_mut() {
            for slot in site.iter_mut() {
                *slot = offset;
                offset += e * e + e;
            }
        }
        let wa = FEATURES * config.n_antennas;
        let wc = FEATURES * config.n_subcarriers;
        let blocks = (0..config.n_blocks)
            .map(|_| {
                let antenna = SublayerLayout::new(wa, wa * config.hidden_mult, &mut offset);
                let subcarrier = SublayerLayout::new(wc, wc * config.hidden_mult, &mut offset);
                let mut proj = [[0; 2]; SITES];
                for site in proj.iter_mut() {
                    for slot in site.iter_mut() {
                        *slot = offset;
                        offset += FEATURES * e;
                    }
                }
                BlockLayout { antenna, subcarrier, proj }
            })
            .collect();
        let head = offset;
        offset += FEATURES * FEATURES + FEATURES;
        Self { tables, blocks, head, total: offset }
    }
}

/// Number of parameters of a model with this configuration.
pub fn parameter_count(config: &MixerConfig) -> usize {
    Layout::new(config).total
}

/// Named parameter group, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Table { site: usize, axis: Axis },
    Projection { block: usize, site: usize, axis: Axis },
}

#[derive(Debug, Clone)]
pub struct MixerModel {
    config: MixerConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl MixerModel {
    /// Random initialization: weights `N(0, 1/fan_in)`, biases zero, norm gains one.
    pub fn new<R: Rng + ?Sized>(config: MixerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut fill = |params: &mut [f64], start: usize, n: usize, fan_in: usize| {
            let scale = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[start..start + n] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let e = config.embed_dim;
        for site in &layout.tables {
            for &at in site {
                fill(&mut params, at, e * e, e);
            }
        }
        for block in &layout.blocks {
            for sub in [&block.antenna, &block.subcarrier] {
                params[sub.ln_gain..sub.ln_gain + sub.width].fill(1.0);
                fill(&mut params, sub.w1, sub.hidden * sub.width, sub.width);
                fill(&mut params, sub.w2, sub.width * sub.hidden, sub.hidden);
            }
            for site in &block.proj {
                for &at in site {
                    fill(&mut params, at, FEATURES * e, e);
                }
            }
        }
        fill(&mut params, layout.head, FEATURES * FEATURES, FEATURES);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: MixerConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        check_len("parameter vector", layout.total, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Index range of a parameter group.
    pub fn group_range(&self, group: ParamGroup) -> std::ops::Range<usize> {
        let e = self.config.embed_dim;
        match group {
            ParamGroup::Table { site, axis } => {
                let at = self.layout.tables[site][axis as usize];
                at..at + e * e + e
            }
            ParamGroup::Projection { block, site, axis } => {
                let at = self.layout.blocks[block].proj[site][axis as usize];
                at..at + FEATURES * e
            }
        }
    }

    /// Embedding of time `t` at `site` for `axis`: sinusoidal features
    /// through the site's affine map and the activation.
    pub fn embed_time(&self, t: u32, site: usize, axis: Axis) -> Result<Vec<f64>> {
        if t > self.config.max_time {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.config.max_time)));
        }
        if site >= SITES {
            return Err(Error::Domain(format!("site {site} outside 0..{SITES}")));
        }
        let (_, out) = mixer::embed_one(self, t, site, axis);
        Ok(out)
    }

    pub fn reduce(&self, tau: &TimeMatrix, schedule: &Schedule) -> Result<TimeEmbeddingVectors> {
        self.check_tau(tau)?;
        reduce_time(tau, self.config.averaging, schedule)
    }

    fn check_tau(&self, tau: &TimeMatrix) -> Result<()> {
        if tau.rows() != self.config.n_antennas || tau.cols() != self.config.n_subcarriers {
            return Err(Error::Shape {
                expected: format!("{}x{} time matrix", self.config.n_antennas, self.config.n_subcarriers),
                found: format!("{}x{}", tau.rows(), tau.cols()),
            });
        }
        Ok(())
    }

    fn check_times(&self, times: &TimeEmbeddingVectors) -> Result<()> {
        check_len("tau_c", self.config.n_antennas, times.tau_c.len())?;
        check_len("tau_a", self.config.n_subcarriers, times.tau_a.len())?;
        if let Some(t) = times.tau_c.iter().chain(&times.tau_a).find(|&&t| t > self.config.max_time) {
            return Err(Error::Domain(format!("embedding time {t} exceeds {}", self.config.max_time)));
        }
        Ok(())
    }

    /// Network output for one sample and time matrix.
    pub fn forward(&self, x: &[f64], tau: &TimeMatrix, schedule: &Schedule) -> Result<Vec<f64>> {
        let times = self.reduce(tau, schedule)?;
        Ok(self.forward_batch(&[x], &[&times])?.remove(0))
    }

    /// Network outputs for a batch of samples with already reduced times.
    pub fn forward_batch(&self, xs: &[&[f64]], times: &[&TimeEmbeddingVectors]) -> Result<Vec<Vec<f64>>> {
        self.check_batch(xs, times)?;
        Ok(mixer::forward_batch(self, xs, times))
    }

    /// Gradient of `sum_i <upstream_i, f(x_i)>` with respect to every parameter.
    pub fn backward(
        &self,
        xs: &[&[f64]],
        times: &[&TimeEmbeddingVectors],
        upstream: &[&[f64]],
    ) -> Result<Vec<f64>> {
        self.check_batch(xs, times)?;
        check_len("upstream batch", xs.len(), upstream.len())?;
        for u in upstream {
            check_len("upstream gradient", self.config.sample_len(), u.len())?;
        }
        Ok(mixer::gradient(self, xs, times, |i, _| upstream[i].to_vec()).1)
    }

    /// Mean over the batch of the per-sample mean squared error to `targets`,
    /// and its gradient.
    pub fn loss_and_gradient(
        &self,
        xs: &[&[f64]],
        times: &[&TimeEmbeddingVectors],
        targets: &[&[f64]],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(xs, times)?;
        check_len("target batch", xs.len(), targets.len())?;
        for t in targets {
            check_len("target", self.config.sample_len(), t.len())?;
        }
        let scale = 2.0 / (self.config.sample_len() * xs.len()) as f64;
        let (outs, grad) = mixer::gradient(self, xs, times, |i, out| {
            out.iter().zip(targets[i]).map(|(o, t)| scale * (o - t)).collect()
        });
        let total: f64 = outs
            .iter()
            .zip(targets)
            .map(|(out, t)| out.iter().zip(t.iter()).map(|(o, v)| (o - v) * (o - v)).sum::<f64>())
            .sum();
        Ok((total / (self.config.sample_len() * xs.len()) as f64, grad))
    }

    fn check_batch(&self, xs: &[&[f64]], times: &[&TimeEmbeddingVectors]) -> Result<()> {
        check_len("time batch", xs.len(), times.len())?;
        if xs.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        for (x, t) in xs.iter().zip(times) {
            check_len("model input", self.config.sample_len(), x.len())?;
            self.check_times(t)?;
        }
        Ok(())
    }
}

/// A trained model used as a velocity-predicting denoiser.
#[derive(Debug, Clone)]
pub struct VelocityDenoiser {
    pub model: MixerModel,
    pub normalization: NormalizationMode,
    pub schedule: Schedule,
}

impl Denoiser for VelocityDenoiser {
    fn denoise(&self, g: &[f64], tau: &TimeMatrix, maps: &NoiseMaps) -> Result<Vec<f64>> {
        let input = normalize_input(g, &maps.beta, self.normalization)?;
        let times = self.model.reduce(tau, &self.schedule)?;
        let v = self.model.forward_batch(&[&input], &[&times])?.remove(0);
        recover_x0(g, &v, &maps.alpha, &maps.beta)
    }
}
