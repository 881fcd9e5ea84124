//! Velocity-target training with a seeded, reproducible data stream.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{reduce_time, save_checkpoint, MixerConfig, MixerModel, TimeEmbeddingVectors};
use crate::diffusion::{forward_noise, normalize_input, velocity_target, NoiseMaps, NormalizationMode};
use crate::error::{check_len, Error, Result};
use crate::rng::{seeded, stream};
use crate::schedule::{sample_tau, NoisePatternSpec, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Distribution of training time matrices.
    pub pattern: NoisePatternSpec,
    pub normalization: NormalizationMode,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Stop once the best loss improved by less than 0.1% over 5 epochs.
    pub plateau_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 20,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pattern: NoisePatternSpec::all(),
            normalization: NormalizationMode::IdenticalTotalPower,
            seed: 0,
            checkpoint_every: 0,
            plateau_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::Config("optimizer coefficients out of range".into()));
        }
        self.pattern.validate()
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, n_params: usize) -> Self {
        Self {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("gradient", params.len(), grad.len())?;
        if self.learning_rate == 0.0 {
            return Ok(());
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Noised inputs, reduced times and velocity targets for one batch.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub inputs: Vec<Vec<f64>>,
    pub times: Vec<TimeEmbeddingVectors>,
    pub targets: Vec<Vec<f64>>,
}

/// Draws `tau` and `xi` for every sample, sample `i` from stream
/// `first_index + i` of `seed`.
pub fn prepare_batch(
    h0s: &[&[f64]],
    model: &MixerConfig,
    config: &TrainConfig,
    schedule: &Schedule,
    seed: u64,
    first_index: u64,
) -> Result<PreparedBatch> {
    let parts: Vec<(Vec<f64>, TimeEmbeddingVectors, Vec<f64>)> = h0s
        .par_iter()
        .enumerate()
        .map(|(i, h0)| {
            check_len("training sample", model.sample_len(), h0.len())?;
            let mut rng = stream(seed, first_index + i as u64);
            let tau = sample_tau(&config.pattern, model.n_antennas, model.n_subcarriers, schedule.max_time(), &mut rng)?;
            let maps = NoiseMaps::new(schedule, &tau, 2)?;
            let (ht, xi) = forward_noise(h0, &maps, &mut rng)?;
            let input = normalize_input(&ht, &maps.beta, config.normalization)?;
            let target = velocity_target(h0, &xi, &maps.alpha, &maps.beta)?;
            let times = reduce_time(&tau, model.averaging, schedule)?;
            Ok((input, times, target))
        })
        .collect::<Result<_>>()?;
    let mut batch = PreparedBatch { inputs: vec![], times: vec![], targets: vec![] };
    for (x, t, y) in parts {
        batch.inputs.push(x);
        batch.times.push(t);
        batch.targets.push(y);
    }
    Ok(batch)
}

/// Mean per-element squared error of the model on a prepared batch.
pub fn batch_loss(model: &MixerModel, batch: &PreparedBatch) -> Result<f64> {
    let xs: Vec<&[f64]> = batch.inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&TimeEmbeddingVectors> = batch.times.iter().collect();
    let outs = model.forward_batch(&xs, &ts)?;
    let total: f64 = outs
        .iter()
        .zip(&batch.targets)
        .map(|(o, y)| o.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / (outs.len() * model.config().sample_len()) as f64)
}

/// One optimizer update on a prepared batch. Returns the loss before the
/// update: `sum_i ||f(x_i) - y_i||^2 / (B d)`.
pub fn step_prepared(model: &mut MixerModel, optimizer: &mut Optimizer, batch: &PreparedBatch) -> Result<f64> {
    let xs: Vec<&[f64]> = batch.inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&TimeEmbeddingVectors> = batch.times.iter().collect();
    let ys: Vec<&[f64]> = batch.targets.iter().map(Vec::as_slice).collect();
    let (loss, grad) = model.loss_and_gradient(&xs, &ts, &ys)?;
    if !loss.is_finite() {
        let bad = grad.iter().filter(|g| !g.is_finite()).count();
        return Err(Error::NonFinite(format!(
            "training loss {loss} on a batch of {} ({bad} non-finite gradient entries)",
            xs.len()
        )));
    }
    optimizer.apply(model.params_mut(), &grad)?;
    Ok(loss)
}

/// Draws a batch seed from `rng`, noises `h0s` and takes one step.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut MixerModel,
    optimizer: &mut Optimizer,
    h0s: &[&[f64]],
    config: &TrainConfig,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<f64> {
    let seed: u64 = rng.random();
    let batch = prepare_batch(h0s, model.config(), config, schedule, seed, 0)?;
    step_prepared(model, optimizer, &batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.mean_loss).collect()
    }
}

/// True once the best loss of the last `window` epochs improved on the best
/// before them by less than `tol` relative.
pub fn plateaued(losses: &[f64], window: usize, tol: f64) -> bool {
    if losses.len() <= window {
        return false;
    }
    let split = losses.len() - window;
    let before = losses[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = losses[split..].iter().copied().fold(f64::INFINITY, f64::min);
    (before - recent) / before.abs() < tol
}

/// Epoch loop over a shuffled dataset. Checkpoints go to `checkpoint_dir`
/// when a cadence is configured.
pub fn train(
    model: &mut MixerModel,
    data: &[Vec<f64>],
    config: &TrainConfig,
    schedule: &Schedule,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut optimizer = Optimizer::new(config, model.n_params());
    let mut order_rng = seeded(config.seed);
    let noise_seed = config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { history: vec![], steps: 0, stopped_early: false, checkpoints: vec![] };
    let mut drawn: u64 = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let h0s: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let batch = prepare_batch(&h0s, model.config(), config, schedule, noise_seed, drawn)?;
            drawn += chunk.len() as u64;
            weighted += step_prepared(model, &mut optimizer, &batch)? * chunk.len() as f64;
            report.steps += 1;
        }
        let mean_loss = weighted / data.len() as f64;
        report.history.push(EpochRecord { epoch, mean_loss, wall_s: start.elapsed().as_secs_f64() });
        log::info!("epoch {epoch}: loss {mean_loss:.6}");
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_epoch{epoch:04}.nidm"));
                save_checkpoint(model, &path)?;
                report.checkpoints.push(path);
            }
        }
        if config.plateau_stop && plateaued(&report.losses(), 5, 1e-3) {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// `epoch,mean_loss` rows (timing excluded so the file is reproducible).
pub fn write_loss_csv<W: Write>(history: &[EpochRecord], w: &mut W) -> Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for r in history {
        writeln!(w, "{},{:.12e}", r.epoch, r.mean_loss)?;
    }
    Ok(())
}

/// `epoch,wall_s` rows.
pub fn write_timing_csv<W: Write>(history: &[EpochRecord], w: &mut W) -> Result<()> {
    writeln!(w, "epoch,wall_s")?;
    for r in history {
        writeln!(w, "{},{:.3}", r.epoch, r.wall_s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, EmbeddingScheme, TimeAveraging};
    use crate::channel::{ChannelDataset, ChannelParams};
    use crate::schedule::TimeMatrix;

    fn tiny() -> MixerConfig {
        MixerConfig {
            n_antennas: 2,
            n_subcarriers: 4,
            n_blocks: 1,
            hidden_mult: 2,
            embed_dim: 8,
            embedding_scheme: EmbeddingScheme::ColumnWise,
            averaging: TimeAveraging::TauAvg,
            activation: Activation::Gelu,
            max_time: 1000,
        }
    }

    fn data(n: usize, seed: u64) -> Vec<Vec<f64>> {
        ChannelDataset::synthesize(&ChannelParams::default(), n, 2, 4, seed).unwrap().samples
    }

    #[test]
    fn zero_model_at_zero_time_scores_the_noise() {
        let s = Schedule::default();
        let mut model = MixerModel::new(tiny(), &mut seeded(0)).unwrap();
        model.params_mut().fill(0.0);
        let h0 = data(3, 1);
        let mut rng = seeded(2);
        let (mut targets, mut total) = (vec![], 0.0);
        for h in &h0 {
            let maps = NoiseMaps::new(&s, &TimeMatrix::zeros(2, 4), 2).unwrap();
            let (_, xi) = forward_noise(h, &maps, &mut rng).unwrap();
            total += xi.iter().map(|v| v * v).sum::<f64>();
            targets.push(velocity_target(h, &xi, &maps.alpha, &maps.beta).unwrap());
        }
        let times = TimeEmbeddingVectors { tau_c: vec![0; 2], tau_a: vec![0; 4] };
        let batch = PreparedBatch { inputs: h0.clone(), times: vec![times; 3], targets };
        let loss = batch_loss(&model, &batch).unwrap();
        assert!((loss - total / 48.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let s = Schedule::default();
        let model = MixerModel::new(tiny(), &mut seeded(3)).unwrap();
        let h0 = data(10, 4);
        let refs: Vec<&[f64]> = h0.iter().map(Vec::as_slice).collect();
        let batch = prepare_batch(&refs, model.config(), &TrainConfig::default(), &s, 5, 0).unwrap();
        let mut rev = batch.clone();
        rev.inputs.reverse();
        rev.times.reverse();
        rev.targets.reverse();
        let a = batch_loss(&model, &batch).unwrap();
        let b = batch_loss(&model, &rev).unwrap();
        assert!((a - b).abs() < 1e-14 * a);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let s = Schedule::default();
        let mut model = MixerModel::new(tiny(), &mut seeded(6)).unwrap();
        let before = model.params().to_vec();
        let config = TrainConfig { learning_rate: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(&config, model.n_params());
        let h0 = data(4, 7);
        let refs: Vec<&[f64]> = h0.iter().map(Vec::as_slice).collect();
        train_step(&mut model, &mut opt, &refs, &config, &s, &mut seeded(8)).unwrap();
        assert_eq!(model.params(), before.as_slice());
    }

    #[test]
    fn one_step_moves_every_active_layer() {
        let s = Schedule::default();
        let mut model = MixerModel::new(tiny(), &mut seeded(9)).unwrap();
        let before = model.params().to_vec();
        let config = TrainConfig { pattern: NoisePatternSpec::Independent, ..Default::default() };
        let mut opt = Optimizer::new(&config, model.n_params());
        let h0 = data(8, 10);
        let refs: Vec<&[f64]> = h0.iter().map(Vec::as_slice).collect();
        train_step(&mut model, &mut opt, &refs, &config, &s, &mut seeded(11)).unwrap();
        let changed = |r: std::ops::Range<usize>| r.into_iter().any(|i| model.params()[i] != before[i]);
        use crate::backbone::{Axis, ParamGroup};
        for site in 0..4 {
            for axis in Axis::BOTH {
                let active = model.config().embedding_scheme.is_active(site, axis);
                assert_eq!(changed(model.group_range(ParamGroup::Table { site, axis })), active);
                assert_eq!(changed(model.group_range(ParamGroup::Projection { block: 0, site, axis })), active);
            }
        }
        let n = model.n_params();
        assert!(changed(n - 6..n));
    }

    #[test]
    fn single_sample_overfits() {
        let s = Schedule::default();
        let mut model = MixerModel::new(tiny(), &mut seeded(12)).unwrap();
        let config = TrainConfig { learning_rate: 3e-3, pattern: NoisePatternSpec::Independent, ..Default::default() };
        let mut opt = Optimizer::new(&config, model.n_params());
        let h0 = data(1, 13);
        let batch = prepare_batch(&[&h0[0]], model.config(), &config, &s, 14, 0).unwrap();
        let first = batch_loss(&model, &batch).unwrap();
        for _ in 0..500 {
            step_prepared(&mut model, &mut opt, &batch).unwrap();
        }
        let last = batch_loss(&model, &batch).unwrap();
        assert!(last < 0.01 * first, "{first} -> {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let s = Schedule::default();
        let h0 = data(40, 15);
        let config = TrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
        let run = || {
            let mut model = MixerModel::new(tiny(), &mut seeded(16)).unwrap();
            let report = train(&mut model, &h0, &config, &s, None).unwrap();
            (report.losses(), model.params().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn checkpoints_follow_cadence() {
        let s = Schedule::default();
        let dir = tempfile::tempdir().unwrap();
        let h0 = data(8, 17);
        let config = TrainConfig { epochs: 4, batch_size: 4, checkpoint_every: 2, ..Default::default() };
        let mut model = MixerModel::new(tiny(), &mut seeded(18)).unwrap();
        let report = train(&mut model, &h0, &config, &s, Some(dir.path())).unwrap();
        assert_eq!(report.checkpoints.len(), 2);
        assert!(report.checkpoints.iter().all(|p| p.exists()));
        let mut csv = Vec::new();
        write_loss_csv(&report.history, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }

    #[test]
    fn plateau_detector() {
        assert!(!plateaued(&[1.0, 0.9, 0.8], 5, 1e-3));
        assert!(plateaued(&[1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 5, 1e-3));
        assert!(!plateaued(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4], 5, 1e-3));
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
