//! Channel-recovery experiments shared by the `generate` and `eval` verbs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{identical_init, init_diffusion_state, make_reliability, nmse, observe, InitPatternSpec};
use crate::diffusion::{generate, Denoiser, GenerationConfig};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schedule::Schedule;

/// How the starting time matrix is built from an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Element-wise times from the reliability map.
    NonIdentical,
    /// One scalar time for the whole matrix.
    Identical,
}

/// Averages over the test channels of one recovery run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRun {
    /// Mean `tau` and mean NMSE after each step, starting with the initial state.
    pub tau_mean: Vec<f64>,
    pub nmse: Vec<f64>,
    /// Final NMSE of every channel.
    pub final_nmse: Vec<f64>,
}

impl RecoveryRun {
    pub fn mean_final(&self) -> f64 {
        self.final_nmse.iter().sum::<f64>() / self.final_nmse.len() as f64
    }
}

/// Observes each channel under `pattern`, initializes with `method` and runs
/// the generation loop. Channel `i` uses stream `i` of `seed` for the pattern,
/// the observation noise and the sampler.
#[allow(clippy::too_many_arguments)]
pub fn run_recovery<D: Denoiser + ?Sized>(
    denoiser: &D,
    channels: &[Vec<f64>],
    n_antennas: usize,
    n_subcarriers: usize,
    pattern: &InitPatternSpec,
    method: InitMethod,
    config: &GenerationConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<RecoveryRun> {
    if channels.is_empty() {
        return Err(Error::Config("no channels to recover".into()));
    }
    let config = GenerationConfig { record_trajectory: true, ..*config };
    let per: Vec<(Vec<f64>, Vec<f64>)> = channels
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut rng = stream(seed, i as u64);
            let rel = make_reliability(pattern, n_antennas, n_subcarriers, &mut rng)?;
            let h_bar = observe(h, &rel, &mut rng)?;
            let (h_init, tau0) = match method {
                InitMethod::NonIdentical => init_diffusion_state(&h_bar, &rel, schedule)?,
                InitMethod::Identical => identical_init(&h_bar, &rel, schedule)?,
            };
            let run = generate(denoiser, &h_init, &tau0, 2, &config, schedule, &mut rng)?;
            let mut taus = run.trajectory.iter().map(|s| s.tau_mean).collect::<Vec<_>>();
            let mut errs = run.trajectory.iter().map(|s| nmse(&s.state, h)).collect::<Result<Vec<_>>>()?;
            // A zero start skips the loop; hold the state so every run has NG + 1 rows.
            while taus.len() < config.steps + 1 {
                taus.push(0.0);
                errs.push(*errs.last().expect("initial snapshot"));
            }
            Ok((taus, errs))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let rows = config.steps + 1;
    let tau_mean = (0..rows).map(|k| per.iter().map(|(t, _)| t[k]).sum::<f64>() / n).collect();
    let nmse = (0..rows).map(|k| per.iter().map(|(_, e)| e[k]).sum::<f64>() / n).collect();
    let final_nmse = per.iter().map(|(_, e)| e[rows - 1]).collect();
    Ok(RecoveryRun { tau_mean, nmse, final_nmse })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelDataset, ChannelParams, InitPatternKind};
    use crate::diffusion::NoiseMaps;
    use crate::schedule::TimeMatrix;

    /// Returns the true channel regardless of input (single-channel runs only).
    struct Cheat(Vec<Vec<f64>>);

    impl Denoiser for Cheat {
        fn denoise(&self, _: &[f64], _: &TimeMatrix, _: &NoiseMaps) -> Result<Vec<f64>> {
            Ok(self.0[0].clone())
        }
    }

    #[test]
    fn oracle_denoiser_recovers_the_channel() {
        let s = Schedule::default();
        let ds = ChannelDataset::synthesize(&ChannelParams::default(), 1, 4, 8, 1).unwrap();
        let d = Cheat(ds.samples.clone());
        let config = GenerationConfig { steps: 20, eps_hybrid: 1.0, ..Default::default() };
        for method in [InitMethod::NonIdentical, InitMethod::Identical] {
            let spec = InitPatternSpec::new(InitPatternKind::PilotCar);
            let run = run_recovery(&d, &ds.samples, 4, 8, &spec, method, &config, &s, 2).unwrap();
            assert_eq!(run.nmse.len(), 21);
            assert!(run.mean_final() < 1e-8, "{method:?}: {}", run.mean_final());
            assert!(run.nmse[0] > 0.1);
        }
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
