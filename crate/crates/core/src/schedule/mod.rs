//! Scalar noise schedule, element-wise time matrices, training-time pattern
//! sampling and generation-time stepping rules.
//!
//! The schedule maps a (possibly fractional) time index `tau` in `[0, T]` to a
//! signal fraction `gamma(tau)` in `(0, 1]`:
//!
//! ```text
//! gamma(k) = prod_{i=1..k} sqrt(1 - 0.2 i / T)
//! ```
//!
//! for integer `k`, with `log gamma` interpolated linearly between integers.

mod pattern;
mod stepping;

pub use pattern::{sample_tau, NoisePatternSpec, PeriodRange};
pub use stepping::{
    step_alpha_domain, step_hybrid, step_uniform, step_waterfilling, waterfill, Stepping,
    SteppingDomain, TimeStepper,
};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Default maximum time index.
pub const DEFAULT_MAX_TIME: u32 = 1000;

/// Entries of `beta` below this are treated as exactly clean.
pub const CLEAN_BETA: f64 = 1e-6;

/// The `gamma` schedule with its tabulated logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    max_time: u32,
    /// `log gamma(k)` for `k = 0..=T`; strictly decreasing, `log_table[0] = 0`.
    log_table: Vec<f64>,
}

impl Schedule {
    pub fn new(max_time: u32) -> Result<Self> {
        if max_time == 0 {
            return Err(Error::Config("schedule max_time must be positive".into()));
        }
        let t = f64::from(max_time);
        let mut log_table = Vec::with_capacity(max_time as usize + 1);
        let mut acc = 0.0f64;
        log_table.push(acc);
        for i in 1..=max_time {
            acc += 0.5 * (-0.2 * f64::from(i) / t).ln_1p();
            log_table.push(acc);
        }
        Ok(Self { max_time, log_table })
    }

    pub fn max_time(&self) -> u32 {
        self.max_time
    }

    pub fn max_time_f64(&self) -> f64 {
        f64::from(self.max_time)
    }

    /// `gamma(k)` at integer indices.
    pub fn table(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_table.iter().map(|l| l.exp())
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        if !tau.is_finite() || tau < 0.0 || tau > self.max_time_f64() {
            return Err(Error::Domain(format!(
                "time {tau} outside [0, {}]",
                self.max_time
            )));
        }
        Ok(())
    }

    /// `log gamma(tau)`, interpolated linearly between integer indices.
    pub fn log_gamma(&self, tau: f64) -> Result<f64> {
        self.check_tau(tau)?;
        Ok(self.log_gamma_unchecked(tau))
    }

    fn log_gamma_unchecked(&self, tau: f64) -> f64 {
        let lo = tau.floor();
        let i = lo as usize;
        if i >= self.max_time as usize {
            return self.log_table[self.max_time as usize];
        }
        let frac = tau - lo;
        let (a, b) = (self.log_table[i], self.log_table[i + 1]);
        if frac == 0.0 {
            a
        } else {
            a + frac * (b - a)
        }
    }

    pub fn gamma(&self, tau: f64) -> Result<f64> {
        Ok(self.log_gamma(tau)?.exp())
    }

    /// `beta(tau) = sqrt(1 - gamma(tau)^2)`, evaluated without cancellation near `tau = 0`.
    pub fn beta(&self, tau: f64) -> Result<f64> {
        Ok(beta_from_log_alpha(self.log_gamma(tau)?))
    }

    /// Inverse of [`Schedule::gamma`] on the interpolated table.
    ///
    /// Values at or below `gamma(T)`, including zero, clamp to `T`.
    pub fn gamma_inverse(&self, a: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain(format!("gamma inverse of {a} outside [0, 1]")));
        }
        if a == 1.0 {
            return Ok(0.0);
        }
        let target = a.ln();
        let last = self.max_time as usize;
        if target <= self.log_table[last] {
            return Ok(self.max_time_f64());
        }
        // Bisection over table indices: log_table[lo] >= target > log_table[hi].
        let (mut lo, mut hi) = (0usize, last);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.log_table[mid] >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (a_lo, a_hi) = (self.log_table[lo], self.log_table[hi]);
        let frac = ((a_lo - target) / (a_lo - a_hi)).clamp(0.0, 1.0);
        Ok(lo as f64 + frac)
    }

    /// Signal and noise fractions for every entry of `tau`.
    pub fn alpha_beta(&self, tau: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut alpha = Vec::with_capacity(tau.len());
        let mut beta = Vec::with_capacity(tau.len());
        for &t in tau {
            let l = self.log_gamma(t)?;
            alpha.push(l.exp());
            beta.push(beta_from_log_alpha(l));
        }
        Ok((alpha, beta))
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_TIME).expect("default schedule")
    }
}

/// `sqrt(1 - exp(2 l))` computed via `expm1`.
pub fn beta_from_log_alpha(log_alpha: f64) -> f64 {
    (-(2.0 * log_alpha).exp_m1()).max(0.0).sqrt()
}

/// `sqrt(1 - a^2)` for `a` in `[0, 1]`.
pub fn beta_from_alpha(a: f64) -> f64 {
    ((1.0 - a) * (1.0 + a)).max(0.0).sqrt()
}

/// Per-element diffusion time over an `rows x cols` grid.
///
/// Entries are real valued; fractional values arise from stepping and are only
/// rounded where an integer time is needed (time embedding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TimeMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_len("time matrix", rows * cols, values.len())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("time entry {v} is not a finite nonnegative value")));
        }
        Ok(Self { rows, cols, values })
    }

    /// Checks that every entry lies within `[0, T]` for `schedule`.
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        let t = schedule.max_time_f64();
        if let Some(v) = self.values.iter().find(|v| **v > t) {
            return Err(Error::Domain(format!("time entry {v} exceeds T = {t}")));
        }
        Ok(())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, values: vec![value; rows * cols] }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// A single-row matrix, convenient for plain vectors.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.sum() / self.values.len() as f64
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn same_shape(&self, other: &TimeMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                expected: format!("{}x{}", self.rows, self.cols),
                found: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }

    /// Repeats each entry `planes` times, matching an interleaved real layout.
    pub fn expand(&self, planes: usize) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, planes))
            .collect()
    }
}
