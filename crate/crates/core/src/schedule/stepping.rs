//! Time-update rules used during generation.
//!
//! Each rule maps the current time matrix to the next one. Rules are expressed
//! either on `tau` directly or on the signal fraction `alpha = gamma(tau)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Schedule, TimeMatrix};
use crate::error::{Error, Result};

/// Relative slack accepted when a budget exceeds the available mass by rounding only.
const BUDGET_SLACK: f64 = 1e-9;

/// `clamp(tau - tau0 / steps, 0)`.
pub fn step_uniform(tau: &TimeMatrix, tau0: &TimeMatrix, steps: usize) -> Result<TimeMatrix> {
    tau.same_shape(tau0)?;
    if steps == 0 {
        return Err(Error::Domain("number of generation steps must be positive".into()));
    }
    let n = steps as f64;
    let values = tau
        .values()
        .iter()
        .zip(tau0.values())
        .map(|(&t, &t0)| (t - t0 / n).max(0.0))
        .collect();
    TimeMatrix::new(tau.rows(), tau.cols(), values)
}

/// Lowers the largest entries of `values` to a common level `L` so that exactly
/// `budget` mass is removed. Returns `min(values, L)` and `L`.
pub fn waterfill(values: &[f64], budget: f64) -> Result<(Vec<f64>, f64)> {
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(Error::Domain(format!("waterfilling budget {budget} is not a nonnegative number")));
    }
    let total: f64 = values.iter().sum();
    if budget > total * (1.0 + BUDGET_SLACK) + BUDGET_SLACK {
        return Err(Error::Budget { budget, total });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let max = sorted.first().copied().unwrap_or(0.0);
    if budget == 0.0 {
        return Ok((values.to_vec(), max));
    }
    let mut prefix = 0.0;
    let mut level = 0.0;
    for k in 0..sorted.len() {
        prefix += sorted[k];
        let candidate = (prefix - budget) / (k + 1) as f64;
        let next = sorted.get(k + 1).copied().unwrap_or(0.0);
        if candidate >= next {
            level = candidate.max(0.0);
            break;
        }
    }
    let out = values.iter().map(|&v| v.min(level)).collect();
    Ok((out, level))
}

/// Waterfilling on a time matrix: removes `budget` from the largest times first.
pub fn step_waterfilling(tau: &TimeMatrix, budget: f64) -> Result<TimeMatrix> {
    let (values, _) = waterfill(tau.values(), budget)?;
    TimeMatrix::new(tau.rows(), tau.cols(), values)
}

/// Blend of the uniform rule (weight `eps`) and waterfilling with budget
/// `|tau0|_1 / steps` (weight `1 - eps`).
///
/// The waterfilling budget is capped at the mass still present in `tau`; the
/// uniform share can leave more mass behind than a pure waterfilling path.
pub fn step_hybrid(tau: &TimeMatrix, tau0: &TimeMatrix, steps: usize, eps: f64) -> Result<TimeMatrix> {
    check_weight(eps)?;
    let uniform = step_uniform(tau, tau0, steps)?;
    if eps == 1.0 {
        return Ok(uniform);
    }
    let budget = (tau0.sum() / steps as f64).min(tau.sum());
    let filled = step_waterfilling(tau, budget)?;
    if eps == 0.0 {
        return Ok(filled);
    }
    let values = uniform
        .values()
        .iter()
        .zip(filled.values())
        .map(|(&u, &w)| eps * u + (1.0 - eps) * w)
        .collect();
    TimeMatrix::new(tau.rows(), tau.cols(), values)
}

/// The same family of rules applied to `alpha = gamma(tau)`.
///
/// The uniform rule moves each `alpha` linearly from `gamma(tau0)` to one over
/// `steps` steps; waterfilling levels `1 - alpha`. The blend happens on `alpha`
/// and the result is mapped back through the inverse schedule.
pub fn step_alpha_domain(
    tau: &TimeMatrix,
    tau0: &TimeMatrix,
    steps: usize,
    eps: f64,
    schedule: &Schedule,
) -> Result<TimeMatrix> {
    tau.same_shape(tau0)?;
    check_weight(eps)?;
    if steps == 0 {
        return Err(Error::Domain("number of generation steps must be positive".into()));
    }
    let n = steps as f64;
    let alpha: Vec<f64> = tau.values().iter().map(|&t| schedule.gamma(t)).collect::<Result<_>>()?;
    let alpha0: Vec<f64> = tau0.values().iter().map(|&t| schedule.gamma(t)).collect::<Result<_>>()?;

    let uniform: Vec<f64> =
        alpha.iter().zip(&alpha0).map(|(&a, &a0)| (a + (1.0 - a0) / n).min(1.0)).collect();
    let filled: Vec<f64> = if eps < 1.0 {
        let deficit: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let budget0: f64 = alpha0.iter().map(|a0| 1.0 - a0).sum::<f64>() / n;
        let budget = budget0.min(deficit.iter().sum());
        let (lowered, _) = waterfill(&deficit, budget)?;
        lowered.into_iter().map(|q| 1.0 - q).collect()
    } else {
        uniform.clone()
    };
    let values = uniform
        .iter()
        .zip(&filled)
        .zip(tau.values())
        .map(|((&u, &w), &t)| {
            let a = (eps * u + (1.0 - eps) * w).clamp(f64::MIN_POSITIVE, 1.0);
            Ok(schedule.gamma_inverse(a)?.min(t))
        })
        .collect::<Result<Vec<f64>>>()?;
    TimeMatrix::new(tau.rows(), tau.cols(), values)
}

fn check_weight(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Domain(format!("stepping weight {eps} outside [0, 1]")));
    }
    Ok(())
}

/// Whether a stepping rule acts on `tau` or on `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteppingDomain {
    Tau,
    Alpha,
}

/// A stepping rule: `uniform_weight = 1` is linear stepping, `0` is waterfilling,
/// anything between is the hybrid blend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Stepping {
    pub domain: SteppingDomain,
    pub uniform_weight: f64,
}

impl Stepping {
    pub const TAU_LINEAR: Stepping = Stepping { domain: SteppingDomain::Tau, uniform_weight: 1.0 };
    pub const TAU_WATERFILLING: Stepping =
        Stepping { domain: SteppingDomain::Tau, uniform_weight: 0.0 };
    pub const ALPHA_LINEAR: Stepping =
        Stepping { domain: SteppingDomain::Alpha, uniform_weight: 1.0 };
    pub const ALPHA_WATERFILLING: Stepping =
        Stepping { domain: SteppingDomain::Alpha, uniform_weight: 0.0 };

    pub fn hybrid(domain: SteppingDomain, uniform_weight: f64) -> Result<Self> {
        check_weight(uniform_weight)?;
        Ok(Self { domain, uniform_weight })
    }

    /// The ten rules of the stepping sweep: linear, hybrid 0.7/0.5/0.3 and
    /// waterfilling, on `tau` and then on `alpha`.
    pub fn sweep() -> Vec<Stepping> {
        [SteppingDomain::Tau, SteppingDomain::Alpha]
            .into_iter()
            .flat_map(|domain| {
                [1.0, 0.7, 0.5, 0.3, 0.0]
                    .into_iter()
                    .map(move |uniform_weight| Stepping { domain, uniform_weight })
            })
            .collect()
    }

    /// Next time matrix from `tau` under this rule.
    pub fn step(
        &self,
        tau: &TimeMatrix,
        tau0: &TimeMatrix,
        steps: usize,
        schedule: &Schedule,
    ) -> Result<TimeMatrix> {
        match self.domain {
            SteppingDomain::Tau => step_hybrid(tau, tau0, steps, self.uniform_weight),
            SteppingDomain::Alpha => step_alpha_domain(tau, tau0, steps, self.uniform_weight, schedule),
        }
    }
}

impl fmt::Display for Stepping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let domain = match self.domain {
            SteppingDomain::Tau => "tau",
            SteppingDomain::Alpha => "alpha",
        };
        if self.uniform_weight == 1.0 {
            write!(f, "{domain}-linear")
        } else if self.uniform_weight == 0.0 {
            write!(f, "{domain}-waterfilling")
        } else {
            write!(f, "{domain}-hybrid({})", self.uniform_weight)
        }
    }
}

impl FromStr for Stepping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown stepping rule '{s}'"));
        let (domain, rule) = s.split_once('-').ok_or_else(bad)?;
        let domain = match domain {
            "tau" => SteppingDomain::Tau,
            "alpha" => SteppingDomain::Alpha,
            _ => return Err(bad()),
        };
        let weight = match rule {
            "linear" | "uniform" => 1.0,
            "waterfilling" => 0.0,
            _ => {
                let inner = rule
                    .strip_prefix("hybrid(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?;
                inner.parse::<f64>().map_err(|_| bad())?
            }
        };
        Stepping::hybrid(domain, weight)
    }
}

impl TryFrom<String> for Stepping {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Stepping> for String {
    fn from(s: Stepping) -> String {
        s.to_string()
    }
}

/// Drives a stepping rule for a fixed number of steps from `tau0`.
///
/// The last step always lands on the zero matrix, so every rule terminates in
/// exactly `steps` updates.
#[derive(Debug, Clone)]
pub struct TimeStepper {
    tau0: TimeMatrix,
    steps: usize,
    rule: Stepping,
}

impl TimeStepper {
    pub fn new(tau0: TimeMatrix, steps: usize, rule: Stepping) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("number of generation steps must be positive".into()));
        }
        check_weight(rule.uniform_weight)?;
        Ok(Self { tau0, steps, rule })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau0(&self) -> &TimeMatrix {
        &self.tau0
    }

    /// Time after step `k` (1-based), given the time after step `k - 1`.
    pub fn next(&self, tau: &TimeMatrix, k: usize, schedule: &Schedule) -> Result<TimeMatrix> {
        if k >= self.steps {
            return Ok(TimeMatrix::zeros(tau.rows(), tau.cols()));
        }
        let next = self.rule.step(tau, &self.tau0, self.steps, schedule)?;
        let values = next.values().iter().zip(tau.values()).map(|(&n, &t)| n.min(t)).collect();
        TimeMatrix::new(tau.rows(), tau.cols(), values)
    }
}
