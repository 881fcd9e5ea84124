use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TimeMatrix;
use crate::error::{Error, Result};

/// Inclusive range of admissible periods for the periodical pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodRange {
    pub min: usize,
    pub max: usize,
}

impl PeriodRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    /// Draws a period, capping the range at `dim`.
    fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> usize {
        let hi = self.max.min(dim);
        let lo = self.min.min(hi);
        rng.random_range(lo..=hi)
    }
}

/// How a training time matrix is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoisePatternSpec {
    /// One time for the whole matrix.
    Same,
    /// Independent time per entry.
    Independent,
    /// A small random tile repeated over the matrix.
    Periodical {
        antenna_period: PeriodRange,
        subcarrier_period: PeriodRange,
    },
    /// One time per subcarrier column, shared by all antennas.
    CarOnly,
    /// Picks one of the component patterns by weight.
    Mixed { components: Vec<(NoisePatternSpec, f64)> },
}

impl NoisePatternSpec {
    /// Periodical pattern with antenna periods in `[4, 10]` and subcarrier periods in `[4, 20]`.
    pub fn periodical() -> Self {
        NoisePatternSpec::Periodical {
            antenna_period: PeriodRange::new(4, 10),
            subcarrier_period: PeriodRange::new(4, 20),
        }
    }

    /// Uniform mixture of the four simple patterns.
    pub fn all() -> Self {
        Self::uniform_mix(vec![
            NoisePatternSpec::Same,
            NoisePatternSpec::Independent,
            Self::periodical(),
            NoisePatternSpec::CarOnly,
        ])
    }

    /// Uniform mixture of same, independent and periodical.
    pub fn non_directional() -> Self {
        Self::uniform_mix(vec![
            NoisePatternSpec::Same,
            NoisePatternSpec::Independent,
            Self::periodical(),
        ])
    }

    pub fn uniform_mix(kinds: Vec<NoisePatternSpec>) -> Self {
        let w = 1.0 / kinds.len() as f64;
        NoisePatternSpec::Mixed { components: kinds.into_iter().map(|k| (k, w)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoisePatternSpec::Periodical { antenna_period, subcarrier_period } => {
                for p in [antenna_period, subcarrier_period] {
                    if p.min == 0 || p.min > p.max {
                        return Err(Error::Config(format!("invalid period range {p:?}")));
                    }
                }
                Ok(())
            }
            NoisePatternSpec::Mixed { components } => {
                if components.is_empty() {
                    return Err(Error::Config("mixed pattern without components".into()));
                }
                let mut total = 0.0;
                for (kind, w) in components {
                    if !(w.is_finite() && *w >= 0.0) {
                        return Err(Error::Config(format!("mixed weight {w} is negative")));
                    }
                    total += w;
                    kind.validate()?;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("mixed weights sum to {total}, not 1")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Draws a time matrix of shape `rows x cols` with entries in `{0, ..., T-1}`.
pub fn sample_tau<R: Rng + ?Sized>(
    spec: &NoisePatternSpec,
    rows: usize,
    cols: usize,
    max_time: u32,
    rng: &mut R,
) -> Result<TimeMatrix> {
    if rows == 0 || cols == 0 || max_time == 0 {
        return Err(Error::Domain(format!("cannot sample a {rows}x{cols} time matrix with T={max_time}")));
    }
    spec.validate()?;
    Ok(draw(spec, rows, cols, max_time, rng))
}

fn draw<R: Rng + ?Sized>(
    spec: &NoisePatternSpec,
    rows: usize,
    cols: usize,
    max_time: u32,
    rng: &mut R,
) -> TimeMatrix {
    let mut uniform = || f64::from(rng.random_range(0..max_time));
    let values = match spec {
        NoisePatternSpec::Same => vec![uniform(); rows * cols],
        NoisePatternSpec::Independent => (0..rows * cols).map(|_| uniform()).collect(),
        NoisePatternSpec::CarOnly => {
            let per_col: Vec<f64> = (0..cols).map(|_| uniform()).collect();
            (0..rows).flat_map(|_| per_col.iter().copied()).collect()
        }
        NoisePatternSpec::Periodical { antenna_period, subcarrier_period } => {
            let pa = antenna_period.sample(rows, rng);
            let pc = subcarrier_period.sample(cols, rng);
            let tile: Vec<f64> =
                (0..pa * pc).map(|_| f64::from(rng.random_range(0..max_time))).collect();
            let mut values = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    values.push(tile[(i % pa) * pc + j % pc]);
                }
            }
            values
        }
        NoisePatternSpec::Mixed { components } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = &components[components.len() - 1].0;
            for (kind, w) in components {
                acc += w;
                if u < acc {
                    chosen = kind;
                    break;
                }
            }
            return draw(chosen, rows, cols, max_time, rng);
        }
    };
    TimeMatrix { rows, cols, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = sample_tau(&NoisePatternSpec::Same, 4, 6, 1000, &mut rng).unwrap();
            let v0 = m.values()[0];
            assert!(m.values().iter().all(|&v| v == v0));
            assert!(v0 < 1000.0 && v0.fract() == 0.0);
        }
    }

    #[test]
    fn car_only_rows_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = sample_tau(&NoisePatternSpec::CarOnly, 2, 3, 1000, &mut rng).unwrap();
        for j in 0..3 {
            assert_eq!(m.get(0, j), m.get(1, j));
        }
        // Columns are drawn independently; over many draws they differ.
        let mut differs = false;
        for _ in 0..20 {
            let m = sample_tau(&NoisePatternSpec::CarOnly, 2, 3, 1000, &mut rng).unwrap();
            differs |= m.get(0, 0) != m.get(0, 1);
        }
        assert!(differs);
    }

    #[test]
    fn periodical_tiles_exactly() {
        let spec = NoisePatternSpec::Periodical {
            antenna_period: PeriodRange::new(4, 4),
            subcarrier_period: PeriodRange::new(8, 8),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_tau(&spec, 8, 16, 1000, &mut rng).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(m.get(i, j), m.get(i % 4, j % 8));
            }
        }
    }

    #[test]
    fn periodical_caps_periods_at_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = sample_tau(&NoisePatternSpec::periodical(), 2, 3, 1000, &mut rng).unwrap();
            assert_eq!(m.len(), 6);
        }
    }

    #[test]
    fn mixed_weights_validated() {
        let bad = NoisePatternSpec::Mixed {
            components: vec![(NoisePatternSpec::Same, 0.7), (NoisePatternSpec::Independent, 0.7)],
        };
        assert!(bad.validate().is_err());
        let neg = NoisePatternSpec::Mixed {
            components: vec![(NoisePatternSpec::Same, 1.5), (NoisePatternSpec::Independent, -0.5)],
        };
        assert!(neg.validate().is_err());
        assert!(NoisePatternSpec::all().validate().is_ok());
    }

    #[test]
    fn mixed_selects_by_weight() {
        let spec = NoisePatternSpec::Mixed {
            components: vec![(NoisePatternSpec::Same, 1.0), (NoisePatternSpec::Independent, 0.0)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = sample_tau(&spec, 3, 3, 1000, &mut rng).unwrap();
            assert!(m.values().iter().all(|&v| v == m.values()[0]));
        }
    }

    #[test]
    fn pattern_json_round_trip() {
        let spec = NoisePatternSpec::all();
        let text = serde_json::to_string(&spec).unwrap();
        let back: NoisePatternSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
