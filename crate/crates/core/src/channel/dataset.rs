//! Channel datasets and their binary file format.
//!
//! Layout (little-endian): magic `NIDF`, version `u32`, sample count, `N_a`
//! and `N_c` as `u32`, then for each sample the `N_a x N_c` real plane
//! followed by the imaginary plane, row-major, as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{synth_channel, ChannelParams};
use crate::error::{Error, Result};
use crate::rng::stream;

const MAGIC: &[u8; 4] = b"NIDF";
const VERSION: u32 = 1;
/// Relative norm deviation tolerated on import without a warning.
const NORM_WARN: f64 = 1e-5;

/// Scales `h` to norm `sqrt(len)`.
pub fn normalize(h: &[f64]) -> Result<Vec<f64>> {
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Domain(format!("cannot normalize a channel of norm {norm}")));
    }
    let scale = (h.len() as f64).sqrt() / norm;
    Ok(h.iter().map(|v| v * scale).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub samples: Vec<Vec<f64>>,
}

impl ChannelDataset {
    /// `n_samples` synthetic channels, sample `i` drawn from stream `i` of `seed`.
    pub fn synthesize(
        params: &ChannelParams,
        n_samples: usize,
        n_antennas: usize,
        n_subcarriers: usize,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if n_antennas == 0 || n_subcarriers == 0 {
            return Err(Error::Config("channel dimensions must be positive".into()));
        }
        let samples = (0..n_samples)
            .into_par_iter()
            .map(|i| synth_channel(params, n_antennas, n_subcarriers, &mut stream(seed, i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { n_antennas, n_subcarriers, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        2 * self.n_antennas * self.n_subcarriers
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> Result<(Self, Self)> {
        if n > self.samples.len() {
            return Err(Error::Config(format!("cannot hold out {n} of {} samples", self.samples.len())));
        }
        let tail = self.samples.split_off(self.samples.len() - n);
        let rest = Self { n_antennas: self.n_antennas, n_subcarriers: self.n_subcarriers, samples: tail };
        Ok((self, rest))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_dataset(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_dataset(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn field(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in a dataset header field")))
}

pub fn write_dataset<W: Write>(ds: &ChannelDataset, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [VERSION, field(ds.len())?, field(ds.n_antennas)?, field(ds.n_subcarriers)?] {
        w.write_all(&v.to_le_bytes())?;
    }
    let n = ds.n_antennas * ds.n_subcarriers;
    for s in &ds.samples {
        if s.len() != 2 * n {
            return Err(Error::Shape { expected: format!("{} reals", 2 * n), found: s.len().to_string() });
        }
        for part in 0..2 {
            for k in 0..n {
                w.write_all(&(s[2 * k + part] as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a dataset and rescales every sample to norm `sqrt(2 N_a N_c)`.
pub fn read_dataset<R: Read>(r: &mut R) -> Result<ChannelDataset> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if &b4 != MAGIC {
        return Err(Error::Format("not a channel dataset".into()));
    }
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        r.read_exact(&mut b4)?;
        *h = u32::from_le_bytes(b4);
    }
    let [version, count, na, nc] = header;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let (count, na, nc) = (count as usize, na as usize, nc as usize);
    if na == 0 || nc == 0 {
        return Err(Error::Format("dataset with an empty channel shape".into()));
    }
    let n = na * nc;
    let mut samples = Vec::with_capacity(count);
    let mut planes = vec![0f32; 2 * n];
    for i in 0..count {
        for v in planes.iter_mut() {
            r.read_exact(&mut b4)?;
            *v = f32::from_le_bytes(b4);
        }
        let mut s = vec![0.0; 2 * n];
        for k in 0..n {
            s[2 * k] = f64::from(planes[k]);
            s[2 * k + 1] = f64::from(planes[n + k]);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset sample {i}")));
        }
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = (2.0 * n as f64).sqrt();
        if (norm / want - 1.0).abs() > NORM_WARN {
            log::warn!("dataset sample {i} has norm {norm:.6}, expected {want:.6}; rescaling");
        }
        samples.push(normalize(&s)?);
    }
    Ok(ChannelDataset { n_antennas: na, n_subcarriers: nc, samples })
}
