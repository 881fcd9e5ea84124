//! Binary checkpoint: magic `NIDM`, format version, configuration, then the
//! parameters as little-endian `f64` in canonical order.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, EmbeddingScheme, MixerConfig, MixerModel, TimeAveraging};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NIDM";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn size(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in a checkpoint field")))
}

pub fn write_checkpoint<W: Write>(model: &MixerModel, w: &mut W) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    for v in [c.n_antennas, c.n_subcarriers, c.n_blocks, c.hidden_mult, c.embed_dim] {
        put_u32(w, size(v)?)?;
    }
    let scheme = match c.embedding_scheme {
        EmbeddingScheme::RowWise => 0,
        EmbeddingScheme::ColumnWise => 1,
        EmbeddingScheme::Together => 2,
    };
    let averaging = match c.averaging {
        TimeAveraging::TauAvg => 0,
        TimeAveraging::AlphaAvg => 1,
    };
    let activation = match c.activation {
        Activation::Gelu => 0,
        Activation::Identity => 1,
    };
    w.write_all(&[scheme, averaging, activation, 0])?;
    put_u32(w, c.max_time)?;
    w.write_all(&(model.n_params() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<MixerModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = get_u32(r)? as usize;
    }
    let mut tags = [0u8; 4];
    r.read_exact(&mut tags)?;
    let embedding_scheme = match tags[0] {
        0 => EmbeddingScheme::RowWise,
        1 => EmbeddingScheme::ColumnWise,
        2 => EmbeddingScheme::Together,
        t => return Err(Error::Format(format!("unknown embedding scheme tag {t}"))),
    };
    let averaging = match tags[1] {
        0 => TimeAveraging::TauAvg,
        1 => TimeAveraging::AlphaAvg,
        t => return Err(Error::Format(format!("unknown averaging tag {t}"))),
    };
    let activation = match tags[2] {
        0 => Activation::Gelu,
        1 => Activation::Identity,
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let max_time = get_u32(r)?;
    let config = MixerConfig {
        n_antennas: dims[0],
        n_subcarriers: dims[1],
        n_blocks: dims[2],
        hidden_mult: dims[3],
        embed_dim: dims[4],
        embedding_scheme,
        averaging,
        activation,
        max_time,
    };
    config.validate()?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let expected = super::parameter_count(&config);
    if n != expected {
        return Err(Error::Format(format!("checkpoint holds {n} parameters, configuration needs {expected}")));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        params.push(f64::from_le_bytes(b8));
    }
    MixerModel::from_params(config, params)
}

pub fn save_checkpoint(model: &MixerModel, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MixerModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}
