//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `CFPM`, version `u16`, `H u32`, `d_in u32`,
//! head depth `u32` and widths `u32…`, hidden/output activation ids `u8 u8`,
//! latent scale `f64`, clamp `f64`, feature mode `u8` + argument `f64`,
//! parameter count `u64`, parameters as `f32`, then a CRC32 of all preceding bytes.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use super::{FeatureMode, Neighborhood, PolicyConfig, PolicyParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFPM";
pub const VERSION: u16 = 1;
const ACT_SELU: u8 = 1;
const ACT_SOFTPLUS: u8 = 2;

pub fn encode(params: &PolicyParams<f32>) -> Vec<u8> {
    let c = &params.cfg;
    let mut b = Vec::with_capacity(64 + 4 * params.data.len());
    b.extend_from_slice(MAGIC);
    b.write_u16::<LE>(VERSION).unwrap();
    b.write_u32::<LE>(c.hidden as u32).unwrap();
    b.write_u32::<LE>(c.d_in as u32).unwrap();
    b.write_u32::<LE>(c.head_dims.len() as u32).unwrap();
    for &d in &c.head_dims {
        b.write_u32::<LE>(d as u32).unwrap();
    }
    b.push(ACT_SELU);
    b.push(ACT_SOFTPLUS);
    b.write_f64::<LE>(c.latent_scale_mw).unwrap();
    b.write_f64::<LE>(c.clamp).unwrap();
    let (mode, arg) = match c.features {
        FeatureMode::Global => (0u8, 0.0),
        FeatureMode::Scalable(Neighborhood::Radius(r)) => (1, r),
        FeatureMode::Scalable(Neighborhood::TopN(n)) => (2, n as f64),
    };
    b.push(mode);
    b.write_f64::<LE>(arg).unwrap();
    b.write_u64::<LE>(params.data.len() as u64).unwrap();
    for &v in &params.data {
        b.write_f32::<LE>(v).unwrap();
    }
    let crc = crc32fast::hash(&b);
    b.write_u32::<LE>(crc).unwrap();
    b
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint ({e})"))
}

pub fn decode(bytes: &[u8]) -> Result<PolicyParams<f32>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a policy checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Cursor::new(&body[4..]);
    let version = r.read_u16::<LE>().map_err(fmt_err)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hidden = r.read_u32::<LE>().map_err(fmt_err)? as usize;
    let d_in = r.read_u32::<LE>().map_err(fmt_err)? as usize;
    let depth = r.read_u32::<LE>().map_err(fmt_err)? as usize;
    if depth > 64 {
        return Err(Error::Format(format!("implausible head depth {depth}")));
    }
    let head_dims = (0..depth)
        .map(|_| r.read_u32::<LE>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(fmt_err)?;
    let acts = (r.read_u8().map_err(fmt_err)?, r.read_u8().map_err(fmt_err)?);
    if acts != (ACT_SELU, ACT_SOFTPLUS) {
        return Err(Error::Format(format!("unknown activation ids {acts:?}")));
    }
    let latent_scale_mw = r.read_f64::<LE>().map_err(fmt_err)?;
    let clamp = r.read_f64::<LE>().map_err(fmt_err)?;
    let mode = r.read_u8().map_err(fmt_err)?;
    let arg = r.read_f64::<LE>().map_err(fmt_err)?;
    let features = match mode {
        0 => FeatureMode::Global,
        1 => FeatureMode::Scalable(Neighborhood::Radius(arg)),
        2 => FeatureMode::Scalable(Neighborhood::TopN(arg as usize)),
        m => return Err(Error::Format(format!("unknown feature mode {m}"))),
    };
    let cfg = PolicyConfig {
        hidden,
        d_in,
        head_dims,
        latent_scale_mw,
        clamp,
        features,
    };
    cfg.validate()?;
    let n = r.read_u64::<LE>().map_err(fmt_err)? as usize;
    let remaining = body.len() - 4 - r.position() as usize;
    if remaining != 4 * n {
        return Err(Error::Format(format!("expected {n} parameters, found {} bytes", remaining)));
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LE>(&mut data).map_err(fmt_err)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(fmt_err)?;
    debug_assert!(rest.is_empty());
    PolicyParams::from_data(&cfg, data)
}

pub fn save(params: &PolicyParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PolicyParams<f32>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
