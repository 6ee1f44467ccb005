//! Resumable optimizer state, stored next to the checkpoint.
//!
//! Layout (little-endian): magic `CFPS`, version `u16`, next epoch `u64`,
//! step `u64`, best score `f64`, best epoch `i64` (-1 if none), epochs since
//! best `u64`, parameter count `u64`, then current parameters, velocity and
//! best parameters as `f32`, and a CRC32 of everything before it.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};
use crate::policy::{ParamLayout, PolicyConfig, PolicyParams};

pub const MAGIC: &[u8; 4] = b"CFPS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    pub step: usize,
    pub best_val: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    pub params: Vec<f32>,
    pub velocity: Vec<f32>,
    pub best: Vec<f32>,
}

impl TrainState {
    pub fn fresh(init: PolicyParams<f32>) -> Self {
        Self {
            next_epoch: 0,
            step: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: None,
            since_best: 0,
            velocity: vec![0.0; init.num_params()],
            best: init.data.clone(),
            params: init.data,
        }
    }

    pub fn check_shape(&self, cfg: &PolicyConfig) -> Result<()> {
        let n = ParamLayout::new(cfg).total;
        if [self.params.len(), self.velocity.len(), self.best.len()].iter().any(|&l| l != n) {
            return Err(Error::Config(format!(
                "training state holds {} parameters, model needs {n}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Where the state for a checkpoint at `ckpt` lives.
    pub fn path_for(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".train");
        PathBuf::from(s)
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.params.len();
        let mut b = Vec::with_capacity(64 + 12 * n);
        b.extend_from_slice(MAGIC);
        b.write_u16::<LE>(VERSION).unwrap();
        b.write_u64::<LE>(self.next_epoch as u64).unwrap();
        b.write_u64::<LE>(self.step as u64).unwrap();
        b.write_f64::<LE>(self.best_val).unwrap();
        b.write_i64::<LE>(self.best_epoch.map_or(-1, |e| e as i64)).unwrap();
        b.write_u64::<LE>(self.since_best as u64).unwrap();
        b.write_u64::<LE>(n as u64).unwrap();
        for v in self.params.iter().chain(&self.velocity).chain(&self.best) {
            b.write_f32::<LE>(*v).unwrap();
        }
        let crc = crc32fast::hash(&b);
        b.write_u32::<LE>(crc).unwrap();
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a training state file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let short = |e: std::io::Error| Error::Format(format!("truncated training state ({e})"));
        let mut r = Cursor::new(&body[4..]);
        let version = r.read_u16::<LE>().map_err(short)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported training state version {version}")));
        }
        let next_epoch = r.read_u64::<LE>().map_err(short)? as usize;
        let step = r.read_u64::<LE>().map_err(short)? as usize;
        let best_val = r.read_f64::<LE>().map_err(short)?;
        let best_epoch = usize::try_from(r.read_i64::<LE>().map_err(short)?).ok();
        let since_best = r.read_u64::<LE>().map_err(short)? as usize;
        let n = r.read_u64::<LE>().map_err(short)? as usize;
        let left = body.len() - 4 - r.position() as usize;
        if left != 12 * n {
            return Err(Error::Format(format!("training state for {n} parameters has {left} payload bytes")));
        }
        let mut read = || {
            let mut v = vec![0f32; n];
            r.read_f32_into::<LE>(&mut v).map(|_| v).map_err(short)
        };
        let params = read()?;
        let velocity = read()?;
        let best = read()?;
        Ok(Self {
            next_epoch,
            step,
            best_val,
            best_epoch,
            since_best,
            params,
            velocity,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_crc() {
        let cfg = PolicyConfig::default().with_hidden(3);
        let mut s = TrainState::fresh(PolicyParams::init(&cfg, 1));
        s.next_epoch = 4;
        s.step = 77;
        s.best_val = 1.25;
        s.best_epoch = Some(2);
        s.velocity[3] = -0.5;
        let b = s.encode();
        assert_eq!(TrainState::decode(&b).unwrap(), s);
        let mut bad = b.clone();
        bad[20] ^= 1;
        assert!(matches!(TrainState::decode(&bad), Err(Error::Crc { .. })));
        let fresh = TrainState::fresh(PolicyParams::init(&cfg, 1));
        assert_eq!(TrainState::decode(&fresh.encode()).unwrap().best_epoch, None);
        assert!(s.check_shape(&cfg).is_ok());
        assert!(s.check_shape(&PolicyConfig::default().with_hidden(4)).is_err());
    }

    #[test]
    fn state_path_appends_suffix() {
        assert_eq!(TrainState::path_for(Path::new("out/model.cfpm")), PathBuf::from("out/model.cfpm.train"));
    }
}
