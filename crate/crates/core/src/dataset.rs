//! Snapshot container files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CFPC" | version u16 | L u32 | K u32 | M u32 | N_assoc u32 | count u32
//! count x { layout u8 | ue_pos K*2 f64 | ap_pos L*2 f64 | beta K*L f64 (row-major)
//!           | pilot_of K u16 | serving K*N_assoc u16 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{ApLayout, SimConfig};
use crate::error::{Error, Result};
use crate::netgen::NetworkSnapshot;

pub const MAGIC: &[u8; 4] = b"CFPC";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetHeader {
    pub num_aps: usize,
    pub num_ues: usize,
    pub antennas: usize,
    pub n_assoc: usize,
    pub count: usize,
}

impl DatasetHeader {
    pub fn for_config(cfg: &SimConfig, count: usize) -> Self {
        Self {
            num_aps: cfg.num_aps,
            num_ues: cfg.num_ues,
            antennas: cfg.antennas,
            n_assoc: cfg.n_assoc,
            count,
        }
    }

    /// Copies the dataset's shape into `cfg`, keeping pilots orthogonal.
    pub fn apply_to(&self, cfg: &mut SimConfig) {
        cfg.num_aps = self.num_aps;
        cfg.num_ues = self.num_ues;
        cfg.tau_p = self.num_ues;
        cfg.antennas = self.antennas;
        cfg.n_assoc = self.n_assoc;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub snapshots: Vec<NetworkSnapshot>,
}

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u16")))
}

pub fn write_to<W: Write>(mut w: W, header: &DatasetHeader, snaps: &[NetworkSnapshot]) -> Result<()> {
    let io = |e| Error::Format(format!("write failed: {e}"));
    if header.count != snaps.len() {
        return Err(Error::Format(format!(
            "header count {} but {} snapshots",
            header.count,
            snaps.len()
        )));
    }
    w.write_all(MAGIC).map_err(io)?;
    w.write_u16::<LE>(VERSION).map_err(io)?;
    for v in [header.num_aps, header.num_ues, header.antennas, header.n_assoc, header.count] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        w.write_u32::<LE>(v).map_err(io)?;
    }
    for s in snaps {
        if s.num_ues() != header.num_ues || s.num_aps() != header.num_aps {
            return Err(Error::Format("snapshot shape differs from header".into()));
        }
        w.write_u8(match s.layout {
            ApLayout::Grid => 0,
            ApLayout::Uniform => 1,
        })
        .map_err(io)?;
        for p in s.ue_pos.iter().chain(&s.ap_pos) {
            w.write_f64::<LE>(p[0]).map_err(io)?;
            w.write_f64::<LE>(p[1]).map_err(io)?;
        }
        for k in 0..header.num_ues {
            for l in 0..header.num_aps {
                w.write_f64::<LE>(s.beta[(k, l)]).map_err(io)?;
            }
        }
        for &p in &s.pilot_of {
            w.write_u16::<LE>(u16_of(p, "pilot index")?).map_err(io)?;
        }
        for aps in &s.serving {
            if aps.len() != header.n_assoc {
                return Err(Error::Format("serving set size differs from N_assoc".into()));
            }
            for &l in aps {
                w.write_u16::<LE>(u16_of(l, "AP index")?).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_from<R: Read>(mut r: R) -> Result<Dataset> {
    let io = |e: std::io::Error| Error::Format(format!("truncated dataset: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a CFPC dataset".into()));
    }
    let version = r.read_u16::<LE>().map_err(io)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.read_u32::<LE>().map_err(io)? as usize;
    }
    let [num_aps, num_ues, antennas, n_assoc, count] = dims;
    let header = DatasetHeader {
        num_aps,
        num_ues,
        antennas,
        n_assoc,
        count,
    };
    let mut snapshots = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let layout = match r.read_u8().map_err(io)? {
            0 => ApLayout::Grid,
            1 => ApLayout::Uniform,
            v => return Err(Error::Format(format!("unknown layout tag {v}"))),
        };
        let mut read_points = |n: usize| -> Result<Vec<[f64; 2]>> {
            (0..n)
                .map(|_| Ok([r.read_f64::<LE>().map_err(io)?, r.read_f64::<LE>().map_err(io)?]))
                .collect()
        };
        let ue_pos = read_points(num_ues)?;
        let ap_pos = read_points(num_aps)?;
        let mut beta = DMatrix::zeros(num_ues, num_aps);
        for k in 0..num_ues {
            for l in 0..num_aps {
                beta[(k, l)] = r.read_f64::<LE>().map_err(io)?;
            }
        }
        let pilot_of = (0..num_ues)
            .map(|_| Ok(r.read_u16::<LE>().map_err(io)? as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut serving = Vec::with_capacity(num_ues);
        for _ in 0..num_ues {
            let aps = (0..n_assoc)
                .map(|_| Ok(r.read_u16::<LE>().map_err(io)? as usize))
                .collect::<Result<Vec<_>>>()?;
            if aps.iter().any(|&l| l >= num_aps) {
                return Err(Error::Format("serving AP index out of range".into()));
            }
            serving.push(aps);
        }
        snapshots.push(NetworkSnapshot::from_parts(
            ue_pos, ap_pos, beta, pilot_of, serving, layout,
        ));
    }
    Ok(Dataset { header, snapshots })
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, snaps: &[NetworkSnapshot]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(BufWriter::new(f), header, snaps)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(BufReader::new(f))
}

#[derive(Serialize)]
struct SnapshotView<'a> {
    layout: ApLayout,
    ue_pos: &'a [[f64; 2]],
    ap_pos: &'a [[f64; 2]],
    beta_db: Vec<Vec<f64>>,
    pilot_of: &'a [usize],
    serving: &'a [Vec<usize>],
    master_ap: &'a [usize],
}

/// Human-readable JSON dump, gains in dB.
pub fn export_json<W: Write>(w: W, dataset: &Dataset) -> Result<()> {
    #[derive(Serialize)]
    struct View<'a> {
        header: DatasetHeader,
        snapshots: Vec<SnapshotView<'a>>,
    }
    let view = View {
        header: dataset.header,
        snapshots: dataset
            .snapshots
            .iter()
            .map(|s| SnapshotView {
                layout: s.layout,
                ue_pos: &s.ue_pos,
                ap_pos: &s.ap_pos,
                beta_db: (0..s.num_ues())
                    .map(|k| (0..s.num_aps()).map(|l| 10.0 * s.beta[(k, l)].log10()).collect())
                    .collect(),
                pilot_of: &s.pilot_of,
                serving: &s.serving,
                master_ap: &s.master_ap,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(w, &view).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::generate_many;

    #[test]
    fn roundtrip_preserves_snapshots() {
        let cfg = SimConfig::default();
        let snaps = generate_many(&cfg, 7, 5).unwrap();
        let header = DatasetHeader::for_config(&cfg, snaps.len());
        let mut buf = Vec::new();
        write_to(&mut buf, &header, &snaps).unwrap();
        let back = read_from(buf.as_slice()).unwrap();
        assert_eq!(back.header, header);
        assert_eq!(back.snapshots, snaps);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let cfg = SimConfig::default();
        let header = DatasetHeader::for_config(&cfg, 0);
        let mut buf = Vec::new();
        write_to(&mut buf, &header, &[]).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 5 * 4);
        let back = read_from(buf.as_slice()).unwrap();
        assert_eq!(back.header.count, 0);
        assert!(back.snapshots.is_empty());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_from(&b"NOPE\x01\x00"[..]), Err(Error::Format(_))));
        let cfg = SimConfig::default();
        let snaps = generate_many(&cfg, 7, 1).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &DatasetHeader::for_config(&cfg, 1), &snaps).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn json_export_lists_every_snapshot() {
        let cfg = SimConfig::default();
        let snaps = generate_many(&cfg, 1, 2).unwrap();
        let ds = Dataset {
            header: DatasetHeader::for_config(&cfg, 2),
            snapshots: snaps,
        };
        let mut out = Vec::new();
        export_json(&mut out, &ds).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["snapshots"].as_array().unwrap().len(), 2);
        assert_eq!(v["header"]["count"], 2);
    }
}
