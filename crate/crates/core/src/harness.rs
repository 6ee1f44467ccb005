//! Experiment pipeline behind the `cfpc` command line tool.

use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::{self, mmf_oracle, MmfOptions, TuneResult, FPA_GRID, LOZANO_GRID};
use crate::config::SimConfig;
use crate::dataset::{read_dataset, write_dataset, Dataset, DatasetHeader};
use crate::error::{Error, Result};
use crate::netgen::{generate_many, NetworkSnapshot};
use crate::perf::{self, PowerAllocation};
use crate::policy::{self, checkpoint, Complexity, PolicyConfig, PolicyParams};
use crate::train::{self, TrainConfig, TrainData, TrainOutcome, TrainState};

/// Offset between a training seed and the seed of its default validation set.
const VALIDATION_SEED_OFFSET: u64 = 0x7661_6c00;
pub const DEFAULT_VALIDATION_COUNT: usize = 100;

/// Contents of a `--config` TOML file; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Exponent used by a bare `fpa` method.
    pub fpa_nu: f64,
    /// Exponent used by a bare `lozano` method.
    pub lozano_theta: f64,
    /// UE ordering seed for the policy.
    pub perm_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpa_nu: 0.5,
            lozano_theta: 0.5,
            perm_seed: 0,
        }
    }
}

/// Sets the rayon worker count from `CFPC_THREADS` when present.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CFPC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("CFPC_THREADS = {v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

/// SE values are written with six significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mut e = v.abs().log10().floor() as i32;
    loop {
        let s = if (-4..=6).contains(&e) {
            format!("{:.*}", (5 - e).max(0) as usize, v)
        } else {
            format!("{:.5e}", v)
        };
        let back: f64 = s.parse().expect("formatted float parses");
        if back.abs() >= 10f64.powi(e + 1) && (-4..=6).contains(&e) {
            e += 1;
            continue;
        }
        return s;
    }
}

/// `v` as it reads back from a CSV written with [`fmt_sig6`].
pub fn round_sig6(v: f64) -> f64 {
    fmt_sig6(v).parse().unwrap()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub count: usize,
    pub seed: u64,
    pub num_ues: usize,
    /// 5th, 50th and 95th percentile of all β entries, dB.
    pub beta_db_percentiles: [f64; 3],
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let [a, b, c] = self.beta_db_percentiles;
        write!(
            f,
            "{} snapshots (K = {}, seed {}); beta dB p5/p50/p95: {a:.1} / {b:.1} / {c:.1}",
            self.count, self.num_ues, self.seed
        )
    }
}

pub fn cmd_generate(sim: &SimConfig, count: usize, seed: u64, out: &Path) -> Result<GenerateSummary> {
    sim.validate()?;
    let snaps = generate_many(sim, seed, count)?;
    write_dataset(out, &DatasetHeader::for_config(sim, count), &snaps)?;
    let mut db: Vec<f64> = snaps
        .iter()
        .flat_map(|s| s.beta.iter().map(|b| 10.0 * b.log10()))
        .collect();
    db.sort_by(f64::total_cmp);
    Ok(GenerateSummary {
        count,
        seed,
        num_ues: sim.num_ues,
        beta_db_percentiles: [percentile(&db, 0.05), percentile(&db, 0.5), percentile(&db, 0.95)],
    })
}

/// Reads a dataset and adopts its shape, so physics matches the file.
pub fn load_dataset(path: &Path, sim: &SimConfig) -> Result<(Dataset, SimConfig)> {
    let ds = read_dataset(path)?;
    let mut sim = sim.clone();
    ds.header.apply_to(&mut sim);
    sim.validate()?;
    Ok((ds, sim))
}

pub struct TrainRequest<'a> {
    pub train_set: &'a Path,
    pub val_set: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    /// Continue from `<out>.train` when it exists.
    pub resume: bool,
}

const LOG_HEADER: &str = "epoch,step,loss,val_min_se,wall_ms,batch_min_se";

pub fn cmd_train(req: &TrainRequest, sim: &SimConfig, pcfg: &PolicyConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    let (ds, sim) = load_dataset(req.train_set, sim)?;
    let data = TrainData::from_snapshots(&ds.snapshots)?;
    let val = match req.val_set {
        Some(p) => {
            let (v, vsim) = load_dataset(p, &sim)?;
            if vsim.num_ues != sim.num_ues {
                log::warn!("validation set has K = {}, training K = {}", vsim.num_ues, sim.num_ues);
            }
            v.snapshots
        }
        None => generate_many(&sim, tcfg.seed.wrapping_add(VALIDATION_SEED_OFFSET), DEFAULT_VALIDATION_COUNT)?,
    };
    let state_path = TrainState::path_for(req.out);
    let resume = if req.resume && state_path.exists() {
        let s = TrainState::load(&state_path)?;
        log::info!("resuming at epoch {} from {}", s.next_epoch, state_path.display());
        Some(s)
    } else {
        None
    };
    let log_path = req.log.map(Path::to_path_buf);
    if let Some(p) = &log_path {
        if resume.is_none() || !p.exists() {
            fs::write(p, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(p, e))?;
        }
    }
    let out = req.out.to_path_buf();
    let mut observe = |p: &train::Progress| -> Result<()> {
        if p.improved {
            checkpoint::save(p.best, &out)?;
        }
        p.state.save(&state_path)?;
        if let Some(path) = &log_path {
            append_log(path, p.rows)?;
        }
        Ok(())
    };
    let outcome = train::train(&data, &val, &sim, pcfg, tcfg, resume, &mut observe)?;
    checkpoint::save(&outcome.best, req.out)?;
    Ok(outcome)
}

fn append_log(path: &Path, rows: &[train::LogRow]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            fmt_sig6(r.loss),
            r.val_min_se.map(fmt_sig6).unwrap_or_default(),
            r.wall_ms,
            fmt_sig6(r.batch_min_se)
        );
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMethod {
    Epa,
    Fpa(f64),
    Lozano(f64),
    Mmf,
    Policy,
}

impl EvalMethod {
    pub fn label(&self) -> String {
        match self {
            EvalMethod::Epa => "epa".into(),
            EvalMethod::Fpa(nu) => format!("fpa:{nu}"),
            EvalMethod::Lozano(t) => format!("lozano:{t}"),
            EvalMethod::Mmf => "mmf".into(),
            EvalMethod::Policy => "policy".into(),
        }
    }

    /// Scalable heuristics, as opposed to the oracle and the learned policy.
    pub fn is_baseline(&self) -> bool {
        matches!(self, EvalMethod::Epa | EvalMethod::Fpa(_) | EvalMethod::Lozano(_))
    }

    /// A comma-separated list such as `epa,fpa:0.5,lozano,mmf,policy`.
    pub fn parse_list(list: &str, ecfg: &EvalConfig) -> Result<Vec<EvalMethod>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (name, arg) = match s.split_once(':') {
                    Some((n, a)) => (n, Some(a)),
                    None => (s, None),
                };
                let num = |d: f64| -> Result<f64> {
                    arg.map_or(Ok(d), |a| {
                        f64::from_str(a).map_err(|_| Error::Config(format!("bad method argument in {s:?}")))
                    })
                };
                let m = match name {
                    "epa" => EvalMethod::Epa,
                    "fpa" => EvalMethod::Fpa(num(ecfg.fpa_nu)?),
                    "lozano" => EvalMethod::Lozano(num(ecfg.lozano_theta)?),
                    "mmf" => EvalMethod::Mmf,
                    "policy" => EvalMethod::Policy,
                    _ => return Err(Error::Config(format!("unknown method {name:?}"))),
                };
                if arg.is_some() && !matches!(m, EvalMethod::Fpa(_) | EvalMethod::Lozano(_)) {
                    return Err(Error::Config(format!("method {name:?} takes no argument")));
                }
                Ok(m)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mean_se: f64,
    pub min_se: f64,
    pub max_se: f64,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub method: EvalMethod,
    /// Snapshot × UE.
    pub se: Vec<Vec<f64>>,
    pub violations: usize,
}

impl MethodResult {
    pub fn min_se(&self) -> Vec<f64> {
        self.se.iter().map(|v| perf::min_of(v)).collect()
    }

    /// Per-snapshot mean/min/max, averaged over snapshots.
    pub fn row(&self) -> MethodRow {
        let n = self.se.len().max(1) as f64;
        let avg = |f: &dyn Fn(&[f64]) -> f64| self.se.iter().map(|v| f(v)).sum::<f64>() / n;
        MethodRow {
            method: self.method.label(),
            mean_se: avg(&|v| v.iter().sum::<f64>() / v.len() as f64),
            min_se: avg(&|v| perf::min_of(v)),
            max_se: avg(&|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            violations: self.violations,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub methods: Vec<MethodResult>,
    pub num_ues: usize,
    pub count: usize,
    pub fingerprint: String,
    pub manifest: serde_json::Value,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<MethodRow> {
        self.methods.iter().map(MethodResult::row).collect()
    }

    pub fn get(&self, m: EvalMethod) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Largest amount by which any method beats the oracle on one snapshot.
    pub fn oracle_excess(&self) -> Option<f64> {
        let mmf = self.get(EvalMethod::Mmf)?.min_se();
        Some(
            self.methods
                .iter()
                .filter(|r| r.method != EvalMethod::Mmf)
                .flat_map(|r| r.min_se().into_iter().zip(&mmf).map(|(a, b)| a - b).collect::<Vec<_>>())
                .fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        writeln!(f, "{} snapshots, K = {}", self.count, self.num_ues)?;
        writeln!(f, "{:<16} {:>9} {:>9} {:>9}", "method", "mean SE", "min SE", "max SE")?;
        for r in self.rows() {
            writeln!(f, "{:<16} {:>9.4} {:>9.4} {:>9.4}", r.method, r.mean_se, r.min_se, r.max_se)?;
        }
        Ok(())
    }
}

pub struct EvalRequest<'a> {
    pub data: &'a Path,
    pub methods: &'a [EvalMethod],
    pub checkpoint: Option<&'a Path>,
    pub out_dir: Option<&'a Path>,
}

fn fingerprint(v: &serde_json::Value) -> String {
    format!("{:08x}", crc32fast::hash(v.to_string().as_bytes()))
}

fn file_crc(path: &Path) -> Result<String> {
    Ok(format!("{:08x}", crc32fast::hash(&fs::read(path).map_err(|e| Error::io(path, e))?)))
}

/// Evaluates every method on the snapshots in memory.
pub fn evaluate(
    snaps: &[NetworkSnapshot],
    sim: &SimConfig,
    methods: &[EvalMethod],
    params: Option<&PolicyParams<f32>>,
    ecfg: &EvalConfig,
) -> Result<Vec<MethodResult>> {
    let prep = alloc::prepare(snaps, sim);
    let p_max = sim.p_max();
    methods
        .iter()
        .map(|&m| {
            let per = prep
                .par_iter()
                .map(|p| {
                    let a: PowerAllocation = match m {
                        EvalMethod::Epa => alloc::epa(p.snap, sim),
                        EvalMethod::Fpa(nu) => alloc::fpa(p.snap, sim, nu)?,
                        EvalMethod::Lozano(t) => alloc::lozano(p.snap, sim, t)?,
                        EvalMethod::Mmf => mmf_oracle(p.snap, &p.gamma, sim, &MmfOptions::default()).alloc,
                        EvalMethod::Policy => {
                            let params = params.ok_or_else(|| Error::Config("method `policy` needs a checkpoint".into()))?;
                            policy::infer(params, p.snap, sim, ecfg.perm_seed)?
                        }
                    };
                    let v = a.violations(p.snap, &p_max, 1e-9);
                    Ok((perf::evaluate_se(p.snap, &p.gamma, &a, sim), v))
                })
                .collect::<Result<Vec<_>>>()?;
            let violations = per.iter().map(|(_, v)| v).sum();
            Ok(MethodResult {
                method: m,
                se: per.into_iter().map(|(s, _)| s).collect(),
                violations,
            })
        })
        .collect()
}

pub fn cmd_eval(req: &EvalRequest, sim: &SimConfig, ecfg: &EvalConfig) -> Result<EvalReport> {
    let (ds, sim) = load_dataset(req.data, sim)?;
    let wants_policy = req.methods.contains(&EvalMethod::Policy);
    let params = match (wants_policy, req.checkpoint) {
        (true, Some(p)) => Some(checkpoint::load(p)?),
        (true, None) => return Err(Error::Config("method `policy` needs --checkpoint".into())),
        (false, Some(_)) => {
            log::warn!("checkpoint ignored: `policy` not among the methods");
            None
        }
        (false, None) => None,
    };
    let methods = evaluate(&ds.snapshots, &sim, req.methods, params.as_ref(), ecfg)?;
    let mut manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "dataset": req.data.display().to_string(),
        "dataset_crc32": file_crc(req.data)?,
        "count": ds.header.count,
        "num_ues": sim.num_ues,
        "sim": sim,
        "eval": ecfg,
        "methods": req.methods.iter().map(EvalMethod::label).collect::<Vec<_>>(),
        "mmf": format!("{:?}", MmfOptions::default()),
    });
    if let (Some(p), Some(params)) = (req.checkpoint, &params) {
        manifest["checkpoint"] = serde_json::json!(p.display().to_string());
        manifest["checkpoint_crc32"] = serde_json::json!(file_crc(p)?);
        manifest["policy"] = serde_json::to_value(&params.cfg).unwrap();
    }
    let fp = fingerprint(&manifest);
    manifest["fingerprint"] = serde_json::json!(fp);
    let report = EvalReport {
        methods,
        num_ues: sim.num_ues,
        count: ds.header.count,
        fingerprint: fp,
        manifest,
    };
    if let Some(dir) = req.out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const CDF_CSV: &str = "min_se_cdf.csv";
pub const PER_UE_CSV: &str = "per_ue_se.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| -> Result<(csv::Writer<File>, PathBuf)> {
        let p = dir.join(name);
        Ok((csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?, p))
    };

    let (mut w, p) = open(SUMMARY_CSV)?;
    w.write_record(["method", "mean_se", "min_se", "max_se", "violations"])
        .map_err(|e| csv_err(&p, e))?;
    for r in report.rows() {
        w.write_record([
            r.method,
            fmt_sig6(r.mean_se),
            fmt_sig6(r.min_se),
            fmt_sig6(r.max_se),
            r.violations.to_string(),
        ])
        .map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let (mut w, p) = open(CDF_CSV)?;
    w.write_record(["method", "min_se", "cdf"]).map_err(|e| csv_err(&p, e))?;
    for m in &report.methods {
        let (x, c) = empirical_cdf(&m.min_se());
        for (x, c) in x.iter().zip(c) {
            w.write_record([m.method.label(), fmt_sig6(*x), fmt_sig6(c)])
                .map_err(|e| csv_err(&p, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let (mut w, p) = open(PER_UE_CSV)?;
    w.write_record(["method", "snapshot", "ue", "se"]).map_err(|e| csv_err(&p, e))?;
    for m in &report.methods {
        for (s, v) in m.se.iter().enumerate() {
            for (k, se) in v.iter().enumerate() {
                w.write_record([m.method.label(), s.to_string(), k.to_string(), fmt_sig6(*se)])
                    .map_err(|e| csv_err(&p, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join(MANIFEST_JSON);
    fs::write(&p, serde_json::to_string_pretty(&report.manifest).unwrap()).map_err(|e| Error::io(&p, e))
}

/// Sorted samples and their empirical CDF `(i + 1) / n`.
pub fn empirical_cdf(samples: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let c = (1..=x.len()).map(|i| i as f64 / n).collect();
    (x, c)
}

/// Empirical quantile with the inverse-CDF convention.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let (x, _) = empirical_cdf(samples);
    if x.is_empty() {
        return f64::NAN;
    }
    let i = ((q * x.len() as f64).ceil() as usize).clamp(1, x.len()) - 1;
    x[i]
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<MethodRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CdfRow {
    pub method: String,
    pub min_se: f64,
    pub cdf: f64,
}

pub fn read_cdf_csv(path: &Path) -> Result<Vec<CdfRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct PerUeRow {
    pub method: String,
    pub snapshot: usize,
    pub ue: usize,
    pub se: f64,
}

pub fn read_per_ue_csv(path: &Path) -> Result<Vec<PerUeRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TuneReport {
    pub fpa: TuneResult,
    pub lozano: TuneResult,
    /// Mean min-SE of EPA on the same data.
    pub epa: f64,
}

impl fmt::Display for TuneReport {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        writeln!(f, "epa: mean min-SE {:.4}", self.epa)?;
        for (name, t) in [("fpa nu", &self.fpa), ("lozano theta", &self.lozano)] {
            let grid: Vec<String> = t.scores.iter().map(|(v, s)| format!("{v}: {s:.4}")).collect();
            writeln!(f, "{name}: best {} ({})", t.best, grid.join(", "))?;
        }
        Ok(())
    }
}

pub fn tune(snaps: &[NetworkSnapshot], sim: &SimConfig) -> Result<TuneReport> {
    let prep = alloc::prepare(snaps, sim);
    let fpa = alloc::tune_baseline(&prep, sim, &FPA_GRID, |s, v| alloc::fpa(s, sim, v))?;
    let lozano = alloc::tune_baseline(&prep, sim, &LOZANO_GRID, |s, v| alloc::lozano(s, sim, v))?;
    let epa = prep
        .iter()
        .map(|p| perf::min_of(&perf::evaluate_se(p.snap, &p.gamma, &alloc::epa(p.snap, sim), sim)))
        .sum::<f64>()
        / prep.len().max(1) as f64;
    Ok(TuneReport { fpa, lozano, epa })
}

pub fn cmd_tune(data: &Path, sim: &SimConfig, out: Option<&Path>) -> Result<TuneReport> {
    let (ds, sim) = load_dataset(data, sim)?;
    let rep = tune(&ds.snapshots, &sim)?;
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&rep).unwrap()).map_err(|e| Error::io(p, e))?;
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub complexity: Complexity,
    pub num_ues: usize,
    pub n_assoc: usize,
}

impl ComplexityReport {
    pub fn total_flops(&self) -> usize {
        self.complexity.total_flops(self.num_ues * self.n_assoc)
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let c = &self.complexity;
        writeln!(f, "parameters       {} (BiLSTM {}, head {})", c.param_count, c.lstm_params, c.head_params)?;
        writeln!(
            f,
            "FLOPs per pair   {} ({:.2} M; BiLSTM {:.2} M, head {:.3} M)",
            c.flops_per_pair,
            c.flops_per_pair as f64 / 1e6,
            c.lstm_flops as f64 / 1e6,
            c.head_flops as f64 / 1e6
        )?;
        writeln!(
            f,
            "total at K = {}, N = {}: {:.1} MFLOPs ({:.2} M per UE)",
            self.num_ues,
            self.n_assoc,
            self.total_flops() as f64 / 1e6,
            (c.flops_per_pair * self.n_assoc) as f64 / 1e6
        )?;
        write!(f, "memory           {} bytes ({:.2} MiB)", c.memory_bytes, c.memory_mib())
    }
}

/// Accounting for a checkpoint, or for `pcfg` when none is given.
pub fn cmd_complexity(ckpt: Option<&Path>, pcfg: &PolicyConfig, sim: &SimConfig) -> Result<ComplexityReport> {
    let cfg = match ckpt {
        Some(p) => checkpoint::load(p)?.cfg,
        None => pcfg.clone(),
    };
    Ok(ComplexityReport {
        complexity: policy::count_params_and_flops(&cfg),
        num_ues: sim.num_ues,
        n_assoc: sim.n_assoc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(1.2345678), "1.23457");
        assert_eq!(fmt_sig6(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig6(123456.7), "123457");
        assert_eq!(fmt_sig6(9.9999999), "10.0000");
        assert_eq!(fmt_sig6(-2.5), "-2.50000");
        assert_eq!(fmt_sig6(1.5e-9), "1.50000e-9");
        assert_eq!(fmt_sig6(0.0), "0");
    }

    #[test]
    fn method_lists() {
        let e = EvalConfig::default();
        let m = EvalMethod::parse_list("epa, fpa:-1,lozano,mmf,policy", &e).unwrap();
        assert_eq!(
            m,
            vec![
                EvalMethod::Epa,
                EvalMethod::Fpa(-1.0),
                EvalMethod::Lozano(0.5),
                EvalMethod::Mmf,
                EvalMethod::Policy
            ]
        );
        assert!(EvalMethod::parse_list("epa,unknown", &e).is_err());
        assert!(EvalMethod::parse_list("mmf:3", &e).is_err());
        assert!(EvalMethod::parse_list("fpa:x", &e).is_err());
    }

    #[test]
    fn config_file_sections() {
        let c = FileConfig::parse(
            "[sim]\nnum_ues = 10\n[train]\nepochs = 3\n[policy]\nhidden = 8\nfeatures = { scalable = { top_n = 4 } }\n",
        )
        .unwrap();
        assert_eq!(c.sim.num_ues, 10);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.policy.hidden, 8);
        assert_eq!(
            c.policy.features,
            policy::FeatureMode::Scalable(policy::Neighborhood::TopN(4))
        );
        assert!(matches!(FileConfig::parse("[sim]\nnum_uess = 1\n"), Err(Error::Config(_))));
        assert_eq!(FileConfig::parse("").unwrap(), FileConfig::default());
    }

    #[test]
    fn quantiles_and_cdf() {
        let (x, c) = empirical_cdf(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(x, vec![1.0, 2.0, 2.0, 3.0]);
        assert_eq!(c, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.9), 4.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.1), 1.0);
    }
}
