//! One line per acceptance criterion, written straight to stdout so it shows
//! up without `--nocapture`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use cfpc::alloc::{self, mmf_oracle, MmfOptions, FPA_GRID, LOZANO_GRID};
use cfpc::dataset::{write_dataset, DatasetHeader};
use cfpc::harness::{self, EvalConfig, EvalMethod, TrainRequest};
use cfpc::netgen::{generate_many, stream_rng, NetworkSnapshot};
use cfpc::perf;
use cfpc::policy::{self, build_features, checkpoint, count_params_and_flops, FeatureMode, Neighborhood, PolicyConfig, PolicyParams};
use cfpc::train::gradcheck::{gradcheck, GradcheckDims, GradcheckOptions};
use cfpc::train::TrainConfig;
use cfpc::SimConfig;

const TRAIN_SEED: u64 = 1;
const TRAIN_COUNT: usize = 1000;
const VAL_SEED: u64 = 2;
const VAL_COUNT: usize = 100;
const TEST_SEED: u64 = 3;
const TEST_COUNT: usize = 200;

fn report(name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn policy_min_se(params: &PolicyParams<f32>, snaps: &[NetworkSnapshot], sim: &SimConfig) -> Vec<f64> {
    snaps
        .par_iter()
        .map(|s| {
            let g = perf::compute_gamma(s, sim);
            let a = policy::infer(params, s, sim, 0).unwrap();
            perf::min_of(&perf::evaluate_se(s, &g, &a, sim))
        })
        .collect()
}

struct Headline {
    sim: SimConfig,
    train: Vec<NetworkSnapshot>,
    test: Vec<NetworkSnapshot>,
    params: PolicyParams<f32>,
}

/// Trains the full-size policy once per configuration and caches the
/// checkpoint under the cargo target directory.
fn headline() -> &'static Headline {
    static CELL: OnceLock<Headline> = OnceLock::new();
    CELL.get_or_init(|| {
        let sim = SimConfig::default();
        let pcfg = PolicyConfig::default();
        let tcfg = TrainConfig::default();
        let key = serde_json::json!({
            "sim": sim, "policy": pcfg, "train": tcfg,
            "sets": [TRAIN_SEED, TRAIN_COUNT, VAL_SEED, VAL_COUNT],
            "version": env!("CARGO_PKG_VERSION"),
        });
        let fp = format!("{:08x}", crc32fast::hash(key.to_string().as_bytes()));
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join(format!("headline-{fp}.cfpm"));
        let done = dir.join(format!("headline-{fp}.done"));

        let train = generate_many(&sim, TRAIN_SEED, TRAIN_COUNT).unwrap();
        let test = generate_many(&sim, TEST_SEED, TEST_COUNT).unwrap();
        if !done.exists() {
            let write = |p: &Path, seed, n| {
                let s = generate_many(&sim, seed, n).unwrap();
                write_dataset(p, &DatasetHeader::for_config(&sim, n), &s).unwrap();
            };
            let train_path = dir.join("train.cfpc");
            let val_path = dir.join("val.cfpc");
            write(&train_path, TRAIN_SEED, TRAIN_COUNT);
            write(&val_path, VAL_SEED, VAL_COUNT);
            let log = dir.join(format!("headline-{fp}.csv"));
            let req = TrainRequest {
                train_set: &train_path,
                val_set: Some(&val_path),
                out: &ckpt,
                log: Some(&log),
                resume: true,
            };
            harness::cmd_train(&req, &sim, &pcfg, &tcfg).unwrap();
            std::fs::write(&done, b"").unwrap();
        }
        Headline {
            params: checkpoint::load(&ckpt).unwrap(),
            sim,
            train,
            test,
        }
    })
}

#[test]
fn parameter_count() {
    let cfg = PolicyConfig::default();
    let c = count_params_and_flops(&cfg);
    let (h, d) = (256, 3);
    let lstm = 2 * 4 * h * (d + h + 1);
    let head = (256 * 64 + 64) + (64 * 16 + 16) + (16 + 1);
    let n = PolicyParams::<f32>::init(&cfg, 0).num_params();
    let pass = c.param_count == 549_985
        && lstm + head == 549_985
        && c.lstm_params == lstm
        && c.head_params == head
        && n == c.param_count;
    report(
        "parameter count",
        pass,
        &format!("{} total (BiLSTM {}, head {}), allocated {n}; expected 549985", c.param_count, c.lstm_params, c.head_params),
    );
    assert!(pass);
}

#[test]
fn flop_accounting() {
    let c = count_params_and_flops(&PolicyConfig::default());
    let within = |v: f64, target: f64| (v / target - 1.0).abs() <= 0.01;
    let lstm = c.lstm_flops as f64 / 1e6;
    let total = c.flops_per_pair as f64 / 1e6;
    let mib = c.memory_mib();
    let k8 = c.total_flops(8 * 4) as f64 / 1e6;
    let pass = within(lstm, 1.06) && within(total, 1.10) && within(mib, 2.10) && within(k8, 35.2);
    report(
        "FLOP accounting (±1%)",
        pass,
        &format!("BiLSTM {lstm:.4} M, per pair {total:.4} M, memory {mib:.4} MiB, K=8 N=4 {k8:.2} M"),
    );
    assert!(pass);
}

#[test]
fn gradient_correctness() {
    let dims = GradcheckDims::default();
    let r = gradcheck(&dims, 20, 2024, &GradcheckOptions::default()).unwrap();
    let under = r.trials.iter().any(|t| t.under_budget > 0);
    let over = r.trials.iter().any(|t| t.over_budget > 0);
    let shared = r.trials.iter().all(|t| t.shared_pilots);
    let small = dims.hidden <= 8 && dims.num_ues <= 3 && dims.num_aps <= 3;
    let pass = r.passed() && r.max_rel_err() < 1e-4 && under && over && shared && small;
    let w = r.worst().unwrap();
    report(
        "gradient check (20 trials, rel err < 1e-4)",
        pass,
        &format!(
            "max rel err {:.2e} at {}; both budget branches {}; shared pilots {shared}",
            w.max_rel_err,
            w.worst_path,
            under && over
        ),
    );
    assert!(pass, "{:?}", r.failing_layers());
}

#[test]
fn feasibility_suite() {
    let sim = SimConfig::default();
    let snaps = generate_many(&sim, 11, 10_000).unwrap();
    let p_max = sim.p_max();
    let random = PolicyParams::<f32>::init(&PolicyConfig::default().with_hidden(16), 5);
    let count = |f: &(dyn Fn(&NetworkSnapshot) -> perf::PowerAllocation + Sync)| -> usize {
        snaps
            .par_iter()
            .map(|s| {
                let a = f(s);
                let shape = usize::from(a.rho.len() != s.topology().num_pairs());
                shape + a.violations(s, &p_max, 0.0)
            })
            .sum()
    };
    let mut lines = vec![("epa".to_string(), count(&|s| alloc::epa(s, &sim)))];
    for nu in FPA_GRID {
        lines.push((format!("fpa:{nu}"), count(&|s| alloc::fpa(s, &sim, nu).unwrap())));
    }
    for t in LOZANO_GRID {
        lines.push((format!("lozano:{t}"), count(&|s| alloc::lozano(s, &sim, t).unwrap())));
    }
    lines.push(("random policy".into(), count(&|s| policy::infer(&random, s, &sim, 0).unwrap())));
    let total: usize = lines.iter().map(|l| l.1).sum();
    report(
        "feasibility (10^4 snapshots x 10 allocators)",
        total == 0 && lines.len() == 10,
        &format!("{total} violations over {} allocators", lines.len()),
    );
    assert_eq!(total, 0, "{lines:?}");
}

#[test]
fn degeneracy_identities() {
    let sim = SimConfig::default();
    let snaps = generate_many(&sim, 12, 1000).unwrap();
    let fpa_epa = snaps
        .iter()
        .all(|s| alloc::fpa(s, &sim, 0.0).unwrap().rho == alloc::epa(s, &sim).rho);

    let params = PolicyParams::<f32>::init(&PolicyConfig::default().with_hidden(8), 3);
    let full = [
        FeatureMode::Scalable(Neighborhood::Radius(f64::INFINITY)),
        FeatureMode::Scalable(Neighborhood::TopN(sim.num_aps.max(sim.num_ues))),
    ];
    let features = snaps[..200].iter().all(|s| {
        let g = build_features(s, sim.sigma2_dl(), FeatureMode::Global);
        let a = policy::infer(&params, s, &sim, 0).unwrap();
        full.iter().all(|&m| {
            let mut p = params.clone();
            p.cfg.features = m;
            let f = build_features(s, sim.sigma2_dl(), m);
            f.seqs == g.seqs && f.fallbacks == 0 && policy::infer(&p, s, &sim, 0).unwrap() == a
        })
    });

    let mut rng = stream_rng(77, 0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let k = rng.gen_range(1..=32);
        let t = rng.gen_range(0.5..50.0);
        let se: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..8.0)).collect();
        let u = perf::softmin_utility(&se, t);
        let lo = -perf::min_of(&se);
        let hi = lo + (k as f64).ln() / t;
        worst = worst.max(lo - u).max(u - hi);
    }
    let sandwich = worst <= 1e-12;
    let pass = fpa_epa && features && sandwich;
    report(
        "degeneracy identities",
        pass,
        &format!("fpa(0) = epa {fpa_epa}; full neighborhoods = global {features}; soft-min sandwich worst excess {worst:.1e}"),
    );
    assert!(pass);
}

/// Max-min SE of a 2-AP/2-UE instance with orthogonal pilots, every AP
/// serving both UEs, by exhaustive search over per-AP totals and splits.
fn grid_max_min(beta: &[[f64; 2]; 2], sim: &SimConfig) -> f64 {
    let s2 = sim.sigma2_dl();
    let gamma = beta.map(|r| r.map(|b| sim.tau_p as f64 * sim.p_ul_mw * b * b / (sim.tau_p as f64 * sim.p_ul_mw * b + s2)));
    let m = sim.antennas as f64;
    let pre = (sim.tau_c - sim.tau_p - sim.tau_u) as f64 / sim.tau_c as f64;
    let p = sim.p_dl_max_mw;
    let min_se = |x: [f64; 4]| -> f64 {
        let rho = [[p * x[0] * x[1], p * x[2] * x[3]], [p * x[0] * (1.0 - x[1]), p * x[2] * (1.0 - x[3])]];
        (0..2)
            .map(|k| {
                let num = m * (0..2).map(|l| (rho[k][l] * gamma[k][l]).sqrt()).sum::<f64>().powi(2);
                let den: f64 = (0..2).flat_map(|i| (0..2).map(move |l| (i, l))).map(|(i, l)| rho[i][l] * beta[k][l]).sum();
                pre * (1.0 + num / (den + s2)).log2()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut center = [0.5; 4];
    let mut half = 0.5;
    let mut best = 0.0;
    for pass in 0..12 {
        let n = if pass == 0 { 24 } else { 8 };
        let axis = |c: f64| -> Vec<f64> {
            (0..=n).map(|i| (c - half + 2.0 * half * i as f64 / n as f64).clamp(0.0, 1.0)).collect()
        };
        let axes: Vec<Vec<f64>> = center.iter().map(|&c| axis(c)).collect();
        let mut arg = center;
        for &a in &axes[0] {
            for &b in &axes[1] {
                for &c in &axes[2] {
                    for &d in &axes[3] {
                        let v = min_se([a, b, c, d]);
                        if v > best {
                            best = v;
                            arg = [a, b, c, d];
                        }
                    }
                }
            }
        }
        center = arg;
        half *= if pass == 0 { 2.0 / n as f64 } else { 0.5 };
    }
    best
}

#[test]
fn oracle_validity() {
    let mut sim = SimConfig::default().with_ues(2);
    sim.num_aps = 2;
    sim.n_assoc = 2;
    sim.area_side = 150.0;
    sim.ap_layout = cfpc::config::ApLayout::Uniform;
    let small = generate_many(&sim, 13, 100).unwrap();
    let errs: Vec<f64> = small
        .par_iter()
        .map(|s| {
            let beta = [[s.beta[(0, 0)], s.beta[(0, 1)]], [s.beta[(1, 0)], s.beta[(1, 1)]]];
            let grid = grid_max_min(&beta, &sim);
            let g = perf::compute_gamma(s, &sim);
            let o = mmf_oracle(s, &g, &sim, &MmfOptions::default());
            (o.min_se - grid).abs() / grid
        })
        .collect();
    let worst_small = errs.iter().copied().fold(0.0, f64::max);

    let h = headline();
    let mut methods = vec![EvalMethod::Epa, EvalMethod::Mmf, EvalMethod::Policy];
    methods.extend(FPA_GRID.map(EvalMethod::Fpa));
    methods.extend(LOZANO_GRID.map(EvalMethod::Lozano));
    let res = harness::evaluate(&h.test, &h.sim, &methods, Some(&h.params), &EvalConfig::default()).unwrap();
    let mmf = res.iter().find(|r| r.method == EvalMethod::Mmf).unwrap().min_se();
    let excess = res
        .iter()
        .filter(|r| r.method != EvalMethod::Mmf)
        .flat_map(|r| r.min_se().into_iter().zip(&mmf).map(|(a, b)| a - b).collect::<Vec<_>>())
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = worst_small <= 0.01 && excess <= 1e-3;
    report(
        "oracle validity",
        pass,
        &format!(
            "2x2 worst gap to grid search {:.3}%; largest per-snapshot excess over oracle on {} test snapshots {excess:.2e}",
            100.0 * worst_small,
            h.test.len()
        ),
    );
    assert!(pass);
}

#[test]
fn headline_experiment() {
    let h = headline();
    let tuned = harness::tune(&h.train, &h.sim).unwrap();
    let methods = [
        EvalMethod::Epa,
        EvalMethod::Fpa(tuned.fpa.best),
        EvalMethod::Lozano(tuned.lozano.best),
        EvalMethod::Mmf,
    ];
    let res = harness::evaluate(&h.test, &h.sim, &methods, None, &EvalConfig::default()).unwrap();
    let score = |m: EvalMethod| mean(&res.iter().find(|r| r.method == m).unwrap().min_se());
    let (best_label, best) = methods[..3]
        .iter()
        .map(|&m| (m.label(), score(m)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let mmf = score(EvalMethod::Mmf);
    let pol = mean(&policy_min_se(&h.params, &h.test, &h.sim));
    let pass = pol >= 1.5 * best && pol <= mmf;
    report(
        "headline (policy >= 1.5x best tuned baseline, <= MMF)",
        pass,
        &format!(
            "policy {pol:.4}, best baseline {best_label} {best:.4} (ratio {:.3}), MMF {mmf:.4} (ceiling ratio {:.3})",
            pol / best,
            mmf / best
        ),
    );
    assert!(pass);
}

#[test]
fn generalization_without_retraining() {
    let h = headline();
    let mut baselines = vec![EvalMethod::Epa];
    baselines.extend(FPA_GRID.map(EvalMethod::Fpa));
    baselines.extend(LOZANO_GRID.map(EvalMethod::Lozano));
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [10, 15] {
        let sim = h.sim.clone().with_ues(k);
        let snaps = generate_many(&sim, 40 + k as u64, TEST_COUNT).unwrap();
        let pol = policy_min_se(&h.params, &snaps, &sim);
        let res = harness::evaluate(&snaps, &sim, &baselines, None, &EvalConfig::default()).unwrap();
        let mut margin = f64::INFINITY;
        let mut tight = String::new();
        for r in &res {
            let b = r.min_se();
            for q in [0.1, 0.5, 0.9] {
                let m = harness::quantile(&pol, q) - harness::quantile(&b, q);
                if m < margin {
                    margin = m;
                    tight = format!("{} p{}", r.method.label(), (q * 100.0) as u32);
                }
            }
        }
        pass &= margin >= 0.0;
        parts.push(format!("K={k} policy mean {:.4}, smallest margin {margin:+.4} vs {tight}", mean(&pol)));
    }
    report("generalization at K=10/15 (p10/p50/p90 dominance)", pass, &parts.join("; "));
    assert!(pass);
}
