//! Power allocators: scalable heuristics and the centralized max-min benchmark.

mod mmf;
pub mod socp;

pub use mmf::{interference_free_bound, mmf_oracle, MmfOptions, MmfResult};

use nalgebra::DMatrix;

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::netgen::NetworkSnapshot;
use crate::perf::{self, PowerAllocation};

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(Error::Parameter { name, value, lo, hi })
    }
}

/// Splits every AP budget over its served UEs proportionally to `weight(k, l)`.
fn proportional<W: Fn(usize, usize) -> f64>(snap: &NetworkSnapshot, p_max: f64, weight: W) -> PowerAllocation {
    let topo = snap.topology();
    let mut alloc = PowerAllocation::zeros(snap);
    for l in 0..snap.num_aps() {
        let pairs = topo.ap_pairs(l);
        let w: Vec<f64> = pairs.iter().map(|&p| weight(topo.pair(p).0, l)).collect();
        let total: f64 = w.iter().sum();
        for (&p, wi) in pairs.iter().zip(&w) {
            alloc.rho[p] = p_max * wi / total;
        }
    }
    alloc.fit_budget(snap, p_max);
    alloc
}

/// Equal power allocation.
pub fn epa(snap: &NetworkSnapshot, cfg: &SimConfig) -> PowerAllocation {
    proportional(snap, cfg.p_dl_max_mw, |_, _| 1.0)
}

/// Fractional power allocation with exponent `nu ∈ [-1, 1]`.
pub fn fpa(snap: &NetworkSnapshot, cfg: &SimConfig, nu: f64) -> Result<PowerAllocation> {
    check_range("nu", nu, -1.0, 1.0)?;
    Ok(proportional(snap, cfg.p_dl_max_mw, |k, l| snap.beta[(k, l)].powf(nu)))
}

/// Lozano-style allocation with exponent `theta ∈ [0, 1]`, restricted to the
/// user-centric serving sets.
pub fn lozano(snap: &NetworkSnapshot, cfg: &SimConfig, theta: f64) -> Result<PowerAllocation> {
    check_range("theta", theta, 0.0, 1.0)?;
    let strength: Vec<f64> = (0..snap.num_ues())
        .map(|k| snap.serving[k].iter().map(|&j| snap.beta[(k, j)]).sum())
        .collect();
    Ok(proportional(snap, cfg.p_dl_max_mw, |k, l| {
        snap.beta[(k, l)] / strength[k].powf(theta)
    }))
}

/// A named allocation method as exposed on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Epa,
    Fpa { nu: f64 },
    Lozano { theta: f64 },
    Mmf(MmfOptions),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Epa => "epa",
            Method::Fpa { .. } => "fpa",
            Method::Lozano { .. } => "lozano",
            Method::Mmf(_) => "mmf",
        }
    }

    pub fn allocate(&self, snap: &NetworkSnapshot, gamma: &DMatrix<f64>, cfg: &SimConfig) -> Result<PowerAllocation> {
        match self {
            Method::Epa => Ok(epa(snap, cfg)),
            Method::Fpa { nu } => fpa(snap, cfg, *nu),
            Method::Lozano { theta } => lozano(snap, cfg, *theta),
            Method::Mmf(opts) => Ok(mmf_oracle(snap, gamma, cfg, opts).alloc),
        }
    }
}

/// A snapshot paired with its precomputed γ.
pub struct Prepared<'a> {
    pub snap: &'a NetworkSnapshot,
    pub gamma: DMatrix<f64>,
}

pub fn prepare<'a>(snaps: &'a [NetworkSnapshot], cfg: &SimConfig) -> Vec<Prepared<'a>> {
    snaps
        .iter()
        .map(|snap| Prepared {
            snap,
            gamma: perf::compute_gamma(snap, cfg),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TuneResult {
    pub best: f64,
    /// `(parameter, mean min-SE)` for every grid value, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Grid search for the parameter maximizing the mean min-SE; ties go to the
/// smaller parameter.
pub fn tune_baseline<F>(data: &[Prepared], cfg: &SimConfig, grid: &[f64], allocator: F) -> Result<TuneResult>
where
    F: Fn(&NetworkSnapshot, f64) -> Result<PowerAllocation> + Sync,
{
    use rayon::prelude::*;
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &v in grid {
        let mins = data
            .par_iter()
            .map(|d| {
                let a = allocator(d.snap, v)?;
                Ok(perf::min_of(&perf::evaluate_se(d.snap, &d.gamma, &a, cfg)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = if mins.is_empty() { 0.0 } else { mins.iter().sum::<f64>() / mins.len() as f64 };
        scores.push((v, mean));
    }
    let mut best = scores[0];
    for &(v, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && v < best.0) {
            best = (v, s);
        }
    }
    Ok(TuneResult { best: best.0, scores })
}

pub const FPA_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
pub const LOZANO_GRID: [f64; 3] = [0.0, 0.5, 1.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ApLayout;
    use crate::netgen::{generate, stream_rng};

    fn two_ue_one_ap(beta: [f64; 2]) -> NetworkSnapshot {
        NetworkSnapshot::from_parts(
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![[5.0, 5.0]],
            DMatrix::from_row_slice(2, 1, &beta),
            vec![0, 1],
            vec![vec![0], vec![0]],
            ApLayout::Uniform,
        )
    }

    fn cfg_small() -> SimConfig {
        let mut c = SimConfig::default().with_ues(2);
        c.num_aps = 1;
        c.n_assoc = 1;
        c
    }

    #[test]
    fn epa_splits_evenly() {
        let s = two_ue_one_ap([3.0, 1.0]);
        assert_eq!(epa(&s, &cfg_small()).rho, vec![100.0, 100.0]);
        let single = NetworkSnapshot::from_parts(
            vec![[0.0, 0.0]],
            vec![[1.0, 1.0]],
            DMatrix::from_element(1, 1, 1.0),
            vec![0],
            vec![vec![0]],
            ApLayout::Uniform,
        );
        assert_eq!(epa(&single, &cfg_small()).rho, vec![200.0]);
    }

    #[test]
    fn fpa_hand_values() {
        let s = two_ue_one_ap([3.0, 1.0]);
        assert_eq!(fpa(&s, &cfg_small(), 1.0).unwrap().rho, vec![150.0, 50.0]);
        assert_eq!(fpa(&s, &cfg_small(), 0.0).unwrap(), epa(&s, &cfg_small()));
        assert!(matches!(fpa(&s, &cfg_small(), 1.5), Err(Error::Parameter { .. })));
    }

    #[test]
    fn fpa_zero_is_epa_on_generated_data() {
        let cfg = SimConfig::default();
        for i in 0..20 {
            let s = generate(&cfg, &mut stream_rng(1, i)).unwrap();
            assert_eq!(fpa(&s, &cfg, 0.0).unwrap(), epa(&s, &cfg));
        }
    }

    #[test]
    fn saturates_every_serving_ap() {
        let cfg = SimConfig::default();
        let s = generate(&cfg, &mut stream_rng(2, 0)).unwrap();
        for a in [epa(&s, &cfg), fpa(&s, &cfg, 0.5).unwrap(), lozano(&s, &cfg, 0.5).unwrap()] {
            for (l, sum) in a.ap_sums(&s).into_iter().enumerate() {
                if s.served[l].is_empty() {
                    assert_eq!(sum, 0.0);
                } else {
                    assert!((sum - 200.0).abs() < 1e-10);
                }
            }
            assert!(a.is_feasible(&s, &cfg.p_max()));
        }
    }

    #[test]
    fn lozano_theta_zero_is_fpa_one() {
        // all APs serve all UEs
        let mut cfg = SimConfig::default().with_ues(3);
        cfg.num_aps = 4;
        cfg.n_assoc = 4;
        let s = generate(&cfg, &mut stream_rng(3, 0)).unwrap();
        let a = lozano(&s, &cfg, 0.0).unwrap();
        let b = fpa(&s, &cfg, 1.0).unwrap();
        for (x, y) in a.rho.iter().zip(&b.rho) {
            assert!((x - y).abs() <= 1e-12 * y);
        }
        assert!(lozano(&s, &cfg, -0.1).is_err());
    }

    #[test]
    fn lozano_single_ue_gets_full_budget() {
        let mut cfg = SimConfig::default().with_ues(1);
        cfg.num_aps = 4;
        cfg.n_assoc = 3;
        let s = generate(&cfg, &mut stream_rng(4, 0)).unwrap();
        assert_eq!(lozano(&s, &cfg, 0.7).unwrap().rho, vec![200.0; 3]);
    }

    #[test]
    fn lozano_hand_evaluation() {
        // 2 UEs x 2 APs, everyone served by everyone.
        let beta = [[4.0, 1.0], [2.0, 3.0]];
        let snap = NetworkSnapshot::from_parts(
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![[5.0, 5.0], [9.0, 9.0]],
            DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 2.0, 3.0]),
            vec![0, 1],
            vec![vec![0, 1], vec![1, 0]],
            ApLayout::Uniform,
        );
        let mut cfg = SimConfig::default().with_ues(2);
        cfg.num_aps = 2;
        cfg.n_assoc = 2;
        let theta = 0.5;
        let a = lozano(&snap, &cfg, theta).unwrap();
        let w = |k: usize, l: usize| beta[k][l] / (beta[k][0] + beta[k][1] as f64).powf(theta);
        for l in 0..2 {
            for k in 0..2 {
                let expect = 200.0 * w(k, l) / (w(0, l) + w(1, l));
                let got = a.get(&snap, k, l).unwrap();
                assert!((got - expect).abs() < 1e-12, "{k},{l}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn tune_picks_grid_value() {
        let cfg = SimConfig::default();
        let snaps: Vec<_> = (0..5).map(|i| generate(&cfg, &mut stream_rng(5, i)).unwrap()).collect();
        let data = prepare(&snaps, &cfg);
        let r = tune_baseline(&data, &cfg, &[0.0], |s, nu| fpa(s, &cfg, nu)).unwrap();
        assert_eq!(r.best, 0.0);
        // Zero power everywhere except at nu = 0.5 makes 0.5 dominate pointwise.
        let r = tune_baseline(&data, &cfg, &[-1.0, 0.5, 1.0], |s, nu| {
            let mut a = fpa(s, &cfg, nu)?;
            if nu != 0.5 {
                a.rho.iter_mut().for_each(|r| *r *= 1e-6);
            }
            Ok(a)
        })
        .unwrap();
        assert_eq!(r.best, 0.5);
        assert!(tune_baseline(&data, &cfg, &[], |s, nu| fpa(s, &cfg, nu)).is_err());
    }

    #[test]
    fn tune_breaks_ties_low() {
        let cfg = SimConfig::default();
        let snaps: Vec<_> = (0..3).map(|i| generate(&cfg, &mut stream_rng(6, i)).unwrap()).collect();
        let data = prepare(&snaps, &cfg);
        let r = tune_baseline(&data, &cfg, &[1.0, 0.0, -1.0], |s, _| Ok(epa(s, &cfg))).unwrap();
        assert_eq!(r.best, -1.0);
    }
}
