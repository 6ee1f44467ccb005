//! Centralized max-min-fairness benchmark.
//!
//! Bisection on a common SINR target `t`. For fixed `t` the constraint set
//! `SINR_k ≥ t ∀k` together with the per-AP budgets is a system of
//! second-order cones in `x_p = √(ρ_p / P_ℓ)`:
//!
//! ```text
//! √M Σ_ℓ √(P_ℓ γ_kℓ) x_kℓ / σ  ≥  √t ‖ [ √(P_ℓ β_kℓ) x_iℓ / σ ]_(i,ℓ),
//!                                       [ √M Σ_ℓ √(P_ℓ γ_kℓ) x_iℓ / σ ]_(i ∈ P_k∖k),
//!                                       1 ‖
//! ```
//!
//! with `x_ℓ ≥ 0, ‖x_ℓ‖ ≤ 1` per AP.

use nalgebra::DMatrix;

use super::socp::{ConeSystem, Csr, SolverOptions, Verdict};
use crate::config::SimConfig;
use crate::netgen::NetworkSnapshot;
use crate::perf::{self, PowerAllocation};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmfOptions {
    /// Bisection stops once the bracket is narrower than this (linear SINR).
    pub tol_bisect: f64,
    pub max_outer: usize,
    pub solver: SolverOptions,
}

impl Default for MmfOptions {
    fn default() -> Self {
        Self {
            tol_bisect: 1e-3,
            max_outer: 60,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MmfResult {
    pub alloc: PowerAllocation,
    /// Largest common SINR target certified feasible; equals the true min-SINR of `alloc`.
    pub sinr_target: f64,
    /// Smallest target proven (or assumed, if `converged` is false) infeasible.
    pub upper_bound: f64,
    pub min_se: f64,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub feasibility_residual: f64,
    /// False when some feasibility subproblem hit its iteration cap undecided.
    pub converged: bool,
}

/// `min_k M (Σ_ℓ∈L_k √(P_ℓ γ_kℓ))² / σ²`: no UE can beat its own noise-limited SINR.
pub fn interference_free_bound(snap: &NetworkSnapshot, gamma: &DMatrix<f64>, cfg: &SimConfig) -> f64 {
    let p = cfg.p_dl_max_mw;
    (0..snap.num_ues())
        .map(|k| {
            let a: f64 = snap.serving[k].iter().map(|&l| (p * gamma[(k, l)]).sqrt()).sum();
            cfg.antennas as f64 * a * a / cfg.sigma2_dl()
        })
        .fold(f64::INFINITY, f64::min)
}

fn cone_system(snap: &NetworkSnapshot, gamma: &DMatrix<f64>, cfg: &SimConfig, t: f64) -> ConeSystem {
    let topo = snap.topology();
    let n = topo.num_pairs();
    let m = cfg.antennas as f64;
    let sigma = cfg.sigma2_dl().sqrt();
    let p = cfg.p_dl_max_mw;
    let st = t.sqrt();
    let mut a = Csr::new(n);
    let mut c = Vec::new();
    let mut cones = Vec::with_capacity(snap.num_ues());
    for k in 0..snap.num_ues() {
        let start = a.nrows();
        let useful = |i: usize, scale: f64| {
            topo.ue_pairs(i)
                .map(move |q| (q, scale * (p * gamma[(k, topo.pair(q).1)]).sqrt() / sigma))
                .collect::<Vec<_>>()
        };
        a.push_row(useful(k, m.sqrt()));
        c.push(0.0);
        for (q, &(_, l)) in topo.pairs().iter().enumerate() {
            a.push_row([(q, st * (p * snap.beta[(k, l)]).sqrt() / sigma)]);
            c.push(0.0);
        }
        for &i in snap.pilot_sets[k].iter().filter(|&&i| i != k) {
            a.push_row(useful(i, st * m.sqrt()));
            c.push(0.0);
        }
        a.push_row([]);
        c.push(st);
        cones.push(start..a.nrows());
    }
    let var_blocks = (0..snap.num_aps())
        .map(|l| topo.ap_pairs(l).to_vec())
        .filter(|b| !b.is_empty())
        .collect();
    ConeSystem {
        a,
        c,
        cones,
        var_blocks,
    }
}

fn to_alloc(x: &[f64], p: f64) -> PowerAllocation {
    PowerAllocation {
        rho: x.iter().map(|v| p * v * v).collect(),
    }
}

fn min_sinr(snap: &NetworkSnapshot, gamma: &DMatrix<f64>, a: &PowerAllocation, cfg: &SimConfig) -> f64 {
    perf::min_of(&perf::compute_sinr(snap, gamma, a, cfg))
}

/// Max-min SINR allocation by bisection over cone feasibility problems.
///
/// The returned allocation is always feasible; its min-SINR is `sinr_target`.
pub fn mmf_oracle(snap: &NetworkSnapshot, gamma: &DMatrix<f64>, cfg: &SimConfig, opts: &MmfOptions) -> MmfResult {
    assert!(opts.tol_bisect > 0.0, "bisection tolerance must be positive");
    let p = cfg.p_dl_max_mw;
    let mut best = super::epa(snap, cfg);
    let mut lo = min_sinr(snap, gamma, &best, cfg);
    let mut x_best: Vec<f64> = best.rho.iter().map(|r| (r / p).sqrt()).collect();
    let mut hi = interference_free_bound(snap, gamma, cfg).max(lo);
    let mut outer = 0;
    let mut inner = 0;
    let mut converged = true;
    let mut residual = 0.0;

    while hi - lo > opts.tol_bisect && outer < opts.max_outer {
        outer += 1;
        let t = 0.5 * (lo + hi);
        let sys = cone_system(snap, gamma, cfg, t);
        let rep = sys.solve(&x_best, &opts.solver);
        inner += rep.iterations;
        match rep.verdict {
            Verdict::Feasible { x, residual: r } => {
                let cand = to_alloc(&x, p);
                let s = min_sinr(snap, gamma, &cand, cfg);
                if s > lo {
                    lo = s;
                    best = cand;
                    x_best = x;
                    residual = r;
                } else {
                    converged = false;
                    hi = t;
                }
            }
            Verdict::Infeasible => hi = t,
            Verdict::Undecided { .. } => {
                log::debug!("feasibility at t = {t} undecided after {} iterations", rep.iterations);
                converged = false;
                hi = t;
            }
        }
    }
    if hi - lo > opts.tol_bisect {
        converged = false;
    }
    let min_se = perf::min_of(&perf::evaluate_se(snap, gamma, &best, cfg));
    MmfResult {
        alloc: best,
        sinr_target: lo,
        upper_bound: hi,
        min_se,
        iterations: outer,
        inner_iterations: inner,
        feasibility_residual: residual,
        converged,
    }
}
