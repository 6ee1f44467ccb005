//! Central finite-difference check of the reverse-mode gradient.

use nalgebra::DMatrix;
use rand::Rng;

use super::tape::{Fault, Tape};
use crate::config::SimConfig;
use crate::error::Result;
use crate::netgen::{self, stream_rng, NetworkSnapshot};
use crate::perf;
use crate::policy::{ue_orders, PolicyConfig, PolicyParams};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckDims {
    pub hidden: usize,
    pub head_dims: Vec<usize>,
    pub num_aps: usize,
    pub num_ues: usize,
    pub n_assoc: usize,
    /// Fewer pilots than UEs, so some UEs share one.
    pub tau_p: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        Self {
            hidden: 4,
            head_dims: vec![6, 4],
            num_aps: 3,
            num_ues: 3,
            n_assoc: 2,
            tau_p: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub temperature: f64,
    /// Instances with a latent sum within this fraction of the budget, or a
    /// SELU input within this distance of zero, are redrawn.
    pub kink_margin: f64,
    pub clamp: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            floor: 1e-6,
            temperature: 10.0,
            kink_margin: 1e-2,
            clamp: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialReport {
    pub max_rel_err: f64,
    pub worst_path: String,
    /// APs below and above their budget before normalization.
    pub under_budget: usize,
    pub over_budget: usize,
    pub shared_pilots: bool,
    /// Parameters whose error exceeded the tolerance.
    pub failing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub trials: Vec<TrialReport>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TrialReport> {
        self.trials.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.failing.is_empty())
    }

    /// Segment names (`head.1.w`, `lstm_bwd.w_hh`, ...) with any failing entry.
    pub fn failing_layers(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .trials
            .iter()
            .flat_map(|t| &t.failing)
            .map(|p| p.split('[').next().unwrap_or(p).to_string())
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

pub struct Instance {
    pub sim: SimConfig,
    pub snap: NetworkSnapshot,
    pub gamma: DMatrix<f64>,
    pub params: PolicyParams<f64>,
    pub orders: Vec<Vec<usize>>,
}

impl Instance {
    pub fn loss(&self, params: &PolicyParams<f64>, temperature: f64) -> Result<f64> {
        Ok(Tape::record(params, &self.snap, &self.gamma, &self.sim, &self.orders, temperature, 1)?.loss)
    }
}

/// Draws a compact random instance. Odd trials push the output bias down so
/// every AP stays under budget; even trials saturate.
pub fn random_instance(dims: &GradcheckDims, opts: &GradcheckOptions, seed: u64, trial: u64) -> Result<Instance> {
    let mut sim = SimConfig::default();
    sim.num_aps = dims.num_aps;
    sim.num_ues = dims.num_ues;
    sim.n_assoc = dims.n_assoc;
    sim.tau_p = dims.num_ues;
    sim.area_side = 120.0;
    sim.ap_layout = crate::config::ApLayout::Uniform;
    let pcfg = PolicyConfig {
        hidden: dims.hidden,
        head_dims: dims.head_dims.clone(),
        clamp: opts.clamp,
        ..PolicyConfig::default()
    };
    let bias = if trial % 2 == 1 { -5.0 } else { 1.0 };
    for attempt in 0.. {
        let mut rng = stream_rng(seed, (trial << 16) + attempt);
        let mut snap = netgen::generate(&sim, &mut rng)?;
        let pilots: Vec<usize> = (0..dims.num_ues).map(|k| k % dims.tau_p).collect();
        snap.set_pilots(pilots);
        let mut local = sim.clone();
        local.tau_p = dims.tau_p;
        let gamma = perf::compute_gamma(&snap, &local);
        let mut params = PolicyParams::<f64>::init(&pcfg, rng.gen());
        let b = params.layout.segment(&format!("head.{}.b", dims.head_dims.len())).unwrap().offset;
        params.data[b] = bias + rng.gen_range(-0.5..0.5);
        let orders = ue_orders(&snap, &mut rng);
        let passes = crate::policy::run_aps(&params, &snap, &local, &orders)?;
        let p = local.p_dl_max_mw;
        let near_kink = passes.iter().any(|a| (a.latent_sum - p).abs() < opts.kink_margin * p);
        let near_clamp = passes
            .iter()
            .flat_map(|a| a.trace.s.iter().flatten())
            .any(|s| (s.abs() - opts.clamp).abs() < 1e-2);
        let layers = dims.head_dims.len();
        let near_selu = passes
            .iter()
            .flat_map(|a| a.trace.head_pre[..layers].iter().flatten().flatten())
            .any(|z| z.abs() < opts.kink_margin);
        if !near_kink && !near_clamp && !near_selu {
            return Ok(Instance {
                sim: local,
                snap,
                gamma,
                params,
                orders,
            });
        }
    }
    unreachable!()
}

/// Compares the tape gradient with central differences on every parameter.
pub fn check_instance(inst: &Instance, opts: &GradcheckOptions, fault: Option<Fault>) -> Result<TrialReport> {
    let tape = Tape::record(&inst.params, &inst.snap, &inst.gamma, &inst.sim, &inst.orders, opts.temperature, 1)?;
    let analytic = tape.backward_with(fault);
    let passes = crate::policy::run_aps(&inst.params, &inst.snap, &inst.sim, &inst.orders)?;
    let p = inst.sim.p_dl_max_mw;
    let mut probe = inst.params.clone();
    let mut worst = (0.0f64, 0usize);
    let mut failing = Vec::new();
    for i in 0..probe.num_params() {
        let x = probe.data[i];
        probe.data[i] = x + opts.step;
        let up = inst.loss(&probe, opts.temperature)?;
        probe.data[i] = x - opts.step;
        let down = inst.loss(&probe, opts.temperature)?;
        probe.data[i] = x;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if err > worst.0 {
            worst = (err, i);
        }
        if err >= opts.tol {
            failing.push(inst.params.layout.path(i));
        }
    }
    Ok(TrialReport {
        max_rel_err: worst.0,
        worst_path: inst.params.layout.path(worst.1),
        under_budget: passes.iter().filter(|a| a.latent_sum < p).count(),
        over_budget: passes.iter().filter(|a| a.latent_sum > p).count(),
        shared_pilots: inst.snap.pilot_sets.iter().any(|s| s.len() > 1),
        failing,
    })
}

pub fn gradcheck(dims: &GradcheckDims, trials: usize, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    gradcheck_with_fault(dims, trials, seed, opts, None)
}

pub fn gradcheck_with_fault(
    dims: &GradcheckDims,
    trials: usize,
    seed: u64,
    opts: &GradcheckOptions,
    fault: Option<Fault>,
) -> Result<GradcheckReport> {
    let trials = (0..trials as u64)
        .map(|t| check_instance(&random_instance(dims, opts, seed, t)?, opts, fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { trials, tol: opts.tol })
}
