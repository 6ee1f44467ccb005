//! Network snapshot generation: geometry, large-scale fading, pilots and
//! user-centric AP-UE association.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ApLayout, SimConfig, PATHLOSS_INTERCEPT_DB};
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Deterministic RNG for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Active AP-UE links of a snapshot in a fixed canonical order: grouped by UE,
/// within a UE in serving order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Topology {
    pairs: Vec<(usize, usize)>,
    ue_ranges: Vec<Range<usize>>,
    ap_pairs: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(serving: &[Vec<usize>], num_aps: usize) -> Self {
        let mut pairs = Vec::new();
        let mut ue_ranges = Vec::with_capacity(serving.len());
        let mut ap_pairs = vec![Vec::new(); num_aps];
        for (k, aps) in serving.iter().enumerate() {
            let start = pairs.len();
            for &l in aps {
                ap_pairs[l].push(pairs.len());
                pairs.push((k, l));
            }
            ue_ranges.push(start..pairs.len());
        }
        Self {
            pairs,
            ue_ranges,
            ap_pairs,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// `(ue, ap)` of pair `p`.
    pub fn pair(&self, p: usize) -> (usize, usize) {
        self.pairs[p]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Pair ids of UE `k`, ordered like its serving set.
    pub fn ue_pairs(&self, k: usize) -> Range<usize> {
        self.ue_ranges[k].clone()
    }

    /// Pair ids of AP `l`, ordered by UE index.
    pub fn ap_pairs(&self, l: usize) -> &[usize] {
        &self.ap_pairs[l]
    }

    pub fn find(&self, k: usize, l: usize) -> Option<usize> {
        self.ue_pairs(k).find(|&p| self.pairs[p].1 == l)
    }
}

/// One realization of the deployment.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSnapshot {
    pub ue_pos: Vec<Point>,
    pub ap_pos: Vec<Point>,
    /// K x L large-scale gains, linear scale.
    pub beta: DMatrix<f64>,
    pub pilot_of: Vec<usize>,
    pub pilot_sets: Vec<Vec<usize>>,
    /// Serving APs of every UE, strongest first.
    pub serving: Vec<Vec<usize>>,
    /// UEs served by every AP, ascending.
    pub served: Vec<Vec<usize>>,
    pub master_ap: Vec<usize>,
    pub layout: ApLayout,
    topology: Topology,
}

impl NetworkSnapshot {
    /// Assembles a snapshot from its defining parts and derives the inverse maps.
    pub fn from_parts(
        ue_pos: Vec<Point>,
        ap_pos: Vec<Point>,
        beta: DMatrix<f64>,
        pilot_of: Vec<usize>,
        serving: Vec<Vec<usize>>,
        layout: ApLayout,
    ) -> Self {
        let (k, l) = beta.shape();
        assert_eq!(serving.len(), k, "serving sets must cover every UE");
        assert_eq!(pilot_of.len(), k, "every UE needs a pilot");
        let mut served = vec![Vec::new(); l];
        for (ue, aps) in serving.iter().enumerate() {
            for &ap in aps {
                served[ap].push(ue);
            }
        }
        let master_ap = serving
            .iter()
            .map(|aps| *aps.first().expect("each UE needs at least one serving AP"))
            .collect();
        let topology = Topology::new(&serving, l);
        Self {
            pilot_sets: pilot_sets(&pilot_of),
            ue_pos,
            ap_pos,
            beta,
            pilot_of,
            serving,
            served,
            master_ap,
            layout,
            topology,
        }
    }

    pub fn num_ues(&self) -> usize {
        self.beta.nrows()
    }

    pub fn num_aps(&self) -> usize {
        self.beta.ncols()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Replaces the pilot assignment; lets tests exercise pilot sharing.
    pub fn set_pilots(&mut self, pilot_of: Vec<usize>) {
        assert_eq!(pilot_of.len(), self.num_ues());
        self.pilot_sets = pilot_sets(&pilot_of);
        self.pilot_of = pilot_of;
    }
}

/// UE positions uniform over the square; AP positions per `cfg.ap_layout`.
/// Returns the layout actually used.
pub fn sample_positions<R: Rng + ?Sized>(
    cfg: &SimConfig,
    rng: &mut R,
) -> (Vec<Point>, Vec<Point>, ApLayout) {
    let ue_pos = sample_ues(cfg.num_ues, cfg.area_side, rng);
    let (ap_pos, layout) = ap_positions(cfg, rng);
    (ue_pos, ap_pos, layout)
}

pub fn sample_ues<R: Rng + ?Sized>(count: usize, side: f64, rng: &mut R) -> Vec<Point> {
    (0..count)
        .map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side)])
        .collect()
}

pub fn ap_positions<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> (Vec<Point>, ApLayout) {
    let side = (cfg.num_aps as f64).sqrt().round() as usize;
    if cfg.ap_layout == ApLayout::Grid && side * side == cfg.num_aps {
        let spacing = cfg.area_side / side as f64;
        let pos = (0..cfg.num_aps)
            .map(|l| {
                let (row, col) = (l / side, l % side);
                [
                    spacing * (col as f64 + 0.5),
                    spacing * (row as f64 + 0.5),
                ]
            })
            .collect();
        (pos, ApLayout::Grid)
    } else {
        (sample_ues(cfg.num_aps, cfg.area_side, rng), ApLayout::Uniform)
    }
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance-dependent pathloss in dB, no shadowing.
pub fn pathloss_db(d3d_m: f64, exponent: f64) -> f64 {
    PATHLOSS_INTERCEPT_DB - 10.0 * exponent * d3d_m.log10()
}

/// Shadow fading F (dB), K x L, correlated across UEs and independent across APs.
///
/// Exactly co-located UEs share one realization.
pub fn shadowing<R: Rng + ?Sized>(cfg: &SimConfig, ue_pos: &[Point], num_aps: usize, rng: &mut R) -> DMatrix<f64> {
    let k = ue_pos.len();
    if !cfg.shadowing || cfg.shadow_sigma_db == 0.0 || k == 0 {
        return DMatrix::zeros(k, num_aps);
    }
    // Collapse duplicates so the covariance of distinct sites stays regular.
    let mut sites: Vec<Point> = Vec::new();
    let site_of: Vec<usize> = ue_pos
        .iter()
        .map(|p| match sites.iter().position(|s| s == p) {
            Some(i) => i,
            None => {
                sites.push(*p);
                sites.len() - 1
            }
        })
        .collect();
    let n = sites.len();
    let corr = DMatrix::from_fn(n, n, |i, j| {
        2f64.powf(-dist(&sites[i], &sites[j]) / cfg.shadow_decorr_m)
    });
    let chol = cholesky_with_jitter(corr);
    let mut f = DMatrix::zeros(k, num_aps);
    for l in 0..num_aps {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let site_f = &chol * z;
        for ue in 0..k {
            f[(ue, l)] = cfg.shadow_sigma_db * site_f[site_of[ue]];
        }
    }
    f
}

fn cholesky_with_jitter(mut corr: DMatrix<f64>) -> DMatrix<f64> {
    let n = corr.nrows();
    let mut jitter = 1e-9;
    loop {
        if let Some(ch) = corr.clone().cholesky() {
            return ch.l();
        }
        log::debug!("shadowing covariance not positive definite, adding {jitter:e} I");
        for i in 0..n {
            corr[(i, i)] += jitter;
        }
        jitter *= 10.0;
    }
}

/// Linear-scale large-scale gains for the given geometry.
pub fn compute_beta<R: Rng + ?Sized>(
    cfg: &SimConfig,
    ue_pos: &[Point],
    ap_pos: &[Point],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    for (k, u) in ue_pos.iter().enumerate() {
        if let Some(l) = ap_pos.iter().position(|a| dist(u, a) == 0.0) {
            return Err(Error::ZeroDistance { ue: k, ap: l });
        }
    }
    let f = shadowing(cfg, ue_pos, ap_pos.len(), rng);
    Ok(DMatrix::from_fn(ue_pos.len(), ap_pos.len(), |k, l| {
        let d2 = dist(&ue_pos[k], &ap_pos[l]);
        let d3 = (d2 * d2 + cfg.height_diff_m * cfg.height_diff_m).sqrt();
        10f64.powf((pathloss_db(d3, cfg.pl_exponent) + f[(k, l)]) / 10.0)
    }))
}

/// Orthogonal pilots, one per UE.
pub fn assign_pilots(num_ues: usize, tau_p: usize) -> Result<Vec<usize>> {
    if tau_p < num_ues {
        return Err(Error::PilotReuse { tau_p, num_ues });
    }
    Ok((0..num_ues).collect())
}

/// P_k: every UE sharing UE k's pilot, k included, ascending.
pub fn pilot_sets(pilot_of: &[usize]) -> Vec<Vec<usize>> {
    pilot_of
        .iter()
        .map(|&p| (0..pilot_of.len()).filter(|&i| pilot_of[i] == p).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Association {
    pub serving: Vec<Vec<usize>>,
    pub served: Vec<Vec<usize>>,
    pub master_ap: Vec<usize>,
}

/// Top-`n_assoc` APs by gain for every UE; ties go to the lower AP index.
pub fn associate(beta: &DMatrix<f64>, n_assoc: usize) -> Association {
    let (k, l) = beta.shape();
    assert!(n_assoc <= l, "n_assoc = {n_assoc} exceeds L = {l}");
    let serving: Vec<Vec<usize>> = (0..k)
        .map(|ue| {
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&a, &b| beta[(ue, b)].total_cmp(&beta[(ue, a)]).then(a.cmp(&b)));
            order.truncate(n_assoc);
            order
        })
        .collect();
    let mut served = vec![Vec::new(); l];
    for (ue, aps) in serving.iter().enumerate() {
        for &ap in aps {
            served[ap].push(ue);
        }
    }
    let master_ap = serving.iter().map(|s| s[0]).collect();
    Association {
        serving,
        served,
        master_ap,
    }
}

/// Builds a snapshot for fixed positions, drawing fresh shadowing from `rng`.
pub fn snapshot_from_positions<R: Rng + ?Sized>(
    cfg: &SimConfig,
    ue_pos: Vec<Point>,
    ap_pos: Vec<Point>,
    layout: ApLayout,
    rng: &mut R,
) -> Result<NetworkSnapshot> {
    let beta = compute_beta(cfg, &ue_pos, &ap_pos, rng)?;
    let pilot_of = assign_pilots(ue_pos.len(), cfg.tau_p)?;
    let assoc = associate(&beta, cfg.n_assoc);
    Ok(NetworkSnapshot::from_parts(
        ue_pos,
        ap_pos,
        beta,
        pilot_of,
        assoc.serving,
        layout,
    ))
}

/// Draws a complete snapshot. A UE landing exactly on an AP is redrawn.
pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<NetworkSnapshot> {
    cfg.validate()?;
    assign_pilots(cfg.num_ues, cfg.tau_p)?;
    let (mut ue_pos, ap_pos, layout) = sample_positions(cfg, rng);
    loop {
        match compute_beta(cfg, &ue_pos, &ap_pos, rng) {
            Ok(beta) => {
                let assoc = associate(&beta, cfg.n_assoc);
                let pilot_of = assign_pilots(cfg.num_ues, cfg.tau_p)?;
                return Ok(NetworkSnapshot::from_parts(
                    ue_pos,
                    ap_pos,
                    beta,
                    pilot_of,
                    assoc.serving,
                    layout,
                ));
            }
            Err(Error::ZeroDistance { ue, .. }) => {
                ue_pos[ue] = sample_ues(1, cfg.area_side, rng)[0];
            }
            Err(e) => return Err(e),
        }
    }
}

/// `count` snapshots, snapshot `i` drawn from stream `i` of `seed`.
pub fn generate_many(cfg: &SimConfig, seed: u64, count: usize) -> Result<Vec<NetworkSnapshot>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate(cfg, &mut stream_rng(seed, i as u64)))
        .collect()
}
