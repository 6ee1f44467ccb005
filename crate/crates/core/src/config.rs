//! Physical and protocol constants of a simulated deployment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pathloss at the 1 m reference distance, dB.
pub const PATHLOSS_INTERCEPT_DB: f64 = -30.5;

/// How AP positions are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ApLayout {
    /// Regular sqrt(L) x sqrt(L) grid when L is a perfect square, uniform otherwise.
    #[default]
    Grid,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Side of the square deployment area, m.
    pub area_side: f64,
    pub num_aps: usize,
    pub num_ues: usize,
    pub antennas: usize,
    /// Serving APs per UE.
    pub n_assoc: usize,
    pub tau_c: usize,
    pub tau_p: usize,
    pub tau_u: usize,
    /// Uplink pilot power per UE, mW.
    pub p_ul_mw: f64,
    /// Downlink budget per AP, mW.
    pub p_dl_max_mw: f64,
    pub noise_dbm: f64,
    pub carrier_ghz: f64,
    pub pl_exponent: f64,
    pub height_diff_m: f64,
    pub shadow_sigma_db: f64,
    pub shadow_decorr_m: f64,
    /// Disables shadow fading altogether when false.
    pub shadowing: bool,
    pub ap_layout: ApLayout,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            area_side: 500.0,
            num_aps: 16,
            num_ues: 8,
            antennas: 4,
            n_assoc: 4,
            tau_c: 200,
            tau_p: 8,
            tau_u: 0,
            p_ul_mw: 100.0,
            p_dl_max_mw: 200.0,
            noise_dbm: -94.0,
            carrier_ghz: 2.0,
            pl_exponent: 3.67,
            height_diff_m: 10.0,
            shadow_sigma_db: 4.0,
            shadow_decorr_m: 9.0,
            shadowing: true,
            ap_layout: ApLayout::Grid,
            rng_seed: 1,
        }
    }
}

impl SimConfig {
    /// Sets K and keeps pilots orthogonal (tau_p = K).
    pub fn with_ues(mut self, num_ues: usize) -> Self {
        self.num_ues = num_ues;
        self.tau_p = num_ues;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_aps == 0 || self.num_ues == 0 || self.antennas == 0 {
            return fail("L, K and M must be positive".into());
        }
        if self.n_assoc == 0 || self.n_assoc > self.num_aps {
            return fail(format!(
                "n_assoc = {} must lie in 1..={}",
                self.n_assoc, self.num_aps
            ));
        }
        if self.tau_p == 0 || self.tau_p + self.tau_u > self.tau_c {
            return fail(format!(
                "coherence block split tau_p = {} + tau_u = {} exceeds tau_c = {}",
                self.tau_p, self.tau_u, self.tau_c
            ));
        }
        if !(self.p_ul_mw > 0.0 && self.p_dl_max_mw > 0.0) {
            return fail("transmit powers must be positive".into());
        }
        if !(self.pl_exponent > 2.0) {
            return fail(format!("pl_exponent = {} must exceed 2", self.pl_exponent));
        }
        if !(self.area_side > 0.0 && self.shadow_sigma_db >= 0.0 && self.shadow_decorr_m > 0.0) {
            return fail("area, shadowing std and decorrelation distance must be positive".into());
        }
        if !self.noise_dbm.is_finite() {
            return fail("noise_dbm must be finite".into());
        }
        Ok(())
    }

    /// Noise power (downlink and uplink alike), mW.
    pub fn noise_mw(&self) -> f64 {
        10f64.powf(self.noise_dbm / 10.0)
    }

    pub fn sigma2_dl(&self) -> f64 {
        self.noise_mw()
    }

    pub fn sigma2_ul(&self) -> f64 {
        self.noise_mw()
    }

    pub fn tau_d(&self) -> usize {
        self.tau_c - self.tau_p - self.tau_u
    }

    /// Fraction of the coherence block carrying downlink data.
    pub fn prelog(&self) -> f64 {
        self.tau_d() as f64 / self.tau_c as f64
    }

    /// Per-AP downlink budgets, mW.
    pub fn p_max(&self) -> Vec<f64> {
        vec![self.p_dl_max_mw; self.num_aps]
    }
}
