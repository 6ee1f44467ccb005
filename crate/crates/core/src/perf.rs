//! Downlink performance: estimate quality, SINR with maximum-ratio precoding,
//! spectral efficiency and the soft-min utility.
//!
//! Powers are in mW and gains are linear power ratios throughout.

use nalgebra::DMatrix;

use crate::config::SimConfig;
use crate::netgen::NetworkSnapshot;

/// Downlink power per active AP-UE pair, indexed like the snapshot
/// [`Topology`](crate::netgen::Topology).
#[derive(Clone, Debug, PartialEq)]
pub struct PowerAllocation {
    pub rho: Vec<f64>,
}

impl PowerAllocation {
    pub fn zeros(snap: &NetworkSnapshot) -> Self {
        Self {
            rho: vec![0.0; snap.topology().num_pairs()],
        }
    }

    pub fn get(&self, snap: &NetworkSnapshot, k: usize, l: usize) -> Option<f64> {
        snap.topology().find(k, l).map(|p| self.rho[p])
    }

    /// Total power radiated by every AP.
    pub fn ap_sums(&self, snap: &NetworkSnapshot) -> Vec<f64> {
        let topo = snap.topology();
        (0..snap.num_aps())
            .map(|l| topo.ap_pairs(l).iter().map(|&p| self.rho[p]).sum())
            .collect()
    }

    /// Count of violated constraints: negative entries plus APs above budget
    /// by more than `slack` mW.
    pub fn violations(&self, snap: &NetworkSnapshot, p_max: &[f64], slack: f64) -> usize {
        let negative = self.rho.iter().filter(|&&r| !(r >= 0.0)).count();
        let over = self
            .ap_sums(snap)
            .iter()
            .zip(p_max)
            .filter(|(s, p)| !(**s <= **p + slack))
            .count();
        negative + over
    }

    /// Shrinks each AP's powers until their sum, taken in topology order, is
    /// at most `p_max`. Removes the last-ulp overshoot of a rescaled vector.
    pub fn fit_budget(&mut self, snap: &NetworkSnapshot, p_max: f64) {
        let topo = snap.topology();
        for l in 0..snap.num_aps() {
            let pairs = topo.ap_pairs(l);
            loop {
                let sum: f64 = pairs.iter().map(|&p| self.rho[p]).sum();
                if sum <= p_max {
                    break;
                }
                let f = (p_max / sum).min(1.0 - f64::EPSILON);
                pairs.iter().for_each(|&p| self.rho[p] *= f);
            }
        }
    }

    pub fn is_feasible(&self, snap: &NetworkSnapshot, p_max: &[f64]) -> bool {
        self.rho.len() == snap.topology().num_pairs() && self.violations(snap, p_max, 1e-9) == 0
    }
}

/// Mean-square channel-estimate gain per antenna under MMSE estimation, K x L.
pub fn compute_gamma(snap: &NetworkSnapshot, cfg: &SimConfig) -> DMatrix<f64> {
    let eta = vec![cfg.p_ul_mw; snap.num_ues()];
    gamma_with(snap, &eta, cfg.tau_p as f64, cfg.sigma2_ul())
}

/// γ for explicit per-UE pilot powers `eta` (mW).
pub fn gamma_with(snap: &NetworkSnapshot, eta: &[f64], tau_p: f64, sigma2_ul: f64) -> DMatrix<f64> {
    let beta = &snap.beta;
    DMatrix::from_fn(snap.num_ues(), snap.num_aps(), |k, l| {
        let contaminated: f64 = snap.pilot_sets[k].iter().map(|&i| eta[i] * beta[(i, l)]).sum();
        tau_p * eta[k] * beta[(k, l)].powi(2) / (tau_p * contaminated + sigma2_ul)
    })
}

/// Intermediate sums of the SINR expression, kept for differentiation.
#[derive(Clone, Debug)]
pub struct SinrTerms {
    /// Coherent sum over the serving set, Σ_ℓ √(ρ_kℓ γ_kℓ).
    pub coherent: Vec<f64>,
    /// Σ_ℓ√(ρ_iℓ γ_kℓ) for every i ∈ P_k \ {k}, aligned with `pilot_sets[k]` minus k.
    pub contamination: Vec<Vec<(usize, f64)>>,
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    pub sinr: Vec<f64>,
}

pub fn sinr_terms(
    snap: &NetworkSnapshot,
    gamma: &DMatrix<f64>,
    alloc: &PowerAllocation,
    antennas: usize,
    sigma2_dl: f64,
) -> SinrTerms {
    let topo = snap.topology();
    let m = antennas as f64;
    assert_eq!(alloc.rho.len(), topo.num_pairs(), "allocation does not match topology");
    assert!(
        alloc.rho.iter().all(|&r| r >= 0.0),
        "power coefficients must be nonnegative"
    );
    let radiated = alloc.ap_sums(snap);
    let active_aps: Vec<usize> = (0..snap.num_aps()).filter(|&l| !topo.ap_pairs(l).is_empty()).collect();
    let k_count = snap.num_ues();
    let mut out = SinrTerms {
        coherent: Vec::with_capacity(k_count),
        contamination: Vec::with_capacity(k_count),
        numerator: Vec::with_capacity(k_count),
        denominator: Vec::with_capacity(k_count),
        sinr: Vec::with_capacity(k_count),
    };
    let cross = |i: usize, k: usize| -> f64 {
        topo.ue_pairs(i)
            .map(|p| (alloc.rho[p] * gamma[(k, topo.pair(p).1)]).sqrt())
            .sum()
    };
    for k in 0..k_count {
        let a = cross(k, k);
        let num = m * a * a;
        let interference: f64 = active_aps.iter().map(|&l| radiated[l] * snap.beta[(k, l)]).sum();
        let contamination: Vec<(usize, f64)> = snap.pilot_sets[k]
            .iter()
            .filter(|&&i| i != k)
            .map(|&i| (i, cross(i, k)))
            .collect();
        let coh: f64 = contamination.iter().map(|(_, c)| m * c * c).sum();
        let den = interference + coh + sigma2_dl;
        out.coherent.push(a);
        out.contamination.push(contamination);
        out.numerator.push(num);
        out.denominator.push(den);
        out.sinr.push(num / den);
    }
    out
}

pub fn compute_sinr(
    snap: &NetworkSnapshot,
    gamma: &DMatrix<f64>,
    alloc: &PowerAllocation,
    cfg: &SimConfig,
) -> Vec<f64> {
    sinr_terms(snap, gamma, alloc, cfg.antennas, cfg.sigma2_dl()).sinr
}

/// Vector-Jacobian product: maps ∂f/∂SINR_k to ∂f/∂ρ_p for every pair.
///
/// Entries with ρ_p = 0 get the one-sided limit of the interference terms only;
/// the √ρ terms have no finite derivative there.
pub fn sinr_vjp(
    snap: &NetworkSnapshot,
    gamma: &DMatrix<f64>,
    alloc: &PowerAllocation,
    antennas: usize,
    terms: &SinrTerms,
    d_sinr: &[f64],
) -> Vec<f64> {
    let topo = snap.topology();
    let m = antennas as f64;
    let mut d_rho = vec![0.0; topo.num_pairs()];
    let inv_sqrt = |r: f64| if r > 0.0 { 1.0 / r.sqrt() } else { 0.0 };
    for k in 0..snap.num_ues() {
        let g = d_sinr[k];
        if g == 0.0 {
            continue;
        }
        let den = terms.denominator[k];
        let d_num = g / den;
        let d_den = -g * terms.numerator[k] / (den * den);
        // numerator M a_k^2
        for p in topo.ue_pairs(k) {
            let l = topo.pair(p).1;
            d_rho[p] += d_num * m * terms.coherent[k] * gamma[(k, l)].sqrt() * inv_sqrt(alloc.rho[p]);
        }
        // Σ_ℓ β_kℓ (Σ_i ρ_iℓ)
        for (p, &(_, l)) in topo.pairs().iter().enumerate() {
            d_rho[p] += d_den * snap.beta[(k, l)];
        }
        // M Σ_i c_ki^2 over pilot-sharing UEs
        for &(i, c) in &terms.contamination[k] {
            for p in topo.ue_pairs(i) {
                let l = topo.pair(p).1;
                d_rho[p] += d_den * m * c * gamma[(k, l)].sqrt() * inv_sqrt(alloc.rho[p]);
            }
        }
    }
    d_rho
}

/// Per-UE SE in bit/s/Hz.
pub fn compute_se(sinr: &[f64], cfg: &SimConfig) -> Vec<f64> {
    se_with_prelog(sinr, cfg.prelog())
}

pub fn se_with_prelog(sinr: &[f64], prelog: f64) -> Vec<f64> {
    sinr.iter().map(|&s| prelog * (1.0 + s).log2()).collect()
}

/// SE of `alloc` on `snap`.
pub fn evaluate_se(
    snap: &NetworkSnapshot,
    gamma: &DMatrix<f64>,
    alloc: &PowerAllocation,
    cfg: &SimConfig,
) -> Vec<f64> {
    compute_se(&compute_sinr(snap, gamma, alloc, cfg), cfg)
}

pub fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `(1/T) log Σ_k exp(-T se_k)`, a smooth stand-in for `-min_k se_k`.
pub fn softmin_utility(se: &[f64], temperature: f64) -> f64 {
    assert!(!se.is_empty(), "soft-min of an empty SE list");
    assert!(temperature > 0.0, "temperature must be positive");
    let lo = min_of(se);
    let acc: f64 = se.iter().map(|&s| (-temperature * (s - lo)).exp()).sum();
    -lo + acc.ln() / temperature
}

/// Gradient of [`softmin_utility`] with respect to `se`: `-softmax(-T se)`.
pub fn softmin_grad(se: &[f64], temperature: f64) -> Vec<f64> {
    let lo = min_of(se);
    let w: Vec<f64> = se.iter().map(|&s| (-temperature * (s - lo)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| -v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ApLayout;
    use crate::netgen::{generate, stream_rng, NetworkSnapshot};
    use proptest::prelude::*;
    use rand::Rng;

    fn one_link(beta: f64) -> NetworkSnapshot {
        NetworkSnapshot::from_parts(
            vec![[0.0, 0.0]],
            vec![[1.0, 0.0]],
            DMatrix::from_element(1, 1, beta),
            vec![0],
            vec![vec![0]],
            ApLayout::Uniform,
        )
    }

    #[test]
    fn gamma_noise_free_limit() {
        let snap = one_link(1.0);
        let g = gamma_with(&snap, &[1.0], 1.0, 0.0);
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn gamma_hand_value() {
        let snap = one_link(1e-10);
        let s2 = 10f64.powf(-9.4);
        let g = gamma_with(&snap, &[100.0], 8.0, s2);
        let expect = 8.0 * 100.0 * 1e-20 / (8.0 * 100.0 * 1e-10 + s2);
        assert!((g[(0, 0)] - expect).abs() <= 1e-12 * expect);
        assert!(g[(0, 0)] < 1e-10);
    }

    #[test]
    fn gamma_vanishes_with_pilot_power() {
        let snap = one_link(1e-10);
        let g = gamma_with(&snap, &[1e-30], 8.0, 1e-9);
        assert!(g[(0, 0)] < 1e-40);
    }

    #[test]
    fn gamma_below_beta() {
        let cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(2, 0)).unwrap();
        let g = compute_gamma(&snap, &cfg);
        for k in 0..8 {
            for l in 0..16 {
                assert!(g[(k, l)] > 0.0 && g[(k, l)] < snap.beta[(k, l)]);
            }
        }
    }

    #[test]
    fn gamma_nondecreasing_in_pilot_power() {
        let cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(3, 0)).unwrap();
        let lo = gamma_with(&snap, &[50.0; 8], 8.0, cfg.sigma2_ul());
        let hi = gamma_with(&snap, &[100.0; 8], 8.0, cfg.sigma2_ul());
        assert!(lo.iter().zip(hi.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn sinr_single_link_hand_value() {
        let snap = one_link(1.0);
        let gamma = DMatrix::from_element(1, 1, 0.5);
        let alloc = PowerAllocation { rho: vec![1.0] };
        let t = sinr_terms(&snap, &gamma, &alloc, 4, 1.0);
        assert!((t.sinr[0] - 1.0).abs() < 1e-15);
        assert!(t.contamination[0].is_empty());
    }

    #[test]
    fn zero_power_zero_sinr() {
        let cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(4, 0)).unwrap();
        let g = compute_gamma(&snap, &cfg);
        let s = compute_sinr(&snap, &g, &PowerAllocation::zeros(&snap), &cfg);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "nonnegative")]
    fn negative_power_is_a_contract_violation() {
        let snap = one_link(1.0);
        let gamma = DMatrix::from_element(1, 1, 0.5);
        sinr_terms(&snap, &gamma, &PowerAllocation { rho: vec![-1.0] }, 4, 1.0);
    }

    #[test]
    fn se_values() {
        let cfg = SimConfig::default();
        assert_eq!(compute_se(&[0.0], &cfg), vec![0.0]);
        assert!((compute_se(&[1.0], &cfg)[0] - 0.96).abs() < 1e-15);
        assert!((compute_se(&[3.0], &cfg)[0] - 1.92).abs() < 1e-15);
    }

    #[test]
    fn softmin_identities() {
        assert_eq!(softmin_utility(&[2.0], 10.0), -2.0);
        let v = softmin_utility(&[1.5; 8], 10.0);
        assert!((v - (-1.5 + 8f64.ln() / 10.0)).abs() < 1e-14);
        let g = softmin_grad(&[1.0, 1.0], 10.0);
        assert_eq!(g, vec![-0.5, -0.5]);
    }

    #[test]
    #[should_panic]
    fn softmin_of_nothing_panics() {
        softmin_utility(&[], 10.0);
    }

    /// Direct transcription of the SINR expression with dense loops over all
    /// (UE, AP) combinations and membership tests.
    fn reference_sinr(snap: &NetworkSnapshot, gamma: &DMatrix<f64>, alloc: &PowerAllocation, m: f64, s2: f64) -> Vec<f64> {
        let (kk, ll) = snap.beta.shape();
        let rho = |i: usize, l: usize| alloc.get(snap, i, l).unwrap_or(0.0);
        (0..kk)
            .map(|k| {
                let mut a = 0.0;
                for l in 0..ll {
                    if snap.serving[k].contains(&l) {
                        a += (rho(k, l) * gamma[(k, l)]).sqrt();
                    }
                }
                let mut den = s2;
                for i in 0..kk {
                    for l in 0..ll {
                        if snap.serving[i].contains(&l) {
                            den += rho(i, l) * snap.beta[(k, l)];
                        }
                    }
                }
                for i in 0..kk {
                    if i != k && snap.pilot_of[i] == snap.pilot_of[k] {
                        let mut c = 0.0;
                        for l in 0..ll {
                            if snap.serving[i].contains(&l) {
                                c += (rho(i, l) * gamma[(k, l)]).sqrt();
                            }
                        }
                        den += m * c * c;
                    }
                }
                m * a * a / den
            })
            .collect()
    }

    fn random_small(seed: u64) -> (NetworkSnapshot, DMatrix<f64>, PowerAllocation, SimConfig) {
        let mut cfg = SimConfig::default();
        cfg.num_aps = 3;
        cfg.num_ues = 3;
        cfg.tau_p = 3;
        cfg.n_assoc = 2;
        cfg.area_side = 200.0;
        let mut rng = stream_rng(seed, 0);
        let mut snap = generate(&cfg, &mut rng).unwrap();
        cfg.tau_p = 2;
        snap.set_pilots(vec![0, 1, 0]);
        let gamma = compute_gamma(&snap, &cfg);
        let alloc = PowerAllocation {
            rho: (0..snap.topology().num_pairs()).map(|_| rng.gen_range(0.0..100.0)).collect(),
        };
        (snap, gamma, alloc, cfg)
    }

    #[test]
    fn matches_reference_with_pilot_sharing() {
        for seed in 0..50 {
            let (snap, gamma, alloc, cfg) = random_small(seed);
            let fast = compute_sinr(&snap, &gamma, &alloc, &cfg);
            let slow = reference_sinr(&snap, &gamma, &alloc, cfg.antennas as f64, cfg.sigma2_dl());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..10 {
            let (snap, gamma, alloc, cfg) = random_small(seed);
            let weights = [0.3, -1.1, 0.7];
            let f = |a: &PowerAllocation| -> f64 {
                let s = sinr_terms(&snap, &gamma, a, cfg.antennas, cfg.sigma2_dl()).sinr;
                s.iter().zip(&weights).map(|(x, w)| x * w).sum()
            };
            let terms = sinr_terms(&snap, &gamma, &alloc, cfg.antennas, cfg.sigma2_dl());
            let g = sinr_vjp(&snap, &gamma, &alloc, cfg.antennas, &terms, &weights);
            for p in 0..alloc.rho.len() {
                let h = 1e-5 * alloc.rho[p];
                let mut up = alloc.clone();
                up.rho[p] += h;
                let mut dn = alloc.clone();
                dn.rho[p] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g[p]).abs() <= 1e-6 * fd.abs().max(1e-6), "pair {p}: {fd} vs {}", g[p]);
            }
        }
    }

    #[test]
    fn interference_monotonicity() {
        let cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(11, 0)).unwrap();
        let g = compute_gamma(&snap, &cfg);
        let base = PowerAllocation {
            rho: vec![20.0; snap.topology().num_pairs()],
        };
        let s0 = compute_sinr(&snap, &g, &base, &cfg);
        let topo = snap.topology();
        for p in 0..topo.num_pairs() {
            let (i, _) = topo.pair(p);
            let mut more = base.clone();
            more.rho[p] *= 2.0;
            let s1 = compute_sinr(&snap, &g, &more, &cfg);
            for k in (0..8).filter(|&k| k != i) {
                assert!(s1[k] <= s0[k]);
            }
        }
    }

    #[test]
    fn more_noise_lowers_every_sinr() {
        let mut cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(12, 0)).unwrap();
        let g = compute_gamma(&snap, &cfg);
        let a = PowerAllocation {
            rho: vec![50.0; snap.topology().num_pairs()],
        };
        let s0 = compute_sinr(&snap, &g, &a, &cfg);
        cfg.noise_dbm += 10.0 * 2f64.log10();
        let s1 = compute_sinr(&snap, &g, &a, &cfg);
        assert!(s0.iter().zip(&s1).all(|(a, b)| b < a));
    }

    proptest! {
        #[test]
        fn softmin_sandwich(se in proptest::collection::vec(0.0f64..10.0, 1..20), t in 0.1f64..50.0) {
            let v = softmin_utility(&se, t);
            let lo = -min_of(&se);
            prop_assert!(v >= lo);
            prop_assert!(v <= lo + (se.len() as f64).ln() / t);
        }
    }
}
