//! Per-AP input sequences.
//!
//! Every active pair `(k, ℓ)` is described by `log10` of, relative to the
//! downlink noise power: its own gain, the total gain UE `k` sees, and the
//! total gain AP `ℓ` sees. In scalable mode the two totals run over local
//! neighborhoods instead of the whole network.

use serde::{Deserialize, Serialize};

use crate::netgen::NetworkSnapshot;

pub const FEATURE_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// Everything within this distance (m).
    Radius(f64),
    /// The `n` strongest by large-scale gain.
    TopN(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Global,
    Scalable(Neighborhood),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    pub ap: usize,
    /// UEs in sequence order; `u[t]` describes `ue_order[t]`.
    pub ue_order: Vec<usize>,
    pub u: Vec<[f64; FEATURE_DIM]>,
}

impl FeatureSeq {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Reorders the sequence; `perm[t]` is the old position placed at `t`.
    pub fn permuted(&self, perm: &[usize]) -> FeatureSeq {
        FeatureSeq {
            ap: self.ap,
            ue_order: perm.iter().map(|&t| self.ue_order[t]).collect(),
            u: perm.iter().map(|&t| self.u[t]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// One sequence per AP that serves someone, in AP index order.
    pub seqs: Vec<FeatureSeq>,
    /// Neighborhoods that came out empty and fell back to the pair itself.
    pub fallbacks: usize,
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Indices `0..n` selected by `rule`, ascending.
fn neighbors(n: usize, rule: Neighborhood, distance: impl Fn(usize) -> f64, gain: impl Fn(usize) -> f64) -> Vec<usize> {
    match rule {
        Neighborhood::Radius(r) => (0..n).filter(|&j| distance(j) <= r).collect(),
        Neighborhood::TopN(top) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| gain(b).total_cmp(&gain(a)).then(a.cmp(&b)));
            order.truncate(top);
            order.sort_unstable();
            order
        }
    }
}

pub fn build_features(snap: &NetworkSnapshot, sigma2: f64, mode: FeatureMode) -> FeatureSet {
    let (kk, ll) = snap.beta.shape();
    let beta = &snap.beta;
    let (ue_nbrs, ap_nbrs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match mode {
        FeatureMode::Global => (
            (0..kk).map(|_| (0..ll).collect()).collect(),
            (0..ll).map(|_| (0..kk).collect()).collect(),
        ),
        FeatureMode::Scalable(rule) => (
            (0..kk)
                .map(|k| neighbors(ll, rule, |j| dist(&snap.ue_pos[k], &snap.ap_pos[j]), |j| beta[(k, j)]))
                .collect(),
            (0..ll)
                .map(|l| neighbors(kk, rule, |i| dist(&snap.ue_pos[i], &snap.ap_pos[l]), |i| beta[(i, l)]))
                .collect(),
        ),
    };

    let mut fallbacks = 0;
    let mut seqs = Vec::new();
    for l in 0..ll {
        if snap.served[l].is_empty() {
            continue;
        }
        let ue_order = snap.served[l].clone();
        let u = ue_order
            .iter()
            .map(|&k| {
                let ue_total: f64 = if ue_nbrs[k].is_empty() {
                    fallbacks += 1;
                    beta[(k, l)]
                } else {
                    ue_nbrs[k].iter().map(|&j| beta[(k, j)]).sum()
                };
                let ap_total: f64 = if ap_nbrs[l].is_empty() {
                    fallbacks += 1;
                    beta[(k, l)]
                } else {
                    ap_nbrs[l].iter().map(|&i| beta[(i, l)]).sum()
                };
                [
                    (beta[(k, l)] / sigma2).log10(),
                    (ue_total / sigma2).log10(),
                    (ap_total / sigma2).log10(),
                ]
            })
            .collect();
        seqs.push(FeatureSeq { ap: l, ue_order, u });
    }
    if fallbacks > 0 {
        log::debug!("{fallbacks} empty feature neighborhoods replaced by the pair itself");
    }
    FeatureSet { seqs, fallbacks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ApLayout, SimConfig};
    use crate::netgen::{generate, stream_rng};
    use nalgebra::DMatrix;

    #[test]
    fn single_pair_has_equal_entries() {
        let snap = NetworkSnapshot::from_parts(
            vec![[0.0, 0.0]],
            vec![[3.0, 4.0]],
            DMatrix::from_element(1, 1, 1e-10),
            vec![0],
            vec![vec![0]],
            ApLayout::Uniform,
        );
        let f = build_features(&snap, 1e-9, FeatureMode::Global);
        assert_eq!(f.seqs.len(), 1);
        let u = f.seqs[0].u[0];
        assert_eq!(u[0], u[1]);
        assert_eq!(u[1], u[2]);
        assert!((u[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn global_two_by_two_by_hand() {
        let b = [[1e-9, 4e-9], [2e-9, 8e-10]];
        let snap = NetworkSnapshot::from_parts(
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![[5.0, 5.0], [9.0, 9.0]],
            DMatrix::from_row_slice(2, 2, &[b[0][0], b[0][1], b[1][0], b[1][1]]),
            vec![0, 1],
            vec![vec![1, 0], vec![0, 1]],
            ApLayout::Uniform,
        );
        let s2 = 1e-10;
        let f = build_features(&snap, s2, FeatureMode::Global);
        // AP 0 serves UEs 0 and 1.
        let seq = &f.seqs[0];
        assert_eq!(seq.ue_order, vec![0, 1]);
        let expect0 = [(b[0][0] / s2).log10(), ((b[0][0] + b[0][1]) / s2).log10(), ((b[0][0] + b[1][0]) / s2).log10()];
        let expect1 = [(b[1][0] / s2).log10(), ((b[1][0] + b[1][1]) / s2).log10(), ((b[0][0] + b[1][0]) / s2).log10()];
        for (got, want) in seq.u[0].iter().zip(&expect0).chain(seq.u[1].iter().zip(&expect1)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_neighborhoods_reproduce_global() {
        let cfg = SimConfig::default();
        for i in 0..10 {
            let snap = generate(&cfg, &mut stream_rng(8, i)).unwrap();
            let g = build_features(&snap, cfg.sigma2_dl(), FeatureMode::Global);
            for rule in [Neighborhood::Radius(1e9), Neighborhood::TopN(1000)] {
                let s = build_features(&snap, cfg.sigma2_dl(), FeatureMode::Scalable(rule));
                assert_eq!(g, s);
            }
        }
    }

    #[test]
    fn empty_neighborhood_falls_back() {
        let cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(8, 0)).unwrap();
        let s = build_features(&snap, cfg.sigma2_dl(), FeatureMode::Scalable(Neighborhood::Radius(0.0)));
        assert_eq!(s.fallbacks, 2 * snap.topology().num_pairs());
        for seq in &s.seqs {
            for u in &seq.u {
                assert_eq!(u[0], u[1]);
                assert_eq!(u[0], u[2]);
            }
        }
    }

    #[test]
    fn sequences_cover_every_pair() {
        let cfg = SimConfig::default();
        let snap = generate(&cfg, &mut stream_rng(8, 3)).unwrap();
        let f = build_features(&snap, cfg.sigma2_dl(), FeatureMode::Global);
        let total: usize = f.seqs.iter().map(|s| s.len()).sum();
        assert_eq!(total, 32);
        for s in &f.seqs {
            assert_eq!(s.ue_order, snap.served[s.ap]);
            assert!(s.u.iter().flatten().all(|v| v.is_finite()));
        }
    }
}
