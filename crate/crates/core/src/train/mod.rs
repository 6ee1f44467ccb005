//! Unsupervised training of the policy on the soft-min utility.
//!
//! Every epoch reshuffles a fixed pool of UE positions into snapshots of `K`,
//! draws fresh shadowing for each grouping, and runs momentum SGD over
//! mini-batches. Gradients come from the reverse-mode [`tape`]; [`gradcheck`]
//! verifies them against finite differences.

pub mod gradcheck;
pub mod state;
pub mod tape;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ApLayout, SimConfig};
use crate::error::{Error, Result};
use crate::netgen::{snapshot_from_positions, stream_rng, NetworkSnapshot, Point};
use crate::perf;
use crate::policy::{self, PolicyConfig, PolicyParams, Scalar};

pub use state::TrainState;
pub use tape::{Fault, Tape};

const SHUFFLE_STREAM: u64 = 1 << 40;
const SHADOW_STREAM: u64 = 2 << 40;
const ORDER_STREAM: u64 = 3 << 40;
/// Snapshots whose gradients are summed sequentially before chunks are combined.
const REDUCE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Soft-min sharpness T.
    pub temperature: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation score.
    pub patience: usize,
    /// Optional bound on the global gradient norm.
    pub grad_clip: Option<f64>,
    /// Reshuffle the position pool into new groups every epoch.
    pub regroup: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            temperature: 10.0,
            epochs: 200,
            patience: 20,
            grad_clip: None,
            regroup: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// A snapshot prepared for training: estimate gains and the UE order per AP.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub snap: NetworkSnapshot,
    pub gamma: DMatrix<f64>,
    pub orders: Vec<Vec<usize>>,
}

impl TrainSample {
    pub fn new(snap: NetworkSnapshot, sim: &SimConfig, orders: Vec<Vec<usize>>) -> Self {
        let gamma = perf::compute_gamma(&snap, sim);
        Self { snap, gamma, orders }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrad<F> {
    pub loss: f64,
    pub grad: Vec<F>,
    /// Mean over the batch of each snapshot's minimum SE.
    pub mean_min_se: f64,
}

fn record<'a, F: Scalar>(
    params: &'a PolicyParams<F>,
    s: &'a TrainSample,
    sim: &'a SimConfig,
    temperature: f64,
    batch: usize,
    index: usize,
) -> Result<Tape<'a, F>> {
    Tape::record(params, &s.snap, &s.gamma, sim, &s.orders, temperature, batch).map_err(|e| match e {
        Error::NonFinite { layer } => Error::NonFinite {
            layer: format!("{layer} (batch snapshot {index})"),
        },
        e => e,
    })
}

/// `(1/(T B)) Σ_b log Σ_k exp(-T SE_k)`.
pub fn loss<F: Scalar>(params: &PolicyParams<F>, batch: &[TrainSample], sim: &SimConfig, temperature: f64) -> Result<f64> {
    assert!(!batch.is_empty(), "loss of an empty batch");
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok(record(params, s, sim, temperature, batch.len(), i)?.loss))
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

/// Loss and its exact gradient. Summation order is fixed, so the result does
/// not depend on the worker count.
pub fn grad<F: Scalar>(params: &PolicyParams<F>, batch: &[TrainSample], sim: &SimConfig, temperature: f64) -> Result<BatchGrad<F>> {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    let n = params.num_params();
    let chunks = batch
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = vec![F::zero(); n];
            let mut loss = 0.0;
            let mut min_se = 0.0;
            for (j, s) in chunk.iter().enumerate() {
                let tape = record(params, s, sim, temperature, batch.len(), c * REDUCE_CHUNK + j)?;
                for (a, b) in g.iter_mut().zip(tape.backward()) {
                    *a += b;
                }
                loss += tape.loss;
                min_se += perf::min_of(&tape.se);
            }
            Ok((loss, g, min_se))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = BatchGrad {
        loss: 0.0,
        grad: vec![F::zero(); n],
        mean_min_se: 0.0,
    };
    for (l, g, m) in chunks {
        out.loss += l;
        out.mean_min_se += m;
        for (a, b) in out.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    out.mean_min_se /= batch.len() as f64;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState<F> {
    pub velocity: Vec<F>,
}

impl<F: Scalar> MomentumState<F> {
    pub fn new(n: usize) -> Self {
        Self {
            velocity: vec![F::zero(); n],
        }
    }
}

/// Classical momentum: `v ← μ v + g`, `Θ ← Θ − lr v`.
pub fn sgd_step<F: Scalar>(params: &mut [F], grad: &[F], state: &mut MomentumState<F>, lr: f64, momentum: f64) {
    assert_eq!(params.len(), grad.len(), "gradient does not match parameters");
    assert_eq!(params.len(), state.velocity.len(), "optimizer state does not match parameters");
    let (lr, mu) = (F::of(lr), F::of(momentum));
    for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut state.velocity) {
        *v = mu * *v + *g;
        *p = *p - lr * *v;
    }
}

fn clip<F: Scalar>(grad: &mut [F], bound: f64) {
    let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > bound {
        let s = F::of(bound / norm);
        grad.iter_mut().for_each(|g| *g = *g * s);
    }
}

/// The fixed pool regrouped every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub positions: Vec<Point>,
    pub ap_pos: Vec<Point>,
    pub layout: ApLayout,
}

impl TrainData {
    /// Pools the UE positions of `snaps`; AP positions come from the first one.
    pub fn from_snapshots(snaps: &[NetworkSnapshot]) -> Result<Self> {
        let first = snaps.first().ok_or_else(|| Error::Config("training set is empty".into()))?;
        Ok(Self {
            positions: snaps.iter().flat_map(|s| s.ue_pos.iter().copied()).collect(),
            ap_pos: first.ap_pos.clone(),
            layout: first.layout,
        })
    }
}

/// Training snapshots of one epoch, `positions / K` of them.
pub fn epoch_samples(data: &TrainData, sim: &SimConfig, tcfg: &TrainConfig, epoch: usize) -> Result<Vec<TrainSample>> {
    let k = sim.num_ues;
    let mut idx: Vec<usize> = (0..data.positions.len()).collect();
    let draw = if tcfg.regroup { epoch as u64 } else { 0 };
    if tcfg.regroup {
        idx.shuffle(&mut stream_rng(tcfg.seed, SHUFFLE_STREAM + draw));
    }
    let groups: Vec<&[usize]> = idx.chunks_exact(k).collect();
    groups
        .par_iter()
        .enumerate()
        .map(|(g, members)| {
            let ue_pos: Vec<Point> = members.iter().map(|&i| data.positions[i]).collect();
            let stream = (draw << 20) + g as u64;
            let mut rng = stream_rng(tcfg.seed, SHADOW_STREAM + stream);
            let snap = snapshot_from_positions(sim, ue_pos, data.ap_pos.clone(), data.layout, &mut rng)?;
            let orders = policy::ue_orders(&snap, &mut stream_rng(tcfg.seed, ORDER_STREAM + ((epoch as u64) << 20) + g as u64));
            Ok(TrainSample::new(snap, sim, orders))
        })
        .collect()
}

/// Mean over snapshots of the policy's minimum SE.
pub fn mean_min_se<F: Scalar>(params: &PolicyParams<F>, val: &[(NetworkSnapshot, DMatrix<f64>)], sim: &SimConfig) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let v = val
        .par_iter()
        .map(|(snap, gamma)| {
            let a = policy::infer(params, snap, sim, 0)?;
            Ok(perf::min_of(&perf::evaluate_se(snap, gamma, &a, sim)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub batch_min_se: f64,
    /// Filled on each epoch's last step.
    pub val_min_se: Option<f64>,
    pub wall_ms: u128,
}

/// What the observer sees after each epoch.
pub struct Progress<'a> {
    pub epoch: usize,
    pub rows: &'a [LogRow],
    pub val_min_se: f64,
    pub improved: bool,
    pub best: &'a PolicyParams<f32>,
    pub state: &'a TrainState,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation score.
    pub best: PolicyParams<f32>,
    pub last: PolicyParams<f32>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub history: Vec<LogRow>,
}

/// Runs the training loop; `observe` is called after every epoch and may
/// persist checkpoints. Without validation data every epoch counts as an
/// improvement.
pub fn train(
    data: &TrainData,
    val: &[NetworkSnapshot],
    sim: &SimConfig,
    pcfg: &PolicyConfig,
    tcfg: &TrainConfig,
    resume: Option<TrainState>,
    observe: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<TrainOutcome> {
    sim.validate()?;
    pcfg.validate()?;
    tcfg.validate()?;
    if data.positions.len() < sim.num_ues {
        return Err(Error::Config(format!(
            "{} training positions cannot fill one group of {}",
            data.positions.len(),
            sim.num_ues
        )));
    }
    let val: Vec<(NetworkSnapshot, DMatrix<f64>)> = val
        .iter()
        .map(|s| (s.clone(), perf::compute_gamma(s, sim)))
        .collect();

    let mut st = match resume {
        Some(s) => {
            s.check_shape(pcfg)?;
            s
        }
        None => TrainState::fresh(PolicyParams::<f32>::init(pcfg, tcfg.seed)),
    };
    let mut params = PolicyParams::from_data(pcfg, st.params.clone())?;
    let mut best = PolicyParams::from_data(pcfg, st.best.clone())?;
    let mut opt = MomentumState {
        velocity: std::mem::take(&mut st.velocity),
    };
    let mut history = Vec::new();
    let start = Instant::now();
    let mut stopped_early = false;

    while st.next_epoch < tcfg.epochs {
        let epoch = st.next_epoch;
        if st.since_best >= tcfg.patience && st.best_epoch.is_some() {
            stopped_early = true;
            break;
        }
        let samples = epoch_samples(data, sim, tcfg, epoch)?;
        let first_row = history.len();
        for batch in samples.chunks(tcfg.batch_size) {
            let mut bg = match grad(&params, batch, sim, tcfg.temperature) {
                Ok(g) => g,
                Err(Error::NonFinite { layer }) => {
                    log::error!("non-finite value in {layer}");
                    return Err(Error::Diverged { epoch, step: st.step });
                }
                Err(e) => return Err(e),
            };
            if bg.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step: st.step });
            }
            if let Some(c) = tcfg.grad_clip {
                clip(&mut bg.grad, c);
            }
            sgd_step(&mut params.data, &bg.grad, &mut opt, tcfg.lr, tcfg.momentum);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, step: st.step });
            }
            history.push(LogRow {
                epoch,
                step: st.step,
                loss: bg.loss,
                batch_min_se: bg.mean_min_se,
                val_min_se: None,
                wall_ms: start.elapsed().as_millis(),
            });
            st.step += 1;
        }
        let score = if val.is_empty() {
            -history[first_row..].iter().map(|r| r.loss).sum::<f64>()
        } else {
            mean_min_se(&params, &val, sim)?
        };
        if let Some(last) = history.last_mut() {
            last.val_min_se = (!val.is_empty()).then_some(score);
        }
        let improved = st.best_epoch.is_none() || score > st.best_val;
        if improved {
            st.best_val = score;
            st.best_epoch = Some(epoch);
            st.since_best = 0;
            best.data.clone_from(&params.data);
        } else {
            st.since_best += 1;
        }
        st.next_epoch = epoch + 1;
        st.params.clone_from(&params.data);
        st.best.clone_from(&best.data);
        st.velocity = std::mem::take(&mut opt.velocity);
        let res = observe(&Progress {
            epoch,
            rows: &history[first_row..],
            val_min_se: score,
            improved,
            best: &best,
            state: &st,
        });
        opt.velocity = std::mem::take(&mut st.velocity);
        res?;
        log::info!(
            "epoch {epoch}: loss {:.4}, validation min-SE {score:.4}{}",
            history[first_row..].iter().map(|r| r.loss).sum::<f64>() / (history.len() - first_row).max(1) as f64,
            if improved { " *" } else { "" }
        );
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_val: st.best_val,
        best_epoch: st.best_epoch.unwrap_or(0),
        epochs_run: st.next_epoch,
        stopped_early,
        history,
    })
}
