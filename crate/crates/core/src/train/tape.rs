//! Reverse-mode record of one snapshot's loss.
//!
//! The forward pass is the inference path ([`policy::run_aps`]); its saved
//! intermediates become tape nodes. Network nodes work in the parameter
//! precision `F`, the latent/normalization/physics tail in f64.

use nalgebra::DMatrix;

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::netgen::NetworkSnapshot;
use crate::perf::{self, PowerAllocation, SinrTerms};
use crate::policy::kernels::{affine_backward, lstm_step_backward, selu_grad, LstmStep};
use crate::policy::{self, dense_grads, lstm_grads, softplus_grad, Direction, PolicyParams, Scalar};

/// Deliberately wrong backward rules, for checking that the gradient checker
/// catches and localizes mistakes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Weight gradient of one dense layer is off by a factor.
    DenseWeight(usize),
    /// The recurrent carry between LSTM steps is dropped in one direction.
    RecurrentCarry(Direction),
    /// `d 10^s / ds` loses its `ln 10` factor.
    Exp10Slope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slot(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slot64(usize);

#[derive(Debug)]
enum Node<F> {
    Lstm {
        dir: Direction,
        out: Slot,
        x: Vec<Vec<F>>,
        steps: Vec<LstmStep<F>>,
    },
    Add {
        a: Slot,
        b: Slot,
        out: Slot,
    },
    Exp10Clamp {
        input: Slot,
        out: Slot,
        s: Vec<Vec<F>>,
        s_tilde: Vec<Vec<F>>,
    },
    Dense {
        layer: usize,
        input: Slot,
        out: Slot,
        x: Vec<Vec<F>>,
    },
    Selu {
        input: Slot,
        out: Slot,
        z: Vec<Vec<F>>,
    },
    Latent {
        input: Slot,
        out: Slot64,
        y: Vec<F>,
    },
    Normalize {
        input: Slot64,
        out: Slot64,
        rho_hat: Vec<f64>,
        sum: f64,
    },
    Utility {
        inputs: Vec<(Slot64, Vec<usize>)>,
        alloc: PowerAllocation,
        terms: SinrTerms,
        weight: f64,
    },
}

/// One snapshot's forward record and loss contribution.
pub struct Tape<'a, F: Scalar> {
    params: &'a PolicyParams<F>,
    snap: &'a NetworkSnapshot,
    gamma: &'a DMatrix<f64>,
    sim: &'a SimConfig,
    temperature: f64,
    nodes: Vec<Node<F>>,
    /// `(positions, width)` of every `F` slot.
    shapes: Vec<(usize, usize)>,
    shapes64: Vec<usize>,
    /// `softmin(SE) / batch_size`.
    pub loss: f64,
    pub se: Vec<f64>,
    pub alloc: PowerAllocation,
}

impl<'a, F: Scalar> Tape<'a, F> {
    fn slot(&mut self, n: usize, width: usize) -> Slot {
        self.shapes.push((n, width));
        Slot(self.shapes.len() - 1)
    }

    fn slot64(&mut self, n: usize) -> Slot64 {
        self.shapes64.push(n);
        Slot64(self.shapes64.len() - 1)
    }

    /// Runs the policy on `snap` with the given UE orders and records the
    /// soft-min loss weighted by `1 / batch_size`.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        params: &'a PolicyParams<F>,
        snap: &'a NetworkSnapshot,
        gamma: &'a DMatrix<f64>,
        sim: &'a SimConfig,
        orders: &[Vec<usize>],
        temperature: f64,
        batch_size: usize,
    ) -> Result<Self> {
        let passes = policy::run_aps(params, snap, sim, orders)?;
        let alloc = policy::assemble(snap, &passes, sim.p_dl_max_mw);
        let mut tape = Tape {
            params,
            snap,
            gamma,
            sim,
            temperature,
            nodes: Vec::new(),
            shapes: Vec::new(),
            shapes64: Vec::new(),
            loss: 0.0,
            se: Vec::new(),
            alloc: alloc.clone(),
        };
        let h = params.cfg.hidden;
        let mut inputs = Vec::with_capacity(passes.len());
        for pass in passes {
            let t = pass.trace;
            let n = t.x.len();
            let fwd = tape.slot(n, h);
            let bwd = tape.slot(n, h);
            tape.nodes.push(Node::Lstm {
                dir: Direction::Forward,
                out: fwd,
                x: t.x.clone(),
                steps: t.fwd,
            });
            tape.nodes.push(Node::Lstm {
                dir: Direction::Backward,
                out: bwd,
                x: t.x,
                steps: t.bwd,
            });
            let s = tape.slot(n, h);
            tape.nodes.push(Node::Add { a: fwd, b: bwd, out: s });
            let mut cur = tape.slot(n, h);
            tape.nodes.push(Node::Exp10Clamp {
                input: s,
                out: cur,
                s: t.s,
                s_tilde: t.s_tilde,
            });
            let layers = t.head_pre.len();
            for (j, (x, z)) in t.head_in.into_iter().zip(t.head_pre).enumerate() {
                let width = z[0].len();
                let pre = tape.slot(n, width);
                tape.nodes.push(Node::Dense {
                    layer: j,
                    input: cur,
                    out: pre,
                    x,
                });
                cur = pre;
                if j + 1 < layers {
                    let act = tape.slot(n, width);
                    tape.nodes.push(Node::Selu {
                        input: pre,
                        out: act,
                        z,
                    });
                    cur = act;
                }
            }
            let latent = tape.slot64(n);
            tape.nodes.push(Node::Latent {
                input: cur,
                out: latent,
                y: t.y,
            });
            let rho = tape.slot64(n);
            tape.nodes.push(Node::Normalize {
                input: latent,
                out: rho,
                rho_hat: t.rho_hat,
                sum: pass.latent_sum,
            });
            inputs.push((rho, pass.pairs));
        }
        let terms = perf::sinr_terms(snap, gamma, &alloc, sim.antennas, sim.sigma2_dl());
        let se = perf::compute_se(&terms.sinr, sim);
        let weight = 1.0 / batch_size as f64;
        let loss = perf::softmin_utility(&se, temperature) * weight;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                layer: "soft-min loss".into(),
            });
        }
        tape.nodes.push(Node::Utility {
            inputs,
            alloc,
            terms,
            weight,
        });
        tape.loss = loss;
        tape.se = se;
        Ok(tape)
    }

    pub fn backward(&self) -> Vec<F> {
        self.backward_with(None)
    }

    /// Reverse sweep; visits every node once, last recorded first.
    pub fn backward_with(&self, fault: Option<Fault>) -> Vec<F> {
        let params = self.params;
        let cfg = &params.cfg;
        let (h, d_in) = (cfg.hidden, cfg.d_in);
        let mut grad = vec![F::zero(); params.num_params()];
        let mut adj: Vec<Vec<F>> = self.shapes.iter().map(|&(n, w)| vec![F::zero(); n * w]).collect();
        let mut adj64: Vec<Vec<f64>> = self.shapes64.iter().map(|&n| vec![0.0; n]).collect();

        for node in self.nodes.iter().rev() {
            match node {
                Node::Utility {
                    inputs,
                    alloc,
                    terms,
                    weight,
                } => {
                    let d_se = perf::softmin_grad(&self.se, self.temperature);
                    let prelog = self.sim.prelog();
                    let d_sinr: Vec<f64> = d_se
                        .iter()
                        .zip(&terms.sinr)
                        .map(|(g, s)| weight * g * prelog / ((1.0 + s) * std::f64::consts::LN_2))
                        .collect();
                    let d_rho = perf::sinr_vjp(self.snap, self.gamma, alloc, self.sim.antennas, terms, &d_sinr);
                    for (slot, pairs) in inputs {
                        for (a, &p) in adj64[slot.0].iter_mut().zip(pairs) {
                            *a += d_rho[p];
                        }
                    }
                }
                Node::Normalize {
                    input,
                    out,
                    rho_hat,
                    sum,
                } => {
                    let p = self.sim.p_dl_max_mw;
                    let d_out = adj64[out.0].clone();
                    let d_in = &mut adj64[input.0];
                    if *sum <= p {
                        for (a, g) in d_in.iter_mut().zip(&d_out) {
                            *a += g;
                        }
                    } else {
                        let alpha = p / sum;
                        let through_sum: f64 = d_out.iter().zip(rho_hat).map(|(g, r)| g * r).sum::<f64>() * p / (sum * sum);
                        for (a, g) in d_in.iter_mut().zip(&d_out) {
                            *a += alpha * g - through_sum;
                        }
                    }
                }
                Node::Latent { input, out, y } => {
                    let scale = cfg.latent_scale_mw;
                    let d_out = &adj64[out.0];
                    let d_in = &mut adj[input.0];
                    for ((a, g), yv) in d_in.iter_mut().zip(d_out).zip(y) {
                        *a += F::of(g * scale * softplus_grad(yv.f64()));
                    }
                }
                Node::Selu { input, out, z } => {
                    let (_, w) = self.shapes[out.0];
                    let d_out = adj[out.0].clone();
                    let d_in = &mut adj[input.0];
                    for (t, zt) in z.iter().enumerate() {
                        for j in 0..w {
                            d_in[t * w + j] += d_out[t * w + j] * selu_grad(zt[j]);
                        }
                    }
                }
                Node::Dense { layer, input, out, x } => {
                    let (_, w_out) = self.shapes[out.0];
                    let (_, w_in) = self.shapes[input.0];
                    let (w, _) = params.dense(*layer);
                    let d_out = adj[out.0].clone();
                    let (dw, db) = dense_grads(&params.layout, &mut grad, *layer);
                    let mut dx = vec![F::zero(); w_in];
                    for (t, xt) in x.iter().enumerate() {
                        let dy = &d_out[t * w_out..(t + 1) * w_out];
                        affine_backward(w, xt, dy, dw, db, Some(&mut dx));
                        for (a, v) in adj[input.0][t * w_in..(t + 1) * w_in].iter_mut().zip(&dx) {
                            *a += *v;
                        }
                    }
                    if fault == Some(Fault::DenseWeight(*layer)) {
                        dw.iter_mut().for_each(|v| *v = *v * F::of(1.5));
                    }
                }
                Node::Exp10Clamp {
                    input,
                    out,
                    s,
                    s_tilde,
                } => {
                    let clamp = F::of(cfg.clamp);
                    let slope = if fault == Some(Fault::Exp10Slope) {
                        F::one()
                    } else {
                        F::of(std::f64::consts::LN_10)
                    };
                    let d_out = adj[out.0].clone();
                    let d_in = &mut adj[input.0];
                    for (t, (st, et)) in s.iter().zip(s_tilde).enumerate() {
                        for j in 0..h {
                            if st[j] <= clamp && st[j] >= -clamp {
                                d_in[t * h + j] += d_out[t * h + j] * slope * et[j];
                            }
                        }
                    }
                }
                Node::Add { a, b, out } => {
                    let d_out = adj[out.0].clone();
                    for slot in [a, b] {
                        for (x, g) in adj[slot.0].iter_mut().zip(&d_out) {
                            *x += *g;
                        }
                    }
                }
                Node::Lstm { dir, out, x, steps } => {
                    let wts = params.lstm(*dir);
                    let d_out = &adj[out.0];
                    let mut g = lstm_grads(&params.layout, &mut grad, *dir, h, d_in);
                    let n = steps.len();
                    let order: Vec<usize> = match dir {
                        Direction::Forward => (0..n).rev().collect(),
                        Direction::Backward => (0..n).collect(),
                    };
                    let drop_carry = fault == Some(Fault::RecurrentCarry(*dir));
                    let mut dh_next = vec![F::zero(); h];
                    let mut dc_next = vec![F::zero(); h];
                    for (i, &t) in order.iter().enumerate() {
                        let prev_t = order.get(i + 1).copied();
                        let prev = prev_t.map(|p| (&steps[p].h[..], &steps[p].c[..]));
                        let dh: Vec<F> = d_out[t * h..(t + 1) * h].iter().zip(&dh_next).map(|(a, b)| *a + *b).collect();
                        match lstm_step_backward(wts, &mut g, &x[t], prev, &steps[t], &dh, &dc_next) {
                            Some((dhp, dcp)) if !drop_carry => {
                                dh_next = dhp;
                                dc_next = dcp;
                            }
                            _ => {
                                dh_next.iter_mut().for_each(|v| *v = F::zero());
                                dc_next.iter_mut().for_each(|v| *v = F::zero());
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}
