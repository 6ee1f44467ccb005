//! AP-centric BiLSTM power allocator.
//!
//! Each AP reads the feature sequence of the UEs it serves, runs a
//! bidirectional LSTM over it, maps the summed hidden states to the linear
//! domain (`10^s`), and a small dense head turns every position into a
//! positive latent power. The latents are scaled down per AP whenever they
//! would exceed the budget.

pub mod checkpoint;
pub mod features;
pub mod kernels;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::netgen::{stream_rng, NetworkSnapshot};
use crate::perf::PowerAllocation;

pub use features::{build_features, FeatureMode, FeatureSeq, FeatureSet, Neighborhood, FEATURE_DIM};
pub use kernels::Scalar;
use kernels::{affine, lstm_step, selu, sigmoid, softplus, LstmGrads, LstmStep, LstmWeights};

/// RNG stream reserved for inference-time UE orderings.
const ORDER_STREAM: u64 = 0x6f72_6465_72;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// LSTM state size H, shared by both directions.
    pub hidden: usize,
    pub d_in: usize,
    /// Widths of the SELU layers between the BiLSTM and the scalar output.
    pub head_dims: Vec<usize>,
    /// Latent power is `latent_scale_mw · softplus(y)`.
    pub latent_scale_mw: f64,
    /// Summed hidden states are clamped to `[-clamp, clamp]` before `10^s`.
    pub clamp: f64,
    pub features: FeatureMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            d_in: FEATURE_DIM,
            head_dims: vec![64, 16],
            latent_scale_mw: 1000.0,
            clamp: 8.0,
            features: FeatureMode::Global,
        }
    }
}

impl PolicyConfig {
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.d_in == 0 {
            return bad("policy hidden size and input width must be positive");
        }
        if self.head_dims.iter().any(|&d| d == 0) {
            return bad("policy head widths must be positive");
        }
        if !(self.latent_scale_mw > 0.0 && self.latent_scale_mw.is_finite()) {
            return bad("policy latent_scale_mw must be positive and finite");
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad("policy clamp must be positive and finite");
        }
        if let FeatureMode::Scalable(Neighborhood::Radius(r)) = self.features {
            if !(r >= 0.0) {
                return bad("feature radius must be nonnegative");
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.hidden];
        dims.extend(&self.head_dims);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "lstm_fwd",
            Direction::Backward => "lstm_bwd",
        }
    }
}

/// A named, row-major block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Serialization order: forward LSTM, backward LSTM, head layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let h = cfg.hidden;
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        for dir in [Direction::Forward, Direction::Backward] {
            shapes.push((format!("{}.w_ih", dir.name()), 4 * h, cfg.d_in));
            shapes.push((format!("{}.w_hh", dir.name()), 4 * h, h));
            shapes.push((format!("{}.b", dir.name()), 4 * h, 1));
        }
        for (i, (fan_in, fan_out)) in cfg.dense_shapes().into_iter().enumerate() {
            shapes.push((format!("head.{i}.w"), fan_out, fan_in));
            shapes.push((format!("head.{i}.b"), fan_out, 1));
        }
        let mut offset = 0;
        let segments = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = Segment {
                    name,
                    offset,
                    rows,
                    cols,
                };
                offset += s.len();
                s
            })
            .collect();
        Self {
            segments,
            total: offset,
        }
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Human-readable location of flat index `i`, e.g. `head.1.w[3,7]`.
    pub fn path(&self, i: usize) -> String {
        match self.segments.iter().find(|s| s.range().contains(&i)) {
            Some(s) => {
                let j = i - s.offset;
                if s.cols == 1 {
                    format!("{}[{}]", s.name, j)
                } else {
                    format!("{}[{},{}]", s.name, j / s.cols, j % s.cols)
                }
            }
            None => format!("<out of range {i}>"),
        }
    }

    /// Contiguous range holding one LSTM direction (`w_ih`, `w_hh`, `b`).
    fn lstm_range(&self, dir: Direction) -> std::ops::Range<usize> {
        let base = if dir == Direction::Forward { 0 } else { 3 };
        self.segments[base].offset..self.segments[base + 2].range().end
    }

    fn dense_segments(&self, layer: usize) -> (&Segment, &Segment) {
        (&self.segments[6 + 2 * layer], &self.segments[7 + 2 * layer])
    }

    pub fn num_dense(&self) -> usize {
        (self.segments.len() - 6) / 2
    }
}

/// Flat parameter vector together with the shape it encodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<F> {
    pub cfg: PolicyConfig,
    pub layout: ParamLayout,
    pub data: Vec<F>,
}

impl<F: Scalar> PolicyParams<F> {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let layout = ParamLayout::new(cfg);
        Self {
            cfg: cfg.clone(),
            data: vec![F::zero(); layout.total],
            layout,
        }
    }

    pub fn from_data(cfg: &PolicyConfig, data: Vec<F>) -> Result<Self> {
        let layout = ParamLayout::new(cfg);
        if data.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    /// LSTM weights `U(±1/√H)` with forget bias 1, dense layers LeCun uniform
    /// with zero bias.
    pub fn init(cfg: &PolicyConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = stream_rng(seed, 0x696e_6974);
        let h = cfg.hidden;
        let lstm_bound = 1.0 / (h as f64).sqrt();
        let layout = p.layout.clone();
        for s in &layout.segments {
            let slot = &mut p.data[s.range()];
            if s.name.ends_with(".b") {
                if s.name.starts_with("lstm") {
                    slot[h..2 * h].iter_mut().for_each(|v| *v = F::one());
                }
                continue;
            }
            let bound = if s.name.starts_with("lstm") {
                lstm_bound
            } else {
                (3.0 / s.cols as f64).sqrt()
            };
            for v in slot.iter_mut() {
                *v = F::of(rng.gen_range(-bound..bound));
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn cast<G: Scalar>(&self) -> PolicyParams<G> {
        PolicyParams {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn lstm(&self, dir: Direction) -> LstmWeights<'_, F> {
        lstm_view(&self.layout, &self.data, dir, self.cfg.hidden, self.cfg.d_in)
    }

    /// `(W, b)` of dense layer `i`.
    pub fn dense(&self, layer: usize) -> (&[F], &[F]) {
        let (w, b) = self.layout.dense_segments(layer);
        (&self.data[w.range()], &self.data[b.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn lstm_view<'a, F>(layout: &ParamLayout, data: &'a [F], dir: Direction, h: usize, d_in: usize) -> LstmWeights<'a, F> {
    let r = layout.lstm_range(dir);
    let d = &data[r];
    let (w_ih, rest) = d.split_at(4 * h * d_in);
    let (w_hh, b) = rest.split_at(4 * h * h);
    LstmWeights {
        w_ih,
        w_hh,
        b,
        hidden: h,
    }
}

/// Mutable gradient views into a flat vector laid out like `layout`.
pub fn lstm_grads<'a, F>(layout: &ParamLayout, grad: &'a mut [F], dir: Direction, h: usize, d_in: usize) -> LstmGrads<'a, F> {
    let r = layout.lstm_range(dir);
    let d = &mut grad[r];
    let (w_ih, rest) = d.split_at_mut(4 * h * d_in);
    let (w_hh, b) = rest.split_at_mut(4 * h * h);
    LstmGrads { w_ih, w_hh, b }
}

/// `(dW, db)` views of dense layer `i`.
pub fn dense_grads<'a, F>(layout: &ParamLayout, grad: &'a mut [F], layer: usize) -> (&'a mut [F], &'a mut [F]) {
    let (w, b) = layout.dense_segments(layer);
    debug_assert_eq!(w.range().end, b.offset);
    let (dw, db) = grad[w.offset..b.range().end].split_at_mut(w.len());
    (dw, db)
}

/// Every intermediate of one sequence pass.
#[derive(Clone, Debug)]
pub struct SeqTrace<F> {
    pub x: Vec<Vec<F>>,
    /// Forward-direction step at each position.
    pub fwd: Vec<LstmStep<F>>,
    /// Backward-direction step at each position (run from the last position down).
    pub bwd: Vec<LstmStep<F>>,
    /// `h_fwd + h_bwd` before clamping.
    pub s: Vec<Vec<F>>,
    pub s_tilde: Vec<Vec<F>>,
    /// Per dense layer and position: the layer input.
    pub head_in: Vec<Vec<Vec<F>>>,
    /// Per dense layer and position: the pre-activation.
    pub head_pre: Vec<Vec<Vec<F>>>,
    pub y: Vec<F>,
    pub rho_hat: Vec<f64>,
    pub clamped: usize,
}

fn check_finite<F: Scalar>(layer: impl Fn() -> String, v: &[F]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

/// Runs the network over one AP sequence, keeping every intermediate.
pub fn forward_trace<F: Scalar>(params: &PolicyParams<F>, u: &[[f64; FEATURE_DIM]]) -> Result<SeqTrace<F>> {
    let cfg = &params.cfg;
    if u.is_empty() {
        return Err(Error::Config("policy input sequence is empty".into()));
    }
    if cfg.d_in != FEATURE_DIM {
        return Err(Error::Config(format!(
            "policy expects {} inputs per position, features provide {FEATURE_DIM}",
            cfg.d_in
        )));
    }
    let n = u.len();
    let x: Vec<Vec<F>> = u.iter().map(|r| r.iter().map(|&v| F::of(v)).collect()).collect();
    let wf = params.lstm(Direction::Forward);
    let wb = params.lstm(Direction::Backward);

    let mut fwd: Vec<LstmStep<F>> = Vec::with_capacity(n);
    for t in 0..n {
        let step = lstm_step(wf, &x[t], fwd.last().map(|s| (&s.h[..], &s.c[..])));
        check_finite(|| format!("lstm_fwd (position {t})"), &step.c)?;
        fwd.push(step);
    }
    let mut bwd: Vec<LstmStep<F>> = Vec::with_capacity(n);
    for t in (0..n).rev() {
        let step = lstm_step(wb, &x[t], bwd.last().map(|s| (&s.h[..], &s.c[..])));
        check_finite(|| format!("lstm_bwd (position {t})"), &step.c)?;
        bwd.push(step);
    }
    bwd.reverse();

    let clamp = F::of(cfg.clamp);
    let ten = F::of(10.0);
    let mut clamped = 0;
    let mut s = Vec::with_capacity(n);
    let mut s_tilde = Vec::with_capacity(n);
    for t in 0..n {
        let st: Vec<F> = fwd[t].h.iter().zip(&bwd[t].h).map(|(a, b)| *a + *b).collect();
        let e: Vec<F> = st
            .iter()
            .map(|&v| {
                if v > clamp || v < -clamp {
                    clamped += 1;
                }
                ten.powf(v.max(-clamp).min(clamp))
            })
            .collect();
        s.push(st);
        s_tilde.push(e);
    }
    if clamped > 0 {
        log::debug!("{clamped} hidden entries clamped before exponentiation");
    }

    let layers = params.layout.num_dense();
    let mut head_in = Vec::with_capacity(layers);
    let mut head_pre = Vec::with_capacity(layers);
    let mut a = s_tilde.clone();
    for j in 0..layers {
        let (w, b) = params.dense(j);
        let z: Vec<Vec<F>> = a
            .iter()
            .map(|xt| {
                let mut out = vec![F::zero(); b.len()];
                affine(w, b, xt, &mut out);
                out
            })
            .collect();
        for zt in &z {
            check_finite(|| format!("head.{j}"), zt)?;
        }
        let next = if j + 1 < layers {
            z.iter().map(|zt| zt.iter().map(|&v| selu(v)).collect()).collect()
        } else {
            Vec::new()
        };
        head_in.push(std::mem::replace(&mut a, next));
        head_pre.push(z);
    }
    let y: Vec<F> = head_pre[layers - 1].iter().map(|z| z[0]).collect();
    let rho_hat: Vec<f64> = y.iter().map(|v| cfg.latent_scale_mw * softplus(v.f64())).collect();
    if rho_hat.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::NonFinite {
            layer: "softplus output".into(),
        });
    }
    Ok(SeqTrace {
        x,
        fwd,
        bwd,
        s,
        s_tilde,
        head_in,
        head_pre,
        y,
        rho_hat,
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqOutput<F> {
    pub y: Vec<F>,
    pub rho_hat: Vec<f64>,
    pub clamped: usize,
}

pub fn forward<F: Scalar>(params: &PolicyParams<F>, seq: &FeatureSeq) -> Result<SeqOutput<F>> {
    let t = forward_trace(params, &seq.u)?;
    Ok(SeqOutput {
        y: t.y,
        rho_hat: t.rho_hat,
        clamped: t.clamped,
    })
}

/// `min{1, P / S}`.
pub fn budget_scale(sum: f64, p_max: f64) -> f64 {
    if sum <= p_max {
        1.0
    } else {
        p_max / sum
    }
}

/// Scales one AP's latent powers into its budget.
pub fn normalize(rho_hat: &[f64], p_max: f64) -> Vec<f64> {
    let a = budget_scale(rho_hat.iter().sum(), p_max);
    rho_hat.iter().map(|r| a * r).collect()
}

/// A random processing order per AP (empty for idle APs).
pub fn ue_orders<R: Rng + ?Sized>(snap: &NetworkSnapshot, rng: &mut R) -> Vec<Vec<usize>> {
    snap.served
        .iter()
        .map(|s| {
            let mut o: Vec<usize> = (0..s.len()).collect();
            o.shuffle(rng);
            o
        })
        .collect()
}

/// The fixed orders used by [`infer`] for a given `perm_seed`.
pub fn inference_orders(snap: &NetworkSnapshot, perm_seed: u64) -> Vec<Vec<usize>> {
    ue_orders(snap, &mut stream_rng(perm_seed, ORDER_STREAM))
}

/// One AP's pass: trace, topology index of each position, and normalized powers.
#[derive(Clone, Debug)]
pub struct ApPass<F> {
    pub ap: usize,
    pub pairs: Vec<usize>,
    pub trace: SeqTrace<F>,
    pub latent_sum: f64,
    pub rho: Vec<f64>,
}

/// Runs every active AP in index order with the given per-AP UE orders.
pub fn run_aps<F: Scalar>(
    params: &PolicyParams<F>,
    snap: &NetworkSnapshot,
    cfg: &SimConfig,
    orders: &[Vec<usize>],
) -> Result<Vec<ApPass<F>>> {
    let feats = build_features(snap, cfg.sigma2_dl(), params.cfg.features);
    let topo = snap.topology();
    feats
        .seqs
        .iter()
        .map(|seq| {
            let seq = seq.permuted(&orders[seq.ap]);
            let trace = forward_trace(params, &seq.u)?;
            let pairs = seq
                .ue_order
                .iter()
                .map(|&k| topo.find(k, seq.ap).expect("served UE has a pair"))
                .collect();
            let latent_sum = trace.rho_hat.iter().sum();
            let rho = normalize(&trace.rho_hat, cfg.p_dl_max_mw);
            Ok(ApPass {
                ap: seq.ap,
                pairs,
                trace,
                latent_sum,
                rho,
            })
        })
        .collect()
}

pub fn assemble(snap: &NetworkSnapshot, passes: &[ApPass<impl Scalar>], p_max: f64) -> PowerAllocation {
    let mut alloc = PowerAllocation::zeros(snap);
    for pass in passes {
        for (&p, &r) in pass.pairs.iter().zip(&pass.rho) {
            alloc.rho[p] = r;
        }
    }
    alloc.fit_budget(snap, p_max);
    alloc
}

pub fn infer_ordered<F: Scalar>(
    params: &PolicyParams<F>,
    snap: &NetworkSnapshot,
    cfg: &SimConfig,
    orders: &[Vec<usize>],
) -> Result<PowerAllocation> {
    Ok(assemble(snap, &run_aps(params, snap, cfg, orders)?, cfg.p_dl_max_mw))
}

/// Power allocation chosen by the policy for `snap`.
pub fn infer<F: Scalar>(params: &PolicyParams<F>, snap: &NetworkSnapshot, cfg: &SimConfig, perm_seed: u64) -> Result<PowerAllocation> {
    infer_ordered(params, snap, cfg, &inference_orders(snap, perm_seed))
}

/// Analytic model size and per-pair cost, counting one MAC as two FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub param_count: usize,
    pub lstm_params: usize,
    pub head_params: usize,
    pub lstm_flops: usize,
    pub head_flops: usize,
    pub flops_per_pair: usize,
    pub memory_bytes: usize,
}

impl Complexity {
    pub fn memory_mib(&self) -> f64 {
        self.memory_bytes as f64 / (1024.0 * 1024.0)
    }

    /// Cost of one inference over `pairs` active AP-UE links.
    pub fn total_flops(&self, pairs: usize) -> usize {
        self.flops_per_pair * pairs
    }
}

pub fn count_params_and_flops(cfg: &PolicyConfig) -> Complexity {
    let (h, d) = (cfg.hidden, cfg.d_in);
    let lstm_params = 2 * 4 * h * (d + h + 1);
    let shapes = cfg.dense_shapes();
    let head_params: usize = shapes.iter().map(|(i, o)| o * (i + 1)).sum();
    let lstm_flops = 2 * 8 * h * (h + d + 1) + h;
    let head_flops: usize = shapes.iter().map(|(i, o)| 2 * i * o).sum();
    let param_count = lstm_params + head_params;
    Complexity {
        param_count,
        lstm_params,
        head_params,
        lstm_flops,
        head_flops,
        flops_per_pair: lstm_flops + head_flops,
        memory_bytes: 4 * param_count,
    }
}

/// `d softplus(y) / dy`.
pub(crate) fn softplus_grad(y: f64) -> f64 {
    sigmoid(y)
}
