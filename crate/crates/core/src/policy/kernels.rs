//! Numeric building blocks shared by inference and the training tape.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type the network runs in (f32 for training, f64 for checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn selu<F: Scalar>(x: F) -> F {
    let l = F::of(SELU_LAMBDA);
    if x > F::zero() {
        l * x
    } else {
        l * F::of(SELU_ALPHA) * x.exp_m1()
    }
}

#[inline]
pub fn selu_grad<F: Scalar>(x: F) -> F {
    let l = F::of(SELU_LAMBDA);
    if x > F::zero() {
        l
    } else {
        l * F::of(SELU_ALPHA) * x.exp()
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += a x`
#[inline]
pub fn axpy<F: Scalar>(a: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

/// `out = W x + b` for row-major `W` (rows = out.len()).
pub fn affine<F: Scalar>(w: &[F], b: &[F], x: &[F], out: &mut [F]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and, if requested, `dx = Wᵀ dy`.
pub fn affine_backward<F: Scalar>(
    w: &[F],
    x: &[F],
    dy: &[F],
    dw: &mut [F],
    db: &mut [F],
    dx: Option<&mut [F]>,
) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == F::zero() {
            continue;
        }
        axpy(g, x, &mut dw[r * cols..(r + 1) * cols]);
        db[r] += g;
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = F::zero());
        for (r, &g) in dy.iter().enumerate() {
            if g != F::zero() {
                axpy(g, &w[r * cols..(r + 1) * cols], dx);
            }
        }
    }
}

/// Weights of one LSTM direction. Gate rows are ordered input, forget,
/// cell candidate, output; a single bias vector per gate.
#[derive(Clone, Copy)]
pub struct LstmWeights<'a, F> {
    pub w_ih: &'a [F],
    pub w_hh: &'a [F],
    pub b: &'a [F],
    pub hidden: usize,
}

pub struct LstmGrads<'a, F> {
    pub w_ih: &'a mut [F],
    pub w_hh: &'a mut [F],
    pub b: &'a mut [F],
}

/// Everything one cell step needs for its reverse pass.
#[derive(Clone, Debug)]
pub struct LstmStep<F> {
    /// Activated gates `[i, f, g, o]`, 4H.
    pub gates: Vec<F>,
    pub c: Vec<F>,
    pub tanh_c: Vec<F>,
    pub h: Vec<F>,
}

pub fn lstm_step<F: Scalar>(
    w: LstmWeights<F>,
    x: &[F],
    prev: Option<(&[F], &[F])>,
) -> LstmStep<F> {
    let h = w.hidden;
    let mut z = vec![F::zero(); 4 * h];
    affine(w.w_ih, w.b, x, &mut z);
    if let Some((h_prev, _)) = prev {
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += dot(&w.w_hh[r * h..(r + 1) * h], h_prev);
        }
    }
    for v in &mut z[..2 * h] {
        *v = sigmoid(*v);
    }
    for v in &mut z[2 * h..3 * h] {
        *v = v.tanh();
    }
    for v in &mut z[3 * h..] {
        *v = sigmoid(*v);
    }
    let mut c = vec![F::zero(); h];
    let mut tanh_c = vec![F::zero(); h];
    let mut hv = vec![F::zero(); h];
    for j in 0..h {
        let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
        let cp = prev.map_or(F::zero(), |(_, c_prev)| c_prev[j]);
        c[j] = f * cp + i * g;
        tanh_c[j] = c[j].tanh();
        hv[j] = o * tanh_c[j];
    }
    LstmStep {
        gates: z,
        c,
        tanh_c,
        h: hv,
    }
}

/// Reverse pass of one step. `dh`/`dc` are the adjoints of this step's
/// outputs; returns the adjoints of `(h_prev, c_prev)` when there is a previous step.
pub fn lstm_step_backward<F: Scalar>(
    w: LstmWeights<F>,
    g: &mut LstmGrads<F>,
    x: &[F],
    prev: Option<(&[F], &[F])>,
    step: &LstmStep<F>,
    dh: &[F],
    dc: &[F],
) -> Option<(Vec<F>, Vec<F>)> {
    let h = w.hidden;
    let one = F::one();
    let gt = &step.gates;
    let mut dz = vec![F::zero(); 4 * h];
    let mut dc_prev = vec![F::zero(); h];
    for j in 0..h {
        let (i, f, gg, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
        let tc = step.tanh_c[j];
        let dct = dc[j] + dh[j] * o * (one - tc * tc);
        let cp = prev.map_or(F::zero(), |(_, c_prev)| c_prev[j]);
        dz[j] = dct * gg * i * (one - i);
        dz[h + j] = dct * cp * f * (one - f);
        dz[2 * h + j] = dct * i * (one - gg * gg);
        dz[3 * h + j] = dh[j] * tc * o * (one - o);
        dc_prev[j] = dct * f;
    }
    affine_backward(w.w_ih, x, &dz, g.w_ih, g.b, None);
    let (h_prev, _) = prev?;
    let mut dh_prev = vec![F::zero(); h];
    for (r, &d) in dz.iter().enumerate() {
        if d != F::zero() {
            axpy(d, h_prev, &mut g.w_hh[r * h..(r + 1) * h]);
            axpy(d, &w.w_hh[r * h..(r + 1) * h], &mut dh_prev);
        }
    }
    Some((dh_prev, dc_prev))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!(softplus(-30.0f64) > 0.0);
        assert!((softplus(0.0f32) - 0.693_147_2).abs() < 1e-6);
    }

    #[test]
    fn selu_and_grad_agree() {
        for &x in &[-2.0f64, -0.3, 0.4, 3.0] {
            let h = 1e-6;
            let fd = (selu(x + h) - selu(x - h)) / (2.0 * h);
            assert!((fd - selu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-10);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}
