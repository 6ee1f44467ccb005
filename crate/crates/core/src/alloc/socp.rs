//! First-order feasibility solver for second-order-cone systems.
//!
//! Finds `x` with `x ∈ C` and `A x + c ∈ K`, where `C` is a product of
//! nonnegative unit-ball blocks `{x_b ≥ 0, ‖x_b‖ ≤ 1}` and `K` a product of
//! Lorentz cones `{(s, v) : ‖v‖ ≤ s}`. The iteration is a preconditioned
//! primal-dual hybrid gradient scheme with block-constant step sizes, so both
//! proximal maps reduce to exact Euclidean projections.
//!
//! Every verdict comes with evidence: a feasible point whose cone slack is
//! within tolerance, or a dual ray `y ∈ K` with
//! `Σ_b ‖(Aᵀy)_b⁺‖ + ⟨y, c⟩ < 0`, which no `x ∈ C` can satisfy.

use std::ops::Range;

/// Row-compressed sparse matrix.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    ncols: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            row_ptr: vec![0],
            ..Default::default()
        }
    }

    /// Appends a row given as `(column, value)` entries.
    pub fn push_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) {
        for (j, v) in entries {
            debug_assert!(j < self.ncols);
            self.col.push(j);
            self.val.push(v);
        }
        self.row_ptr.push(self.col.len());
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            *o = self.col[r.clone()]
                .iter()
                .zip(&self.val[r])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
    }

    pub fn mul_t(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col[e]] += self.val[e] * yi;
            }
        }
    }

    fn row_abs_sums(&self) -> Vec<f64> {
        (0..self.nrows())
            .map(|i| self.val[self.row_ptr[i]..self.row_ptr[i + 1]].iter().map(|v| v.abs()).sum())
            .collect()
    }

    fn col_abs_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.ncols];
        for (j, v) in self.col.iter().zip(&self.val) {
            s[*j] += v.abs();
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ConeSystem {
    pub a: Csr,
    pub c: Vec<f64>,
    /// Row ranges of the Lorentz cones; the first row of each is the scalar part.
    pub cones: Vec<Range<usize>>,
    /// Variable blocks of `C`; every variable belongs to exactly one block.
    pub var_blocks: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative cone slack accepted as feasible.
    pub tol: f64,
    /// Iterations between convergence checks.
    pub check_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            tol: 1e-6,
            check_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Feasible { x: Vec<f64>, residual: f64 },
    Infeasible,
    /// Iteration cap hit; `x` is the last primal iterate and `residual` its slack.
    Undecided { x: Vec<f64>, residual: f64 },
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub verdict: Verdict,
    pub iterations: usize,
}

/// Euclidean projection onto `{(s, v) : ‖v‖ ≤ s}`, in place.
pub fn project_soc(z: &mut [f64]) {
    let s = z[0];
    let nv = z[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if nv <= s {
        return;
    }
    if nv <= -s {
        z.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let a = 0.5 * (s + nv);
    z[0] = a;
    let f = a / nv;
    z[1..].iter_mut().for_each(|v| *v *= f);
}

/// Projection onto `{x ≥ 0, ‖x‖ ≤ 1}` for one block.
fn project_block(x: &mut [f64], idx: &[usize]) {
    let mut n2 = 0.0;
    for &j in idx {
        if x[j] < 0.0 {
            x[j] = 0.0;
        }
        n2 += x[j] * x[j];
    }
    if n2 > 1.0 {
        let f = 1.0 / n2.sqrt();
        for &j in idx {
            x[j] *= f;
        }
    }
}

impl ConeSystem {
    pub fn project_primal(&self, x: &mut [f64]) {
        for b in &self.var_blocks {
            project_block(x, b);
        }
    }

    /// Largest relative cone violation `max_k (‖v_k‖ - s_k)⁺ / max(‖v_k‖, 1)`.
    pub fn residual(&self, x: &[f64], z: &mut [f64]) -> f64 {
        self.a.mul(x, z);
        let mut worst: f64 = 0.0;
        for r in &self.cones {
            let s = z[r.start] + self.c[r.start];
            let nv = (r.start + 1..r.end)
                .map(|i| (z[i] + self.c[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max((nv - s).max(0.0) / nv.max(1.0));
        }
        worst
    }

    /// True if `y` (projected onto `K`) certifies infeasibility.
    fn certifies_infeasible(&self, y: &[f64], scratch: &mut [f64]) -> bool {
        let mut yc = y.to_vec();
        for r in &self.cones {
            project_soc(&mut yc[r.clone()]);
        }
        let norm = yc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return false;
        }
        self.a.mul_t(&yc, scratch);
        let support: f64 = self
            .var_blocks
            .iter()
            .map(|b| b.iter().map(|&j| scratch[j].max(0.0).powi(2)).sum::<f64>().sqrt())
            .sum();
        let offset: f64 = yc.iter().zip(&self.c).map(|(a, b)| a * b).sum();
        support + offset < -1e-9 * norm
    }

    pub fn solve(&self, x0: &[f64], opts: &SolverOptions) -> SolveReport {
        let n = self.a.ncols();
        let m = self.a.nrows();
        assert_eq!(x0.len(), n);
        let rows = self.a.row_abs_sums();
        let cols = self.a.col_abs_sums();
        let sigma: Vec<f64> = self
            .cones
            .iter()
            .map(|r| {
                let mx = rows[r.clone()].iter().copied().fold(0.0, f64::max);
                if mx > 0.0 { 0.95 / mx } else { 1.0 }
            })
            .collect();
        let mut tau = vec![1.0; n];
        for b in &self.var_blocks {
            let mx = b.iter().map(|&j| cols[j]).fold(0.0, f64::max);
            let t = if mx > 0.0 { 0.95 / mx } else { 1.0 };
            for &j in b {
                tau[j] = t;
            }
        }

        let mut x = x0.to_vec();
        self.project_primal(&mut x);
        let mut x_new = vec![0.0; n];
        let mut y = vec![0.0; m];
        let mut y_mark = vec![0.0; m];
        let mut aty = vec![0.0; n];
        let mut ax = vec![0.0; m];
        let mut scratch = vec![0.0; n];
        let mut zbuf = vec![0.0; m];

        let mut residual = self.residual(&x, &mut zbuf);
        if residual <= opts.tol {
            return SolveReport {
                verdict: Verdict::Feasible { x, residual },
                iterations: 0,
            };
        }
        for it in 1..=opts.max_iter {
            self.a.mul_t(&y, &mut aty);
            for j in 0..n {
                x_new[j] = x[j] - tau[j] * aty[j];
            }
            self.project_primal(&mut x_new);
            for j in 0..n {
                scratch[j] = 2.0 * x_new[j] - x[j];
            }
            std::mem::swap(&mut x, &mut x_new);
            self.a.mul(&scratch, &mut ax);
            for (b, r) in self.cones.iter().enumerate() {
                let s = sigma[b];
                // w = y + σ A x̄ ; y⁺ = w - σ (Π_K(w/σ + c) - c)
                for i in r.clone() {
                    zbuf[i] = (y[i] + s * ax[i]) / s + self.c[i];
                }
                project_soc(&mut zbuf[r.clone()]);
                for i in r.clone() {
                    let w = y[i] + s * ax[i];
                    y[i] = w - s * (zbuf[i] - self.c[i]);
                }
            }
            if it % opts.check_every == 0 {
                residual = self.residual(&x, &mut zbuf);
                if residual <= opts.tol {
                    return SolveReport {
                        verdict: Verdict::Feasible { x, residual },
                        iterations: it,
                    };
                }
                let neg: Vec<f64> = y.iter().map(|v| -v).collect();
                let step: Vec<f64> = y.iter().zip(&y_mark).map(|(a, b)| b - a).collect();
                if self.certifies_infeasible(&neg, &mut scratch)
                    || self.certifies_infeasible(&step, &mut scratch)
                {
                    return SolveReport {
                        verdict: Verdict::Infeasible,
                        iterations: it,
                    };
                }
                y_mark.copy_from_slice(&y);
            }
        }
        SolveReport {
            verdict: Verdict::Undecided { x, residual },
            iterations: opts.max_iter,
        }
    }
}
