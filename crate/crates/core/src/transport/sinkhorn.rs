//! Entropic optimal transport.
//!
//! Point clouds use a log-stabilized sparse scaling iteration: potentials
//! `(f, g)` carry the bulk of the dual variables, the kernel
//! `K̃_ij = exp((f_i + g_j − c_ij)/ε)` is stored only where it exceeds
//! `e^{-θ}` (relative to its row or column maximum), and the scalings `(u, v)`
//! are absorbed back into the potentials whenever they drift far from one.
//! `ε` is reached through a geometric schedule from the squared extent of the
//! supports.
//!
//! Two measures on the same grid use the convolutional variant: the Gaussian
//! kernel is separable, so each update is a sequence of 1D log-domain
//! convolutions along the axes.
//!
//! The plan is `π_ij = a_i b_j exp((f_i + g_j − c_ij)/ε)` with `c = |x − y|²`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{GridDensity, GridLayout, ParticleEnsemble};

/// Finitely supported probability measure with arbitrary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.nrows() != weights.len() {
            return Err(Error::SizeMismatch(points.nrows(), weights.len()));
        }
        if points.nrows() == 0 {
            return Err(Error::EmptySet);
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { integral: total });
        }
        let points = points.as_standard_layout().into_owned();
        Ok(Self { points, weights })
    }

    pub fn from_ensemble(e: &ParticleEnsemble) -> Self {
        let n = e.len();
        Self {
            points: e.positions().as_standard_layout().into_owned(),
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn from_grid(g: &GridDensity) -> Self {
        let masses = g.masses();
        let total: f64 = masses.iter().sum();
        Self {
            points: g.layout().centers(),
            weights: masses.into_iter().map(|m| m / total).collect(),
        }
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn flat(&self) -> &[f64] {
        self.points.as_slice().expect("standard layout")
    }
}

/// Inputs accepted by [`sinkhorn`].
#[derive(Debug, Clone, Copy)]
pub enum OtMeasure<'a> {
    Ensemble(&'a ParticleEnsemble),
    Grid(&'a GridDensity),
}

impl OtMeasure<'_> {
    fn to_discrete(self) -> DiscreteMeasure {
        match self {
            OtMeasure::Ensemble(e) => DiscreteMeasure::from_ensemble(e),
            OtMeasure::Grid(g) => DiscreteMeasure::from_grid(g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkhornMode {
    /// Log-stabilized sparse scaling with ε-scaling (default).
    Stabilized,
    /// Textbook kernel scaling with `K = exp(−c/ε)`; fails on underflow.
    Plain,
}

#[derive(Debug, Clone)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// Bound on the L1 marginal violation.
    pub tol: f64,
    /// Total scaling iterations across all ε stages.
    pub max_iter: usize,
    pub mode: SinkhornMode,
    /// Kernel truncation threshold `θ` (entries below `e^{-θ}` are dropped).
    pub truncation: f64,
    /// First ε of the schedule; defaults to the squared extent of the supports.
    pub scaling_start: Option<f64>,
    pub scaling_factor: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            tol: 1e-6,
            max_iter: 20_000,
            mode: SinkhornMode::Stabilized,
            truncation: 20.0,
            scaling_start: None,
            scaling_factor: 0.25,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.scaling_factor > 0.0 && self.scaling_factor < 1.0) {
            return Err(Error::InvalidArgument("scaling factor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn schedule(&self, extent_sq: f64) -> Vec<f64> {
        let mut eps = self.scaling_start.unwrap_or(extent_sq).max(self.epsilon);
        let mut out = vec![eps];
        while eps > self.epsilon {
            eps = (eps * self.scaling_factor).max(self.epsilon);
            out.push(eps);
        }
        out
    }
}

/// Dual potentials and diagnostics of an entropic transport problem.
#[derive(Debug, Clone)]
pub struct EntropicPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// L1 violation of the column marginal (rows are exact).
    pub marginal_error: f64,
    pub converged: bool,
    /// `⟨c, π⟩`.
    pub primal_cost: f64,
    /// `⟨c, π⟩ + ε KL(π | a ⊗ b)`.
    pub regularized_cost: f64,
    source: DiscreteMeasure,
    target: DiscreteMeasure,
}

impl EntropicPotentials {
    pub fn source(&self) -> &DiscreteMeasure {
        &self.source
    }

    pub fn target(&self) -> &DiscreteMeasure {
        &self.target
    }

    /// Turns a non-converged solve into an error.
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::InvalidArgument(format!(
                "sinkhorn stopped after {} iterations with marginal error {:.3e}",
                self.iterations, self.marginal_error
            )))
        }
    }

    /// Dense plan; intended for small problems and export.
    pub fn plan(&self) -> Array2<f64> {
        let (a, b) = (&self.source, &self.target);
        let d = a.dim();
        let (xs, ys) = (a.flat(), b.flat());
        Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
            let c = sq_dist(&xs[i * d..(i + 1) * d], &ys[j * d..(j + 1) * d]);
            a.weights[i] * b.weights[j] * ((self.f[i] + self.g[j] - c) / self.epsilon).exp()
        })
    }

    /// Header `epsilon,iterations,marginalError` followed by `side,index,potential` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# epsilon={},iterations={},marginalError={}", self.epsilon, self.iterations, self.marginal_error)?;
        writeln!(out, "side,index,potential")?;
        for (i, f) in self.f.iter().enumerate() {
            writeln!(out, "f,{i},{f}")?;
        }
        for (j, g) in self.g.iter().enumerate() {
            writeln!(out, "g,{j},{g}")?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn extent_sq(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let d = a.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in a.points.outer_iter().chain(b.points.outer_iter()) {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2)).sum::<f64>().max(f64::MIN_POSITIVE)
}

/// Solves entropic OT between `a` and `b`.
///
/// A solve that exhausts `max_iter` is returned with `converged == false`.
pub fn sinkhorn(a: OtMeasure<'_>, b: OtMeasure<'_>, cfg: &SinkhornConfig) -> Result<EntropicPotentials> {
    sinkhorn_warm(a, b, cfg, None)
}

/// As [`sinkhorn`], starting from previous potentials (skips ε-scaling).
pub fn sinkhorn_warm(
    a: OtMeasure<'_>,
    b: OtMeasure<'_>,
    cfg: &SinkhornConfig,
    warm: Option<&EntropicPotentials>,
) -> Result<EntropicPotentials> {
    cfg.validate()?;
    if let (OtMeasure::Grid(ga), OtMeasure::Grid(gb)) = (a, b) {
        if ga.layout() != gb.layout() {
            return Err(Error::GridMismatch);
        }
        if cfg.mode == SinkhornMode::Stabilized {
            return convolutional(ga, gb, cfg, warm);
        }
    }
    let (da, db) = (a.to_discrete(), b.to_discrete());
    solve_discrete(da, db, cfg, warm)
}

/// Entropic OT between two explicit discrete measures.
pub fn solve_discrete(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    cfg: &SinkhornConfig,
    warm: Option<&EntropicPotentials>,
) -> Result<EntropicPotentials> {
    cfg.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    match cfg.mode {
        SinkhornMode::Plain => plain(a, b, cfg),
        SinkhornMode::Stabilized => stabilized(a, b, cfg, warm),
    }
}

/// Truncated stabilized kernel, stored row by row as runs of consecutive columns.
/// Rows whose largest exponent is positive are stored divided by `row_scale`.
struct SparseKernel<T> {
    row_runs: Vec<usize>,
    row_scale: Vec<f64>,
    run_col: Vec<u32>,
    run_off: Vec<usize>,
    vals: Vec<T>,
}

/// Storage type of kernel entries: `f32` for the bulk of the iterations,
/// `f64` for the final polish.
trait KernelValue: Copy + Into<f64> {
    fn kernel(z: f64) -> Self;
}

impl KernelValue for f32 {
    fn kernel(z: f64) -> f32 {
        (z as f32).exp()
    }
}

impl KernelValue for f64 {
    fn kernel(z: f64) -> f64 {
        z.exp()
    }
}

impl<T: KernelValue> SparseKernel<T> {
    /// Keeps `z_ij = (f_i + g_j − c_ij)/ε` when it is within `θ` of its row
    /// maximum or above `−θ`; columns left empty trigger a second pass that
    /// also keeps entries within `θ` of the column maximum.
    #[allow(clippy::too_many_arguments)]
    fn build(xs: &[f64], ys: &[f64], d: usize, f: &[f64], g: &[f64], eps: f64, theta: f64) -> Self {
        let m = g.len();
        let mut colmax = vec![f64::NEG_INFINITY; m];
        let first = Self::pass(xs, ys, d, f, g, eps, theta, None, &mut colmax);
        let mut covered = vec![false; m];
        for r in 0..first.run_col.len() {
            let start = first.run_col[r] as usize;
            let len = first.run_off[r + 1] - first.run_off[r];
            covered[start..start + len].iter_mut().for_each(|c| *c = true);
        }
        if covered.iter().all(|&c| c) {
            return first;
        }
        let mut unused = vec![f64::NEG_INFINITY; m];
        Self::pass(xs, ys, d, f, g, eps, theta, Some(&colmax), &mut unused)
    }

    #[allow(clippy::too_many_arguments)]
    fn pass(
        xs: &[f64],
        ys: &[f64],
        d: usize,
        f: &[f64],
        g: &[f64],
        eps: f64,
        theta: f64,
        colmax_in: Option<&[f64]>,
        colmax: &mut [f64],
    ) -> Self {
        let (n, m) = (f.len(), g.len());
        let mut row_runs = Vec::with_capacity(n + 1);
        let mut run_col = Vec::new();
        let mut run_off = vec![0];
        let mut vals = Vec::new();
        let mut z = vec![0.0; m];
        let mut row_scale = Vec::with_capacity(n);
        row_runs.push(0);
        for i in 0..n {
            let x = &xs[i * d..(i + 1) * d];
            let mut rowmax = f64::NEG_INFINITY;
            for j in 0..m {
                let zij = (f[i] + g[j] - sq_dist(x, &ys[j * d..(j + 1) * d])) / eps;
                z[j] = zij;
                rowmax = rowmax.max(zij);
                if zij > colmax[j] {
                    colmax[j] = zij;
                }
            }
            let floor = (rowmax - theta).min(-theta);
            let shift = rowmax.max(0.0);
            row_scale.push(shift.exp());
            let mut open = false;
            for j in 0..m {
                let keep = z[j] >= floor || colmax_in.is_some_and(|c| z[j] >= c[j] - theta);
                if keep {
                    if !open {
                        run_col.push(j as u32);
                        open = true;
                    }
                    vals.push(T::kernel(z[j] - shift));
                } else if open {
                    run_off.push(vals.len());
                    open = false;
                }
            }
            if open {
                run_off.push(vals.len());
            }
            row_runs.push(run_col.len());
        }
        Self {
            row_runs,
            row_scale,
            run_col,
            run_off,
            vals,
        }
    }

    /// `(first column, values)` for each run of row `i`.
    fn runs(&self, i: usize) -> impl Iterator<Item = (usize, &[T])> + '_ {
        (self.row_runs[i]..self.row_runs[i + 1]).map(move |r| {
            (
                self.run_col[r] as usize,
                &self.vals[self.run_off[r]..self.run_off[r + 1]],
            )
        })
    }

    /// `Σ_j K_ij x_j`.
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.row_scale[i] * self.runs(i).map(|(c, k)| dot(k, &x[c..c + k.len()])).sum::<f64>()
    }

    /// `y_j += w K_ij` over row `i`.
    fn row_axpy(&self, i: usize, w: f64, y: &mut [f64]) {
        let w = w * self.row_scale[i];
        for (c, k) in self.runs(i) {
            for (yj, &kj) in y[c..c + k.len()].iter_mut().zip(k) {
                *yj += w * kj.into();
            }
        }
    }

    /// Visits every stored `(i, j)`.
    fn for_each_entry(&self, mut visit: impl FnMut(usize, usize)) {
        for i in 0..self.row_runs.len() - 1 {
            for (c, k) in self.runs(i) {
                for j in c..c + k.len() {
                    visit(i, j);
                }
            }
        }
    }
}

fn dot<T: KernelValue>(k: &[T], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let kc = k.chunks_exact(4);
    let xc = x.chunks_exact(4);
    let (kr, xr) = (kc.remainder(), xc.remainder());
    for (kk, xx) in kc.zip(xc) {
        for t in 0..4 {
            acc[t] += kk[t].into() * xx[t];
        }
    }
    let tail: f64 = kr.iter().zip(xr).map(|(a, b)| (*a).into() * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

const ABSORB_LIMIT: f64 = 1e15;

fn needs_absorb(s: &[f64]) -> bool {
    s.iter().any(|&x| !(x < ABSORB_LIMIT && x > 1.0 / ABSORB_LIMIT))
}

/// Order of the support points by their coordinates, which makes kernel rows
/// contiguous in 1D and mostly so in higher dimensions.
fn sort_order(mu: &DiscreteMeasure) -> Vec<usize> {
    let d = mu.dim();
    let xs = mu.flat();
    let mut idx: Vec<usize> = (0..mu.len()).collect();
    idx.sort_by(|&i, &j| {
        xs[i * d..(i + 1) * d]
            .iter()
            .zip(&xs[j * d..(j + 1) * d])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Support points and weights reordered by `order`.
fn permuted(mu: &DiscreteMeasure, order: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = mu.dim();
    let xs = mu.flat();
    let mut pts = Vec::with_capacity(xs.len());
    let mut w = Vec::with_capacity(order.len());
    for &i in order {
        pts.extend_from_slice(&xs[i * d..(i + 1) * d]);
        w.push(mu.weights[i]);
    }
    (pts, w)
}

fn gather(v: &[f64], order: &[usize]) -> Vec<f64> {
    order.iter().map(|&i| v[i]).collect()
}

fn scatter(v: &[f64], order: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = v[k];
    }
    out
}

struct ScalingOutcome {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    marginal_error: f64,
    converged: bool,
    primal_cost: f64,
    regularized_cost: f64,
}

fn stabilized(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    cfg: &SinkhornConfig,
    warm: Option<&EntropicPotentials>,
) -> Result<EntropicPotentials> {
    let (oa, ob) = (sort_order(&a), sort_order(&b));
    let (xs, wa) = permuted(&a, &oa);
    let (ys, wb) = permuted(&b, &ob);
    let (n, m) = (a.len(), b.len());
    let (f, g, schedule) = match warm {
        Some(w) if w.f.len() == n && w.g.len() == m => {
            (gather(&w.f, &oa), gather(&w.g, &ob), vec![cfg.epsilon])
        }
        _ => (vec![0.0; n], vec![0.0; m], cfg.schedule(extent_sq(&a, &b))),
    };
    let bulk = scaling_loop::<f32>(&xs, &ys, a.dim(), &wa, &wb, f, g, &schedule, cfg)?;
    let out = if bulk.iterations < cfg.max_iter {
        let polish_cfg = SinkhornConfig {
            max_iter: cfg.max_iter - bulk.iterations,
            ..cfg.clone()
        };
        let mut p = scaling_loop::<f64>(&xs, &ys, a.dim(), &wa, &wb, bulk.f, bulk.g, &[cfg.epsilon], &polish_cfg)?;
        p.iterations += bulk.iterations;
        p
    } else {
        bulk
    };
    Ok(EntropicPotentials {
        f: scatter(&out.f, &oa),
        g: scatter(&out.g, &ob),
        epsilon: cfg.epsilon,
        iterations: out.iterations,
        marginal_error: out.marginal_error,
        converged: out.converged,
        primal_cost: out.primal_cost,
        regularized_cost: out.regularized_cost,
        source: a,
        target: b,
    })
}

#[allow(clippy::too_many_arguments)]
fn scaling_loop<T: KernelValue>(
    xs: &[f64],
    ys: &[f64],
    d: usize,
    wa: &[f64],
    wb: &[f64],
    mut f: Vec<f64>,
    mut g: Vec<f64>,
    schedule: &[f64],
    cfg: &SinkhornConfig,
) -> Result<ScalingOutcome> {
    let (n, m) = (wa.len(), wb.len());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut col = vec![0.0; m];
    let mut bv = vec![0.0; m];
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    let mut converged = false;
    let last_stage = schedule.len() - 1;
    let mut eps = schedule[0];
    for (stage, &stage_eps) in schedule.iter().enumerate() {
        eps = stage_eps;
        let final_stage = stage == last_stage;
        let stage_tol = if final_stage { cfg.tol } else { cfg.tol.max(1e-3) };
        let mut kernel = SparseKernel::<T>::build(xs, ys, d, &f, &g, eps, cfg.truncation);
        loop {
            // Row update (exact source marginal) fused with the column sums.
            for j in 0..m {
                bv[j] = wb[j] * v[j];
                col[j] = 0.0;
            }
            for i in 0..n {
                u[i] = 1.0 / kernel.row_dot(i, &bv);
                kernel.row_axpy(i, wa[i] * u[i], &mut col);
            }
            iterations += 1;
            marginal_error = (0..m).map(|j| wb[j] * (v[j] * col[j] - 1.0).abs()).sum();
            if !marginal_error.is_finite() {
                return Err(Error::KernelUnderflow { epsilon: eps });
            }
            if marginal_error < stage_tol {
                converged = final_stage;
                break;
            }
            if iterations >= cfg.max_iter {
                break;
            }
            for j in 0..m {
                v[j] = 1.0 / col[j];
            }
            if needs_absorb(&u) || needs_absorb(&v) {
                absorb(&mut f, &mut u, eps);
                absorb(&mut g, &mut v, eps);
                kernel = SparseKernel::build(xs, ys, d, &f, &g, eps, cfg.truncation);
            }
        }
        absorb(&mut f, &mut u, eps);
        absorb(&mut g, &mut v, eps);
        if iterations >= cfg.max_iter && !converged {
            break;
        }
    }
    let (primal_cost, regularized_cost) = sparse_costs(xs, ys, d, wa, wb, &f, &g, eps, cfg.truncation);
    Ok(ScalingOutcome {
        f,
        g,
        iterations,
        marginal_error,
        converged,
        primal_cost,
        regularized_cost,
    })
}

fn absorb(pot: &mut [f64], scale: &mut [f64], eps: f64) {
    for (p, s) in pot.iter_mut().zip(scale.iter_mut()) {
        *p += eps * s.ln();
        *s = 1.0;
    }
}

/// `(⟨c,π⟩, ⟨c,π⟩ + ε KL(π|a⊗b))` over the entries of the truncated kernel.
#[allow(clippy::too_many_arguments)]
fn sparse_costs(
    xs: &[f64],
    ys: &[f64],
    d: usize,
    wa: &[f64],
    wb: &[f64],
    f: &[f64],
    g: &[f64],
    eps: f64,
    theta: f64,
) -> (f64, f64) {
    let kernel = SparseKernel::<f64>::build(xs, ys, d, f, g, eps, theta);
    let mut primal = 0.0;
    let mut kl = 0.0;
    kernel.for_each_entry(|i, j| {
        let c = sq_dist(&xs[i * d..(i + 1) * d], &ys[j * d..(j + 1) * d]);
        let z = (f[i] + g[j] - c) / eps;
        let p = wa[i] * wb[j] * z.exp();
        if p > 0.0 {
            primal += p * c;
            kl += p * z;
        }
    });
    (primal, primal + eps * kl)
}

/// Dense version of [`sparse_costs`] for measures given in original order.
fn costs(a: &DiscreteMeasure, b: &DiscreteMeasure, f: &[f64], g: &[f64], eps: f64) -> (f64, f64) {
    let d = a.dim();
    let (xs, ys) = (a.flat(), b.flat());
    let mut primal = 0.0;
    let mut kl = 0.0;
    for i in 0..a.len() {
        let x = &xs[i * d..(i + 1) * d];
        for j in 0..b.len() {
            let c = sq_dist(x, &ys[j * d..(j + 1) * d]);
            let z = (f[i] + g[j] - c) / eps;
            let p = a.weights[i] * b.weights[j] * z.exp();
            if p > 0.0 {
                primal += p * c;
                kl += p * z;
            }
        }
    }
    (primal, primal + eps * kl)
}

fn plain(a: DiscreteMeasure, b: DiscreteMeasure, cfg: &SinkhornConfig) -> Result<EntropicPotentials> {
    let (n, m, d) = (a.len(), b.len(), a.dim());
    let (xs, ys) = (a.flat(), b.flat());
    let eps = cfg.epsilon;
    let kernel: Vec<f64> = (0..n * m)
        .map(|k| (-sq_dist(&xs[(k / m) * d..(k / m + 1) * d], &ys[(k % m) * d..(k % m + 1) * d]) / eps).exp())
        .collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut iterations = 0;
    let mut marginal_error;
    let mut converged = false;
    loop {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| kernel[i * m + j] * b.weights[j] * v[j]).sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::KernelUnderflow { epsilon: eps });
            }
            u[i] = 1.0 / s;
        }
        let col: Vec<f64> = (0..m)
            .map(|j| (0..n).map(|i| kernel[i * m + j] * a.weights[i] * u[i]).sum())
            .collect();
        iterations += 1;
        marginal_error = (0..m).map(|j| b.weights[j] * (v[j] * col[j] - 1.0).abs()).sum::<f64>();
        if !marginal_error.is_finite() || col.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::KernelUnderflow { epsilon: eps });
        }
        if marginal_error < cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        for j in 0..m {
            v[j] = 1.0 / col[j];
        }
    }
    let f: Vec<f64> = u.iter().map(|x| eps * x.ln()).collect();
    let g: Vec<f64> = v.iter().map(|x| eps * x.ln()).collect();
    if f.iter().chain(&g).any(|p| !p.is_finite()) {
        return Err(Error::KernelUnderflow { epsilon: eps });
    }
    let (primal_cost, regularized_cost) = costs(&a, &b, &f, &g, eps);
    Ok(EntropicPotentials {
        f,
        g,
        epsilon: eps,
        iterations,
        marginal_error,
        converged,
        primal_cost,
        regularized_cost,
        source: a,
        target: b,
    })
}

/// Separable log-domain Gaussian convolution on a grid.
struct GridSoftmin {
    layout: GridLayout,
    /// Per-axis squared distances between cell centers.
    axis_costs: Vec<Vec<f64>>,
}

impl GridSoftmin {
    fn new(layout: &GridLayout) -> Self {
        let axis_costs = (0..layout.dim())
            .map(|k| {
                let c = layout.axis_centers(k);
                let n = c.len();
                (0..n * n).map(|t| (c[t / n] - c[t % n]).powi(2)).collect()
            })
            .collect();
        Self {
            layout: layout.clone(),
            axis_costs,
        }
    }

    /// `−ε log Σ_j exp((h_j − c_ij)/ε + logw_j)` for every cell `i`.
    ///
    /// Each line is shifted by its maximum and convolved with `exp(−c/ε)`;
    /// outputs whose sum falls below `SCALED_FLOOR` are redone in log space.
    fn apply(&self, h: &[f64], logw: &[f64], eps: f64) -> Vec<f64> {
        const SCALED_FLOOR: f64 = 1e-200;
        let mut cur: Vec<f64> = h.iter().zip(logw).map(|(h, w)| h / eps + w).collect();
        let mut next = vec![0.0; cur.len()];
        let mut line_in = Vec::new();
        let mut line_exp = Vec::new();
        for axis in 0..self.layout.dim() {
            let n = self.layout.resolution()[axis];
            let stride = self.layout.stride(axis);
            let costs = &self.axis_costs[axis];
            let kernel: Vec<f64> = costs.iter().map(|c| (-c / eps).exp()).collect();
            let block = n * stride;
            line_in.resize(n, 0.0);
            line_exp.resize(n, 0.0);
            for outer in (0..cur.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (j, slot) in line_in.iter_mut().enumerate() {
                        *slot = cur[base + j * stride];
                    }
                    let top = line_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if top == f64::NEG_INFINITY {
                        for i in 0..n {
                            next[base + i * stride] = f64::NEG_INFINITY;
                        }
                        continue;
                    }
                    for (e, &v) in line_exp.iter_mut().zip(&line_in) {
                        *e = (v - top).exp();
                    }
                    for i in 0..n {
                        let krow = &kernel[i * n..(i + 1) * n];
                        let s: f64 = krow.iter().zip(&line_exp).map(|(k, e)| k * e).sum();
                        next[base + i * stride] = if s > SCALED_FLOOR {
                            top + s.ln()
                        } else {
                            let row = &costs[i * n..(i + 1) * n];
                            let mx = (0..n).map(|j| line_in[j] - row[j] / eps).fold(f64::NEG_INFINITY, f64::max);
                            if mx == f64::NEG_INFINITY {
                                f64::NEG_INFINITY
                            } else {
                                let s: f64 = (0..n).map(|j| (line_in[j] - row[j] / eps - mx).exp()).sum();
                                mx + s.ln()
                            }
                        };
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur.into_iter().map(|v| -eps * v).collect()
    }
}

fn convolutional(
    a: &GridDensity,
    b: &GridDensity,
    cfg: &SinkhornConfig,
    warm: Option<&EntropicPotentials>,
) -> Result<EntropicPotentials> {
    let (da, db) = (DiscreteMeasure::from_grid(a), DiscreteMeasure::from_grid(b));
    let n = da.len();
    let conv = GridSoftmin::new(a.layout());
    let la: Vec<f64> = da.weights.iter().map(|w| w.ln()).collect();
    let lb: Vec<f64> = db.weights.iter().map(|w| w.ln()).collect();
    let (mut f, mut g, schedule) = match warm {
        Some(w) if w.f.len() == n && w.g.len() == n => (w.f.clone(), w.g.clone(), vec![cfg.epsilon]),
        _ => {
            let ext: f64 = (0..a.layout().dim()).map(|k| a.domain().side(k).powi(2)).sum();
            (vec![0.0; n], vec![0.0; n], cfg.schedule(ext))
        }
    };
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    let mut converged = false;
    let last_stage = schedule.len() - 1;
    'stages: for (stage, &eps) in schedule.iter().enumerate() {
        let stage_tol = if stage == last_stage { cfg.tol } else { cfg.tol.max(1e-3) };
        loop {
            f = conv.apply(&g, &lb, eps);
            let g_next = conv.apply(&f, &la, eps);
            iterations += 1;
            marginal_error = (0..n)
                .map(|j| db.weights[j] * (((g[j] - g_next[j]) / eps).exp() - 1.0).abs())
                .sum();
            if g_next.iter().chain(&f).any(|v| !v.is_finite()) {
                return Err(Error::KernelUnderflow { epsilon: eps });
            }
            if marginal_error < stage_tol {
                if stage == last_stage {
                    converged = true;
                }
                break;
            }
            g = g_next;
            if iterations >= cfg.max_iter {
                f = conv.apply(&g, &lb, eps);
                marginal_error = {
                    let g_chk = conv.apply(&f, &la, eps);
                    (0..n)
                        .map(|j| db.weights[j] * (((g[j] - g_chk[j]) / eps).exp() - 1.0).abs())
                        .sum()
                };
                break 'stages;
            }
        }
    }
    let (primal_cost, regularized_cost) = costs(&da, &db, &f, &g, cfg.epsilon);
    Ok(EntropicPotentials {
        f,
        g,
        epsilon: cfg.epsilon,
        iterations,
        marginal_error,
        converged,
        primal_cost,
        regularized_cost,
        source: da,
        target: db,
    })
}

/// `OT_ε(μ, μ)` by the symmetric fixed point `u ← √(u / K(μ⊙u))`.
///
/// The cold start `f = 0` is already close to the fixed point, so the
/// ε schedule starts at `10ε`.
pub fn self_transport(mu: &DiscreteMeasure, cfg: &SinkhornConfig) -> Result<EntropicPotentials> {
    cfg.validate()?;
    let order = sort_order(mu);
    let (xs, w) = permuted(mu, &order);
    let d = mu.dim();
    let start = (10.0 * cfg.epsilon).min(cfg.scaling_start.unwrap_or(f64::INFINITY));
    let schedule = SinkhornConfig {
        scaling_start: Some(start),
        ..cfg.clone()
    }
    .schedule(extent_sq(mu, mu));
    let bulk = symmetric_loop::<f32>(&xs, d, &w, vec![0.0; w.len()], &schedule, cfg)?;
    let out = if bulk.iterations < cfg.max_iter {
        let polish_cfg = SinkhornConfig {
            max_iter: cfg.max_iter - bulk.iterations,
            ..cfg.clone()
        };
        let mut p = symmetric_loop::<f64>(&xs, d, &w, bulk.f, &[cfg.epsilon], &polish_cfg)?;
        p.iterations += bulk.iterations;
        p
    } else {
        bulk
    };
    let (primal_cost, regularized_cost) =
        sparse_costs(&xs, &xs, d, &w, &w, &out.f, &out.f, cfg.epsilon, cfg.truncation);
    let f = scatter(&out.f, &order);
    Ok(EntropicPotentials {
        g: f.clone(),
        f,
        epsilon: cfg.epsilon,
        iterations: out.iterations,
        marginal_error: out.marginal_error,
        converged: out.converged,
        primal_cost,
        regularized_cost,
        source: mu.clone(),
        target: mu.clone(),
    })
}

fn symmetric_loop<T: KernelValue>(
    xs: &[f64],
    d: usize,
    w: &[f64],
    mut f: Vec<f64>,
    schedule: &[f64],
    cfg: &SinkhornConfig,
) -> Result<ScalingOutcome> {
    let n = w.len();
    let mut u = vec![1.0; n];
    let mut wu = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;
    let mut converged = false;
    let last_stage = schedule.len() - 1;
    for (stage, &eps) in schedule.iter().enumerate() {
        let stage_tol = if stage == last_stage { cfg.tol } else { cfg.tol.max(1e-3) };
        let mut kernel = SparseKernel::<T>::build(xs, xs, d, &f, &f, eps, cfg.truncation);
        loop {
            for i in 0..n {
                wu[i] = w[i] * u[i];
            }
            for i in 0..n {
                s[i] = kernel.row_dot(i, &wu);
            }
            iterations += 1;
            marginal_error = (0..n).map(|i| w[i] * (u[i] * s[i] - 1.0).abs()).sum();
            if !marginal_error.is_finite() {
                return Err(Error::KernelUnderflow { epsilon: eps });
            }
            if marginal_error < stage_tol {
                converged = stage == last_stage;
                break;
            }
            if iterations >= cfg.max_iter {
                break;
            }
            for i in 0..n {
                u[i] = (u[i] / s[i]).sqrt();
            }
            if needs_absorb(&u) {
                absorb(&mut f, &mut u, eps);
                kernel = SparseKernel::build(xs, xs, d, &f, &f, eps, cfg.truncation);
            }
        }
        absorb(&mut f, &mut u, eps);
        if iterations >= cfg.max_iter {
            break;
        }
    }
    Ok(ScalingOutcome {
        g: f.clone(),
        f,
        iterations,
        marginal_error,
        converged,
        primal_cost: f64::NAN,
        regularized_cost: f64::NAN,
    })
}

/// Debiased Sinkhorn divergence `OT_ε(a,b) − ½OT_ε(a,a) − ½OT_ε(b,b)`.
#[derive(Debug, Clone)]
pub struct SinkhornDivergence {
    pub divergence: f64,
    pub cross: EntropicPotentials,
    pub self_source: f64,
    pub self_target: f64,
}

impl SinkhornDivergence {
    /// Worst marginal violation among the three solves.
    pub fn max_marginal_error(&self) -> f64 {
        self.cross.marginal_error
    }
}

pub fn sinkhorn_divergence(
    a: OtMeasure<'_>,
    b: OtMeasure<'_>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornDivergence> {
    let (da, db) = (a.to_discrete(), b.to_discrete());
    let sa = self_transport(&da, cfg)?;
    if da == db {
        return Ok(SinkhornDivergence {
            divergence: 0.0,
            self_source: sa.regularized_cost,
            self_target: sa.regularized_cost,
            cross: sa,
        });
    }
    let sb = self_transport(&db, cfg)?;
    let cross = match (a, b) {
        (OtMeasure::Grid(_), OtMeasure::Grid(_)) => sinkhorn(a, b, cfg)?,
        _ => solve_discrete(da, db, cfg, None)?,
    };
    let divergence = cross.regularized_cost - 0.5 * (sa.regularized_cost + sb.regularized_cost);
    Ok(SinkhornDivergence {
        divergence,
        cross,
        self_source: sa.regularized_cost,
        self_target: sb.regularized_cost,
    })
}

/// Barycentric projection `T_ε(x) = E_π[y | x]` of each row of `x`, using the
/// target potential `g` (the source potential at `x` is its `c`-transform).
///
/// When `x` has as many rows as the source support, the source marginal of
/// the implied plan is compared with the stored `f`; a defect above
/// `stale_tol` means the ensemble moved since the solve.
pub fn barycentric_projection(
    x: ArrayView2<'_, f64>,
    pot: &EntropicPotentials,
    stale_tol: Option<f64>,
) -> Result<Array2<f64>> {
    let target = &pot.target;
    let d = target.dim();
    if x.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.ncols(),
        });
    }
    let eps = pot.epsilon;
    let ys = target.flat();
    let logb: Vec<f64> = target.weights.iter().map(|w| w.ln()).collect();
    let mut out = Array2::zeros((x.nrows(), d));
    let mut defect = 0.0;
    let mut z = vec![0.0; target.len()];
    for (i, xi) in x.outer_iter().enumerate() {
        let xi = xi.to_vec();
        let mut mx = f64::NEG_INFINITY;
        for j in 0..target.len() {
            z[j] = (pot.g[j] - sq_dist(&xi, &ys[j * d..(j + 1) * d])) / eps + logb[j];
            mx = mx.max(z[j]);
        }
        let mut total = 0.0;
        let mut row = out.row_mut(i);
        for j in 0..target.len() {
            let w = (z[j] - mx).exp();
            total += w;
            for k in 0..d {
                row[k] += w * ys[j * d + k];
            }
        }
        row.mapv_inplace(|v| v / total);
        if stale_tol.is_some() && x.nrows() == pot.f.len() {
            let log_row = pot.f[i] / eps + mx + total.ln();
            defect += pot.source.weights[i] * (log_row.exp() - 1.0).abs();
        }
    }
    if let Some(tol) = stale_tol {
        if x.nrows() == pot.f.len() && defect > tol {
            return Err(Error::StalePotentials { defect, tol });
        }
    }
    Ok(out)
}

/// Velocity `v(x_i) = T_ε(x_i) − x_i` from converged potentials.
pub fn sinkhorn_velocity(
    x: ArrayView2<'_, f64>,
    pot: &EntropicPotentials,
    stale_tol: Option<f64>,
) -> Result<Array2<f64>> {
    let t = barycentric_projection(x, pot, stale_tol)?;
    Ok(t - x)
}
