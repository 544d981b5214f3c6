//! Functionals on measures, their Wasserstein gradients as particle
//! velocities, and empirical checks of growth, dominance and smoothness.

use std::fmt::Debug;
use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kde::{kde_evaluate, kde_score, KernelSpec};
use crate::measures::{
    sample_density, BoxDomain, GridDensity, GridLayout, ParticleEnsemble, TargetSet,
};
use crate::rng;
use crate::transport::{
    self, sinkhorn, w2_assignment, w2_exact_1d, w2_to_target_set, OtMeasure, PlanForm,
    SinkhornConfig, DENSITY_RESAMPLE_SEED,
};

/// Scalar field `V` with gradient.
pub trait Potential: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Lipschitz constant `L` of `∇V`.
    fn gradient_lipschitz(&self) -> f64;
}

/// `V(x) = (m/2)|x − c|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticWell {
    pub center: Vec<f64>,
    pub modulus: f64,
}

impl QuadraticWell {
    pub fn new(center: Vec<f64>, modulus: f64) -> Result<Self> {
        if !(modulus > 0.0 && modulus.is_finite()) {
            return Err(Error::InvalidArgument(format!("modulus must be positive, got {modulus}")));
        }
        Ok(Self { center, modulus })
    }

    /// `|x|²/2`.
    pub fn unit(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            modulus: 1.0,
        }
    }
}

impl Potential for QuadraticWell {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.modulus * x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = self.modulus * (a - c);
        }
    }

    fn gradient_lipschitz(&self) -> f64 {
        self.modulus
    }
}

/// `V(x) = δ²(√(1 + |x − c|²/δ²) − 1)`: quadratic near `c`, linear far away.
/// A proper loss with `∇²V ≤ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoHuber {
    pub center: Vec<f64>,
    pub delta: f64,
}

impl PseudoHuber {
    pub fn new(center: Vec<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { center, delta })
    }

    fn r2(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum()
    }
}

impl Potential for PseudoHuber {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d2 = self.delta * self.delta;
        d2 * ((1.0 + self.r2(x) / d2).sqrt() - 1.0)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let s = (1.0 + self.r2(x) / (self.delta * self.delta)).sqrt();
        for ((o, a), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = (a - c) / s;
        }
    }

    fn gradient_lipschitz(&self) -> f64 {
        1.0
    }
}

/// Default density floor, as a multiple of the uniform density on the box.
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-12;

/// Density surrogate used for entropy-type functionals of particle ensembles.
#[derive(Debug, Clone)]
pub enum Surrogate {
    /// KDE of the ensemble on a grid; `floor` is relative to the uniform density.
    Kde {
        kernel: KernelSpec,
        layout: GridLayout,
        floor: f64,
    },
    /// A known density, independent of the particles.
    Oracle(GridDensity),
}

impl Surrogate {
    pub fn density(&self, rho: &ParticleEnsemble) -> Result<GridDensity> {
        match self {
            Surrogate::Kde {
                kernel,
                layout,
                floor,
            } => kde_evaluate(rho, kernel, layout)?.with_floor(*floor),
            Surrogate::Oracle(g) => Ok(g.clone()),
        }
    }

    /// `∇ log ρ̂` at each particle.
    pub fn score(&self, rho: &ParticleEnsemble) -> Result<Array2<f64>> {
        match self {
            Surrogate::Kde { kernel, .. } => kde_score(rho, kernel, rho.positions().view()),
            Surrogate::Oracle(g) => grid_log_gradient(g, rho.positions().view()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FunctionalKind {
    /// `∫V dρ`.
    PotentialEnergy(Arc<dyn Potential>),
    /// `∫ρ log ρ`; needs a surrogate for empirical measures.
    Entropy(Option<Surrogate>),
    /// `½W₂²(ρ, target)` (entropic when `epsilon > 0`).
    OtToTarget { target: TargetSet, epsilon: f64 },
}

#[derive(Debug, Clone)]
pub struct FunctionalSpec {
    pub kind: FunctionalKind,
    /// Claimed convexity modulus.
    pub lambda: Option<f64>,
    /// Claimed smoothness constant.
    pub l_smooth: Option<f64>,
}

impl FunctionalSpec {
    pub fn potential(v: impl Potential + 'static) -> Self {
        Self {
            kind: FunctionalKind::PotentialEnergy(Arc::new(v)),
            lambda: None,
            l_smooth: None,
        }
    }

    pub fn entropy(surrogate: Option<Surrogate>) -> Self {
        Self {
            kind: FunctionalKind::Entropy(surrogate),
            lambda: None,
            l_smooth: None,
        }
    }

    pub fn ot_to_target(target: TargetSet, epsilon: f64) -> Self {
        Self {
            kind: FunctionalKind::OtToTarget { target, epsilon },
            lambda: Some(1.0),
            l_smooth: Some(1.0),
        }
    }

    pub fn with_moduli(mut self, lambda: Option<f64>, l_smooth: Option<f64>) -> Self {
        self.lambda = lambda;
        self.l_smooth = l_smooth;
        self
    }

    pub fn name(&self) -> String {
        match &self.kind {
            FunctionalKind::PotentialEnergy(v) => format!("potential-energy({v:?})"),
            FunctionalKind::Entropy(_) => "entropy".into(),
            FunctionalKind::OtToTarget { epsilon, .. } => format!("ot-to-target(eps={epsilon})"),
        }
    }
}

/// `∫ρ̂ log ρ̂` by midpoint quadrature.
pub fn grid_entropy(rho: &GridDensity) -> f64 {
    let vol = rho.layout().cell_volume();
    rho.values()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln() * vol)
        .sum()
}

/// `F(ρ)`.
pub fn eval_functional(spec: &FunctionalSpec, rho: &ParticleEnsemble) -> Result<f64> {
    match &spec.kind {
        FunctionalKind::PotentialEnergy(v) => {
            check_potential_dim(v.as_ref(), rho.dim())?;
            let total: f64 = rho
                .positions()
                .outer_iter()
                .map(|x| v.value(x.as_slice().expect("contiguous rows")))
                .sum();
            Ok(total / rho.len() as f64)
        }
        FunctionalKind::Entropy(None) => Err(Error::MissingSurrogate),
        FunctionalKind::Entropy(Some(s)) => Ok(grid_entropy(&s.density(rho)?)),
        FunctionalKind::OtToTarget { target, epsilon } => {
            if *epsilon > 0.0 {
                let pot = entropic_potentials(rho, target, *epsilon)?;
                Ok(0.5 * pot.primal_cost)
            } else {
                Ok(0.5 * w2_to_target_set(rho, target)?.value.powi(2))
            }
        }
    }
}

fn check_potential_dim(v: &dyn Potential, d: usize) -> Result<()> {
    if v.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: v.dim(),
            got: d,
        });
    }
    Ok(())
}

fn entropic_potentials(
    rho: &ParticleEnsemble,
    target: &TargetSet,
    epsilon: f64,
) -> Result<transport::EntropicPotentials> {
    let cfg = SinkhornConfig::with_epsilon(epsilon);
    let pot = match target {
        TargetSet::Ensemble(e) => sinkhorn(OtMeasure::Ensemble(rho), OtMeasure::Ensemble(e), &cfg)?,
        TargetSet::Density(d) => sinkhorn(OtMeasure::Ensemble(rho), OtMeasure::Grid(d), &cfg)?,
        TargetSet::Points(p) => {
            let e = ParticleEnsemble::new(rho.domain().clone(), p.points().clone())?;
            sinkhorn(OtMeasure::Ensemble(rho), OtMeasure::Ensemble(&e), &cfg)?
        }
        TargetSet::Union(members) => {
            let member = nearest_member(rho, members)?;
            return entropic_potentials(rho, member, epsilon);
        }
    };
    pot.ensure_converged()
}

fn nearest_member<'a>(rho: &ParticleEnsemble, members: &'a [TargetSet]) -> Result<&'a TargetSet> {
    let mut best: Option<(f64, &TargetSet)> = None;
    for m in members {
        let w = w2_to_target_set(rho, m)?.value;
        if best.is_none_or(|(b, _)| w < b) {
            best = Some((w, m));
        }
    }
    best.map(|(_, m)| m).ok_or(Error::EmptySet)
}

/// Exact Monge displacement `T(x_i) − x_i` towards `target`.
fn exact_displacement(rho: &ParticleEnsemble, target: &TargetSet) -> Result<Array2<f64>> {
    let x = rho.positions();
    match target {
        TargetSet::Points(set) => {
            let mut out = Array2::zeros(x.raw_dim());
            for (i, xi) in x.outer_iter().enumerate() {
                let p = set.project(xi.as_slice().expect("contiguous rows"));
                out.row_mut(i).assign(&(&p - &xi));
            }
            Ok(out)
        }
        TargetSet::Ensemble(e) => {
            let (_, plan) = if rho.dim() == 1 {
                w2_exact_1d(rho, e)?
            } else {
                w2_assignment(rho, e)?
            };
            let PlanForm::Permutation(perm) = plan.form else {
                unreachable!("exact backends return permutations")
            };
            let y = e.positions();
            let mut out = Array2::zeros(x.raw_dim());
            for (i, &j) in perm.iter().enumerate() {
                out.row_mut(i).assign(&(&y.row(j) - &x.row(i)));
            }
            Ok(out)
        }
        TargetSet::Density(d) => {
            let sample = sample_density(d, rho.len(), DENSITY_RESAMPLE_SEED)?;
            exact_displacement(rho, &TargetSet::Ensemble(sample))
        }
        TargetSet::Union(members) => exact_displacement(rho, nearest_member(rho, members)?),
    }
}

/// `∇(δF/δρ)` at each particle.
pub fn first_variation_gradient(spec: &FunctionalSpec, rho: &ParticleEnsemble) -> Result<Array2<f64>> {
    match &spec.kind {
        FunctionalKind::PotentialEnergy(v) => {
            check_potential_dim(v.as_ref(), rho.dim())?;
            let mut out = Array2::zeros(rho.positions().raw_dim());
            for (x, mut o) in rho.positions().outer_iter().zip(out.outer_iter_mut()) {
                v.gradient(
                    x.as_slice().expect("contiguous rows"),
                    o.as_slice_mut().expect("contiguous rows"),
                );
            }
            Ok(out)
        }
        FunctionalKind::Entropy(None) => Err(Error::MissingSurrogate),
        FunctionalKind::Entropy(Some(s)) => s.score(rho),
        FunctionalKind::OtToTarget { target, epsilon } => {
            let disp = if *epsilon > 0.0 {
                let pot = entropic_potentials(rho, target, *epsilon)?;
                transport::sinkhorn_velocity(rho.positions().view(), &pot, None)?
            } else {
                exact_displacement(rho, target)?
            };
            Ok(-disp)
        }
    }
}

/// Particle velocities as a function of the ensemble and time.
pub trait VelocityField {
    fn evaluate(&self, rho: &ParticleEnsemble, t: f64) -> Result<Array2<f64>>;
    /// Which functional or perturbation produced the field.
    fn provenance(&self) -> String;
}

/// `v = −∇(δF/δρ)`.
#[derive(Debug, Clone)]
pub struct GradientField {
    spec: FunctionalSpec,
}

impl GradientField {
    pub fn spec(&self) -> &FunctionalSpec {
        &self.spec
    }
}

impl VelocityField for GradientField {
    fn evaluate(&self, rho: &ParticleEnsemble, _t: f64) -> Result<Array2<f64>> {
        Ok(-first_variation_gradient(&self.spec, rho)?)
    }

    fn provenance(&self) -> String {
        format!("gradient of {}", self.spec.name())
    }
}

pub fn gradient_field(spec: &FunctionalSpec) -> GradientField {
    GradientField { spec: spec.clone() }
}

/// Field given by a closure of the positions and time.
pub struct FnField<F> {
    name: String,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(ArrayView2<'_, f64>, f64) -> Array2<f64>,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(ArrayView2<'_, f64>, f64) -> Array2<f64>,
{
    fn evaluate(&self, rho: &ParticleEnsemble, t: f64) -> Result<Array2<f64>> {
        Ok((self.f)(rho.positions().view(), t))
    }

    fn provenance(&self) -> String {
        self.name.clone()
    }
}

/// `F(ρ*)` for the measure described by `target`: uniform on a point set,
/// the ensemble itself, or a fixed-seed sample of a density.
pub fn target_value(spec: &FunctionalSpec, target: &TargetSet, domain: &BoxDomain) -> Result<f64> {
    if let FunctionalKind::OtToTarget { .. } = spec.kind {
        return Ok(0.0);
    }
    match target {
        TargetSet::Points(p) => {
            let e = ParticleEnsemble::new(domain.clone(), p.points().clone())?;
            eval_functional(spec, &e)
        }
        TargetSet::Ensemble(e) => eval_functional(spec, e),
        TargetSet::Density(d) => eval_functional(spec, &sample_density(d, 10_000, DENSITY_RESAMPLE_SEED)?),
        TargetSet::Union(members) => {
            let first = members.first().ok_or(Error::EmptySet)?;
            target_value(spec, first, domain)
        }
    }
}

/// One row of a checker report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckRow {
    pub sample: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Empirical modulus estimates; `ratio = lhs / rhs` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulusReport {
    pub name: &'static str,
    pub rows: Vec<CheckRow>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Samples whose ratio falls on the wrong side of the claimed modulus.
    pub violations: Vec<usize>,
    /// Samples with `rhs = 0`.
    pub skipped: Vec<usize>,
}

impl ModulusReport {
    fn build(name: &'static str, rows: Vec<CheckRow>, skipped: Vec<usize>, claim: Option<f64>, tol: f64, upper: bool) -> Self {
        let min_ratio = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        let max_ratio = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
        let violations = match claim {
            Some(c) if upper => rows.iter().filter(|r| r.ratio > c * (1.0 + tol)).map(|r| r.sample).collect(),
            Some(c) => rows.iter().filter(|r| r.ratio < c * (1.0 - tol)).map(|r| r.sample).collect(),
            None => Vec::new(),
        };
        Self {
            name,
            rows,
            min_ratio,
            max_ratio,
            violations,
            skipped,
        }
    }

    /// `sample,lhs,rhs,ratio` rows and a `#` summary line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sample,lhs,rhs,ratio")?;
        for r in &self.rows {
            writeln!(out, "{},{:.17e},{:.17e},{:.17e}", r.sample, r.lhs, r.rhs, r.ratio)?;
        }
        writeln!(
            out,
            "# check={},min_ratio={},max_ratio={},violations={},skipped={}",
            self.name,
            self.min_ratio,
            self.max_ratio,
            self.violations.len(),
            self.skipped.len()
        )?;
        Ok(())
    }
}

/// Relative slack used when comparing ratios to claimed moduli.
pub const CHECK_TOL: f64 = 1e-6;

/// `2(F(ρ) − F*) / W₂²(ρ, ρ*)` per sample; the minimum estimates `λ`.
pub fn check_quadratic_growth(
    spec: &FunctionalSpec,
    samples: &[ParticleEnsemble],
    target: &TargetSet,
) -> Result<ModulusReport> {
    let domain = samples.first().ok_or(Error::EmptySet)?.domain();
    let f_star = target_value(spec, target, domain)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (k, rho) in samples.iter().enumerate() {
        let w2 = w2_to_target_set(rho, target)?.value.powi(2);
        let lhs = 2.0 * (eval_functional(spec, rho)? - f_star);
        if w2 == 0.0 {
            skipped.push(k);
            continue;
        }
        rows.push(CheckRow {
            sample: k,
            lhs,
            rhs: w2,
            ratio: lhs / w2,
        });
    }
    Ok(ModulusReport::build("quadratic-growth", rows, skipped, spec.lambda, CHECK_TOL, false))
}

/// `‖∇δF/δρ‖²_ρ / (2(F(ρ) − F*))` per sample; the minimum estimates `λ`.
pub fn check_gradient_dominance(
    spec: &FunctionalSpec,
    samples: &[ParticleEnsemble],
    target: &TargetSet,
) -> Result<ModulusReport> {
    let domain = samples.first().ok_or(Error::EmptySet)?.domain();
    let f_star = target_value(spec, target, domain)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (k, rho) in samples.iter().enumerate() {
        let grad = first_variation_gradient(spec, rho)?;
        let lhs = grad.mapv(|v| v * v).sum() / rho.len() as f64;
        let rhs = 2.0 * (eval_functional(spec, rho)? - f_star);
        if rhs == 0.0 {
            skipped.push(k);
            continue;
        }
        rows.push(CheckRow {
            sample: k,
            lhs,
            rhs,
            ratio: lhs / rhs,
        });
    }
    Ok(ModulusReport::build("gradient-dominance", rows, skipped, spec.lambda, CHECK_TOL, false))
}

/// `|F(ρ₁) − F(ρ₀) − D_vF(ρ₀)| / (½W₂²(ρ₀, ρ₁))` along the optimal
/// matching; the maximum estimates `l`.
pub fn check_l_smoothness(
    spec: &FunctionalSpec,
    pairs: &[(ParticleEnsemble, ParticleEnsemble)],
) -> Result<ModulusReport> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (k, (rho0, rho1)) in pairs.iter().enumerate() {
        let (w, plan) = if rho0.dim() == 1 {
            w2_exact_1d(rho0, rho1)?
        } else {
            w2_assignment(rho0, rho1)?
        };
        let PlanForm::Permutation(perm) = plan.form else {
            unreachable!("exact backends return permutations")
        };
        let grad = first_variation_gradient(spec, rho0)?;
        let (x, y) = (rho0.positions(), rho1.positions());
        let dv: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| grad.row(i).dot(&(&y.row(j) - &x.row(i))))
            .sum::<f64>()
            / rho0.len() as f64;
        let remainder = eval_functional(spec, rho1)? - eval_functional(spec, rho0)? - dv;
        let rhs = 0.5 * w * w;
        if rhs == 0.0 {
            skipped.push(k);
            continue;
        }
        rows.push(CheckRow {
            sample: k,
            lhs: remainder.abs(),
            rhs,
            ratio: remainder.abs() / rhs,
        });
    }
    Ok(ModulusReport::build("l-smoothness", rows, skipped, spec.l_smooth, CHECK_TOL, true))
}

/// Largest `‖∇V(x) − ∇V(y)‖ / ‖x − y‖` over random pairs in `domain`.
pub fn spot_check_gradient_lipschitz(v: &dyn Potential, domain: &BoxDomain, pairs: usize, seed: u64) -> f64 {
    let d = domain.dim();
    let mut rng = rng::substream(seed, "functionals/lipschitz");
    let draw = |rng: &mut rng::Stream| -> Vec<f64> {
        (0..d)
            .map(|k| domain.lower()[k] + domain.side(k) * rng.random::<f64>())
            .collect()
    };
    let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        v.gradient(&x, &mut gx);
        v.gradient(&y, &mut gy);
        let num = gx.iter().zip(&gy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    worst
}

/// Central-difference derivative of `values` along `axis` at `cell`
/// (one-sided on the boundary).
fn grid_derivative(layout: &GridLayout, values: &[f64], cell: usize, axis: usize) -> f64 {
    let n = layout.resolution()[axis];
    if n < 2 {
        return 0.0;
    }
    let idx = layout.multi_index(cell)[axis];
    let stride = layout.stride(axis);
    let h = layout.spacing(axis);
    if idx == 0 {
        (values[cell + stride] - values[cell]) / h
    } else if idx == n - 1 {
        (values[cell] - values[cell - stride]) / h
    } else {
        (values[cell + stride] - values[cell - stride]) / (2.0 * h)
    }
}

/// `∇ log ρ` of a grid density at arbitrary points (value of the containing cell).
pub fn grid_log_gradient(rho: &GridDensity, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let layout = rho.layout();
    if x.ncols() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            got: x.ncols(),
        });
    }
    let logs: Vec<f64> = rho.values().iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let mut out = Array2::zeros(x.raw_dim());
    for (i, xi) in x.outer_iter().enumerate() {
        let cell = layout.locate(&xi.to_vec());
        for k in 0..layout.dim() {
            out[[i, k]] = grid_derivative(layout, &logs, cell, k);
        }
    }
    Ok(out)
}

/// `∫|∇ρ|²/ρ` by central differences and midpoint quadrature; every cell
/// must be at least `floor`.
pub fn fisher_information(rho: &GridDensity, floor: f64) -> Result<f64> {
    let layout = rho.layout();
    let values = rho.values();
    if let Some(cell) = values.iter().position(|&v| !(v >= floor)) {
        return Err(Error::DensityBelowFloor { cell, floor });
    }
    let vol = layout.cell_volume();
    let mut total = 0.0;
    for cell in 0..layout.len() {
        let g2: f64 = (0..layout.dim())
            .map(|k| grid_derivative(layout, values, cell, k).powi(2))
            .sum();
        total += g2 / values[cell] * vol;
    }
    Ok(total)
}
