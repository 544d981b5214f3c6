//! Perturbed particle flows.
//!
//! Particles move by a deterministic drift plus, for entropic disturbances,
//! isotropic Brownian increments of variance `2u(t)·dt` (Euler–Maruyama).
//! Positions are reflected specularly at the faces of the box.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::functionals::{
    first_variation_gradient, fisher_information, FunctionalKind, FunctionalSpec, Surrogate, VelocityField,
};
use crate::kde::{convolve_on_grid, kde_evaluate, KernelSpec};
use crate::measures::{distances_to_set, GridDensity, GridLayout, ParticleEnsemble, PointSet, TargetSet};
use crate::monitor::{LogRow, TrajectoryLog};
use crate::rng;
use crate::transport::{
    self, sinkhorn, sinkhorn_divergence, sinkhorn_warm, EntropicPotentials, OtMeasure, SinkhornConfig,
};

/// Nonnegative disturbance `u(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSignal {
    Constant(f64),
    /// `offset + amplitude·sin(2π(t + phase)/period)`, with `offset ≥ amplitude`.
    Sinusoid {
        amplitude: f64,
        period: f64,
        offset: f64,
        phase: f64,
    },
    /// `values[k]` on `[breakpoints[k-1], breakpoints[k])`; one more value
    /// than breakpoints.
    PiecewiseConstant { breakpoints: Vec<f64>, values: Vec<f64> },
    /// `u0·e^{−rate·t}`.
    DecayingExponential { u0: f64, rate: f64 },
}

impl DisturbanceSignal {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            Self::Constant(u) if !(*u >= 0.0 && u.is_finite()) => bad(format!("constant disturbance {u} must be >= 0")),
            Self::Sinusoid {
                amplitude,
                period,
                offset,
                ..
            } if !(*amplitude >= 0.0 && *period > 0.0 && *offset >= *amplitude) => {
                bad("sinusoid needs amplitude >= 0, period > 0 and offset >= amplitude".into())
            }
            Self::PiecewiseConstant { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    return bad("piecewise signal needs one more value than breakpoints".into());
                }
                if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
                    return bad("breakpoints must be increasing".into());
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad("piecewise values must be >= 0".into());
                }
                Ok(())
            }
            Self::DecayingExponential { u0, rate } if !(*u0 >= 0.0 && *rate >= 0.0) => {
                bad("decaying exponential needs u0 >= 0 and rate >= 0".into())
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Constant(u) => *u,
            Self::Sinusoid {
                amplitude,
                period,
                offset,
                phase,
            } => offset + amplitude * (std::f64::consts::TAU * (t + phase) / period).sin(),
            Self::PiecewiseConstant { breakpoints, values } => {
                values[breakpoints.partition_point(|&b| b <= t)]
            }
            Self::DecayingExponential { u0, rate } => u0 * (-rate * t).exp(),
        }
    }

    /// `‖u‖_c = sup_{t≥0} u(t)`.
    pub fn sup_norm(&self) -> f64 {
        match self {
            Self::Constant(u) => *u,
            Self::Sinusoid {
                amplitude, offset, ..
            } => offset + amplitude,
            Self::PiecewiseConstant { breakpoints, values } => {
                let first = breakpoints.partition_point(|&b| b <= 0.0);
                values[first..].iter().copied().fold(0.0, f64::max)
            }
            Self::DecayingExponential { u0, .. } => *u0,
        }
    }

    /// `t ↦ u(t + s)`.
    pub fn shifted(&self, s: f64) -> Self {
        match self {
            Self::Constant(_) => self.clone(),
            Self::Sinusoid {
                amplitude,
                period,
                offset,
                phase,
            } => Self::Sinusoid {
                amplitude: *amplitude,
                period: *period,
                offset: *offset,
                phase: phase + s,
            },
            Self::PiecewiseConstant { breakpoints, values } => {
                let first = breakpoints.partition_point(|&b| b <= s);
                Self::PiecewiseConstant {
                    breakpoints: breakpoints[first..].iter().map(|b| b - s).collect(),
                    values: values[first..].to_vec(),
                }
            }
            Self::DecayingExponential { u0, rate } => Self::DecayingExponential {
                u0: u0 * (-rate * s).exp(),
                rate: *rate,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    ExplicitEuler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Reflect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    pub integrator: Integrator,
    pub boundary: Boundary,
    pub seed: u64,
    pub log_every: usize,
    /// Lipschitz constant of the drift, when known.
    pub lipschitz: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 10.0,
            integrator: Integrator::ExplicitEuler,
            boundary: Boundary::Reflect,
            seed: 0,
            log_every: 10,
            lipschitz: None,
        }
    }
}

impl FlowConfig {
    /// Checks the fields; returns warnings (such as `dt > 1/(2L)`).
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be >= 1".into()));
        }
        let mut warnings = Vec::new();
        if let Some(l) = self.lipschitz {
            if l > 0.0 && self.dt > 0.5 / l {
                warnings.push(format!("dt = {} exceeds the stability cap 1/(2L) = {}", self.dt, 0.5 / l));
            }
        }
        Ok(warnings)
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Disturbance mechanism; the magnitude comes from a [`DisturbanceSignal`].
#[derive(Clone)]
pub enum PerturbationField {
    None,
    /// Noise `√(2u)·dW`, the particle form of `+u·Δρ`. The surrogate is
    /// used to estimate the Fisher information for the norm.
    IsotropicDiffusion { surrogate: Option<Surrogate> },
    /// Adds `−u(t)·ζ`.
    AdditiveField(Arc<dyn VelocityField + Send + Sync>),
    /// Replaces exact transport to `target` by entropic transport at
    /// `ε = u(t)`.
    EntropicRegularizationDrift { target: TargetSet },
    Sum(Vec<PerturbationField>),
}

impl fmt::Debug for PerturbationField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("None"),
            Self::IsotropicDiffusion { .. } => f.write_str("IsotropicDiffusion"),
            Self::AdditiveField(z) => write!(f, "AdditiveField({})", z.provenance()),
            Self::EntropicRegularizationDrift { .. } => f.write_str("EntropicRegularizationDrift"),
            Self::Sum(parts) => f.debug_list().entries(parts).finish(),
        }
    }
}

impl PerturbationField {
    /// Total diffusion coefficient multiplier (count of diffusive parts).
    fn diffusion_weight(&self) -> f64 {
        match self {
            Self::IsotropicDiffusion { .. } => 1.0,
            Self::Sum(parts) => parts.iter().map(Self::diffusion_weight).sum(),
            _ => 0.0,
        }
    }

    /// Deterministic velocity contribution at time `t`.
    fn drift(&self, rho: &ParticleEnsemble, t: f64, u: &DisturbanceSignal) -> Result<Option<Array2<f64>>> {
        let ut = u.value(t);
        match self {
            Self::None | Self::IsotropicDiffusion { .. } => Ok(None),
            Self::AdditiveField(z) => Ok(Some(z.evaluate(rho, t)? * -ut)),
            Self::EntropicRegularizationDrift { target } => {
                if ut <= 0.0 {
                    return Ok(None);
                }
                let (reg, exact) = ot_velocities(rho, target, ut)?;
                Ok(Some(reg - exact))
            }
            Self::Sum(parts) => {
                let mut acc: Option<Array2<f64>> = None;
                for p in parts {
                    if let Some(v) = p.drift(rho, t, u)? {
                        acc = Some(match acc {
                            Some(a) => a + v,
                            None => v,
                        });
                    }
                }
                Ok(acc)
            }
        }
    }
}

/// Entropic (`ε`) and exact displacements toward `target`.
fn ot_velocities(rho: &ParticleEnsemble, target: &TargetSet, eps: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let exact = -first_variation_gradient(&FunctionalSpec::ot_to_target(target.clone(), 0.0), rho)?;
    let reg = -first_variation_gradient(&FunctionalSpec::ot_to_target(target.clone(), eps), rho)?;
    Ok((reg, exact))
}

/// `−∇(δF/δρ)` plus the deterministic part of a perturbation.
pub struct PerturbedGradientFlow {
    spec: FunctionalSpec,
    pert: PerturbationField,
    signal: DisturbanceSignal,
}

impl VelocityField for PerturbedGradientFlow {
    fn evaluate(&self, rho: &ParticleEnsemble, t: f64) -> Result<Array2<f64>> {
        if let (
            FunctionalKind::OtToTarget { target, epsilon },
            PerturbationField::EntropicRegularizationDrift { target: pt },
        ) = (&self.spec.kind, &self.pert)
        {
            let ut = self.signal.value(t);
            if *epsilon == 0.0 && target == pt {
                let reg = FunctionalSpec::ot_to_target(target.clone(), ut);
                return Ok(-first_variation_gradient(&reg, rho)?);
            }
        }
        let base = -first_variation_gradient(&self.spec, rho)?;
        Ok(match self.pert.drift(rho, t, &self.signal)? {
            Some(p) => base + p,
            None => base,
        })
    }

    fn provenance(&self) -> String {
        format!("gradient of {} perturbed by {:?}", self.spec.name(), self.pert)
    }
}

/// Composite field `−∇φ − u(t)ζ`. Diffusive perturbations contribute no
/// drift here; [`integrate`] realizes them as noise.
pub fn make_perturbed_gradient_flow(
    spec: &FunctionalSpec,
    pert: &PerturbationField,
    signal: &DisturbanceSignal,
) -> PerturbedGradientFlow {
    PerturbedGradientFlow {
        spec: spec.clone(),
        pert: pert.clone(),
        signal: signal.clone(),
    }
}

/// `‖ζ_u(ρ)‖²_{L²(ρ)}` at time `t`. For isotropic diffusion this is
/// `u(t)²·Î` with `Î` the Fisher information of the surrogate.
pub fn perturbation_norm(
    pert: &PerturbationField,
    rho: &ParticleEnsemble,
    t: f64,
    signal: &DisturbanceSignal,
) -> Result<f64> {
    let ut = signal.value(t);
    match pert {
        PerturbationField::None => Ok(0.0),
        PerturbationField::IsotropicDiffusion { surrogate } => {
            if ut == 0.0 {
                return Ok(0.0);
            }
            let Some(s) = surrogate else {
                return Err(Error::MissingSurrogate);
            };
            let dens = s.density(rho)?;
            let floor = dens.values().iter().copied().fold(f64::INFINITY, f64::min);
            Ok(ut * ut * fisher_information(&dens, floor)?)
        }
        _ => {
            let v = pert.drift(rho, t, signal)?;
            Ok(v.map_or(0.0, |v| v.mapv(|x| x * x).sum() / rho.len() as f64))
        }
    }
}

type Probe<'a> = Box<dyn Fn(&ParticleEnsemble) -> Result<f64> + 'a>;

/// What to record at logged steps.
#[derive(Default)]
pub struct Probes<'a> {
    /// `W₂(ρ_t, target)`.
    pub distance: Option<Probe<'a>>,
    /// `F(ρ_t) − F*`.
    pub lyapunov: Option<Probe<'a>>,
    /// Records per-particle squared distances to this set.
    pub distance_set: Option<PointSet>,
}

impl<'a> Probes<'a> {
    /// Distance to `target` through [`transport::w2_to_target_set`].
    pub fn to_target(target: &'a TargetSet) -> Self {
        Self {
            distance: Some(Box::new(move |rho| Ok(transport::w2_to_target_set(rho, target)?.value))),
            ..Self::default()
        }
    }

    pub fn with_lyapunov(mut self, spec: &'a FunctionalSpec, f_star: f64) -> Self {
        self.lyapunov = Some(Box::new(move |rho| {
            Ok(crate::functionals::eval_functional(spec, rho)? - f_star)
        }));
        self
    }

    pub fn with_distance_set(mut self, set: PointSet) -> Self {
        self.distance_set = Some(set);
        self
    }
}

/// Logged trajectory and final state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub log: TrajectoryLog,
    pub final_ensemble: ParticleEnsemble,
    pub warnings: Vec<String>,
}

/// Steps `rho0` under `drift` and the stochastic part of `pert`.
///
/// Noise increments for step `k` come from the counter stream `k` of the
/// seed, so replays are bit-identical.
pub fn integrate(
    rho0: &ParticleEnsemble,
    drift: &dyn VelocityField,
    pert: &PerturbationField,
    signal: &DisturbanceSignal,
    cfg: &FlowConfig,
    probes: &Probes<'_>,
) -> Result<Trajectory> {
    let warnings = cfg.validate()?;
    signal.validate()?;
    let domain = rho0.domain().clone();
    let guard = domain.inflated(2.0);
    let (n, d) = (rho0.len(), rho0.dim());
    let diffusion = pert.diffusion_weight();
    let steps = cfg.steps();
    let mut rho = rho0.clone();
    let mut log = TrajectoryLog::new(cfg.seed, String::new());

    let record = |rho: &ParticleEnsemble, t: f64, log: &mut TrajectoryLog| -> Result<()> {
        let w2 = match &probes.distance {
            Some(p) => p(rho)?,
            None => f64::NAN,
        };
        let lyapunov = match &probes.lyapunov {
            Some(p) => p(rho)?,
            None => f64::NAN,
        };
        log.push(LogRow {
            t,
            w2,
            lyapunov,
            pert_norm: match perturbation_norm(pert, rho, t, signal) {
                Err(Error::MissingSurrogate) => f64::NAN,
                other => other?,
            },
            u: signal.value(t),
        });
        if let Some(set) = &probes.distance_set {
            log.particle_dist2.push(distances_to_set(rho, set).into_iter().map(|v| v * v).collect());
        }
        Ok(())
    };

    record(&rho, 0.0, &mut log)?;
    let mut next = Array2::<f64>::zeros((n, d));
    for step in 0..steps {
        let t = step as f64 * cfg.dt;
        let v0 = drift.evaluate(&rho, t)?;
        next.assign(rho.positions());
        next.scaled_add(cfg.dt, &v0);
        let ut = signal.value(t);
        if diffusion > 0.0 && ut > 0.0 {
            let amp = (2.0 * diffusion * ut * cfg.dt).sqrt();
            let mut stream = rng::counter_stream(cfg.seed, "flows/noise", step as u64);
            for v in next.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut stream);
                *v += amp * z;
            }
        }
        if cfg.integrator == Integrator::Heun {
            let mut trial = next.clone();
            reflect_rows(&domain, &mut trial);
            let predicted = ParticleEnsemble::new(domain.clone(), trial)?;
            let v1 = drift.evaluate(&predicted, t + cfg.dt)?;
            next.scaled_add(0.5 * cfg.dt, &(&v1 - &v0));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        if next
            .outer_iter()
            .any(|x| !guard.contains(x.as_slice().expect("contiguous rows")))
        {
            return Err(Error::Unstable { step });
        }
        reflect_rows(&domain, &mut next);
        std::mem::swap(rho.positions_mut(), &mut next);
        if (step + 1) % cfg.log_every == 0 || step + 1 == steps {
            record(&rho, (step + 1) as f64 * cfg.dt, &mut log)?;
        }
    }
    Ok(Trajectory {
        log,
        final_ensemble: rho,
        warnings,
    })
}

fn reflect_rows(domain: &crate::measures::BoxDomain, x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        domain.reflect(row.as_slice_mut().expect("contiguous rows"));
    }
}

/// Swarm controller that steers agents through the KDE of their positions:
/// entropic OT (`ε = u(t)`) between the KDE and the target is solved on the
/// grid, and each agent follows the kernel-smoothed ideal velocity
/// `(T_ε − id) ∗ K_h` at its position.
pub struct KdeSinkhornController {
    kernel: KernelSpec,
    layout: GridLayout,
    target: GridDensity,
    signal: DisturbanceSignal,
    /// Multiply inputs by `1/N` as in the literal per-agent gradient.
    pub scale_by_n: bool,
    /// Floor applied to the KDE before the solve, relative to uniform.
    pub floor: f64,
    pub sinkhorn: SinkhornConfig,
    warm: RefCell<Option<EntropicPotentials>>,
}

impl KdeSinkhornController {
    pub fn new(
        kernel: KernelSpec,
        target: GridDensity,
        signal: DisturbanceSignal,
    ) -> Result<Self> {
        signal.validate()?;
        let target = target.with_floor(1e-12)?;
        Ok(Self {
            kernel,
            layout: target.layout().clone(),
            target,
            signal,
            scale_by_n: false,
            floor: 1e-12,
            sinkhorn: SinkhornConfig {
                tol: 1e-4,
                ..SinkhornConfig::default()
            },
            warm: RefCell::new(None),
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn target(&self) -> &GridDensity {
        &self.target
    }

    /// Floored KDE of the agents on the target grid.
    pub fn density(&self, rho: &ParticleEnsemble) -> Result<GridDensity> {
        kde_evaluate(rho, &self.kernel, &self.layout)?.with_floor(self.floor)
    }

    /// `W₂(ρ^{h,N}, ρ*)` from the debiased divergence at `epsilon`.
    pub fn distance(&self, rho: &ParticleEnsemble, epsilon: f64) -> Result<f64> {
        let dens = self.density(rho)?;
        let cfg = SinkhornConfig::with_epsilon(epsilon);
        let div = sinkhorn_divergence(OtMeasure::Grid(&dens), OtMeasure::Grid(&self.target), &cfg)?;
        Ok(div.divergence.max(0.0).sqrt())
    }
}

impl VelocityField for KdeSinkhornController {
    fn evaluate(&self, rho: &ParticleEnsemble, t: f64) -> Result<Array2<f64>> {
        let eps = self.signal.value(t);
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("regularization u(t) must be positive, got {eps}")));
        }
        let dens = self.density(rho)?;
        let cfg = SinkhornConfig {
            epsilon: eps,
            ..self.sinkhorn.clone()
        };
        let pot = {
            let warm = self.warm.borrow();
            match warm.as_ref() {
                Some(w) if w.epsilon == eps => {
                    sinkhorn_warm(OtMeasure::Grid(&dens), OtMeasure::Grid(&self.target), &cfg, Some(w))?
                }
                _ => sinkhorn(OtMeasure::Grid(&dens), OtMeasure::Grid(&self.target), &cfg)?,
            }
        };
        let pot = pot.ensure_converged()?;
        let centers = self.layout.centers();
        let ideal = transport::sinkhorn_velocity(centers.view(), &pot, None)?;
        *self.warm.borrow_mut() = Some(pot);
        let lookup = |q: ArrayView2<'_, f64>| -> Result<Array2<f64>> {
            if q.nrows() != ideal.nrows() {
                return Err(Error::SizeMismatch(q.nrows(), ideal.nrows()));
            }
            Ok(ideal.clone())
        };
        let mut v = convolve_on_grid(&lookup, &self.kernel, &self.layout, rho.positions().view())?;
        if self.scale_by_n {
            v /= rho.len() as f64;
        }
        Ok(v)
    }

    fn provenance(&self) -> String {
        format!("kde-sinkhorn controller (h = {})", self.kernel.bandwidth)
    }
}
