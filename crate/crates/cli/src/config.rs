//! Experiment configuration. One TOML file describes one experiment; every
//! default is filled in by [`ExperimentConfig::resolved`] so the manifest
//! echo records the values actually used.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dissflow_core::flows::{DisturbanceSignal, FlowConfig, Integrator, PerturbationField};
use dissflow_core::functionals::{FnField, Surrogate, DEFAULT_DENSITY_FLOOR};
use dissflow_core::kde::{bandwidth_rule, KernelFamily, KernelSpec};
use dissflow_core::monitor::{DecayConfig, GammaForm};
use dissflow_core::sdot::{LaguerreConfig, LaguerreSolver, SdotFlowConfig};
use dissflow_core::{BoxDomain, GridDensity, GridLayout, ParticleEnsemble, PointSet, TargetSet};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Quadratic well with a constant additive disturbance field.
    PotentialFlow,
    /// Quadratic well with isotropic diffusion of strength `u`.
    EntropicOu,
    /// Transport to the target with entropic regularization `ε = u`.
    RegularizedOt,
    /// KDE swarm controller with grid Sinkhorn at `ε = u`.
    KdeSinkhorn,
    /// Semi-discrete transport flow of `N` sites.
    Sdot,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::PotentialFlow => "potential-flow",
            Self::EntropicOu => "entropic-ou",
            Self::RegularizedOt => "regularized-ot",
            Self::KdeSinkhorn => "kde-sinkhorn",
            Self::Sdot => "sdot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    pub n: usize,
    /// Relative paths are taken from the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub domain: DomainConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdot: Option<SdotSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: Vec<f64>,
    pub sigma: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    Point { center: Vec<f64> },
    Points { points: Vec<Vec<f64>> },
    Gaussian { mean: Vec<f64>, sigma: f64, grid: usize },
    /// Unnormalized sum of `weight·exp(−|x − center|²/(2σ²))`.
    Mixture { components: Vec<Bump>, grid: usize },
    Uniform { grid: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitConfig {
    #[default]
    Uniform,
    Point {
        center: Vec<f64>,
    },
    /// Samples of the target density.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SignalConfig {
    Constant {
        u: f64,
    },
    Sinusoid {
        amplitude: f64,
        period: f64,
        offset: f64,
        #[serde(default)]
        phase: f64,
    },
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    Decaying {
        u0: f64,
        rate: f64,
    },
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self::Constant { u: 0.0 }
    }
}

impl SignalConfig {
    pub fn build(&self) -> DisturbanceSignal {
        match self {
            Self::Constant { u } => DisturbanceSignal::Constant(*u),
            Self::Sinusoid {
                amplitude,
                period,
                offset,
                phase,
            } => DisturbanceSignal::Sinusoid {
                amplitude: *amplitude,
                period: *period,
                offset: *offset,
                phase: *phase,
            },
            Self::Piecewise { breakpoints, values } => DisturbanceSignal::PiecewiseConstant {
                breakpoints: breakpoints.clone(),
                values: values.clone(),
            },
            Self::Decaying { u0, rate } => DisturbanceSignal::DecayingExponential { u0: *u0, rate: *rate },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    #[serde(flatten)]
    pub signal: SignalConfig,
    /// Direction `ζ` of the additive field (potential-flow); defaults to `e₁`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelName {
    #[default]
    Gaussian,
    Epanechnikov,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default)]
    pub family: KernelName,
    /// Constant of the rule `h = c·N^{−1/(d+2)}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Fixed bandwidth; overrides `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Surrogate grid cells per axis (entropic-ou).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorName {
    Euler,
    Heun,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySection {
    pub lambda: f64,
    pub gamma_gain: f64,
    pub threshold: f64,
    pub slack: f64,
}

impl Default for DecaySection {
    fn default() -> Self {
        let d = DecayConfig::default();
        Self {
            lambda: d.lambda,
            gamma_gain: d.gamma_gain,
            threshold: d.threshold,
            slack: d.slack,
        }
    }
}

impl From<DecaySection> for DecayConfig {
    fn from(s: DecaySection) -> Self {
        Self {
            lambda: s.lambda,
            gamma_gain: s.gamma_gain,
            threshold: s.threshold,
            slack: s.slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    /// Run the scenario's certification checks and fail on a FAIL verdict.
    #[serde(default = "yes")]
    pub certify: bool,
    #[serde(default)]
    pub decay: DecaySection,
    #[serde(default = "default_plateau_fraction")]
    pub plateau_fraction: f64,
    /// Keep per-particle distances for the Markov check (entropic-ou sweeps).
    #[serde(default)]
    pub record_particles: bool,
    #[serde(default = "default_markov_epsilons")]
    pub markov_epsilons: Vec<f64>,
    /// Regularization of the debiased divergence that measures kde-sinkhorn runs.
    #[serde(default = "default_distance_epsilon")]
    pub distance_epsilon: f64,
}

fn yes() -> bool {
    true
}

fn default_plateau_fraction() -> f64 {
    0.2
}

fn default_markov_epsilons() -> Vec<f64> {
    vec![0.05, 0.1]
}

fn default_distance_epsilon() -> f64 {
    1e-3
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            certify: true,
            decay: DecaySection::default(),
            plateau_fraction: default_plateau_fraction(),
            record_particles: false,
            markov_epsilons: default_markov_epsilons(),
            distance_epsilon: default_distance_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverName {
    Newton,
    Ascent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdotSection {
    /// Site counts of the `sdot` subcommand.
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "default_sdot_dt")]
    pub dt: f64,
    #[serde(default = "default_sdot_tol")]
    pub tol: f64,
    #[serde(default)]
    pub energy_rtol: f64,
    #[serde(default = "default_sdot_steps")]
    pub max_steps: usize,
    #[serde(default = "default_solver")]
    pub solver: SolverName,
    #[serde(default = "default_mass_tol")]
    pub mass_tol: f64,
    /// Allowed relative distance of the fitted slope from `−2/d`.
    #[serde(default = "default_slope_tol")]
    pub slope_tol: f64,
}

fn default_ns() -> Vec<usize> {
    vec![4, 8, 16, 32, 64]
}

fn default_sdot_dt() -> f64 {
    0.5
}

fn default_sdot_tol() -> f64 {
    1e-7
}

fn default_sdot_steps() -> usize {
    2000
}

fn default_solver() -> SolverName {
    SolverName::Newton
}

fn default_mass_tol() -> f64 {
    1e-4
}

fn default_slope_tol() -> f64 {
    0.1
}

impl Default for SdotSection {
    fn default() -> Self {
        Self {
            ns: default_ns(),
            dt: default_sdot_dt(),
            tol: default_sdot_tol(),
            energy_rtol: 0.0,
            max_steps: default_sdot_steps(),
            solver: default_solver(),
            mass_tol: default_mass_tol(),
            slope_tol: default_slope_tol(),
        }
    }
}

impl SdotSection {
    pub fn flow_config(&self) -> SdotFlowConfig {
        SdotFlowConfig {
            dt: self.dt,
            max_steps: self.max_steps,
            tol: self.tol,
            energy_rtol: self.energy_rtol,
            laguerre: LaguerreConfig {
                mass_tol: self.mass_tol,
                solver: match self.solver {
                    SolverName::Newton => LaguerreSolver::Newton,
                    SolverName::Ascent => LaguerreSolver::Ascent,
                },
                ..LaguerreConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    U,
    #[serde(alias = "N")]
    N,
    Epsilon,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::U => "u",
            Self::N => "N",
            Self::Epsilon => "epsilon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    Increasing,
    Decreasing,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaName {
    Linear,
    Sqrt,
    Power,
}

impl From<GammaName> for GammaForm {
    fn from(g: GammaName) -> Self {
        match g {
            GammaName::Linear => GammaForm::Linear,
            GammaName::Sqrt => GammaForm::Sqrt,
            GammaName::Power => GammaForm::Power,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    pub values: Vec<f64>,
    /// Seeds per axis value; defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Expected direction of the final distance along the axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Trend>,
    #[serde(default = "default_min_spearman")]
    pub min_spearman: f64,
    #[serde(default = "default_gamma")]
    pub gamma_form: GammaName,
}

fn default_min_spearman() -> f64 {
    0.9
}

fn default_gamma() -> GammaName {
    GammaName::Power
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dim(&self) -> usize {
        self.domain.lower.len()
    }

    /// Copy with every scenario default filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let (dt, t_end, log_every, lipschitz) = match c.scenario {
            Scenario::PotentialFlow => (1e-2, 10.0, 10, Some(1.0)),
            Scenario::EntropicOu => (2e-3, 10.0, 25, Some(1.0)),
            Scenario::RegularizedOt => (1e-2, 10.0, 10, None),
            Scenario::KdeSinkhorn => (0.2, 8.0, 10, None),
            Scenario::Sdot => (0.5, 0.0, 1, None),
        };
        let f = &mut c.flow;
        f.dt.get_or_insert(dt);
        f.t_end.get_or_insert(t_end);
        f.integrator.get_or_insert(IntegratorName::Euler);
        f.log_every.get_or_insert(log_every);
        if f.lipschitz.is_none() {
            f.lipschitz = lipschitz;
        }
        if c.scenario == Scenario::PotentialFlow && c.disturbance.direction.is_none() {
            let mut e1 = vec![0.0; c.dim()];
            if let Some(first) = e1.first_mut() {
                *first = 1.0;
            }
            c.disturbance.direction = Some(e1);
        }
        if let Some(k) = &mut c.kernel {
            if k.bandwidth.is_none() {
                k.c.get_or_insert(0.5);
            }
            if c.scenario == Scenario::EntropicOu {
                k.grid.get_or_insert(64);
            }
        }
        if c.scenario == Scenario::Sdot && c.sdot.is_none() {
            c.sdot = Some(SdotSection::default());
        }
        if let Some(s) = &mut c.sweep {
            if s.seeds.is_none() {
                s.seeds = Some(vec![c.seed]);
            }
            if s.expect.is_none() {
                s.expect = Some(match (c.scenario, s.axis) {
                    (_, Axis::U | Axis::Epsilon) => Trend::Increasing,
                    (Scenario::KdeSinkhorn | Scenario::Sdot, Axis::N) => Trend::Decreasing,
                    (_, Axis::N) => Trend::None,
                });
            }
        }
        c
    }

    /// Cross-field checks and a dry build of every input, before any compute.
    /// Returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = self.dim();
        if self.domain.upper.len() != d {
            return bad("domain.lower and domain.upper differ in length".into());
        }
        let domain = self.domain()?;
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        let density = matches!(
            self.target,
            TargetConfig::Gaussian { .. } | TargetConfig::Mixture { .. } | TargetConfig::Uniform { .. }
        );
        let supported = match self.scenario {
            Scenario::PotentialFlow | Scenario::EntropicOu => matches!(self.target, TargetConfig::Point { .. }),
            Scenario::RegularizedOt => true,
            Scenario::KdeSinkhorn | Scenario::Sdot => density,
        };
        if !supported {
            return bad(format!(
                "target kind {} is not supported by scenario {}",
                target_kind(&self.target),
                self.scenario.name()
            ));
        }
        let target = self.target_set()?;
        if let TargetSet::Points(p) = &target {
            if p.dim() != d {
                return bad(format!("target has dimension {}, domain has {d}", p.dim()));
            }
            if p.points().outer_iter().any(|x| !domain.contains(x.as_slice().expect("contiguous"))) {
                return bad("target points must lie in the domain".into());
            }
        }
        if let InitConfig::Point { center } = &self.init {
            if center.len() != d || !domain.contains(center) {
                return bad("init.center must be a point of the domain".into());
            }
        }
        if matches!(self.init, InitConfig::Target) && !matches!(target, TargetSet::Density(_)) {
            return bad("init.kind = \"target\" needs a density target".into());
        }
        let signal = self.disturbance.signal.build();
        signal.validate().map_err(invalid)?;
        if let Some(z) = &self.disturbance.direction {
            if z.len() != d || z.iter().any(|v| !v.is_finite()) {
                return bad(format!("disturbance.direction must have {d} finite entries"));
            }
        }
        let mut warnings = Vec::new();
        match self.scenario {
            Scenario::KdeSinkhorn => {
                if self.kernel.is_none() {
                    return bad("kde-sinkhorn requires a [kernel] section".into());
                }
                if self.n < 2 {
                    return bad("kde-sinkhorn needs at least two agents".into());
                }
                let t_end = self.flow.t_end.unwrap_or(0.0);
                if (0..=100).any(|k| !(signal.value(t_end * k as f64 / 100.0) > 0.0)) {
                    return bad("kde-sinkhorn needs a positive regularization u(t)".into());
                }
                if !(self.monitor.distance_epsilon > 0.0) {
                    return bad("monitor.distance_epsilon must be positive".into());
                }
                self.kernel_spec(self.n)?;
            }
            Scenario::EntropicOu => {
                if self.kernel.is_some() {
                    self.surrogate()?;
                }
            }
            Scenario::Sdot => {
                let s = self.sdot.clone().unwrap_or_default();
                if s.ns.is_empty() || s.ns.contains(&0) || s.ns.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("sdot.ns must be increasing positive counts".into());
                }
                if !(s.dt > 0.0 && s.dt <= 1.0) {
                    return bad(format!("sdot.dt must lie in (0, 1], got {}", s.dt));
                }
                if !(s.tol > 0.0 && s.mass_tol > 0.0 && s.energy_rtol >= 0.0 && s.slope_tol > 0.0) {
                    return bad("sdot tolerances must be positive".into());
                }
            }
            Scenario::PotentialFlow | Scenario::RegularizedOt => {}
        }
        if self.scenario != Scenario::Sdot {
            warnings.extend(self.flow_config()?.validate().map_err(invalid)?);
        }
        let m = &self.monitor;
        if !(m.plateau_fraction > 0.0 && m.plateau_fraction <= 1.0) {
            return bad("monitor.plateau_fraction must lie in (0, 1]".into());
        }
        if m.markov_epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return bad("monitor.markov_epsilons must lie in (0, 1]".into());
        }
        if let Some(s) = &self.sweep {
            self.validate_sweep(s)?;
        }
        Ok(warnings)
    }

    fn validate_sweep(&self, s: &SweepConfig) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if s.values.is_empty() {
            return bad("sweep.values is empty".into());
        }
        if s.seeds.as_ref().is_some_and(Vec::is_empty) {
            return bad("sweep.seeds is empty".into());
        }
        if s.workers == Some(0) {
            return bad("sweep.workers must be positive".into());
        }
        if !(s.min_spearman > 0.0 && s.min_spearman <= 1.0) {
            return bad("sweep.min_spearman must lie in (0, 1]".into());
        }
        match s.axis {
            Axis::N => {
                if s.values.iter().any(|v| !(*v >= 1.0 && v.fract() == 0.0)) {
                    return bad("N sweep values must be positive integers".into());
                }
            }
            Axis::U | Axis::Epsilon => {
                if self.scenario == Scenario::Sdot {
                    return bad("the sdot scenario has no disturbance to sweep".into());
                }
                if s.axis == Axis::Epsilon && !matches!(self.scenario, Scenario::RegularizedOt | Scenario::KdeSinkhorn) {
                    return bad(format!("epsilon sweeps need an entropic scenario, not {}", self.scenario.name()));
                }
                if s.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad("disturbance sweep values must be finite and >= 0".into());
                }
            }
        }
        let mut sorted = s.values.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("sweep.values contains duplicates".into());
        }
        for &v in &s.values {
            for &seed in s.seeds.as_deref().unwrap_or(&[self.seed]) {
                self.child(s.axis, v, seed).validate()?;
            }
        }
        Ok(())
    }

    /// Single run of a sweep at one axis value and seed.
    pub fn child(&self, axis: Axis, value: f64, seed: u64) -> Self {
        let mut c = self.clone();
        c.sweep = None;
        c.output = None;
        c.seed = seed;
        match axis {
            Axis::N => c.n = value as usize,
            Axis::U | Axis::Epsilon => c.disturbance.signal = SignalConfig::Constant { u: value },
        }
        c
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        BoxDomain::new(self.domain.lower.clone(), self.domain.upper.clone()).map_err(invalid)
    }

    fn layout(&self, cells: usize) -> Result<GridLayout> {
        GridLayout::uniform(self.domain()?, cells).map_err(invalid)
    }

    pub fn target_set(&self) -> Result<TargetSet> {
        let d = self.dim();
        match &self.target {
            TargetConfig::Point { center } => Ok(TargetSet::Points(PointSet::single(center))),
            TargetConfig::Points { points } => {
                if points.iter().any(|p| p.len() != d) {
                    return Err(CliError::Config(format!("every target point needs {d} coordinates")));
                }
                let flat: Vec<f64> = points.iter().flatten().copied().collect();
                let arr = Array2::from_shape_vec((points.len(), d), flat).map_err(|e| CliError::Config(e.to_string()))?;
                Ok(TargetSet::Points(PointSet::new(arr).map_err(invalid)?))
            }
            _ => Ok(TargetSet::Density(self.target_density()?)),
        }
    }

    pub fn target_density(&self) -> Result<GridDensity> {
        let d = self.dim();
        let dens = match &self.target {
            TargetConfig::Gaussian { mean, sigma, grid } => {
                if mean.len() != d || !(*sigma > 0.0) {
                    return Err(CliError::Config("gaussian target needs a mean per axis and sigma > 0".into()));
                }
                GridDensity::gaussian(self.layout(*grid)?, mean, *sigma)
            }
            TargetConfig::Mixture { components, grid } => {
                if components.is_empty()
                    || components
                        .iter()
                        .any(|b| b.center.len() != d || !(b.sigma > 0.0) || !(b.weight > 0.0))
                {
                    return Err(CliError::Config(
                        "mixture components need a center per axis, sigma > 0 and weight > 0".into(),
                    ));
                }
                let comps = components.clone();
                GridDensity::from_fn(self.layout(*grid)?, move |x| {
                    comps
                        .iter()
                        .map(|b| {
                            let r2: f64 = x.iter().zip(&b.center).map(|(a, c)| (a - c).powi(2)).sum();
                            b.weight * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
                        })
                        .sum()
                })
            }
            TargetConfig::Uniform { grid } => Ok(GridDensity::uniform(self.layout(*grid)?)),
            t => return Err(CliError::Config(format!("target kind {} is not a density", target_kind(t)))),
        };
        dens.map_err(invalid)
    }

    pub fn initial_ensemble(&self, n: usize) -> Result<ParticleEnsemble> {
        let domain = self.domain()?;
        match &self.init {
            InitConfig::Uniform => ParticleEnsemble::uniform(domain, n, self.seed),
            InitConfig::Point { center } => ParticleEnsemble::concentrated(domain, center, n),
            InitConfig::Target => dissflow_core::measures::sample_density(&self.target_density()?, n, self.seed),
        }
        .map_err(invalid)
    }

    pub fn kernel_spec(&self, n: usize) -> Result<KernelSpec> {
        let k = self
            .kernel
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{} requires a [kernel] section", self.scenario.name())))?;
        let d = self.dim();
        let h = match (k.bandwidth, k.c) {
            (Some(h), _) => h,
            (None, Some(c)) => bandwidth_rule(n, c, d),
            (None, None) => bandwidth_rule(n, 0.5, d),
        };
        let family = match k.family {
            KernelName::Gaussian => KernelFamily::Gaussian,
            KernelName::Epanechnikov => KernelFamily::Epanechnikov,
        };
        KernelSpec::new(family, h, d).map_err(invalid)
    }

    pub fn surrogate(&self) -> Result<Surrogate> {
        let cells = self.kernel.as_ref().and_then(|k| k.grid).unwrap_or(64);
        Ok(Surrogate::Kde {
            kernel: self.kernel_spec(self.n)?,
            layout: self.layout(cells)?,
            floor: DEFAULT_DENSITY_FLOOR,
        })
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        let f = &self.flow;
        let missing = || CliError::Config("flow section is not resolved".into());
        Ok(FlowConfig {
            dt: f.dt.ok_or_else(missing)?,
            t_end: f.t_end.ok_or_else(missing)?,
            integrator: match f.integrator.ok_or_else(missing)? {
                IntegratorName::Euler => Integrator::ExplicitEuler,
                IntegratorName::Heun => Integrator::Heun,
            },
            log_every: f.log_every.ok_or_else(missing)?,
            lipschitz: f.lipschitz,
            seed: self.seed,
            ..FlowConfig::default()
        })
    }

    /// Constant field `−u(t)ζ` of the potential-flow scenario.
    pub fn additive_field(&self) -> PerturbationField {
        let zeta = self.disturbance.direction.clone().unwrap_or_default();
        PerturbationField::AdditiveField(Arc::new(FnField::new("constant direction", move |x, _| {
            Array2::from_shape_fn(x.raw_dim(), |(_, k)| zeta[k])
        })))
    }
}

fn target_kind(t: &TargetConfig) -> &'static str {
    match t {
        TargetConfig::Point { .. } => "point",
        TargetConfig::Points { .. } => "points",
        TargetConfig::Gaussian { .. } => "gaussian",
        TargetConfig::Mixture { .. } => "mixture",
        TargetConfig::Uniform { .. } => "uniform",
    }
}

/// Resolves the output directory: explicit override, then the config's
/// `output` relative to its file, then `dissflow-out/<stem>`.
pub fn output_dir(cfg: &ExperimentConfig, config_path: &Path, override_dir: Option<&Path>) -> PathBuf {
    if let Some(o) = override_dir {
        return o.to_path_buf();
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    match &cfg.output {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => base.join(p),
        None => {
            let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            PathBuf::from("dissflow-out").join(stem)
        }
    }
}
