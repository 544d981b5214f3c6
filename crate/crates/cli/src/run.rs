//! The five benchmark scenarios and single-run artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use dissflow_core::flows::{
    integrate, make_perturbed_gradient_flow, DisturbanceSignal, KdeSinkhornController, PerturbationField, Probes,
    Trajectory,
};
use dissflow_core::functionals::{FunctionalSpec, QuadraticWell};
use dissflow_core::monitor::{
    check_decay_condition, check_positivity_bounds, plateau, Plateau, PowerLaw, TrajectoryLog, LOG_HEADER,
};
use dissflow_core::sdot::{quantization_sweep, run_sdot_flow, QuantizationReport};
use dissflow_core::measures::sample_density;
use dissflow_core::TargetSet;

use crate::artifacts::{config_hash, Artifacts, Columns};
use crate::config::{ExperimentConfig, Scenario};
use crate::error::{invalid, CliError, Result};

/// Outcome of one certification check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub line: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_w2: f64,
    pub plateau: Option<Plateau>,
    pub log: Option<TrajectoryLog>,
    pub checks: Vec<CheckOutcome>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.line.clone()).collect()
    }
}

/// Resolves defaults and validates; returns the resolved config and warnings.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(ExperimentConfig, Vec<String>)> {
    let resolved = cfg.resolved();
    let warnings = resolved.validate()?;
    Ok((resolved, warnings))
}

/// Runs one experiment into `out`: trajectory, positions, monitor reports
/// and manifest. A numerical error leaves a FAILED marker next to whatever
/// was written. Failed checks are reported in the summary after all files
/// are in place.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let (cfg, warnings) = prepare(cfg)?;
    let mut art = Artifacts::create(out)?;
    let result = execute(&cfg, &mut art);
    let mut summary = match result {
        Ok(s) => s,
        Err(e) => {
            art.mark_failed(&e);
            return Err(e);
        }
    };
    summary.warnings.extend(warnings);
    let mut extra = BTreeMap::new();
    extra.insert("finalW2".into(), format!("{:.17e}", summary.final_w2));
    if let Some(p) = &summary.plateau {
        extra.insert("plateau".into(), format!("{:.17e}", p.value));
    }
    for c in &summary.checks {
        extra.insert(format!("check.{}", c.name), if c.passed { "PASS" } else { "FAIL" }.into());
    }
    if let Err(e) = art.finish("simulate", &cfg, extra) {
        art.mark_failed(&e);
        return Err(e);
    }
    Ok(summary)
}

fn execute(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<RunSummary> {
    if cfg.scenario == Scenario::Sdot {
        return sdot_single(cfg, art);
    }
    let hash = config_hash(cfg);
    let rho0 = cfg.initial_ensemble(cfg.n)?;
    art.write_csv("initial_positions.csv", Columns::Prefix("x0"), |w| rho0.write_csv(w))?;
    let mut traj = flow_run(cfg, &rho0)?;
    traj.log.config_hash = hash;
    art.write_csv("trajectory.csv", Columns::Exact(LOG_HEADER), |w| traj.log.write_csv(&mut *w))?;
    art.write_csv("final_positions.csv", Columns::Prefix("x0"), |w| traj.final_ensemble.write_csv(w))?;

    let log = &traj.log;
    let final_w2 = log.w2_to_target.last().copied().unwrap_or(f64::NAN);
    let u_norm = cfg.disturbance.signal.build().sup_norm();
    let plateau = plateau(log, u_norm, cfg.monitor.plateau_fraction).ok();
    let mut checks = Vec::new();
    if cfg.monitor.certify && matches!(cfg.scenario, Scenario::PotentialFlow | Scenario::RegularizedOt) {
        let decay = check_decay_condition(log, &cfg.monitor.decay.into())?;
        art.write_csv("decay.csv", Columns::Exact("t,V_dot,chi,gamma,satisfied"), |w| decay.write_csv(w))?;
        checks.push(CheckOutcome {
            name: "decay".into(),
            passed: decay.verdict.passed(),
            line: decay.verdict_line(),
        });
        let half = PowerLaw::new(0.5, 2.0).map_err(invalid)?;
        let pos = check_positivity_bounds(log, half, half)?;
        art.write_bytes("positivity.txt", format!("{}\n", pos.verdict_line()).as_bytes())?;
        checks.push(CheckOutcome {
            name: "positivity".into(),
            passed: pos.verdict.passed(),
            line: pos.verdict_line(),
        });
    }
    Ok(RunSummary {
        final_w2,
        plateau,
        log: Some(traj.log),
        checks,
        warnings: traj.warnings,
    })
}

/// Integrates the scenario's flow from `rho0`.
pub fn flow_run(cfg: &ExperimentConfig, rho0: &dissflow_core::ParticleEnsemble) -> Result<Trajectory> {
    let flow = cfg.flow_config()?;
    let signal = cfg.disturbance.signal.build();
    let target = cfg.target_set()?;
    let traj = match cfg.scenario {
        Scenario::PotentialFlow | Scenario::EntropicOu | Scenario::RegularizedOt => {
            let (spec, pert) = match cfg.scenario {
                Scenario::PotentialFlow => (well(cfg)?, cfg.additive_field()),
                Scenario::EntropicOu => {
                    let surrogate = match cfg.kernel {
                        Some(_) => Some(cfg.surrogate()?),
                        None => None,
                    };
                    (well(cfg)?, PerturbationField::IsotropicDiffusion { surrogate })
                }
                _ => (
                    FunctionalSpec::ot_to_target(target.clone(), 0.0),
                    PerturbationField::EntropicRegularizationDrift { target: target.clone() },
                ),
            };
            let drift = make_perturbed_gradient_flow(&spec, &pert, &signal);
            let mut probes = Probes::to_target(&target).with_lyapunov(&spec, 0.0);
            if let (TargetSet::Points(p), true) = (&target, cfg.monitor.record_particles) {
                probes = probes.with_distance_set(p.clone());
            }
            integrate(rho0, &drift, &pert, &signal, &flow, &probes)?
        }
        Scenario::KdeSinkhorn => {
            let ctrl = controller(cfg, rho0.len(), signal.clone())?;
            let eps = cfg.monitor.distance_epsilon;
            let probes = Probes {
                distance: Some(Box::new(|rho| ctrl.distance(rho, eps))),
                ..Probes::default()
            };
            integrate(rho0, &ctrl, &PerturbationField::None, &signal, &flow, &probes)?
        }
        Scenario::Sdot => return Err(CliError::Config("sdot runs have no particle flow".into())),
    };
    Ok(traj)
}

fn well(cfg: &ExperimentConfig) -> Result<FunctionalSpec> {
    let TargetSet::Points(p) = cfg.target_set()? else {
        return Err(CliError::Config("quadratic well needs a point target".into()));
    };
    let center = p.points().row(0).to_vec();
    Ok(FunctionalSpec::potential(QuadraticWell::new(center, 1.0).map_err(invalid)?).with_moduli(Some(1.0), Some(1.0)))
}

/// KDE-Sinkhorn controller for `n` agents.
pub fn controller(cfg: &ExperimentConfig, n: usize, signal: DisturbanceSignal) -> Result<KdeSinkhornController> {
    let kernel = cfg.kernel_spec(n)?;
    KdeSinkhornController::new(kernel, cfg.target_density()?, signal).map_err(CliError::from)
}

/// Site flow of `n` samples of the target.
fn sdot_single(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<RunSummary> {
    let target = cfg.target_density()?;
    let s = cfg.sdot.clone().unwrap_or_default();
    let init = sample_density(&target, cfg.n, cfg.seed)?;
    art.write_csv("initial_positions.csv", Columns::Prefix("x0"), |w| init.write_csv(w))?;
    let run = run_sdot_flow(init.positions().view(), &target, &s.flow_config())?;
    art.write_csv("energies.csv", Columns::Exact("t,energy,bias,variance"), |w| run.write_csv(w))?;
    let sites = dissflow_core::ParticleEnsemble::new(target.domain().clone(), run.final_sites.clone())?;
    art.write_csv("final_positions.csv", Columns::Prefix("x0"), |w| sites.write_csv(w))?;
    art.write_csv("diagram.csv", Columns::Prefix("site,weight,mass,centroid_0"), |w| {
        run.final_diagram.write_csv(w)
    })?;
    let mut checks = Vec::new();
    if cfg.monitor.certify {
        let worst = run.energies.iter().map(|e| e.decomposition_error()).fold(0.0, f64::max);
        let passed = worst <= 1e-6;
        checks.push(CheckOutcome {
            name: "decomposition".into(),
            passed,
            line: format!(
                "VERDICT {} check=decomposition worst_relative_error={worst:.3e}",
                if passed { "PASS" } else { "FAIL" }
            ),
        });
    }
    Ok(RunSummary {
        final_w2: run.ultimate_energy().sqrt(),
        plateau: None,
        log: None,
        checks,
        warnings: if run.converged {
            Vec::new()
        } else {
            vec![format!("site flow stopped at max_steps = {} before converging", s.max_steps)]
        },
    })
}

/// The `sdot` subcommand: ultimate energies across `sdot.ns` and the fitted
/// slope, checked against `−2/d`.
pub fn sdot_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(QuantizationReport, CheckOutcome)> {
    let (cfg, _) = prepare(cfg)?;
    if cfg.scenario != Scenario::Sdot {
        return Err(CliError::Config(format!("sdot needs scenario = \"sdot\", got {}", cfg.scenario.name())));
    }
    let mut art = Artifacts::create(out)?;
    let s = cfg.sdot.clone().unwrap_or_default();
    let outcome = (|| -> Result<(QuantizationReport, CheckOutcome)> {
        let target = cfg.target_density()?;
        let report = quantization_sweep(&target, &s.ns, &s.flow_config(), cfg.seed)?;
        art.write_csv("quantization.csv", Columns::Exact("N,ultimateEnergy,slopeWindowFlag"), |w| {
            report.write_csv(w)
        })?;
        let expected = -2.0 / cfg.dim() as f64;
        let passed = (report.slope - expected).abs() <= s.slope_tol * expected.abs();
        let check = CheckOutcome {
            name: "slope".into(),
            passed,
            line: format!(
                "VERDICT {} check=quantization-slope slope={:.6} expected={expected:.6} tol={}",
                if passed { "PASS" } else { "FAIL" },
                report.slope,
                s.slope_tol * expected.abs()
            ),
        };
        Ok((report, check))
    })();
    match outcome {
        Ok((report, check)) => {
            let mut extra = BTreeMap::new();
            extra.insert("slope".into(), format!("{:.17e}", report.slope));
            extra.insert("constant".into(), format!("{:.17e}", report.constant));
            extra.insert("check.slope".into(), if check.passed { "PASS" } else { "FAIL" }.into());
            art.finish("sdot", &cfg, extra)?;
            Ok((report, check))
        }
        Err(e) => {
            art.mark_failed(&e);
            Err(e)
        }
    }
}
