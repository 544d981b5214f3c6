//! Offline certification of a logged trajectory against a monitor config.

use std::collections::BTreeMap;
use std::path::Path;

use dissflow_core::monitor::{
    check_decay_condition, check_invariant_level, check_positivity_bounds, DissEnvelope, GammaForm, PowerLaw,
    TrajectoryLog, LOG_HEADER,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{Artifacts, Columns};
use crate::config::{DecaySection, GammaName};
use crate::error::{invalid, CliError, Result};
use crate::run::CheckOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawConfig {
    pub a: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivitySection {
    pub psi1: PowerLawConfig,
    pub psi2: PowerLawConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    pub level: f64,
    #[serde(default)]
    pub slack: f64,
}

/// A fitted envelope `K·r·e^{−λt} + γ(‖u‖)` to test the log against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSection {
    pub k: f64,
    pub lambda: f64,
    pub gain: f64,
    #[serde(default = "unit")]
    pub exponent: f64,
    #[serde(default = "power")]
    pub gamma_form: GammaName,
    pub u_norm: f64,
    #[serde(default = "five_percent")]
    pub slack: f64,
    #[serde(default = "coverage")]
    pub coverage: f64,
}

fn unit() -> f64 {
    1.0
}

fn power() -> GammaName {
    GammaName::Power
}

fn five_percent() -> f64 {
    0.05
}

fn coverage() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecaySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positivity: Option<PositivitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<InvariantSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeSection>,
}

impl MonitorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg == Self::default() {
            return Err(CliError::Config("monitor config selects no check".into()));
        }
        Ok(cfg)
    }
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Runs every configured check on the log at `trajectory`; with `out`, the
/// reports and a manifest are written there.
pub fn check(trajectory: &Path, monitor: &MonitorConfig, out: Option<&Path>) -> Result<Vec<CheckOutcome>> {
    let file = std::fs::File::open(trajectory).map_err(|e| CliError::Config(format!("{}: {e}", trajectory.display())))?;
    let mut log = TrajectoryLog::read_csv(std::io::BufReader::new(file)).map_err(invalid)?;
    let mut art = out.map(Artifacts::create).transpose()?;
    let mut outcomes = Vec::new();

    if let Some(d) = monitor.decay {
        let report = check_decay_condition(&log, &d.into()).map_err(invalid)?;
        if let Some(a) = art.as_mut() {
            a.write_csv("decay.csv", Columns::Exact("t,V_dot,chi,gamma,satisfied"), |w| report.write_csv(w))?;
        }
        outcomes.push(CheckOutcome {
            name: "decay".into(),
            passed: report.verdict.passed(),
            line: report.verdict_line(),
        });
    }
    if let Some(p) = monitor.positivity {
        let psi1 = PowerLaw::new(p.psi1.a, p.psi1.p).map_err(invalid)?;
        let psi2 = PowerLaw::new(p.psi2.a, p.psi2.p).map_err(invalid)?;
        let report = check_positivity_bounds(&log, psi1, psi2).map_err(invalid)?;
        outcomes.push(CheckOutcome {
            name: "positivity".into(),
            passed: report.verdict.passed(),
            line: report.verdict_line(),
        });
    }
    if let Some(inv) = monitor.invariant {
        if !(inv.level > 0.0 && inv.slack >= 0.0) {
            return Err(CliError::Config("invariant level must be positive and slack >= 0".into()));
        }
        log.require("F_value").map_err(invalid)?;
        let escape = check_invariant_level(&log, inv.level, inv.slack);
        outcomes.push(CheckOutcome {
            name: "invariant".into(),
            passed: escape.is_none(),
            line: format!(
                "VERDICT {} check=invariant-level level={} escape_row={}",
                verdict(escape.is_none()),
                inv.level,
                escape.map_or("none".into(), |k| k.to_string())
            ),
        });
    }
    if let Some(e) = monitor.envelope {
        log.require("W2_to_target").map_err(invalid)?;
        let env = DissEnvelope {
            k: e.k,
            lambda: e.lambda,
            gamma_form: GammaForm::from(e.gamma_form),
            gain: e.gain,
            exponent: match e.gamma_form {
                GammaName::Linear => 1.0,
                GammaName::Sqrt => 0.5,
                GammaName::Power => e.exponent,
            },
            plateaus: Vec::new(),
            residual: f64::NAN,
            coverage: f64::NAN,
            valid: true,
        };
        env.annotate(&mut log, e.u_norm);
        let dominated = log
            .w2_to_target
            .iter()
            .zip(&log.bound)
            .filter(|(w, b)| **w <= **b * (1.0 + e.slack))
            .count();
        let fraction = dominated as f64 / log.len().max(1) as f64;
        let passed = fraction >= e.coverage;
        if let Some(a) = art.as_mut() {
            a.write_csv("annotated_trajectory.csv", Columns::Exact(LOG_HEADER), |w| log.write_csv(&mut *w))?;
        }
        outcomes.push(CheckOutcome {
            name: "envelope".into(),
            passed,
            line: format!(
                "VERDICT {} check=envelope-domination fraction={fraction:.6} coverage={}",
                verdict(passed),
                e.coverage
            ),
        });
    }

    if let Some(mut a) = art {
        let text: String = outcomes.iter().map(|o| format!("{}\n", o.line)).collect();
        a.write_bytes("verdicts.txt", text.as_bytes())?;
        let mut extra = BTreeMap::new();
        for o in &outcomes {
            extra.insert(format!("check.{}", o.name), verdict(o.passed).into());
        }
        a.finish("check", monitor, extra)?;
    }
    Ok(outcomes)
}
