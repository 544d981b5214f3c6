//! Sweeps: one child run per axis value and seed, executed by a worker
//! pool; the summary is ordered by axis value.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dissflow_core::monitor::{fit_envelope, markov_nss_check, DissEnvelope, EnvelopeConfig, TrajectoryLog};

use crate::artifacts::{Artifacts, Columns, MANIFEST};
use crate::config::{Axis, ExperimentConfig, Scenario, Trend};
use crate::error::{CliError, Result};
use crate::run::{prepare, simulate, CheckOutcome, RunSummary};
use crate::stats::{mean, spearman, std_dev};

pub const SUMMARY_HEADER: &str = "axisValue,finalW2,plateau,fitMetrics";

/// One row of `summary.csv`, aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub final_w2: Vec<f64>,
    pub plateau: Vec<f64>,
    pub stationary: usize,
}

impl SweepRow {
    pub fn mean_final_w2(&self) -> f64 {
        mean(&self.final_w2)
    }

    pub fn mean_plateau(&self) -> f64 {
        if self.plateau.is_empty() {
            f64::NAN
        } else {
            mean(&self.plateau)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    /// Rank correlation of the seed-averaged final distance with the axis.
    pub spearman: f64,
    pub envelope: Option<DissEnvelope>,
    pub envelope_error: Option<String>,
    pub checks: Vec<CheckOutcome>,
    pub failed_children: Vec<String>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn child_dir(axis: Axis, value: f64, seed: u64) -> String {
    format!("{}={}/seed={}", axis.name(), value, seed)
}

struct Child {
    value: f64,
    seed: u64,
    dir: String,
    cfg: ExperimentConfig,
}

/// Runs every child, writes `summary.csv`, the envelope fit and (with
/// recorded particles) per-child Markov reports, then the manifest.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<SweepReport> {
    let (cfg, _) = prepare(cfg)?;
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] section".into()))?;
    let mut art = Artifacts::create(out)?;
    let seeds = spec.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    let mut values = spec.values.clone();
    values.sort_by(f64::total_cmp);
    let children: Vec<Child> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .map(|(value, seed)| Child {
            value,
            seed,
            dir: child_dir(spec.axis, value, seed),
            cfg: cfg.child(spec.axis, value, seed),
        })
        .collect();

    let results = run_pool(&children, out, workers.or(spec.workers));

    let mut failed = Vec::new();
    let mut uncertified = Vec::new();
    for (child, res) in children.iter().zip(&results) {
        match res {
            Ok(s) => {
                adopt_child(&mut art, out, &child.dir)?;
                if !s.passed() {
                    uncertified.push(child.dir.clone());
                }
            }
            Err(e) => failed.push(format!("{}: {e}", child.dir)),
        }
    }

    let mut rows: Vec<SweepRow> = values
        .iter()
        .map(|&value| SweepRow {
            value,
            final_w2: Vec::new(),
            plateau: Vec::new(),
            stationary: 0,
        })
        .collect();
    for (child, res) in children.iter().zip(&results) {
        let row = rows.iter_mut().find(|r| r.value == child.value).expect("row per value");
        match res {
            Ok(s) => {
                row.final_w2.push(s.final_w2);
                if let Some(p) = &s.plateau {
                    row.plateau.push(p.value);
                    row.stationary += usize::from(p.stationary);
                }
            }
            Err(_) => row.final_w2.push(f64::NAN),
        }
    }

    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let ys: Vec<f64> = rows.iter().map(SweepRow::mean_final_w2).collect();
    let rho = if ys.iter().all(|y| y.is_finite()) {
        spearman(&xs, &ys)
    } else {
        f64::NAN
    };

    let mut envelope = None;
    let mut envelope_error = None;
    let disturbance_axis = matches!(spec.axis, Axis::U | Axis::Epsilon);
    if disturbance_axis && cfg.scenario != Scenario::Sdot && failed.is_empty() {
        let first_seed: Vec<(f64, &TrajectoryLog)> = children
            .iter()
            .zip(&results)
            .filter(|(c, _)| c.seed == seeds[0])
            .filter_map(|(c, r)| r.as_ref().ok().and_then(|s| s.log.as_ref()).map(|l| (c.value, l)))
            .collect();
        let env_cfg = EnvelopeConfig {
            gamma_form: spec.gamma_form.into(),
            plateau_fraction: cfg.monitor.plateau_fraction,
            ..EnvelopeConfig::default()
        };
        match fit_envelope(&first_seed, &env_cfg) {
            Ok(env) => {
                art.write_csv("envelope.csv", Columns::Exact("u_norm,plateau,noise,stationary"), |w| env.write_csv(w))?;
                envelope = Some(env);
            }
            Err(e) => envelope_error = Some(e.to_string()),
        }
    }

    let mut checks = Vec::new();
    if !failed.is_empty() {
        checks.push(CheckOutcome {
            name: "children".into(),
            passed: false,
            line: format!("VERDICT FAIL check=children failed={}", failed.len()),
        });
    }
    if !uncertified.is_empty() {
        checks.push(CheckOutcome {
            name: "child-checks".into(),
            passed: false,
            line: format!("VERDICT FAIL check=child-checks runs={}", uncertified.join(";")),
        });
    }
    let trend = spec.expect.unwrap_or(Trend::None);
    if trend != Trend::None && rows.len() >= 2 {
        let passed = match trend {
            Trend::Increasing => rho >= spec.min_spearman,
            Trend::Decreasing => rho <= -spec.min_spearman,
            Trend::None => true,
        };
        checks.push(CheckOutcome {
            name: "monotonicity".into(),
            passed,
            line: format!(
                "VERDICT {} check=monotonicity axis={} spearman={rho:.6} expect={trend:?} min={}",
                if passed { "PASS" } else { "FAIL" },
                spec.axis.name(),
                spec.min_spearman
            ),
        });
    }

    if let (Some(env), true) = (&envelope, cfg.monitor.record_particles) {
        let mut worst_pass = true;
        let mut markov_lines = Vec::new();
        for (child, res) in children.iter().zip(&results) {
            let Ok(RunSummary { log: Some(log), .. }) = res else { continue };
            if log.particle_dist2.is_empty() {
                continue;
            }
            let report = markov_nss_check(log, env, child.value, &cfg.monitor.markov_epsilons)?;
            art.write_csv(
                &format!("{}/markov.csv", child.dir),
                Columns::Exact("epsilon,t,threshold,exceedance,allowed"),
                |w| report.write_csv(w),
            )?;
            worst_pass &= report.verdict.passed();
            markov_lines.push(format!("{} {}", child.dir, report.verdict_line()));
        }
        if !markov_lines.is_empty() {
            checks.push(CheckOutcome {
                name: "markov".into(),
                passed: worst_pass,
                line: format!(
                    "VERDICT {} check=markov runs={}",
                    if worst_pass { "PASS" } else { "FAIL" },
                    markov_lines.len()
                ),
            });
        }
    }

    let summary = render_summary(&rows, rho, envelope.as_ref(), envelope_error.as_deref(), &checks);
    art.write_csv("summary.csv", Columns::WithText(SUMMARY_HEADER, 3), |w| {
        w.extend_from_slice(summary.as_bytes());
        Ok(())
    })?;

    let mut extra = BTreeMap::new();
    extra.insert("spearman".into(), format!("{rho:.17e}"));
    for c in &checks {
        extra.insert(format!("check.{}", c.name), if c.passed { "PASS" } else { "FAIL" }.into());
    }
    art.finish("sweep", &cfg, extra)?;
    let report = SweepReport {
        axis: spec.axis,
        rows,
        spearman: rho,
        envelope,
        envelope_error,
        checks,
        failed_children: failed,
    };
    if !report.failed_children.is_empty() {
        let err = CliError::Numerical(dissflow_core::Error::InvalidArgument(format!(
            "{} sweep children failed: {}",
            report.failed_children.len(),
            report.failed_children.join("; ")
        )));
        art.mark_failed(&err);
        return Err(err);
    }
    Ok(report)
}

fn run_pool(children: &[Child], out: &Path, workers: Option<usize>) -> Vec<Result<RunSummary>> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = workers.unwrap_or(available).clamp(1, children.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..children.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(child) = children.get(k) else { break };
                let res = simulate(&child.cfg, &out.join(&child.dir));
                slots.lock().expect("worker panicked")[k] = Some(res);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every child ran"))
        .collect()
}

/// Adds a child's manifest and the files it lists to the parent manifest.
fn adopt_child(art: &mut Artifacts, out: &Path, dir: &str) -> Result<()> {
    let path = out.join(dir).join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(toml::Value::Table(files)) = table.get("files") {
        for (name, hash) in files {
            if let Some(h) = hash.as_str() {
                art.adopt(format!("{dir}/{name}"), h.to_string());
            }
        }
    }
    art.adopt(format!("{dir}/{MANIFEST}"), crate::artifacts::content_hash(text.as_bytes()));
    Ok(())
}

fn render_summary(
    rows: &[SweepRow],
    rho: f64,
    env: Option<&DissEnvelope>,
    env_err: Option<&str>,
    checks: &[CheckOutcome],
) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let finite: Vec<f64> = r.final_w2.iter().copied().filter(|v| v.is_finite()).collect();
        s.push_str(&format!(
            "{},{:.17e},{:.17e},seeds={};finalW2_sd={:.6e};stationary={}/{}\n",
            r.value,
            r.mean_final_w2(),
            r.mean_plateau(),
            r.final_w2.len(),
            if finite.is_empty() { f64::NAN } else { std_dev(&finite) },
            r.stationary,
            r.plateau.len()
        ));
    }
    s.push_str(&format!("# spearman={rho:.6}\n"));
    match (env, env_err) {
        (Some(e), _) => s.push_str(&format!("# {}\n", e.verdict_line())),
        (None, Some(err)) => s.push_str(&format!("# envelope not fitted: {err}\n")),
        (None, None) => {}
    }
    for c in checks {
        s.push_str(&format!("# {}\n", c.line));
    }
    s
}
