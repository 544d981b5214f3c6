//! Certification of distributional ISS on logged trajectories.
//!
//! Every check is a pure function of the logs. Reports carry the measured
//! quantities together with a verdict line of the form
//! `VERDICT PASS key=value ...`.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Time series recorded along a flow.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub w2_to_target: Vec<f64>,
    /// `F(ρ_t) − F(ρ*)`.
    pub lyapunov: Vec<f64>,
    /// `‖ζ_u(ρ_t)‖²_{L²(ρ_t)}`.
    pub pert_norm: Vec<f64>,
    pub u: Vec<f64>,
    /// Envelope value; NaN until filled by a fit.
    pub bound: Vec<f64>,
    /// Per-particle squared distance to the target set, at each logged time
    /// (empty when not recorded).
    pub particle_dist2: Vec<Vec<f64>>,
    pub seed: u64,
    pub config_hash: String,
}

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub w2: f64,
    pub lyapunov: f64,
    pub pert_norm: f64,
    pub u: f64,
}

pub const LOG_HEADER: &str = "t,W2_to_target,F_value,pert_norm,u_t,bound_value";

impl TrajectoryLog {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: LogRow) {
        self.times.push(row.t);
        self.w2_to_target.push(row.w2);
        self.lyapunov.push(row.lyapunov);
        self.pert_norm.push(row.pert_norm);
        self.u.push(row.u);
        self.bound.push(f64::NAN);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, k: usize) -> LogRow {
        LogRow {
            t: self.times[k],
            w2: self.w2_to_target[k],
            lyapunov: self.lyapunov[k],
            pert_norm: self.pert_norm[k],
            u: self.u[k],
        }
    }

    /// Checks increasing times, equal lengths and nonnegative distances.
    /// NaN marks a series that was not recorded.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        for len in [
            self.w2_to_target.len(),
            self.lyapunov.len(),
            self.pert_norm.len(),
            self.u.len(),
            self.bound.len(),
        ] {
            if len != n {
                return Err(Error::SizeMismatch(n, len));
            }
        }
        if !self.particle_dist2.is_empty() && self.particle_dist2.len() != n {
            return Err(Error::SizeMismatch(n, self.particle_dist2.len()));
        }
        if let Some(k) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(format!("times not increasing at row {}", k + 1)));
        }
        if let Some(k) = self.w2_to_target.iter().position(|v| *v < 0.0 || v.is_infinite()) {
            return Err(Error::InvalidArgument(format!("negative or infinite W2 at row {k}")));
        }
        if let Some(k) = self.lyapunov.iter().position(|v| *v < -1e-12 || v.is_infinite()) {
            return Err(Error::InvalidArgument(format!("negative or infinite Lyapunov value at row {k}")));
        }
        Ok(())
    }

    /// Errors unless every entry of the named series was recorded (not NaN).
    pub fn require(&self, series: &str) -> Result<()> {
        let values = match series {
            "W2_to_target" => &self.w2_to_target,
            "F_value" => &self.lyapunov,
            "pert_norm" => &self.pert_norm,
            _ => return Err(Error::InvalidArgument(format!("unknown series {series:?}"))),
        };
        match values.iter().position(|v| v.is_nan()) {
            Some(k) => Err(Error::InvalidArgument(format!("{series} missing at row {k}"))),
            None => Ok(()),
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed={},config_hash={}", self.seed, self.config_hash)?;
        writeln!(out, "{LOG_HEADER}")?;
        for k in 0..self.len() {
            writeln!(
                out,
                "{:.10e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.times[k], self.w2_to_target[k], self.lyapunov[k], self.pert_norm[k], self.u[k], self.bound[k]
            )?;
        }
        Ok(())
    }

    /// Reads the format of [`TrajectoryLog::write_csv`]; per-particle
    /// distances are not part of it.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut log = Self::default();
        let mut header_seen = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.trim().split(',') {
                    match kv.split_once('=') {
                        Some(("seed", v)) => {
                            log.seed = v.trim().parse().map_err(|_| Error::Parse(format!("bad seed {v:?}")))?
                        }
                        Some(("config_hash", v)) => log.config_hash = v.trim().to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                if line != LOG_HEADER {
                    return Err(Error::Parse(format!("expected header {LOG_HEADER:?}, got {line:?}")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if fields.len() != 6 {
                return Err(Error::Parse(format!("line {}: expected 6 fields, got {}", lineno + 1, fields.len())));
            }
            log.push(LogRow {
                t: fields[0],
                w2: fields[1],
                lyapunov: fields[2],
                pert_norm: fields[3],
                u: fields[4],
            });
            *log.bound.last_mut().expect("just pushed") = fields[5];
        }
        if !header_seen {
            return Err(Error::Parse("missing header".into()));
        }
        log.validate()?;
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

/// Settings of [`check_decay_condition`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayConfig {
    /// Modulus in `χ(r) = ½λ²r²`.
    pub lambda: f64,
    /// Gain in `γ = gain · pert_norm`.
    pub gamma_gain: f64,
    /// Required fraction of satisfied points.
    pub threshold: f64,
    /// Relative slack per unit of sampling interval.
    pub slack: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma_gain: 0.5,
            threshold: 0.99,
            slack: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayPoint {
    pub t: f64,
    pub v_dot: f64,
    pub chi: f64,
    pub gamma: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub points: Vec<DecayPoint>,
    pub fraction: f64,
    pub verdict: Verdict,
}

impl DecayReport {
    pub fn verdict_line(&self) -> String {
        format!(
            "VERDICT {} check=decay fraction={:.6} points={}",
            self.verdict,
            self.fraction,
            self.points.len()
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,V_dot,chi,gamma,satisfied")?;
        for p in &self.points {
            writeln!(out, "{:.10e},{:.17e},{:.17e},{:.17e},{}", p.t, p.v_dot, p.chi, p.gamma, u8::from(p.satisfied))?;
        }
        writeln!(out, "# {}", self.verdict_line())?;
        Ok(())
    }
}

/// `V̇ ≤ −½λ²W₂² + gain·pert_norm` at interior points, with `V̇` a central
/// difference. The slack is `slack · Δt · (|V̇| + χ + γ)` plus a tiny
/// absolute floor, Δt being the local sampling interval.
pub fn check_decay_condition(log: &TrajectoryLog, cfg: &DecayConfig) -> Result<DecayReport> {
    if log.len() < 3 {
        return Err(Error::LogTooShort { len: log.len(), min: 3 });
    }
    log.validate()?;
    for series in ["W2_to_target", "F_value", "pert_norm"] {
        log.require(series)?;
    }
    let mut points = Vec::with_capacity(log.len() - 2);
    for k in 1..log.len() - 1 {
        let dt = log.times[k + 1] - log.times[k - 1];
        let v_dot = (log.lyapunov[k + 1] - log.lyapunov[k - 1]) / dt;
        let chi = 0.5 * cfg.lambda * cfg.lambda * log.w2_to_target[k].powi(2);
        let gamma = cfg.gamma_gain * log.pert_norm[k];
        let slack = cfg.slack * 0.5 * dt * (v_dot.abs() + chi + gamma) + 1e-14;
        points.push(DecayPoint {
            t: log.times[k],
            v_dot,
            chi,
            gamma,
            satisfied: v_dot <= -chi + gamma + slack,
        });
    }
    let fraction = points.iter().filter(|p| p.satisfied).count() as f64 / points.len() as f64;
    Ok(DecayReport {
        points,
        fraction,
        verdict: Verdict::from_bool(fraction >= cfg.threshold),
    })
}

/// Shape of the fitted gain `γ̂(‖u‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaForm {
    /// `ĝ·‖u‖`.
    Linear,
    /// `ĝ·√‖u‖`.
    Sqrt,
    /// `ĝ·‖u‖^α` with `α` fitted.
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeConfig {
    pub gamma_form: GammaForm,
    /// Fraction of each log used as the plateau window.
    pub plateau_fraction: f64,
    /// Relative slack for domination.
    pub slack: f64,
    /// Required fraction of dominated samples.
    pub coverage: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            gamma_form: GammaForm::Power,
            plateau_fraction: 0.2,
            slack: 0.05,
            coverage: 0.99,
        }
    }
}

/// Stationary level of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub u_norm: f64,
    pub value: f64,
    /// Standard deviation over the plateau window.
    pub noise: f64,
    /// Linear trend over the window was within noise.
    pub stationary: bool,
}

/// `β(r, t) = K·r·e^{−λt}` and `γ(‖u‖)` fitted on a family of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DissEnvelope {
    pub k: f64,
    pub lambda: f64,
    pub gamma_form: GammaForm,
    pub gain: f64,
    /// Exponent of `γ̂`; 1 for linear and 0.5 for square-root forms.
    pub exponent: f64,
    pub plateaus: Vec<Plateau>,
    /// Root-mean-square residual of the log-linear transient fit.
    pub residual: f64,
    /// Fraction of samples dominated by the envelope (with slack).
    pub coverage: f64,
    pub valid: bool,
}

impl DissEnvelope {
    pub fn beta(&self, r: f64, t: f64) -> f64 {
        self.k * r * (-self.lambda * t).exp()
    }

    pub fn gamma(&self, u_norm: f64) -> f64 {
        if u_norm <= 0.0 {
            0.0
        } else {
            self.gain * u_norm.powf(self.exponent)
        }
    }

    /// `β(W₂(0), t) + γ(‖u‖)`.
    pub fn bound(&self, r0: f64, t: f64, u_norm: f64) -> f64 {
        self.beta(r0, t) + self.gamma(u_norm)
    }

    /// Fills `log.bound` from the envelope.
    pub fn annotate(&self, log: &mut TrajectoryLog, u_norm: f64) {
        let r0 = log.w2_to_target.first().copied().unwrap_or(0.0);
        for (b, &t) in log.bound.iter_mut().zip(&log.times) {
            *b = self.bound(r0, t - log.times[0], u_norm);
        }
    }

    pub fn verdict_line(&self) -> String {
        format!(
            "VERDICT {} check=envelope K={:.6e} lambda={:.6e} gain={:.6e} exponent={:.6} coverage={:.6} residual={:.3e}",
            Verdict::from_bool(self.valid),
            self.k,
            self.lambda,
            self.gain,
            self.exponent,
            self.coverage,
            self.residual
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "u_norm,plateau,noise,stationary")?;
        for p in &self.plateaus {
            writeln!(out, "{:.10e},{:.17e},{:.17e},{}", p.u_norm, p.value, p.noise, u8::from(p.stationary))?;
        }
        writeln!(out, "# {}", self.verdict_line())?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(2).saturating_sub(1) as f64).sqrt()
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean of the last `fraction` of the W₂ series, with a stationarity flag:
/// the linear drift across the window must stay within twice the noise.
pub fn plateau(log: &TrajectoryLog, u_norm: f64, fraction: f64) -> Result<Plateau> {
    if log.len() < 5 {
        return Err(Error::LogTooShort { len: log.len(), min: 5 });
    }
    log.require("W2_to_target")?;
    let m = ((log.len() as f64 * fraction).ceil() as usize).clamp(3, log.len());
    let start = log.len() - m;
    let (t, w) = (&log.times[start..], &log.w2_to_target[start..]);
    let value = mean(w);
    let noise = std_dev(w);
    let drift = ls_slope(t, w).abs() * (t[m - 1] - t[0]);
    Ok(Plateau {
        u_norm,
        value,
        noise,
        stationary: drift <= 2.0 * noise + 1e-12 * value.abs().max(1e-300),
    })
}

/// Fits `β` and `γ` on runs at several disturbance levels.
///
/// Plateaus must be nondecreasing in `‖u‖` (within their noise); otherwise
/// the fit is rejected. Domination is then checked on every sample.
pub fn fit_envelope(runs: &[(f64, &TrajectoryLog)], cfg: &EnvelopeConfig) -> Result<DissEnvelope> {
    let mut levels: Vec<f64> = runs.iter().map(|r| r.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::FitRejected("need at least two disturbance levels".into()));
    }
    let mut plateaus = runs
        .iter()
        .map(|(u, log)| plateau(log, *u, cfg.plateau_fraction))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| runs[a].0.total_cmp(&runs[b].0));
    for w in order.windows(2) {
        let (a, b) = (&plateaus[w[0]], &plateaus[w[1]]);
        if b.u_norm > a.u_norm && b.value + 2.0 * (a.noise + b.noise) < a.value {
            return Err(Error::FitRejected(format!(
                "plateau decreases from {:.4e} at |u|={} to {:.4e} at |u|={}: not dISS or not yet stationary",
                a.value, a.u_norm, b.value, b.u_norm
            )));
        }
    }

    let positive: Vec<&Plateau> = plateaus.iter().filter(|p| p.u_norm > 0.0 && p.value > 0.0).collect();
    let (gain, exponent) = match cfg.gamma_form {
        GammaForm::Linear | GammaForm::Sqrt => {
            let e = if cfg.gamma_form == GammaForm::Linear { 1.0 } else { 0.5 };
            let num: f64 = positive.iter().map(|p| p.u_norm.powf(e) * p.value).sum();
            let den: f64 = positive.iter().map(|p| p.u_norm.powf(2.0 * e)).sum();
            (num / den, e)
        }
        GammaForm::Power => {
            if positive.len() < 2 {
                return Err(Error::FitRejected("power-law gain needs two positive levels".into()));
            }
            let lx: Vec<f64> = positive.iter().map(|p| p.u_norm.ln()).collect();
            let ly: Vec<f64> = positive.iter().map(|p| p.value.ln()).collect();
            let e = ls_slope(&lx, &ly);
            ((mean(&ly) - e * mean(&lx)).exp(), e)
        }
    };
    if !(gain.is_finite() && exponent.is_finite()) {
        return Err(Error::FitRejected("gain fit is not finite".into()));
    }

    // Transient: log(W₂ − plateau) against t, one intercept per run.
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut per_run = Vec::new();
    for ((_, log), p) in runs.iter().zip(&plateaus) {
        let floor = p.value + 3.0 * p.noise;
        let pts: Vec<(f64, f64)> = log
            .times
            .iter()
            .zip(&log.w2_to_target)
            .take_while(|(_, &w)| w > floor && w - p.value > 0.0)
            .map(|(&t, &w)| (t - log.times[0], (w - p.value).ln()))
            .collect();
        if pts.len() < 2 {
            per_run.push(None);
            continue;
        }
        let (ts, zs): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        let (mt, mz) = (mean(&ts), mean(&zs));
        sxy += ts.iter().zip(&zs).map(|(t, z)| (t - mt) * (z - mz)).sum::<f64>();
        sxx += ts.iter().map(|t| (t - mt).powi(2)).sum::<f64>();
        per_run.push(Some((ts, zs, mt, mz)));
    }
    if sxx <= 0.0 {
        return Err(Error::FitRejected("no transient samples above the plateaus".into()));
    }
    let lambda = -sxy / sxx;
    if !(lambda > 0.0) {
        return Err(Error::FitRejected(format!("fitted decay rate {lambda} is not positive")));
    }
    let mut k: f64 = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for ((_, log), fit) in runs.iter().zip(&per_run) {
        let Some((ts, zs, mt, mz)) = fit else { continue };
        let intercept = mz + lambda * mt;
        let r0 = log.w2_to_target[0];
        if r0 > 0.0 {
            k = k.max(intercept.exp() / r0);
        }
        for (t, z) in ts.iter().zip(zs) {
            sq += (z - (intercept - lambda * t)).powi(2);
            count += 1;
        }
    }
    let residual = (sq / count.max(1) as f64).sqrt();

    let mut env = DissEnvelope {
        k,
        lambda,
        gamma_form: cfg.gamma_form,
        gain,
        exponent,
        plateaus: Vec::new(),
        residual,
        coverage: 0.0,
        valid: false,
    };
    let mut dominated = 0usize;
    let mut total = 0usize;
    for (u, log) in runs {
        let r0 = log.w2_to_target[0];
        for (&t, &w) in log.times.iter().zip(&log.w2_to_target) {
            total += 1;
            if w <= (1.0 + cfg.slack) * env.bound(r0, t - log.times[0], *u) + 1e-12 {
                dominated += 1;
            }
        }
    }
    env.coverage = dominated as f64 / total as f64;
    env.valid = env.coverage >= cfg.coverage;
    plateaus.sort_by(|a, b| a.u_norm.total_cmp(&b.u_norm));
    env.plateaus = plateaus;
    Ok(env)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovRow {
    pub epsilon: f64,
    pub t: f64,
    pub threshold: f64,
    pub exceedance: f64,
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovReport {
    pub rows: Vec<MarkovRow>,
    /// Largest exceedance per epsilon.
    pub worst: Vec<(f64, f64)>,
    pub verdict: Verdict,
}

impl MarkovReport {
    pub fn verdict_line(&self) -> String {
        let worst: Vec<String> = self.worst.iter().map(|(e, w)| format!("worst@{e}={w:.6}")).collect();
        format!("VERDICT {} check=markov {}", self.verdict, worst.join(" "))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epsilon,t,threshold,exceedance,allowed")?;
        for r in &self.rows {
            writeln!(out, "{},{:.10e},{:.17e},{:.17e},{:.17e}", r.epsilon, r.t, r.threshold, r.exceedance, r.allowed)?;
        }
        writeln!(out, "# {}", self.verdict_line())?;
        Ok(())
    }
}

/// Empirical probability that a particle lies farther than
/// `(β + γ)/√ε` from the target set, against `ε` plus a three-sigma
/// binomial allowance, at every logged time.
pub fn markov_nss_check(
    log: &TrajectoryLog,
    envelope: &DissEnvelope,
    u_norm: f64,
    epsilons: &[f64],
) -> Result<MarkovReport> {
    if log.particle_dist2.is_empty() {
        return Err(Error::InvalidArgument("log has no per-particle distances".into()));
    }
    log.validate()?;
    log.require("W2_to_target")?;
    let n = log.particle_dist2[0].len();
    for &eps in epsilons {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1], got {eps}")));
        }
        if (n as f64) * eps < 20.0 {
            return Err(Error::EnsembleTooSmall { n, epsilon: eps });
        }
    }
    let r0 = log.w2_to_target[0];
    let mut rows = Vec::new();
    let mut worst = Vec::new();
    let mut ok = true;
    for &eps in epsilons {
        let allowed = eps + 3.0 * (eps * (1.0 - eps) / n as f64).sqrt();
        let mut w: f64 = 0.0;
        for (k, d2) in log.particle_dist2.iter().enumerate() {
            let t = log.times[k];
            let threshold = envelope.bound(r0, t - log.times[0], u_norm) / eps.sqrt();
            let thr2 = threshold * threshold;
            let exceedance = d2.iter().filter(|&&v| v > thr2).count() as f64 / d2.len() as f64;
            ok &= exceedance <= allowed;
            w = w.max(exceedance);
            rows.push(MarkovRow {
                epsilon: eps,
                t,
                threshold,
                exceedance,
                allowed,
            });
        }
        worst.push((eps, w));
    }
    Ok(MarkovReport {
        rows,
        worst,
        verdict: Verdict::from_bool(ok),
    })
}

/// `ψ(r) = a·r^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    pub a: f64,
    pub p: f64,
}

impl PowerLaw {
    pub fn new(a: f64, p: f64) -> Result<Self> {
        if !(a > 0.0 && p >= 1.0) {
            return Err(Error::InvalidArgument(format!("power law needs a > 0 and p >= 1, got a={a}, p={p}")));
        }
        Ok(Self { a, p })
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.a * r.powf(self.p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    /// Largest `a` for which the lower bound holds at every point.
    pub tightest_lower: f64,
    /// Smallest `a` for which the upper bound holds at every point.
    pub tightest_upper: f64,
    /// First row violating the sandwich.
    pub witness: Option<usize>,
    pub verdict: Verdict,
}

impl PositivityReport {
    pub fn verdict_line(&self) -> String {
        format!(
            "VERDICT {} check=positivity tightest_lower={:.6e} tightest_upper={:.6e} witness={}",
            self.verdict,
            self.tightest_lower,
            self.tightest_upper,
            self.witness.map_or("none".to_string(), |w| w.to_string())
        )
    }
}

/// `ψ₁(W₂) ≤ V ≤ ψ₂(W₂)` at every logged point, with relative tolerance `1e-9`.
pub fn check_positivity_bounds(log: &TrajectoryLog, psi1: PowerLaw, psi2: PowerLaw) -> Result<PositivityReport> {
    log.validate()?;
    log.require("W2_to_target")?;
    log.require("F_value")?;
    let tol = 1e-9;
    let mut lower = f64::INFINITY;
    let mut upper: f64 = 0.0;
    let mut witness = None;
    for k in 0..log.len() {
        let (r, v) = (log.w2_to_target[k], log.lyapunov[k]);
        if r > 0.0 {
            lower = lower.min(v / r.powf(psi1.p));
            upper = upper.max(v / r.powf(psi2.p));
        }
        let lo = psi1.eval(r);
        let hi = psi2.eval(r);
        let ok = v >= lo - tol * lo.abs().max(1e-300) && v <= hi + tol * hi.abs().max(1e-300);
        if !ok && witness.is_none() {
            witness = Some(k);
        }
    }
    Ok(PositivityReport {
        tightest_lower: lower,
        tightest_upper: upper,
        witness,
        verdict: Verdict::from_bool(witness.is_none()),
    })
}

/// Once `V` drops to `level`, it stays below `level·(1 + slack)`.
/// Returns the first re-entry violation, if any.
pub fn check_invariant_level(log: &TrajectoryLog, level: f64, slack: f64) -> Option<usize> {
    let first = log.lyapunov.iter().position(|&v| v <= level)?;
    log.lyapunov[first..]
        .iter()
        .position(|&v| v > level * (1.0 + slack))
        .map(|k| k + first)
}
