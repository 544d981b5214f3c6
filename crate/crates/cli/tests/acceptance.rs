//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use dissflow_cli::config::ExperimentConfig;
use dissflow_cli::figures::demo_figures;
use dissflow_cli::sweep::sweep;
use dissflow_core::flows::{
    integrate, make_perturbed_gradient_flow, DisturbanceSignal, FlowConfig, PerturbationField, Probes,
};
use dissflow_core::functionals::{
    check_gradient_dominance, check_l_smoothness, check_quadratic_growth, FnField, FunctionalSpec, QuadraticWell,
};
use dissflow_core::kde::{
    bandwidth_rule, kde_evaluate, kde_perturbation_bound, nadaraya_error_kde, nadaraya_error_particles,
    nadaraya_velocity, KernelSpec,
};
use dissflow_core::measures::sample_density_stratified;
use dissflow_core::monitor::{
    check_decay_condition, fit_envelope, ls_slope, markov_nss_check, plateau, DecayConfig, EnvelopeConfig,
    TrajectoryLog,
};
use dissflow_core::sdot::{quantization_sweep, run_sdot_flow, SdotFlowConfig};
use dissflow_core::transport::{
    matching_cost, sinkhorn_divergence, w2_assignment, w2_exact_1d, OtMeasure, SinkhornConfig,
};
use dissflow_core::{BoxDomain, GridDensity, GridLayout, ParticleEnsemble, PointSet, TargetSet};
use ndarray::{Array2, ArrayView2};

type Outcome = (bool, String);
type OuRuns = Vec<(usize, Vec<(f64, TrajectoryLog)>)>;
type Criterion<'a> = (&'static str, Option<Duration>, Box<dyn Fn() -> Outcome + 'a>);

fn unit_interval_points(n: usize, seed: u64, lo: f64, hi: f64) -> ParticleEnsemble {
    let sample = ParticleEnsemble::uniform(BoxDomain::cube(1, lo, hi).unwrap(), n, seed).unwrap();
    ParticleEnsemble::new(BoxDomain::cube(1, -20.0, 20.0).unwrap(), sample.positions().clone()).unwrap()
}

/// All permutations of `0..n` (Heap's algorithm).
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(p.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, p, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            p.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

fn c1_exact_ot() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..200u64 {
        let n = 2 + (k as usize * 37) % 511;
        let a = unit_interval_points(n, 2 * k + 1, -3.0, 3.0);
        let b = unit_interval_points(n, 2 * k + 2, -1.0, 5.0);
        let sorted = w2_exact_1d(&a, &b).unwrap().0;
        let assigned = w2_assignment(&a, &b).unwrap().0;
        worst = worst.max((sorted - assigned).abs());
    }
    let mut brute_ok = 0;
    for k in 0..50u64 {
        let n = 1 + (k as usize % 6);
        let a = unit_interval_points(n, 1000 + 2 * k, 0.0, 1.0);
        let b = unit_interval_points(n, 1001 + 2 * k, 0.0, 2.0);
        let brute = permutations(n)
            .iter()
            .map(|p| matching_cost(&a, &b, p))
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        let sorted = w2_exact_1d(&a, &b).unwrap().0;
        let assigned = w2_assignment(&a, &b).unwrap().0;
        brute_ok += usize::from(sorted == brute && assigned == brute);
    }
    (
        worst <= 1e-10 && brute_ok == 50,
        format!("max|sort-assignment|={worst:.2e} brute_force_exact={brute_ok}/50"),
    )
}

fn gaussian_sample(mean: f64, sigma: f64, n: usize, seed: u64) -> ParticleEnsemble {
    let dom = BoxDomain::cube(1, mean - 8.0 * sigma, mean + 8.0 * sigma).unwrap();
    let density = GridDensity::gaussian(GridLayout::uniform(dom, 4000).unwrap(), &[mean], sigma).unwrap();
    let s = sample_density_stratified(&density, n, seed).unwrap();
    ParticleEnsemble::new(BoxDomain::cube(1, -5.0, 6.0).unwrap(), s.positions().clone()).unwrap()
}

fn c2_sinkhorn() -> Outcome {
    let sigma = 0.5;
    let a = gaussian_sample(0.0, sigma, 5000, 21);
    let b = gaussian_sample(1.0, sigma, 5000, 22);
    let cfg = SinkhornConfig {
        tol: 1e-7,
        ..SinkhornConfig::with_epsilon(0.01 * sigma * sigma)
    };
    let div = sinkhorn_divergence(OtMeasure::Ensemble(&a), OtMeasure::Ensemble(&b), &cfg).unwrap();
    let err = (div.divergence - 1.0).abs();
    let marg = div.max_marginal_error();
    (
        err <= 0.02 && marg < 1e-6 && div.cross.converged,
        format!("divergence={:.5} rel_err={err:.4} marginal={marg:.2e}", div.divergence),
    )
}

fn cfg(dt: f64, t_end: f64, seed: u64, log_every: usize) -> FlowConfig {
    FlowConfig {
        dt,
        t_end,
        seed,
        log_every,
        ..FlowConfig::default()
    }
}

/// OU runs at every `u`, with per-particle distances to the origin.
fn ou_runs(d: usize, us: &[f64]) -> Vec<(f64, TrajectoryLog)> {
    let dom = BoxDomain::cube(d, -4.0, 4.0).unwrap();
    let start = ParticleEnsemble::uniform(BoxDomain::cube(d, -1.0, 1.0).unwrap(), 10_000, 5).unwrap();
    let rho = ParticleEnsemble::new(dom, start.positions().clone()).unwrap();
    let spec = FunctionalSpec::potential(QuadraticWell::unit(d)).with_moduli(Some(1.0), Some(1.0));
    let target = TargetSet::Points(PointSet::single(&vec![0.0; d]));
    let pert = PerturbationField::IsotropicDiffusion { surrogate: None };
    us.iter()
        .enumerate()
        .map(|(k, &u)| {
            let signal = DisturbanceSignal::Constant(u);
            let drift = make_perturbed_gradient_flow(&spec, &pert, &signal);
            let probes = Probes::to_target(&target).with_distance_set(PointSet::single(&vec![0.0; d]));
            let out = integrate(&rho, &drift, &pert, &signal, &cfg(2e-3, 10.0, 100 + k as u64, 25), &probes).unwrap();
            (u, out.log)
        })
        .collect()
}

const OU_LEVELS: [f64; 3] = [0.01, 0.02, 0.05];

fn c3_ou_gain(runs: &OuRuns) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (d, logs) in runs {
        let mut worst: f64 = 0.0;
        for (u, log) in logs {
            let p = plateau(log, *u, 0.2).unwrap();
            let rel = (p.value * p.value - *d as f64 * u).abs() / (*d as f64 * u);
            worst = worst.max(rel);
        }
        let refs: Vec<(f64, &TrajectoryLog)> = logs.iter().map(|(u, l)| (*u, l)).collect();
        let env = fit_envelope(&refs, &EnvelopeConfig::default()).unwrap();
        ok &= worst <= 0.15 && (env.exponent - 0.5).abs() <= 0.1;
        detail.push(format!("d={d}: max_rel_err={worst:.3} exponent={:.3}", env.exponent));
    }
    (ok, detail.join("; "))
}

fn c10_markov(runs: &OuRuns) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (d, logs) in runs {
        let refs: Vec<(f64, &TrajectoryLog)> = logs.iter().map(|(u, l)| (*u, l)).collect();
        let env = fit_envelope(&refs, &EnvelopeConfig::default()).unwrap();
        for (u, log) in logs {
            let r = markov_nss_check(log, &env, *u, &[0.05, 0.1]).unwrap();
            ok &= r.verdict.passed();
            let worst: Vec<String> = r.worst.iter().map(|(e, w)| format!("{e}:{w:.4}")).collect();
            detail.push(format!("d={d},u={u} worst=[{}]", worst.join(",")));
        }
    }
    (ok, detail.join(" "))
}

fn c4_decay() -> Outcome {
    let dom = BoxDomain::cube(2, -3.0, 3.0).unwrap();
    let start = ParticleEnsemble::uniform(BoxDomain::cube(2, -2.0, 2.0).unwrap(), 500, 9).unwrap();
    let rho = ParticleEnsemble::new(dom, start.positions().clone()).unwrap();
    let spec = FunctionalSpec::potential(QuadraticWell::unit(2)).with_moduli(Some(1.0), Some(1.0));
    let target = TargetSet::Points(PointSet::single(&[0.0, 0.0]));
    let pert = PerturbationField::AdditiveField(std::sync::Arc::new(FnField::new(
        "constant",
        |x: ArrayView2<'_, f64>, _t| Array2::from_shape_fn(x.raw_dim(), |(_, k)| [0.6, -0.8][k]),
    )));
    let mut ok = true;
    let mut detail = Vec::new();
    for u in [0.05, 0.2, 0.5] {
        let signal = DisturbanceSignal::Constant(u);
        let drift = make_perturbed_gradient_flow(&spec, &pert, &signal);
        let probes = Probes::to_target(&target).with_lyapunov(&spec, 0.0);
        let out = integrate(&rho, &drift, &pert, &signal, &cfg(1e-3, 5.0, 0, 1), &probes).unwrap();
        let report = check_decay_condition(&out.log, &DecayConfig::default()).unwrap();
        ok &= report.fraction >= 0.99;
        detail.push(format!("u={u}:{:.4}({} steps)", report.fraction, report.points.len()));
    }
    (ok, format!("fraction {}", detail.join(" ")))
}

fn uniform_1d(cells: usize) -> GridDensity {
    GridDensity::uniform(GridLayout::uniform(BoxDomain::cube(1, 0.0, 1.0).unwrap(), cells).unwrap())
}

fn c5_quantization() -> Outcome {
    let ns = [4, 8, 16, 32, 64];
    let r1 = quantization_sweep(&uniform_1d(4096), &ns, &SdotFlowConfig::default(), 3).unwrap();
    let worst = r1
        .rows
        .iter()
        .map(|r| {
            let floor = 1.0 / (12.0 * (r.n * r.n) as f64);
            (r.ultimate_energy - floor).abs() / floor
        })
        .fold(0.0, f64::max);
    let target2 = GridDensity::uniform(GridLayout::uniform(BoxDomain::cube(2, 0.0, 1.0).unwrap(), 160).unwrap());
    let cfg2 = SdotFlowConfig {
        energy_rtol: 1e-6,
        max_steps: 400,
        ..SdotFlowConfig::default()
    };
    let r2 = quantization_sweep(&target2, &[16, 32, 64, 128, 256], &cfg2, 4).unwrap();
    (
        worst <= 0.05 && (r1.slope + 2.0).abs() <= 0.1 && (r2.slope + 1.0).abs() <= 0.2,
        format!("1d max_rel_err={worst:.2e} slope_1d={:.4} slope_2d={:.4}", r1.slope, r2.slope),
    )
}

fn sdot_1d_run(dt: f64) -> dissflow_core::sdot::SdotRun {
    let target = uniform_1d(4096);
    let sites = dissflow_core::measures::sample_density(&target, 16, 11).unwrap();
    let cfg = SdotFlowConfig {
        dt,
        ..SdotFlowConfig::default()
    };
    run_sdot_flow(sites.positions().view(), &target, &cfg).unwrap()
}

fn c6_decomposition() -> Outcome {
    let run = sdot_1d_run(0.1);
    let worst = run.energies.iter().map(|e| e.decomposition_error()).fold(0.0, f64::max);
    (worst <= 1e-6, format!("steps={} max_rel_err={worst:.2e}", run.energies.len()))
}

fn c7_sdot_envelope() -> Outcome {
    let run = sdot_1d_run(0.1);
    let floor = 1.0 / (12.0 * 16.0 * 16.0);
    let excess0 = run.energies[0].energy - floor;
    let mut worst: f64 = 0.0;
    for (t, e) in run.times.iter().zip(&run.energies) {
        let envelope = excess0 * (-2.0 * t).exp();
        if envelope > 1e-14 {
            worst = worst.max((e.energy - floor) / envelope);
        }
    }
    (worst <= 1.1, format!("max (E-floor)/envelope={worst:.4} slack=1.1"))
}

fn c8_kde_bound() -> Outcome {
    let d = 2;
    let dom = BoxDomain::cube(d, 0.0, 1.0).unwrap();
    let ns = [100, 1000, 10_000];
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let n = ns[k as usize % 3];
        let lip = 0.5 + 0.25 * (k % 7) as f64;
        let center = [0.3 + 0.02 * k as f64, 0.7 - 0.015 * k as f64];
        let c = 0.2 + 0.05 * (k % 4) as f64;
        let ideal = move |q: ArrayView2<'_, f64>| -> dissflow_core::Result<Array2<f64>> {
            Ok(Array2::from_shape_fn(q.raw_dim(), |(i, j)| lip * (q[[i, j]] - center[j])))
        };
        let z = ParticleEnsemble::uniform(dom.clone(), n, 500 + k).unwrap();
        let kernel = KernelSpec::gaussian(bandwidth_rule(n, c, d), d).unwrap();
        let quad = GridLayout::uniform(dom.clone(), (4.0 / kernel.bandwidth).ceil() as usize).unwrap();
        let field = nadaraya_velocity(&z, &kernel, &ideal, &quad).unwrap();
        let kde = kde_evaluate(&z, &kernel, &quad).unwrap();
        let err = nadaraya_error_particles(&field, &ideal)
            .unwrap()
            .max(nadaraya_error_kde(&field, &ideal, &kde).unwrap());
        let bound = kde_perturbation_bound(lip, &kernel);
        passed += usize::from(err <= bound);
        worst = worst.max(err / bound);
    }
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = ns
        .iter()
        .map(|&n| kde_perturbation_bound(1.0, &KernelSpec::gaussian(bandwidth_rule(n, 0.3, d), d).unwrap()).ln())
        .collect();
    let slope = ls_slope(&lx, &ly);
    let expected = -2.0 / (d as f64 + 2.0);
    (
        passed == 20 && (slope - expected).abs() <= 0.05,
        format!("dominated={passed}/20 max_err/bound={worst:.3} bound_slope={slope:.4} expected={expected}"),
    )
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn c9_kde_sweeps() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (file, sign) in [("kde_u_sweep.toml", 1.0), ("kde_n_sweep.toml", -1.0)] {
        let cfg = ExperimentConfig::load(&configs_dir().join(file)).unwrap();
        let report = sweep(&cfg, &tmp.path().join(file), None).unwrap();
        let seeds = cfg.sweep.as_ref().and_then(|s| s.seeds.as_ref()).map_or(1, Vec::len);
        ok &= sign * report.spearman >= 0.9 && seeds == 5;
        detail.push(format!("{}: spearman={:.3} seeds={seeds}", report.axis.name(), report.spearman));
    }
    (ok, detail.join(" "))
}

fn c11_functionals() -> Outcome {
    let dom = BoxDomain::cube(2, -3.0, 3.0).unwrap();
    let ensembles: Vec<ParticleEnsemble> = (0..200u64)
        .map(|k| {
            let half = 0.1 + 1.9 * ((k as f64 * 0.618_033_988_75) % 1.0);
            let shift = 0.8 * (((k as f64 * 0.414_213_562) % 1.0) - 0.5);
            let s = ParticleEnsemble::uniform(BoxDomain::cube(2, shift - half, shift + half).unwrap(), 40, k).unwrap();
            ParticleEnsemble::new(dom.clone(), s.positions().clone()).unwrap()
        })
        .collect();
    let (first, second) = ensembles.split_at(100);
    let spec = FunctionalSpec::potential(QuadraticWell::unit(2)).with_moduli(Some(1.0), Some(1.0));
    let origin = TargetSet::Points(PointSet::single(&[0.0, 0.0]));
    let growth = check_quadratic_growth(&spec, first, &origin).unwrap();
    let dominance = check_gradient_dominance(&spec, first, &origin).unwrap();
    let pairs: Vec<(ParticleEnsemble, ParticleEnsemble)> =
        first.iter().cloned().zip(second.iter().cloned()).collect();
    let smooth = check_l_smoothness(&spec, &pairs).unwrap();
    let within = |lo: f64, hi: f64| (lo - 1.0).abs() <= 1e-6 && (hi - 1.0).abs() <= 1e-6;
    let counted = growth.rows.len() == 100 && dominance.rows.len() == 100 && smooth.rows.len() == 100;
    (
        counted
            && within(growth.min_ratio, growth.max_ratio)
            && within(dominance.min_ratio, dominance.max_ratio)
            && within(smooth.min_ratio, smooth.max_ratio),
        format!(
            "growth=[{:.9},{:.9}] dominance=[{:.9},{:.9}] smoothness=[{:.9},{:.9}]",
            growth.min_ratio,
            growth.max_ratio,
            dominance.min_ratio,
            dominance.max_ratio,
            smooth.min_ratio,
            smooth.max_ratio
        ),
    )
}

fn c12_demo_figures() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let s = demo_figures(tmp.path()).unwrap();
    let equal = (s.l2[0] - s.l2[1]).abs() <= 1e-10;
    let ordered = s.w2[1] < s.w2[0];
    let modes = s.modes_linear == 2 && s.modes_displacement == 1;
    (
        equal && ordered && modes,
        format!(
            "l2=({:.10},{:.10}) w2=({:.4},{:.4}) modes linear={} displacement={}",
            s.l2[0], s.l2[1], s.w2[0], s.w2[1], s.modes_linear, s.modes_displacement
        ),
    )
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let ou: std::cell::OnceCell<OuRuns> = std::cell::OnceCell::new();
    let ou_runs_all = || ou.get_or_init(|| vec![(1, ou_runs(1, &OU_LEVELS)), (2, ou_runs(2, &OU_LEVELS))]);
    let criteria: Vec<Criterion<'_>> = vec![
        ("c1-exact-ot", Some(Duration::from_secs(10)), Box::new(c1_exact_ot)),
        ("c2-sinkhorn", Some(Duration::from_secs(30)), Box::new(c2_sinkhorn)),
        ("c3-ou-gain", Some(Duration::from_secs(120)), Box::new(|| c3_ou_gain(ou_runs_all()))),
        ("c4-decay", None, Box::new(c4_decay)),
        ("c5-quantization", Some(Duration::from_secs(300)), Box::new(c5_quantization)),
        ("c6-decomposition", None, Box::new(c6_decomposition)),
        ("c7-sdot-envelope", None, Box::new(c7_sdot_envelope)),
        ("c8-kde-bound", None, Box::new(c8_kde_bound)),
        ("c9-kde-sweeps", Some(Duration::from_secs(600)), Box::new(c9_kde_sweeps)),
        ("c10-markov", None, Box::new(|| c10_markov(ou_runs_all()))),
        ("c11-functionals", None, Box::new(c11_functionals)),
        ("c12-demo-figures", None, Box::new(c12_demo_figures)),
    ];
    let mut failures = 0;
    for (name, budget, run) in &criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = run();
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let ok = passed && in_time;
        failures += usize::from(!ok);
        let budget_text = budget.map_or(String::new(), |b| format!(" budget={}s", b.as_secs()));
        println!(
            "{} {name} {detail} time={:.1}s{budget_text}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
