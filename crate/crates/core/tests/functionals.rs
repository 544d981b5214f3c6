use dissflow_core::functionals::*;
use dissflow_core::kde::KernelSpec;
use dissflow_core::measures::{
    sample_density_stratified, BoxDomain, GridDensity, GridLayout, ParticleEnsemble, PointSet, TargetSet,
};
use dissflow_core::Error;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn origin(d: usize) -> TargetSet {
    TargetSet::Points(PointSet::single(&vec![0.0; d]))
}

fn random_ensembles(count: usize, n: usize, d: usize, seed: u64) -> Vec<ParticleEnsemble> {
    let dom = BoxDomain::cube(d, -3.0, 3.0).unwrap();
    let mut rng = dissflow_core::rng::substream(seed, "tests/ensembles");
    (0..count)
        .map(|_| {
            let scale: f64 = rng.random_range(0.1..2.0);
            let shift: f64 = rng.random_range(-0.5..0.5);
            let normal = Normal::new(shift, scale).unwrap();
            let pos = Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
            ParticleEnsemble::reflected(dom.clone(), pos).unwrap()
        })
        .collect()
}

#[test]
fn potential_energy_examples() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(1));
    let dom = BoxDomain::cube(1, -1.0, 1.0).unwrap();
    let zero = ParticleEnsemble::concentrated(dom, &[0.0], 10).unwrap();
    assert_eq!(eval_functional(&spec, &zero).unwrap(), 0.0);

    let unit = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let u = ParticleEnsemble::uniform(unit, 100_000, 5).unwrap();
    let v = eval_functional(&spec, &u).unwrap();
    assert!((v - 1.0 / 6.0).abs() < 0.005, "{v}");
}

#[test]
fn ot_functional_at_target_is_zero() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let rho = ParticleEnsemble::uniform(dom, 64, 2).unwrap();
    let target = TargetSet::Ensemble(rho.clone());
    let spec = FunctionalSpec::ot_to_target(target, 0.0);
    assert_eq!(eval_functional(&spec, &rho).unwrap(), 0.0);
    let v = gradient_field(&spec).evaluate(&rho, 0.0).unwrap();
    assert!(v.iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn quadratic_gradient_is_minus_identity() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(3));
    let rho = &random_ensembles(1, 50, 3, 1)[0];
    let v = gradient_field(&spec).evaluate(rho, 0.0).unwrap();
    assert_eq!(v, -rho.positions());
}

#[test]
fn entropy_requires_surrogate() {
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let rho = ParticleEnsemble::uniform(dom, 10, 1).unwrap();
    let spec = FunctionalSpec::entropy(None);
    assert!(matches!(eval_functional(&spec, &rho), Err(Error::MissingSurrogate)));
    assert!(matches!(first_variation_gradient(&spec, &rho), Err(Error::MissingSurrogate)));
}

#[test]
fn entropy_velocity_on_gaussian_oracle() {
    let sigma = 0.8;
    let dom = BoxDomain::cube(1, -5.0, 5.0).unwrap();
    let layout = GridLayout::uniform(dom, 1000).unwrap();
    let dens = GridDensity::gaussian(layout, &[0.0], sigma).unwrap();
    let rho = sample_density_stratified(&dens, 2000, 3).unwrap();
    let spec = FunctionalSpec::entropy(Some(Surrogate::Oracle(dens)));
    let v = gradient_field(&spec).evaluate(&rho, 0.0).unwrap();
    for (x, vx) in rho.positions().iter().zip(v.iter()) {
        // Bulk only: inside one standard deviation, away from the mode.
        if x.abs() > 0.2 * sigma && x.abs() < sigma {
            let expected = x / (sigma * sigma);
            assert!((vx - expected).abs() <= 0.1 * expected.abs(), "x={x}: {vx} vs {expected}");
            // Points away from the mode.
            assert!(vx * x > 0.0);
        }
    }
}

#[test]
fn entropy_of_uniform_and_gaussian() {
    let dom = BoxDomain::cube(1, 0.0, 2.0).unwrap();
    let uniform = GridDensity::uniform(GridLayout::uniform(dom, 100).unwrap());
    assert!((grid_entropy(&uniform) + 2f64.ln()).abs() < 1e-12);
    let sigma = 0.5;
    let wide = BoxDomain::cube(1, -6.0, 6.0).unwrap();
    let g = GridDensity::gaussian(GridLayout::uniform(wide, 4000).unwrap(), &[0.0], sigma).unwrap();
    let analytic = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
    assert!((grid_entropy(&g) - analytic).abs() < 1e-4);
}

#[test]
fn kde_surrogate_entropy_is_finite() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let rho = ParticleEnsemble::uniform(dom.clone(), 500, 8).unwrap();
    let surrogate = Surrogate::Kde {
        kernel: KernelSpec::gaussian(0.08, 2).unwrap(),
        layout: GridLayout::uniform(dom, 40).unwrap(),
        floor: DEFAULT_DENSITY_FLOOR,
    };
    let h = eval_functional(&FunctionalSpec::entropy(Some(surrogate)), &rho).unwrap();
    // Entropy of a density on the unit square is at least that of the uniform (0).
    assert!(h.is_finite() && h >= 0.0, "{h}");
}

#[test]
fn quadratic_growth_unit_well() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(1)).with_moduli(Some(1.0), None);
    let samples = random_ensembles(100, 40, 1, 11);
    let report = check_quadratic_growth(&spec, &samples, &origin(1)).unwrap();
    assert!(report.violations.is_empty());
    assert!(report.min_ratio >= 1.0 - 1e-6 && report.max_ratio <= 1.0 + 1e-6);
}

#[test]
fn quadratic_growth_skips_target() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(1)).with_moduli(Some(1.0), None);
    let dom = BoxDomain::cube(1, -1.0, 1.0).unwrap();
    let at_target = ParticleEnsemble::concentrated(dom, &[0.0], 5).unwrap();
    let report = check_quadratic_growth(&spec, &[at_target], &origin(1)).unwrap();
    assert_eq!(report.skipped, vec![0]);
    assert!(report.rows.is_empty());
}

#[test]
fn growth_and_dominance_recover_modulus() {
    for m in [0.5, 2.0, 3.0] {
        let spec = FunctionalSpec::potential(QuadraticWell::new(vec![0.0, 0.0], m).unwrap())
            .with_moduli(Some(m), None);
        let samples = random_ensembles(30, 25, 2, 7);
        let growth = check_quadratic_growth(&spec, &samples, &origin(2)).unwrap();
        let dominance = check_gradient_dominance(&spec, &samples, &origin(2)).unwrap();
        assert!((growth.min_ratio - m).abs() < 0.01 * m, "growth {}", growth.min_ratio);
        assert!((dominance.min_ratio - m).abs() < 0.01 * m, "dominance {}", dominance.min_ratio);
        assert!(growth.violations.is_empty() && dominance.violations.is_empty());
    }
}

#[test]
fn gradient_dominance_identity() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(1)).with_moduli(Some(1.0), None);
    let samples = random_ensembles(20, 30, 1, 2);
    let report = check_gradient_dominance(&spec, &samples, &origin(1)).unwrap();
    for row in &report.rows {
        assert!((row.lhs - row.rhs).abs() <= 1e-10 * row.rhs.max(1.0));
    }
    let dom = BoxDomain::cube(1, -1.0, 1.0).unwrap();
    let at_min = ParticleEnsemble::concentrated(dom, &[0.0], 4).unwrap();
    let r = check_gradient_dominance(&spec, &[at_min], &origin(1)).unwrap();
    assert_eq!(r.skipped, vec![0]);
}

#[test]
fn l_smoothness_of_quadratic_is_exact() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(2)).with_moduli(None, Some(1.0));
    let a = random_ensembles(20, 12, 2, 3);
    let b = random_ensembles(20, 12, 2, 4);
    let pairs: Vec<_> = a.into_iter().zip(b).collect();
    let report = check_l_smoothness(&spec, &pairs).unwrap();
    assert!((report.min_ratio - 1.0).abs() < 1e-6 && (report.max_ratio - 1.0).abs() < 1e-6);
    let same = pairs[0].0.clone();
    let r = check_l_smoothness(&spec, &[(same.clone(), same)]).unwrap();
    assert_eq!(r.skipped, vec![0]);
}

/// Largest `‖∇²V·e‖` over random points and unit directions, by central
/// differences of `∇V`.
fn hessian_norm_estimate(v: &dyn Potential, dom: &BoxDomain, seed: u64) -> f64 {
    let d = dom.dim();
    let mut rng = dissflow_core::rng::substream(seed, "tests/hessian");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..200 {
        let x: Vec<f64> = (0..d).map(|k| rng.random_range(dom.lower()[k]..dom.upper()[k])).collect();
        let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
        let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + h * b / norm).collect();
        let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - h * b / norm).collect();
        v.gradient(&xp, &mut gp);
        v.gradient(&xm, &mut gm);
        let hv = gp.iter().zip(&gm).map(|(a, b)| ((a - b) / (2.0 * h)).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(hv);
    }
    worst
}

#[test]
fn l_smoothness_bounded_by_hessian_oracle() {
    let v = PseudoHuber::new(vec![0.2, -0.1], 0.5).unwrap();
    let dom = BoxDomain::cube(2, -3.0, 3.0).unwrap();
    let l = hessian_norm_estimate(&v, &dom, 5);
    assert!(l <= 1.0 + 1e-6);
    let spec = FunctionalSpec::potential(v.clone()).with_moduli(None, Some(l));
    let a = random_ensembles(100, 8, 2, 21);
    let b = random_ensembles(100, 8, 2, 22);
    let pairs: Vec<_> = a.into_iter().zip(b).collect();
    let report = check_l_smoothness(&spec, &pairs).unwrap();
    assert!(report.max_ratio <= l + 1e-6, "{} > {l}", report.max_ratio);
    assert!(spot_check_gradient_lipschitz(&v, &dom, 500, 1) <= v.gradient_lipschitz() + 1e-12);
}

#[test]
fn lifted_proper_loss_passes_checks() {
    // Pseudo-Huber is strongly convex on bounded sets with modulus
    // (1 + R²/δ²)^{-3/2}, R the largest distance to the center.
    let delta = 1.0;
    let v = PseudoHuber::new(vec![0.0], delta).unwrap();
    let r = 3.0f64;
    let lambda = (1.0 + r * r / (delta * delta)).powf(-1.5);
    let spec = FunctionalSpec::potential(v).with_moduli(Some(lambda), Some(1.0));
    let samples = random_ensembles(100, 20, 1, 31);
    let growth = check_quadratic_growth(&spec, &samples, &origin(1)).unwrap();
    let dominance = check_gradient_dominance(&spec, &samples, &origin(1)).unwrap();
    assert!(growth.violations.is_empty(), "growth min {}", growth.min_ratio);
    assert!(dominance.violations.is_empty(), "dominance min {}", dominance.min_ratio);
    let others = random_ensembles(100, 20, 1, 32);
    let pairs: Vec<_> = samples.into_iter().zip(others).collect();
    let smooth = check_l_smoothness(&spec, &pairs).unwrap();
    assert!(smooth.violations.is_empty(), "smoothness max {}", smooth.max_ratio);
}

#[test]
fn gradient_matches_finite_differences() {
    let v = PseudoHuber::new(vec![0.3, 0.1], 0.7).unwrap();
    let spec = FunctionalSpec::potential(v);
    let rho = &random_ensembles(1, 10, 2, 41)[0];
    let grad = first_variation_gradient(&spec, rho).unwrap();
    let step = 1e-5 * rho.domain().diameter();
    let n = rho.len() as f64;
    for i in 0..rho.len() {
        for k in 0..2 {
            let mut plus = rho.positions().clone();
            let mut minus = rho.positions().clone();
            plus[[i, k]] += step;
            minus[[i, k]] -= step;
            let fp = eval_functional(&spec, &ParticleEnsemble::new(rho.domain().clone(), plus).unwrap()).unwrap();
            let fm = eval_functional(&spec, &ParticleEnsemble::new(rho.domain().clone(), minus).unwrap()).unwrap();
            // F is an average, so ∂F/∂x_i = ∇V(x_i)/N.
            let fd = (fp - fm) / (2.0 * step) * n;
            let g = grad[[i, k]];
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{fd} vs {g}");
        }
    }
}

#[test]
fn fisher_information_oracles() {
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let u = GridDensity::uniform(GridLayout::uniform(dom, 50).unwrap());
    assert_eq!(fisher_information(&u, 1e-12).unwrap(), 0.0);
    for sigma in [1.0, 0.5] {
        let wide = BoxDomain::cube(1, -8.0 * sigma, 8.0 * sigma).unwrap();
        let g = GridDensity::gaussian(GridLayout::uniform(wide, 2000).unwrap(), &[0.0], sigma)
            .unwrap()
            .with_floor(1e-12)
            .unwrap();
        let floor = g.values().iter().copied().fold(f64::INFINITY, f64::min);
        let i = fisher_information(&g, floor).unwrap();
        let expected = 1.0 / (sigma * sigma);
        assert!((i - expected).abs() < 0.02 * expected, "sigma={sigma}: {i}");
    }
    let dom2 = BoxDomain::cube(2, -4.0, 4.0).unwrap();
    let g2 = GridDensity::gaussian(GridLayout::uniform(dom2, 200).unwrap(), &[0.0, 0.0], 0.7)
        .unwrap()
        .with_floor(1e-12)
        .unwrap();
    let floor = g2.values().iter().copied().fold(f64::INFINITY, f64::min);
    let i2 = fisher_information(&g2, floor).unwrap();
    assert!((i2 - 2.0 / 0.49).abs() < 0.02 * 2.0 / 0.49, "{i2}");
}

#[test]
fn fisher_floor_violation_names_cell() {
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let mut values = vec![1.0; 10];
    values[3] = 0.0;
    values[4] = 2.0;
    let g = GridDensity::from_values(GridLayout::uniform(dom, 10).unwrap(), values).unwrap();
    match fisher_information(&g, 1e-12) {
        Err(Error::DensityBelowFloor { cell, .. }) => assert_eq!(cell, 3),
        other => panic!("expected floor error, got {other:?}"),
    }
}

#[test]
fn report_csv_layout() {
    let spec = FunctionalSpec::potential(QuadraticWell::unit(1)).with_moduli(Some(1.0), None);
    let samples = random_ensembles(3, 5, 1, 1);
    let report = check_quadratic_growth(&spec, &samples, &origin(1)).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("sample,lhs,rhs,ratio"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
}
