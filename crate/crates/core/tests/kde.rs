use dissflow_core::kde::*;
use dissflow_core::measures::{sample_density, BoxDomain, GridDensity, GridLayout, ParticleEnsemble};
use dissflow_core::Result;
use ndarray::{Array2, ArrayView2};

fn points(dom: &BoxDomain, rows: &[&[f64]]) -> ParticleEnsemble {
    let d = dom.dim();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    ParticleEnsemble::new(dom.clone(), Array2::from_shape_vec((rows.len(), d), flat).unwrap()).unwrap()
}

fn identity_field(q: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(q.to_owned())
}

#[test]
fn bandwidth_rule_examples() {
    assert_eq!(bandwidth_rule(1, 0.7, 3), 0.7);
    assert!((bandwidth_rule(1000, 1.0, 1) - 0.1).abs() < 1e-12);
    for n in [1, 10, 1000] {
        assert!(bandwidth_rule(2 * n, 1.0, 2) < bandwidth_rule(n, 1.0, 2));
    }
}

#[test]
fn kernel_moments_match_quadrature() {
    for family in [KernelFamily::Gaussian, KernelFamily::Epanechnikov] {
        // 1D: midpoint rule on a fine grid.
        let k = KernelSpec::new(family, 1.0, 1).unwrap();
        let (n, r) = (200_000, 10.0);
        let dz = 2.0 * r / n as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let z: f64 = -r + (i as f64 + 0.5) * dz;
            let w = k.value(z * z) * dz;
            m0 += w;
            m1 += w * z.abs();
            m2 += w * z * z;
        }
        assert!((m0 - 1.0).abs() < 1e-8, "{family:?} mass {m0}");
        assert!((m1 - k.mu1()).abs() < 1e-8, "{family:?} mu1 {m1} vs {}", k.mu1());
        assert!((m2 - k.mu2()).abs() < 1e-8, "{family:?} mu2 {m2} vs {}", k.mu2());

        // 2D: radial quadrature ∫ K(r) r^p 2πr dr.
        let k = KernelSpec::new(family, 1.0, 2).unwrap();
        let dr = r / n as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let rr = (i as f64 + 0.5) * dr;
            let w = k.value(rr * rr) * std::f64::consts::TAU * rr * dr;
            m0 += w;
            m1 += w * rr;
            m2 += w * rr * rr;
        }
        assert!((m0 - 1.0).abs() < 1e-6, "{family:?} 2D mass {m0}");
        assert!((m1 - k.mu1()).abs() < 1e-6, "{family:?} 2D mu1 {m1} vs {}", k.mu1());
        assert!((m2 - k.mu2()).abs() < 1e-6, "{family:?} 2D mu2 {m2} vs {}", k.mu2());
    }
}

#[test]
fn scaled_kernel_moments() {
    let h = 0.3;
    let k = KernelSpec::gaussian(h, 1).unwrap();
    let n = 100_000;
    let dz = 20.0 * h / n as f64;
    let m2: f64 = (0..n)
        .map(|i| {
            let z: f64 = -10.0 * h + (i as f64 + 0.5) * dz;
            k.value(z * z) * z * z * dz
        })
        .sum();
    assert!((m2 - h * h * k.mu2()).abs() < 1e-10);
}

#[test]
fn single_particle_bump() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let layout = GridLayout::uniform(dom.clone(), 80).unwrap();
    let kernel = KernelSpec::gaussian(0.05, 2).unwrap();
    let one = points(&dom, &[&[0.4, 0.6]]);
    let kde = kde_evaluate(&one, &kernel, &layout).unwrap();
    assert!((kde.integral() - 1.0).abs() < 1e-6);
    let peak = kde
        .values()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    let c = layout.center(peak);
    assert!((c[0] - 0.4).abs() <= layout.spacing(0) && (c[1] - 0.6).abs() <= layout.spacing(1));

    let two = points(&dom, &[&[0.4, 0.6], &[0.4, 0.6]]);
    let kde2 = kde_evaluate(&two, &kernel, &layout).unwrap();
    for (a, b) in kde.values().iter().zip(kde2.values()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn boundary_mass_is_folded_back() {
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let layout = GridLayout::uniform(dom.clone(), 200).unwrap();
    let kernel = KernelSpec::gaussian(0.2, 1).unwrap();
    let corner = points(&dom, &[&[0.0], &[0.02], &[0.99]]);
    let kde = kde_evaluate(&corner, &kernel, &layout).unwrap();
    assert!((kde.integral() - 1.0).abs() < 1e-6);
}

#[test]
fn kde_converges_to_gaussian() {
    let dom = BoxDomain::cube(1, -5.0, 5.0).unwrap();
    let layout = GridLayout::uniform(dom, 500).unwrap();
    let truth = GridDensity::gaussian(layout.clone(), &[0.0], 1.0).unwrap();
    let sample = sample_density(&truth, 100_000, 4).unwrap();
    let kernel = KernelSpec::gaussian(bandwidth_rule(100_000, 1.0, 1), 1).unwrap();
    let kde = kde_evaluate(&sample, &kernel, &layout).unwrap();
    let l1: f64 = kde
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * layout.cell_volume();
    assert!(l1 < 0.05, "L1 error {l1}");
}

#[test]
fn score_of_single_gaussian_bump() {
    let dom = BoxDomain::cube(1, -3.0, 3.0).unwrap();
    let h = 0.5;
    let kernel = KernelSpec::gaussian(h, 1).unwrap();
    let one = points(&dom, &[&[0.0]]);
    let q = Array2::from_shape_vec((3, 1), vec![-1.0, 0.0, 0.7]).unwrap();
    let s = kde_score(&one, &kernel, q.view()).unwrap();
    for (x, v) in q.iter().zip(s.iter()) {
        assert!((v + x / (h * h)).abs() < 1e-12, "{x}: {v}");
    }
}

#[test]
fn single_agent_field_is_constant() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let kernel = KernelSpec::gaussian(0.05, 2).unwrap();
    let z = points(&dom, &[&[0.3, 0.3]]);
    let quad = GridLayout::uniform(dom.clone(), 80).unwrap();
    let field = nadaraya_velocity(&z, &kernel, &identity_field, &quad).unwrap();
    let g = field.inputs().row(0).to_owned();
    let q = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 0.5, 0.9, 0.99, 0.2]).unwrap();
    let est = field.estimate_at(q.view());
    for row in est.outer_iter() {
        assert!((&row - &g).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn gaussian_convolution_of_identity_is_identity() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let h = 0.04;
    let kernel = KernelSpec::gaussian(h, 2).unwrap();
    let quad = GridLayout::uniform(dom.clone(), 100).unwrap();
    // Agents well inside, so the truncated window stays inside the box.
    let z = points(&dom, &[&[0.4, 0.5], &[0.55, 0.45], &[0.6, 0.62]]);
    let field = nadaraya_velocity(&z, &kernel, &identity_field, &quad).unwrap();
    for (g, x) in field.inputs().iter().zip(z.positions().iter()) {
        assert!((g - x).abs() < 1e-9, "{g} vs {x}");
    }
}

#[test]
fn convolution_error_is_second_order_in_h() {
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let ideal = |q: ArrayView2<'_, f64>| -> Result<Array2<f64>> { Ok(q.mapv(|x| (3.0 * x).sin())) };
    let z = points(&dom, &[&[0.5]]);
    let quad = GridLayout::uniform(dom.clone(), 4000).unwrap();
    let errors: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&h| {
            let kernel = KernelSpec::gaussian(h, 1).unwrap();
            let f = nadaraya_velocity(&z, &kernel, &ideal, &quad).unwrap();
            (f.inputs()[[0, 0]] - 1.5f64.sin()).abs()
        })
        .collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 4.0).abs() < 0.2, "error ratio {ratio} ({errors:?})");
    }
}

#[test]
fn undersampled_quadrature_is_rejected() {
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let kernel = KernelSpec::gaussian(0.01, 1).unwrap();
    let coarse = GridLayout::uniform(dom.clone(), 20).unwrap();
    let z = points(&dom, &[&[0.5]]);
    assert!(matches!(
        nadaraya_velocity(&z, &kernel, &identity_field, &coarse),
        Err(dissflow_core::Error::UndersampledConvolution { .. })
    ));
}

#[test]
fn estimate_stays_in_convex_hull() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let z = ParticleEnsemble::uniform(dom.clone(), 50, 9).unwrap();
    let inputs = z.positions().mapv(|x| (7.0 * x).cos());
    let kernel = KernelSpec::epanechnikov(0.1, 2).unwrap();
    let field = NadarayaField::from_inputs(z.positions().clone(), inputs.clone(), kernel).unwrap();
    let q = ParticleEnsemble::uniform(dom, 500, 10).unwrap();
    let est = field.estimate_at(q.positions().view());
    for k in 0..2 {
        let col = inputs.column(k);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(est.column(k).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

#[test]
fn perturbation_bound_examples() {
    let k = KernelSpec::gaussian(0.2, 2).unwrap();
    assert_eq!(kde_perturbation_bound(0.0, &k), 0.0);
    let half = k.with_bandwidth(0.1).unwrap();
    let ratio = kde_perturbation_bound(1.5, &k) / kde_perturbation_bound(1.5, &half);
    assert!((ratio - 4.0).abs() < 1e-12);
    let expected = 2.0 * 1.5f64.powi(2) * (k.mu2() + k.mu1().powi(2)) * 0.04;
    assert!((kde_perturbation_bound(1.5, &k) - expected).abs() < 1e-15);
}

#[test]
fn measured_error_respects_bound_on_quadratic_potential() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let lip = 2.0;
    let ideal = |q: ArrayView2<'_, f64>| -> Result<Array2<f64>> { Ok(q.mapv(|x| lip * (x - 0.5))) };
    for n in [100, 1000] {
        let z = ParticleEnsemble::uniform(dom.clone(), n, n as u64).unwrap();
        let kernel = KernelSpec::gaussian(bandwidth_rule(n, 0.3, 2), 2).unwrap();
        let quad = GridLayout::uniform(dom.clone(), (4.0 / kernel.bandwidth).ceil() as usize).unwrap();
        let field = nadaraya_velocity(&z, &kernel, &ideal, &quad).unwrap();
        let err = nadaraya_error_particles(&field, &ideal).unwrap();
        let kde = kde_evaluate(&z, &kernel, &quad).unwrap();
        let err_kde = nadaraya_error_kde(&field, &ideal, &kde).unwrap();
        let bound = kde_perturbation_bound(lip, &kernel);
        assert!(err <= bound && err_kde <= bound, "N={n}: {err}, {err_kde} vs {bound}");
    }
}

#[test]
fn inputs_csv_has_one_row_per_agent() {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let z = ParticleEnsemble::uniform(dom, 4, 1).unwrap();
    let field = NadarayaField::from_inputs(
        z.positions().clone(),
        z.positions().clone(),
        KernelSpec::gaussian(0.1, 2).unwrap(),
    )
    .unwrap();
    let mut buf = Vec::new();
    field.write_inputs_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("i,g0,g1"));
    assert_eq!(text.lines().count(), 5);
}
