//! Plot-ready tables that contrast the `L²` and `W₂` geometries: equal
//! `L²` distances with ordered `W₂` distances for disjoint supports, the
//! saturation of `L²` under displacement, and linear versus displacement
//! interpolation of two Gaussians.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dissflow_core::kde::{kde_evaluate, KernelSpec};
use dissflow_core::transport::{displacement_interpolate, l2_density_distance, w2_quantile_1d};
use dissflow_core::{BoxDomain, GridDensity, GridLayout, ParticleEnsemble};
use ndarray::Array2;
use serde::Serialize;

use crate::artifacts::{Artifacts, Columns};
use crate::error::Result;
use crate::run::CheckOutcome;

/// Fixed parameters, echoed in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FigureParams {
    pub box_cells: usize,
    pub box_width_cells: usize,
    pub target_start: usize,
    pub first_start: usize,
    pub second_start: usize,
    pub gauss_cells: usize,
    pub gauss_means: [f64; 2],
    pub gauss_sigma: f64,
    pub quantile_points: usize,
    pub kde_bandwidth: f64,
    pub mode_floor: f64,
}

impl Default for FigureParams {
    fn default() -> Self {
        Self {
            box_cells: 100,
            box_width_cells: 10,
            target_start: 70,
            first_start: 10,
            second_start: 45,
            gauss_cells: 200,
            gauss_means: [0.25, 0.75],
            gauss_sigma: 0.06,
            quantile_points: 4000,
            kde_bandwidth: 0.015,
            mode_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSummary {
    /// `‖ρ_{t1} − ρ*‖, ‖ρ_{t2} − ρ*‖` in `L²`.
    pub l2: [f64; 2],
    /// The same pair in `W₂`.
    pub w2: [f64; 2],
    pub modes_linear: usize,
    pub modes_displacement: usize,
    /// Mean and standard deviation of the displacement midpoint.
    pub midpoint_moments: [f64; 2],
    pub endpoints_exact: bool,
    pub checks: Vec<CheckOutcome>,
}

impl FigureSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn unit_layout(cells: usize) -> GridLayout {
    GridLayout::uniform(BoxDomain::cube(1, 0.0, 1.0).expect("unit interval"), cells).expect("positive cells")
}

/// Indicator density of cells `[start, start + width)`.
fn box_density(layout: &GridLayout, start: usize, width: usize) -> GridDensity {
    let height = 1.0 / (width as f64 * layout.spacing(0));
    let values = (0..layout.len())
        .map(|k| if (start..start + width).contains(&k) { height } else { 0.0 })
        .collect();
    GridDensity::from_values(layout.clone(), values).expect("valid box")
}

/// Points at levels `(k + ½)/m` of the piecewise-linear CDF of a 1D grid density.
pub fn quantile_points(dens: &GridDensity, m: usize) -> Vec<f64> {
    let layout = dens.layout();
    let h = layout.spacing(0);
    let lo = layout.domain().lower()[0];
    let masses: Vec<f64> = dens.values().iter().map(|v| v * h).collect();
    let total: f64 = masses.iter().sum();
    let mut out = Vec::with_capacity(m);
    let (mut cell, mut below) = (0, 0.0);
    for k in 0..m {
        let q = (k as f64 + 0.5) / m as f64 * total;
        while cell + 1 < masses.len() && below + masses[cell] < q {
            below += masses[cell];
            cell += 1;
        }
        let frac = if masses[cell] > 0.0 { (q - below) / masses[cell] } else { 0.5 };
        out.push(lo + (cell as f64 + frac.clamp(0.0, 1.0)) * h);
    }
    out
}

fn w2_between(a: &GridDensity, b: &GridDensity, m: usize) -> Result<f64> {
    Ok(w2_quantile_1d(&quantile_points(a, m), &quantile_points(b, m))?)
}

/// Interior local maxima above `floor·max`.
pub fn count_modes(values: &[f64], floor: f64) -> usize {
    let top = values.iter().copied().fold(0.0, f64::max);
    let n = values.len();
    (0..n)
        .filter(|&i| {
            let left = if i == 0 { 0.0 } else { values[i - 1] };
            let right = if i + 1 == n { 0.0 } else { values[i + 1] };
            values[i] > floor * top && values[i] > left && values[i] >= right
        })
        .count()
}

fn ensemble(points: &[f64]) -> Result<ParticleEnsemble> {
    let pos = Array2::from_shape_vec((points.len(), 1), points.to_vec()).expect("column");
    Ok(ParticleEnsemble::new(BoxDomain::cube(1, 0.0, 1.0)?, pos)?)
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        line: format!("VERDICT {} check={name} {detail}", if passed { "PASS" } else { "FAIL" }),
    }
}

/// Writes the demo tables into `out` and checks their qualitative claims.
pub fn demo_figures(out: &Path) -> Result<FigureSummary> {
    let p = FigureParams::default();
    let mut art = Artifacts::create(out)?;

    let layout = unit_layout(p.box_cells);
    let target = box_density(&layout, p.target_start, p.box_width_cells);
    let first = box_density(&layout, p.first_start, p.box_width_cells);
    let second = box_density(&layout, p.second_start, p.box_width_cells);
    let m = p.quantile_points;
    let l2 = [l2_density_distance(&first, &target)?, l2_density_distance(&second, &target)?];
    let w2 = [w2_between(&first, &target, m)?, w2_between(&second, &target, m)?];
    let mut equal = String::from("density,L2_to_target,W2_to_target\n");
    for k in 0..2 {
        writeln!(equal, "{},{:.17e},{:.17e}", k + 1, l2[k], w2[k]).expect("string write");
    }
    art.write_csv("equal_l2.csv", Columns::Exact("density,L2_to_target,W2_to_target"), |w| {
        w.extend_from_slice(equal.as_bytes());
        Ok(())
    })?;

    let mut shift = String::from("shift,L2,W2\n");
    let base = box_density(&layout, p.first_start, p.box_width_cells);
    let h = layout.spacing(0);
    for k in 0..=12 {
        let moved = box_density(&layout, p.first_start + 5 * k, p.box_width_cells);
        writeln!(
            shift,
            "{:.17e},{:.17e},{:.17e}",
            5.0 * k as f64 * h,
            l2_density_distance(&moved, &base)?,
            w2_between(&moved, &base, m)?
        )
        .expect("string write");
    }
    art.write_csv("displacement_shift.csv", Columns::Exact("shift,L2,W2"), |w| {
        w.extend_from_slice(shift.as_bytes());
        Ok(())
    })?;

    let glayout = unit_layout(p.gauss_cells);
    let a = GridDensity::gaussian(glayout.clone(), &[p.gauss_means[0]], p.gauss_sigma)?;
    let b = GridDensity::gaussian(glayout.clone(), &[p.gauss_means[1]], p.gauss_sigma)?;
    let (qa, qb) = (ensemble(&quantile_points(&a, m))?, ensemble(&quantile_points(&b, m))?);
    let kernel = KernelSpec::gaussian(p.kde_bandwidth, 1)?;
    let mut interp = String::from("t,x,linear,displacement\n");
    let mut endpoints_exact = true;
    let (mut modes_linear, mut modes_displacement, mut moments) = (0, 0, [0.0; 2]);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let linear: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        let moved = displacement_interpolate(&qa, &qb, t)?;
        if t == 0.0 {
            endpoints_exact &= moved.positions() == qa.positions() && linear.as_slice() == a.values();
        }
        if t == 1.0 {
            endpoints_exact &= linear.as_slice() == b.values();
        }
        let smooth = kde_evaluate(&moved, &kernel, &glayout)?;
        for (k, (lin, disp)) in linear.iter().zip(smooth.values()).enumerate() {
            writeln!(interp, "{t},{:.10e},{lin:.17e},{disp:.17e}", glayout.axis_center(0, k)).expect("string write");
        }
        if t == 0.5 {
            modes_linear = count_modes(&linear, p.mode_floor);
            modes_displacement = count_modes(smooth.values(), p.mode_floor);
            let var = moved.variance()[0];
            moments = [moved.mean()[0], var.sqrt()];
        }
    }
    art.write_csv("interpolation.csv", Columns::Exact("t,x,linear,displacement"), |w| {
        w.extend_from_slice(interp.as_bytes());
        Ok(())
    })?;

    let checks = vec![
        outcome(
            "equal-l2",
            (l2[0] - l2[1]).abs() <= 1e-10,
            format!("l2_first={:.12e} l2_second={:.12e}", l2[0], l2[1]),
        ),
        outcome(
            "ordered-w2",
            w2[1] < w2[0],
            format!("w2_first={:.6e} w2_second={:.6e}", w2[0], w2[1]),
        ),
        outcome(
            "mode-count",
            modes_linear == 2 && modes_displacement == 1,
            format!("linear_modes={modes_linear} displacement_modes={modes_displacement}"),
        ),
        outcome("endpoints", endpoints_exact, format!("exact={endpoints_exact}")),
    ];
    let text: String = checks.iter().map(|c| format!("{}\n", c.line)).collect();
    art.write_bytes("demo_summary.txt", text.as_bytes())?;
    let mut extra = BTreeMap::new();
    for c in &checks {
        extra.insert(format!("check.{}", c.name), if c.passed { "PASS" } else { "FAIL" }.into());
    }
    extra.insert("midpoint_mean".into(), format!("{:.10e}", moments[0]));
    extra.insert("midpoint_sd".into(), format!("{:.10e}", moments[1]));
    art.finish("demo-figures", &p, extra)?;
    Ok(FigureSummary {
        l2,
        w2,
        modes_linear,
        modes_displacement,
        midpoint_moments: moments,
        endpoints_exact,
        checks,
    })
}
