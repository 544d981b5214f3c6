//! Kernel density estimates and the kernel-regression velocity field.
//!
//! Kernels are isotropic, `K_h(x) = h^{-d} K(x/h)`. The moment coefficients
//! `μ₁ = ∫K(z)|z|dz` and `μ₂ = ∫K(z)|z|²dz` refer to the unit kernel, so the
//! scaled kernel has moments `hμ₁` and `h²μ₂`.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{BoxDomain, GridDensity, GridLayout, ParticleEnsemble};

/// Gaussian kernels are cut off at this many bandwidths.
const GAUSSIAN_CUTOFF: f64 = 8.0;

/// Nadaraya denominators below this fall back to the nearest site.
pub const NADARAYA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Gaussian,
    /// Radial `c(1 − |z|²)` on the unit ball.
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    pub dim: usize,
}

/// `Γ(k/2)` for a positive integer `k`.
fn gamma_half(k: usize) -> f64 {
    let (mut value, mut x) = if k.is_multiple_of(2) { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while 2.0 * x < k as f64 {
        value *= x;
        x += 1.0;
    }
    value
}

/// Volume of the unit ball in `R^d`.
fn unit_ball_volume(d: usize) -> f64 {
    PI.powf(d as f64 / 2.0) / gamma_half(d + 2)
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("kernel dimension must be positive".into()));
        }
        Ok(Self {
            family,
            bandwidth,
            dim,
        })
    }

    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth, dim)
    }

    pub fn epanechnikov(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Epanechnikov, bandwidth, dim)
    }

    pub fn with_bandwidth(self, bandwidth: f64) -> Result<Self> {
        Self::new(self.family, bandwidth, self.dim)
    }

    /// `∫K(z)|z|dz` of the unit kernel.
    pub fn mu1(&self) -> f64 {
        let d = self.dim as f64;
        match self.family {
            KernelFamily::Gaussian => 2f64.sqrt() * gamma_half(self.dim + 1) / gamma_half(self.dim),
            KernelFamily::Epanechnikov => d * (d + 2.0) / ((d + 1.0) * (d + 3.0)),
        }
    }

    /// `∫K(z)|z|²dz` of the unit kernel.
    pub fn mu2(&self) -> f64 {
        let d = self.dim as f64;
        match self.family {
            KernelFamily::Gaussian => d,
            KernelFamily::Epanechnikov => d / (d + 4.0),
        }
    }

    /// Distance beyond which the kernel is treated as zero.
    pub fn support_radius(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => GAUSSIAN_CUTOFF * self.bandwidth,
            KernelFamily::Epanechnikov => self.bandwidth,
        }
    }

    fn normalization(&self) -> f64 {
        let h_d = self.bandwidth.powi(self.dim as i32);
        match self.family {
            KernelFamily::Gaussian => 1.0 / ((2.0 * PI).powf(self.dim as f64 / 2.0) * h_d),
            KernelFamily::Epanechnikov => {
                (self.dim as f64 + 2.0) / (2.0 * unit_ball_volume(self.dim) * h_d)
            }
        }
    }

    /// `K_h(x)` as a function of `|x|²`.
    pub fn value(&self, r2: f64) -> f64 {
        let s = r2 / (self.bandwidth * self.bandwidth);
        match self.family {
            KernelFamily::Gaussian => self.normalization() * (-0.5 * s).exp(),
            KernelFamily::Epanechnikov if s < 1.0 => self.normalization() * (1.0 - s),
            KernelFamily::Epanechnikov => 0.0,
        }
    }

    /// `∇K_h(x) = −κ(|x|²) x`; returns `κ`.
    pub fn gradient_factor(&self, r2: f64) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => self.value(r2) / h2,
            KernelFamily::Epanechnikov if r2 < h2 => 2.0 * self.normalization() / h2,
            KernelFamily::Epanechnikov => 0.0,
        }
    }
}

/// `h = c N^{-1/(d+2)}`.
pub fn bandwidth_rule(n: usize, c: f64, d: usize) -> f64 {
    c * (n.max(1) as f64).powf(-1.0 / (d as f64 + 2.0))
}

/// `2L²(μ₂ + μ₁²)h²`.
pub fn kde_perturbation_bound(lipschitz: f64, kernel: &KernelSpec) -> f64 {
    2.0 * lipschitz * lipschitz * (kernel.mu2() + kernel.mu1().powi(2)) * kernel.bandwidth.powi(2)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Calls `visit(flat, center)` for every cell whose center lies in the
/// axis-aligned box of half-width `radius` around `x`.
fn for_cells_near(layout: &GridLayout, x: &[f64], radius: f64, mut visit: impl FnMut(usize, &[f64])) {
    let d = layout.dim();
    let mut lo = vec![0usize; d];
    let mut hi = vec![0usize; d];
    for k in 0..d {
        let s = layout.spacing(k);
        let base = layout.domain().lower()[k];
        let n = layout.resolution()[k] as f64;
        let a = ((x[k] - radius - base) / s - 0.5).ceil().max(0.0);
        let b = ((x[k] + radius - base) / s - 0.5).floor().min(n - 1.0);
        if b < a {
            return;
        }
        lo[k] = a as usize;
        hi[k] = b as usize;
    }
    let mut idx = lo.clone();
    let mut center: Vec<f64> = (0..d).map(|k| layout.axis_center(k, idx[k])).collect();
    loop {
        visit(layout.flat_index(&idx), &center);
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if idx[k] < hi[k] {
                idx[k] += 1;
                center[k] = layout.axis_center(k, idx[k]);
                break;
            }
            idx[k] = lo[k];
            center[k] = layout.axis_center(k, idx[k]);
        }
    }
}

/// `ρ^{h,N}` at the cell centers of `layout`, renormalized to unit mass on
/// the box.
pub fn kde_evaluate(z: &ParticleEnsemble, kernel: &KernelSpec, layout: &GridLayout) -> Result<GridDensity> {
    check_dim(kernel, z.dim())?;
    check_dim(kernel, layout.dim())?;
    let mut values = vec![0.0; layout.len()];
    let radius = kernel.support_radius();
    let w = 1.0 / z.len() as f64;
    for x in z.positions().outer_iter() {
        let x = x.to_vec();
        for_cells_near(layout, &x, radius, |cell, c| {
            values[cell] += w * kernel.value(sq_dist(&x, c));
        });
    }
    let total: f64 = values.iter().sum::<f64>() * layout.cell_volume();
    if !(total > 0.0) {
        return Err(Error::UndersampledConvolution {
            spacing: layout.max_spacing(),
            bandwidth: kernel.bandwidth,
        });
    }
    values.iter_mut().for_each(|v| *v /= total);
    GridDensity::from_values(layout.clone(), values)
}

fn check_dim(kernel: &KernelSpec, d: usize) -> Result<()> {
    if kernel.dim != d {
        return Err(Error::DimensionMismatch {
            expected: kernel.dim,
            got: d,
        });
    }
    Ok(())
}

/// Bucketed sites for radius queries.
#[derive(Debug, Clone)]
struct CellList {
    layout: GridLayout,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl CellList {
    fn new(sites: ArrayView2<'_, f64>, radius: f64) -> Result<Self> {
        let d = sites.ncols();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for p in sites.outer_iter() {
            for k in 0..d {
                lower[k] = lower[k].min(p[k]);
                upper[k] = upper[k].max(p[k]);
            }
        }
        let mut res = Vec::with_capacity(d);
        for k in 0..d {
            lower[k] -= 1e-9 * (1.0 + lower[k].abs());
            upper[k] += 1e-9 * (1.0 + upper[k].abs());
            let cells = ((upper[k] - lower[k]) / radius).floor().clamp(1.0, 256.0);
            res.push(cells as usize);
        }
        let layout = GridLayout::new(BoxDomain::new(lower, upper)?, res)?;
        let cell_of: Vec<usize> = sites
            .outer_iter()
            .map(|p| layout.locate(&p.to_vec()))
            .collect();
        let mut starts = vec![0usize; layout.len() + 1];
        for &c in &cell_of {
            starts[c + 1] += 1;
        }
        for c in 0..layout.len() {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut items = vec![0; cell_of.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(Self { layout, starts, items })
    }

    /// Sites in buckets overlapping the box of half-width `radius` around `x`.
    fn near(&self, x: &[f64], radius: f64, mut visit: impl FnMut(usize)) {
        let d = self.layout.dim();
        let mut lo = vec![0usize; d];
        let mut hi = vec![0usize; d];
        for k in 0..d {
            let s = self.layout.spacing(k);
            let base = self.layout.domain().lower()[k];
            let n = self.layout.resolution()[k] as f64;
            let a = ((x[k] - radius - base) / s).floor().max(0.0);
            let b = ((x[k] + radius - base) / s).floor().min(n - 1.0);
            if b < a {
                return;
            }
            lo[k] = a as usize;
            hi[k] = b as usize;
        }
        let mut idx = lo.clone();
        loop {
            let c = self.layout.flat_index(&idx);
            for &i in &self.items[self.starts[c]..self.starts[c + 1]] {
                visit(i);
            }
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if idx[k] < hi[k] {
                    idx[k] += 1;
                    break;
                }
                idx[k] = lo[k];
            }
        }
    }
}

fn nearest(sites: ArrayView2<'_, f64>, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, s) in sites.outer_iter().enumerate() {
        let d2 = x.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        if d2 < best.1 {
            best = (j, d2);
        }
    }
    best.0
}

/// Kernel-weighted averages of `values` (rows attached to `sites`) at each
/// query point; falls back to the nearest site where the weight vanishes.
fn kernel_regression(
    sites: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    cells: &CellList,
    kernel: &KernelSpec,
    queries: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = sites.nrows() as f64;
    let radius = kernel.support_radius();
    let m = values.ncols();
    let mut out = Array2::zeros((queries.nrows(), m));
    let mut num = vec![0.0; m];
    for (q, x) in queries.outer_iter().enumerate() {
        let x = x.to_vec();
        num.iter_mut().for_each(|v| *v = 0.0);
        let mut den = 0.0;
        cells.near(&x, radius, |j| {
            let s = sites.row(j);
            let r2 = x.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let k = kernel.value(r2);
            if k > 0.0 {
                den += k;
                for t in 0..m {
                    num[t] += k * values[[j, t]];
                }
            }
        });
        let mut row = out.row_mut(q);
        if den / n < NADARAYA_FLOOR {
            row.assign(&values.row(nearest(sites, &x)));
        } else {
            for t in 0..m {
                row[t] = num[t] / den;
            }
        }
    }
    out
}

/// `∇ log ρ^{h,N}` at each query point.
pub fn kde_score(z: &ParticleEnsemble, kernel: &KernelSpec, queries: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_dim(kernel, z.dim())?;
    let d = z.dim();
    let sites = z.positions().view();
    let radius = kernel.support_radius();
    let cells = CellList::new(sites, radius)?;
    let mut out = Array2::zeros((queries.nrows(), d));
    for (q, x) in queries.outer_iter().enumerate() {
        let x = x.to_vec();
        let mut den = 0.0;
        let mut grad = vec![0.0; d];
        cells.near(&x, radius, |j| {
            let s = sites.row(j);
            let r2 = x.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += kernel.value(r2);
            let kappa = kernel.gradient_factor(r2);
            for k in 0..d {
                grad[k] -= kappa * (x[k] - s[k]);
            }
        });
        if den > 0.0 {
            for k in 0..d {
                out[[q, k]] = grad[k] / den;
            }
        }
    }
    Ok(out)
}

/// `(F ∗ K_h)(x_i)` by midpoint quadrature on `quad`, normalized by the
/// quadrature mass of the truncated kernel. `field` maps a `cells × d`
/// matrix of cell centers to a `cells × m` matrix.
pub fn convolve_on_grid(
    field: &dyn Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    kernel: &KernelSpec,
    quad: &GridLayout,
    points: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_dim(kernel, quad.dim())?;
    if quad.max_spacing() > 0.5 * kernel.bandwidth {
        return Err(Error::UndersampledConvolution {
            spacing: quad.max_spacing(),
            bandwidth: kernel.bandwidth,
        });
    }
    let values = field(quad.centers().view())?;
    if values.nrows() != quad.len() {
        return Err(Error::SizeMismatch(values.nrows(), quad.len()));
    }
    let m = values.ncols();
    let radius = kernel.support_radius();
    let mut out = Array2::zeros((points.nrows(), m));
    for (i, x) in points.outer_iter().enumerate() {
        let x = x.to_vec();
        let mut mass = 0.0;
        let mut acc = vec![0.0; m];
        for_cells_near(quad, &x, radius, |cell, c| {
            let k = kernel.value(sq_dist(&x, c));
            mass += k;
            for t in 0..m {
                acc[t] += k * values[[cell, t]];
            }
        });
        if !(mass > 0.0) {
            return Err(Error::UndersampledConvolution {
                spacing: quad.max_spacing(),
                bandwidth: kernel.bandwidth,
            });
        }
        for t in 0..m {
            out[[i, t]] = acc[t] / mass;
        }
    }
    Ok(out)
}

/// Kernel-regression estimate of the ideal gradient field built from the
/// per-agent convolved gradients `g_i = (∇φ ∗ K_h)(x_i)`.
#[derive(Debug, Clone)]
pub struct NadarayaField {
    sites: Array2<f64>,
    inputs: Array2<f64>,
    kernel: KernelSpec,
    cells: CellList,
}

impl NadarayaField {
    /// Field built from precomputed per-agent gradients.
    pub fn from_inputs(sites: Array2<f64>, inputs: Array2<f64>, kernel: KernelSpec) -> Result<Self> {
        if sites.nrows() != inputs.nrows() {
            return Err(Error::SizeMismatch(sites.nrows(), inputs.nrows()));
        }
        if sites.nrows() == 0 {
            return Err(Error::EmptySet);
        }
        check_dim(&kernel, sites.ncols())?;
        let cells = CellList::new(sites.view(), kernel.support_radius())?;
        Ok(Self {
            sites,
            inputs,
            kernel,
            cells,
        })
    }

    /// Per-agent `g_i`.
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn sites(&self) -> &Array2<f64> {
        &self.sites
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// `Σ_j g_j K_h(x − x_j) / Σ_j K_h(x − x_j)` at each query point.
    pub fn estimate_at(&self, queries: ArrayView2<'_, f64>) -> Array2<f64> {
        kernel_regression(self.sites.view(), self.inputs.view(), &self.cells, &self.kernel, queries)
    }

    /// `i,g0,g1,...` rows.
    pub fn write_inputs_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.inputs.ncols()).map(|k| format!("g{k}")).collect();
        writeln!(out, "i,{}", header.join(","))?;
        for (i, row) in self.inputs.outer_iter().enumerate() {
            let cols: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{i},{}", cols.join(","))?;
        }
        Ok(())
    }
}

/// Builds the kernel-regression field of `ideal` for the agents `z`, with
/// the convolution done on the quadrature grid `quad` (spacing ≤ h/2).
pub fn nadaraya_velocity(
    z: &ParticleEnsemble,
    kernel: &KernelSpec,
    ideal: &dyn Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    quad: &GridLayout,
) -> Result<NadarayaField> {
    check_dim(kernel, z.dim())?;
    let inputs = convolve_on_grid(ideal, kernel, quad, z.positions().view())?;
    NadarayaField::from_inputs(z.positions().clone(), inputs, *kernel)
}

/// `‖ζ‖²_{L²(ρ^{h,N})}` with `ζ = estimate − ideal`, by quadrature over the
/// cells of `kde`.
pub fn nadaraya_error_kde(
    field: &NadarayaField,
    ideal: &dyn Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    kde: &GridDensity,
) -> Result<f64> {
    let centers = kde.layout().centers();
    let est = field.estimate_at(centers.view());
    let truth = ideal(centers.view())?;
    let vol = kde.layout().cell_volume();
    Ok(est
        .outer_iter()
        .zip(truth.outer_iter())
        .zip(kde.values())
        .map(|((e, t), rho)| rho * vol * e.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum())
}

/// `(1/N) Σ ‖estimate(x_i) − ideal(x_i)‖²` over the agents.
pub fn nadaraya_error_particles(
    field: &NadarayaField,
    ideal: &dyn Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
) -> Result<f64> {
    let est = field.estimate_at(field.sites.view());
    let truth = ideal(field.sites.view())?;
    let n = est.nrows() as f64;
    Ok((&est - &truth).mapv(|v| v * v).sum() / n)
}
