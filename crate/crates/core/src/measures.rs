//! Probability measures on axis-aligned boxes.
//!
//! Three representations are used throughout the crate:
//!
//! * [`ParticleEnsemble`]: the empirical measure `(1/N) Σ δ_{x_i}` of `N` agents;
//! * [`GridDensity`]: a piecewise-constant density on a regular grid, with
//!   midpoint quadrature for every integral;
//! * [`TargetSet`]: what a flow is steered towards (a point set `M`, a density,
//!   an ensemble, or a finite union of those).

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance on `|∫ρ − 1|` accepted as "normalized".
pub const NORMALIZATION_TOL: f64 = 1e-10;

/// Compact box `Π [lower_k, upper_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidDomain("dimension must be at least 1".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi - lo > 0.0) {
                return Err(Error::InvalidDomain(format!(
                    "axis {k}: [{lo}, {hi}] is empty or unbounded"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.side(k)).product()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim())
            .map(|k| self.side(k).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Specular reflection at the faces; points further than one side length
    /// outside are folded repeatedly.
    pub fn reflect(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            let width = hi - lo;
            if *v >= lo && *v <= hi {
                continue;
            }
            // Unfold onto a period of length 2·width.
            let mut r = (*v - lo).rem_euclid(2.0 * width);
            if r > width {
                r = 2.0 * width - r;
            }
            *v = (lo + r).clamp(lo, hi);
        }
    }

    /// Box scaled about its center by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        let (lower, upper) = (0..self.dim())
            .map(|k| {
                let mid = 0.5 * (self.lower[k] + self.upper[k]);
                let half = 0.5 * self.side(k) * factor;
                (mid - half, mid + half)
            })
            .unzip();
        Self { lower, upper }
    }
}

/// Empirical measure with uniform weights `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    domain: BoxDomain,
    positions: Array2<f64>,
}

impl ParticleEnsemble {
    pub fn new(domain: BoxDomain, positions: Array2<f64>) -> Result<Self> {
        if positions.ncols() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: positions.ncols(),
            });
        }
        if positions.nrows() == 0 {
            return Err(Error::EmptySet);
        }
        for (index, row) in positions.outer_iter().enumerate() {
            let ok = row.iter().all(|v| v.is_finite())
                && row
                    .iter()
                    .enumerate()
                    .all(|(k, v)| *v >= domain.lower[k] && *v <= domain.upper[k]);
            if !ok {
                return Err(Error::OutsideDomain { index });
            }
        }
        Ok(Self { domain, positions })
    }

    /// Builds an ensemble from points that may sit slightly outside the box,
    /// reflecting them back in.
    pub fn reflected(domain: BoxDomain, mut positions: Array2<f64>) -> Result<Self> {
        for mut row in positions.outer_iter_mut() {
            if let Some(slice) = row.as_slice_mut() {
                domain.reflect(slice);
            }
        }
        Self::new(domain, positions)
    }

    /// `n` i.i.d. uniform draws in the box.
    pub fn uniform(domain: BoxDomain, n: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::substream(seed, "uniform_ensemble");
        let d = domain.dim();
        let positions = Array2::from_shape_fn((n, d), |(_, k)| {
            domain.lower[k] + domain.side(k) * rng.random::<f64>()
        });
        Self::new(domain, positions)
    }

    /// All particles at one point.
    pub fn concentrated(domain: BoxDomain, point: &[f64], n: usize) -> Result<Self> {
        let positions = Array2::from_shape_fn((n, point.len()), |(_, k)| point[k]);
        Self::new(domain, positions)
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub(crate) fn positions_mut(&mut self) -> &mut Array2<f64> {
        &mut self.positions
    }

    pub fn into_positions(self) -> Array2<f64> {
        self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.positions.row(i)
    }

    pub fn mean(&self) -> Vec<f64> {
        self.positions
            .mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_default()
    }

    /// Per-axis variance `(1/N) Σ (x_k − m_k)²`.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.len() as f64;
        (0..self.dim())
            .map(|k| {
                self.positions
                    .column(k)
                    .iter()
                    .map(|v| (v - mean[k]).powi(2))
                    .sum::<f64>()
                    / n
            })
            .collect()
    }

    /// One row per particle, header `x0,x1,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.positions.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(domain: BoxDomain, input: R) -> Result<Self> {
        let mut rows: Vec<f64> = Vec::new();
        let mut n = 0;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let values: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let values = values.map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if values.len() != domain.dim() {
                return Err(Error::DimensionMismatch {
                    expected: domain.dim(),
                    got: values.len(),
                });
            }
            rows.extend(values);
            n += 1;
        }
        let positions = Array2::from_shape_vec((n, domain.dim()), rows)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(domain, positions)
    }
}

/// Regular grid on a box; flat indices are row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    domain: BoxDomain,
    resolution: Vec<usize>,
}

impl GridLayout {
    pub fn new(domain: BoxDomain, resolution: Vec<usize>) -> Result<Self> {
        if resolution.len() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: resolution.len(),
            });
        }
        if resolution.contains(&0) {
            return Err(Error::InvalidArgument("grid resolution must be positive".into()));
        }
        Ok(Self { domain, resolution })
    }

    /// Same number of cells along every axis.
    pub fn uniform(domain: BoxDomain, cells_per_axis: usize) -> Result<Self> {
        let d = domain.dim();
        Self::new(domain, vec![cells_per_axis; d])
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.domain.side(axis) / self.resolution[axis] as f64
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.dim())
            .map(|k| self.spacing(k))
            .fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    /// Cell-center coordinate along one axis.
    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.domain.lower[axis] + (i as f64 + 0.5) * self.spacing(axis)
    }

    pub fn axis_centers(&self, axis: usize) -> Vec<f64> {
        (0..self.resolution[axis])
            .map(|i| self.axis_center(axis, i))
            .collect()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.resolution[k];
            flat /= self.resolution[k];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.resolution)
            .fold(0, |acc, (i, r)| acc * r + i)
    }

    /// Stride of `axis` in the flat layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.resolution[axis + 1..].iter().product()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.axis_center(k, i))
            .collect()
    }

    /// All cell centers as a `cells × d` matrix.
    pub fn centers(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.len(), d));
        for (flat, mut row) in out.outer_iter_mut().enumerate() {
            for (k, i) in self.multi_index(flat).into_iter().enumerate() {
                row[k] = self.axis_center(k, i);
            }
        }
        out
    }

    /// Cell containing `x` (clamped to the box).
    pub fn locate(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.dim())
            .map(|k| {
                let t = (x[k] - self.domain.lower[k]) / self.spacing(k);
                (t.floor().max(0.0) as usize).min(self.resolution[k] - 1)
            })
            .collect();
        self.flat_index(&idx)
    }
}

/// Piecewise-constant density (cell averages) on a [`GridLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    layout: GridLayout,
    values: Vec<f64>,
}

impl GridDensity {
    /// Wraps raw values; they are checked for sign but not normalized.
    pub fn from_values(layout: GridLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::SizeMismatch(layout.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "density values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { layout, values })
    }

    /// Samples `f` at cell centers and normalizes.
    pub fn from_fn(layout: GridLayout, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..layout.len()).map(|c| f(&layout.center(c))).collect();
        Self::from_values(layout, values)?.normalized()
    }

    pub fn uniform(layout: GridLayout) -> Self {
        let v = 1.0 / layout.domain().volume();
        let n = layout.len();
        Self {
            layout,
            values: vec![v; n],
        }
    }

    /// Isotropic Gaussian `N(mean, σ² I)` restricted to the box and renormalized.
    pub fn gaussian(layout: GridLayout, mean: &[f64], sigma: f64) -> Result<Self> {
        let mean = mean.to_vec();
        Self::from_fn(layout, move |x| {
            let r2: f64 = x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
            (-0.5 * r2 / (sigma * sigma)).exp()
        })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn domain(&self) -> &BoxDomain {
        self.layout.domain()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.layout.cell_volume()
    }

    pub fn is_normalized(&self) -> bool {
        (self.integral() - 1.0).abs() <= NORMALIZATION_TOL
    }

    pub fn normalized(mut self) -> Result<Self> {
        let integral = self.integral();
        if !(integral > 0.0 && integral.is_finite()) {
            return Err(Error::NotNormalized { integral });
        }
        self.values.iter_mut().for_each(|v| *v /= integral);
        Ok(self)
    }

    /// Cell masses `ρ_c · |cell|`.
    pub fn masses(&self) -> Vec<f64> {
        let vol = self.layout.cell_volume();
        self.values.iter().map(|v| v * vol).collect()
    }

    /// Adds `floor · uniform` and renormalizes.
    pub fn with_floor(&self, floor: f64) -> Result<Self> {
        let u = floor / self.layout.domain().volume();
        let values = self.values.iter().map(|v| v + u).collect();
        Self::from_values(self.layout.clone(), values)?.normalized()
    }

    pub fn mean(&self) -> Vec<f64> {
        let vol = self.layout.cell_volume();
        let mut m = vec![0.0; self.layout.dim()];
        for (c, v) in self.values.iter().enumerate() {
            for (k, x) in self.layout.center(c).into_iter().enumerate() {
                m[k] += x * v * vol;
            }
        }
        m
    }

    /// `∫ |x − mean|² dρ` by midpoint quadrature.
    pub fn total_variance(&self) -> f64 {
        let m = self.mean();
        let vol = self.layout.cell_volume();
        self.values
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let x = self.layout.center(c);
                let r2: f64 = x.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum();
                r2 * v * vol
            })
            .sum()
    }

    /// Plain-text format: a header with dim, resolution and bounds, then the
    /// values in row-major order, one line per last-axis run.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.17e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(out, "# grid-density")?;
        writeln!(out, "dim {}", self.layout.dim())?;
        let res: Vec<String> = self.layout.resolution.iter().map(|r| r.to_string()).collect();
        writeln!(out, "resolution {}", res.join(" "))?;
        writeln!(out, "lower {}", join(self.domain().lower()))?;
        writeln!(out, "upper {}", join(self.domain().upper()))?;
        writeln!(out, "values")?;
        let run = *self.layout.resolution.last().unwrap_or(&1);
        for chunk in self.values.chunks(run) {
            writeln!(out, "{}", join(chunk))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut dim = None;
        let mut resolution: Option<Vec<usize>> = None;
        let mut lower: Option<Vec<f64>> = None;
        let mut upper: Option<Vec<f64>> = None;
        let mut values = Vec::new();
        let mut in_values = false;
        let floats = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect()
        };
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if in_values {
                values.extend(floats(line)?);
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "dim" => {
                    dim = Some(rest.trim().parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?)
                }
                "resolution" => {
                    resolution = Some(
                        rest.split_whitespace()
                            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
                            .collect::<Result<_>>()?,
                    )
                }
                "lower" => lower = Some(floats(rest)?),
                "upper" => upper = Some(floats(rest)?),
                "values" => in_values = true,
                other => return Err(Error::Parse(format!("unknown header key `{other}`"))),
            }
        }
        let missing = |what: &str| Error::Parse(format!("missing `{what}` header"));
        let domain = BoxDomain::new(lower.ok_or_else(|| missing("lower"))?, upper.ok_or_else(|| missing("upper"))?)?;
        let layout = GridLayout::new(domain, resolution.ok_or_else(|| missing("resolution"))?)?;
        if let Some(d) = dim {
            if d != layout.dim() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: layout.dim(),
                });
            }
        }
        Self::from_values(layout, values)
    }
}

/// Finite, nonempty set of points `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Array2<f64>,
}

impl PointSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptySet);
        }
        Ok(Self { points })
    }

    pub fn single(point: &[f64]) -> Self {
        Self {
            points: Array2::from_shape_vec((1, point.len()), point.to_vec())
                .expect("shape matches length"),
        }
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn dist(&self, x: &[f64]) -> f64 {
        nearest_sq(x, self.points.view()).1.sqrt()
    }

    /// Nearest point of `M` to `x`.
    pub fn project(&self, x: &[f64]) -> ArrayView1<'_, f64> {
        self.points.row(nearest_sq(x, self.points.view()).0)
    }
}

/// What a flow is steered towards.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    /// Measures supported on a finite set `M`.
    Points(PointSet),
    Density(GridDensity),
    Ensemble(ParticleEnsemble),
    /// Finite union of targets; distances take the minimum over members.
    Union(Vec<TargetSet>),
}

fn nearest_sq(x: &[f64], set: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, y) in set.outer_iter().enumerate() {
        let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        if d2 < best.1 {
            best = (j, d2);
        }
    }
    best
}

/// Euclidean distance from `x` to the nearest point of `set`.
pub fn dist_to_set(x: &[f64], set: ArrayView2<'_, f64>) -> Result<f64> {
    if set.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if set.ncols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: set.ncols(),
            got: x.len(),
        });
    }
    Ok(nearest_sq(x, set).1.sqrt())
}

/// `(1/N) Σ dist²(x_i, M)`, which equals `W₂²(ρ, 𝒫_M)`.
pub fn second_moment_about_set(rho: &ParticleEnsemble, set: &PointSet) -> Result<f64> {
    if set.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            got: set.dim(),
        });
    }
    let total: f64 = rho
        .positions()
        .outer_iter()
        .map(|x| nearest_sq(x.as_slice().expect("contiguous rows"), set.points.view()).1)
        .sum();
    Ok(total / rho.len() as f64)
}

/// Per-particle `dist(x_i, M)`.
pub fn distances_to_set(rho: &ParticleEnsemble, set: &PointSet) -> Vec<f64> {
    rho.positions()
        .outer_iter()
        .map(|x| set.dist(x.as_slice().expect("contiguous rows")))
        .collect()
}

fn check_normalized(target: &GridDensity) -> Result<()> {
    if !target.is_normalized() {
        return Err(Error::NotNormalized {
            integral: target.integral(),
        });
    }
    Ok(())
}

fn cumulative_masses(target: &GridDensity) -> Vec<f64> {
    let mut acc = 0.0;
    target
        .masses()
        .into_iter()
        .map(|m| {
            acc += m;
            acc
        })
        .collect()
}

fn jitter_in_cell(layout: &GridLayout, cell: usize, rng: &mut impl Rng, out: &mut [f64]) {
    for (k, i) in layout.multi_index(cell).into_iter().enumerate() {
        let lo = layout.domain().lower()[k] + i as f64 * layout.spacing(k);
        out[k] = lo + layout.spacing(k) * rng.random::<f64>();
    }
}

fn draw_cells(
    target: &GridDensity,
    uniforms: impl Iterator<Item = f64>,
    seed: u64,
    n: usize,
) -> Result<ParticleEnsemble> {
    let layout = target.layout();
    let cdf = cumulative_masses(target);
    let total = *cdf.last().unwrap_or(&0.0);
    let mut jitter = rng::substream(seed, "sample_density/jitter");
    let d = layout.dim();
    let mut positions = Array2::zeros((n, d));
    for (mut row, u) in positions.outer_iter_mut().zip(uniforms) {
        let level = u * total;
        let cell = cdf.partition_point(|&c| c <= level).min(cdf.len() - 1);
        let row = row.as_slice_mut().expect("contiguous rows");
        jitter_in_cell(layout, cell, &mut jitter, row);
    }
    ParticleEnsemble::new(layout.domain().clone(), positions)
}

/// `n` i.i.d. draws: a cell by its mass, then a uniform point inside it.
pub fn sample_density(target: &GridDensity, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    check_normalized(target)?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let mut pick = rng::substream(seed, "sample_density/cells");
    let uniforms: Vec<f64> = (0..n).map(|_| pick.random::<f64>()).collect();
    draw_cells(target, uniforms.into_iter(), seed, n)
}

/// Stratified variant: draw `k` uses the level `(k + U_k)/n` of the cell CDF,
/// which removes most of the Monte-Carlo noise in low-order moments.
pub fn sample_density_stratified(
    target: &GridDensity,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    check_normalized(target)?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let mut pick = rng::substream(seed, "sample_density/strata");
    let uniforms: Vec<f64> = (0..n)
        .map(|k| (k as f64 + pick.random::<f64>()) / n as f64)
        .collect();
    draw_cells(target, uniforms.into_iter(), seed, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(d: usize) -> BoxDomain {
        BoxDomain::cube(d, 0.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_degenerate_box() {
        assert!(BoxDomain::new(vec![0.0], vec![0.0]).is_err());
        assert!(BoxDomain::new(vec![], vec![]).is_err());
        assert!(BoxDomain::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn reflection_stays_inside() {
        let b = unit(2);
        let mut x = [1.25, -0.1];
        b.reflect(&mut x);
        assert!((x[0] - 0.75).abs() < 1e-12 && (x[1] - 0.1).abs() < 1e-12);
        let mut far = [5.3, -3.6];
        b.reflect(&mut far);
        assert!(b.contains(&far));
    }

    #[test]
    fn single_cell_sampling_stays_in_support() {
        let layout = GridLayout::uniform(unit(1), 1).unwrap();
        let g = GridDensity::uniform(layout);
        let e = sample_density(&g, 4, 1).unwrap();
        assert_eq!(e.len(), 4);
        assert!(e.positions().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_mass_cell_is_never_sampled() {
        let layout = GridLayout::uniform(unit(1), 2).unwrap();
        let g = GridDensity::from_values(layout, vec![2.0, 0.0]).unwrap();
        let e = sample_density(&g, 1000, 3).unwrap();
        assert!(e.positions().iter().all(|v| *v <= 0.5));
        let s = sample_density_stratified(&g, 1000, 3).unwrap();
        assert!(s.positions().iter().all(|v| *v <= 0.5));
    }

    #[test]
    fn unnormalized_target_is_rejected() {
        let layout = GridLayout::uniform(unit(1), 2).unwrap();
        let g = GridDensity::from_values(layout, vec![1.0, 1.0 + 1e-6]).unwrap();
        assert!(matches!(sample_density(&g, 5, 0), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn gaussian_sample_mean_matches_grid_mean() {
        let domain = BoxDomain::cube(1, -5.0, 5.0).unwrap();
        let layout = GridLayout::uniform(domain, 400).unwrap();
        let g = GridDensity::gaussian(layout, &[0.7], 1.0).unwrap();
        // Grid first moment and spread by direct summation.
        let grid_mean = g.mean()[0];
        let grid_sd = g.total_variance().sqrt();
        let n = 100_000;
        let e = sample_density(&g, n, 11).unwrap();
        let sample_mean = e.mean()[0];
        assert!((sample_mean - grid_mean).abs() < 3.0 * grid_sd / (n as f64).sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let layout = GridLayout::uniform(unit(2), 8).unwrap();
        let g = GridDensity::gaussian(layout, &[0.5, 0.5], 0.2).unwrap();
        assert_eq!(sample_density(&g, 50, 9).unwrap(), sample_density(&g, 50, 9).unwrap());
        assert_ne!(sample_density(&g, 50, 9).unwrap(), sample_density(&g, 50, 10).unwrap());
    }

    #[test]
    fn distance_to_set_examples() {
        assert_eq!(dist_to_set(&[0.0, 0.0], array![[0.0, 0.0]].view()).unwrap(), 0.0);
        assert_eq!(dist_to_set(&[3.0], array![[0.0], [1.0]].view()).unwrap(), 2.0);
        let m = array![[0.0, 0.0], [2.0, 0.0]];
        let brute = m
            .outer_iter()
            .map(|y| ((1.0f64 - y[0]).powi(2) + (1.0f64 - y[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!((dist_to_set(&[1.0, 1.0], m.view()).unwrap() - brute).abs() < 1e-15);
        assert!(matches!(
            dist_to_set(&[1.0], Array2::<f64>::zeros((0, 1)).view()),
            Err(Error::EmptySet)
        ));
        assert!(PointSet::new(Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn second_moment_examples() {
        let domain = BoxDomain::cube(1, -3.0, 3.0).unwrap();
        let dirac = ParticleEnsemble::concentrated(domain.clone(), &[2.0], 1).unwrap();
        let origin = PointSet::single(&[0.0]);
        assert_eq!(second_moment_about_set(&dirac, &origin).unwrap(), 4.0);
        let on_set = ParticleEnsemble::concentrated(domain, &[0.0], 10).unwrap();
        assert_eq!(second_moment_about_set(&on_set, &origin).unwrap(), 0.0);
        let uni = ParticleEnsemble::uniform(unit(1), 100_000, 5).unwrap();
        let m2 = second_moment_about_set(&uni, &origin).unwrap();
        assert!((m2 - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn grid_density_text_round_trip() {
        let layout = GridLayout::new(BoxDomain::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap(), vec![3, 4]).unwrap();
        let g = GridDensity::gaussian(layout, &[1.0, 0.0], 0.5).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = GridDensity::read_from(buf.as_slice()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn ensemble_csv_round_trip() {
        let e = ParticleEnsemble::uniform(unit(2), 7, 2).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let back = ParticleEnsemble::read_csv(unit(2), buf.as_slice()).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn layout_indexing_is_consistent() {
        let layout = GridLayout::new(unit(3), vec![2, 3, 4]).unwrap();
        for flat in 0..layout.len() {
            let idx = layout.multi_index(flat);
            assert_eq!(layout.flat_index(&idx), flat);
            assert_eq!(layout.locate(&layout.center(flat)), flat);
        }
        assert_eq!(layout.stride(0), 12);
        assert_eq!(layout.stride(2), 1);
    }
}
