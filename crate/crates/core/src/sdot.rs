//! Semi-discrete optimal transport between `N` equal-mass sites and a grid
//! density: Laguerre cells, centroids, the site flow toward centroids, and
//! the quantization floor.
//!
//! In one dimension the cells are the intervals between consecutive
//! `1/N`-quantiles and everything is integrated exactly on the
//! piecewise-constant density. For `d ≥ 2` cells are unions of grid cells
//! (membership by power distance) and the weights are found by damped
//! ascent on the dual.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{sample_density, GridDensity, ParticleEnsemble};
use crate::monitor::ls_slope;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaguerreConfig {
    /// Allowed `|mass_i − 1/N|`.
    pub mass_tol: f64,
    pub max_iter: usize,
    pub solver: LaguerreSolver,
}

/// Weight update for `d ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaguerreSolver {
    /// `w_i += η(1/N − m_i)`, `η = 0.5/max ρ*`, halved on oscillation.
    Ascent,
    /// Newton steps on the mass map with backtracking; falls back to an
    /// ascent step when no damped step reduces the defect.
    Newton,
}

impl Default for LaguerreConfig {
    fn default() -> Self {
        Self {
            mass_tol: 1e-4,
            max_iter: 20_000,
            solver: LaguerreSolver::Newton,
        }
    }
}

/// Power diagram with equal target masses.
#[derive(Debug, Clone, PartialEq)]
pub struct LaguerreDiagram {
    pub sites: Array2<f64>,
    pub weights: Vec<f64>,
    pub masses: Vec<f64>,
    pub centroids: Array2<f64>,
    /// `∫_{W_i} |c_i − x|² dρ*`.
    pub variances: Vec<f64>,
    /// `∫_{W_i} |x_i − x|² dρ*`, integrated directly.
    pub cell_energies: Vec<f64>,
    pub iterations: usize,
    pub max_defect: f64,
}

impl LaguerreDiagram {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `site,weight,mass,centroid_0..,variance`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.centroids.ncols();
        let cols: Vec<String> = (0..d).map(|k| format!("centroid_{k}")).collect();
        writeln!(out, "site,weight,mass,{},variance", cols.join(","))?;
        for i in 0..self.len() {
            let c: Vec<String> = self.centroids.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(
                out,
                "{i},{:.17e},{:.17e},{},{:.17e}",
                self.weights[i],
                self.masses[i],
                c.join(","),
                self.variances[i]
            )?;
        }
        Ok(())
    }
}

fn check_sites(sites: ArrayView2<'_, f64>, target: &GridDensity) -> Result<()> {
    if sites.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if sites.ncols() != target.layout().dim() {
        return Err(Error::DimensionMismatch {
            expected: target.layout().dim(),
            got: sites.ncols(),
        });
    }
    if !target.is_normalized() {
        return Err(Error::NotNormalized {
            integral: target.integral(),
        });
    }
    let mut order: Vec<usize> = (0..sites.nrows()).collect();
    order.sort_by(|&a, &b| {
        sites
            .row(a)
            .iter()
            .zip(sites.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for w in order.windows(2) {
        if sites.row(w[0]) == sites.row(w[1]) {
            return Err(Error::CoincidentSites(w[0].min(w[1]), w[0].max(w[1])));
        }
    }
    Ok(())
}

/// Solves for weights such that every cell carries mass `1/N`.
pub fn solve_laguerre(
    sites: ArrayView2<'_, f64>,
    target: &GridDensity,
    cfg: &LaguerreConfig,
    warm_weights: Option<&[f64]>,
) -> Result<LaguerreDiagram> {
    check_sites(sites, target)?;
    if target.layout().dim() == 1 {
        Ok(solve_1d(sites, target))
    } else {
        solve_grid(sites, target, cfg, warm_weights)
    }
}

/// Cell-edge positions and cumulative masses of a 1D grid density.
struct Cdf1d {
    edges: Vec<f64>,
    cum: Vec<f64>,
    dens: Vec<f64>,
}

impl Cdf1d {
    fn new(target: &GridDensity) -> Self {
        let layout = target.layout();
        let n = layout.len();
        let lo = layout.domain().lower()[0];
        let h = layout.spacing(0);
        let edges: Vec<f64> = (0..=n).map(|k| lo + k as f64 * h).collect();
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for (k, v) in target.values().iter().enumerate() {
            cum.push(cum[k] + v * h);
        }
        let total = cum[n];
        cum.iter_mut().for_each(|c| *c /= total);
        let dens = target.values().iter().map(|v| v / total).collect();
        Self { edges, cum, dens }
    }

    fn quantile(&self, q: f64) -> f64 {
        let n = self.dens.len();
        if q <= 0.0 {
            return self.edges[0];
        }
        if q >= 1.0 {
            return self.edges[n];
        }
        let k = (self.cum.partition_point(|&c| c <= q) - 1).min(n - 1);
        let mut k = k;
        while self.dens[k] == 0.0 && k + 1 < n {
            k += 1;
        }
        (self.edges[k] + (q - self.cum[k]) / self.dens[k]).clamp(self.edges[k], self.edges[k + 1])
    }

    /// Visits the constant pieces `(a, b, density)` covering `[lo, hi]`.
    fn pieces(&self, lo: f64, hi: f64, mut visit: impl FnMut(f64, f64, f64)) {
        let n = self.dens.len();
        let h = self.edges[1] - self.edges[0];
        let first = (((lo - self.edges[0]) / h).floor().max(0.0) as usize).min(n - 1);
        for k in first..n {
            let (a, b) = (self.edges[k].max(lo), self.edges[k + 1].min(hi));
            if self.edges[k] >= hi {
                break;
            }
            if b > a && self.dens[k] > 0.0 {
                visit(a, b, self.dens[k]);
            }
        }
    }
}

fn solve_1d(sites: ArrayView2<'_, f64>, target: &GridDensity) -> LaguerreDiagram {
    let n = sites.nrows();
    let cdf = Cdf1d::new(target);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sites[[a, 0]].total_cmp(&sites[[b, 0]]));
    let bounds: Vec<f64> = (0..=n).map(|k| cdf.quantile(k as f64 / n as f64)).collect();

    let mut weights = vec![0.0; n];
    let mut masses = vec![0.0; n];
    let mut centroids = Array2::zeros((n, 1));
    let mut variances = vec![0.0; n];
    let mut cell_energies = vec![0.0; n];
    let mut w = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 {
            let prev = sites[[order[rank - 1], 0]];
            let b = bounds[rank];
            w += (b - sites[[i, 0]]).powi(2) - (b - prev).powi(2);
        }
        weights[i] = w;
        let (lo, hi) = (bounds[rank], bounds[rank + 1]);
        let (mut m, mut m1) = (0.0, 0.0);
        cdf.pieces(lo, hi, |a, b, r| {
            m += r * (b - a);
            m1 += r * 0.5 * (b * b - a * a);
        });
        let c = if m > 0.0 { m1 / m } else { 0.5 * (lo + hi) };
        let x = sites[[i, 0]];
        let (mut var, mut energy) = (0.0, 0.0);
        cdf.pieces(lo, hi, |a, b, r| {
            var += r * ((b - c).powi(3) - (a - c).powi(3)) / 3.0;
            energy += r * ((b - x).powi(3) - (a - x).powi(3)) / 3.0;
        });
        masses[i] = m;
        centroids[[i, 0]] = c;
        variances[i] = var;
        cell_energies[i] = energy;
    }
    let max_defect = masses.iter().map(|m| (m - 1.0 / n as f64).abs()).fold(0.0, f64::max);
    LaguerreDiagram {
        sites: sites.to_owned(),
        weights,
        masses,
        centroids,
        variances,
        cell_energies,
        iterations: 0,
        max_defect,
    }
}

/// Buckets of sites for power-distance queries.
struct SiteBuckets {
    lower: Vec<f64>,
    side: Vec<f64>,
    res: Vec<usize>,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl SiteBuckets {
    fn new(sites: ArrayView2<'_, f64>, domain_lower: &[f64], domain_upper: &[f64]) -> Self {
        let (n, d) = sites.dim();
        let per_axis = ((n as f64).powf(1.0 / d as f64).ceil() as usize).max(1);
        let res = vec![per_axis; d];
        let side: Vec<f64> = (0..d).map(|k| (domain_upper[k] - domain_lower[k]) / per_axis as f64).collect();
        let total: usize = res.iter().product();
        let bucket_of = |x: ArrayView1<'_, f64>| -> usize {
            let mut flat = 0;
            for k in 0..d {
                let i = (((x[k] - domain_lower[k]) / side[k]).floor().max(0.0) as usize).min(res[k] - 1);
                flat = flat * res[k] + i;
            }
            flat
        };
        let keys: Vec<usize> = sites.outer_iter().map(bucket_of).collect();
        let mut start = vec![0usize; total + 1];
        for &b in &keys {
            start[b + 1] += 1;
        }
        for b in 0..total {
            start[b + 1] += start[b];
        }
        let mut fill = start.clone();
        let mut items = vec![0usize; n];
        for (i, &b) in keys.iter().enumerate() {
            items[fill[b]] = i;
            fill[b] += 1;
        }
        Self {
            lower: domain_lower.to_vec(),
            side,
            res,
            start,
            items,
        }
    }

    /// The two smallest `|x − x_i|² − w_i` as `(index, power)`, assuming
    /// every `w_i ≤ 0`. The second entry is `usize::MAX` for a single site.
    fn two_nearest(&self, x: &[f64], sites: &[f64], weights: &[f64]) -> [(usize, f64); 2] {
        let d = self.res.len();
        let home: Vec<isize> = (0..d)
            .map(|k| (((x[k] - self.lower[k]) / self.side[k]).floor() as isize).clamp(0, self.res[k] as isize - 1))
            .collect();
        let min_side = self.side.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ring = *self.res.iter().max().expect("nonempty") as isize;
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = (usize::MAX, f64::INFINITY);
        let mut idx = vec![0isize; d];
        for ring in 0..=max_ring {
            // Every bucket at Chebyshev distance `ring` from home.
            let span = 2 * ring + 1;
            let count = (span as usize).pow(d as u32);
            for code in 0..count {
                let mut c = code;
                let mut cheb = 0;
                let mut inside = true;
                for k in (0..d).rev() {
                    let off = (c % span as usize) as isize - ring;
                    c /= span as usize;
                    idx[k] = home[k] + off;
                    cheb = cheb.max(off.abs());
                    if idx[k] < 0 || idx[k] >= self.res[k] as isize {
                        inside = false;
                    }
                }
                if cheb != ring || !inside {
                    continue;
                }
                let mut flat = 0usize;
                for k in 0..d {
                    flat = flat * self.res[k] + idx[k] as usize;
                }
                for &i in &self.items[self.start[flat]..self.start[flat + 1]] {
                    let y = &sites[i * d..(i + 1) * d];
                    let p: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() - weights[i];
                    if p < best.1 || (p == best.1 && i < best.0) {
                        second = best;
                        best = (i, p);
                    } else if p < second.1 {
                        second = (i, p);
                    }
                }
            }
            let reach = ring as f64 * min_side;
            if reach * reach >= second.1 {
                break;
            }
        }
        [best, second]
    }
}

/// Grid cell shared between its power-nearest site and the runner-up.
#[derive(Debug, Clone, Copy, Default)]
struct Share {
    owner: usize,
    other: usize,
    /// Part of the cell on the runner-up's side of the bisector.
    fraction: f64,
    /// `∂fraction/∂w_other` (zero when clamped).
    slope: f64,
}

/// Splits a grid cell across the power bisector of its two nearest sites,
/// treating the power difference as linear over the cell.
fn split_cell(x: &[f64], buckets: &SiteBuckets, sites: &[f64], weights: &[f64], spacing: &[f64]) -> Share {
    let [(i, pi), (j, pj)] = buckets.two_nearest(x, sites, weights);
    if j == usize::MAX {
        return Share {
            owner: i,
            other: i,
            fraction: 0.0,
            slope: 0.0,
        };
    }
    let d = spacing.len();
    let (xi, xj) = (&sites[i * d..(i + 1) * d], &sites[j * d..(j + 1) * d]);
    let dist: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let width: f64 = (0..d).map(|k| spacing[k] * (xi[k] - xj[k]).abs() / dist).sum();
    let spread = 2.0 * dist * width;
    let raw = 0.5 - (pj - pi) / spread;
    Share {
        owner: i,
        other: j,
        fraction: raw.clamp(0.0, 0.5),
        slope: if raw > 0.0 { 1.0 / spread } else { 0.0 },
    }
}

/// Jacobian of the cell masses in the weights: a weighted graph Laplacian
/// over pairs of sites sharing grid cells.
struct MassJacobian {
    diag: Vec<f64>,
    /// `(i, j, g)` with `i < j`, merged.
    edges: Vec<(usize, usize, f64)>,
}

impl MassJacobian {
    fn assemble(n: usize, share: &[Share], cell_mass: &[f64]) -> Self {
        let mut raw: Vec<(usize, usize, f64)> = share
            .iter()
            .zip(cell_mass)
            .filter(|(s, _)| s.slope > 0.0)
            .map(|(s, m)| (s.owner.min(s.other), s.owner.max(s.other), s.slope * m))
            .collect();
        raw.sort_by_key(|a| (a.0, a.1));
        let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(raw.len());
        for e in raw {
            match edges.last_mut() {
                Some(last) if last.0 == e.0 && last.1 == e.1 => last.2 += e.2,
                _ => edges.push(e),
            }
        }
        let mut diag = vec![0.0; n];
        for &(i, j, g) in &edges {
            diag[i] += g;
            diag[j] += g;
        }
        Self { diag, edges }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (d, v)) in out.iter_mut().zip(self.diag.iter().zip(x)) {
            *o = d * v;
        }
        for &(i, j, g) in &self.edges {
            out[i] -= g * x[j];
            out[j] -= g * x[i];
        }
    }

    /// Jacobi-preconditioned conjugate gradients for `J·s = r`; `r` sums to
    /// zero, so the constant null space is harmless.
    fn solve(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let precond: Vec<f64> = self.diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
        let mut x = vec![0.0; n];
        let mut res = r.to_vec();
        let mut z: Vec<f64> = res.iter().zip(&precond).map(|(a, p)| a * p).collect();
        let mut p = z.clone();
        let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let r0: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut ap = vec![0.0; n];
        for _ in 0..(4 * n).max(50) {
            self.apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                res[k] -= alpha * ap[k];
            }
            if res.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-10 * r0 {
                break;
            }
            for k in 0..n {
                z[k] = res[k] * precond[k];
            }
            let rz_next: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        x
    }
}

fn solve_grid(
    sites: ArrayView2<'_, f64>,
    target: &GridDensity,
    cfg: &LaguerreConfig,
    warm_weights: Option<&[f64]>,
) -> Result<LaguerreDiagram> {
    let layout = target.layout();
    let (n, d) = sites.dim();
    let flat_sites: Vec<f64> = sites.iter().copied().collect();
    let buckets = SiteBuckets::new(sites, layout.domain().lower(), layout.domain().upper());
    let centers = layout.centers();
    let vol = layout.cell_volume();
    let cell_mass: Vec<f64> = target.values().iter().map(|v| v * vol).collect();
    let max_density = target.values().iter().copied().fold(0.0, f64::max);
    let spacing: Vec<f64> = (0..d).map(|k| layout.spacing(k)).collect();
    let goal = 1.0 / n as f64;

    let mut weights = match warm_weights {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    let assign = |weights: &[f64], share: &mut [Share], masses: &mut [f64]| -> f64 {
        masses.iter_mut().for_each(|m| *m = 0.0);
        for (c, x) in centers.outer_iter().enumerate() {
            let x = x.as_slice().expect("contiguous rows");
            share[c] = split_cell(x, &buckets, &flat_sites, weights, &spacing);
            let sh = &share[c];
            masses[sh.owner] += (1.0 - sh.fraction) * cell_mass[c];
            if sh.fraction > 0.0 {
                masses[sh.other] += sh.fraction * cell_mass[c];
            }
        }
        masses.iter().map(|m| (m - goal).abs()).fold(0.0, f64::max)
    };
    let recenter = |weights: &mut [f64]| {
        let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        weights.iter_mut().for_each(|w| *w -= top);
    };

    let eta0 = 0.5 / max_density;
    let mut eta = eta0;
    let mut calm = 0;
    let mut share = vec![Share::default(); layout.len()];
    let mut masses = vec![0.0; n];
    recenter(&mut weights);
    let mut defect = assign(&weights, &mut share, &mut masses);
    let mut prev_defect = f64::INFINITY;
    let mut iterations = 0;
    let mut trial_share = share.clone();
    let mut trial_masses = masses.clone();
    while defect > cfg.mass_tol {
        if iterations >= cfg.max_iter {
            return Err(Error::LaguerreNotConverged { iterations, defect });
        }
        iterations += 1;
        let residual: Vec<f64> = masses.iter().map(|m| goal - m).collect();
        if cfg.solver == LaguerreSolver::Newton {
            let lap = MassJacobian::assemble(n, &share, &cell_mass);
            let step = lap.solve(&residual);
            let mut tau = 1.0;
            let mut accepted = false;
            while tau >= 1.0 / 64.0 {
                let mut trial: Vec<f64> = weights.iter().zip(&step).map(|(w, s)| w + tau * s).collect();
                recenter(&mut trial);
                let trial_defect = assign(&trial, &mut trial_share, &mut trial_masses);
                let nonempty = trial_masses.iter().all(|&m| m > 0.0);
                if nonempty && trial_defect < defect {
                    weights = trial;
                    std::mem::swap(&mut share, &mut trial_share);
                    std::mem::swap(&mut masses, &mut trial_masses);
                    defect = trial_defect;
                    accepted = true;
                    break;
                }
                tau *= 0.5;
            }
            if accepted {
                continue;
            }
        }
        if defect > prev_defect {
            eta *= 0.5;
            calm = 0;
        } else {
            calm += 1;
            if calm >= 5 {
                eta = (eta * 1.25).min(eta0);
            }
        }
        prev_defect = defect;
        for (w, r) in weights.iter_mut().zip(&residual) {
            *w += eta * r;
        }
        recenter(&mut weights);
        defect = assign(&weights, &mut share, &mut masses);
    }

    let parts = |c: usize| {
        let sh = share[c];
        [(sh.owner, 1.0 - sh.fraction), (sh.other, sh.fraction)]
    };
    let mut centroids = Array2::<f64>::zeros((n, d));
    for (c, x) in centers.outer_iter().enumerate() {
        for (i, f) in parts(c) {
            if f > 0.0 {
                for k in 0..d {
                    centroids[[i, k]] += f * cell_mass[c] * x[k];
                }
            }
        }
    }
    for i in 0..n {
        if masses[i] > 0.0 {
            for k in 0..d {
                centroids[[i, k]] /= masses[i];
            }
        } else {
            centroids.row_mut(i).assign(&sites.row(i));
        }
    }
    let mut variances = vec![0.0; n];
    let mut cell_energies = vec![0.0; n];
    for (c, x) in centers.outer_iter().enumerate() {
        for (i, f) in parts(c) {
            if f > 0.0 {
                let (mut dv, mut de) = (0.0, 0.0);
                for k in 0..d {
                    dv += (x[k] - centroids[[i, k]]).powi(2);
                    de += (x[k] - sites[[i, k]]).powi(2);
                }
                variances[i] += f * cell_mass[c] * dv;
                cell_energies[i] += f * cell_mass[c] * de;
            }
        }
    }
    Ok(LaguerreDiagram {
        sites: sites.to_owned(),
        weights,
        masses,
        centroids,
        variances,
        cell_energies,
        iterations,
        max_defect: defect,
    })
}

/// `W₂²(ρ^N, ρ*)` and its split into the site-to-centroid term
/// `Σ m_i|x_i − c_i|²` and the within-cell variance `Σ var_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdotEnergy {
    pub energy: f64,
    pub bias: f64,
    pub variance: f64,
}

impl SdotEnergy {
    /// `|energy − (bias + variance)| / energy`.
    pub fn decomposition_error(&self) -> f64 {
        (self.energy - self.bias - self.variance).abs() / self.energy.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn sdot_energy(diagram: &LaguerreDiagram, sites: ArrayView2<'_, f64>) -> Result<SdotEnergy> {
    if diagram.sites.view() != sites {
        return Err(Error::StaleDiagram("sites moved since the diagram was solved".into()));
    }
    let energy = diagram.cell_energies.iter().sum();
    let variance = diagram.variances.iter().sum();
    let bias = (0..diagram.len())
        .map(|i| {
            let d2: f64 = sites
                .row(i)
                .iter()
                .zip(diagram.centroids.row(i).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            diagram.masses[i] * d2
        })
        .sum();
    Ok(SdotEnergy {
        energy,
        bias,
        variance,
    })
}

/// `x_i ← x_i + dt·(c_i − x_i)`.
pub fn sdot_flow_step(sites: ArrayView2<'_, f64>, diagram: &LaguerreDiagram, dt: f64) -> Result<Array2<f64>> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::InvalidArgument(format!("dt must lie in (0, 1], got {dt}")));
    }
    if diagram.sites.view() != sites {
        return Err(Error::StaleDiagram("sites moved since the diagram was solved".into()));
    }
    Ok(&sites + &((&diagram.centroids - &sites) * dt))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdotFlowConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// Stop once `max_i |c_i − x_i|` falls below this.
    pub tol: f64,
    /// Also stop once one step lowers the energy by less than this fraction.
    pub energy_rtol: f64,
    pub laguerre: LaguerreConfig,
}

impl Default for SdotFlowConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            max_steps: 2000,
            tol: 1e-7,
            energy_rtol: 0.0,
            laguerre: LaguerreConfig::default(),
        }
    }
}

/// Energies along an SD-OT flow.
#[derive(Debug, Clone)]
pub struct SdotRun {
    pub times: Vec<f64>,
    pub energies: Vec<SdotEnergy>,
    pub final_sites: Array2<f64>,
    pub final_diagram: LaguerreDiagram,
    pub converged: bool,
}

impl SdotRun {
    pub fn ultimate_energy(&self) -> f64 {
        self.energies.last().map_or(f64::NAN, |e| e.energy)
    }

    /// `t,energy,bias,variance`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,energy,bias,variance")?;
        for (t, e) in self.times.iter().zip(&self.energies) {
            writeln!(out, "{t:.10e},{:.17e},{:.17e},{:.17e}", e.energy, e.bias, e.variance)?;
        }
        Ok(())
    }
}

/// Alternates diagram solves and site moves until the sites reach their
/// centroids (or `max_steps`).
pub fn run_sdot_flow(sites0: ArrayView2<'_, f64>, target: &GridDensity, cfg: &SdotFlowConfig) -> Result<SdotRun> {
    let mut sites = sites0.to_owned();
    let mut times = Vec::new();
    let mut energies = Vec::new();
    let mut weights: Option<Vec<f64>> = None;
    let mut step = 0;
    loop {
        let diagram = solve_laguerre(sites.view(), target, &cfg.laguerre, weights.as_deref())?;
        energies.push(sdot_energy(&diagram, sites.view())?);
        times.push(step as f64 * cfg.dt);
        let gap = (&diagram.centroids - &sites)
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max);
        let stalled = energies.len() >= 2 && {
            let (prev, cur) = (energies[energies.len() - 2].energy, energies[energies.len() - 1].energy);
            (prev - cur).abs() <= cfg.energy_rtol * cur
        };
        let converged = gap < cfg.tol || stalled;
        if converged || step >= cfg.max_steps {
            return Ok(SdotRun {
                times,
                energies,
                final_sites: sites,
                final_diagram: diagram,
                converged,
            });
        }
        sites = sdot_flow_step(sites.view(), &diagram, cfg.dt)?;
        weights = Some(diagram.weights);
        step += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationRow {
    pub n: usize,
    pub ultimate_energy: f64,
    pub converged: bool,
    /// Used by the slope fit.
    pub in_window: bool,
}

/// Ultimate SD-OT energies across `N` and the fitted law `C·N^{slope}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationReport {
    pub rows: Vec<QuantizationRow>,
    pub slope: f64,
    pub constant: f64,
    pub residual: f64,
}

impl QuantizationReport {
    /// `N,ultimateEnergy,slopeWindowFlag` plus a summary line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "N,ultimateEnergy,slopeWindowFlag")?;
        for r in &self.rows {
            writeln!(out, "{},{:.17e},{}", r.n, r.ultimate_energy, u8::from(r.in_window))?;
        }
        writeln!(out, "# slope={},constant={},residual={}", self.slope, self.constant, self.residual)?;
        Ok(())
    }
}

/// Runs the flow for every `N` from `N` samples of the target and fits the
/// log-log slope over the longest run of strictly decreasing energies among
/// converged runs.
pub fn quantization_sweep(target: &GridDensity, ns: &[usize], cfg: &SdotFlowConfig, seed: u64) -> Result<QuantizationReport> {
    if ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("N values must be increasing".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let init: ParticleEnsemble = sample_density(target, n, seed)?;
        let run = run_sdot_flow(init.positions().view(), target, cfg)?;
        rows.push(QuantizationRow {
            n,
            ultimate_energy: run.ultimate_energy(),
            converged: run.converged,
            in_window: false,
        });
    }
    let usable: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].converged).collect();
    let (mut best_lo, mut best_len) = (0, 0);
    let mut k = 0;
    while k < usable.len() {
        let mut j = k;
        while j + 1 < usable.len() && rows[usable[j + 1]].ultimate_energy < rows[usable[j]].ultimate_energy {
            j += 1;
        }
        if j - k + 1 > best_len {
            best_lo = k;
            best_len = j - k + 1;
        }
        k = j + 1;
    }
    if best_len < 2 {
        return Err(Error::FitRejected("fewer than two converged, decreasing energies".into()));
    }
    for &i in &usable[best_lo..best_lo + best_len] {
        rows[i].in_window = true;
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.in_window)
        .map(|r| ((r.n as f64).ln(), r.ultimate_energy.ln()))
        .unzip();
    let slope = ls_slope(&lx, &ly);
    let intercept = ly.iter().sum::<f64>() / ly.len() as f64 - slope * lx.iter().sum::<f64>() / lx.len() as f64;
    let residual = (lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / lx.len() as f64)
        .sqrt();
    Ok(QuantizationReport {
        rows,
        slope,
        constant: intercept.exp(),
        residual,
    })
}
