//! Wasserstein distances, couplings and interpolation.

mod exact;
mod sinkhorn;

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::measures::{
    sample_density, second_moment_about_set, GridDensity, ParticleEnsemble, TargetSet,
};

pub use exact::{
    matching_cost, solve_assignment, w2_assignment, w2_assignment_capped, w2_exact_1d,
    DEFAULT_ASSIGNMENT_CAP,
};
pub use sinkhorn::{
    barycentric_projection, self_transport, sinkhorn, sinkhorn_divergence, sinkhorn_velocity,
    sinkhorn_warm, solve_discrete, DiscreteMeasure, EntropicPotentials, OtMeasure,
    SinkhornConfig, SinkhornDivergence, SinkhornMode,
};

/// Relative tolerance on the marginals of a dense coupling.
pub const PLAN_MARGINAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanForm {
    /// `i -> perm[i]` between equal-size uniform ensembles.
    Permutation(Vec<usize>),
    Dense(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub form: PlanForm,
    /// `⟨c, π⟩` with `c = |x − y|²`.
    pub cost: f64,
    /// 0 for exact plans.
    pub epsilon: f64,
}

impl TransportPlan {
    pub fn from_potentials(pot: &EntropicPotentials) -> Self {
        Self {
            form: PlanForm::Dense(pot.plan()),
            cost: pot.primal_cost,
            epsilon: pot.epsilon,
        }
    }

    /// Checks bijectivity, or dense marginals against `a` and `b`.
    pub fn check_marginals(&self, a: &[f64], b: &[f64]) -> Result<()> {
        match &self.form {
            PlanForm::Permutation(p) => {
                let mut seen = vec![false; p.len()];
                for &j in p {
                    if j >= p.len() || std::mem::replace(&mut seen[j], true) {
                        return Err(Error::InvalidArgument("plan is not a bijection".into()));
                    }
                }
                Ok(())
            }
            PlanForm::Dense(m) => {
                if m.nrows() != a.len() || m.ncols() != b.len() {
                    return Err(Error::SizeMismatch(m.len(), a.len() * b.len()));
                }
                let rows = m.sum_axis(ndarray::Axis(1));
                let cols = m.sum_axis(ndarray::Axis(0));
                let bad = |got: f64, want: f64| (got - want).abs() > PLAN_MARGINAL_TOL * want.max(1e-300);
                if rows.iter().zip(a).any(|(g, w)| bad(*g, *w))
                    || cols.iter().zip(b).any(|(g, w)| bad(*g, *w))
                {
                    return Err(Error::InvalidArgument("coupling marginals off".into()));
                }
                Ok(())
            }
        }
    }

    /// Couplings as `i,j,mass` rows; permutations as `i,j`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        match &self.form {
            PlanForm::Permutation(p) => {
                writeln!(out, "i,j")?;
                for (i, j) in p.iter().enumerate() {
                    writeln!(out, "{i},{j}")?;
                }
            }
            PlanForm::Dense(m) => {
                writeln!(out, "i,j,mass")?;
                for ((i, j), v) in m.indexed_iter() {
                    if *v > 0.0 {
                        writeln!(out, "{i},{j},{v:.17e}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which backend produced a distance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    ClosedFormPointSet,
    Sorted1d,
    Quantile1d,
    Assignment,
    SinkhornDivergence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Estimate {
    pub value: f64,
    pub method: W2Method,
    /// Set when a density target was resampled.
    pub resampled: bool,
}

/// Seed used to resample density targets, so estimates are reproducible.
pub const DENSITY_RESAMPLE_SEED: u64 = 0x5eed_d15c;

/// Exact `W₂` between two 1D empirical measures of any sizes, integrating
/// the gap of their quantile functions.
pub fn w2_quantile_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut level = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        total += (next - level) * (xa[i] - xb[j]).powi(2);
        level = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total.sqrt())
}

fn ensemble_w2(rho: &ParticleEnsemble, other: &ParticleEnsemble) -> Result<W2Estimate> {
    if rho.dim() != other.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            got: other.dim(),
        });
    }
    if rho.dim() == 1 {
        if rho.len() == other.len() {
            return Ok(W2Estimate {
                value: w2_exact_1d(rho, other)?.0,
                method: W2Method::Sorted1d,
                resampled: false,
            });
        }
        let a: Vec<f64> = rho.positions().column(0).to_vec();
        let b: Vec<f64> = other.positions().column(0).to_vec();
        return Ok(W2Estimate {
            value: w2_quantile_1d(&a, &b)?,
            method: W2Method::Quantile1d,
            resampled: false,
        });
    }
    if rho.len() == other.len() && rho.len() <= DEFAULT_ASSIGNMENT_CAP {
        return Ok(W2Estimate {
            value: w2_assignment(rho, other)?.0,
            method: W2Method::Assignment,
            resampled: false,
        });
    }
    let diam = rho.domain().diameter();
    let cfg = SinkhornConfig::with_epsilon(1e-3 * diam * diam);
    let div = sinkhorn_divergence(OtMeasure::Ensemble(rho), OtMeasure::Ensemble(other), &cfg)?;
    Ok(W2Estimate {
        value: div.divergence.max(0.0).sqrt(),
        method: W2Method::SinkhornDivergence,
        resampled: false,
    })
}

/// Estimate of `W₂(ρ, target)`; unions take the minimum over members.
pub fn w2_to_target_set(rho: &ParticleEnsemble, target: &TargetSet) -> Result<W2Estimate> {
    match target {
        TargetSet::Points(set) => Ok(W2Estimate {
            value: second_moment_about_set(rho, set)?.sqrt(),
            method: W2Method::ClosedFormPointSet,
            resampled: false,
        }),
        TargetSet::Ensemble(e) => ensemble_w2(rho, e),
        TargetSet::Density(d) => {
            let sample = sample_density(d, rho.len(), DENSITY_RESAMPLE_SEED)?;
            let mut est = ensemble_w2(rho, &sample)?;
            est.resampled = true;
            Ok(est)
        }
        TargetSet::Union(members) => {
            let mut best: Option<W2Estimate> = None;
            for m in members {
                let est = w2_to_target_set(rho, m)?;
                if best.is_none_or(|b| est.value < b.value) {
                    best = Some(est);
                }
            }
            best.ok_or(Error::EmptySet)
        }
    }
}

/// Points `(1−t)x_i + t y_{σ(i)}` along the optimal matching `σ`.
pub fn displacement_interpolate(
    a: &ParticleEnsemble,
    b: &ParticleEnsemble,
    t: f64,
) -> Result<ParticleEnsemble> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    let (_, plan) = if a.dim() == 1 {
        w2_exact_1d(a, b)?
    } else {
        w2_assignment(a, b)?
    };
    let PlanForm::Permutation(perm) = plan.form else {
        unreachable!("exact backends return permutations")
    };
    let (xa, xb) = (a.positions(), b.positions());
    let mut out = Array2::zeros(xa.raw_dim());
    for (i, &j) in perm.iter().enumerate() {
        let row = &xa.row(i) * (1.0 - t) + &xb.row(j) * t;
        out.row_mut(i).assign(&row);
    }
    ParticleEnsemble::reflected(a.domain().clone(), out)
}

/// `√(Σ (a − b)² · cellVolume)`.
pub fn l2_density_distance(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    if a.layout() != b.layout() {
        return Err(Error::GridMismatch);
    }
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok((sum * a.layout().cell_volume()).sqrt())
}
