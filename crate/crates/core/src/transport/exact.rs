//! Exact optimal transport between equal-size uniform ensembles.

use crate::error::{Error, Result};
use crate::measures::ParticleEnsemble;

use super::{PlanForm, TransportPlan};

/// Largest ensemble accepted by [`w2_assignment`].
pub const DEFAULT_ASSIGNMENT_CAP: usize = 512;

fn check_pair(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Mean squared displacement of the matching `i -> perm[i]`, summed in index order.
pub fn matching_cost(a: &ParticleEnsemble, b: &ParticleEnsemble, perm: &[usize]) -> f64 {
    let (xa, xb) = (a.positions(), b.positions());
    let total: f64 = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            xa.row(i)
                .iter()
                .zip(xb.row(j).iter())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / perm.len() as f64
}

fn sort_order(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let v: Vec<f64> = values.collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
    idx
}

/// Exact `W₂` on the line by monotone (sorted) matching.
pub fn w2_exact_1d(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<(f64, TransportPlan)> {
    check_pair(a, b)?;
    if a.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: a.dim(),
        });
    }
    let oa = sort_order(a.positions().column(0).iter().copied());
    let ob = sort_order(b.positions().column(0).iter().copied());
    let mut perm = vec![0; a.len()];
    for (ia, ib) in oa.into_iter().zip(ob) {
        perm[ia] = ib;
    }
    let cost = matching_cost(a, b, &perm);
    Ok((cost.sqrt(), TransportPlan::permutation(perm, cost)))
}

/// Exact `W₂` by minimum-cost perfect matching (shortest augmenting paths,
/// `O(N³)`), with the default size cap.
pub fn w2_assignment(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<(f64, TransportPlan)> {
    w2_assignment_capped(a, b, DEFAULT_ASSIGNMENT_CAP)
}

pub fn w2_assignment_capped(
    a: &ParticleEnsemble,
    b: &ParticleEnsemble,
    cap: usize,
) -> Result<(f64, TransportPlan)> {
    check_pair(a, b)?;
    let n = a.len();
    if n > cap {
        return Err(Error::AssignmentCapExceeded { n, cap });
    }
    let (xa, xb) = (a.positions(), b.positions());
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = xa
                .row(i)
                .iter()
                .zip(xb.row(j).iter())
                .map(|(p, q)| (p - q).powi(2))
                .sum();
        }
    }
    let perm = solve_assignment(&cost, n);
    let total = matching_cost(a, b, &perm);
    Ok((total.sqrt(), TransportPlan::permutation(perm, total)))
}

/// Minimum-cost assignment for a dense `n × n` row-major cost matrix, by
/// shortest augmenting paths with lazily updated dual potentials.
/// Returns `row -> column`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    const FREE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![FREE; n];
    let mut row4col = vec![FREE; n];
    let mut path = vec![0usize; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    let mut visited_rows: Vec<usize> = Vec::with_capacity(n);
    let mut visited_cols: Vec<usize> = Vec::with_capacity(n);
    for cur in 0..n {
        remaining.clear();
        remaining.extend((0..n).rev());
        visited_rows.clear();
        visited_cols.clear();
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            visited_rows.push(i);
            let row = &cost[i * n..(i + 1) * n];
            let mut lowest = f64::INFINITY;
            let mut index = 0;
            let offset = min_val - u[i];
            for (k, &j) in remaining.iter().enumerate() {
                let r = offset + row[j] - v[j];
                let mut s = shortest[j];
                if r < s {
                    path[j] = i;
                    shortest[j] = r;
                    s = r;
                }
                if s < lowest || (s == lowest && row4col[j] == FREE) {
                    lowest = s;
                    index = k;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(index);
            visited_cols.push(j);
            if row4col[j] == FREE {
                break j;
            }
            i = row4col[j];
        };
        u[cur] += min_val;
        for &r in &visited_rows[1..] {
            u[r] += min_val - shortest[col4row[r]];
        }
        for &c in &visited_cols {
            v[c] -= min_val - shortest[c];
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            let prev = std::mem::replace(&mut col4row[r], j);
            if r == cur {
                break;
            }
            j = prev;
        }
    }
    col4row
}

impl TransportPlan {
    pub(crate) fn permutation(perm: Vec<usize>, cost: f64) -> Self {
        Self {
            form: PlanForm::Permutation(perm),
            cost,
            epsilon: 0.0,
        }
    }
}
