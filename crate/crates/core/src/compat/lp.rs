//! Dense two-phase simplex for small linear programs.
//!
//! Solves `min cᵀx s.t. Ax = b, x ≥ 0` with Bland's rule, which cannot
//! cycle. Problems here have a handful of rows, so a dense tableau is fine.

use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

/// Bases visited when listing alternative optima.
const MAX_OPTIMAL_BASES: usize = 256;

#[derive(Debug, Clone)]
struct Tableau {
    /// `m` constraint rows of `n_total + 1` entries (last is the rhs).
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    /// Columns eligible to enter the basis.
    allowed: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        self.rows[r].iter_mut().for_each(|x| *x /= p);
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i != r {
                let f = row[c];
                if f != 0.0 {
                    for (x, &y) in row.iter_mut().zip(&pivot_row) {
                        *x -= f * y;
                    }
                }
            }
        }
        self.basis[r] = c;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = cost.to_vec();
        for (row, &b) in self.rows.iter().zip(&self.basis) {
            let cb = cost[b];
            if cb != 0.0 {
                for (dj, &a) in d.iter_mut().zip(row.iter()) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    /// Leaving row for entering column `c` by the ratio test (Bland ties).
    fn leaving(&self, c: usize) -> Option<usize> {
        let rhs = self.rows[0].len() - 1;
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, row) in self.rows.iter().enumerate() {
            if row[c] > EPS {
                let ratio = row[rhs] / row[c];
                let better = match best {
                    None => true,
                    Some((r, _, b)) => ratio < r - EPS || (ratio <= r + EPS && self.basis[i] < b),
                };
                if better {
                    best = Some((ratio, i, self.basis[i]));
                }
            }
        }
        best.map(|(_, i, _)| i)
    }

    fn optimize(&mut self, cost: &[f64]) -> Result<()> {
        loop {
            let d = self.reduced_costs(cost);
            let Some(c) = (0..self.allowed).find(|&j| d[j] < -EPS) else {
                return Ok(());
            };
            let r = self.leaving(c).ok_or_else(|| Error::arg("linear program is unbounded"))?;
            self.pivot(r, c);
        }
    }

    fn solution(&self, n: usize) -> Vec<f64> {
        let rhs = self.rows[0].len() - 1;
        let mut x = vec![0.0; n];
        for (row, &b) in self.rows.iter().zip(&self.basis) {
            if b < n {
                x[b] = row[rhs];
            }
        }
        x
    }
}

/// An optimal basic solution and any alternative optimal vertices found.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
    /// Distinct optimal vertices reached by degenerate-cost pivots,
    /// starting with `x`.
    pub vertices: Vec<Vec<f64>>,
}

pub fn minimize(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<LpSolution> {
    let m = a.len();
    let n = c.len();
    if b.len() != m || a.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch("linear program dimensions disagree".into()));
    }
    // Phase 1: one artificial per row, rows flipped so b ≥ 0.
    let mut rows = Vec::with_capacity(m);
    for (i, (row, &bi)) in a.iter().zip(b).enumerate() {
        let sign = if bi < 0.0 { -1.0 } else { 1.0 };
        let mut r: Vec<f64> = row.iter().map(|&x| sign * x).collect();
        r.extend((0..m).map(|k| if k == i { 1.0 } else { 0.0 }));
        r.push(sign * bi);
        rows.push(r);
    }
    let mut t = Tableau {
        rows,
        basis: (n..n + m).collect(),
        allowed: n + m,
    };
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|x| *x = 1.0);
    t.optimize(&phase1)?;
    let infeasibility: f64 = t.rows.iter().map(|r| r[n + m]).zip(&t.basis).filter(|(_, &bv)| bv >= n).map(|(v, _)| v).sum();
    if infeasibility > 1e-9 {
        return Err(Error::arg("linear program is infeasible"));
    }
    // Drive artificials out; rows where that is impossible are redundant.
    let mut i = 0;
    while i < t.rows.len() {
        if t.basis[i] >= n {
            if let Some(c) = (0..n).find(|&j| t.rows[i][j].abs() > 1e-9) {
                t.pivot(i, c);
            } else {
                t.rows.remove(i);
                t.basis.remove(i);
                continue;
            }
        }
        i += 1;
    }
    t.allowed = n;
    let mut cost = c.to_vec();
    cost.extend(std::iter::repeat_n(0.0, m));
    t.optimize(&cost)?;

    let x = t.solution(n);
    let value = x.iter().zip(c).map(|(a, b)| a * b).sum();
    let vertices = optimal_vertices(&t, &cost, n);
    Ok(LpSolution { x, value, vertices })
}

/// Breadth-first walk over optimal bases via zero-reduced-cost pivots.
fn optimal_vertices(start: &Tableau, cost: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut seen_bases = vec![sorted(&start.basis)];
    let mut vertices = vec![start.solution(n)];
    let mut queue = std::collections::VecDeque::from([start.clone()]);
    while let Some(t) = queue.pop_front() {
        if seen_bases.len() >= MAX_OPTIMAL_BASES {
            break;
        }
        let d = t.reduced_costs(cost);
        for c in (0..n).filter(|&j| !t.basis.contains(&j) && d[j].abs() <= 1e-10) {
            let Some(r) = t.leaving(c) else { continue };
            let mut next = t.clone();
            next.pivot(r, c);
            let key = sorted(&next.basis);
            if seen_bases.contains(&key) {
                continue;
            }
            seen_bases.push(key);
            let x = next.solution(n);
            if !vertices.iter().any(|v: &Vec<f64>| v.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-10)) {
                vertices.push(x);
            }
            queue.push_back(next);
        }
    }
    vertices
}

fn sorted(basis: &[usize]) -> Vec<usize> {
    let mut b = basis.to_vec();
    b.sort_unstable();
    b
}
