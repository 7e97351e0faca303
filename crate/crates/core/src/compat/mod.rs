//! Projected posterior-compatibility diagnostic.
//!
//! Given a student distribution `s ∈ Δ^L` and teacher rows `T[z] ∈ Δ^L`, the
//! student is compatible with some joint iff `s = TᵀP` for a `P ∈ Δ^Z`. The
//! residual `min_P ‖s − TᵀP‖₁` is solved as a linear program with slack
//! variables `s − TᵀP = e⁺ − e⁻`; a projected-subgradient method and a
//! simplex grid search serve as independent cross-checks.

pub mod lp;

use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Teacher, TeacherMode};
use crate::prob;
use crate::rng;

/// Teacher fidelity below which the hint is being ignored.
pub const FIDELITY_THRESHOLD: f64 = 0.3;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Sum each group's mass and renormalize; also return the covered mass.
pub fn project_subspace(dist: &[f64], groups: &[Vec<usize>]) -> Result<(Vec<f64>, f64)> {
    let mut seen = vec![false; dist.len()];
    for g in groups {
        if g.is_empty() {
            return Err(Error::arg("projection groups must be nonempty"));
        }
        for &v in g {
            if v >= dist.len() {
                return Err(Error::IndexOutOfRange {
                    what: "token",
                    index: v,
                    limit: dist.len(),
                });
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::arg(format!("token {v} appears in more than one group")));
            }
        }
    }
    let sums: Vec<f64> = groups.iter().map(|g| g.iter().map(|&v| dist[v]).sum()).collect();
    let mass: f64 = sums.iter().sum();
    if mass <= 0.0 {
        return Err(Error::DegenerateProjection);
    }
    Ok((sums.into_iter().map(|x| x / mass).collect(), mass))
}

/// `‖s − TᵀP‖₁`.
pub fn residual(s: &[f64], t: &[Vec<f64>], p: &[f64]) -> f64 {
    (0..s.len())
        .map(|l| (s[l] - t.iter().zip(p).map(|(row, &pz)| pz * row[l]).sum::<f64>()).abs())
        .sum()
}

fn check_dims(s: &[f64], t: &[Vec<f64>]) -> Result<()> {
    if t.is_empty() || s.is_empty() || t.iter().any(|row| row.len() != s.len()) {
        return Err(Error::ShapeMismatch(format!(
            "student has {} entries but teacher rows have lengths {:?}",
            s.len(),
            t.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    LinearProgram,
    Subgradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatSolution {
    pub p_hat: Vec<f64>,
    pub residual: f64,
    /// `false` when several optimal vertices were found (rank-deficient `T`).
    pub unique: bool,
    pub method: Method,
}

/// Clamp rounding negatives and renormalize onto the simplex.
fn clean_simplex(p: &mut [f64]) {
    p.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
}

/// `min_{P ∈ Δ^Z} ‖s − TᵀP‖₁` by linear programming.
///
/// Among the optimal vertices reached, the one of least Euclidean norm is
/// returned (first found on ties).
pub fn solve_compat(s: &[f64], t: &[Vec<f64>]) -> Result<CompatSolution> {
    check_dims(s, t)?;
    let (l, z) = (s.len(), t.len());
    let n = z + 2 * l;
    let mut a = Vec::with_capacity(l + 1);
    for ell in 0..l {
        let mut row = vec![0.0; n];
        for (k, trow) in t.iter().enumerate() {
            row[k] = trow[ell];
        }
        row[z + ell] = 1.0;
        row[z + l + ell] = -1.0;
        a.push(row);
    }
    let mut simplex_row = vec![0.0; n];
    simplex_row[..z].iter_mut().for_each(|x| *x = 1.0);
    a.push(simplex_row);
    let mut b = s.to_vec();
    b.push(1.0);
    let mut c = vec![0.0; n];
    c[z..].iter_mut().for_each(|x| *x = 1.0);

    let sol = lp::minimize(&a, &b, &c)?;
    let mut candidates: Vec<Vec<f64>> = sol
        .vertices
        .iter()
        .map(|v| {
            let mut p = v[..z].to_vec();
            clean_simplex(&mut p);
            p
        })
        .collect();
    candidates.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-10));
    let norm = |p: &Vec<f64>| p.iter().map(|x| x * x).sum::<f64>();
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| norm(a).total_cmp(&norm(b)).then(i.cmp(j)))
        .map(|(_, p)| p.clone())
        .expect("at least one vertex");
    let distinct = candidates
        .iter()
        .filter(|p| p.iter().zip(&best).any(|(x, y)| (x - y).abs() > 1e-9))
        .count();
    Ok(CompatSolution {
        residual: residual(s, t, &best),
        p_hat: best,
        unique: distinct == 0,
        method: Method::LinearProgram,
    })
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if ui - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projected subgradient descent with steps `1/k`, keeping the best iterate.
pub fn solve_subgradient(s: &[f64], t: &[Vec<f64>], iterations: usize) -> Result<CompatSolution> {
    check_dims(s, t)?;
    let z = t.len();
    let mut p = vec![1.0 / z as f64; z];
    let mut best = (residual(s, t, &p), p.clone());
    for k in 1..=iterations {
        let signs: Vec<f64> = (0..s.len())
            .map(|l| {
                let d = s[l] - t.iter().zip(&p).map(|(row, &pz)| pz * row[l]).sum::<f64>();
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        let step = 1.0 / k as f64;
        let moved: Vec<f64> = t
            .iter()
            .zip(&p)
            .map(|(row, &pz)| pz + step * row.iter().zip(&signs).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        p = project_to_simplex(&moved);
        let r = residual(s, t, &p);
        if r < best.0 {
            best = (r, p.clone());
        }
    }
    Ok(CompatSolution {
        residual: best.0,
        p_hat: best.1,
        unique: true,
        method: Method::Subgradient,
    })
}

/// Exhaustive search over the simplex grid with step `1/steps`.
pub fn grid_oracle(s: &[f64], t: &[Vec<f64>], steps: usize) -> Result<(Vec<f64>, f64)> {
    check_dims(s, t)?;
    let z = t.len();
    if z > 4 {
        return Err(Error::arg(format!("grid oracle supports Z ≤ 4, got {z}")));
    }
    let mut best = (Vec::new(), f64::INFINITY);
    let mut counts = vec![0usize; z];
    grid_walk(s, t, steps, 0, steps, &mut counts, &mut best);
    Ok(best)
}

fn grid_walk(
    s: &[f64],
    t: &[Vec<f64>],
    steps: usize,
    k: usize,
    left: usize,
    counts: &mut [usize],
    best: &mut (Vec<f64>, f64),
) {
    if k + 1 == counts.len() {
        counts[k] = left;
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / steps as f64).collect();
        let r = residual(s, t, &p);
        if r < best.1 {
            *best = (p, r);
        }
        return;
    }
    for c in 0..=left {
        counts[k] = c;
        grid_walk(s, t, steps, k + 1, left - c, counts, best);
    }
}

/// Exact minimum by vertex enumeration.
///
/// The residual is convex and piecewise linear, so it attains its minimum
/// at a vertex of the arrangement cut by the hyperplanes `(TᵀP)_l = s_l`
/// and `P_z = 0` inside `ΣP = 1`. Every choice of `Z − 1` of them is solved
/// directly; cost grows as `C(L + Z, Z − 1)`, so this is for small
/// instances only.
pub fn vertex_oracle(s: &[f64], t: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    check_dims(s, t)?;
    let (l, z) = (s.len(), t.len());
    // Hyperplane k: letters for k < L, then coordinates.
    let plane = |k: usize| -> (Vec<f64>, f64) {
        if k < l {
            ((0..z).map(|j| t[j][k]).collect(), s[k])
        } else {
            let mut e = vec![0.0; z];
            e[k - l] = 1.0;
            (e, 0.0)
        }
    };
    let mut best = (vec![1.0 / z as f64; z], f64::INFINITY);
    let mut pick: Vec<usize> = (0..z - 1).collect();
    loop {
        let mut rows = vec![(vec![1.0; z], 1.0)];
        rows.extend(pick.iter().map(|&k| plane(k)));
        if let Some(mut p) = solve_square(rows) {
            if p.iter().all(|&x| x >= -1e-12) {
                clean_simplex(&mut p);
                let r = residual(s, t, &p);
                if r < best.1 {
                    best = (p, r);
                }
            }
        }
        // Next combination in lexicographic order.
        let n = l + z;
        let Some(i) = (0..pick.len()).rev().find(|&i| pick[i] < n - pick.len() + i) else { break };
        pick[i] += 1;
        for j in i + 1..pick.len() {
            pick[j] = pick[j - 1] + 1;
        }
    }
    if z == 1 {
        best = (vec![1.0], residual(s, t, &[1.0]));
    }
    Ok(best)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_square(mut rows: Vec<(Vec<f64>, f64)>) -> Option<Vec<f64>> {
    let n = rows.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| rows[a].0[col].abs().total_cmp(&rows[b].0[col].abs()))?;
        if rows[piv].0[col].abs() < 1e-12 {
            return None;
        }
        rows.swap(col, piv);
        for r in col + 1..n {
            let f = rows[r].0[col] / rows[col].0[col];
            if f != 0.0 {
                for c in col..n {
                    rows[r].0[c] -= f * rows[col].0[c];
                }
                rows[r].1 -= f * rows[col].1;
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|c| rows[r].0[c] * x[c]).sum();
        x[r] = (rows[r].1 - tail) / rows[r].0[r];
    }
    Some(x)
}

/// `‖s − Tᵀu‖₁` for uniform `u`.
pub fn uniform_baseline(s: &[f64], t: &[Vec<f64>]) -> Result<f64> {
    check_dims(s, t)?;
    Ok(residual(s, t, &vec![1.0 / t.len() as f64; t.len()]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatMetrics {
    pub letter_mass: f64,
    /// `T[z][z]`, when `L = Z`.
    pub fidelity: Option<Vec<f64>>,
    pub uniform_baseline: f64,
    /// `None` when indeterminate: tied argmax or non-unique `P̂`.
    pub self_consistent: Option<bool>,
    /// Some teacher row puts less than [`FIDELITY_THRESHOLD`] on its own hint.
    pub prerequisite_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatInstance {
    pub student: Vec<f64>,
    pub teacher: Vec<Vec<f64>>,
    pub letter_mass: f64,
    pub solution: Option<CompatSolution>,
    /// The generating `P(z | ·)` when known (exact-mode instances).
    pub true_posterior: Option<Vec<f64>>,
}

impl CompatInstance {
    pub fn new(student: Vec<f64>, teacher: Vec<Vec<f64>>) -> Result<Self> {
        check_dims(&student, &teacher)?;
        for row in std::iter::once(&student).chain(&teacher) {
            if prob::row_sum_error(row) > SIMPLEX_TOLERANCE || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidDistribution(format!("{row:?} is not on the simplex")));
            }
        }
        Ok(CompatInstance {
            student,
            teacher,
            letter_mass: 1.0,
            solution: None,
            true_posterior: None,
        })
    }

    /// Project full distributions onto letter groups first.
    pub fn from_distributions(student: &[f64], teacher: &[Vec<f64>], groups: &[Vec<usize>]) -> Result<Self> {
        let (s, mass) = project_subspace(student, groups)?;
        let t = teacher.iter().map(|row| project_subspace(row, groups).map(|p| p.0)).collect::<Result<_>>()?;
        let mut inst = Self::new(s, t)?;
        inst.letter_mass = mass;
        Ok(inst)
    }

    pub fn solve(mut self) -> Result<Self> {
        self.solution = Some(solve_compat(&self.student, &self.teacher)?);
        Ok(self)
    }

    pub fn metrics(&self, require_fidelity: bool) -> Result<CompatMetrics> {
        compat_metrics(self, require_fidelity)
    }
}

/// Metrics of a solved instance; group `ℓ` is aligned with feedback `z = ℓ`.
pub fn compat_metrics(instance: &CompatInstance, require_fidelity: bool) -> Result<CompatMetrics> {
    let solution = instance
        .solution
        .as_ref()
        .ok_or_else(|| Error::arg("compatibility instance has not been solved"))?;
    let (l, z) = (instance.student.len(), instance.teacher.len());
    if l != z && require_fidelity {
        return Err(Error::ShapeMismatch(format!("fidelity needs L = Z, got L = {l}, Z = {z}")));
    }
    let fidelity = (l == z).then(|| (0..z).map(|k| instance.teacher[k][k]).collect::<Vec<_>>());
    let unique_argmax = |v: &[f64]| {
        let best = prob::argmax(v);
        let ties = v.iter().filter(|&&x| (x - v[best]).abs() <= 1e-12).count();
        (ties == 1).then_some(best)
    };
    let self_consistent = if l == z && solution.unique {
        match (unique_argmax(&solution.p_hat), unique_argmax(&instance.student)) {
            (Some(a), Some(b)) => Some(a == b),
            _ => None,
        }
    } else {
        None
    };
    Ok(CompatMetrics {
        letter_mass: instance.letter_mass,
        prerequisite_failed: fidelity.as_ref().is_some_and(|f| f.iter().any(|&x| x < FIDELITY_THRESHOLD)),
        fidelity,
        uniform_baseline: uniform_baseline(&instance.student, &instance.teacher)?,
        self_consistent,
    })
}

/// Exact-mode instance at `(x, prefix)`: the student is the reference
/// row, teacher rows are the exact posteriors for each feedback value, and
/// the generating weights are `P(z | x, prefix)`.
pub fn exact_instance(teacher: &Teacher<'_>, input: usize, prefix: &[usize]) -> Result<CompatInstance> {
    let lenient = Teacher {
        mode: TeacherMode::ExactPosterior,
        fallback: true,
        ..*teacher
    };
    let z = lenient.world.dims().num_feedback;
    let rows = (0..z).map(|k| lenient.next(input, prefix, k)).collect::<Result<Vec<_>>>()?;
    let mut inst = CompatInstance::new(lenient.unconditioned(input, prefix)?, rows)?;
    inst.true_posterior = Some(
        lenient
            .world
            .with_policy(lenient.reference.table())
            .feedback_marginal(input, prefix)?,
    );
    Ok(inst)
}

/// Learned-table instance: student row against softmaxed teacher rows.
pub fn learned_instance(params: &PolicyParams, input: usize, prefix: &[usize]) -> Result<CompatInstance> {
    let dims = params.dims;
    let row = dims.prefix_row(input, prefix)?;
    let rows = (0..dims.num_feedback)
        .map(|z| params.teacher_row(row, z).map(prob::softmax))
        .collect::<Result<Vec<_>>>()?;
    CompatInstance::new(params.student_next(input, prefix)?, rows)
}

/// Random instance with Dirichlet(1) rows.
pub fn random_instance(seed: u64, letters: usize, feedback: usize) -> CompatInstance {
    let mut rng = rng::stream(seed, &[rng::INSTANCE, 2]);
    let mut draw = || {
        let d: Vec<f64> = (0..letters).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = d.iter().sum();
        d.into_iter().map(|x| x / total).collect::<Vec<f64>>()
    };
    let s = draw();
    let t = (0..feedback).map(|_| draw()).collect();
    CompatInstance::new(s, t).expect("Dirichlet rows lie on the simplex")
}

/// Residual distribution over a batch of solved instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatSummary {
    pub count: usize,
    /// `(quantile, residual)` points of the empirical CDF.
    pub residual_quantiles: Vec<(f64, f64)>,
    pub median_uniform_baseline: f64,
    pub self_consistency_rate: f64,
    pub prerequisite_failures: usize,
}

pub const SUMMARY_QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

/// Nearest-rank quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn summarize(instances: &[CompatInstance]) -> Result<CompatSummary> {
    let mut residuals = Vec::with_capacity(instances.len());
    let mut baselines = Vec::with_capacity(instances.len());
    let (mut consistent, mut determinate, mut failed) = (0, 0, 0);
    for inst in instances {
        let m = compat_metrics(inst, false)?;
        residuals.push(inst.solution.as_ref().expect("checked by metrics").residual);
        baselines.push(m.uniform_baseline);
        if let Some(c) = m.self_consistent {
            determinate += 1;
            consistent += usize::from(c);
        }
        failed += usize::from(m.prerequisite_failed);
    }
    residuals.sort_by(f64::total_cmp);
    baselines.sort_by(f64::total_cmp);
    Ok(CompatSummary {
        count: instances.len(),
        residual_quantiles: SUMMARY_QUANTILES.iter().map(|&q| (q, quantile(&residuals, q))).collect(),
        median_uniform_baseline: quantile(&baselines, 0.5),
        self_consistency_rate: if determinate == 0 { f64::NAN } else { consistent as f64 / determinate as f64 },
        prerequisite_failures: failed,
    })
}
