//! Executable identities, bounds and decompositions.
//!
//! Each check returns a [`CheckReport`] with both sides and the residual;
//! [`sweep`] runs a family exhaustively over every in-support context of a
//! world. Expectations over the data prior are exact weighted sums.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, ReferenceState, Teacher, TeacherMode};
use crate::prob;
use crate::reward::{Baseline, RewardContext};
use crate::rng;
use crate::world::{Joint, Trajectory, WorldSpec};

/// Tolerance for rearrangements of the same floating-point quantities.
pub const ALGEBRAIC_TOLERANCE: f64 = 1e-12;
/// Tolerance for checks that accumulate enumeration sums.
pub const ENUMERATION_TOLERANCE: f64 = 1e-9;
/// Tolerance for the fixed-feedback KL identities.
pub const KL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// Passes iff `|lhs − rhs| ≤ tolerance`.
    Equality,
    /// Passes iff `lhs − rhs ≥ −tolerance`.
    LowerBound,
}

/// Where a check was evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckContext {
    pub world: String,
    pub input: usize,
    /// Response or prefix, depending on the check.
    pub tokens: Vec<usize>,
    pub feedback: Option<usize>,
    pub candidate: Option<usize>,
    pub lambda: Option<f64>,
}

impl fmt::Display for CheckContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self.tokens.iter().map(usize::to_string).collect();
        write!(f, "x={};y={}", self.input, tokens.join("."))?;
        if let Some(z) = self.feedback {
            write!(f, ";z={z}")?;
        }
        if let Some(v) = self.candidate {
            write!(f, ";v={v}")?;
        }
        if let Some(l) = self.lambda {
            write!(f, ";lambda={l}")?;
        }
        Ok(())
    }
}

impl CheckContext {
    /// FNV-1a of the world name and the context string.
    pub fn hash(&self) -> u64 {
        let text = format!("{}|{self}", self.world);
        text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub kind: CheckKind,
    pub passed: bool,
    pub context: CheckContext,
}

impl CheckReport {
    pub fn equality(name: &'static str, lhs: f64, rhs: f64, tolerance: f64, context: CheckContext) -> Self {
        let residual = lhs - rhs;
        CheckReport {
            name,
            lhs,
            rhs,
            residual,
            tolerance,
            kind: CheckKind::Equality,
            passed: residual.abs() <= tolerance,
            context,
        }
    }

    pub fn lower_bound(name: &'static str, lhs: f64, rhs: f64, tolerance: f64, context: CheckContext) -> Self {
        let residual = lhs - rhs;
        CheckReport {
            name,
            lhs,
            rhs,
            residual,
            tolerance,
            kind: CheckKind::LowerBound,
            passed: residual >= -tolerance,
            context,
        }
    }

    /// How far the check is from failing in the wrong direction.
    pub fn violation(&self) -> f64 {
        match self.kind {
            CheckKind::Equality => self.residual.abs(),
            CheckKind::LowerBound => (-self.residual).max(0.0),
        }
    }
}

/// A world with a student and a reference, ready for exact checks.
#[derive(Debug, Clone)]
pub struct ExactLab {
    pub world: WorldSpec,
    pub params: PolicyParams,
    pub reference: ReferenceState,
    /// How the teacher conditions; learned-table reads the reference's
    /// teacher logits.
    pub mode: TeacherMode,
}

impl ExactLab {
    /// Student and reference both equal to the world's policy (`π_ref = π_θ`).
    pub fn new(world: WorldSpec) -> Self {
        let params = PolicyParams::from_world(&world);
        let reference = ReferenceState::new(&params, 1.0).expect("unit rate is valid");
        ExactLab { world, params, reference, mode: TeacherMode::ExactPosterior }
    }

    /// A student that performed `updates` random-walk steps on its logits
    /// (standard deviation `step` per entry), tracked by an EMA reference at
    /// `rate`; the reference lags the student.
    pub fn drifted(world: WorldSpec, rate: f64, updates: usize, step: f64, seed: u64) -> Result<Self> {
        let mut params = PolicyParams::from_world(&world);
        let mut reference = ReferenceState::new(&params, rate)?;
        let mut rng = rng::stream(seed, &[rng::INSTANCE, 1]);
        for _ in 0..updates {
            for l in params.student_logits.iter_mut() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *l += step * noise;
            }
            params.clip();
            params.version += 1;
            reference.ema_update(&params)?;
        }
        Ok(ExactLab { world, params, reference, mode: TeacherMode::ExactPosterior })
    }

    /// A lab from checkpointed state, e.g. a trained learned-table teacher.
    pub fn from_state(world: WorldSpec, params: PolicyParams, reference: ReferenceState, mode: TeacherMode) -> Result<Self> {
        if params.dims != world.dims() {
            return Err(Error::ShapeMismatch(format!("params {:?} vs world {:?}", params.dims, world.dims())));
        }
        if mode == TeacherMode::LearnedTable && reference.logits().teacher_logits.is_none() {
            return Err(Error::MissingTeacherLogits);
        }
        Ok(ExactLab { world, params, reference, mode })
    }

    pub fn teacher(&self) -> Teacher<'_> {
        Teacher { mode: self.mode, ..Teacher::exact(&self.reference, &self.world) }
    }

    pub fn ctx(&self) -> RewardContext<'_> {
        RewardContext::new(&self.params, self.teacher())
    }

    /// The joint the teacher conditions: world channel, reference policy.
    pub fn joint(&self) -> Joint<'_> {
        self.world.with_policy(self.reference.table())
    }

    fn context(&self, input: usize, tokens: &[usize], feedback: Option<usize>) -> CheckContext {
        CheckContext {
            world: self.world.name().to_string(),
            input,
            tokens: tokens.to_vec(),
            feedback,
            candidate: None,
            lambda: None,
        }
    }

    /// `(y, z)` pairs with positive probability under the teacher's joint.
    fn in_support_pairs(&self, input: usize) -> Result<Vec<(Vec<usize>, usize, f64)>> {
        let joint = self.joint();
        let mut out = Vec::new();
        joint.for_each_completion(input, &[], |y, p| {
            if p > 0.0 {
                let row = joint.channel_row(input, y).expect("enumerated response");
                for (z, &c) in row.iter().enumerate() {
                    if c > 0.0 {
                        out.push((y.to_vec(), z, p * c));
                    }
                }
            }
        })?;
        Ok(out)
    }

    /// Feedback values with positive probability after `prefix`, provided the
    /// prefix itself is reachable.
    fn in_support_feedback(&self, input: usize, prefix: &[usize]) -> Result<Vec<usize>> {
        let joint = self.joint();
        let reach = (0..prefix.len()).try_fold(1.0, |acc, t| {
            Ok::<_, Error>(acc * joint.policy().row(input, &prefix[..t])?[prefix[t]])
        })?;
        if reach <= 0.0 {
            return Ok(Vec::new());
        }
        let marginal = joint.feedback_marginal(input, prefix)?;
        Ok((0..marginal.len()).filter(|&z| marginal[z] > 0.0).collect())
    }
}

fn realized_sum(lab: &ExactLab, input: usize, response: &[usize], feedback: usize) -> Result<f64> {
    let mut traj = Trajectory::new(lab.world.dims(), input, response.to_vec(), feedback)?;
    lab.ctx().sd_reward(&mut traj)?;
    Ok(traj.realized_sum().expect("rewards were filled"))
}

/// `Σ_t r_t(y_t) = pmi(x, y, z)`.
pub fn check_telescoping(lab: &ExactLab, input: usize, response: &[usize], feedback: usize) -> Result<CheckReport> {
    let lhs = realized_sum(lab, input, response, feedback)?;
    let rhs = lab.world.pmi(input, response, feedback)?;
    Ok(CheckReport::equality(
        "telescoping",
        lhs,
        rhs,
        ENUMERATION_TOLERANCE,
        lab.context(input, response, Some(feedback)),
    ))
}

/// For fixed `z`: `E_π[r] = −KL(π ‖ q) ≤ 0` and `E_q[r] = KL(q ‖ π) ≥ 0`.
pub fn check_sign_expectations(lab: &ExactLab, input: usize, prefix: &[usize], feedback: usize) -> Result<[CheckReport; 2]> {
    let r = lab.ctx().sd_row(input, prefix, feedback)?;
    let student = lab.params.student_next(input, prefix)?;
    let teacher = lab.teacher().next(input, prefix, feedback)?;
    let context = lab.context(input, prefix, Some(feedback));

    let prior = prob::expectation(&student, &r);
    let mut a = CheckReport::equality(
        "prior-expectation",
        prior,
        -prob::kl_divergence(&student, &teacher),
        KL_TOLERANCE,
        context.clone(),
    );
    a.passed &= prior <= KL_TOLERANCE;

    let posterior = prob::expectation(&teacher, &r);
    let mut b = CheckReport::equality(
        "posterior-expectation",
        posterior,
        prob::kl_divergence(&teacher, &student),
        KL_TOLERANCE,
        context,
    );
    b.passed &= posterior >= -KL_TOLERANCE;
    Ok([a, b])
}

/// `E_{(Y,Z)|x}[Σ_t r_t] = I(Y; Z | X = x)`.
pub fn check_mi_expectation(lab: &ExactLab, input: usize) -> Result<CheckReport> {
    let joint = lab.joint();
    let marginal = joint.feedback_marginal(input, &[])?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (y, z, weight) in lab.in_support_pairs(input)? {
        lhs += weight * realized_sum(lab, input, &y, z)?;
        let c = joint.channel_row(input, &y)?[z];
        rhs += weight * (c.ln() - marginal[z].ln());
    }
    Ok(CheckReport::equality(
        "mi-expectation",
        lhs,
        rhs,
        ENUMERATION_TOLERANCE,
        lab.context(input, &[], None),
    ))
}

/// `E[r_t | x, y<t] = I(Y_t; Z | x, y<t)`.
pub fn check_mi_chain(lab: &ExactLab, input: usize, prefix: &[usize]) -> Result<CheckReport> {
    let joint = lab.joint();
    let ctx = lab.ctx();
    let marginal = joint.feedback_marginal(input, prefix)?;
    let row = joint.policy().row(input, prefix)?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut extended = prefix.to_vec();
    for z in (0..marginal.len()).filter(|&z| marginal[z] > 0.0) {
        let r = ctx.sd_row(input, prefix, z)?;
        for (v, &p) in row.iter().enumerate() {
            extended.push(v);
            let lik = joint.feedback_marginal(input, &extended)?[z];
            extended.pop();
            let w = p * lik;
            if w > 0.0 {
                lhs += w * r[v];
                rhs += w * (lik.ln() - marginal[z].ln());
            }
        }
    }
    Ok(CheckReport::equality(
        "mi-chain",
        lhs,
        rhs,
        ENUMERATION_TOLERANCE,
        lab.context(input, prefix, None),
    ))
}

/// `E_{x'~D}[Ŝ_t] ≥ pCMI`, with the left side in closed form.
pub fn check_jensen_bound(lab: &ExactLab, input: usize, prefix: &[usize], feedback: usize, candidate: usize) -> Result<CheckReport> {
    let ctx = lab.ctx();
    let (s, _) = ctx.decompose_s_g(input, prefix, feedback, candidate)?;
    let pcmi = ctx.pcmi(input, prefix, feedback, candidate)?;
    let mut context = lab.context(input, prefix, Some(feedback));
    context.candidate = Some(candidate);
    Ok(CheckReport::lower_bound("jensen", s, pcmi, ALGEBRAIC_TOLERANCE, context))
}

/// Telescoped CREDIT with the exact prior baseline:
/// `Σ_t R_t = pmi(x) − λ E_{x'}[pmi(x')] + λ E_{x'}[−ln π(y | x')]`,
/// plus non-negativity of the last (anti-genericity) term.
pub fn check_credit_sequence(
    lab: &ExactLab,
    input: usize,
    response: &[usize],
    feedback: usize,
    lambda: f64,
) -> Result<[CheckReport; 2]> {
    let mut traj = Trajectory::new(lab.world.dims(), input, response.to_vec(), feedback)?;
    lab.ctx().credit_reward(&mut traj, &Baseline::Prior, lambda)?;
    let lhs = traj.realized_sum().expect("rewards were filled");

    let mut generic_pmi = 0.0;
    let mut surprisal = 0.0;
    for (id, &d) in lab.world.input_prior().iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        generic_pmi += d * lab.world.pmi(id, response, feedback)?;
        let student: f64 = (0..response.len())
            .map(|t| lab.params.student_next(id, &response[..t]).map(|p| p[response[t]].ln()))
            .sum::<Result<f64>>()?;
        surprisal -= d * student;
    }
    let anti = lambda * surprisal;
    let rhs = lab.world.pmi(input, response, feedback)? - lambda * generic_pmi + anti;

    let mut context = lab.context(input, response, Some(feedback));
    context.lambda = Some(lambda);
    Ok([
        CheckReport::equality("credit-sequence", lhs, rhs, ENUMERATION_TOLERANCE, context.clone()),
        CheckReport::lower_bound("anti-genericity", anti, 0.0, 0.0, context),
    ])
}

/// `r_t(v) = term_i(v) + term_ii(v)` with
/// `term_i = ln q_ref(v | z) − ln π_ref(v)`, `term_ii = ln π_ref(v) − ln π_θ(v)`,
/// and `max_v |term_ii| ≤ max(D∞(π_ref ‖ π_θ), D∞(π_θ ‖ π_ref))`.
pub fn check_gap_decomposition(lab: &ExactLab, input: usize, prefix: &[usize], feedback: usize) -> Result<[CheckReport; 2]> {
    let teacher = lab.teacher();
    let r = lab.ctx().sd_row(input, prefix, feedback)?;
    let q = teacher.next(input, prefix, feedback)?;
    let reference = teacher.unconditioned(input, prefix)?;
    let student = lab.params.student_next(input, prefix)?;

    let mut worst_sum: (f64, f64) = (0.0, 0.0);
    let mut max_term_ii: f64 = 0.0;
    for v in 0..r.len() {
        let term_i = prob::floored_ln(q[v]) - reference[v].ln();
        let term_ii = reference[v].ln() - student[v].ln();
        let sum = term_i + term_ii;
        if (r[v] - sum).abs() >= (worst_sum.0 - worst_sum.1).abs() {
            worst_sum = (r[v], sum);
        }
        max_term_ii = max_term_ii.max(term_ii.abs());
    }
    let bound = renyi_inf(&reference, &student).max(renyi_inf(&student, &reference));
    let context = lab.context(input, prefix, Some(feedback));
    Ok([
        CheckReport::equality("gap-additivity", worst_sum.0, worst_sum.1, ALGEBRAIC_TOLERANCE, context.clone()),
        CheckReport::lower_bound("gap-renyi-bound", bound, max_term_ii, ALGEBRAIC_TOLERANCE, context),
    ])
}

/// `D∞(p ‖ q) = max_{p>0} ln(p / q)`.
pub fn renyi_inf(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a.ln() - prob::floored_ln(b))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The single-contrast estimator `Ĝ_t` averaged over every admissible
/// `x' ≠ x` (prior-weighted) equals the restricted exact `G_t`.
pub fn check_g_estimator_unbiased(lab: &ExactLab, input: usize, prefix: &[usize], feedback: usize) -> Result<CheckReport> {
    let ctx = lab.ctx();
    let exact = ctx.generic_baseline(input, prefix, feedback, &Baseline::PriorExcluding)?;
    let mut mean = vec![0.0; exact.len()];
    for (id, w) in ctx.contrast_weights(input, &Baseline::PriorExcluding)? {
        let g = ctx.generic_baseline(input, prefix, feedback, &Baseline::Sampled(vec![id]))?;
        for (m, gv) in mean.iter_mut().zip(g) {
            *m += w * gv;
        }
    }
    let worst = (0..exact.len())
        .max_by(|&a, &b| (mean[a] - exact[a]).abs().total_cmp(&(mean[b] - exact[b]).abs()))
        .unwrap_or(0);
    let mut context = lab.context(input, prefix, Some(feedback));
    context.candidate = Some(worst);
    Ok(CheckReport::equality("g-estimator", mean[worst], exact[worst], ALGEBRAIC_TOLERANCE, context))
}

/// `ln q = S + G` and `r_t = S + G − ln π`.
pub fn check_sg_reconstruction(
    lab: &ExactLab,
    input: usize,
    prefix: &[usize],
    feedback: usize,
    candidate: usize,
) -> Result<[CheckReport; 2]> {
    let ctx = lab.ctx();
    let (s, g) = ctx.decompose_s_g(input, prefix, feedback, candidate)?;
    let lq = prob::floored_ln(lab.teacher().next(input, prefix, feedback)?[candidate]);
    let r = ctx.sd_row(input, prefix, feedback)?[candidate];
    let ls = lab.params.student_next(input, prefix)?[candidate].ln();
    let mut context = lab.context(input, prefix, Some(feedback));
    context.candidate = Some(candidate);
    Ok([
        CheckReport::equality("sg-teacher", lq, s + g, ALGEBRAIC_TOLERANCE, context.clone()),
        CheckReport::equality("sg-reward", r, s + g - ls, ALGEBRAIC_TOLERANCE, context),
    ])
}

/// Check families run by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Telescoping,
    SignExpectation,
    MiExpectation,
    SgReconstruction,
    Jensen,
    CreditSequence,
    GapDecomposition,
    GEstimator,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Telescoping,
        Family::SignExpectation,
        Family::MiExpectation,
        Family::SgReconstruction,
        Family::Jensen,
        Family::CreditSequence,
        Family::GapDecomposition,
        Family::GEstimator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Telescoping => "telescoping",
            Family::SignExpectation => "sign-expectation",
            Family::MiExpectation => "mi-expectation",
            Family::SgReconstruction => "sg-reconstruction",
            Family::Jensen => "jensen",
            Family::CreditSequence => "credit-sequence",
            Family::GapDecomposition => "gap-decomposition",
            Family::GEstimator => "g-estimator",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown check family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    /// λ values for the credit-sequence family.
    pub lambdas: Vec<f64>,
    /// Replaces every report's tolerance when set.
    pub tolerance: Option<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            lambdas: vec![0.0, 0.1, 1.0],
            tolerance: None,
        }
    }
}

/// Run one family over every in-support context of the lab's world.
pub fn sweep(lab: &ExactLab, family: Family, options: &SweepOptions) -> Result<Vec<CheckReport>> {
    let dims = lab.world.dims();
    let mut out = Vec::new();
    for x in 0..dims.num_inputs {
        match family {
            Family::Telescoping => {
                for (y, z, _) in lab.in_support_pairs(x)? {
                    out.push(check_telescoping(lab, x, &y, z)?);
                }
            }
            Family::CreditSequence => {
                for (y, z, _) in lab.in_support_pairs(x)? {
                    for &lambda in &options.lambdas {
                        out.extend(check_credit_sequence(lab, x, &y, z, lambda)?);
                    }
                }
            }
            Family::MiExpectation => {
                out.push(check_mi_expectation(lab, x)?);
                for prefix in dims.prefixes() {
                    if !lab.in_support_feedback(x, &prefix)?.is_empty() {
                        out.push(check_mi_chain(lab, x, &prefix)?);
                    }
                }
            }
            _ => {
                for prefix in dims.prefixes() {
                    for z in lab.in_support_feedback(x, &prefix)? {
                        match family {
                            Family::SignExpectation => out.extend(check_sign_expectations(lab, x, &prefix, z)?),
                            Family::GapDecomposition => out.extend(check_gap_decomposition(lab, x, &prefix, z)?),
                            Family::GEstimator => {
                                if dims.num_inputs >= 2 {
                                    out.push(check_g_estimator_unbiased(lab, x, &prefix, z)?);
                                }
                            }
                            Family::Jensen | Family::SgReconstruction => {
                                for v in 0..dims.vocab_size {
                                    if family == Family::Jensen {
                                        out.push(check_jensen_bound(lab, x, &prefix, z, v)?);
                                    } else {
                                        out.extend(check_sg_reconstruction(lab, x, &prefix, z, v)?);
                                    }
                                }
                            }
                            _ => unreachable!("handled above"),
                        }
                    }
                }
            }
        }
    }
    if let Some(tol) = options.tolerance {
        for r in &mut out {
            r.tolerance = tol;
            r.passed = match r.kind {
                CheckKind::Equality => r.residual.abs() <= tol,
                CheckKind::LowerBound => r.residual >= -tol,
            };
        }
    }
    Ok(out)
}

/// Aggregate of one check name.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: &'static str,
    pub checks: usize,
    pub failures: usize,
    /// Largest `|residual|` for equalities, largest violation for bounds.
    pub max_violation: f64,
    /// Largest slack `lhs − rhs` (bounds only).
    pub max_slack: Option<f64>,
}

pub fn summarize(reports: &[CheckReport]) -> Vec<Summary> {
    let mut out: Vec<Summary> = Vec::new();
    for r in reports {
        let idx = match out.iter().position(|s| s.name == r.name) {
            Some(i) => i,
            None => {
                out.push(Summary {
                    name: r.name,
                    checks: 0,
                    failures: 0,
                    max_violation: 0.0,
                    max_slack: None,
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.checks += 1;
        s.failures += usize::from(!r.passed);
        s.max_violation = s.max_violation.max(r.violation());
        if r.kind == CheckKind::LowerBound {
            s.max_slack = Some(s.max_slack.map_or(r.residual, |m| m.max(r.residual)));
        }
    }
    out
}
