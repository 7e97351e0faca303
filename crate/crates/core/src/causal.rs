//! Interventional credit on verifier worlds.
//!
//! With history `h = (x, y<t)` and a candidate `v` for the next token,
//! `p(v; h) = P(O = 1 | do(Y_t = v), h)` is the success probability of
//! forcing `v` and continuing under `π`. Tabular worlds have no hidden state
//! beyond the prefix, so consistency and sequential ignorability hold by
//! construction and the intervention reduces to conditioning:
//! `p(v; h) = P(O = 1 | h·v)`.
//!
//! The ideal credit is `r_cf(v) = ln p(v; h) − ln P(O = 1 | h)`. Under an
//! outcome-sufficient channel `P(z | O = b, h) = q_b(z)`, the feedback
//! likelihood is affine in `p`: `P(z | v, h) = q0 + (q1 − q0) · p(v; h)`.
//!
//! Logs here are exact: a candidate that cannot succeed has `r_cf = −∞`, and
//! two `−∞` values count as equal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::index::Dims;
use crate::prob;
use crate::rng;
use crate::world::{w_rand_with, WorldSpec};

/// Band inside which two rewards are treated as tied.
pub const TIE_BAND: f64 = 1e-12;
pub const WITNESS_TOLERANCE: f64 = 1e-10;

/// `P(z | O = 1)` and `P(z | O = 0)`, independent of the candidate token.
#[derive(Debug, Clone, PartialEq)]
pub struct OsfChannel {
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
}

impl OsfChannel {
    pub fn new(q1: Vec<f64>, q0: Vec<f64>) -> Result<Self> {
        if q1.len() != q0.len() || q1.is_empty() {
            return Err(Error::ShapeMismatch("q1 and q0 must have the same nonzero length".into()));
        }
        for q in [&q1, &q0] {
            if q.iter().any(|p| !(0.0..=1.0).contains(p)) || prob::row_sum_error(q) > 1e-12 {
                return Err(Error::InvalidDistribution(format!("{q:?} is not a distribution")));
            }
        }
        Ok(OsfChannel { q1, q0 })
    }

    /// Binary feedback with `P(z = 1 | O = 1) = a` and `P(z = 1 | O = 0) = b`.
    pub fn binary(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![1.0 - a, a], vec![1.0 - b, b])
    }

    /// `q1[z] > q0[z]`.
    pub fn positively_informative(&self, feedback: usize) -> bool {
        self.q1[feedback] > self.q0[feedback]
    }
}

fn require_outcome(world: &WorldSpec) -> Result<()> {
    if !world.has_outcome_map() {
        return Err(Error::MissingOutcomeMap);
    }
    Ok(())
}

/// `p(v; h)`: force `candidate` after the prefix and enumerate continuations.
pub fn success_prob_do(world: &WorldSpec, input: usize, prefix: &[usize], candidate: usize) -> Result<f64> {
    require_outcome(world)?;
    world.dims().check_token(candidate)?;
    let mut forced = prefix.to_vec();
    forced.push(candidate);
    world.success_probability(input, &forced)
}

/// `ln p(v; h) − ln P(O = 1 | h)`.
pub fn rcf(world: &WorldSpec, input: usize, prefix: &[usize], candidate: usize) -> Result<f64> {
    let base = world.success_probability(input, prefix)?;
    let forced = success_prob_do(world, input, prefix, candidate)?;
    if base <= 0.0 || forced <= 0.0 {
        return Err(Error::NullEvent(format!(
            "log-uplift undefined: P(O=1 | h) = {base}, p(v={candidate}; h) = {forced}"
        )));
    }
    Ok(forced.ln() - base.ln())
}

/// `π⁺(v | h) = π(v | h) · p(v; h) / P(O = 1 | h)`.
pub fn success_teacher(world: &WorldSpec, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
    let base = world.success_probability(input, prefix)?;
    if base <= 0.0 {
        return Err(Error::NullEvent(format!("P(O=1 | x={input}, prefix={prefix:?}) = 0")));
    }
    let row = world.policy_row(input, prefix)?.to_vec();
    row.iter()
        .enumerate()
        .map(|(v, &p)| Ok(p * success_prob_do(world, input, prefix, v)? / base))
        .collect()
}

/// Replace the feedback channel with `q_{O(x, y)}` for every response.
pub fn attach_osf_feedback(world: &WorldSpec, channel: &OsfChannel) -> Result<WorldSpec> {
    require_outcome(world)?;
    let dims = world.dims();
    let mut table = Vec::with_capacity(dims.num_inputs * dims.num_responses() * channel.q1.len());
    for x in 0..dims.num_inputs {
        for y in dims.responses() {
            table.extend(if world.outcome(x, &y)? { &channel.q1 } else { &channel.q0 });
        }
    }
    world.with_channel(&format!("{}+osf", world.name()), table, channel.q1.len(), true)
}

/// `(q0 + (q1 − q0)·p, P(z | h·v) by enumeration)`.
pub fn affine_feedback(
    world: &WorldSpec,
    channel: &OsfChannel,
    input: usize,
    prefix: &[usize],
    candidate: usize,
    feedback: usize,
) -> Result<(f64, f64)> {
    let p = success_prob_do(world, input, prefix, candidate)?;
    let affine = channel.q0[feedback] + (channel.q1[feedback] - channel.q0[feedback]) * p;
    let mut forced = prefix.to_vec();
    forced.push(candidate);
    Ok((affine, world.feedback_marginal(input, &forced)?[feedback]))
}

/// Exact-posterior self-distillation reward row with `π_ref = π_θ = π`:
/// `ln π(v | h, z) − ln π(v | h)`, exact logs.
pub fn rz_row(world: &WorldSpec, input: usize, prefix: &[usize], feedback: usize) -> Result<Vec<f64>> {
    let post = world.posterior_next_token(input, prefix, feedback)?;
    let prior = world.policy_row(input, prefix)?;
    Ok(post.iter().zip(prior).map(|(q, p)| q.ln() - p.ln()).collect())
}

/// `r_cf` for every candidate, `−∞` where success is impossible.
pub fn rcf_row(world: &WorldSpec, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
    let base = world.success_probability(input, prefix)?;
    if base <= 0.0 {
        return Err(Error::NullEvent(format!("P(O=1 | x={input}, prefix={prefix:?}) = 0")));
    }
    (0..world.dims().vocab_size)
        .map(|v| Ok(success_prob_do(world, input, prefix, v)?.ln() - base.ln()))
        .collect()
}

/// Distance with `−∞ = −∞`.
fn gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

/// Ordering with the tie band; equal infinities tie.
fn compare(a: f64, b: f64) -> std::cmp::Ordering {
    if a == b || (a - b).abs() < TIE_BAND {
        std::cmp::Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalStatus {
    Pass,
    Fail,
    PreconditionNotMet,
}

impl CausalStatus {
    pub fn name(self) -> &'static str {
        match self {
            CausalStatus::Pass => "pass",
            CausalStatus::Fail => "fail",
            CausalStatus::PreconditionNotMet => "precondition-not-met",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalReport {
    pub name: &'static str,
    pub world: String,
    pub input: usize,
    pub prefix: Vec<usize>,
    pub feedback: usize,
    pub status: CausalStatus,
    /// Largest gap or number of disagreeing pairs, depending on the check.
    pub value: f64,
}

impl CausalReport {
    fn new(name: &'static str, world: &WorldSpec, input: usize, prefix: &[usize], feedback: usize) -> Self {
        CausalReport {
            name,
            world: world.name().to_string(),
            input,
            prefix: prefix.to_vec(),
            feedback,
            status: CausalStatus::PreconditionNotMet,
            value: 0.0,
        }
    }
}

/// Every candidate pair orders the same under `r_z` and `r_cf`; `value` is
/// the number of disagreeing pairs.
pub fn check_rank_preservation(
    world: &WorldSpec,
    channel: &OsfChannel,
    input: usize,
    prefix: &[usize],
    feedback: usize,
) -> Result<CausalReport> {
    let mut report = CausalReport::new("rank-preservation", world, input, prefix, feedback);
    world.dims().check_feedback(feedback)?;
    if !channel.positively_informative(feedback)
        || world.success_probability(input, prefix)? <= 0.0
        || world.feedback_marginal(input, prefix)?[feedback] <= 0.0
    {
        return Ok(report);
    }
    let rz = rz_row(world, input, prefix, feedback)?;
    let rc = rcf_row(world, input, prefix)?;
    let mut disagreements = 0;
    for u in 0..rz.len() {
        for v in u + 1..rz.len() {
            if compare(rz[u], rz[v]) != compare(rc[u], rc[v]) {
                disagreements += 1;
            }
        }
    }
    report.value = disagreements as f64;
    report.status = if disagreements == 0 { CausalStatus::Pass } else { CausalStatus::Fail };
    Ok(report)
}

/// `max_v |r_z(v) − r_cf(v)|` at observed success feedback.
pub fn check_one_sided_witness(world: &WorldSpec, input: usize, prefix: &[usize], feedback: usize) -> Result<CausalReport> {
    let mut report = CausalReport::new("one-sided-witness", world, input, prefix, feedback);
    let rz = rz_row(world, input, prefix, feedback)?;
    let rc = rcf_row(world, input, prefix)?;
    report.value = rz.iter().zip(&rc).map(|(&a, &b)| gap(a, b)).fold(0.0, f64::max);
    report.status = if report.value <= WITNESS_TOLERANCE { CausalStatus::Pass } else { CausalStatus::Fail };
    Ok(report)
}

/// `r_z(v) − r_cf(v) = pmi(v; Z = z | h) − pmi(v; O = 1 | h)` for every
/// candidate that can succeed; `value` is the largest residual.
pub fn check_gap_pmi(world: &WorldSpec, input: usize, prefix: &[usize], feedback: usize) -> Result<CausalReport> {
    let mut report = CausalReport::new("gap-pmi", world, input, prefix, feedback);
    if world.success_probability(input, prefix)? <= 0.0 || world.feedback_marginal(input, prefix)?[feedback] <= 0.0 {
        return Ok(report);
    }
    let rz = rz_row(world, input, prefix, feedback)?;
    let rc = rcf_row(world, input, prefix)?;
    let pz = world.feedback_marginal(input, prefix)?[feedback];
    let po = world.success_probability(input, prefix)?;
    let mut worst: f64 = 0.0;
    let mut forced = prefix.to_vec();
    for v in 0..rz.len() {
        let p = success_prob_do(world, input, prefix, v)?;
        forced.push(v);
        let lik = world.feedback_marginal(input, &forced)?[feedback];
        forced.pop();
        if p <= 0.0 || lik <= 0.0 {
            continue;
        }
        let pmi_z = lik.ln() - pz.ln();
        let pmi_o = p.ln() - po.ln();
        worst = worst.max(((rz[v] - rc[v]) - (pmi_z - pmi_o)).abs());
    }
    report.value = worst;
    report.status = if worst <= TIE_BAND { CausalStatus::Pass } else { CausalStatus::Fail };
    Ok(report)
}

/// Affine identity and positive slope of `P(z | v, h)` in `p(v; h)`.
pub fn check_affine(
    world: &WorldSpec,
    channel: &OsfChannel,
    input: usize,
    prefix: &[usize],
    feedback: usize,
) -> Result<CausalReport> {
    let mut report = CausalReport::new("affine", world, input, prefix, feedback);
    let mut worst: f64 = 0.0;
    for v in 0..world.dims().vocab_size {
        let (a, e) = affine_feedback(world, channel, input, prefix, v, feedback)?;
        worst = worst.max((a - e).abs());
    }
    report.value = worst;
    let slope_ok = !channel.positively_informative(feedback) || channel.q1[feedback] - channel.q0[feedback] > 0.0;
    report.status = if worst <= TIE_BAND && slope_ok { CausalStatus::Pass } else { CausalStatus::Fail };
    Ok(report)
}

/// Prefixes (of length `< T`) reachable with positive probability.
pub fn reachable_prefixes(world: &WorldSpec, input: usize) -> Result<Vec<Vec<usize>>> {
    let dims = world.dims();
    let mut out = Vec::new();
    for prefix in dims.prefixes() {
        let mut reach = 1.0;
        for t in 0..prefix.len() {
            reach *= world.policy_row(input, &prefix[..t])?[prefix[t]];
        }
        if reach > 0.0 {
            out.push(prefix);
        }
    }
    Ok(out)
}

/// Which causal families a sweep runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSweep {
    /// Run the one-sided witness on the base world with this success feedback.
    pub witness_feedback: Option<usize>,
    /// OSF channels to attach; each runs rank preservation, gap-pmi and affine.
    pub channels: Vec<OsfChannel>,
}

/// Run every selected check over every reachable prefix of every input.
pub fn sweep(world: &WorldSpec, plan: &CausalSweep) -> Result<Vec<CausalReport>> {
    require_outcome(world)?;
    let dims = world.dims();
    let mut out = Vec::new();
    if let Some(z) = plan.witness_feedback {
        for x in 0..dims.num_inputs {
            for prefix in reachable_prefixes(world, x)? {
                if world.success_probability(x, &prefix)? > 0.0 {
                    out.push(check_one_sided_witness(world, x, &prefix, z)?);
                }
            }
        }
    }
    for channel in &plan.channels {
        let osf = attach_osf_feedback(world, channel)?;
        for x in 0..dims.num_inputs {
            for prefix in reachable_prefixes(&osf, x)? {
                for z in 0..channel.q1.len() {
                    out.push(check_affine(&osf, channel, x, &prefix, z)?);
                    out.push(check_rank_preservation(&osf, channel, x, &prefix, z)?);
                    out.push(check_gap_pmi(&osf, x, &prefix, z)?);
                }
            }
        }
    }
    Ok(out)
}

/// `(pass, precondition-not-met, fail)` counts.
pub fn tally(reports: &[CausalReport]) -> (usize, usize, usize) {
    reports.iter().fold((0, 0, 0), |(p, n, f), r| match r.status {
        CausalStatus::Pass => (p + 1, n, f),
        CausalStatus::PreconditionNotMet => (p, n + 1, f),
        CausalStatus::Fail => (p, n, f + 1),
    })
}

/// A random world with a random outcome map and binary verifier feedback.
pub fn random_verifier(seed: u64, dims: Dims) -> Result<WorldSpec> {
    let base = w_rand_with(seed, Dims { num_feedback: 2, ..dims });
    let mut rng = rng::stream(seed, &[rng::INSTANCE, 3]);
    let n = dims.num_inputs * dims.num_responses();
    let outcome: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    let mut file = base.file().clone();
    file.name = format!("verifier:{seed}");
    file.binary_verifier = true;
    file.deterministic = true;
    file.success_feedback = Some(1);
    file.tables.feedback_channel = outcome.iter().flat_map(|&o| [1.0 - f64::from(o), f64::from(o)]).collect();
    file.tables.outcome_map = Some(outcome);
    // The floored policy of the base world is strictly positive.
    file.tables.policy_table = base.policy().as_slice().to_vec();
    file.tables.input_prior = base.input_prior().to_vec();
    WorldSpec::from_file(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{w_verify, VERIFY_TARGETS};

    #[test]
    fn do_cases() {
        let world = w_verify();
        for x in 0..2 {
            let [a, b] = VERIFY_TARGETS[x];
            let p = success_prob_do(&world, x, &[], a).unwrap();
            assert!((p - world.policy_row(x, &[a]).unwrap()[b]).abs() < 1e-15);
            assert_eq!(success_prob_do(&world, x, &[], 1 - a).unwrap(), 0.0);
            assert_eq!(success_prob_do(&world, x, &[1 - a], a).unwrap(), 0.0);
            assert_eq!(success_prob_do(&world, x, &[], a).unwrap(), world.success_probability(x, &[a]).unwrap());
        }
        assert!(matches!(success_prob_do(&crate::world::w_ind(), 0, &[], 0), Err(Error::MissingOutcomeMap)));
    }

    #[test]
    fn rcf_cases() {
        let world = w_verify();
        let r = rcf(&world, 0, &[], 0).unwrap();
        let want = world.policy_row(0, &[0]).unwrap()[0].ln() - world.success_probability(0, &[]).unwrap().ln();
        assert!((r - want).abs() < 1e-12);
        // Identification: log-uplift = ln π⁺ − ln π.
        let plus = success_teacher(&world, 0, &[]).unwrap();
        assert!((r - (plus[0].ln() - world.policy_row(0, &[]).unwrap()[0].ln())).abs() < 1e-12);
        assert!(matches!(rcf(&world, 0, &[], 1), Err(Error::NullEvent(_))));
        let p = world.policy_row(1, &[1]).unwrap()[1];
        assert!((rcf(&world, 1, &[1], 1).unwrap() + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn success_teacher_cases() {
        let world = w_verify();
        let plus = success_teacher(&world, 1, &[]).unwrap();
        assert_eq!(plus[0], 0.0);
        assert!((plus.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let osf = random_verifier(4, Dims::new(1, 3, 2, 2)).unwrap();
        for prefix in reachable_prefixes(&osf, 0).unwrap() {
            if osf.success_probability(0, &prefix).unwrap() > 0.0 {
                let plus = success_teacher(&osf, 0, &prefix).unwrap();
                assert!((plus.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn osf_cases() {
        let world = w_verify();
        let flat = attach_osf_feedback(&world, &OsfChannel::binary(0.3, 0.3).unwrap()).unwrap();
        for y in flat.dims().responses() {
            assert!(flat.pmi(0, &y, 1).unwrap().abs() < 1e-12);
        }

        let exact = attach_osf_feedback(&world, &OsfChannel::binary(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(exact.channel(), world.channel());

        let ch = OsfChannel::binary(0.9, 0.2).unwrap();
        let noisy = attach_osf_feedback(&world, &ch).unwrap();
        for x in 0..2 {
            for prefix in reachable_prefixes(&noisy, x).unwrap() {
                for v in 0..2 {
                    let (a, e) = affine_feedback(&noisy, &ch, x, &prefix, v, 1).unwrap();
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
        assert!(OsfChannel::new(vec![0.5, 0.6], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn rank_cases() {
        let world = w_verify();
        let ch = OsfChannel::binary(0.9, 0.2).unwrap();
        let osf = attach_osf_feedback(&world, &ch).unwrap();
        let reports = sweep(&world, &CausalSweep { witness_feedback: None, channels: vec![ch.clone()] }).unwrap();
        let rank: Vec<_> = reports.iter().filter(|r| r.name == "rank-preservation" && r.feedback == 1).collect();
        assert!(rank.iter().all(|r| r.status != CausalStatus::Fail));
        assert!(rank.iter().any(|r| r.status == CausalStatus::Pass));
        // Prefixes that cannot succeed have no log-uplift.
        assert_eq!(check_rank_preservation(&osf, &ch, 0, &[1], 1).unwrap().status, CausalStatus::PreconditionNotMet);
        assert_eq!(check_rank_preservation(&osf, &ch, 0, &[], 0).unwrap().status, CausalStatus::PreconditionNotMet);

        let flat = OsfChannel::binary(0.5, 0.5).unwrap();
        let osf = attach_osf_feedback(&world, &flat).unwrap();
        assert_eq!(check_rank_preservation(&osf, &flat, 0, &[], 1).unwrap().status, CausalStatus::PreconditionNotMet);
    }

    #[test]
    fn witness_cases() {
        let world = w_verify();
        let reports = sweep(&world, &CausalSweep { witness_feedback: Some(1), channels: vec![] }).unwrap();
        assert!(!reports.is_empty());
        assert!(reports.iter().all(|r| r.status == CausalStatus::Pass));

        let near = attach_osf_feedback(&world, &OsfChannel::binary(1.0, 0.05).unwrap()).unwrap();
        let r = check_one_sided_witness(&near, 0, &[], 1).unwrap();
        assert!(r.value > 1e-3);
    }

    #[test]
    fn success_certain_gives_zero_rewards() {
        // A verifier where every response of input 0 succeeds.
        let mut file = w_verify().file().clone();
        let outcome = file.tables.outcome_map.as_mut().unwrap();
        outcome[..4].iter_mut().for_each(|o| *o = 1);
        for i in 0..4 {
            file.tables.feedback_channel[2 * i] = 0.0;
            file.tables.feedback_channel[2 * i + 1] = 1.0;
        }
        let world = WorldSpec::from_file(file).unwrap();
        let rz = rz_row(&world, 0, &[], 1).unwrap();
        let rc = rcf_row(&world, 0, &[]).unwrap();
        assert!(rz.iter().chain(&rc).all(|r| r.abs() < 1e-15));
    }

    #[test]
    fn random_verifier_suite() {
        let world = random_verifier(11, Dims::new(2, 3, 3, 2)).unwrap();
        let channels = vec![
            OsfChannel::binary(0.9, 0.2).unwrap(),
            OsfChannel::binary(0.35, 0.25).unwrap(),
            OsfChannel::new(vec![0.1, 0.3, 0.6], vec![0.5, 0.3, 0.2]).unwrap(),
        ];
        let reports = sweep(&world, &CausalSweep { witness_feedback: Some(1), channels }).unwrap();
        let (pass, _, fail) = tally(&reports);
        assert!(pass > 0);
        assert_eq!(fail, 0, "{:?}", reports.iter().find(|r| r.status == CausalStatus::Fail));
    }
}
