//! Token reward fields.
//!
//! All engines score every vocabulary candidate at every position of a
//! trajectory:
//!
//! ```text
//! sd          r_t(v)   = ln q(v | x, y<t, z) − ln π(v | x, y<t)
//! credit      R_t(v)   = r_t(v) − λ · Ĝ_t(v),   Ĝ_t(v) = Σ_k w_k ln q(v | x'_k, y<t, z)
//! full-ratio  R_t(v)   = r_t(v) − λ · Σ_k w_k r_t(v; x'_k)
//! ```
//!
//! where `q` is the teacher and the weights `w_k` come from a [`Baseline`]:
//! a sampled contrastive set (uniform weights), the full prior `D`, or `D`
//! restricted to inputs other than `x`. Teacher probabilities are floored at
//! [`PROB_FLOOR`](crate::prob::PROB_FLOOR) before the log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Teacher};
use crate::prob;
use crate::world::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardEngine {
    Sd,
    Credit,
    FullRatio,
}

impl RewardEngine {
    pub fn name(self) -> &'static str {
        match self {
            RewardEngine::Sd => "sd",
            RewardEngine::Credit => "credit",
            RewardEngine::FullRatio => "full-ratio",
        }
    }
}

/// Which inputs the contrastive term averages over.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// Explicit contrastive inputs, equally weighted; none may equal `x`.
    Sampled(Vec<usize>),
    /// The full data prior, `x` included (the definitional `G_t`).
    Prior,
    /// The prior restricted to `x' ≠ x` and renormalized.
    PriorExcluding,
}

/// Student and teacher access for reward computation.
#[derive(Debug, Clone, Copy)]
pub struct RewardContext<'a> {
    pub params: &'a PolicyParams,
    pub teacher: Teacher<'a>,
}

impl<'a> RewardContext<'a> {
    pub fn new(params: &'a PolicyParams, teacher: Teacher<'a>) -> Self {
        RewardContext { params, teacher }
    }

    fn ln_teacher(&self, input: usize, prefix: &[usize], feedback: usize) -> Result<Vec<f64>> {
        Ok(self.teacher.next(input, prefix, feedback)?.into_iter().map(prob::floored_ln).collect())
    }

    fn ln_student(&self, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.params.student_next(input, prefix)?.into_iter().map(f64::ln).collect())
    }

    /// `(x', w)` pairs for a baseline around `input`.
    pub fn contrast_weights(&self, input: usize, baseline: &Baseline) -> Result<Vec<(usize, f64)>> {
        let world = self.teacher.world;
        let dims = world.dims();
        dims.check_input(input)?;
        match baseline {
            Baseline::Sampled(ids) => {
                if ids.is_empty() {
                    return Err(Error::EmptyContrastive);
                }
                let w = 1.0 / ids.len() as f64;
                ids.iter()
                    .map(|&id| {
                        dims.check_input(id)?;
                        if id == input {
                            return Err(Error::ContrastiveIsMatched(id));
                        }
                        Ok((id, w))
                    })
                    .collect()
            }
            Baseline::Prior => Ok(world.input_prior().iter().copied().enumerate().collect()),
            Baseline::PriorExcluding => {
                let rest = 1.0 - world.input_prior()[input];
                if dims.num_inputs < 2 || rest <= 0.0 {
                    return Err(Error::EmptyContrastive);
                }
                Ok(world
                    .input_prior()
                    .iter()
                    .enumerate()
                    .filter(|&(id, _)| id != input)
                    .map(|(id, &d)| (id, d / rest))
                    .collect())
            }
        }
    }

    /// Self-distillation reward row at one context.
    pub fn sd_row(&self, input: usize, prefix: &[usize], feedback: usize) -> Result<Vec<f64>> {
        let lq = self.ln_teacher(input, prefix, feedback)?;
        let ls = self.ln_student(input, prefix)?;
        Ok(lq.iter().zip(&ls).map(|(q, s)| q - s).collect())
    }

    /// `Ĝ_t(v) = Σ_k w_k ln q(v | x'_k, prefix, z)`.
    pub fn generic_baseline(&self, input: usize, prefix: &[usize], feedback: usize, baseline: &Baseline) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.dims.vocab_size];
        for (id, w) in self.contrast_weights(input, baseline)? {
            if w == 0.0 {
                continue;
            }
            for (acc, lq) in g.iter_mut().zip(self.ln_teacher(id, prefix, feedback)?) {
                *acc += w * lq;
            }
        }
        Ok(g)
    }

    /// `Σ_k w_k r_t(v; x'_k)`: the full contrastive reward.
    pub fn contrastive_reward(&self, input: usize, prefix: &[usize], feedback: usize, baseline: &Baseline) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.dims.vocab_size];
        for (id, w) in self.contrast_weights(input, baseline)? {
            if w == 0.0 {
                continue;
            }
            for (acc, r) in g.iter_mut().zip(self.sd_row(id, prefix, feedback)?) {
                *acc += w * r;
            }
        }
        Ok(g)
    }

    /// Engine reward row at one context.
    pub fn engine_row(
        &self,
        engine: RewardEngine,
        input: usize,
        prefix: &[usize],
        feedback: usize,
        baseline: &Baseline,
        lambda: f64,
    ) -> Result<Vec<f64>> {
        let mut row = self.sd_row(input, prefix, feedback)?;
        let correction = match engine {
            RewardEngine::Sd => return Ok(row),
            RewardEngine::Credit => self.generic_baseline(input, prefix, feedback, baseline)?,
            RewardEngine::FullRatio => self.contrastive_reward(input, prefix, feedback, baseline)?,
        };
        // Skipping λ = 0 keeps the result bitwise equal to sd (no signed zeros).
        if lambda != 0.0 {
            for (r, c) in row.iter_mut().zip(correction) {
                *r -= lambda * c;
            }
        }
        Ok(row)
    }

    /// Score a trajectory and store its realized rewards.
    pub fn field(
        &self,
        engine: RewardEngine,
        trajectory: &mut Trajectory,
        baseline: &Baseline,
        lambda: f64,
    ) -> Result<RewardField> {
        let dims = self.params.dims;
        dims.response_index(trajectory.input, &trajectory.tokens)?;
        if engine != RewardEngine::Sd {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::arg(format!("lambda must lie in [0, 1], got {lambda}")));
            }
            // Validate the contrast set even when no prefix would use it.
            self.contrast_weights(trajectory.input, baseline)?;
        }
        let (x, z) = (trajectory.input, trajectory.feedback);
        let v = dims.vocab_size;
        let mut values = Vec::with_capacity(dims.horizon * v);
        let mut teacher = Vec::with_capacity(dims.horizon * v);
        let mut student = Vec::with_capacity(dims.horizon * v);
        for t in 0..dims.horizon {
            let prefix = &trajectory.tokens[..t];
            values.extend(self.engine_row(engine, x, prefix, z, baseline, lambda)?);
            teacher.extend(self.teacher.next(x, prefix, z)?);
            student.extend(self.params.student_next(x, prefix)?);
        }
        let field = RewardField {
            horizon: dims.horizon,
            vocab: v,
            values,
            mask: vec![true; dims.horizon * v],
            teacher_probs: teacher,
            student_probs: student,
            engine,
            lambda: if engine == RewardEngine::Sd { 0.0 } else { lambda },
            contrastive_ids: match (engine, baseline) {
                (RewardEngine::Sd, _) => Vec::new(),
                (_, Baseline::Sampled(ids)) => ids.clone(),
                _ => self.contrast_weights(x, baseline)?.into_iter().map(|(id, _)| id).collect(),
            },
            input: x,
            tokens: trajectory.tokens.clone(),
            feedback: z,
        };
        trajectory.realized_rewards = Some(field.realized_rewards());
        Ok(field)
    }

    pub fn sd_reward(&self, trajectory: &mut Trajectory) -> Result<RewardField> {
        self.field(RewardEngine::Sd, trajectory, &Baseline::Prior, 0.0)
    }

    pub fn credit_reward(&self, trajectory: &mut Trajectory, baseline: &Baseline, lambda: f64) -> Result<RewardField> {
        self.field(RewardEngine::Credit, trajectory, baseline, lambda)
    }

    pub fn full_ratio_contrastive(&self, trajectory: &mut Trajectory, baseline: &Baseline, lambda: f64) -> Result<RewardField> {
        self.field(RewardEngine::FullRatio, trajectory, baseline, lambda)
    }

    /// `(S, G)` with `G = Σ_{x'} D(x') ln q(v | x', ·)` over the full prior.
    pub fn decompose_s_g(&self, input: usize, prefix: &[usize], feedback: usize, candidate: usize) -> Result<(f64, f64)> {
        self.params.dims.check_token(candidate)?;
        let g = self.generic_baseline(input, prefix, feedback, &Baseline::Prior)?[candidate];
        let lq = self.ln_teacher(input, prefix, feedback)?[candidate];
        Ok((lq - g, g))
    }

    /// `ln q(v | x, ·) − ln Σ_{x'} D(x') q(v | x', ·)`.
    pub fn pcmi(&self, input: usize, prefix: &[usize], feedback: usize, candidate: usize) -> Result<f64> {
        self.params.dims.check_token(candidate)?;
        let mut mixture = 0.0;
        for (id, w) in self.contrast_weights(input, &Baseline::Prior)? {
            if w > 0.0 {
                mixture += w * self.teacher.next(id, prefix, feedback)?[candidate];
            }
        }
        let lq = self.ln_teacher(input, prefix, feedback)?[candidate];
        Ok(lq - prob::floored_ln(mixture))
    }
}

/// Per-candidate advantages over a whole response.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardField {
    pub horizon: usize,
    pub vocab: usize,
    /// Row-major `T × V`.
    pub values: Vec<f64>,
    /// `true` inside the top-K_v support.
    pub mask: Vec<bool>,
    /// Matched teacher distribution at each position.
    pub teacher_probs: Vec<f64>,
    pub student_probs: Vec<f64>,
    pub engine: RewardEngine,
    pub lambda: f64,
    pub contrastive_ids: Vec<usize>,
    pub input: usize,
    pub tokens: Vec<usize>,
    pub feedback: usize,
}

impl RewardField {
    pub fn contrast_count(&self) -> usize {
        self.contrastive_ids.len()
    }

    pub fn value(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.vocab + v]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn mask_row(&self, t: usize) -> &[bool] {
        &self.mask[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn teacher_row(&self, t: usize) -> &[f64] {
        &self.teacher_probs[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn student_row(&self, t: usize) -> &[f64] {
        &self.student_probs[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn realized(&self, t: usize) -> f64 {
        self.value(t, self.tokens[t])
    }

    pub fn realized_rewards(&self) -> Vec<f64> {
        (0..self.horizon).map(|t| self.realized(t)).collect()
    }

    /// Restrict the support to the matched teacher's `k` most probable tokens
    /// per position (ties go to the lower index). Values are kept so the
    /// whole field stays inspectable; consumers honor the mask.
    pub fn topk_mask(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("top-k must be positive"));
        }
        let keep = k.min(self.vocab);
        for t in 0..self.horizon {
            let teacher = self.teacher_row(t).to_vec();
            let mut order: Vec<usize> = (0..self.vocab).collect();
            order.sort_by(|&a, &b| teacher[b].total_cmp(&teacher[a]).then(a.cmp(&b)));
            let mask = &mut self.mask[t * self.vocab..(t + 1) * self.vocab];
            mask.iter_mut().for_each(|m| *m = false);
            for &v in &order[..keep] {
                mask[v] = true;
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ReferenceState, TeacherMode};
    use crate::world::{w_ind, w_rand, w_shortcut, WorldSpec};

    struct Lab {
        world: WorldSpec,
        params: PolicyParams,
        reference: ReferenceState,
    }

    impl Lab {
        fn new(world: WorldSpec) -> Self {
            let params = PolicyParams::from_world(&world);
            let reference = ReferenceState::new(&params, 1.0).unwrap();
            Lab { world, params, reference }
        }

        fn ctx(&self) -> RewardContext<'_> {
            RewardContext::new(&self.params, Teacher::exact(&self.reference, &self.world))
        }

        fn traj(&self, x: usize, y: &[usize], z: usize) -> Trajectory {
            Trajectory::new(self.world.dims(), x, y.to_vec(), z).unwrap()
        }
    }

    #[test]
    fn sd_is_zero_when_feedback_is_uninformative() {
        let lab = Lab::new(w_ind());
        let field = lab.ctx().sd_reward(&mut lab.traj(1, &[2, 0], 1)).unwrap();
        assert!(field.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sd_is_zero_for_degenerate_learned_teacher() {
        let world = w_rand(7);
        let params = PolicyParams::from_world(&world).with_student_teacher();
        let reference = ReferenceState::new(&params, 1.0).unwrap();
        let teacher = Teacher {
            mode: TeacherMode::LearnedTable,
            ..Teacher::exact(&reference, &world)
        };
        let ctx = RewardContext::new(&params, teacher);
        let mut traj = Trajectory::new(world.dims(), 0, vec![1, 2, 0], 2).unwrap();
        let field = ctx.sd_reward(&mut traj).unwrap();
        assert!(field.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sd_matches_two_pass_recomputation() {
        let lab = Lab::new(w_rand(7));
        let mut traj = lab.traj(2, &[0, 2, 1], 1);
        let field = lab.ctx().sd_reward(&mut traj).unwrap();
        for t in 0..3 {
            let prefix = &traj.tokens[..t];
            // Teacher pass straight from the world; student pass from logits.
            let teacher = lab.world.posterior_next_token(2, prefix, 1).unwrap();
            let row = lab.world.dims().prefix_row(2, prefix).unwrap();
            let logits = lab.params.student_row(row);
            let norm = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            for v in 0..3 {
                let want = teacher[v].ln() - (logits[v] - norm);
                assert!((field.value(t, v) - want).abs() < 1e-12);
            }
        }
        assert_eq!(traj.realized_rewards.unwrap(), field.realized_rewards());
    }

    #[test]
    fn generic_baseline_cases() {
        let lab = Lab::new(w_ind());
        let ctx = lab.ctx();
        // With a constant channel every input's teacher is its own prior.
        let g = ctx.generic_baseline(0, &[1], 0, &Baseline::Sampled(vec![1])).unwrap();
        let want: Vec<f64> = lab.world.policy_row(1, &[1]).unwrap().iter().map(|p| p.ln()).collect();
        for v in 0..3 {
            assert!((g[v] - want[v]).abs() < 1e-12);
        }
        assert!(matches!(ctx.generic_baseline(0, &[], 0, &Baseline::Sampled(vec![])), Err(Error::EmptyContrastive)));
        assert!(matches!(
            ctx.generic_baseline(0, &[], 0, &Baseline::Sampled(vec![0])),
            Err(Error::ContrastiveIsMatched(0))
        ));

        let lab = Lab::new(w_rand(4));
        let ctx = lab.ctx();
        let all = ctx.generic_baseline(1, &[2], 0, &Baseline::Sampled(vec![0, 2])).unwrap();
        let prior = lab.world.input_prior();
        let restricted = ctx.generic_baseline(1, &[2], 0, &Baseline::PriorExcluding).unwrap();
        let a = ctx.generic_baseline(1, &[2], 0, &Baseline::Sampled(vec![0])).unwrap();
        let b = ctx.generic_baseline(1, &[2], 0, &Baseline::Sampled(vec![2])).unwrap();
        for v in 0..3 {
            assert!((all[v] - 0.5 * (a[v] + b[v])).abs() < 1e-12);
            let weighted = (prior[0] * a[v] + prior[2] * b[v]) / (prior[0] + prior[2]);
            assert!((restricted[v] - weighted).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_recovers_sd_bitwise() {
        let lab = Lab::new(w_rand(7));
        let ctx = lab.ctx();
        let sd = ctx.sd_reward(&mut lab.traj(0, &[1, 1, 2], 0)).unwrap();
        let credit = ctx.credit_reward(&mut lab.traj(0, &[1, 1, 2], 0), &Baseline::Sampled(vec![2]), 0.0).unwrap();
        let full = ctx.full_ratio_contrastive(&mut lab.traj(0, &[1, 1, 2], 0), &Baseline::Sampled(vec![1]), 0.0).unwrap();
        assert_eq!(sd.values, credit.values);
        assert_eq!(sd.values, full.values);
    }

    #[test]
    fn full_ratio_vanishes_without_information() {
        let lab = Lab::new(w_ind());
        let f = lab
            .ctx()
            .full_ratio_contrastive(&mut lab.traj(0, &[0, 2], 1), &Baseline::Sampled(vec![1]), 0.7)
            .unwrap();
        assert!(f.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn credit_with_prior_baseline_subtracts_exact_g() {
        let lab = Lab::new(w_rand(2));
        let ctx = lab.ctx();
        let mut traj = lab.traj(1, &[2, 0, 1], 2);
        let sd = ctx.sd_reward(&mut traj.clone()).unwrap();
        let credit = ctx.credit_reward(&mut traj, &Baseline::Prior, 1.0).unwrap();
        for t in 0..3 {
            for v in 0..3 {
                let (_, g) = ctx.decompose_s_g(1, &traj.tokens[..t], 2, v).unwrap();
                assert!((credit.value(t, v) - (sd.value(t, v) - g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shortcut_credit_moves_generic_position_more() {
        let lab = Lab::new(w_shortcut());
        let ctx = lab.ctx();
        let traj = lab.traj(0, &[1, 1], 1);
        let sd = ctx.sd_reward(&mut traj.clone()).unwrap();
        let credit = ctx.credit_reward(&mut traj.clone(), &Baseline::Sampled(vec![1]), 0.1).unwrap();
        let shift = |t: usize| (credit.realized(t) - sd.realized(t)).abs();
        assert!(shift(0) > shift(1));
    }

    #[test]
    fn s_g_cases() {
        let lab = Lab::new(w_shortcut());
        let ctx = lab.ctx();
        for z in 0..2 {
            for v in 0..3 {
                let (s, _) = ctx.decompose_s_g(0, &[], z, v).unwrap();
                assert!(s.abs() < 1e-10);
            }
        }
        let max_s = (0..3)
            .map(|v| ctx.decompose_s_g(0, &[1], 1, v).unwrap().0.abs())
            .fold(0.0, f64::max);
        assert!(max_s > 0.01);

        let single = crate::world::w_rand_with(3, crate::index::Dims::new(1, 3, 2, 2));
        let lab = Lab::new(single);
        let ctx = lab.ctx();
        let (s, g) = ctx.decompose_s_g(0, &[1], 1, 2).unwrap();
        assert_eq!(s, 0.0);
        assert!((g - lab.world.posterior_next_token(0, &[1], 1).unwrap()[2].ln()).abs() < 1e-12);
        assert_eq!(ctx.pcmi(0, &[1], 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn pcmi_is_below_s() {
        let lab = Lab::new(w_rand(7));
        let ctx = lab.ctx();
        for prefix in lab.world.dims().prefixes() {
            for z in 0..3 {
                for v in 0..3 {
                    let (s, _) = ctx.decompose_s_g(1, &prefix, z, v).unwrap();
                    assert!(s - ctx.pcmi(1, &prefix, z, v).unwrap() >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn topk_cases() {
        let lab = Lab::new(w_rand(7));
        let field = lab.ctx().sd_reward(&mut lab.traj(0, &[0, 1, 2], 1)).unwrap();
        assert_eq!(field.clone().topk_mask(3).unwrap(), field);
        assert_eq!(field.clone().topk_mask(20).unwrap(), field);
        let top1 = field.clone().topk_mask(1).unwrap();
        for t in 0..3 {
            let row = top1.mask_row(t);
            assert_eq!(row.iter().filter(|&&m| m).count(), 1);
            assert!(row[prob::argmax(field.teacher_row(t))]);
        }
        assert!(field.topk_mask(0).is_err());
    }

    #[test]
    fn topk_ties_prefer_low_index() {
        let lab = Lab::new(w_rand(7));
        let mut field = lab.ctx().sd_reward(&mut lab.traj(0, &[0, 1, 2], 1)).unwrap();
        field.teacher_probs = vec![0.25, 0.5, 0.25, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.4, 0.2, 0.4];
        let a = field.clone().topk_mask(2).unwrap();
        let b = field.topk_mask(2).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.mask, vec![true, true, false, true, true, false, true, false, true]);
    }
}
