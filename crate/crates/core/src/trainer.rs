//! Training loop: rollouts, feedback, reward fields, per-vocabulary policy
//! gradient, EMA maintenance and metrics.
//!
//! Optimization is plain gradient ascent on logits. For a distillation
//! engine the objective at one visited row is `J = Σ_{v∈M} π(v) A(v)` with
//! the advantages `A` frozen, so
//!
//! ```text
//! ∂J/∂θ_w = π(w) A(w) 1[w ∈ M] − π(w) Σ_{v∈M} π(v) A(v)
//! ```
//!
//! The teacher, the contrastive baseline and the reference are constants.
//! GRPO uses `Σ_t ∇ ln π(y_t) · Â` with a group-normalized scalar advantage.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_rollout, Checkpoint, PolicyParams, ReferenceState, Teacher, TeacherMode};
use crate::prob;
use crate::reward::{Baseline, RewardContext, RewardEngine, RewardField};
use crate::rng::{self, LabRng};
use crate::world::{Trajectory, WorldSpec};

/// Group standard deviations at or below this are not divided by.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Grpo,
    Sd,
    Credit,
    FullRatio,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Grpo => "grpo",
            EngineKind::Sd => "sd",
            EngineKind::Credit => "credit",
            EngineKind::FullRatio => "full-ratio",
        }
    }

    /// The reward engine behind a distillation run.
    pub fn reward_engine(self) -> Option<RewardEngine> {
        match self {
            EngineKind::Grpo => None,
            EngineKind::Sd => Some(RewardEngine::Sd),
            EngineKind::Credit => Some(RewardEngine::Credit),
            EngineKind::FullRatio => Some(RewardEngine::FullRatio),
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(EngineKind::Grpo),
            "sd" => Ok(EngineKind::Sd),
            "credit" => Ok(EngineKind::Credit),
            "full-ratio" => Ok(EngineKind::FullRatio),
            _ => Err(Error::arg(format!("unknown engine {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    #[default]
    ReverseKl,
    Jsd,
}

impl std::str::FromStr for Divergence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse-kl" => Ok(Divergence::ReverseKl),
            "jsd" => Ok(Divergence::Jsd),
            _ => Err(Error::arg(format!("unknown divergence {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub engine: EngineKind,
    pub lambda: f64,
    pub contrast_count: usize,
    pub topk: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub group_size: usize,
    pub steps: u64,
    pub ema_rate: f64,
    pub divergence: Divergence,
    pub jsd_alpha: f64,
    pub seed: u64,
    pub temperature: f64,
    /// PPO ratio clip. A single gradient step per batch keeps the ratio at
    /// 1, so this never binds here; it is kept for configs that reuse
    /// rollouts.
    pub clip_ratio: f64,
    pub teacher_mode: TeacherMode,
    /// Capture a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            engine: EngineKind::Credit,
            lambda: 0.1,
            contrast_count: 1,
            topk: 20,
            learning_rate: 0.05,
            batch_size: 32,
            group_size: 8,
            steps: 200,
            ema_rate: 0.01,
            divergence: Divergence::ReverseKl,
            jsd_alpha: 0.5,
            seed: 0,
            temperature: 1.0,
            clip_ratio: 0.2,
            teacher_mode: TeacherMode::ExactPosterior,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::arg(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.topk == 0 {
            return fail("topk must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.group_size == 0 {
            return fail("batch_size and group_size must be positive".into());
        }
        if self.engine == EngineKind::Grpo && self.group_size < 2 {
            return fail(format!("grpo needs group_size >= 2, got {}", self.group_size));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return fail(format!("ema_rate must lie in (0, 1], got {}", self.ema_rate));
        }
        if self.divergence == Divergence::Jsd && !(self.jsd_alpha > 0.0 && self.jsd_alpha < 1.0) {
            return fail(format!("jsd_alpha must lie in (0, 1), got {}", self.jsd_alpha));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.clip_ratio > 0.0) {
            return fail(format!("clip_ratio must be positive, got {}", self.clip_ratio));
        }
        Ok(())
    }
}

/// One line of the training log. `wall_time` is seconds since the run
/// started and is kept out of byte-compared outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Fraction of this step's rollouts that succeeded; `None` if the world
    /// defines no success.
    pub train_success_rate: Option<f64>,
    pub mean_entropy: f64,
    pub mean_realized_advantage: f64,
    pub advantage_std: f64,
    pub mean_s: f64,
    pub mean_g: f64,
    pub mean_pmi: f64,
    pub wall_time: f64,
}

/// Advantage from an effective teacher row.
///
/// Reverse KL gives `ln q − ln π`. JSD mixes first: `ln m − ln π` with
/// `m = α q + (1 − α) π`. The JSD form is this crate's definition; it
/// degrades continuously to reverse KL as `α → 1`.
pub fn divergence_weights(teacher: &[f64], student: &[f64], divergence: Divergence, alpha: f64) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!("teacher {} vs student {}", teacher.len(), student.len())));
    }
    match divergence {
        Divergence::ReverseKl => Ok(teacher.iter().zip(student).map(|(&q, &p)| prob::floored_ln(q) - p.ln()).collect()),
        Divergence::Jsd => {
            check_alpha(alpha)?;
            Ok(teacher
                .iter()
                .zip(student)
                .map(|(&q, &p)| prob::floored_ln(alpha * q + (1.0 - alpha) * p) - p.ln())
                .collect())
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("jsd alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Apply the divergence to an engine advantage `A`.
///
/// The engine's `A` defines an effective teacher `π·e^A` (for sd this is
/// the teacher itself; for credit the λ-baseline is already folded in). JSD
/// then gives `ln(α e^A + 1 − α) = ln(1 + α·expm1(A))`.
pub fn transform_advantages(advantages: &mut [f64], divergence: Divergence, alpha: f64) -> Result<()> {
    if divergence == Divergence::Jsd {
        check_alpha(alpha)?;
        for a in advantages.iter_mut() {
            *a = (alpha * a.exp_m1()).ln_1p();
        }
    }
    Ok(())
}

/// `∂/∂θ Σ_{v∈M} π(v) A(v)` for one logit row, added into `grad`.
pub fn accumulate_row_gradient(grad: &mut [f64], probs: &[f64], advantages: &[f64], mask: &[bool], scale: f64) {
    let mean: f64 = (0..probs.len()).filter(|&v| mask[v]).map(|v| probs[v] * advantages[v]).sum();
    for w in 0..probs.len() {
        let own = if mask[w] { probs[w] * advantages[w] } else { 0.0 };
        grad[w] += scale * (own - probs[w] * mean);
    }
}

fn apply(params: &mut PolicyParams, grad: &[f64], lr: f64) {
    for (l, g) in params.student_logits.iter_mut().zip(grad) {
        *l += lr * g;
    }
    params.clip();
    params.version += 1;
}

/// Scalar success: the outcome map, else feedback equal to the designated
/// success id.
pub fn trajectory_success(world: &WorldSpec, trajectory: &Trajectory) -> Result<Option<bool>> {
    if world.has_outcome_map() {
        return world.outcome(trajectory.input, &trajectory.tokens).map(Some);
    }
    Ok(world.success_feedback().map(|z| trajectory.feedback == z))
}

/// Exact `Σ_x D(x) Σ_y π_θ(y | x) · P(success | x, y)`.
pub fn expected_success(params: &PolicyParams, world: &WorldSpec) -> Result<Option<f64>> {
    let success_z = world.success_feedback();
    if !world.has_outcome_map() && success_z.is_none() {
        return Ok(None);
    }
    let table = params.student_table();
    let joint = world.with_policy(&table);
    let mut total = 0.0;
    for (x, &d) in world.input_prior().iter().enumerate() {
        let mut acc = 0.0;
        let mut err = None;
        joint.for_each_completion(x, &[], |y, w| {
            let s = if world.has_outcome_map() {
                world.outcome(x, y).map(|o| if o { 1.0 } else { 0.0 })
            } else {
                world.channel_row(x, y).map(|c| c[success_z.unwrap_or(0)])
            };
            match s {
                Ok(s) => acc += w * s,
                Err(e) => err = Some(e),
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        total += d * acc;
    }
    Ok(Some(total))
}

/// Inputs for one step, drawn from the data prior.
pub fn sample_batch(world: &WorldSpec, config: &TrainConfig, step: u64) -> Vec<usize> {
    let mut rng = rng::stream(config.seed, &[rng::BATCH, step]);
    (0..config.batch_size).map(|_| rng::sample_index(&mut rng, world.input_prior())).collect()
}

/// `C` contrastive inputs for `input`: uniform over distinct batch inputs
/// other than `input`, else over all other inputs; empty if there are none.
pub fn sample_contrast(world: &WorldSpec, batch: &[usize], input: usize, count: usize, rng: &mut LabRng) -> Vec<usize> {
    let mut pool: Vec<usize> = batch.iter().copied().filter(|&x| x != input).collect::<BTreeSet<_>>().into_iter().collect();
    if pool.is_empty() {
        pool = (0..world.dims().num_inputs).filter(|&x| x != input).collect();
    }
    if pool.is_empty() {
        return Vec::new();
    }
    (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean(values: &[f64]) -> f64 {
    mean_std(values).0
}

#[derive(Default)]
struct Diagnostics {
    successes: Vec<f64>,
    entropies: Vec<f64>,
    advantages: Vec<f64>,
    s: Vec<f64>,
    g: Vec<f64>,
    pmi: Vec<f64>,
}

impl Diagnostics {
    /// Student entropy, S/G at the realized token and pMI under the reference joint.
    fn observe(&mut self, ctx: &RewardContext<'_>, world: &WorldSpec, traj: &Trajectory) -> Result<()> {
        if let Some(s) = trajectory_success(world, traj)? {
            self.successes.push(if s { 1.0 } else { 0.0 });
        }
        for t in 0..traj.tokens.len() {
            let prefix = &traj.tokens[..t];
            self.entropies.push(prob::entropy(&ctx.params.student_next(traj.input, prefix)?));
            let (s, g) = ctx.decompose_s_g(traj.input, prefix, traj.feedback, traj.tokens[t])?;
            self.s.push(s);
            self.g.push(g);
        }
        match world.with_policy(ctx.teacher.reference.table()).pmi(traj.input, &traj.tokens, traj.feedback) {
            Ok(p) => self.pmi.push(p),
            Err(Error::NullEvent(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn row(&self, step: u64, started: Instant) -> MetricsRow {
        let (adv_mean, adv_std) = mean_std(&self.advantages);
        MetricsRow {
            step,
            train_success_rate: (!self.successes.is_empty()).then(|| mean(&self.successes)),
            mean_entropy: mean(&self.entropies),
            mean_realized_advantage: adv_mean,
            advantage_std: adv_std,
            mean_s: mean(&self.s),
            mean_g: mean(&self.g),
            mean_pmi: mean(&self.pmi),
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

fn teacher<'a>(reference: &'a ReferenceState, world: &'a WorldSpec, config: &TrainConfig) -> Teacher<'a> {
    Teacher {
        reference,
        world,
        mode: config.teacher_mode,
        fallback: true,
    }
}

/// One GRPO step over `batch`, `group_size` rollouts per input.
pub fn grpo_step(params: &mut PolicyParams, world: &WorldSpec, batch: &[usize], config: &TrainConfig, step: u64) -> Result<MetricsRow> {
    let started = Instant::now();
    if config.group_size < 2 {
        return Err(Error::arg(format!("grpo needs group_size >= 2, got {}", config.group_size)));
    }
    if !world.has_outcome_map() && world.success_feedback().is_none() {
        return Err(Error::MissingOutcomeMap);
    }
    let dims = params.dims;
    let mut rng = rng::stream(config.seed, &[rng::ROLLOUT, step]);
    let mut grad = vec![0.0; params.student_logits.len()];
    let n = (batch.len() * config.group_size) as f64;
    let diag_ref = ReferenceState::new(params, 1.0)?;
    let ctx = RewardContext::new(params, teacher(&diag_ref, world, config));
    let mut diag = Diagnostics::default();
    for &x in batch {
        let group: Vec<Trajectory> = (0..config.group_size)
            .map(|_| sample_rollout(params, world, x, &mut rng, config.temperature))
            .collect::<Result<_>>()?;
        let rewards: Vec<f64> = group
            .iter()
            .map(|t| Ok(if trajectory_success(world, t)? == Some(true) { 1.0 } else { 0.0 }))
            .collect::<Result<_>>()?;
        let advantages = group_advantages(&rewards);
        for (traj, &a) in group.iter().zip(&advantages) {
            diag.observe(&ctx, world, traj)?;
            diag.advantages.push(a);
            if a == 0.0 {
                continue;
            }
            for t in 0..dims.horizon {
                let row = dims.prefix_row(x, &traj.tokens[..t])?;
                let probs = prob::softmax(params.student_row(row));
                let g = &mut grad[row * dims.vocab_size..(row + 1) * dims.vocab_size];
                for (w, p) in probs.iter().enumerate() {
                    let indicator = if w == traj.tokens[t] { 1.0 } else { 0.0 };
                    g[w] += a * (indicator - p) / n;
                }
            }
        }
    }
    apply(params, &grad, config.learning_rate);
    Ok(diag.row(step, started))
}

/// Group-centered rewards, divided by the population std when it exceeds
/// [`STD_GUARD`].
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let (m, s) = mean_std(rewards);
    rewards.iter().map(|r| if s > STD_GUARD { (r - m) / s } else { r - m }).collect()
}

/// The masked, divergence-transformed field a distillation step trains on.
pub fn training_field(
    ctx: &RewardContext<'_>,
    trajectory: &mut Trajectory,
    config: &TrainConfig,
    contrast: &[usize],
) -> Result<RewardField> {
    let engine = config.engine.reward_engine().ok_or_else(|| Error::arg("grpo has no reward field"))?;
    let field = if engine == RewardEngine::Sd || contrast.is_empty() {
        ctx.field(RewardEngine::Sd, trajectory, &Baseline::Prior, 0.0)?
    } else {
        ctx.field(engine, trajectory, &Baseline::Sampled(contrast.to_vec()), config.lambda)?
    };
    let mut field = field.topk_mask(config.topk)?;
    transform_advantages(&mut field.values, config.divergence, config.jsd_alpha)?;
    Ok(field)
}

/// Gradient of `(1/N) Σ_traj Σ_t Σ_{v∈M} π(v) A_t(v)` over the given fields.
pub fn distill_gradient(params: &PolicyParams, fields: &[RewardField]) -> Result<Vec<f64>> {
    let dims = params.dims;
    let mut grad = vec![0.0; params.student_logits.len()];
    let scale = 1.0 / fields.len().max(1) as f64;
    for field in fields {
        for t in 0..field.horizon {
            let row = dims.prefix_row(field.input, &field.tokens[..t])?;
            let probs = prob::softmax(params.student_row(row));
            let g = &mut grad[row * dims.vocab_size..(row + 1) * dims.vocab_size];
            accumulate_row_gradient(g, &probs, field.row(t), field.mask_row(t), scale);
        }
    }
    Ok(grad)
}

/// One distillation step: rollouts, fields, gradient, then one EMA update.
pub fn distill_step(
    params: &mut PolicyParams,
    reference: &mut ReferenceState,
    world: &WorldSpec,
    batch: &[usize],
    config: &TrainConfig,
    step: u64,
) -> Result<MetricsRow> {
    let started = Instant::now();
    if config.engine == EngineKind::Grpo {
        return Err(Error::arg("distill_step needs a distillation engine"));
    }
    let mut rollout_rng = rng::stream(config.seed, &[rng::ROLLOUT, step]);
    let mut contrast_rng = rng::stream(config.seed, &[rng::CONTRAST, step]);
    let grad = {
        let ctx = RewardContext::new(params, teacher(reference, world, config));
        let mut diag = Diagnostics::default();
        let mut fields = Vec::with_capacity(batch.len() * config.group_size);
        for &x in batch {
            for _ in 0..config.group_size {
                let mut traj = sample_rollout(params, world, x, &mut rollout_rng, config.temperature)?;
                let contrast = if config.engine == EngineKind::Sd {
                    Vec::new()
                } else {
                    sample_contrast(world, batch, x, config.contrast_count, &mut contrast_rng)
                };
                let field = training_field(&ctx, &mut traj, config, &contrast)?;
                diag.observe(&ctx, world, &traj)?;
                diag.advantages.extend(field.realized_rewards());
                fields.push(field);
            }
        }
        (distill_gradient(params, &fields)?, diag)
    };
    let (grad, diag) = grad;
    apply(params, &grad, config.learning_rate);
    reference.ema_update(params)?;
    Ok(diag.row(step, started))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub metrics: Vec<MetricsRow>,
    pub params: PolicyParams,
    pub reference: ReferenceState,
    /// `(step, checkpoint)` at the configured cadence.
    pub checkpoints: Vec<(u64, Checkpoint)>,
}

impl TrainingRun {
    pub fn final_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.params, &self.reference)
    }
}

/// Initial parameters: the world's policy as logits, plus a learned teacher
/// table when the config asks for one.
pub fn initial_params(world: &WorldSpec, config: &TrainConfig) -> Result<PolicyParams> {
    let params = PolicyParams::from_world(world);
    match config.teacher_mode {
        TeacherMode::ExactPosterior => Ok(params),
        TeacherMode::LearnedTable => params.with_posterior_teacher(world),
    }
}

pub fn run_training(config: &TrainConfig, world: &WorldSpec) -> Result<TrainingRun> {
    config.validate()?;
    let mut params = initial_params(world, config)?;
    let mut reference = ReferenceState::new(&params, config.ema_rate)?;
    run_from(config, world, &mut params, &mut reference)
}

/// Continue training from given state. Steps run from `params.version + 1`
/// through `config.steps`, so restored checkpoints resume on the same random
/// streams as an uninterrupted run.
pub fn run_from(
    config: &TrainConfig,
    world: &WorldSpec,
    params: &mut PolicyParams,
    reference: &mut ReferenceState,
) -> Result<TrainingRun> {
    config.validate()?;
    let started = Instant::now();
    let first = params.version + 1;
    let mut metrics = Vec::with_capacity(config.steps.saturating_sub(params.version) as usize);
    let mut checkpoints = Vec::new();
    for step in first..=config.steps {
        let batch = sample_batch(world, config, step);
        let mut row = match config.engine {
            EngineKind::Grpo => grpo_step(params, world, &batch, config, step)?,
            _ => distill_step(params, reference, world, &batch, config, step)?,
        };
        row.wall_time = started.elapsed().as_secs_f64();
        metrics.push(row);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            checkpoints.push((step, Checkpoint::capture(params, reference)));
        }
    }
    Ok(TrainingRun {
        metrics,
        params: params.clone(),
        reference: reference.clone(),
        checkpoints,
    })
}
