//! Tabular softmax policies, the lagged reference, and the teacher view.
//!
//! The student is one logit row per `(input, prefix)`. The reference is an
//! EMA of those logits. The teacher is the reference conditioned on feedback,
//! either as the exact Bayes posterior of the world's channel under the
//! reference policy, or as a separate learned logit table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Dims;
use crate::prob;
use crate::rng::{self, LabRng};
use crate::world::{PolicyTable, Trajectory, WorldSpec};

/// Bound on `max |logit|` per row after every update.
pub const LOGIT_BOUND: f64 = 50.0;

/// Below this temperature sampling is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dims: Dims,
    pub student_logits: Vec<f64>,
    /// Keyed by `(row · Z + z) · V + v`; only used in learned-table mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_logits: Option<Vec<f64>>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(dims: Dims) -> Self {
        PolicyParams {
            dims,
            student_logits: vec![0.0; dims.num_rows() * dims.vocab_size],
            teacher_logits: None,
            version: 0,
        }
    }

    /// Student logits `ln π` of the world's policy (floored, so deterministic
    /// worlds get large negative rather than infinite logits).
    pub fn from_world(world: &WorldSpec) -> Self {
        let mut params = PolicyParams {
            dims: world.dims(),
            student_logits: world.policy().as_slice().iter().map(|&p| prob::floored_ln(p)).collect(),
            teacher_logits: None,
            version: 0,
        };
        params.clip();
        params
    }

    /// Learned teacher table initialized to the world's exact posteriors
    /// under its own policy; rows whose feedback is impossible fall back to
    /// the unconditioned policy row.
    pub fn with_posterior_teacher(mut self, world: &WorldSpec) -> Result<Self> {
        let dims = self.dims;
        let mut table = Vec::with_capacity(dims.num_rows() * dims.num_feedback * dims.vocab_size);
        for row in 0..dims.num_rows() {
            let (x, prefix) = dims.row_context(row);
            for z in 0..dims.num_feedback {
                let post = match world.posterior_next_token(x, &prefix, z) {
                    Ok(p) => p,
                    Err(Error::NullEvent(_)) => world.policy().row_at(row).to_vec(),
                    Err(e) => return Err(e),
                };
                table.extend(post.iter().map(|&p| prob::floored_ln(p)));
            }
        }
        self.teacher_logits = Some(table);
        self.clip();
        Ok(self)
    }

    /// Learned teacher equal to the student for every feedback value.
    pub fn with_student_teacher(mut self) -> Self {
        let v = self.dims.vocab_size;
        let z = self.dims.num_feedback;
        let table = self
            .student_logits
            .chunks(v)
            .flat_map(|row| std::iter::repeat_n(row, z).flatten().copied())
            .collect();
        self.teacher_logits = Some(table);
        self
    }

    pub fn student_row(&self, row: usize) -> &[f64] {
        let v = self.dims.vocab_size;
        &self.student_logits[row * v..(row + 1) * v]
    }

    pub fn student_row_mut(&mut self, row: usize) -> &mut [f64] {
        let v = self.dims.vocab_size;
        &mut self.student_logits[row * v..(row + 1) * v]
    }

    pub fn teacher_row(&self, row: usize, feedback: usize) -> Result<&[f64]> {
        let table = self.teacher_logits.as_ref().ok_or(Error::MissingTeacherLogits)?;
        let v = self.dims.vocab_size;
        let start = (row * self.dims.num_feedback + feedback) * v;
        Ok(&table[start..start + v])
    }

    /// `π_θ(· | x, prefix)`.
    pub fn student_next(&self, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let row = self.dims.prefix_row(input, prefix)?;
        Ok(prob::softmax(self.student_row(row)))
    }

    /// Softmax of every student row.
    pub fn student_table(&self) -> PolicyTable {
        PolicyTable::from_logits(self.dims, &self.student_logits)
    }

    /// Re-bound every logit row; see [`clip_row`].
    pub fn clip(&mut self) {
        let v = self.dims.vocab_size;
        self.student_logits.chunks_mut(v).for_each(clip_row);
        if let Some(t) = &mut self.teacher_logits {
            t.chunks_mut(v).for_each(clip_row);
        }
    }

    fn check_same_shape(&self, other: &PolicyParams) -> Result<()> {
        let teacher_len = |p: &PolicyParams| p.teacher_logits.as_ref().map(Vec::len);
        if self.dims != other.dims
            || self.student_logits.len() != other.student_logits.len()
            || teacher_len(self) != teacher_len(other)
        {
            return Err(Error::ShapeMismatch(format!(
                "parameter tables differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Bring a row within `±LOGIT_BOUND` when it exceeds it.
///
/// First the row is shifted to centre its range (softmax-invariant); if the
/// range still exceeds `2·LOGIT_BOUND` it is scaled down. Both steps are
/// monotone, so the ordering of logits and hence the argmax is preserved.
pub fn clip_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= LOGIT_BOUND && min >= -LOGIT_BOUND {
        return;
    }
    let mid = 0.5 * (max + min);
    let half_range = 0.5 * (max - min);
    let scale = if half_range > LOGIT_BOUND { LOGIT_BOUND / half_range } else { 1.0 };
    for l in row.iter_mut() {
        *l = ((*l - mid) * scale).clamp(-LOGIT_BOUND, LOGIT_BOUND);
    }
}

/// EMA of the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceState {
    logits: PolicyParams,
    decay_rate: f64,
    table: PolicyTable,
}

impl ReferenceState {
    pub fn new(params: &PolicyParams, decay_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay_rate) {
            return Err(Error::arg(format!("EMA rate must lie in [0, 1], got {decay_rate}")));
        }
        Ok(ReferenceState {
            table: params.student_table(),
            logits: params.clone(),
            decay_rate,
        })
    }

    pub fn decay_rate(&self) -> f64 {
        self.decay_rate
    }

    pub fn logits(&self) -> &PolicyParams {
        &self.logits
    }

    /// Softmax of the reference student logits, cached between updates.
    pub fn table(&self) -> &PolicyTable {
        &self.table
    }

    /// `ema ← (1 − rate)·ema + rate·params`, elementwise.
    pub fn ema_update(&mut self, params: &PolicyParams) -> Result<()> {
        self.logits.check_same_shape(params)?;
        let rate = self.decay_rate;
        let blend = |ema: &mut [f64], cur: &[f64]| {
            for (e, &c) in ema.iter_mut().zip(cur) {
                *e = (1.0 - rate) * *e + rate * c;
            }
        };
        blend(&mut self.logits.student_logits, &params.student_logits);
        if let (Some(e), Some(c)) = (&mut self.logits.teacher_logits, &params.teacher_logits) {
            blend(e, c);
        }
        self.logits.version = params.version;
        self.table = self.logits.student_table();
        Ok(())
    }

    /// Largest deviation between reference rows and the world's policy.
    pub fn world_deviation(&self, world: &WorldSpec) -> f64 {
        self.table
            .as_slice()
            .iter()
            .zip(world.policy().as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    #[default]
    ExactPosterior,
    LearnedTable,
}

impl std::str::FromStr for TeacherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-posterior" => Ok(TeacherMode::ExactPosterior),
            "learned-table" => Ok(TeacherMode::LearnedTable),
            _ => Err(Error::arg(format!("unknown teacher mode {s:?}"))),
        }
    }
}

/// The context of one teacher pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherContext<'p> {
    pub input: usize,
    pub prefix: &'p [usize],
    /// `None` is the unconditioned pass.
    pub feedback: Option<usize>,
    pub mode: TeacherMode,
}

/// `π_ref(· | x, prefix, z)`.
///
/// In exact-posterior mode this is the Bayes posterior of the world's
/// channel under the reference policy, which is a valid joint whether or not
/// the reference still matches the world's own policy.
pub fn teacher_next(reference: &ReferenceState, world: &WorldSpec, ctx: &TeacherContext<'_>) -> Result<Vec<f64>> {
    let dims = reference.logits.dims;
    let row = dims.prefix_row(ctx.input, ctx.prefix)?;
    let Some(z) = ctx.feedback else {
        return Ok(reference.table.row_at(row).to_vec());
    };
    match ctx.mode {
        TeacherMode::ExactPosterior => world.with_policy(&reference.table).posterior_next_token(ctx.input, ctx.prefix, z),
        TeacherMode::LearnedTable => {
            dims.check_feedback(z)?;
            Ok(prob::softmax(reference.logits.teacher_row(row, z)?))
        }
    }
}

/// A reusable teacher: reference, world and mode bundled.
///
/// With `fallback` set, contexts whose feedback is impossible return the
/// unconditioned reference row instead of a null-event error. The trainer
/// needs this for contrastive inputs under deterministic verifiers, where the
/// observed feedback is often impossible for another input.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub reference: &'a ReferenceState,
    pub world: &'a WorldSpec,
    pub mode: TeacherMode,
    pub fallback: bool,
}

impl<'a> Teacher<'a> {
    pub fn exact(reference: &'a ReferenceState, world: &'a WorldSpec) -> Self {
        Teacher {
            reference,
            world,
            mode: TeacherMode::ExactPosterior,
            fallback: false,
        }
    }

    pub fn next(&self, input: usize, prefix: &[usize], feedback: usize) -> Result<Vec<f64>> {
        let ctx = TeacherContext {
            input,
            prefix,
            feedback: Some(feedback),
            mode: self.mode,
        };
        match teacher_next(self.reference, self.world, &ctx) {
            Err(Error::NullEvent(_)) if self.fallback => self.unconditioned(input, prefix),
            other => other,
        }
    }

    pub fn unconditioned(&self, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let row = self.reference.logits.dims.prefix_row(input, prefix)?;
        Ok(self.reference.table.row_at(row).to_vec())
    }
}

/// Sample a rollout from the temperature-scaled student, then feedback from
/// the world's channel.
pub fn sample_rollout(
    params: &PolicyParams,
    world: &WorldSpec,
    input: usize,
    rng: &mut LabRng,
    temperature: f64,
) -> Result<Trajectory> {
    if !(temperature > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    let dims = params.dims;
    dims.check_input(input)?;
    let mut tokens = Vec::with_capacity(dims.horizon);
    for _ in 0..dims.horizon {
        let row = dims.prefix_row(input, &tokens)?;
        let logits = params.student_row(row);
        let token = if temperature < GREEDY_TEMPERATURE {
            prob::argmax(logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            rng::sample_index(rng, &prob::softmax(&scaled))
        };
        tokens.push(token);
    }
    let feedback = rng::sample_index(rng, world.channel_row(input, &tokens)?);
    Trajectory::new(dims, input, tokens, feedback)
}

/// Text checkpoint: all logit tables, the version counter and the EMA rate.
///
/// Floats are written in shortest round-trip form, so load/store is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u64,
    pub decay_rate: f64,
    pub dims: Dims,
    pub student_logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_logits: Option<Vec<f64>>,
    pub ema_student_logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_teacher_logits: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(params: &PolicyParams, reference: &ReferenceState) -> Self {
        Checkpoint {
            version: params.version,
            decay_rate: reference.decay_rate,
            dims: params.dims,
            student_logits: params.student_logits.clone(),
            teacher_logits: params.teacher_logits.clone(),
            ema_student_logits: reference.logits.student_logits.clone(),
            ema_teacher_logits: reference.logits.teacher_logits.clone(),
        }
    }

    pub fn restore(&self) -> Result<(PolicyParams, ReferenceState)> {
        let params = PolicyParams {
            dims: self.dims,
            student_logits: self.student_logits.clone(),
            teacher_logits: self.teacher_logits.clone(),
            version: self.version,
        };
        let ema = PolicyParams {
            dims: self.dims,
            student_logits: self.ema_student_logits.clone(),
            teacher_logits: self.ema_teacher_logits.clone(),
            version: self.version,
        };
        params.check_same_shape(&ema)?;
        let mut reference = ReferenceState::new(&ema, self.decay_rate)?;
        reference.logits = ema;
        Ok((params, reference))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("checkpoint serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}
