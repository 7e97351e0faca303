//! Exactly enumerable autoregressive worlds.
//!
//! A [`WorldSpec`] fixes a data prior over inputs, a next-token policy over
//! every prefix, and a feedback channel over complete responses. Together they
//! define the joint `P(y, z | x)` in which the unconditioned and
//! feedback-conditioned next-token distributions are both exact conditionals,
//! so posterior compatibility holds by construction.
//!
//! All quantities are computed by enumerating suffixes: `feedback_marginal`
//! sums `π(suffix | x, prefix) · P(z | x, prefix·suffix)` directly rather than
//! through the one-step recursion, which keeps the recursion itself testable.

mod builtins;
mod file;

pub use builtins::{builtin, w_ind, w_last, w_rand, w_rand_with, w_shortcut, w_verify, BUILTIN_NAMES, VERIFY_TARGETS};
pub use file::{Tables, ValidationReport, WorldFile, DEFAULT_ENUMERATION_CAP};

use crate::error::{Error, Result};
use crate::index::Dims;
use crate::prob;

/// Dense next-token probabilities for every `(input, prefix)` row.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    dims: Dims,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(dims: Dims, probs: Vec<f64>) -> Result<Self> {
        let expected = dims.num_rows() * dims.vocab_size;
        if probs.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "policy table has {} entries, expected {expected}",
                probs.len()
            )));
        }
        Ok(PolicyTable { dims, probs })
    }

    /// Row-wise softmax of a logit table with the same layout.
    pub fn from_logits(dims: Dims, logits: &[f64]) -> Self {
        let v = dims.vocab_size;
        let probs = logits.chunks(v).flat_map(prob::softmax).collect();
        PolicyTable { dims, probs }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn row(&self, input: usize, prefix: &[usize]) -> Result<&[f64]> {
        let r = self.dims.prefix_row(input, prefix)?;
        Ok(self.row_at(r))
    }

    pub fn row_at(&self, row: usize) -> &[f64] {
        let v = self.dims.vocab_size;
        &self.probs[row * v..(row + 1) * v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// A policy paired with a feedback channel: the joint `P(y, z | x)`.
///
/// [`WorldSpec`] answers through the joint of its own policy; the teacher
/// evaluates the same channel under a reference policy.
#[derive(Debug, Clone, Copy)]
pub struct Joint<'a> {
    policy: &'a PolicyTable,
    channel: &'a [f64],
    outcome: Option<&'a [u8]>,
}

impl<'a> Joint<'a> {
    pub fn dims(&self) -> Dims {
        self.policy.dims
    }

    pub fn policy(&self) -> &'a PolicyTable {
        self.policy
    }

    pub fn channel_row(&self, input: usize, response: &[usize]) -> Result<&'a [f64]> {
        let dims = self.dims();
        let i = dims.response_index(input, response)?;
        let z = dims.num_feedback;
        Ok(&self.channel[i * z..(i + 1) * z])
    }

    /// Visit every completion of `prefix` with its probability under the policy.
    pub fn for_each_completion(
        &self,
        input: usize,
        prefix: &[usize],
        mut visit: impl FnMut(&[usize], f64),
    ) -> Result<()> {
        let dims = self.dims();
        dims.check_input(input)?;
        if prefix.len() > dims.horizon {
            return Err(Error::IndexOutOfRange {
                what: "prefix length",
                index: prefix.len(),
                limit: dims.horizon + 1,
            });
        }
        prefix.iter().try_for_each(|&t| dims.check_token(t))?;
        let mut tokens = prefix.to_vec();
        self.descend(input, &mut tokens, 1.0, &mut visit);
        Ok(())
    }

    fn descend(&self, input: usize, tokens: &mut Vec<usize>, weight: f64, visit: &mut impl FnMut(&[usize], f64)) {
        let dims = self.dims();
        if tokens.len() == dims.horizon {
            visit(tokens, weight);
            return;
        }
        let row = dims.prefix_row(input, tokens).expect("checked prefix");
        for v in 0..dims.vocab_size {
            let p = self.policy.row_at(row)[v];
            tokens.push(v);
            self.descend(input, tokens, weight * p, visit);
            tokens.pop();
        }
    }

    /// `P(z | x, prefix)` for every `z`.
    pub fn feedback_marginal(&self, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let dims = self.dims();
        if prefix.len() == dims.horizon {
            return Ok(self.channel_row(input, prefix)?.to_vec());
        }
        let mut acc = vec![0.0; dims.num_feedback];
        let n_resp = dims.num_responses();
        let zn = dims.num_feedback;
        self.for_each_completion(input, prefix, |y, w| {
            let i = input * n_resp + dims.code(y);
            for (a, &c) in acc.iter_mut().zip(&self.channel[i * zn..(i + 1) * zn]) {
                *a += w * c;
            }
        })?;
        Ok(acc)
    }

    /// Exact Bayes conditional `π(v | x, prefix, z)`.
    pub fn posterior_next_token(&self, input: usize, prefix: &[usize], feedback: usize) -> Result<Vec<f64>> {
        let dims = self.dims();
        dims.check_feedback(feedback)?;
        let evidence = self.feedback_marginal(input, prefix)?[feedback];
        if evidence <= 0.0 {
            return Err(Error::NullEvent(format!(
                "P(z={feedback} | x={input}, prefix={prefix:?}) = 0"
            )));
        }
        let row = self.policy.row(input, prefix)?;
        let mut extended = prefix.to_vec();
        let mut post = Vec::with_capacity(dims.vocab_size);
        for (v, &p) in row.iter().enumerate() {
            extended.push(v);
            let likelihood = self.feedback_marginal(input, &extended)?[feedback];
            extended.pop();
            post.push(p * likelihood / evidence);
        }
        Ok(post)
    }

    /// `π(y | x)` for a complete response.
    pub fn response_probability(&self, input: usize, response: &[usize]) -> Result<f64> {
        let dims = self.dims();
        dims.response_index(input, response)?;
        let mut prob = 1.0;
        for t in 0..dims.horizon {
            prob *= self.policy.row(input, &response[..t])?[response[t]];
        }
        Ok(prob)
    }

    /// `ln P(z | x, y) − ln P(z | x)`.
    pub fn pmi(&self, input: usize, response: &[usize], feedback: usize) -> Result<f64> {
        self.dims().check_feedback(feedback)?;
        let conditional = self.channel_row(input, response)?[feedback];
        let marginal = self.feedback_marginal(input, &[])?[feedback];
        if conditional <= 0.0 || marginal <= 0.0 {
            return Err(Error::NullEvent(format!(
                "pmi undefined: P(z={feedback} | x={input}, y={response:?}) = {conditional}, P(z | x) = {marginal}"
            )));
        }
        Ok(conditional.ln() - marginal.ln())
    }

    pub fn outcome(&self, input: usize, response: &[usize]) -> Result<bool> {
        let outcome = self.outcome.ok_or(Error::MissingOutcomeMap)?;
        let i = self.dims().response_index(input, response)?;
        Ok(outcome[i] == 1)
    }

    /// `P(O = 1 | x, prefix)` by enumerating continuations.
    pub fn success_probability(&self, input: usize, prefix: &[usize]) -> Result<f64> {
        let outcome = self.outcome.ok_or(Error::MissingOutcomeMap)?;
        let dims = self.dims();
        let n_resp = dims.num_responses();
        let mut total = 0.0;
        self.for_each_completion(input, prefix, |y, w| {
            if outcome[input * n_resp + dims.code(y)] == 1 {
                total += w;
            }
        })?;
        Ok(total)
    }
}

/// An immutable tabular world.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    source: WorldFile,
    dims: Dims,
    input_prior: Vec<f64>,
    policy: PolicyTable,
    channel: Vec<f64>,
    outcome: Option<Vec<u8>>,
}

impl WorldSpec {
    /// Validate a world file and build the world, applying the probability
    /// floor unless the file is marked deterministic.
    pub fn from_file(file: WorldFile) -> Result<Self> {
        let report = file.validate();
        if !report.is_valid() {
            let dims = file.shape;
            if dims.check_positive().is_ok() && dims.enumeration_size() > file.cap() as u128 {
                return Err(Error::EnumerationTooLarge {
                    size: dims.enumeration_size(),
                    cap: file.cap(),
                });
            }
            return Err(Error::InvalidDistribution(report.issues.join("; ")));
        }
        let dims = file.shape;
        let mut input_prior = file.tables.input_prior.clone();
        let mut policy = file.tables.policy_table.clone();
        let mut channel = file.tables.feedback_channel.clone();
        if !file.deterministic {
            prob::floor_and_renormalize(&mut input_prior);
            policy.chunks_mut(dims.vocab_size).for_each(prob::floor_and_renormalize);
            channel.chunks_mut(dims.num_feedback).for_each(prob::floor_and_renormalize);
        }
        Ok(WorldSpec {
            dims,
            input_prior,
            policy: PolicyTable::new(dims, policy)?,
            channel,
            outcome: file.tables.outcome_map.clone(),
            source: file,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_file(WorldFile::parse(text)?)
    }

    /// The file this world was built from (before flooring).
    pub fn file(&self) -> &WorldFile {
        &self.source
    }

    pub fn name(&self) -> &str {
        &self.source.name
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn input_prior(&self) -> &[f64] {
        &self.input_prior
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn channel(&self) -> &[f64] {
        &self.channel
    }

    pub fn is_deterministic(&self) -> bool {
        self.source.deterministic
    }

    pub fn is_binary_verifier(&self) -> bool {
        self.source.binary_verifier
    }

    pub fn has_outcome_map(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn success_feedback(&self) -> Option<usize> {
        self.source.success_feedback
    }

    pub fn token_label(&self, token: usize) -> String {
        match &self.source.token_labels {
            Some(labels) => labels[token].clone(),
            None => format!("t{token}"),
        }
    }

    /// The joint under this world's own policy.
    pub fn joint(&self) -> Joint<'_> {
        self.with_policy(&self.policy)
    }

    /// The joint of this world's feedback channel under another policy.
    pub fn with_policy<'a>(&'a self, policy: &'a PolicyTable) -> Joint<'a> {
        Joint {
            policy,
            channel: &self.channel,
            outcome: self.outcome.as_deref(),
        }
    }

    pub fn policy_row(&self, input: usize, prefix: &[usize]) -> Result<&[f64]> {
        self.policy.row(input, prefix)
    }

    /// Every response with `π(y | x)`, in code order.
    pub fn enumerate_responses(&self, input: usize) -> Result<Vec<(Vec<usize>, f64)>> {
        let size = self.dims.enumeration_size();
        if size > self.source.cap() as u128 {
            return Err(Error::EnumerationTooLarge {
                size,
                cap: self.source.cap(),
            });
        }
        let mut out = Vec::with_capacity(self.dims.num_responses());
        self.joint().for_each_completion(input, &[], |y, w| out.push((y.to_vec(), w)))?;
        Ok(out)
    }

    pub fn feedback_marginal(&self, input: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        self.joint().feedback_marginal(input, prefix)
    }

    pub fn posterior_next_token(&self, input: usize, prefix: &[usize], feedback: usize) -> Result<Vec<f64>> {
        self.joint().posterior_next_token(input, prefix, feedback)
    }

    pub fn pmi(&self, input: usize, response: &[usize], feedback: usize) -> Result<f64> {
        self.joint().pmi(input, response, feedback)
    }

    pub fn success_probability(&self, input: usize, prefix: &[usize]) -> Result<f64> {
        self.joint().success_probability(input, prefix)
    }

    pub fn outcome(&self, input: usize, response: &[usize]) -> Result<bool> {
        self.joint().outcome(input, response)
    }

    pub fn channel_row(&self, input: usize, response: &[usize]) -> Result<&[f64]> {
        let i = self.dims.response_index(input, response)?;
        let z = self.dims.num_feedback;
        Ok(&self.channel[i * z..(i + 1) * z])
    }

    /// A copy of this world with a different feedback channel; validation and
    /// flooring follow the given flags.
    pub fn with_channel(&self, name: &str, channel: Vec<f64>, num_feedback: usize, deterministic: bool) -> Result<Self> {
        let mut file = self.source.clone();
        file.name = name.to_string();
        file.shape.num_feedback = num_feedback;
        file.tables.feedback_channel = channel;
        file.deterministic = deterministic;
        file.binary_verifier = false;
        file.success_feedback = None;
        Self::from_file(file)
    }
}

/// One rollout: input, response tokens, observed feedback and, once a reward
/// engine has run, the realized per-step rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub input: usize,
    pub tokens: Vec<usize>,
    pub feedback: usize,
    pub realized_rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(dims: Dims, input: usize, tokens: Vec<usize>, feedback: usize) -> Result<Self> {
        dims.response_index(input, &tokens)?;
        dims.check_feedback(feedback)?;
        Ok(Trajectory {
            input,
            tokens,
            feedback,
            realized_rewards: None,
        })
    }

    pub fn realized_sum(&self) -> Option<f64> {
        self.realized_rewards.as_ref().map(|r| r.iter().sum())
    }
}
