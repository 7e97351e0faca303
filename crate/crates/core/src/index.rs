//! Dense indexing of prefixes and responses.
//!
//! Prefixes of length `l` are encoded big-endian in base `V`
//! (`code = Σ_i tokens[i] · V^(l-1-i)`) and stacked by length, so the row of
//! `(x, prefix)` in any per-prefix table is
//!
//! ```text
//! row(x, prefix) = x · P + offset(len) + code(prefix),   offset(l) = Σ_{j<l} V^j,
//! P = offset(T) = Σ_{l<T} V^l.
//! ```
//!
//! Complete responses use `x · V^T + code(response)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes of a tabular world: inputs `X`, vocabulary `V`, horizon `T` and
/// feedback outcomes `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub num_inputs: usize,
    pub vocab_size: usize,
    pub horizon: usize,
    pub num_feedback: usize,
}

impl Dims {
    pub fn new(num_inputs: usize, vocab_size: usize, horizon: usize, num_feedback: usize) -> Self {
        Dims {
            num_inputs,
            vocab_size,
            horizon,
            num_feedback,
        }
    }

    pub fn check_positive(&self) -> Result<()> {
        if self.num_inputs == 0 || self.vocab_size == 0 || self.horizon == 0 || self.num_feedback == 0 {
            return Err(Error::arg(format!("all dimensions must be positive, got {self:?}")));
        }
        Ok(())
    }

    /// `X · V^T · Z`, saturating in `u128`.
    pub fn enumeration_size(&self) -> u128 {
        let mut size = self.num_inputs as u128 * self.num_feedback as u128;
        for _ in 0..self.horizon {
            size = size.saturating_mul(self.vocab_size as u128);
        }
        size
    }

    pub fn num_responses(&self) -> usize {
        self.vocab_size.pow(self.horizon as u32)
    }

    /// Number of prefixes of length `0..T` for one input.
    pub fn num_prefixes(&self) -> usize {
        self.prefix_offset(self.horizon)
    }

    fn prefix_offset(&self, len: usize) -> usize {
        (0..len).map(|l| self.vocab_size.pow(l as u32)).sum()
    }

    /// Rows in a per-(input, prefix) table.
    pub fn num_rows(&self) -> usize {
        self.num_inputs * self.num_prefixes()
    }

    pub fn code(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab_size + t)
    }

    pub fn decode(&self, mut code: usize, len: usize) -> Vec<usize> {
        let mut tokens = vec![0; len];
        for slot in tokens.iter_mut().rev() {
            *slot = code % self.vocab_size;
            code /= self.vocab_size;
        }
        tokens
    }

    pub fn check_input(&self, input: usize) -> Result<()> {
        if input >= self.num_inputs {
            return Err(Error::IndexOutOfRange {
                what: "input",
                index: input,
                limit: self.num_inputs,
            });
        }
        Ok(())
    }

    pub fn check_feedback(&self, feedback: usize) -> Result<()> {
        if feedback >= self.num_feedback {
            return Err(Error::IndexOutOfRange {
                what: "feedback",
                index: feedback,
                limit: self.num_feedback,
            });
        }
        Ok(())
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: token,
                limit: self.vocab_size,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }

    /// Row of `(input, prefix)`; the prefix must be shorter than the horizon.
    pub fn prefix_row(&self, input: usize, prefix: &[usize]) -> Result<usize> {
        self.check_input(input)?;
        if prefix.len() >= self.horizon {
            return Err(Error::IndexOutOfRange {
                what: "prefix length",
                index: prefix.len(),
                limit: self.horizon,
            });
        }
        self.check_tokens(prefix)?;
        Ok(input * self.num_prefixes() + self.prefix_offset(prefix.len()) + self.code(prefix))
    }

    /// Inverse of [`Dims::prefix_row`].
    pub fn row_context(&self, row: usize) -> (usize, Vec<usize>) {
        let per_input = self.num_prefixes();
        let input = row / per_input;
        let mut rem = row % per_input;
        let mut len = 0;
        while rem >= self.vocab_size.pow(len as u32) {
            rem -= self.vocab_size.pow(len as u32);
            len += 1;
        }
        (input, self.decode(rem, len))
    }

    pub fn response_index(&self, input: usize, response: &[usize]) -> Result<usize> {
        self.check_input(input)?;
        if response.len() != self.horizon {
            return Err(Error::arg(format!(
                "response has {} tokens, horizon is {}",
                response.len(),
                self.horizon
            )));
        }
        self.check_tokens(response)?;
        Ok(input * self.num_responses() + self.code(response))
    }

    /// All complete responses in code order.
    pub fn responses(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.num_responses()).map(move |c| self.decode(c, self.horizon))
    }

    /// All prefixes of length `0..T`, in row order.
    pub fn prefixes(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.horizon).flat_map(move |len| {
            (0..self.vocab_size.pow(len as u32)).map(move |c| self.decode(c, len))
        })
    }
}
