//! The on-disk world format.
//!
//! A world file is TOML. Dense tables are flat row-major arrays:
//!
//! ```text
//! input_prior[x]
//! policy_table[(x · P + offset(len) + code(prefix)) · V + v]
//! feedback_channel[(x · V^T + code(y)) · Z + z]
//! outcome_map[x · V^T + code(y)]          (0 or 1)
//! ```
//!
//! with `P = Σ_{l<T} V^l`, `offset(l) = Σ_{j<l} V^j` and big-endian base-`V`
//! codes (see [`crate::index`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Dims;

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;
const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub name: String,
    /// Keep exact zeros: no probability floor, null events are errors.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub binary_verifier: bool,
    /// Feedback id counted as success when the world has no outcome map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_feedback: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumeration_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_labels: Option<Vec<String>>,
    pub shape: Dims,
    pub tables: Tables,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tables {
    pub input_prior: Vec<f64>,
    pub policy_table: Vec<f64>,
    pub feedback_channel: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_map: Option<Vec<u8>>,
}

/// Result of validating a [`WorldFile`]; empty `issues` means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.issues.is_empty() {
            return writeln!(f, "ok: all invariants hold");
        }
        for issue in &self.issues {
            writeln!(f, "error: {issue}")?;
        }
        Ok(())
    }
}

const HEADER: &str = "\
# credit-lab world file
# policy_table[(x*P + offset(len) + code(prefix))*V + v], P = sum_{l<T} V^l,
#   offset(l) = sum_{j<l} V^j, code = big-endian base-V digits of the prefix
# feedback_channel[(x*V^T + code(y))*Z + z]
# outcome_map[x*V^T + code(y)]
";

impl WorldFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("world file serializes");
        format!("{HEADER}{body}")
    }

    pub fn cap(&self) -> u64 {
        self.enumeration_cap.unwrap_or(DEFAULT_ENUMERATION_CAP)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        let dims = self.shape;
        if dims.check_positive().is_err() {
            issues.push(format!("all shape entries must be positive, got {dims:?}"));
            return ValidationReport { issues };
        }
        let size = dims.enumeration_size();
        if size > self.cap() as u128 {
            issues.push(format!(
                "enumeration size V^T*X*Z = {size} exceeds the cap {}",
                self.cap()
            ));
            return ValidationReport { issues };
        }
        let t = &self.tables;
        check_rows(&mut issues, "input_prior", &t.input_prior, dims.num_inputs, 1, |_| String::new());

        let v = dims.vocab_size;
        check_rows(&mut issues, "policy_table", &t.policy_table, v, dims.num_rows(), |row| {
            let (x, prefix) = dims.row_context(row);
            format!(" (input {x}, prefix {prefix:?})")
        });

        let z = dims.num_feedback;
        let n_resp = dims.num_responses();
        check_rows(
            &mut issues,
            "feedback_channel",
            &t.feedback_channel,
            z,
            dims.num_inputs * n_resp,
            |row| format!(" (input {}, response {:?})", row / n_resp, dims.decode(row % n_resp, dims.horizon)),
        );

        if let Some(outcome) = &t.outcome_map {
            if outcome.len() != dims.num_inputs * n_resp {
                issues.push(format!(
                    "outcome_map has {} entries, expected {}",
                    outcome.len(),
                    dims.num_inputs * n_resp
                ));
            } else if let Some(i) = outcome.iter().position(|&o| o > 1) {
                issues.push(format!("outcome_map entry {i} is {}, expected 0 or 1", outcome[i]));
            } else if self.binary_verifier
                && z == 2
                && t.feedback_channel.len() == dims.num_inputs * n_resp * 2
            {
                for (i, &o) in outcome.iter().enumerate() {
                    if t.feedback_channel[2 * i + 1] != f64::from(o) {
                        issues.push(format!(
                            "binary verifier: feedback_channel(z=1) row {i} is {} but outcome is {o}",
                            t.feedback_channel[2 * i + 1]
                        ));
                        break;
                    }
                }
            }
        } else if self.binary_verifier {
            issues.push("binary_verifier requires an outcome_map".to_string());
        }
        if self.binary_verifier && z != 2 {
            issues.push(format!("binary_verifier requires num_feedback = 2, got {z}"));
        }
        if let Some(s) = self.success_feedback {
            if s >= z {
                issues.push(format!("success_feedback {s} out of range (Z = {z})"));
            }
        }
        if let Some(labels) = &self.token_labels {
            if labels.len() != v {
                issues.push(format!("token_labels has {} entries, expected {v}", labels.len()));
            }
        }
        ValidationReport { issues }
    }
}

fn check_rows(
    issues: &mut Vec<String>,
    table: &str,
    values: &[f64],
    width: usize,
    rows: usize,
    describe: impl Fn(usize) -> String,
) {
    if values.len() != width * rows {
        issues.push(format!("{table} has {} entries, expected {}", values.len(), width * rows));
        return;
    }
    for (r, row) in values.chunks(width).enumerate() {
        if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            issues.push(format!("{table} row {r}{} has entry {bad} outside [0, 1]", describe(r)));
            continue;
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            issues.push(format!("{table} row {r}{} sums to {sum}", describe(r)));
        }
    }
}
