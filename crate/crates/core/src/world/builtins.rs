//! Built-in fixture worlds.

use rand_distr::{Distribution, Exp1};

use super::{Tables, WorldFile, WorldSpec};
use crate::error::{Error, Result};
use crate::index::Dims;
use crate::rng;

pub const BUILTIN_NAMES: [&str; 5] = ["w-ind", "w-last", "w-verify", "w-shortcut", "w-rand:<seed>"];

/// Resolve a built-in by name; `w-rand:<seed>` selects a random world.
pub fn builtin(name: &str) -> Result<WorldSpec> {
    match name {
        "w-ind" => Ok(w_ind()),
        "w-last" => Ok(w_last()),
        "w-verify" => Ok(w_verify()),
        "w-shortcut" => Ok(w_shortcut()),
        _ => {
            let seed = name
                .strip_prefix("w-rand:")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| {
                    Error::arg(format!("unknown built-in world {name:?}; expected one of {BUILTIN_NAMES:?}"))
                })?;
            Ok(w_rand(seed))
        }
    }
}

fn policy_from(dims: Dims, row: impl Fn(usize, &[usize]) -> Vec<f64>) -> Vec<f64> {
    let mut table = Vec::with_capacity(dims.num_rows() * dims.vocab_size);
    for x in 0..dims.num_inputs {
        for prefix in dims.prefixes() {
            table.extend(row(x, &prefix));
        }
    }
    table
}

fn channel_from(dims: Dims, row: impl Fn(usize, &[usize]) -> Vec<f64>) -> Vec<f64> {
    let mut table = Vec::new();
    for x in 0..dims.num_inputs {
        for y in dims.responses() {
            table.extend(row(x, &y));
        }
    }
    table
}

fn build(file: WorldFile) -> WorldSpec {
    WorldSpec::from_file(file).expect("built-in world is valid")
}

fn file(name: &str, dims: Dims, input_prior: Vec<f64>, policy: Vec<f64>, channel: Vec<f64>) -> WorldFile {
    WorldFile {
        name: name.to_string(),
        deterministic: false,
        binary_verifier: false,
        success_feedback: None,
        enumeration_cap: None,
        token_labels: None,
        shape: dims,
        tables: Tables {
            input_prior,
            policy_table: policy,
            feedback_channel: channel,
            outcome_map: None,
        },
    }
}

/// Feedback independent of input and response: `P(z) = (0.3, 0.7)`.
pub fn w_ind() -> WorldSpec {
    let dims = Dims::new(2, 3, 2, 2);
    let policy = policy_from(dims, |x, prefix| match (x, prefix.last()) {
        (0, None) => vec![0.5, 0.25, 0.25],
        (0, Some(_)) => vec![0.2, 0.3, 0.5],
        (_, None) => vec![0.1, 0.6, 0.3],
        (_, Some(&v)) => vec![[0.4, 0.4, 0.2], [0.25, 0.25, 0.5], [0.6, 0.3, 0.1]][v].to_vec(),
    });
    let channel = channel_from(dims, |_, _| vec![0.3, 0.7]);
    build(file("w-ind", dims, vec![0.5, 0.5], policy, channel))
}

/// Feedback reveals the last token: `z = y_T`.
pub fn w_last() -> WorldSpec {
    let dims = Dims::new(2, 2, 3, 2);
    let policy = policy_from(dims, |x, prefix| {
        let ones = prefix.iter().filter(|&&t| t == 1).count();
        let p = [[0.6, 0.45, 0.7], [0.3, 0.55, 0.35]][x][ones.min(2)];
        vec![1.0 - p, p]
    });
    let channel = channel_from(dims, |_, y| {
        let mut row = vec![0.0; 2];
        row[y[y.len() - 1]] = 1.0;
        row
    });
    let mut f = file("w-last", dims, vec![0.4, 0.6], policy, channel);
    f.deterministic = true;
    build(f)
}

/// Target response of each W-VERIFY input.
pub const VERIFY_TARGETS: [[usize; 2]; 2] = [[0, 0], [1, 1]];

/// Binary verifier: `z = O = 1[y = target(x)]`, with `target(x0) = (0, 0)`
/// and `target(x1) = (1, 1)`. Each target token has probability 0.8, so the
/// initial success rate is 0.64 on both inputs.
pub fn w_verify() -> WorldSpec {
    let dims = Dims::new(2, 2, 2, 2);
    let policy = policy_from(dims, |x, _| {
        let mut row = vec![0.2; 2];
        row[VERIFY_TARGETS[x][0]] = 0.8;
        row
    });
    let outcome: Vec<u8> = (0..dims.num_inputs)
        .flat_map(|x| dims.responses().map(move |y| u8::from(y == VERIFY_TARGETS[x])))
        .collect();
    let channel = outcome.iter().flat_map(|&o| [1.0 - f64::from(o), f64::from(o)]).collect();
    let mut f = file("w-verify", dims, vec![0.5, 0.5], policy, channel);
    f.deterministic = true;
    f.binary_verifier = true;
    f.success_feedback = Some(1);
    f.tables.outcome_map = Some(outcome);
    build(f)
}

/// Feedback is `P(z=1 | x, y) = (g(y_1) + h(x, y_2)) / 2`.
///
/// The first-token policy is shared by both inputs, the second token is
/// uniform, and `h(x, ·)` is a permutation with the same mean for each `x`.
/// So `P(z | x, y_1)` does not depend on `x`: position 1 carries only generic
/// credit, while position 2 is input-specific.
pub fn w_shortcut() -> WorldSpec {
    let dims = Dims::new(2, 3, 2, 2);
    const G: [f64; 3] = [0.9, 0.1, 0.5];
    const H: [[f64; 3]; 2] = [[0.9, 0.1, 0.5], [0.1, 0.9, 0.5]];
    let policy = policy_from(dims, |_, prefix| {
        if prefix.is_empty() {
            vec![0.5, 0.3, 0.2]
        } else {
            vec![1.0 / 3.0; 3]
        }
    });
    let channel = channel_from(dims, |x, y| {
        let p = 0.5 * (G[y[0]] + H[x][y[1]]);
        vec![1.0 - p, p]
    });
    let mut f = file("w-shortcut", dims, vec![0.5, 0.5], policy, channel);
    f.success_feedback = Some(1);
    f.token_labels = Some(vec!["a".into(), "b".into(), "c".into()]);
    build(f)
}

/// Random world with `X = V = T = Z = 3`.
pub fn w_rand(seed: u64) -> WorldSpec {
    w_rand_with(seed, Dims::new(3, 3, 3, 3))
}

/// Every table row drawn from a symmetric Dirichlet(1) on the seed's
/// instance stream.
pub fn w_rand_with(seed: u64, dims: Dims) -> WorldSpec {
    let mut rng = rng::stream(seed, &[rng::INSTANCE]);
    let mut dirichlet = |n: usize| -> Vec<f64> {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / total).collect()
    };
    let input_prior = dirichlet(dims.num_inputs);
    let policy: Vec<f64> = (0..dims.num_rows()).flat_map(|_| dirichlet(dims.vocab_size)).collect();
    let channel: Vec<f64> = (0..dims.num_inputs * dims.num_responses())
        .flat_map(|_| dirichlet(dims.num_feedback))
        .collect();
    let mut f = file(&format!("w-rand:{seed}"), dims, input_prior, policy, channel);
    f.success_feedback = Some(dims.num_feedback - 1);
    build(f)
}
