//! Finite-difference helpers shared by the trainer tests and the acceptance
//! harness.

use credit_lab::policy::{sample_rollout, PolicyParams, ReferenceState, Teacher};
use credit_lab::prob;
use credit_lab::reward::{RewardContext, RewardField};
use credit_lab::rng;
use credit_lab::trainer::{sample_contrast, training_field, TrainConfig};
use credit_lab::world::WorldSpec;

/// Fields at the initial parameters, for a fixed rollout set.
pub fn frozen_fields(world: &WorldSpec, config: &TrainConfig, params: &PolicyParams, reference: &ReferenceState) -> Vec<RewardField> {
    let teacher = Teacher { fallback: true, ..Teacher::exact(reference, world) };
    let ctx = RewardContext::new(params, teacher);
    let mut rollout = rng::stream(config.seed, &[rng::ROLLOUT]);
    let mut contrast = rng::stream(config.seed, &[rng::CONTRAST]);
    let batch: Vec<usize> = (0..world.dims().num_inputs).collect();
    let mut fields = Vec::new();
    for &x in &batch {
        for _ in 0..3 {
            let mut traj = sample_rollout(params, world, x, &mut rollout, 1.0).unwrap();
            let ids = sample_contrast(world, &batch, x, config.contrast_count, &mut contrast);
            fields.push(training_field(&ctx, &mut traj, config, &ids).unwrap());
        }
    }
    fields
}

/// `−(1/N) Σ Σ_t Σ_{v∈M} π_θ(v) A_t(v)` with every advantage frozen.
pub fn frozen_loss(params: &PolicyParams, fields: &[RewardField]) -> f64 {
    let dims = params.dims;
    let mut total = 0.0;
    for f in fields {
        for t in 0..f.horizon {
            let row = dims.prefix_row(f.input, &f.tokens[..t]).unwrap();
            let pi = prob::softmax(params.student_row(row));
            total -= (0..f.vocab).filter(|&v| f.mask_row(t)[v]).map(|v| pi[v] * f.row(t)[v]).sum::<f64>();
        }
    }
    total / fields.len() as f64
}

pub fn central_difference(params: &PolicyParams, loss: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..params.student_logits.len())
        .map(|i| {
            let mut up = params.clone();
            up.student_logits[i] += h;
            let mut down = params.clone();
            down.student_logits[i] -= h;
            (loss(&up) - loss(&down)) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

pub fn drifted(world: &WorldSpec) -> (PolicyParams, ReferenceState) {
    // Move the student away from the reference so the fields are not trivial.
    let mut params = PolicyParams::from_world(world);
    let reference = ReferenceState::new(&params, 0.01).unwrap();
    let mut noise = rng::stream(3, &[rng::INSTANCE]);
    for l in params.student_logits.iter_mut() {
        *l += rng::sample_index(&mut noise, &[0.5, 0.5]) as f64 * 0.7 - 0.35;
    }
    (params, reference)
}
