//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Every criterion runs twice; the last line compares the CSV bytes of the
//! two passes.

mod common;

use std::time::Instant;

use common::{central_difference, drifted, frozen_fields, frozen_loss, relative_error};
use credit_lab::causal::{self, CausalStatus, CausalSweep, OsfChannel};
use credit_lab::compat::{self, exact_instance, random_instance};
use credit_lab::identities::{sweep, CheckKind, CheckReport, ExactLab, Family, SweepOptions};
use credit_lab::index::Dims;
use credit_lab::policy::PolicyParams;
use credit_lab::report;
use credit_lab::trainer::{self, distill_gradient, expected_success, grpo_step, run_training, Divergence, EngineKind, TrainConfig};
use credit_lab::world::{w_ind, w_last, w_rand, w_shortcut, w_verify, WorldSpec};

struct Outcome {
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(title: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { title, pass, detail }
}

fn rand_worlds() -> Vec<WorldSpec> {
    (1..=5).map(w_rand).collect()
}

fn identity_worlds() -> Vec<WorldSpec> {
    let mut worlds = vec![w_ind(), w_last(), w_verify(), w_shortcut()];
    worlds.extend(rand_worlds());
    worlds
}

fn run(lab: &ExactLab, family: Family) -> Vec<CheckReport> {
    sweep(lab, family, &SweepOptions::default()).expect("sweep runs")
}

/// Largest `|residual|` among equalities named `name`.
fn max_equality(reports: &[CheckReport], name: &str) -> f64 {
    reports
        .iter()
        .filter(|r| r.name == name && r.kind == CheckKind::Equality)
        .map(|r| r.residual.abs())
        .fold(0.0, f64::max)
}

/// Smallest `lhs − rhs` among bounds named `name`.
fn min_slack(reports: &[CheckReport], name: &str) -> f64 {
    reports
        .iter()
        .filter(|r| r.name == name)
        .map(|r| r.residual)
        .fold(f64::INFINITY, f64::min)
}

fn max_slack(reports: &[CheckReport], name: &str) -> f64 {
    reports
        .iter()
        .filter(|r| r.name == name)
        .map(|r| r.residual)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn telescoping(csv: &mut Vec<String>) -> Outcome {
    let started = Instant::now();
    let mut reports = Vec::new();
    for world in identity_worlds() {
        reports.extend(run(&ExactLab::new(world), Family::Telescoping));
    }
    let worst = max_equality(&reports, "telescoping");
    let secs = started.elapsed().as_secs_f64();
    csv.push(report::checks_csv(&reports).unwrap());
    outcome(
        "telescoping pMI",
        worst < 1e-9 && secs < 30.0,
        format!("{} contexts, max |residual| {worst:.3e}, {secs:.2} s", reports.len()),
    )
}

fn expectations(csv: &mut Vec<String>) -> Outcome {
    let mut mi = Vec::new();
    let mut sign = Vec::new();
    for world in identity_worlds() {
        let lab = ExactLab::new(world);
        mi.extend(run(&lab, Family::MiExpectation));
        sign.extend(run(&lab, Family::SignExpectation));
    }
    let mi_worst = max_equality(&mi, "mi-expectation").max(max_equality(&mi, "mi-chain"));
    let kl_worst = max_equality(&sign, "prior-expectation").max(max_equality(&sign, "posterior-expectation"));
    let signs = sign.iter().all(|r| match r.name {
        "prior-expectation" => r.lhs <= 1e-10,
        _ => r.lhs >= -1e-10,
    });
    csv.push(report::checks_csv(&mi).unwrap());
    csv.push(report::checks_csv(&sign).unwrap());
    outcome(
        "expectation identities",
        mi_worst < 1e-9 && kl_worst < 1e-10 && signs,
        format!("MI max {mi_worst:.3e} over {}, ±KL max {kl_worst:.3e} over {}, signs ok: {signs}", mi.len(), sign.len()),
    )
}

fn sg_reconstruction(csv: &mut Vec<String>) -> Outcome {
    let mut reports = Vec::new();
    for world in rand_worlds() {
        reports.extend(run(&ExactLab::new(world), Family::SgReconstruction));
    }
    let worst = max_equality(&reports, "sg-teacher");
    csv.push(report::checks_csv(&reports).unwrap());

    let lab = ExactLab::new(w_shortcut());
    let ctx = lab.ctx();
    let dims = lab.world.dims();
    let mut by_position = [0.0_f64; 2];
    for x in 0..dims.num_inputs {
        for prefix in dims.prefixes() {
            for z in 0..dims.num_feedback {
                for v in 0..dims.vocab_size {
                    let (s, _) = ctx.decompose_s_g(x, &prefix, z, v).unwrap();
                    by_position[prefix.len()] = by_position[prefix.len()].max(s.abs());
                }
            }
        }
    }
    outcome(
        "S/G reconstruction",
        worst < 1e-12 && by_position[0] < 1e-10 && by_position[1] > 0.01,
        format!(
            "max |ln q − (S+G)| {worst:.3e}; W-SHORTCUT max |S| generic {:.3e}, specific {:.3e}",
            by_position[0], by_position[1]
        ),
    )
}

fn jensen(csv: &mut Vec<String>) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    let mut all = Vec::new();
    for world in rand_worlds() {
        let name = world.name().to_string();
        let reports = run(&ExactLab::new(world), Family::Jensen);
        let (lo, hi) = (min_slack(&reports, "jensen"), max_slack(&reports, "jensen"));
        pass &= lo >= -1e-12 && hi > 0.0;
        detail.push(format!("{name}: min {lo:.2e} max {hi:.2e}"));
        all.extend(reports);
    }
    csv.push(report::checks_csv(&all).unwrap());
    outcome("Jensen bound", pass, detail.join("; "))
}

fn credit_sequence(csv: &mut Vec<String>) -> Outcome {
    let mut reports = Vec::new();
    for world in rand_worlds() {
        reports.extend(run(&ExactLab::new(world), Family::CreditSequence));
    }
    let worst = max_equality(&reports, "credit-sequence");
    let anti = min_slack(&reports, "anti-genericity");
    csv.push(report::checks_csv(&reports).unwrap());
    outcome(
        "sequence decomposition",
        worst < 1e-9 && anti >= 0.0,
        format!("{} checks, max |lhs − rhs| {worst:.3e}, min anti-genericity {anti:.3e}", reports.len()),
    )
}

fn gap(csv: &mut Vec<String>) -> Outcome {
    let mut reports = Vec::new();
    let mut drift: f64 = 0.0;
    for (i, world) in identity_worlds().into_iter().enumerate() {
        let lab = ExactLab::drifted(world, 0.01, 100, 0.05, i as u64).unwrap();
        drift = drift.max(
            lab.params
                .student_logits
                .iter()
                .zip(&lab.reference.logits().student_logits)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        reports.extend(run(&lab, Family::GapDecomposition));
    }
    let add = max_equality(&reports, "gap-additivity");
    let bound = min_slack(&reports, "gap-renyi-bound");
    csv.push(report::checks_csv(&reports).unwrap());
    outcome(
        "gap decomposition",
        add < 1e-12 && bound >= -1e-12 && drift > 0.0,
        format!("additivity max {add:.3e}, Rényi-∞ min slack {bound:.3e}, max logit lag {drift:.3e}"),
    )
}

fn compatibility(csv: &mut Vec<String>) -> Outcome {
    let mut exact = Vec::new();
    for world in identity_worlds() {
        let lab = ExactLab::new(world);
        let dims = lab.world.dims();
        for x in 0..dims.num_inputs {
            for prefix in dims.prefixes() {
                exact.push(exact_instance(&lab.teacher(), x, &prefix).unwrap().solve().unwrap());
            }
        }
    }
    let exact_worst = exact.iter().map(|i| i.solution.as_ref().unwrap().residual).fold(0.0, f64::max);

    let mut random = Vec::new();
    let (mut oracle_gap, mut grid_excess, mut below_uniform): (f64, f64, bool) = (0.0, f64::NEG_INFINITY, true);
    for seed in 0..100 {
        let inst = random_instance(seed, 4, 4).solve().unwrap();
        let r = inst.solution.as_ref().unwrap().residual;
        let (_, vertex) = compat::vertex_oracle(&inst.student, &inst.teacher).unwrap();
        let (_, grid) = compat::grid_oracle(&inst.student, &inst.teacher, 200).unwrap();
        let uniform = compat::uniform_baseline(&inst.student, &inst.teacher).unwrap();
        oracle_gap = oracle_gap.max((r - vertex).abs());
        grid_excess = grid_excess.max(r - grid);
        below_uniform &= r <= uniform;
        random.push(inst);
    }
    for set in [&exact, &random] {
        let metrics: Vec<_> = set.iter().map(|i| i.metrics(false).unwrap()).collect();
        csv.push(report::compat_csv(set, &metrics).unwrap());
    }
    outcome(
        "compatibility solver",
        exact_worst < 1e-8 && oracle_gap <= 1e-6 && grid_excess <= 1e-6 && below_uniform,
        format!(
            "exact max residual {exact_worst:.3e} over {}; random: |LP − vertex oracle| {oracle_gap:.3e}, LP − grid ≤ {grid_excess:.3e}, ≤ uniform: {below_uniform}",
            exact.len()
        ),
    )
}

fn interventional(csv: &mut Vec<String>) -> Outcome {
    let channels = vec![
        OsfChannel::binary(0.9, 0.2).unwrap(),
        OsfChannel::binary(0.35, 0.25).unwrap(),
        OsfChannel::binary(1.0, 0.0).unwrap(),
        OsfChannel::new(vec![0.1, 0.3, 0.6], vec![0.5, 0.3, 0.2]).unwrap(),
    ];
    let mut reports = causal::sweep(&w_verify(), &CausalSweep { witness_feedback: Some(1), channels: channels.clone() }).unwrap();
    for seed in 1..=3 {
        let world = causal::random_verifier(seed, Dims::new(2, 3, 3, 2)).unwrap();
        reports.extend(causal::sweep(&world, &CausalSweep { witness_feedback: Some(1), channels: channels.clone() }).unwrap());
    }
    let witness: Vec<_> = reports.iter().filter(|r| r.name == "one-sided-witness" && r.world == "w-verify").collect();
    let witness_gap = witness.iter().map(|r| r.value).fold(0.0, f64::max);
    let witness_ok = !witness.is_empty() && witness.iter().all(|r| r.status == CausalStatus::Pass) && witness_gap < 1e-10;
    let rank: Vec<_> = reports.iter().filter(|r| r.name == "rank-preservation").collect();
    let rank_pass = rank.iter().filter(|r| r.status == CausalStatus::Pass).count();
    let rank_ok = rank_pass > 0 && rank.iter().all(|r| r.status != CausalStatus::Fail);
    let pmi_gap = reports.iter().filter(|r| r.name == "gap-pmi").map(|r| r.value).fold(0.0, f64::max);
    let (_, _, fails) = causal::tally(&reports);
    csv.push(report::causal_csv(&reports).unwrap());
    outcome(
        "interventional suite",
        witness_ok && rank_ok && pmi_gap <= 1e-12 && fails == 0,
        format!(
            "witness max gap {witness_gap:.3e} over {} prefixes; rank pass {rank_pass}/{} (rest precondition-not-met); gap-pMI max {pmi_gap:.3e}",
            witness.len(),
            rank.len()
        ),
    )
}

fn trainer_correctness(csv: &mut Vec<String>) -> Outcome {
    let configs = [
        ("sd", TrainConfig { engine: EngineKind::Sd, ..TrainConfig::default() }),
        ("credit", TrainConfig { engine: EngineKind::Credit, lambda: 0.5, ..TrainConfig::default() }),
        ("full-ratio", TrainConfig { engine: EngineKind::FullRatio, lambda: 0.5, ..TrainConfig::default() }),
        ("jsd", TrainConfig { engine: EngineKind::Credit, divergence: Divergence::Jsd, ..TrainConfig::default() }),
    ];
    let mut fd_worst: f64 = 0.0;
    for world in [w_verify(), w_shortcut(), w_ind(), credit_lab::world::w_rand_with(5, Dims::new(3, 3, 2, 2))] {
        let (params, reference) = drifted(&world);
        for (_, config) in &configs {
            let fields = frozen_fields(&world, config, &params, &reference);
            let analytic: Vec<f64> = distill_gradient(&params, &fields).unwrap().iter().map(|g| -g).collect();
            let numeric = central_difference(&params, |p| frozen_loss(p, &fields));
            fd_worst = fd_worst.max(relative_error(&analytic, &numeric));
        }
    }

    let base = TrainConfig { steps: 100, seed: 3, ..TrainConfig::default() };
    let sd = run_training(&TrainConfig { engine: EngineKind::Sd, ..base.clone() }, &w_shortcut()).unwrap();
    let credit = run_training(&TrainConfig { engine: EngineKind::Credit, lambda: 0.0, ..base }, &w_shortcut()).unwrap();
    let sd_csv = report::metrics_csv(&sd.metrics).unwrap();
    let bitwise = sd.params.student_logits == credit.params.student_logits
        && sd.final_checkpoint().to_text() == credit.final_checkpoint().to_text()
        && sd_csv == report::metrics_csv(&credit.metrics).unwrap();
    csv.push(sd_csv);

    // A verifier on which every response succeeds: each group shares reward 1.
    let mut file = w_verify().file().clone();
    file.tables.outcome_map = Some(vec![1; 8]);
    file.tables.feedback_channel = [0.0, 1.0].repeat(8);
    let uniform = WorldSpec::from_file(file).unwrap();
    let config = TrainConfig { engine: EngineKind::Grpo, ..TrainConfig::default() };
    let mut params = PolicyParams::from_world(&uniform);
    let before = params.student_logits.clone();
    let batch = trainer::sample_batch(&uniform, &config, 1);
    grpo_step(&mut params, &uniform, &batch, &config, 1).unwrap();
    let grpo_zero = params.student_logits == before;

    outcome(
        "trainer correctness",
        fd_worst < 1e-5 && bitwise && grpo_zero,
        format!("FD max relative error {fd_worst:.3e} (sd, credit, full-ratio, jsd); credit(λ=0) ≡ sd over 100 steps: {bitwise}; GRPO uniform-group update zero: {grpo_zero}"),
    )
}

fn default_config_smoke(csv: &mut Vec<String>) -> Outcome {
    let world = w_verify();
    let mut pass = true;
    let mut detail = Vec::new();
    for engine in [EngineKind::Credit, EngineKind::Sd] {
        let config = TrainConfig { engine, steps: 200, learning_rate: 0.05, seed: 0, ..TrainConfig::default() };
        let started = Instant::now();
        let run = run_training(&config, &world).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let initial = expected_success(&trainer::initial_params(&world, &config).unwrap(), &world).unwrap().unwrap();
        let last = expected_success(&run.params, &world).unwrap().unwrap();
        let logged = run.metrics.last().and_then(|m| m.train_success_rate).unwrap_or(f64::NAN);
        pass &= last > initial && last >= 0.9 && secs < 60.0;
        detail.push(format!("{}: {initial:.3} → {last:.4} (last batch {logged:.3}), {secs:.2} s", engine.name()));
        csv.push(report::metrics_csv(&run.metrics).unwrap());
    }
    outcome("default-config smoke", pass, detail.join("; "))
}

fn run_all() -> (Vec<Outcome>, Vec<String>) {
    let mut csv = Vec::new();
    let criteria: [fn(&mut Vec<String>) -> Outcome; 10] = [
        telescoping,
        expectations,
        sg_reconstruction,
        jensen,
        credit_sequence,
        gap,
        compatibility,
        interventional,
        trainer_correctness,
        default_config_smoke,
    ];
    let outcomes = criteria.iter().map(|c| c(&mut csv)).collect();
    (outcomes, csv)
}

fn main() {
    let (first, csv_a) = run_all();
    let (_, csv_b) = run_all();
    let bytes: usize = csv_a.iter().map(String::len).sum();
    let mut outcomes = first;
    outcomes.push(outcome(
        "reproducibility",
        csv_a == csv_b,
        format!("{} CSV outputs, {bytes} bytes, identical across two passes: {}", csv_a.len(), csv_a == csv_b),
    ));
    let mut failed = 0;
    for (i, o) in outcomes.iter().enumerate() {
        println!("{:>2} {} {}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.title, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria pass", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
