//! One function per subcommand. Each returns whether its checks passed;
//! errors are usage, parse or input problems.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use credit_lab::causal::{self, CausalSweep, OsfChannel};
use credit_lab::compat::{self, exact_instance, learned_instance, random_instance, CompatInstance};
use credit_lab::identities::{self, ExactLab, Family, SweepOptions};
use credit_lab::policy::{Checkpoint, ReferenceState, TeacherMode};
use credit_lab::report::{self, FieldFile, HeatField, HeatRow};
use credit_lab::trainer;
use credit_lab::world::{builtin, w_rand, w_rand_with, WorldFile};
use credit_lab::{Baseline, Dims, PolicyParams, RewardContext, Teacher, Trajectory};

use crate::config::{write, write_manifest, CompatSource, ExperimentConfig, LoadedWorld};
use crate::{CausalArgs, CompatArgs, HeatmapArgs, TrainArgs, VerifyArgs};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

pub fn world_gen(name: Option<&str>, rand: bool, seed: Option<u64>, dims: Option<Dims>, out: Option<&Path>) -> Result<Status> {
    let world = match (name, rand) {
        (Some(name), false) => builtin(name)?,
        (None, true) => {
            let seed = seed.context("--rand needs --seed")?;
            match dims {
                Some(dims) => w_rand_with(seed, dims),
                None => w_rand(seed),
            }
        }
        _ => bail!("pass exactly one of --builtin NAME or --rand"),
    };
    let text = world.file().to_toml();
    match out {
        Some(path) => write(path, text)?,
        None => print!("{text}"),
    }
    Ok(Status::Pass)
}

pub fn world_validate(path: &Path) -> Result<Status> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file = WorldFile::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let report = file.validate();
    print!("{}: {report}", path.display());
    Ok(Status::from_pass(report.is_valid()))
}

fn load_checkpoint(path: &Path) -> Result<(PolicyParams, ReferenceState)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ckpt = Checkpoint::parse(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
    Ok(ckpt.restore()?)
}

pub fn verify(args: &VerifyArgs) -> Result<Status> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    args.common.apply(&mut cfg);
    let mut v = cfg.verify.clone().unwrap_or_default();
    if !args.family.is_empty() {
        v.families = args.family.clone();
    }
    if !args.lambda.is_empty() {
        v.lambdas = args.lambda.clone();
    }
    v.tolerance = args.tolerance.or(v.tolerance);
    v.checkpoint = args.checkpoint.clone().or(v.checkpoint);
    v.teacher_mode = args.teacher_mode.unwrap_or(v.teacher_mode);
    cfg.verify = Some(v.clone());

    let families: Vec<Family> = if v.families.is_empty() {
        Family::ALL.to_vec()
    } else {
        v.families.iter().map(|f| f.parse()).collect::<Result<_, _>>()?
    };
    let world = cfg.world()?;
    let out = cfg.output_dir()?.to_path_buf();
    let lab = match &v.checkpoint {
        Some(path) => {
            let (params, reference) = load_checkpoint(path)?;
            ExactLab::from_state(world.spec.clone(), params, reference, v.teacher_mode)?
        }
        None if v.teacher_mode == TeacherMode::LearnedTable => bail!("a learned-table teacher needs --checkpoint"),
        None => ExactLab::new(world.spec.clone()),
    };
    let options = SweepOptions { lambdas: v.lambdas.clone(), tolerance: v.tolerance };
    let mut reports = Vec::new();
    for family in families {
        reports.extend(identities::sweep(&lab, family, &options)?);
    }
    let summary = identities::summarize(&reports);
    write(out.join("checks.csv"), report::checks_csv(&reports)?)?;
    write(out.join("summary.csv"), report::check_summary_csv(&summary)?)?;
    write_manifest(&out, "verify", &cfg, Some(&world))?;
    for s in &summary {
        println!("{:<22} {:>7} checks {:>5} failed  max violation {:.3e}", s.name, s.checks, s.failures, s.max_violation);
    }
    Ok(Status::from_pass(reports.iter().all(|r| r.passed)))
}

pub fn train(args: &TrainArgs) -> Result<Status> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    args.common.apply(&mut cfg);
    let mut t = cfg.train.clone().unwrap_or_default();
    args.apply(&mut t);
    t.seed = cfg.seed()?;
    t.validate()?;
    cfg.train = Some(t.clone());

    let world = cfg.world()?;
    let out = cfg.output_dir()?.to_path_buf();
    let (mut params, mut reference) = match &args.resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let params = trainer::initial_params(&world.spec, &t)?;
            let reference = ReferenceState::new(&params, t.ema_rate)?;
            (params, reference)
        }
    };
    if params.dims != world.spec.dims() {
        bail!("checkpoint shape {:?} does not match world shape {:?}", params.dims, world.spec.dims());
    }
    let run = trainer::run_from(&t, &world.spec, &mut params, &mut reference)?;
    write(out.join("metrics.csv"), report::metrics_csv(&run.metrics)?)?;
    write(out.join("timing.csv"), report::timing_csv(&run.metrics)?)?;
    write(out.join("checkpoint.toml"), run.final_checkpoint().to_text())?;
    for (step, ckpt) in &run.checkpoints {
        write(out.join("checkpoints").join(format!("step-{step:06}.toml")), ckpt.to_text())?;
    }
    write_manifest(&out, "train", &cfg, Some(&world))?;
    let success = trainer::expected_success(&run.params, &world.spec)?;
    println!(
        "{} steps of {} on {}; expected success {}",
        run.metrics.len(),
        t.engine.name(),
        world.spec.name(),
        success.map_or("n/a".to_string(), |s| format!("{s:.4}"))
    );
    Ok(Status::Pass)
}

pub fn compat(args: &CompatArgs) -> Result<Status> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    args.common.apply(&mut cfg);
    let mut c = cfg.compat.clone().unwrap_or_default();
    c.source = args.source.unwrap_or(c.source);
    c.instances = args.instances.clone().or(c.instances);
    c.checkpoint = args.checkpoint.clone().or(c.checkpoint);
    c.count = args.count.unwrap_or(c.count);
    c.letters = args.letters.unwrap_or(c.letters);
    c.feedback = args.feedback.unwrap_or(c.feedback);
    c.require_fidelity |= args.require_fidelity;
    cfg.compat = Some(c.clone());

    let out = cfg.output_dir()?.to_path_buf();
    let instances: Vec<CompatInstance> = match c.source {
        CompatSource::Exact | CompatSource::Learned => {
            let world = cfg.world()?.spec;
            let dims = world.dims();
            let mut out = Vec::new();
            let learned = match c.source {
                CompatSource::Learned => Some(load_checkpoint(c.checkpoint.as_deref().context("learned source needs --checkpoint")?)?.0),
                _ => None,
            };
            let lab = ExactLab::new(world);
            for x in 0..dims.num_inputs {
                for prefix in dims.prefixes() {
                    out.push(match &learned {
                        Some(params) => learned_instance(params, x, &prefix)?,
                        None => exact_instance(&lab.teacher(), x, &prefix)?,
                    });
                }
            }
            out
        }
        CompatSource::Random => {
            let seed = cfg.seed()?;
            (0..c.count).map(|i| random_instance(seed.wrapping_add(i), c.letters, c.feedback)).collect()
        }
        CompatSource::File => {
            let path = c.instances.as_deref().context("file source needs --instances")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            report::parse_instances(&text)?
        }
    };
    let solved = instances.into_iter().map(CompatInstance::solve).collect::<Result<Vec<_>, _>>()?;
    let metrics = solved.iter().map(|i| i.metrics(c.require_fidelity)).collect::<Result<Vec<_>, _>>()?;
    let summary = compat::summarize(&solved)?;
    write(out.join("instances.csv"), report::instances_csv(&solved)?)?;
    write(out.join("compat.csv"), report::compat_csv(&solved, &metrics)?)?;
    write(out.join("summary.csv"), report::compat_summary_csv(&summary)?)?;
    let world = cfg.world.as_ref().map(|_| cfg.world()).transpose()?;
    write_manifest(&out, "compat", &cfg, world.as_ref())?;
    let median = compat::quantile(
        &{
            let mut r: Vec<f64> = solved.iter().filter_map(|i| i.solution.as_ref().map(|s| s.residual)).collect();
            r.sort_by(f64::total_cmp);
            r
        },
        0.5,
    );
    println!("{} instances; median residual {median:.3e}", solved.len());
    Ok(Status::Pass)
}

pub fn causal(args: &CausalArgs) -> Result<Status> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    args.common.apply(&mut cfg);
    let mut c = cfg.causal.clone().unwrap_or_default();
    c.witness_feedback = args.witness_feedback.or(c.witness_feedback);
    if !args.channel.is_empty() {
        c.channels = args.channel.clone();
    }
    let world = cfg.world()?;
    c.witness_feedback = c.witness_feedback.or(world.spec.success_feedback());
    cfg.causal = Some(c.clone());

    let out = cfg.output_dir()?.to_path_buf();
    let channels = c
        .channels
        .iter()
        .map(|ch| OsfChannel::new(ch.q1.clone(), ch.q0.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = CausalSweep { witness_feedback: c.witness_feedback, channels };
    let reports = causal::sweep(&world.spec, &plan)?;
    let (pass, skipped, fail) = causal::tally(&reports);
    write(out.join("causal.csv"), report::causal_csv(&reports)?)?;
    let summary = format!("status,count\npass,{pass}\nprecondition-not-met,{skipped}\nfail,{fail}\n");
    write(out.join("summary.csv"), &summary)?;
    write_manifest(&out, "causal", &cfg, Some(&world))?;
    println!("{} reports: {pass} pass, {skipped} precondition-not-met, {fail} fail", reports.len());
    Ok(Status::from_pass(fail == 0))
}

pub fn heatmap(args: &HeatmapArgs) -> Result<Status> {
    let file = match &args.field_file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            FieldFile::parse(&text)?
        }
        None => field_from_world(args)?,
    };
    if let Some(path) = &args.field_out {
        write(path, file.to_text())?;
    }
    let fields = if args.side_by_side {
        vec![HeatField::Dv, HeatField::S]
    } else if args.field.is_empty() {
        vec![HeatField::Credit]
    } else {
        args.field.clone()
    };
    let rows = fields.iter().map(|&f| HeatRow::from_file(&file, f)).collect::<Result<Vec<_>, _>>()?;
    write(&args.out, report::heatmap_svg(&rows))?;
    Ok(Status::Pass)
}

fn field_from_world(args: &HeatmapArgs) -> Result<FieldFile> {
    let spec = args.world.as_deref().context("pass --field-file, or --world with a trajectory")?;
    let world = LoadedWorld::resolve(spec)?.spec;
    let (params, reference) = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let params = PolicyParams::from_world(&world);
            let reference = ReferenceState::new(&params, 1.0)?;
            (params, reference)
        }
    };
    if args.tokens.is_empty() {
        bail!("--tokens is required with --world");
    }
    let engine = args.engine.reward_engine().context("heatmaps need a distillation engine, not grpo")?;
    let mut traj = Trajectory::new(world.dims(), args.input, args.tokens.clone(), args.feedback)?;
    let teacher = Teacher { mode: args.teacher_mode, ..Teacher::exact(&reference, &world) };
    let ctx = RewardContext::new(&params, teacher);
    let baseline = if args.contrast.is_empty() {
        Baseline::Prior
    } else {
        Baseline::Sampled(args.contrast.clone())
    };
    let field = ctx.field(engine, &mut traj, &baseline, args.lambda)?;
    Ok(FieldFile::from_field(&world, &field, Some(&ctx))?)
}
