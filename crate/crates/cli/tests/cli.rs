use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use credit_lab::policy::{Checkpoint, ReferenceState};
use credit_lab::world::{w_rand, WorldFile};
use credit_lab::PolicyParams;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_credit-lab")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

/// Cell fills in document order, skipping the background.
fn cell_fills(svg: &str) -> Vec<String> {
    svg.lines()
        .filter(|l| l.contains("stroke="))
        .map(|l| l.split("fill=\"").nth(1).unwrap()[..7].to_string())
        .collect()
}

#[test]
fn generated_builtin_validates() {
    let dir = TempDir::new().unwrap();
    let file = path(&dir, "w.toml");
    assert_eq!(code(&run(&["world", "gen", "--builtin", "w-verify", "--out", &file])), 0);
    let out = run(&["world", "validate", &file]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn random_generation_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.toml"), path(&dir, "b.toml"));
    for f in [&a, &b] {
        assert_eq!(code(&run(&["world", "gen", "--rand", "--seed", "7", "--out", f])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(code(&run(&["world", "gen", "--rand"])), 2);
}

#[test]
fn corrupted_row_is_named() {
    let dir = TempDir::new().unwrap();
    let mut file = w_rand(3).file().clone();
    let v = file.shape.vocab_size;
    // Row 1 of input 0 is the prefix [0]; pull its sum down to 0.98.
    file.tables.policy_table[v] -= 0.02;
    let p = path(&dir, "bad.toml");
    fs::write(&p, file.to_toml()).unwrap();
    let out = run(&["world", "validate", &p]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    assert!(text.contains("policy_table") && text.contains("input 0, prefix [0]"), "{text}");

    fs::write(&p, "name = \"broken\"\nshape = 3\n").unwrap();
    assert_eq!(code(&run(&["world", "validate", &p])), 2);
    assert!(WorldFile::parse("shape = 3").is_err());
}

#[test]
fn verify_passes_on_exact_worlds() {
    let dir = TempDir::new().unwrap();
    for world in ["w-ind", "w-rand:7"] {
        let out_dir = path(&dir, world);
        let out = run(&["verify", "--world", world, "--out", &out_dir]);
        assert_eq!(code(&out), 0, "{}", stdout(&out));
        let csv = read(Path::new(&out_dir).join("checks.csv"));
        let mut reader = csv::Reader::from_reader(csv.as_bytes());
        let headers = reader.headers().unwrap().clone();
        let col = headers.iter().position(|h| h == "residual").unwrap();
        let name = headers.iter().position(|h| h == "name").unwrap();
        for rec in reader.records() {
            let rec = rec.unwrap();
            let r: f64 = rec[col].parse().unwrap();
            // Bounds report slack, equalities report error.
            if !matches!(&rec[name], "jensen" | "anti-genericity" | "gap-renyi-bound") {
                assert!(r.abs() < 1e-9, "{} {r}", &rec[name]);
            }
            if world == "w-ind" && &rec[name] == "telescoping" {
                // Zero up to the rounding of the posterior normalization.
                assert!(r.abs() < 1e-15);
            }
        }
        assert!(Path::new(&out_dir).join("manifest.toml").exists());
    }
}

#[test]
fn verify_flags_incompatible_learned_teacher() {
    let dir = TempDir::new().unwrap();
    let world = w_rand(7);
    let mut params = PolicyParams::from_world(&world).with_posterior_teacher(&world).unwrap();
    for (i, l) in params.teacher_logits.as_mut().unwrap().iter_mut().enumerate() {
        *l += 0.3 * ((i % 5) as f64 - 2.0);
    }
    let reference = ReferenceState::new(&params, 1.0).unwrap();
    let ckpt = path(&dir, "ckpt.toml");
    fs::write(&ckpt, Checkpoint::capture(&params, &reference).to_text()).unwrap();
    let args = ["verify", "--world", "w-rand:7", "--family", "telescoping", "--checkpoint", &ckpt];
    let out_dir = path(&dir, "out");
    let bad = run(&[&args[..], &["--teacher-mode", "learned-table", "--out", &out_dir]].concat());
    assert_eq!(code(&bad), 1, "{}", stdout(&bad));
    // The same checkpoint under the exact posterior teacher is consistent.
    let good = run(&[&args[..], &["--out", &out_dir]].concat());
    assert_eq!(code(&good), 0);
    assert_eq!(code(&run(&["verify", "--world", "w-ind", "--family", "nope", "--out", &out_dir])), 2);
}

#[test]
fn zero_field_heatmap_is_neutral() {
    let dir = TempDir::new().unwrap();
    let field = path(&dir, "field.toml");
    let record = |t: usize| {
        format!(
            "[[position]]\nposition = {t}\ntoken = 0\nlabel = \"a\"\nvalues = [0.0, 0.0]\nmask = \"11\"\nrealized = 0.0\ns_hat = 0.0\n"
        )
    };
    let text = format!(
        "world = \"w\"\nengine = \"credit\"\nlambda = 0.1\ninput = 0\nfeedback = 0\ncontrastive_ids = [1]\nlabels = [\"a\", \"b\"]\n{}{}",
        record(0),
        record(1)
    );
    fs::write(&field, text).unwrap();
    let svg = path(&dir, "h.svg");
    assert_eq!(code(&run(&["heatmap", "--field-file", &field, "--out", &svg])), 0);
    assert_eq!(cell_fills(&read(&svg)), vec!["#ffffff"; 2]);
    // No ΔV recorded for a credit field.
    assert_eq!(code(&run(&["heatmap", "--field-file", &field, "--field", "dv", "--out", &svg])), 2);
}

#[test]
fn shortcut_credit_heatmap() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.svg"), path(&dir, "b.svg"));
    for out in [&a, &b] {
        let args = ["heatmap", "--world", "w-shortcut", "--tokens", "0,1", "--contrast", "1", "--out", out];
        assert_eq!(code(&run(&args)), 0);
    }
    let svg = read(&a);
    assert_eq!(cell_fills(&svg), vec!["#ffffff", "#1f77b4"]);
    assert_eq!(svg, read(&b));

    let side = path(&dir, "side.svg");
    let args = ["heatmap", "--world", "w-shortcut", "--tokens", "0,1", "--contrast", "1", "--side-by-side", "--out", &side];
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(cell_fills(&read(&side)).len(), 4);
}

#[test]
fn zero_step_training_writes_manifest() {
    let dir = TempDir::new().unwrap();
    let out_dir = path(&dir, "t");
    assert_eq!(code(&run(&["train", "--world", "w-verify", "--seed", "0", "--steps", "0", "--out", &out_dir])), 0);
    let metrics = read(Path::new(&out_dir).join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("step,train_success_rate"));
    let manifest = read(Path::new(&out_dir).join("manifest.toml"));
    for key in ["command = \"train\"", "version = ", "seed = 0", "world_sha256 = ", "[config.train]", "steps = 0"] {
        assert!(manifest.contains(key), "{key} missing from {manifest}");
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = TempDir::new().unwrap();
    let train = |out: &str, extra: &[&str]| {
        let base = ["train", "--world", "w-shortcut", "--seed", "4", "--steps", "10", "--batch-size", "8", "--out", out];
        code(&run(&[&base[..], extra].concat()))
    };
    let (a, b, c) = (path(&dir, "a"), path(&dir, "b"), path(&dir, "c"));
    assert_eq!(train(&a, &["--checkpoint-every", "5"]), 0);
    assert_eq!(train(&b, &["--checkpoint-every", "5"]), 0);
    // Manifests differ only in the echoed output directory.
    for f in ["metrics.csv", "checkpoint.toml", "checkpoints/step-000005.toml"] {
        assert_eq!(read(Path::new(&a).join(f)), read(Path::new(&b).join(f)), "{f}");
    }
    let mid = Path::new(&a).join("checkpoints/step-000005.toml");
    assert_eq!(train(&c, &["--resume", mid.to_str().unwrap()]), 0);
    assert_eq!(read(Path::new(&a).join("checkpoint.toml")), read(Path::new(&c).join("checkpoint.toml")));
    assert_eq!(read(Path::new(&c).join("metrics.csv")).lines().count(), 6);
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(&["train", "--world", "w-verify", "--out", &path(&dir, "t")])), 2);
    assert_eq!(code(&run(&["compat", "--source", "random", "--out", &path(&dir, "c")])), 2);
}

#[test]
fn config_is_strict_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "exp.toml");
    let out_dir = path(&dir, "out");
    fs::write(&cfg, format!("world = \"w-ind\"\nseed = 1\noutput_dir = {out_dir:?}\n\n[train]\nsteps = 3\nbatch_size = 4\n")).unwrap();
    assert_eq!(code(&run(&["train", "--config", &cfg, "--steps", "2"])), 0);
    assert_eq!(read(Path::new(&out_dir).join("metrics.csv")).lines().count(), 3);
    let manifest = read(Path::new(&out_dir).join("manifest.toml"));
    assert!(manifest.contains("steps = 2") && manifest.contains("batch_size = 4"), "{manifest}");

    fs::write(&cfg, "world = \"w-ind\"\nseed = 1\ncolour = \"blue\"\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", &out_dir])), 2);
    fs::write(&cfg, "world = \"w-ind\"\nseed = 1\n[train]\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", &out_dir])), 2);
}

#[test]
fn exact_compat_has_zero_residual() {
    let dir = TempDir::new().unwrap();
    let out_dir = path(&dir, "c");
    assert_eq!(code(&run(&["compat", "--world", "w-verify", "--out", &out_dir])), 0);
    let summary = read(Path::new(&out_dir).join("summary.csv"));
    let median: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("residual_q0.5,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(median < 1e-8);
}

#[test]
fn compat_instances_round_trip() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (path(&dir, "a"), path(&dir, "b"), path(&dir, "c"));
    for out in [&a, &b] {
        assert_eq!(code(&run(&["compat", "--source", "random", "--seed", "11", "--count", "5", "--out", out])), 0);
    }
    assert_eq!(read(Path::new(&a).join("compat.csv")), read(Path::new(&b).join("compat.csv")));
    let instances = Path::new(&a).join("instances.csv");
    assert_eq!(code(&run(&["compat", "--source", "file", "--instances", instances.to_str().unwrap(), "--out", &c])), 0);
    assert_eq!(read(Path::new(&a).join("compat.csv")), read(Path::new(&c).join("compat.csv")));
}

#[test]
fn causal_witness_passes_on_verifier() {
    let dir = TempDir::new().unwrap();
    let out_dir = path(&dir, "c");
    let out = run(&["causal", "--world", "w-verify", "--witness-feedback", "1", "--channel", "0.9:0.2", "--out", &out_dir]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let csv = read(Path::new(&out_dir).join("causal.csv"));
    let witness: Vec<&str> = csv.lines().filter(|l| l.starts_with("one-sided-witness")).collect();
    assert!(!witness.is_empty());
    assert!(witness.iter().all(|l| l.contains(",pass,")), "{csv}");
    assert!(read(Path::new(&out_dir).join("summary.csv")).contains("fail,0"));
    assert_eq!(code(&run(&["causal", "--world", "w-verify", "--channel", "0.9", "--out", &out_dir])), 2);
}
