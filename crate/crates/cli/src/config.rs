//! Experiment files, world resolution and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use credit_lab::policy::TeacherMode;
use credit_lab::trainer::TrainConfig;
use credit_lab::world::{builtin, WorldSpec};
use credit_lab::Dims;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One experiment file. Every section is optional; each command reads its
/// own. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in name (`w-verify`, `w-rand:7`, …) or path to a world file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<String>,
    /// Master seed; copied into `[train]` and used for random instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compat: Option<CompatConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub causal: Option<CausalConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Check families to run; empty runs all of them.
    pub families: Vec<String>,
    /// Replaces every check's tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub lambdas: Vec<f64>,
    /// Student, reference and teacher tables from a training checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub teacher_mode: TeacherMode,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            families: Vec::new(),
            tolerance: None,
            lambdas: vec![0.0, 0.1, 1.0],
            checkpoint: None,
            teacher_mode: TeacherMode::ExactPosterior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CompatSource {
    /// Exact posteriors of the world at every prefix.
    #[default]
    Exact,
    /// Learned teacher tables from a checkpoint.
    Learned,
    /// Seeded Dirichlet instances.
    Random,
    /// An instances CSV.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompatConfig {
    pub source: CompatSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Random source: instance `i` is drawn from seed `seed + i`.
    pub count: u64,
    pub letters: usize,
    pub feedback: usize,
    /// Fail instances whose shape has no letter/feedback alignment.
    pub require_fidelity: bool,
}

impl Default for CompatConfig {
    fn default() -> Self {
        CompatConfig {
            source: CompatSource::Exact,
            instances: None,
            checkpoint: None,
            count: 100,
            letters: 4,
            feedback: 4,
            require_fidelity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalConfig {
    /// Success feedback for the one-sided witness; defaults to the world's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_feedback: Option<usize>,
    pub channels: Vec<ChannelConfig>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn world(&self) -> Result<LoadedWorld> {
        match &self.world {
            Some(spec) => LoadedWorld::resolve(spec),
            None => bail!("no world given: pass --world or set `world` in the config"),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.context("this command is stochastic: pass --seed or set `seed` in the config")
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .context("no output directory: pass --out or set `output_dir` in the config")
    }
}

/// A world plus the canonical text it was hashed from.
pub struct LoadedWorld {
    pub spec: WorldSpec,
    pub sha256: String,
}

impl LoadedWorld {
    /// A path that exists is read as a world file; anything else must be a
    /// built-in name.
    pub fn resolve(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        let world = if path.is_file() {
            let text = fs::read_to_string(path).with_context(|| format!("reading world {spec}"))?;
            WorldSpec::parse(&text).with_context(|| format!("loading world {spec}"))?
        } else {
            builtin(spec)?
        };
        Ok(Self::new(world))
    }

    pub fn new(spec: WorldSpec) -> Self {
        let sha256 = hex(&Sha256::digest(spec.file().to_toml().as_bytes()));
        LoadedWorld { spec, sha256 }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    world: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    world_sha256: Option<&'a str>,
    config: &'a ExperimentConfig,
}

/// Write `manifest.toml`: the effective config plus provenance of the run.
pub fn write_manifest(dir: &Path, command: &str, config: &ExperimentConfig, world: Option<&LoadedWorld>) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        world: world.map(|w| w.spec.name()),
        world_sha256: world.map(|w| w.sha256.as_str()),
        config,
    };
    write(dir.join("manifest.toml"), toml::to_string(&manifest)?)
}

pub fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `X,V,T,Z`.
pub fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, v, t, z] => Ok(Dims::new(x, v, t, z)),
        _ => Err(format!("expected X,V,T,Z, got {s:?}")),
    }
}

/// `a:b` for a binary channel, or `q1,q1,…:q0,q0,…`.
pub fn parse_channel(s: &str) -> Result<ChannelConfig, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected Q1:Q0, got {s:?}"))?;
    let list = |part: &str| -> Result<Vec<f64>, String> {
        part.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect()
    };
    let (q1, q0) = (list(a)?, list(b)?);
    Ok(match (&q1[..], &q0[..]) {
        ([a], [b]) => ChannelConfig { q1: vec![1.0 - a, *a], q0: vec![1.0 - b, *b] },
        _ => ChannelConfig { q1, q0 },
    })
}
