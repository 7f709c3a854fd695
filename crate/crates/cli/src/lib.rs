// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline driver behind the `facetsteer` binary.
//!
//! Every command reads a [`PipelineConfig`], reads the artifacts earlier
//! stages left in the output directory, writes its own artifacts and a
//! manifest under `manifests/<command>.json` listing each file's SHA-256.
//! Manifests carry no timestamps, so identical inputs give identical
//! manifests.

pub mod config;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use facetsteer_core::util::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::PipelineConfig;

/// Exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    CorpusGen,
    CorpusValidate,
    ActsSynth,
    SaeTrain,
    MaskBuild,
    CvTrain,
    CvExport,
    Caa,
    Steer,
    Sweep,
    Route,
    Eval,
    Pipeline,
}

impl Command {
    pub const ALL: [Command; 13] = [
        Command::CorpusGen,
        Command::CorpusValidate,
        Command::ActsSynth,
        Command::SaeTrain,
        Command::MaskBuild,
        Command::CvTrain,
        Command::CvExport,
        Command::Caa,
        Command::Steer,
        Command::Sweep,
        Command::Route,
        Command::Eval,
        Command::Pipeline,
    ];

    /// Stage order used by `pipeline`.
    pub const STAGES: [Command; 12] = [
        Command::CorpusGen,
        Command::CorpusValidate,
        Command::ActsSynth,
        Command::SaeTrain,
        Command::MaskBuild,
        Command::CvTrain,
        Command::CvExport,
        Command::Caa,
        Command::Steer,
        Command::Sweep,
        Command::Route,
        Command::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::CorpusGen => "corpus-gen",
            Command::CorpusValidate => "corpus-validate",
            Command::ActsSynth => "acts-synth",
            Command::SaeTrain => "sae-train",
            Command::MaskBuild => "mask-build",
            Command::CvTrain => "cv-train",
            Command::CvExport => "cv-export",
            Command::Caa => "caa",
            Command::Steer => "steer",
            Command::Sweep => "sweep",
            Command::Route => "route",
            Command::Eval => "eval",
            Command::Pipeline => "pipeline",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Stage { stage: Command, source: anyhow::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Stage { .. } => EXIT_STAGE_FAILURE,
        }
    }

    /// Machine-readable report printed on stderr.
    pub fn report(&self) -> serde_json::Value {
        let (kind, stage) = match self {
            CliError::Usage(_) => ("usage", None),
            CliError::Config(_) => ("config", None),
            CliError::Stage { stage, .. } => ("stage", Some(stage.name())),
        };
        json!({
            "status": "error",
            "exit_code": self.exit_code(),
            "kind": kind,
            "stage": stage,
            "message": self.to_string(),
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage { stage, source } => write!(f, "stage {stage} failed: {source:#}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }
}

/// Output directory plus the artifacts written by the running command.
pub struct Ctx {
    pub cfg: PipelineConfig,
    written: BTreeMap<String, ArtifactEntry>,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            written: BTreeMap::new(),
        }
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    /// Write an artifact and record its checksum.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
        }
        std::fs::write(&p, bytes).map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display()))?;
        self.written.insert(
            rel.to_string(),
            ArtifactEntry {
                path: rel.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Path of an artifact an earlier stage must have produced.
    pub fn require(&self, rel: &str, producer: Command) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            anyhow::bail!("missing artifact {rel}; run `{producer}` first");
        }
        Ok(p)
    }

    fn take_artifacts(&mut self) -> Vec<ArtifactEntry> {
        std::mem::take(&mut self.written).into_values().collect()
    }

    fn manifest(&self, command: Command, artifacts: Vec<ArtifactEntry>) -> Manifest {
        let mut echo = serde_json::to_value(&self.cfg).expect("config serializes");
        // the output location is where the manifest lives, not part of the run
        echo["output_dir"] = json!(".");
        Manifest {
            command: command.name().to_string(),
            config_version: self.cfg.version,
            seed: self.cfg.seed,
            config: echo,
            artifacts,
        }
    }

    fn write_manifest(&self, rel: &str, m: &Manifest) -> anyhow::Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut s = serde_json::to_string_pretty(m)?;
        s.push('\n');
        std::fs::write(&p, s).map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display()))?;
        Ok(())
    }
}

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Load the config and run `command`. Returns the manifest written.
pub fn run(command: Command, config_path: &Path, overrides: &Overrides) -> Result<Manifest, CliError> {
    let mut cfg = PipelineConfig::load(config_path)?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.output_dir {
        cfg.output_dir = o.clone();
    }
    run_with_config(command, cfg)
}

pub fn run_with_config(command: Command, cfg: PipelineConfig) -> Result<Manifest, CliError> {
    let mut ctx = Ctx::new(cfg);
    let stage_err = |stage: Command| move |source: anyhow::Error| CliError::Stage { stage, source };
    std::fs::create_dir_all(ctx.out())
        .map_err(|e| CliError::Config(format!("cannot create output_dir {}: {e}", ctx.out().display())))?;

    let commands: Vec<Command> = if command == Command::Pipeline {
        Command::STAGES.to_vec()
    } else {
        vec![command]
    };
    let mut all = Vec::new();
    let mut last = None;
    for c in commands {
        stages::run_stage(c, &mut ctx).map_err(stage_err(c))?;
        let artifacts = ctx.take_artifacts();
        let m = ctx.manifest(c, artifacts.clone());
        ctx.write_manifest(&format!("manifests/{c}.json"), &m)
            .map_err(stage_err(c))?;
        all.extend(artifacts);
        last = Some(m);
    }
    if command == Command::Pipeline {
        all.sort_by(|a, b| a.path.cmp(&b.path));
        let m = ctx.manifest(Command::Pipeline, all);
        ctx.write_manifest("manifest.json", &m)
            .map_err(stage_err(Command::Pipeline))?;
        return Ok(m);
    }
    Ok(last.expect("at least one command ran"))
}
