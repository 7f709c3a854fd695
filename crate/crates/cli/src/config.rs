// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative pipeline configuration.
//!
//! One JSON document drives every command. The top-level keys are all
//! required; inside a stage, omitted keys take the documented defaults.
//! Relative paths are resolved against the directory holding the config file.
//! A stage's effective seed is its own `seed` if set, else the global one,
//! and it replaces any `seed` field inside that stage's nested configs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use facetsteer_core::corpus::ClassifierConfig;
use facetsteer_core::featsel::ProbeConfig;
use facetsteer_core::steering::ToyConfig;
use facetsteer_core::{FacetId, LossConfig, OptConfig, RoutingPolicy, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusStage,
    pub activations: ActivationsStage,
    pub sae: SaeStage,
    pub featsel: FeatselStage,
    pub cvtrain: CvtrainStage,
    pub steering: SteeringStage,
    pub routing: RoutingStage,
    pub eval: EvalStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusStage {
    pub seed: Option<u64>,
    pub per_facet: usize,
    /// Use this JSONL corpus instead of generating one.
    pub input: Option<PathBuf>,
    pub classifier: ClassifierConfig,
    /// Fail `corpus-validate` when held-out macro-F1 falls below this.
    pub min_macro_f1: f64,
}

impl Default for CorpusStage {
    fn default() -> Self {
        Self {
            seed: None,
            per_facet: 250,
            input: None,
            classifier: ClassifierConfig::default(),
            min_macro_f1: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationsStage {
    pub seed: Option<u64>,
    /// An FSTA file from the extractor; replaces synthesis.
    pub input: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeStage {
    pub seed: Option<u64>,
    /// Defaults to 4 x d_model.
    pub d_latent: Option<usize>,
    pub l1_coeff: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SaeStage {
    fn default() -> Self {
        let d = facetsteer_core::SaeConfig::for_width(1);
        Self {
            seed: None,
            d_latent: None,
            l1_coeff: d.l1_coeff,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatselStage {
    pub seed: Option<u64>,
    pub d_steer: usize,
    pub probe: ProbeConfig,
    /// Facets to build masks and vectors for; all 30 when absent.
    pub facets: Option<Vec<FacetId>>,
}

impl Default for FeatselStage {
    fn default() -> Self {
        Self {
            seed: None,
            d_steer: 32,
            probe: ProbeConfig::default(),
            facets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationStage {
    pub enabled: bool,
    pub facets: Vec<FacetId>,
    pub held_out_fraction: f64,
    pub loss: LossConfig,
}

impl Default for AblationStage {
    fn default() -> Self {
        Self {
            enabled: true,
            facets: ["Ideas", "Trust", "Order"]
                .iter()
                .map(|n| FacetId::from_name(n).expect("taxonomy name"))
                .collect(),
            held_out_fraction: 0.3,
            loss: LossConfig::ablation(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvtrainStage {
    pub seed: Option<u64>,
    pub loss: LossConfig,
    pub opt: OptConfig,
    pub ablation: AblationStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringStage {
    pub seed: Option<u64>,
    /// `d_model` must match the activations.
    pub toy: ToyConfig,
    /// Injection layer; the toy's middle layer when absent.
    pub layer: Option<usize>,
    pub alpha: f64,
    /// Facets exercised by `steer`.
    pub facets: Vec<FacetId>,
    pub sweep_facet: FacetId,
    pub alphas: Vec<f64>,
    pub n_inputs: usize,
}

impl Default for SteeringStage {
    fn default() -> Self {
        let f = |n: &str| FacetId::from_name(n).expect("taxonomy name");
        Self {
            seed: None,
            toy: ToyConfig::default(),
            layer: None,
            alpha: 1.0,
            facets: vec![f("Ideas"), f("Warmth")],
            sweep_facet: f("Ideas"),
            alphas: vec![0.0, 0.5, 1.0, 2.0],
            n_inputs: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Keyword,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Stub,
    External,
}

/// OpenAI-compatible endpoint. The key comes from `FACETSTEER_API_KEY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalClient {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub max_in_flight: usize,
}

impl Default for ExternalClient {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "judge".into(),
            timeout_secs: 60,
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingStage {
    pub policy: RoutingPolicy,
    pub scorer: ScorerKind,
    pub external: ExternalClient,
    pub queries: Vec<String>,
    pub alpha_map: BTreeMap<FacetId, f64>,
}

impl Default for RoutingStage {
    fn default() -> Self {
        Self {
            policy: RoutingPolicy::default(),
            scorer: ScorerKind::Keyword,
            external: ExternalClient::default(),
            queries: vec![
                "writing advice".into(),
                "help me plan a surprise party for my team".into(),
                "what is the boiling point of water".into(),
            ],
            alpha_map: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub seed: Option<u64>,
    pub threshold: f64,
    pub judge: JudgeKind,
    pub external: ExternalClient,
    /// Questions JSONL; the built-in demo set when absent.
    pub questions: Option<PathBuf>,
    /// Truth labels JSON; the synthetic roster's labels when absent.
    pub truth: Option<PathBuf>,
    /// Responses JSONL `{character_id, question_id, response}`. When absent,
    /// template responses are synthesized from the truth labels plus seeded
    /// noise so the judge and metrics can be exercised offline.
    pub responses: Option<PathBuf>,
    pub questions_per_character: usize,
    pub demo_noise: f64,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            seed: None,
            threshold: 0.5,
            judge: JudgeKind::Stub,
            external: ExternalClient::default(),
            questions: None,
            truth: None,
            responses: None,
            questions_per_character: 8,
            demo_noise: 0.15,
        }
    }
}

impl PipelineConfig {
    /// Parse and validate, resolving relative paths against `base`.
    pub fn from_json(src: &str, base: &Path) -> Result<Self, CliError> {
        let raw: serde_json::Value =
            serde_json::from_str(src).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        match raw.get("version") {
            None => return Err(CliError::Config("missing config key `version`".into())),
            Some(v) if v.as_u64() != Some(u64::from(CONFIG_VERSION)) => {
                return Err(CliError::Config(format!(
                    "unsupported config version {v}; this build reads version {CONFIG_VERSION}"
                )))
            }
            Some(_) => {}
        }
        let mut cfg: PipelineConfig =
            serde_json::from_value(raw).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&src, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            self.corpus.input.as_mut(),
            self.activations.input.as_mut(),
            self.eval.questions.as_mut(),
            self.eval.truth.as_mut(),
            self.eval.responses.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.corpus.input.is_none() && self.corpus.per_facet == 0 {
            return bad("corpus.per_facet must be at least 1".into());
        }
        for (key, p) in [
            ("corpus.input", &self.corpus.input),
            ("activations.input", &self.activations.input),
            ("eval.questions", &self.eval.questions),
            ("eval.truth", &self.eval.truth),
            ("eval.responses", &self.eval.responses),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{key}: file {} does not exist", p.display()));
                }
            }
        }
        if self.featsel.d_steer == 0 {
            return bad("featsel.d_steer must be positive".into());
        }
        if self.steering.alphas.is_empty() {
            return bad("steering.alphas must not be empty".into());
        }
        if self.steering.n_inputs == 0 {
            return bad("steering.n_inputs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cvtrain.ablation.held_out_fraction)
            || self.cvtrain.ablation.held_out_fraction == 0.0
        {
            return bad("cvtrain.ablation.held_out_fraction must lie in (0, 1)".into());
        }
        if self.eval.questions_per_character == 0 {
            return bad("eval.questions_per_character must be positive".into());
        }
        self.routing
            .policy
            .validate()
            .map_err(|e| CliError::Config(format!("routing.policy: {e}")))?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: Option<u64>) -> u64 {
        stage.unwrap_or(self.seed)
    }

    /// Facets covered by masks and control vectors.
    pub fn facets(&self) -> Vec<FacetId> {
        match &self.featsel.facets {
            Some(f) => f.clone(),
            None => FacetId::all().collect(),
        }
    }
}
