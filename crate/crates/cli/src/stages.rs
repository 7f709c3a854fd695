// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per command. Artifact names are fixed relative to the
//! output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use facetsteer_core::activations::{load_activations, synthesize_activations};
use facetsteer_core::client::{bounded_map, ChatClient, HttpChatClient, RetryPolicy};
use facetsteer_core::corpus::{generate_synthetic_corpus, load_corpus, train_leakage_classifier, validate_corpus};
use facetsteer_core::cvtrain::{caa_vector, cl_ablation, facet_codes, import_cv, train_cvs};
use facetsteer_core::eval::{
    compute_metrics, demo_questions, load_questions, load_truth, roster_truth, synthetic_roster, template_response,
    CharacterProfile, ExternalJudge, Judge, JudgedScore, StubJudge, UNITS_NOTE,
};
use facetsteer_core::featsel::{select_features, FeatureMask, MaskArtifact};
use facetsteer_core::linalg::{cosine, dot, norm, sub};
use facetsteer_core::routing::{compose_injection, select_cvs, ExternalScorer, FacetScorer, KeywordScorer};
use facetsteer_core::sae::{sae_metrics, train_sae};
use facetsteer_core::steering::{alpha_sweep, run_toy, toy_metrics, ToyConfig};
use facetsteer_core::util::{gaussian_rows, seeded_rng};
use facetsteer_core::{
    ActivationSet, ControlVector, Dimension, FacetCorpus, FacetId, InjectionPlan, PlantedGroundTruth, SaeConfig,
    SaeModel, ToyModel,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExternalClient, JudgeKind, ScorerKind};
use crate::{Command, Ctx};

const CORPUS: &str = "corpus.jsonl";
const ACTS: &str = "activations.fsta";
const GROUND_TRUTH: &str = "ground_truth.json";
const SAE: &str = "sae.bin";
const CAA: &str = "caa_vectors.json";

fn mask_path(f: FacetId) -> String {
    format!("masks/{}.json", f.slug())
}

fn cv_path(f: FacetId) -> String {
    format!("cvs/{}.json", f.slug())
}

pub(crate) fn run_stage(c: Command, ctx: &mut Ctx) -> Result<()> {
    match c {
        Command::CorpusGen => corpus_gen(ctx),
        Command::CorpusValidate => corpus_validate(ctx),
        Command::ActsSynth => acts_synth(ctx),
        Command::SaeTrain => sae_train(ctx),
        Command::MaskBuild => mask_build(ctx),
        Command::CvTrain => cv_train(ctx),
        Command::CvExport => cv_export(ctx),
        Command::Caa => caa(ctx),
        Command::Steer => steer(ctx),
        Command::Sweep => sweep(ctx),
        Command::Route => route(ctx),
        Command::Eval => eval(ctx),
        Command::Pipeline => unreachable!("pipeline is expanded by the caller"),
    }
}

// ---------------------------------------------------------------------------
// loaders

fn corpus(ctx: &Ctx) -> Result<FacetCorpus> {
    Ok(load_corpus(&ctx.require(CORPUS, Command::CorpusGen)?)?)
}

fn activations(ctx: &Ctx) -> Result<ActivationSet> {
    Ok(load_activations(&ctx.require(ACTS, Command::ActsSynth)?)?)
}

fn sae(ctx: &Ctx) -> Result<SaeModel> {
    Ok(SaeModel::load(&ctx.require(SAE, Command::SaeTrain)?)?)
}

fn ground_truth(ctx: &Ctx) -> Result<Option<PlantedGroundTruth>> {
    let p = ctx.path(GROUND_TRUTH);
    if !p.is_file() {
        return Ok(None);
    }
    let s = std::fs::read_to_string(&p)?;
    Ok(Some(
        serde_json::from_str(&s).with_context(|| format!("parsing {GROUND_TRUTH}"))?,
    ))
}

fn mask(ctx: &Ctx, f: FacetId) -> Result<FeatureMask> {
    let p = ctx.require(&mask_path(f), Command::MaskBuild)?;
    let a: MaskArtifact =
        serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
    Ok(FeatureMask::from_artifact(&a)?)
}

fn control_vector(ctx: &Ctx, f: FacetId) -> Result<ControlVector> {
    Ok(import_cv(&ctx.require(&cv_path(f), Command::CvTrain)?)?)
}

/// Every configured facet whose vector file exists.
fn available_cvs(ctx: &Ctx) -> Result<BTreeMap<FacetId, ControlVector>> {
    let mut out = BTreeMap::new();
    for f in ctx.cfg.facets() {
        if ctx.path(&cv_path(f)).is_file() {
            out.insert(f, control_vector(ctx, f)?);
        }
    }
    if out.is_empty() {
        bail!("no control vectors found under cvs/; run `cv-train` first");
    }
    Ok(out)
}

fn chat_client(c: &ExternalClient) -> HttpChatClient {
    HttpChatClient::from_env(&c.base_url, &c.model, Duration::from_secs(c.timeout_secs))
}

fn retry(c: &ExternalClient) -> RetryPolicy {
    RetryPolicy {
        max_retries: c.max_retries,
        ..RetryPolicy::default()
    }
}

// ---------------------------------------------------------------------------
// corpus

fn corpus_gen(ctx: &mut Ctx) -> Result<()> {
    let st = &ctx.cfg.corpus;
    let c = match &st.input {
        Some(p) => load_corpus(p)?,
        None => generate_synthetic_corpus(ctx.cfg.stage_seed(st.seed), st.per_facet)?,
    };
    ctx.write(CORPUS, c.to_jsonl().as_bytes())
}

fn corpus_validate(ctx: &mut Ctx) -> Result<()> {
    let c = corpus(ctx)?;
    let st = ctx.cfg.corpus.clone();
    let report = validate_corpus(&c);
    let cls_cfg = facetsteer_core::corpus::ClassifierConfig {
        seed: ctx.cfg.stage_seed(st.seed),
        ..st.classifier
    };
    let clf = train_leakage_classifier(&c, &cls_cfg)?;
    let (_, held) = clf.split(&c);
    let leak = clf.evaluate(&held)?;
    let clean = report.is_clean();
    let f1_ok = leak.macro_f1 >= st.min_macro_f1;
    ctx.write_json(
        "corpus_validation.json",
        &json!({
            "clean": clean,
            "macro_f1_ok": f1_ok,
            "min_macro_f1": st.min_macro_f1,
            "structure": report,
            "leakage": leak,
        }),
    )?;
    ctx.write("leakage_classifier.json", clf.to_json().as_bytes())?;
    if !clean {
        bail!(
            "corpus has {} structural violations (see corpus_validation.json)",
            report.violation_count()
        );
    }
    if !f1_ok {
        bail!(
            "leakage macro-F1 {:.4} below the required {:.4}",
            leak.macro_f1,
            st.min_macro_f1
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// activations and SAE

fn acts_synth(ctx: &mut Ctx) -> Result<()> {
    let st = ctx.cfg.activations.clone();
    if let Some(p) = &st.input {
        let a = load_activations(p)?;
        ctx.write(ACTS, &a.to_bytes()?)?;
        // imported activations have no planted directions
        let gt = ctx.path(GROUND_TRUTH);
        if gt.is_file() {
            std::fs::remove_file(&gt)?;
        }
        return Ok(());
    }
    let c = corpus(ctx)?;
    let (a, truth) = synthesize_activations(&c, &st.synth, ctx.cfg.stage_seed(st.seed))?;
    ctx.write(ACTS, &a.to_bytes()?)?;
    ctx.write_json(GROUND_TRUTH, &truth)
}

fn sae_train(ctx: &mut Ctx) -> Result<()> {
    let a = activations(ctx)?;
    let st = &ctx.cfg.sae;
    let cfg = SaeConfig {
        d_model: a.d_model,
        d_latent: st.d_latent.unwrap_or(4 * a.d_model),
        l1_coeff: st.l1_coeff,
        learning_rate: st.learning_rate,
        epochs: st.epochs,
        batch_size: st.batch_size,
        seed: ctx.cfg.stage_seed(st.seed),
    };
    let m = train_sae(&a, &cfg)?;
    let metrics = sae_metrics(&m, &a)?;
    ctx.write(SAE, &m.to_checkpoint_bytes()?)?;
    ctx.write_json(
        "sae_metrics.json",
        &json!({
            "metrics": metrics,
            "loss_trace": m.loss_trace,
            "loss_non_increasing": m.loss_non_increasing(1e-6),
            "checksum": m.checksum()?,
        }),
    )
}

// ---------------------------------------------------------------------------
// masks and control vectors

fn mask_build(ctx: &mut Ctx) -> Result<()> {
    let a = activations(ctx)?;
    let m = sae(ctx)?;
    let st = ctx.cfg.featsel.clone();
    let probe = facetsteer_core::featsel::ProbeConfig {
        seed: ctx.cfg.stage_seed(st.seed),
        ..st.probe
    };
    for f in ctx.cfg.facets() {
        let (codes, labels) = facet_codes(&m, &a, f)?;
        let mask = select_features(&codes, &labels, st.d_steer, &probe).with_context(|| format!("facet {f}"))?;
        ctx.write_json(&mask_path(f), &mask.to_artifact())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CvSummary {
    facet: FacetId,
    final_total_loss: f64,
    decoded_norm: f64,
    cosine_to_planted: Option<f64>,
}

fn cv_train(ctx: &mut Ctx) -> Result<()> {
    let a = activations(ctx)?;
    let m = sae(ctx)?;
    let truth = ground_truth(ctx)?;
    let st = ctx.cfg.cvtrain.clone();
    let opt = facetsteer_core::OptConfig {
        seed: ctx.cfg.stage_seed(st.seed),
        ..st.opt
    };
    let mut masks = BTreeMap::new();
    for f in ctx.cfg.facets() {
        masks.insert(f, mask(ctx, f)?);
    }
    let cvs = train_cvs(&m, &a, &masks, &st.loss, &opt)?;
    let mut summary = Vec::new();
    for cv in &cvs {
        ctx.write(&cv_path(cv.facet), cv.to_json().as_bytes())?;
        summary.push(CvSummary {
            facet: cv.facet,
            final_total_loss: cv.training_meta.final_loss.total,
            decoded_norm: norm(&cv.decoded),
            cosine_to_planted: truth.as_ref().map(|t| cosine(&cv.decoded, t.direction(cv.facet))),
        });
    }
    ctx.write_json("cv_summary.json", &summary)?;

    if st.ablation.enabled {
        let mut reports = Vec::new();
        for f in &st.ablation.facets {
            let mk = masks
                .get(f)
                .with_context(|| format!("ablation facet {f} has no mask"))?;
            let r = cl_ablation(&m, &a, *f, mk, &st.ablation.loss, &opt, st.ablation.held_out_fraction)?;
            let holds = r.contrastive_pattern_holds();
            reports.push(json!({ "report": r, "contrastive_pattern_holds": holds }));
        }
        ctx.write_json(
            "cl_ablation.json",
            &json!({
                "loss": st.ablation.loss,
                "opt": opt,
                "held_out_fraction": st.ablation.held_out_fraction,
                "facets": reports,
            }),
        )?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ExportedVector {
    d_steer: usize,
    decoded: Vec<f64>,
}

fn cv_export(ctx: &mut Ctx) -> Result<()> {
    let m = sae(ctx)?;
    let cvs = available_cvs(ctx)?;
    let mut vectors = BTreeMap::new();
    for cv in cvs.values() {
        cv.verify_against(&m)
            .with_context(|| format!("control vector {}", cv.facet))?;
        vectors.insert(
            cv.facet,
            ExportedVector {
                d_steer: cv.mask_indices.len(),
                decoded: cv.decoded.clone(),
            },
        );
    }
    let first = cvs.values().next().expect("non-empty");
    ctx.write_json(
        "control_vectors.json",
        &json!({
            "sae_checksum": m.checksum()?,
            "model_tag": first.model_tag,
            "layer": first.layer,
            "d_model": m.d_model(),
            "vectors": vectors,
        }),
    )
}

fn caa(ctx: &mut Ctx) -> Result<()> {
    let a = activations(ctx)?;
    let truth = ground_truth(ctx)?;
    let mut out = BTreeMap::new();
    for f in ctx.cfg.facets() {
        let v = caa_vector(&a, f)?;
        let cv = ctx.path(&cv_path(f));
        let cos_cv = if cv.is_file() {
            Some(cosine(&v, &import_cv(&cv)?.decoded))
        } else {
            None
        };
        out.insert(
            f,
            json!({
                "vector": v,
                "cosine_to_planted": truth.as_ref().map(|t| cosine(&v, t.direction(f))),
                "cosine_to_control_vector": cos_cv,
            }),
        );
    }
    ctx.write_json(CAA, &out)
}

// ---------------------------------------------------------------------------
// steering

fn toy_cfg(ctx: &Ctx, d_model: usize) -> Result<ToyConfig> {
    let st = &ctx.cfg.steering;
    if st.toy.d_model != d_model {
        bail!(
            "steering.toy.d_model is {} but vectors have d_model {d_model}",
            st.toy.d_model
        );
    }
    Ok(ToyConfig {
        seed: ctx.cfg.stage_seed(st.seed),
        ..st.toy
    })
}

fn probe_inputs(ctx: &Ctx, d_model: usize) -> Vec<Vec<f64>> {
    let st = &ctx.cfg.steering;
    gaussian_rows(ctx.cfg.stage_seed(st.seed), 0x57EE, st.n_inputs, d_model, 1.0)
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn steer(ctx: &mut Ctx) -> Result<()> {
    let st = ctx.cfg.steering.clone();
    let mut rows = Vec::new();
    for f in &st.facets {
        let cv = control_vector(ctx, *f)?;
        let d = cv.d_model();
        let model = ToyModel::new(toy_cfg(ctx, d)?)?;
        let layer = st.layer.unwrap_or(model.default_layer());
        let inputs = probe_inputs(ctx, d);
        let plan = InjectionPlan::single_layer(layer, cv.decoded.clone(), st.alpha, Some(*f))?;
        let zero = plan.with_alpha(0.0);
        let vhat_norm = norm(&cv.decoded);
        let (mut zero_identical, mut empty_identical) = (true, true);
        let mut lin_err: f64 = 0.0;
        let (mut proj_base, mut proj_steered) = (0.0, 0.0);
        for h in &inputs {
            let base = model.forward(h)?;
            let run = run_toy(&model, h, &plan)?;
            zero_identical &= bits(&run_toy(&model, h, &zero)?.logits) == bits(&base.logits);
            empty_identical &= bits(&run_toy(&model, h, &InjectionPlan::empty())?.logits) == bits(&base.logits);
            // blocks before and at `layer` are untouched, so the traces differ by exactly alpha v
            let along = dot(&sub(&run.trace[layer], &base.trace[layer]), &cv.decoded) / vhat_norm;
            lin_err = lin_err.max((along - st.alpha * vhat_norm).abs() / (st.alpha * vhat_norm).abs().max(1.0));
            proj_base += dot(&base.hidden, &cv.decoded) / vhat_norm;
            proj_steered += dot(&run.hidden, &cv.decoded) / vhat_norm;
        }
        let n = inputs.len() as f64;
        rows.push(json!({
            "facet": f,
            "layer": layer,
            "alpha": st.alpha,
            "vector_norm": vhat_norm,
            "mean_final_projection_base": proj_base / n,
            "mean_final_projection_steered": proj_steered / n,
            "injection_linearity_max_rel_error": lin_err,
            "alpha_zero_bit_identical": zero_identical,
            "empty_plan_bit_identical": empty_identical,
        }));
    }
    ctx.write_json("steer_report.json", &rows)
}

fn sweep(ctx: &mut Ctx) -> Result<()> {
    let st = ctx.cfg.steering.clone();
    let cv = control_vector(ctx, st.sweep_facet)?;
    let d = cv.d_model();
    let model = ToyModel::aligned(toy_cfg(ctx, d)?, &cv.decoded, 0)?;
    let layer = st.layer.unwrap_or(model.default_layer());
    let inputs = probe_inputs(ctx, d);
    let template = InjectionPlan::single_layer(layer, cv.decoded.clone(), 1.0, Some(st.sweep_facet))?;
    let table = alpha_sweep(&model, |m, p| toy_metrics(m, &inputs, 0, p), &st.alphas, &template)?;
    ctx.write("sweep.csv", table.to_csv().as_bytes())?;

    // same harness with the residual mean-difference vector, when available
    let caa_path = ctx.path(CAA);
    if caa_path.is_file() {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&caa_path)?)?;
        let v: Vec<f64> = serde_json::from_value(doc[st.sweep_facet.name()]["vector"].clone())
            .with_context(|| format!("{CAA} lacks {}", st.sweep_facet))?;
        let template = InjectionPlan::single_layer(layer, v, 1.0, Some(st.sweep_facet))?;
        let table = alpha_sweep(&model, |m, p| toy_metrics(m, &inputs, 0, p), &st.alphas, &template)?;
        ctx.write("sweep_caa.csv", table.to_csv().as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// routing

fn route(ctx: &mut Ctx) -> Result<()> {
    let st = ctx.cfg.routing.clone();
    let cvs = available_cvs(ctx)?;
    let available: BTreeSet<FacetId> = cvs.keys().copied().collect();
    let d = cvs.values().next().expect("non-empty").d_model();
    let model = ToyModel::new(toy_cfg(ctx, d)?)?;
    let layer = ctx.cfg.steering.layer.unwrap_or(model.default_layer());
    let probe = probe_inputs(ctx, d).remove(0);
    let base = model.forward(&probe)?;

    let http;
    let keyword = KeywordScorer::default();
    let external;
    let (scorer, in_flight): (&dyn FacetScorer, usize) = match st.scorer {
        ScorerKind::Keyword => (&keyword, 1),
        ScorerKind::External => {
            http = chat_client(&st.external);
            external = ExternalScorer {
                retry: retry(&st.external),
                ..ExternalScorer::new(&http as &dyn ChatClient)
            };
            (&external, st.external.max_in_flight)
        }
    };
    let scored = facetsteer_core::routing::score_queries(scorer, &st.queries, in_flight);

    let mut rows = Vec::new();
    for (q, s) in st.queries.iter().zip(scored) {
        let s = s.with_context(|| format!("scoring query {q:?}"))?;
        let selected = select_cvs(&s, &st.policy, &available);
        let plan = compose_injection(&selected, &cvs, layer, &st.alpha_map, st.policy.alpha_default)?;
        let run = run_toy(&model, &probe, &plan)?;
        let mut top: Vec<(FacetId, f64)> = s.iter().filter(|(_, v)| *v > 0.0).collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        rows.push(json!({
            "query": q,
            "scorer": s.scorer_tag,
            "nonzero_scores": top.iter().map(|(f, v)| json!({"facet": f, "score": v})).collect::<Vec<_>>(),
            "selected": selected,
            "dimensions": selected.iter().map(|f| f.dimension()).collect::<BTreeSet<Dimension>>(),
            "plan": plan.entries().iter().map(|e| json!({"facet": e.facet, "layer": e.layer, "alpha": e.alpha})).collect::<Vec<_>>(),
            "output_bit_identical_to_unsteered": bits(&run.logits) == bits(&base.logits),
        }));
    }
    ctx.write_json(
        "routing.json",
        &json!({ "policy": st.policy, "layer": layer, "queries": rows }),
    )
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseLine {
    character_id: String,
    question_id: String,
    response: String,
}

fn eval(ctx: &mut Ctx) -> Result<()> {
    let st = ctx.cfg.eval.clone();
    let questions = match &st.questions {
        Some(p) => load_questions(p)?,
        None => demo_questions(),
    };
    let roster = synthetic_roster();
    let characters: Vec<CharacterProfile> = match &st.truth {
        None => roster,
        Some(p) => load_truth(p)?
            .into_iter()
            .map(|(id, truth)| CharacterProfile {
                name: id.clone(),
                description: format!("character {id}"),
                id,
                truth,
            })
            .collect(),
    };
    let truth = roster_truth(&characters);
    let by_id: BTreeMap<&str, &CharacterProfile> = characters.iter().map(|c| (c.id.as_str(), c)).collect();
    let q_by_id: BTreeMap<&str, &facetsteer_core::Question> =
        questions.questions.iter().map(|q| (q.id.as_str(), q)).collect();

    let responses: Vec<(String, String, String)> = match &st.responses {
        Some(p) => {
            let src = std::fs::read_to_string(p)?;
            let mut out = Vec::new();
            for (i, line) in src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: ResponseLine =
                    serde_json::from_str(line).with_context(|| format!("{}: line {}", p.display(), i + 1))?;
                out.push((r.character_id, r.question_id, r.response));
            }
            out
        }
        None => synth_responses(
            &characters,
            &questions.questions,
            st.questions_per_character,
            st.demo_noise,
            { ctx.cfg.stage_seed(st.seed) },
        ),
    };

    let http;
    let external;
    let (judge, in_flight): (&dyn Judge, usize) = match st.judge {
        JudgeKind::Stub => (&StubJudge, 1),
        JudgeKind::External => {
            http = chat_client(&st.external);
            external = ExternalJudge {
                retry: retry(&st.external),
                ..ExternalJudge::new(&http as &dyn ChatClient)
            };
            (&external, st.external.max_in_flight)
        }
    };
    let judged: Vec<Result<JudgedScore>> = bounded_map(&responses, in_flight, |(c, q, r)| {
        let ch = by_id
            .get(c.as_str())
            .with_context(|| format!("unknown character {c:?}"))?;
        let qu = q_by_id
            .get(q.as_str())
            .with_context(|| format!("unknown question {q:?}"))?;
        Ok(judge.judge(ch, qu, r)?)
    });
    let judged: Vec<JudgedScore> = judged.into_iter().collect::<Result<_>>()?;
    let report = compute_metrics(&judged, &truth, st.threshold)?;

    let mut lines = String::new();
    for j in &judged {
        lines.push_str(&serde_json::to_string(j)?);
        lines.push('\n');
    }
    ctx.write("judged.jsonl", lines.as_bytes())?;
    ctx.write_json("eval_report.json", &report)?;
    let csv = format!("# {UNITS_NOTE}\n{}", report.to_csv());
    ctx.write("eval_report.csv", csv.as_bytes())
}

/// Template responses whose planted scores are the truth labels pulled
/// toward the middle, plus seeded noise and an occasional repetition flag.
fn synth_responses(
    characters: &[CharacterProfile],
    questions: &[facetsteer_core::Question],
    per_character: usize,
    noise: f64,
    seed: u64,
) -> Vec<(String, String, String)> {
    let mut rng = seeded_rng(seed, 0xE7A1);
    let mut out = Vec::new();
    for c in characters {
        for q in questions.iter().take(per_character) {
            let scores: BTreeMap<Dimension, f64> = c
                .truth
                .iter()
                .map(|(d, l)| {
                    let jitter: f64 = rng.random_range(-1.0..1.0);
                    (*d, (0.2 + 0.6 * l.encode() + noise * jitter).clamp(0.0, 1.0))
                })
                .collect();
            let mut text = template_response(c, q, &scores);
            if rng.random_bool(0.05) {
                text.push_str(" [[REPEAT]]");
            }
            out.push((c.id.clone(), q.id.clone(), text));
        }
    }
    out
}
