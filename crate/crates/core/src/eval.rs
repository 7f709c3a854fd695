// SPDX-License-Identifier: MIT OR Apache-2.0

//! Question sets, pluggable judges, and the FA / MSE / MAE / MTR metrics.
//!
//! Scores live on `[0, 1]`; truth labels are encoded `low -> 0`, `high -> 1`.
//! Error magnitudes are therefore on that unit scale.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::client::{complete_structured, ChatClient, RetryPolicy};
use crate::corpus::{taxonomy, Context, Dimension, FacetId};
use crate::error::{Error, Result};
use crate::util::{fmt_sig6, read_to_string};

pub const UNITS_NOTE: &str = "scores on [0,1]; truth low=0 high=1; MSE and MAE on that scale; \
FA and MTR in percent";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Abstract,
    Contextual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub mode: Mode,
    pub dimension: Dimension,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl Question {
    /// Id up to the last `-`, shared by an abstract item and its rewrite.
    pub fn pair_key(&self) -> &str {
        self.id.rsplit_once('-').map_or(self.id.as_str(), |(p, _)| p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuestionSet {
    pub questions: Vec<Question>,
}

impl QuestionSet {
    pub fn new(questions: Vec<Question>) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::Empty("question set".into()));
        }
        let mut seen = BTreeSet::new();
        for q in &questions {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::DuplicateId(q.id.clone()));
            }
            if q.text.trim().is_empty() {
                return Err(Error::schema(format!("question {} has empty text", q.id)));
            }
            if q.mode == Mode::Contextual && q.context.as_deref().is_none_or(str::is_empty) {
                return Err(Error::schema(format!(
                    "contextual question {} lacks a context tag",
                    q.id
                )));
            }
        }
        Ok(Self { questions })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn by_mode(&self, mode: Mode) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.mode == mode)
    }

    /// `(abstract, contextual)` items sharing a pair key, in file order.
    pub fn pairs(&self) -> Vec<(&Question, &Question)> {
        let ctx: BTreeMap<&str, &Question> = self.by_mode(Mode::Contextual).map(|q| (q.pair_key(), q)).collect();
        self.by_mode(Mode::Abstract)
            .filter_map(|a| ctx.get(a.pair_key()).map(|c| (a, *c)))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.questions {
            out.push_str(&serde_json::to_string(q).expect("question serializes"));
            out.push('\n');
        }
        out
    }
}

fn line_err(line: usize, message: impl Into<String>) -> Error {
    Error::Line {
        line,
        message: message.into(),
    }
}

pub fn parse_questions(src: &str) -> Result<QuestionSet> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| line_err(line, format!("malformed JSON: {e}")))?;
        let field = |k: &str| v.get(k).and_then(Value::as_str);
        let id = field("id").ok_or_else(|| line_err(line, "missing \"id\""))?;
        let text = field("text").ok_or_else(|| line_err(line, "missing \"text\""))?;
        let mode = match field("mode") {
            Some("abstract") => Mode::Abstract,
            Some("contextual") => Mode::Contextual,
            Some(other) => return Err(line_err(line, format!("unknown mode {other:?}"))),
            None => return Err(line_err(line, "missing \"mode\"")),
        };
        let dim = field("dimension").ok_or_else(|| Error::schema(format!("line {line}: missing \"dimension\"")))?;
        let dimension = Dimension::from_name(dim)
            .or_else(|| {
                let mut cs = dim.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Dimension::from_letter(c.to_ascii_uppercase()),
                    _ => None,
                }
            })
            .ok_or_else(|| line_err(line, format!("unknown dimension {dim:?}")))?;
        if !seen.insert(id.to_string()) {
            return Err(line_err(line, format!("duplicate id {id:?}")));
        }
        out.push(Question {
            id: id.to_string(),
            text: text.to_string(),
            mode,
            dimension,
            context: field("context").map(str::to_string),
        });
    }
    QuestionSet::new(out).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("question file has no items".into()),
        e => e,
    })
}

pub fn load_questions(path: &Path) -> Result<QuestionSet> {
    parse_questions(&read_to_string(path)?)
}

/// 44 abstract items and their 44 contextual rewrites, cycling through facets.
pub fn demo_questions() -> QuestionSet {
    let t = taxonomy();
    let mut qs = Vec::with_capacity(88);
    for i in 0..44 {
        let facet = FacetId::from_ordinal(i % 30).expect("ordinal in range");
        let cues = facet.cues();
        let kw = &cues.keywords[(i / 30) % cues.keywords.len()];
        let ctx = Context::ALL[i % 4];
        let opener = &t.contexts[&ctx][(i / 4) % t.contexts[&ctx].len()];
        let key = format!("q{:02}", i + 1);
        qs.push(Question {
            id: format!("{key}-abs"),
            text: format!("How do you usually deal with {kw}?"),
            mode: Mode::Abstract,
            dimension: facet.dimension(),
            context: None,
        });
        qs.push(Question {
            id: format!("{key}-ctx"),
            text: format!("{opener}, something about {kw} comes up. How do you deal with it?"),
            mode: Mode::Contextual,
            dimension: facet.dimension(),
            context: Some(ctx.tag().to_string()),
        });
    }
    QuestionSet::new(qs).expect("demo set is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Repetition,
    OutOfCharacter,
    MultiTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedScore {
    pub character_id: String,
    pub question_id: String,
    pub scores: BTreeMap<Dimension, f64>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

impl JudgedScore {
    pub fn validate(&self) -> Result<()> {
        if let Some((d, s)) = self.scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(Error::schema(format!(
                "score {s} for {d} outside [0, 1] ({} / {})",
                self.character_id, self.question_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn encode(self) -> f64 {
        match self {
            Level::Low => 0.0,
            Level::High => 1.0,
        }
    }
}

pub type TruthLabels = BTreeMap<String, BTreeMap<Dimension, Level>>;

pub fn parse_truth(src: &str) -> Result<TruthLabels> {
    let t: TruthLabels = serde_json::from_str(src).map_err(|e| Error::schema(format!("truth labels: {e}")))?;
    for (c, dims) in &t {
        if let Some(d) = Dimension::ALL.into_iter().find(|d| !dims.contains_key(d)) {
            return Err(Error::schema(format!("character {c} lacks a {d} label")));
        }
    }
    Ok(t)
}

pub fn load_truth(path: &Path) -> Result<TruthLabels> {
    parse_truth(&read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub id: String,
    pub name: String,
    pub description: String,
    pub truth: BTreeMap<Dimension, Level>,
}

const ROSTER_NAMES: [&str; 26] = [
    "Ada", "Bram", "Cleo", "Dario", "Edda", "Fenn", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Lev", "Mira", "Nils",
    "Oona", "Pavel", "Quinn", "Rosa", "Sven", "Tove", "Ugo", "Vera", "Wren", "Xavi", "Yara", "Zeno",
];

/// 26 synthetic profile stubs with distinct Big Five label patterns.
pub fn synthetic_roster() -> Vec<CharacterProfile> {
    ROSTER_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            // 11 is odd, so i -> 11 i + 5 (mod 32) never repeats a pattern
            let bits = (11 * i + 5) % 32;
            let truth: BTreeMap<Dimension, Level> = Dimension::ALL
                .into_iter()
                .map(|d| {
                    (
                        d,
                        if bits >> d.ordinal() & 1 == 1 {
                            Level::High
                        } else {
                            Level::Low
                        },
                    )
                })
                .collect();
            let traits: Vec<String> = truth
                .iter()
                .map(|(d, l)| format!("{} {}", if *l == Level::High { "high" } else { "low" }, d))
                .collect();
            CharacterProfile {
                id: format!("char-{:02}", i + 1),
                name: name.to_string(),
                description: format!("{name} is a character with {}.", traits.join(", ")),
                truth,
            }
        })
        .collect()
}

pub fn roster_truth(roster: &[CharacterProfile]) -> TruthLabels {
    roster.iter().map(|c| (c.id.clone(), c.truth.clone())).collect()
}

pub trait Judge: Sync {
    fn judge(&self, character: &CharacterProfile, question: &Question, response: &str) -> Result<JudgedScore>;
}

/// Reads markers planted in responses: `[[E:0.9]]` sets a dimension score,
/// `[[REPEAT]]`, `[[OOC]]` and `[[MULTI]]` set flags.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubJudge;

impl Judge for StubJudge {
    fn judge(&self, character: &CharacterProfile, question: &Question, response: &str) -> Result<JudgedScore> {
        let mut scores = BTreeMap::new();
        let mut flags = BTreeSet::new();
        let mut rest = response;
        while let Some(start) = rest.find("[[") {
            let after = &rest[start + 2..];
            let Some(end) = after.find("]]") else { break };
            let tag = &after[..end];
            match tag {
                "REPEAT" => {
                    flags.insert(Flag::Repetition);
                }
                "OOC" => {
                    flags.insert(Flag::OutOfCharacter);
                }
                "MULTI" => {
                    flags.insert(Flag::MultiTurn);
                }
                _ => {
                    if let Some((l, v)) = tag.split_once(':') {
                        let dim = l
                            .chars()
                            .next()
                            .filter(|_| l.len() == 1)
                            .and_then(Dimension::from_letter)
                            .ok_or_else(|| Error::schema(format!("unknown score marker [[{tag}]]")))?;
                        let s: f64 = v
                            .parse()
                            .map_err(|_| Error::schema(format!("unparseable score in [[{tag}]]")))?;
                        scores.insert(dim, s);
                    }
                }
            }
            rest = &after[end + 2..];
        }
        let j = JudgedScore {
            character_id: character.id.clone(),
            question_id: question.id.clone(),
            scores,
            flags,
        };
        j.validate()?;
        Ok(j)
    }
}

pub const JUDGE_INSTRUCTION: &str = "You evaluate role-play answers. Given a character profile, a question and the \
character's answer, rate the answer's expressed level of each Big Five dimension on a 0-1 scale and list any \
problems among \"repetition\", \"out_of_character\", \"multi_turn\". Reply with only a JSON object \
{\"scores\": {\"Openness\": <number>, ...}, \"flags\": [...]}.";

pub struct ExternalJudge<'a> {
    pub client: &'a dyn ChatClient,
    pub retry: RetryPolicy,
}

impl<'a> ExternalJudge<'a> {
    pub fn new(client: &'a dyn ChatClient) -> Self {
        Self {
            client,
            retry: RetryPolicy::default(),
        }
    }
}

fn parse_judgment(v: &Value, character: &CharacterProfile, question: &Question) -> Result<JudgedScore> {
    let obj = v
        .get("scores")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::schema("judgment lacks a \"scores\" object"))?;
    let mut scores = BTreeMap::new();
    for (k, s) in obj {
        let d = Dimension::from_name(k).ok_or_else(|| Error::schema(format!("unknown dimension {k:?}")))?;
        let s = s
            .as_f64()
            .ok_or_else(|| Error::schema(format!("score for {k} is not a number")))?;
        scores.insert(d, s);
    }
    let flags = match v.get("flags") {
        None | Some(Value::Null) => BTreeSet::new(),
        Some(f) => serde_json::from_value(f.clone()).map_err(|e| Error::schema(format!("flags: {e}")))?,
    };
    let j = JudgedScore {
        character_id: character.id.clone(),
        question_id: question.id.clone(),
        scores,
        flags,
    };
    j.validate()?;
    Ok(j)
}

impl Judge for ExternalJudge<'_> {
    fn judge(&self, character: &CharacterProfile, question: &Question, response: &str) -> Result<JudgedScore> {
        let user = format!(
            "Character: {}\nQuestion ({}): {}\nAnswer: {}",
            character.description, question.dimension, question.text, response
        );
        complete_structured(self.client, &self.retry, JUDGE_INSTRUCTION, &user, |v| {
            parse_judgment(v, character, question)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionMetrics {
    /// Percent of characters labeled correctly on this dimension.
    pub accuracy: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub units: String,
    pub threshold: f64,
    pub n_characters: usize,
    pub n_responses: usize,
    pub fa: f64,
    pub mse: f64,
    pub mae: f64,
    pub mtr: f64,
    pub per_dimension: BTreeMap<Dimension, DimensionMetrics>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,fa_or_accuracy,mse,mae,mtr\n");
        let _ = writeln!(
            out,
            "all,{},{},{},{}",
            fmt_sig6(self.fa),
            fmt_sig6(self.mse),
            fmt_sig6(self.mae),
            fmt_sig6(self.mtr)
        );
        for (d, m) in &self.per_dimension {
            let _ = writeln!(
                out,
                "{d},{},{},{},",
                fmt_sig6(m.accuracy),
                fmt_sig6(m.mse),
                fmt_sig6(m.mae)
            );
        }
        out
    }
}

/// Aggregate judged responses into the report. Predicted score per
/// character-dimension is the mean over that character's responses.
pub fn compute_metrics(judged: &[JudgedScore], truth: &TruthLabels, threshold: f64) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("binarize threshold {threshold} outside (0, 1)")));
    }
    if judged.is_empty() {
        return Err(Error::Empty("no judged responses".into()));
    }
    let mut sums: BTreeMap<&str, BTreeMap<Dimension, (f64, usize)>> = BTreeMap::new();
    let mut flagged = 0usize;
    for j in judged {
        j.validate()?;
        if !j.flags.is_empty() {
            flagged += 1;
        }
        let entry = sums.entry(j.character_id.as_str()).or_default();
        for (d, s) in &j.scores {
            let e = entry.entry(*d).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }

    let n_chars = sums.len();
    let mut all_correct = 0usize;
    let (mut se, mut ae, mut n_pairs) = (0.0, 0.0, 0usize);
    let mut per_dim: BTreeMap<Dimension, (usize, f64, f64)> = BTreeMap::new();
    for (c, dims) in &sums {
        let labels = truth
            .get(*c)
            .ok_or_else(|| Error::schema(format!("character {c} has no truth labels")))?;
        let mut correct = 0;
        for d in Dimension::ALL {
            let label = labels
                .get(&d)
                .ok_or_else(|| Error::schema(format!("character {c} lacks a {d} label")))?;
            let (sum, n) = dims
                .get(&d)
                .copied()
                .ok_or_else(|| Error::Invariant(format!("character {c} has no {d} score")))?;
            let pred = sum / n as f64;
            let predicted = if pred >= threshold { Level::High } else { Level::Low };
            let err = pred - label.encode();
            let pd = per_dim.entry(d).or_insert((0, 0.0, 0.0));
            if predicted == *label {
                correct += 1;
                pd.0 += 1;
            }
            pd.1 += err * err;
            pd.2 += err.abs();
            se += err * err;
            ae += err.abs();
            n_pairs += 1;
        }
        if correct == Dimension::ALL.len() {
            all_correct += 1;
        }
    }
    let nc = n_chars as f64;
    Ok(MetricsReport {
        units: UNITS_NOTE.to_string(),
        threshold,
        n_characters: n_chars,
        n_responses: judged.len(),
        fa: 100.0 * all_correct as f64 / nc,
        mse: se / n_pairs as f64,
        mae: ae / n_pairs as f64,
        mtr: 100.0 * flagged as f64 / judged.len() as f64,
        per_dimension: per_dim
            .into_iter()
            .map(|(d, (k, s, a))| {
                (
                    d,
                    DimensionMetrics {
                        accuracy: 100.0 * k as f64 / nc,
                        mse: s / nc,
                        mae: a / nc,
                    },
                )
            })
            .collect(),
    })
}

/// Template response carrying stub-judge markers for the given scores.
pub fn template_response(
    character: &CharacterProfile,
    question: &Question,
    scores: &BTreeMap<Dimension, f64>,
) -> String {
    let mut out = format!("As {}, about \"{}\": ", character.name, question.text);
    for (d, s) in scores {
        let _ = write!(out, "[[{}:{}]]", d.letter(), fmt_sig6(s.clamp(0.0, 1.0)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(pairs: &[(&str, [Level; 5])]) -> TruthLabels {
        pairs
            .iter()
            .map(|(c, ls)| {
                (
                    c.to_string(),
                    Dimension::ALL.into_iter().zip(ls.iter().copied()).collect(),
                )
            })
            .collect()
    }

    fn judged(c: &str, q: &str, scores: [f64; 5], flags: &[Flag]) -> JudgedScore {
        JudgedScore {
            character_id: c.into(),
            question_id: q.into(),
            scores: Dimension::ALL.into_iter().zip(scores).collect(),
            flags: flags.iter().copied().collect(),
        }
    }

    use Level::{High as H, Low as L};

    #[test]
    fn fa_two_characters() {
        let t = truth(&[("A", [H, L, H, L, H]), ("B", [H, L, H, L, H])]);
        let j = vec![
            judged("A", "q1", [0.9, 0.1, 0.8, 0.2, 0.7], &[]),
            // B misses Neuroticism
            judged("B", "q1", [0.9, 0.1, 0.8, 0.2, 0.3], &[]),
        ];
        let r = compute_metrics(&j, &t, 0.5).unwrap();
        assert_eq!(r.fa, 50.0);
        assert_eq!(r.per_dimension[&Dimension::Neuroticism].accuracy, 50.0);
        assert!(r.mae * r.mae <= r.mse + 1e-15);
    }

    #[test]
    fn mtr_counts_flagged_responses() {
        let t = truth(&[("A", [H; 5])]);
        let mut j: Vec<_> = (0..10).map(|i| judged("A", &format!("q{i}"), [1.0; 5], &[])).collect();
        j[3].flags.insert(Flag::Repetition);
        j[7].flags.insert(Flag::OutOfCharacter);
        j[7].flags.insert(Flag::MultiTurn);
        let r = compute_metrics(&j, &t, 0.5).unwrap();
        assert_eq!(r.mtr, 20.0);
    }

    #[test]
    fn perfect_predictions() {
        let t = truth(&[("A", [H, L, H, L, H]), ("B", [L, L, L, H, H])]);
        let j = vec![
            judged("A", "q", [1.0, 0.0, 1.0, 0.0, 1.0], &[]),
            judged("B", "q", [0.0, 0.0, 0.0, 1.0, 1.0], &[]),
        ];
        let r = compute_metrics(&j, &t, 0.5).unwrap();
        assert_eq!((r.mse, r.mae, r.fa, r.mtr), (0.0, 0.0, 100.0, 0.0));
    }

    #[test]
    fn predicted_score_is_mean_over_questions() {
        let t = truth(&[("A", [H; 5])]);
        let j = vec![judged("A", "q1", [0.2; 5], &[]), judged("A", "q2", [0.9; 5], &[])];
        let r = compute_metrics(&j, &t, 0.5).unwrap();
        assert_eq!(r.fa, 100.0);
        assert!((r.mae - 0.45).abs() < 1e-12);
    }

    #[test]
    fn metric_errors() {
        let t = truth(&[("A", [H; 5])]);
        assert!(matches!(compute_metrics(&[], &t, 0.5), Err(Error::Empty(_))));
        assert!(compute_metrics(&[judged("Z", "q", [1.0; 5], &[])], &t, 0.5).is_err());
        assert!(compute_metrics(&[judged("A", "q", [1.0; 5], &[])], &t, 1.0).is_err());
    }

    #[test]
    fn stub_judge_markers() {
        let ch = &synthetic_roster()[0];
        let q = &demo_questions().questions[0];
        let j = StubJudge.judge(ch, q, "sure [[E:0.9]] and again [[REPEAT]]").unwrap();
        assert_eq!(j.scores[&Dimension::Extraversion], 0.9);
        assert_eq!(j.flags, BTreeSet::from([Flag::Repetition]));
        assert!(StubJudge.judge(ch, q, "[[E:1.5]]").is_err());
        assert!(StubJudge.judge(ch, q, "[[Q:0.5]]").is_err());
        let sc = BTreeMap::from([(Dimension::Openness, 0.25)]);
        let j = StubJudge.judge(ch, q, &template_response(ch, q, &sc)).unwrap();
        assert_eq!(j.scores, sc);
    }

    #[test]
    fn external_judge_retries_then_fails() {
        use crate::client::ReplayClient;
        let ch = &synthetic_roster()[0];
        let q = &demo_questions().questions[0];
        let c = ReplayClient::new(vec![Ok("not json".into()), Ok("{\"scores\": 3}".into())]);
        let mut judge = ExternalJudge::new(&c);
        judge.retry = RetryPolicy::no_delay(1);
        assert!(matches!(judge.judge(ch, q, "x"), Err(Error::RetriesExhausted { .. })));
        let c = ReplayClient::new(vec![Ok(
            r#"{"scores": {"Openness": 0.5}, "flags": ["multi_turn"]}"#.into()
        )]);
        let j = ExternalJudge::new(&c).judge(ch, q, "x").unwrap();
        assert_eq!(j.flags, BTreeSet::from([Flag::MultiTurn]));
    }

    #[test]
    fn question_loading() {
        let demo = demo_questions();
        assert_eq!(demo.len(), 88);
        assert_eq!(demo.pairs().len(), 44);
        let back = parse_questions(&demo.to_jsonl()).unwrap();
        assert_eq!(back, demo);

        assert!(matches!(parse_questions(""), Err(Error::Empty(_))));
        let missing_dim = r#"{"id":"q1","text":"t","mode":"abstract"}"#;
        assert!(matches!(parse_questions(missing_dim), Err(Error::Schema(_))));
        let bad_mode = r#"{"id":"q1","text":"t","mode":"chatty","dimension":"O"}"#;
        assert!(matches!(parse_questions(bad_mode), Err(Error::Line { line: 1, .. })));
        let dup = format!(
            "{}\n{}",
            r#"{"id":"q1","text":"t","mode":"abstract","dimension":"O"}"#,
            r#"{"id":"q1","text":"u","mode":"abstract","dimension":"C"}"#
        );
        assert!(matches!(parse_questions(&dup), Err(Error::Line { line: 2, .. })));
    }

    #[test]
    fn roster_has_26_distinct_profiles() {
        let r = synthetic_roster();
        assert_eq!(r.len(), 26);
        let patterns: BTreeSet<_> = r
            .iter()
            .map(|c| c.truth.values().copied().collect::<Vec<_>>())
            .collect();
        assert_eq!(patterns.len(), 26);
        let t = roster_truth(&r);
        assert_eq!(parse_truth(&serde_json::to_string(&t).unwrap()).unwrap(), t);
    }
}
