// SPDX-License-Identifier: MIT OR Apache-2.0

//! Big Five facet taxonomy, the facet corpus, and its validation.
//!
//! The 30 facets follow the NEO-PI layout: five dimensions with six facets
//! each. Cue phrases, context openers and routing keywords live in a
//! versioned table (`data/taxonomy_v1.json`) compiled into the crate.
//!
//! Corpus files are JSONL with one object per line:
//!
//! ```text
//! {"id":"assertiveness-pos-0001","facet":"Assertiveness","polarity":"pos","context":"work","text":"..."}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::util::{fnv1a64, read_to_string, seeded_rng, write_file};

pub const N_FACETS: usize = 30;
pub const FACETS_PER_DIMENSION: usize = 6;
/// Maximum words per corpus item.
pub const WORD_CAP: usize = 18;

const FACET_NAMES: [&str; N_FACETS] = [
    "Fantasy",
    "Aesthetics",
    "Feelings",
    "Actions",
    "Ideas",
    "Values",
    "Competence",
    "Order",
    "Dutifulness",
    "Achievement Striving",
    "Self-Discipline",
    "Deliberation",
    "Warmth",
    "Gregariousness",
    "Assertiveness",
    "Activity",
    "Excitement-Seeking",
    "Positive Emotions",
    "Trust",
    "Straightforwardness",
    "Altruism",
    "Compliance",
    "Modesty",
    "Tender-Mindedness",
    "Anxiety",
    "Angry Hostility",
    "Depression",
    "Self-Consciousness",
    "Impulsiveness",
    "Vulnerability",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Openness,
        Dimension::Conscientiousness,
        Dimension::Extraversion,
        Dimension::Agreeableness,
        Dimension::Neuroticism,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Openness => "Openness",
            Dimension::Conscientiousness => "Conscientiousness",
            Dimension::Extraversion => "Extraversion",
            Dimension::Agreeableness => "Agreeableness",
            Dimension::Neuroticism => "Neuroticism",
        }
    }

    /// One-letter code (O, C, E, A, N).
    pub fn letter(self) -> char {
        self.name().chars().next().unwrap()
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.letter() == c)
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name().eq_ignore_ascii_case(s))
    }

    pub fn facets(self) -> impl Iterator<Item = FacetId> {
        let base = self.ordinal() * FACETS_PER_DIMENSION;
        (base..base + FACETS_PER_DIMENSION).map(|i| FacetId(i as u8))
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the 30 facets. Ordered by (dimension, facet_index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FacetId(u8);

impl FacetId {
    pub fn all() -> impl Iterator<Item = FacetId> {
        (0..N_FACETS as u8).map(FacetId)
    }

    pub fn new(dimension: Dimension, facet_index: usize) -> Option<Self> {
        (1..=FACETS_PER_DIMENSION)
            .contains(&facet_index)
            .then(|| FacetId((dimension.ordinal() * FACETS_PER_DIMENSION + facet_index - 1) as u8))
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        (i < N_FACETS).then_some(FacetId(i as u8))
    }

    pub fn from_name(name: &str) -> Option<Self> {
        FACET_NAMES.iter().position(|n| *n == name).map(|i| FacetId(i as u8))
    }

    pub fn ordinal(self) -> usize {
        self.0 as usize
    }

    pub fn dimension(self) -> Dimension {
        Dimension::ALL[self.ordinal() / FACETS_PER_DIMENSION]
    }

    /// 1-based index within the dimension.
    pub fn facet_index(self) -> usize {
        self.ordinal() % FACETS_PER_DIMENSION + 1
    }

    pub fn name(self) -> &'static str {
        FACET_NAMES[self.ordinal()]
    }

    /// Lowercase ASCII slug used in ids and file names.
    pub fn slug(self) -> String {
        self.name()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '-'
                }
            })
            .collect::<String>()
            .replace("--", "-")
    }

    pub fn cues(self) -> &'static FacetCues {
        &taxonomy().facets[self.ordinal()]
    }
}

impl fmt::Display for FacetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for FacetId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FacetId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        FacetId::from_name(&name).ok_or_else(|| serde::de::Error::custom(format!("unknown facet {name:?}")))
    }
}

impl std::str::FromStr for FacetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FacetId::from_name(s).ok_or_else(|| Error::UnknownFacet { name: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Polarity::Positive => "pos",
            Polarity::Negative => "neg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Study,
    Work,
    Daily,
    Social,
}

impl Context {
    pub const ALL: [Context; 4] = [Context::Study, Context::Work, Context::Daily, Context::Social];

    pub fn tag(self) -> &'static str {
        match self {
            Context::Study => "study",
            Context::Work => "work",
            Context::Daily => "daily",
            Context::Social => "social",
        }
    }
}

// ---------------------------------------------------------------------------
// Taxonomy table

#[derive(Debug, Clone, Deserialize)]
pub struct FacetCues {
    pub dimension: Dimension,
    pub index: usize,
    pub name: String,
    pub positive_cue: String,
    pub negative_cue: String,
    /// Query keywords for the built-in routing scorer.
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Taxonomy {
    pub version: u32,
    pub facets: Vec<FacetCues>,
    pub contexts: BTreeMap<Context, Vec<String>>,
    pub tails: Vec<String>,
}

static TAXONOMY: LazyLock<Taxonomy> = LazyLock::new(|| {
    let t: Taxonomy =
        serde_json::from_str(include_str!("../data/taxonomy_v1.json")).expect("embedded taxonomy table is valid JSON");
    assert_eq!(t.facets.len(), N_FACETS);
    for (i, f) in t.facets.iter().enumerate() {
        let id = FacetId(i as u8);
        assert_eq!(f.name, id.name(), "taxonomy row {i} out of order");
        assert_eq!(f.dimension, id.dimension());
        assert_eq!(f.index, id.facet_index());
    }
    t
});

pub fn taxonomy() -> &'static Taxonomy {
    &TAXONOMY
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub facet: FacetId,
    pub polarity: Polarity,
    pub context: Context,
    pub text: String,
    #[serde(skip)]
    pub word_count: usize,
}

impl CorpusItem {
    pub fn new(
        id: impl Into<String>,
        facet: FacetId,
        polarity: Polarity,
        context: Context,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Self {
            id: id.into(),
            facet,
            polarity,
            context,
            word_count: count_words(&text),
            text,
        }
    }
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacetCorpus {
    pub items: Vec<CorpusItem>,
    pub provenance: Provenance,
}

impl FacetCorpus {
    pub fn new(items: Vec<CorpusItem>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::DuplicateId(it.id.clone()));
            }
        }
        Ok(Self { items, provenance })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// (positive, negative) counts for every facet, including empty ones.
    pub fn counts(&self) -> BTreeMap<FacetId, (usize, usize)> {
        let mut m: BTreeMap<FacetId, (usize, usize)> = FacetId::all().map(|f| (f, (0, 0))).collect();
        for it in &self.items {
            let e = m.get_mut(&it.facet).expect("all facets present");
            match it.polarity {
                Polarity::Positive => e.0 += 1,
                Polarity::Negative => e.1 += 1,
            }
        }
        m
    }

    pub fn is_balanced(&self) -> bool {
        self.counts().values().all(|(p, n)| p == n)
    }

    pub fn subset(&self, keep: impl Fn(&CorpusItem) -> bool) -> FacetCorpus {
        FacetCorpus {
            items: self.items.iter().filter(|it| keep(it)).cloned().collect(),
            provenance: self.provenance,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            out.push_str(&serde_json::to_string(it).expect("corpus items serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())
    }
}

/// Parse a JSONL corpus. Word counts are recomputed from the text.
pub fn parse_corpus(src: &str) -> Result<FacetCorpus> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        facet: String,
        polarity: Polarity,
        context: Context,
        text: String,
    }

    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(raw).map_err(|e| Error::Line {
            line,
            message: format!("malformed JSON: {e}"),
        })?;
        let facet = FacetId::from_name(&parsed.facet).ok_or_else(|| Error::Line {
            line,
            message: format!("unknown facet {:?}", parsed.facet),
        })?;
        if parsed.text.trim().is_empty() {
            return Err(Error::Line {
                line,
                message: "empty text".into(),
            });
        }
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::Line {
                line,
                message: format!("duplicate id {:?}", parsed.id),
            });
        }
        items.push(CorpusItem::new(
            parsed.id,
            facet,
            parsed.polarity,
            parsed.context,
            parsed.text,
        ));
    }
    FacetCorpus::new(items, Provenance::Imported)
}

pub fn load_corpus(path: &Path) -> Result<FacetCorpus> {
    parse_corpus(&read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Structural validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetCount {
    pub facet: FacetId,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub facet: FacetId,
    pub positive_id: String,
    pub negative_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub per_facet: Vec<FacetCount>,
    pub balance_violations: Vec<FacetCount>,
    pub word_cap: usize,
    pub word_cap_violations: Vec<String>,
    pub empty_text: Vec<String>,
    /// Byte-identical texts appearing under both polarities of one facet.
    pub cross_polarity_duplicates: Vec<DuplicatePair>,
    /// Items with no first-person token. Reported, not counted as violations.
    pub not_first_person: Vec<String>,
}

impl ValidationReport {
    pub fn violation_count(&self) -> usize {
        self.balance_violations.len()
            + self.word_cap_violations.len()
            + self.empty_text.len()
            + self.cross_polarity_duplicates.len()
    }

    pub fn is_clean(&self) -> bool {
        self.violation_count() == 0
    }
}

fn is_first_person(text: &str) -> bool {
    tokenize(text)
        .iter()
        .any(|t| matches!(t.as_str(), "i" | "me" | "my" | "mine" | "myself"))
}

pub fn validate_corpus(c: &FacetCorpus) -> ValidationReport {
    let per_facet: Vec<FacetCount> = c
        .counts()
        .into_iter()
        .map(|(facet, (positive, negative))| FacetCount {
            facet,
            positive,
            negative,
        })
        .collect();
    let balance_violations = per_facet
        .iter()
        .filter(|fc| fc.positive != fc.negative)
        .cloned()
        .collect();

    let mut word_cap_violations = Vec::new();
    let mut empty_text = Vec::new();
    let mut not_first_person = Vec::new();
    for it in &c.items {
        if count_words(&it.text) > WORD_CAP {
            word_cap_violations.push(it.id.clone());
        }
        if it.text.trim().is_empty() {
            empty_text.push(it.id.clone());
        }
        if !is_first_person(&it.text) {
            not_first_person.push(it.id.clone());
        }
    }

    // first positive id per (facet, text); then match negatives against it
    let mut pos_text: BTreeMap<(FacetId, &str), &str> = BTreeMap::new();
    for it in c.items.iter().filter(|it| it.polarity == Polarity::Positive) {
        pos_text.entry((it.facet, it.text.as_str())).or_insert(it.id.as_str());
    }
    let cross_polarity_duplicates = c
        .items
        .iter()
        .filter(|it| it.polarity == Polarity::Negative)
        .filter_map(|it| {
            pos_text.get(&(it.facet, it.text.as_str())).map(|pid| DuplicatePair {
                facet: it.facet,
                positive_id: pid.to_string(),
                negative_id: it.id.clone(),
            })
        })
        .collect();

    ValidationReport {
        per_facet,
        balance_violations,
        word_cap: WORD_CAP,
        word_cap_violations,
        empty_text,
        cross_polarity_duplicates,
        not_first_person,
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Deterministic template expansion: for every facet and pair index, one
/// context opener is drawn and used for both a positive and a negative item.
/// The two differ only in the facet cue phrase.
pub fn generate_synthetic_corpus(seed: u64, per_facet: usize) -> Result<FacetCorpus> {
    if per_facet == 0 {
        return Err(Error::Config("per_facet must be at least 1".into()));
    }
    let tax = taxonomy();
    let mut rng = seeded_rng(seed, 0xC0_1205);
    let mut items = Vec::with_capacity(N_FACETS * per_facet * 2);
    for facet in FacetId::all() {
        let cues = facet.cues();
        let slug = facet.slug();
        for i in 0..per_facet {
            let context = Context::ALL[i % Context::ALL.len()];
            let openers = &tax.contexts[&context];
            let opener = &openers[rng.random_range(0..openers.len())];
            let tail = &tax.tails[rng.random_range(0..tax.tails.len())];
            for (polarity, cue) in [
                (Polarity::Positive, &cues.positive_cue),
                (Polarity::Negative, &cues.negative_cue),
            ] {
                let text = format!("{opener}, I {cue}{tail}.");
                let id = format!("{slug}-{}-{:04}", polarity.tag(), i + 1);
                items.push(CorpusItem::new(id, facet, polarity, context, text));
            }
        }
    }
    FacetCorpus::new(items, Provenance::Synthetic)
}

// ---------------------------------------------------------------------------
// Leakage classifier

/// Lowercase, then split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hash_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub tokenizer: String,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hash_dim: 1 << 12,
            learning_rate: 2.0,
            epochs: 200,
            seed: 0,
            train_fraction: 0.8,
            tokenizer: "lowercase+split-non-alphanumeric;fnv1a64-mod-dim;l2-normalized".into(),
        }
    }
}

/// Hashed bag-of-tokens, L2-normalized, as sparse (bucket, value) pairs.
fn featurize(text: &str, dim: usize) -> Vec<(usize, f64)> {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for tok in tokenize(text) {
        *counts
            .entry((fnv1a64(tok.as_bytes()) % dim as u64) as usize)
            .or_insert(0.0) += 1.0;
    }
    let n = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    counts
        .into_iter()
        .map(|(k, v)| (k, if n > 0.0 { v / n } else { 0.0 }))
        .collect()
}

pub trait FacetPredictor {
    fn predict(&self, text: &str) -> FacetId;
}

impl<F: Fn(&str) -> FacetId> FacetPredictor for F {
    fn predict(&self, text: &str) -> FacetId {
        self(text)
    }
}

/// Linear 30-way softmax classifier over hashed token features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageClassifier {
    pub config: ClassifierConfig,
    /// `N_FACETS x (hash_dim + 1)`, last column is the bias.
    pub weights: Mat,
    pub train_ids: Vec<String>,
    pub held_out_ids: Vec<String>,
    pub loss_trace: Vec<f64>,
}

impl LeakageClassifier {
    fn logits(&self, feats: &[(usize, f64)]) -> Vec<f64> {
        let dim = self.config.hash_dim;
        (0..N_FACETS)
            .map(|k| {
                let row = self.weights.row(k);
                feats.iter().map(|&(j, x)| row[j] * x).sum::<f64>() + row[dim]
            })
            .collect()
    }

    /// Training and held-out portions of `c` under this classifier's split.
    pub fn split(&self, c: &FacetCorpus) -> (FacetCorpus, FacetCorpus) {
        let train: HashSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        let held: HashSet<&str> = self.held_out_ids.iter().map(String::as_str).collect();
        (
            c.subset(|it| train.contains(it.id.as_str())),
            c.subset(|it| held.contains(it.id.as_str())),
        )
    }

    /// [`evaluate_leakage`] plus a check that no evaluated id was trained on.
    pub fn evaluate(&self, held_out: &FacetCorpus) -> Result<LeakageReport> {
        let train: HashSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        if let Some(it) = held_out.items.iter().find(|it| train.contains(it.id.as_str())) {
            return Err(Error::Invariant(format!(
                "held-out item {:?} was used for training",
                it.id
            )));
        }
        evaluate_leakage(self, held_out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("classifier serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::schema(e.to_string()))
    }
}

impl FacetPredictor for LeakageClassifier {
    fn predict(&self, text: &str) -> FacetId {
        let logits = self.logits(&featurize(text, self.config.hash_dim));
        let best = logits
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, &l)| if l > acc.1 { (k, l) } else { acc },
            )
            .0;
        FacetId(best as u8)
    }
}

/// Per-facet deterministic split: ids sorted, shuffled with the seed, then the
/// first `round(fraction * n)` (clamped to `1..n`) go to training.
fn split_ids(c: &FacetCorpus, fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut by_facet: BTreeMap<FacetId, Vec<&str>> = BTreeMap::new();
    for it in &c.items {
        by_facet.entry(it.facet).or_default().push(&it.id);
    }
    let mut rng = seeded_rng(seed, 0x5B117);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for ids in by_facet.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend(ids[..k].iter().map(|s| s.to_string()));
        held.extend(ids[k..].iter().map(|s| s.to_string()));
    }
    (train, held)
}

pub fn train_leakage_classifier(c: &FacetCorpus, cfg: &ClassifierConfig) -> Result<LeakageClassifier> {
    if cfg.hash_dim == 0 || !(0.0..1.0).contains(&cfg.train_fraction) || cfg.train_fraction == 0.0 {
        return Err(Error::Config(
            "hash_dim must be positive and train_fraction in (0, 1)".into(),
        ));
    }
    for (facet, (p, n)) in c.counts() {
        if p + n < 2 {
            return Err(Error::InsufficientItems {
                facet,
                count: p + n,
                required: 2,
            });
        }
    }

    let (train_ids, held_out_ids) = split_ids(c, cfg.train_fraction, cfg.seed);
    let train_set: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let examples: Vec<(Vec<(usize, f64)>, usize)> = c
        .items
        .iter()
        .filter(|it| train_set.contains(it.id.as_str()))
        .map(|it| (featurize(&it.text, cfg.hash_dim), it.facet.ordinal()))
        .collect();

    let dim = cfg.hash_dim;
    let mut clf = LeakageClassifier {
        config: cfg.clone(),
        weights: Mat::zeros(N_FACETS, dim + 1),
        train_ids,
        held_out_ids,
        loss_trace: Vec::with_capacity(cfg.epochs),
    };
    let inv_n = 1.0 / examples.len() as f64;
    let mut grad = Mat::zeros(N_FACETS, dim + 1);
    for epoch in 0..cfg.epochs {
        grad.data.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (feats, label) in &examples {
            let logits = clf.logits(feats);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += z.ln() + max - logits[*label];
            for (k, e) in exps.iter().enumerate() {
                let d = e / z - if k == *label { 1.0 } else { 0.0 };
                let row = grad.row_mut(k);
                for &(j, x) in feats {
                    row[j] += d * x;
                }
                row[dim] += d;
            }
        }
        let loss = loss * inv_n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
        }
        clf.loss_trace.push(loss);
        for (w, g) in clf.weights.data.iter_mut().zip(&grad.data) {
            *w -= cfg.learning_rate * g * inv_n;
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub n: usize,
    pub accuracy: f64,
    /// Unweighted mean of per-facet F1 over facets present in the truth or predictions.
    pub macro_f1: f64,
    pub per_facet_f1: BTreeMap<FacetId, f64>,
    /// `confusion[true][predicted]`, indexed by facet ordinal.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of misclassified items whose predicted facet lies in another dimension.
    pub cross_dimension_rate: f64,
}

pub fn evaluate_leakage<P: FacetPredictor + ?Sized>(clf: &P, held_out: &FacetCorpus) -> Result<LeakageReport> {
    if held_out.is_empty() {
        return Err(Error::Empty("held-out set".into()));
    }
    let pairs: Vec<(FacetId, FacetId)> = held_out
        .items
        .iter()
        .map(|it| (it.facet, clf.predict(&it.text)))
        .collect();
    Ok(leakage_report(&pairs))
}

/// Build a report from (true, predicted) pairs.
pub fn leakage_report(pairs: &[(FacetId, FacetId)]) -> LeakageReport {
    let mut confusion = vec![vec![0u64; N_FACETS]; N_FACETS];
    let (mut errors, mut cross) = (0usize, 0usize);
    for &(t, p) in pairs {
        confusion[t.ordinal()][p.ordinal()] += 1;
        if t != p {
            errors += 1;
            if t.dimension() != p.dimension() {
                cross += 1;
            }
        }
    }
    let present: BTreeSet<FacetId> = pairs.iter().flat_map(|&(t, p)| [t, p]).collect();
    let mut per_facet_f1 = BTreeMap::new();
    for f in &present {
        let k = f.ordinal();
        let tp = confusion[k][k] as f64;
        let predicted: u64 = (0..N_FACETS).map(|r| confusion[r][k]).sum();
        let actual: u64 = confusion[k].iter().sum();
        let denom = predicted as f64 + actual as f64;
        per_facet_f1.insert(*f, if denom > 0.0 { 2.0 * tp / denom } else { 0.0 });
    }
    let n = pairs.len();
    LeakageReport {
        n,
        accuracy: (n - errors) as f64 / n.max(1) as f64,
        macro_f1: per_facet_f1.values().sum::<f64>() / per_facet_f1.len().max(1) as f64,
        per_facet_f1,
        confusion,
        cross_dimension_rate: if errors == 0 { 0.0 } else { cross as f64 / errors as f64 },
    }
}
