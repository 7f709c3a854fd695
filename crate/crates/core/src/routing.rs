// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trait-activated routing: score how strongly a query cues each facet, then
//! pick the control vectors to inject.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::client::{bounded_map, complete_structured, ChatClient, RetryPolicy};
use crate::corpus::{taxonomy, tokenize, Dimension, FacetId};
use crate::cvtrain::ControlVector;
use crate::error::{Error, Result};
use crate::steering::{InjectionEntry, InjectionPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetScores {
    scores: BTreeMap<FacetId, f64>,
    pub scorer_tag: String,
}

impl FacetScores {
    /// Requires all 30 facets with scores in `[0, 1]`.
    pub fn new(scores: BTreeMap<FacetId, f64>, scorer_tag: impl Into<String>) -> Result<Self> {
        if let Some(f) = FacetId::all().find(|f| !scores.contains_key(f)) {
            return Err(Error::schema(format!("facet score missing for {f}")));
        }
        if let Some((f, s)) = scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(Error::schema(format!("score {s} for {f} outside [0, 1]")));
        }
        Ok(Self {
            scores,
            scorer_tag: scorer_tag.into(),
        })
    }

    pub fn zeros(scorer_tag: impl Into<String>) -> Self {
        Self {
            scores: FacetId::all().map(|f| (f, 0.0)).collect(),
            scorer_tag: scorer_tag.into(),
        }
    }

    pub fn get(&self, f: FacetId) -> f64 {
        self.scores[&f]
    }

    /// Set one score, clipped to `[0, 1]`.
    pub fn set(&mut self, f: FacetId, s: f64) {
        self.scores.insert(f, if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) });
    }

    pub fn iter(&self) -> impl Iterator<Item = (FacetId, f64)> + '_ {
        self.scores.iter().map(|(f, s)| (*f, *s))
    }
}

pub trait FacetScorer: Sync {
    fn score(&self, query: &str) -> Result<FacetScores>;
}

/// Words ignored by the keyword scorer.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "any", "are", "as", "at", "be", "but", "by", "can", "could", "do", "does", "for",
    "from", "give", "how", "i", "in", "is", "it", "me", "my", "of", "on", "or", "please", "should", "so", "some",
    "tell", "that", "the", "this", "to", "was", "we", "what", "when", "where", "which", "who", "why", "with", "would",
    "you", "your",
];

/// Fraction of the query's content words that appear in a facet's keyword list.
#[derive(Debug, Clone)]
pub struct KeywordScorer {
    keywords: BTreeMap<FacetId, BTreeSet<String>>,
}

impl Default for KeywordScorer {
    fn default() -> Self {
        let keywords = FacetId::all()
            .map(|f| (f, f.cues().keywords.iter().map(|k| k.to_lowercase()).collect()))
            .collect();
        Self { keywords }
    }
}

impl KeywordScorer {
    pub const TAG: &'static str = "keyword-v1";

    pub fn with_keywords(keywords: BTreeMap<FacetId, BTreeSet<String>>) -> Self {
        Self { keywords }
    }
}

impl FacetScorer for KeywordScorer {
    fn score(&self, query: &str) -> Result<FacetScores> {
        if query.trim().is_empty() {
            return Err(Error::Empty("routing query".into()));
        }
        let tokens: Vec<String> = tokenize(query)
            .into_iter()
            .filter(|t| !STOPWORDS.contains(&t.as_str()))
            .collect();
        let mut out = FacetScores::zeros(Self::TAG);
        if tokens.is_empty() {
            return Ok(out);
        }
        for f in FacetId::all() {
            let Some(kw) = self.keywords.get(&f) else { continue };
            let hits = tokens.iter().filter(|t| kw.contains(*t)).count();
            out.set(f, hits as f64 / tokens.len() as f64);
        }
        Ok(out)
    }
}

pub const EXTERNAL_SCORER_INSTRUCTION: &str = "You route persona control vectors. Given a user prompt, rate how \
strongly it cues each of the 30 Big Five facets (NEO names) on a 0-1 scale. Reply with only a JSON object of the \
form {\"facet_scores\": {\"<facet name>\": <number>, ...}}.";

/// Scores through a chat-completion client using a fixed instruction.
pub struct ExternalScorer<'a> {
    pub client: &'a dyn ChatClient,
    pub retry: RetryPolicy,
    pub tag: String,
}

impl<'a> ExternalScorer<'a> {
    pub fn new(client: &'a dyn ChatClient) -> Self {
        Self {
            client,
            retry: RetryPolicy::default(),
            tag: "external".into(),
        }
    }
}

/// Parse `{"facet_scores": {name: number}}`. Unknown names and non-numeric
/// values are rejected; absent facets score 0; values are clipped to `[0, 1]`.
pub fn parse_facet_scores(v: &Value, tag: &str) -> Result<FacetScores> {
    let obj = v
        .get("facet_scores")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::schema("reply lacks a \"facet_scores\" object"))?;
    let mut out = FacetScores::zeros(tag);
    for (name, s) in obj {
        let f = FacetId::from_name(name).ok_or_else(|| Error::schema(format!("unknown facet {name:?} in reply")))?;
        let s = s
            .as_f64()
            .ok_or_else(|| Error::schema(format!("score for {name:?} is not a number")))?;
        out.set(f, s);
    }
    Ok(out)
}

impl FacetScorer for ExternalScorer<'_> {
    fn score(&self, query: &str) -> Result<FacetScores> {
        if query.trim().is_empty() {
            return Err(Error::Empty("routing query".into()));
        }
        complete_structured(self.client, &self.retry, EXTERNAL_SCORER_INSTRUCTION, query, |v| {
            parse_facet_scores(v, &self.tag)
        })
    }
}

/// Score many queries with at most `max_in_flight` concurrent scorer calls.
pub fn score_queries(scorer: &dyn FacetScorer, queries: &[String], max_in_flight: usize) -> Vec<Result<FacetScores>> {
    bounded_map(queries, max_in_flight, |q| scorer.score(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingPolicy {
    pub threshold: f64,
    pub per_dimension_top_k: usize,
    pub alpha_default: f64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            per_dimension_top_k: 1,
            alpha_default: 1.0,
        }
    }
}

impl RoutingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "routing threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if !(1..=6).contains(&self.per_dimension_top_k) {
            return Err(Error::Config(format!(
                "per_dimension_top_k {} outside 1..=6",
                self.per_dimension_top_k
            )));
        }
        if !self.alpha_default.is_finite() {
            return Err(Error::NonFinite("alpha_default".into()));
        }
        Ok(())
    }
}

/// Per dimension, the top-k available facets scoring at least the threshold,
/// ranked by score then facet index. Output is grouped by dimension.
pub fn select_cvs(scores: &FacetScores, policy: &RoutingPolicy, available: &BTreeSet<FacetId>) -> Vec<FacetId> {
    let mut out = Vec::new();
    for dim in Dimension::ALL {
        let mut cands: Vec<(FacetId, f64)> = dim
            .facets()
            .filter(|f| available.contains(f))
            .map(|f| (f, scores.get(f)))
            .filter(|(_, s)| *s >= policy.threshold)
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.facet_index().cmp(&b.0.facet_index())));
        out.extend(cands.into_iter().take(policy.per_dimension_top_k).map(|(f, _)| f));
    }
    out
}

pub fn available_facets<'a>(cvs: impl IntoIterator<Item = &'a ControlVector>) -> BTreeSet<FacetId> {
    cvs.into_iter().map(|cv| cv.facet).collect()
}

/// One plan entry per selected facet, carrying the decoded vector.
pub fn compose_injection(
    selected: &[FacetId],
    cvs: &BTreeMap<FacetId, ControlVector>,
    layer: usize,
    alpha_map: &BTreeMap<FacetId, f64>,
    alpha_default: f64,
) -> Result<InjectionPlan> {
    let mut plan = InjectionPlan::empty();
    let mut d_model = None;
    for &f in selected {
        let cv = cvs
            .get(&f)
            .ok_or_else(|| Error::Invariant(format!("no control vector for selected facet {f}")))?;
        match d_model {
            None => d_model = Some(cv.d_model()),
            Some(d) if d != cv.d_model() => {
                return Err(Error::DimensionMismatch {
                    what: "control vector d_model",
                    expected: d,
                    actual: cv.d_model(),
                })
            }
            Some(_) => {}
        }
        plan.push(InjectionEntry {
            layer,
            vector: cv.decoded.clone(),
            alpha: alpha_map.get(&f).copied().unwrap_or(alpha_default),
            facet: Some(f),
        })?;
    }
    Ok(plan)
}

/// Facet names whose keyword list contains `word`.
pub fn facets_cued_by(word: &str) -> Vec<FacetId> {
    let w = word.to_lowercase();
    taxonomy()
        .facets
        .iter()
        .enumerate()
        .filter(|(_, c)| c.keywords.contains(&w))
        .filter_map(|(i, _)| FacetId::from_ordinal(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::client::ReplayClient;

    fn all() -> BTreeSet<FacetId> {
        FacetId::all().collect()
    }

    fn f(name: &str) -> FacetId {
        FacetId::from_name(name).unwrap()
    }

    #[test]
    fn writing_advice_routes_to_openness() {
        let s = KeywordScorer::default().score("writing advice").unwrap();
        let best_o = Dimension::Openness.facets().map(|f| s.get(f)).fold(0.0, f64::max);
        assert!(Dimension::Extraversion.facets().all(|f| s.get(f) < best_o));
        let sel = select_cvs(&s, &RoutingPolicy::default(), &all());
        assert_eq!(sel, vec![f("Aesthetics")]);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let s = KeywordScorer::default().score("the of and").unwrap();
        assert!(s.iter().all(|(_, v)| v == 0.0));
        let s = KeywordScorer::default().score("quantum chromodynamics").unwrap();
        assert!(s.iter().all(|(_, v)| v == 0.0));
        assert!(KeywordScorer::default().score("   ").is_err());
    }

    #[test]
    fn selection_rules() {
        let p = RoutingPolicy {
            threshold: 0.1,
            ..RoutingPolicy::default()
        };
        assert!(select_cvs(&FacetScores::zeros("t"), &p, &all()).is_empty());

        let mut s = FacetScores::zeros("t");
        s.set(f("Trust"), 0.9);
        assert_eq!(select_cvs(&s, &p, &all()), vec![f("Trust")]);

        s.set(f("Altruism"), 0.8);
        s.set(f("Modesty"), 0.7);
        s.set(f("Trust"), 0.0);
        assert_eq!(select_cvs(&s, &p, &all()), vec![f("Altruism")]);
        let p2 = RoutingPolicy {
            per_dimension_top_k: 2,
            ..p
        };
        assert_eq!(select_cvs(&s, &p2, &all()), vec![f("Altruism"), f("Modesty")]);

        let mut avail = all();
        avail.remove(&f("Altruism"));
        assert_eq!(select_cvs(&s, &p, &avail), vec![f("Modesty")]);
    }

    #[test]
    fn ties_break_by_facet_index() {
        let mut s = FacetScores::zeros("t");
        s.set(f("Ideas"), 0.5);
        s.set(f("Fantasy"), 0.5);
        assert_eq!(select_cvs(&s, &RoutingPolicy::default(), &all()), vec![f("Fantasy")]);
    }

    #[test]
    fn external_scores_are_clipped_and_validated() {
        let c = ReplayClient::new(vec![Ok(
            r#"{"facet_scores": {"Ideas": 1.7, "Trust": -0.2, "Order": 0.4}}"#.into(),
        )]);
        let s = ExternalScorer::new(&c).score("q").unwrap();
        assert_eq!(s.get(f("Ideas")), 1.0);
        assert_eq!(s.get(f("Trust")), 0.0);
        assert_eq!(s.get(f("Order")), 0.4);
        assert_eq!(s.get(f("Fantasy")), 0.0);

        let c = ReplayClient::new(vec![
            Ok(r#"{"facet_scores": {"Bravery": 1}}"#.into()),
            Ok(r#"{"scores": {}}"#.into()),
            Ok(r#"{"facet_scores": {"Ideas": "high"}}"#.into()),
            Ok(r#"{"facet_scores": {}}"#.into()),
        ]);
        let mut sc = ExternalScorer::new(&c);
        sc.retry = RetryPolicy::no_delay(2);
        assert!(matches!(
            sc.score("q"),
            Err(Error::RetriesExhausted { attempts: 3, .. })
        ));
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn policy_validation() {
        let bad = RoutingPolicy {
            per_dimension_top_k: 7,
            ..RoutingPolicy::default()
        };
        assert!(bad.validate().is_err());
        assert!(RoutingPolicy::default().validate().is_ok());
    }

    #[test]
    fn writing_cues_two_openness_facets() {
        assert_eq!(facets_cued_by("writing"), vec![f("Aesthetics"), f("Ideas")]);
        assert!(facets_cued_by("advice").is_empty());
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), Just(0.5), 0.0..=1.0f64], 30)
    }

    proptest! {
        #[test]
        fn routing_is_monotone(raw in scores_strategy(), idx in 0usize..30, bump in 0.0..=1.0f64,
                               theta in 0.0..=1.0f64, k in 1usize..=6) {
            let mut s = FacetScores::zeros("p");
            for (i, v) in raw.iter().enumerate() {
                s.set(FacetId::from_ordinal(i).unwrap(), *v);
            }
            let p = RoutingPolicy { threshold: theta, per_dimension_top_k: k, alpha_default: 1.0 };
            let target = FacetId::from_ordinal(idx).unwrap();
            let before = select_cvs(&s, &p, &all());
            let mut raised = s.clone();
            raised.set(target, s.get(target) + bump);
            let after = select_cvs(&raised, &p, &all());
            if before.contains(&target) {
                prop_assert!(after.contains(&target));
            }
        }

        #[test]
        fn top_one_means_one_per_dimension(raw in scores_strategy(), theta in 0.0..=1.0f64) {
            let mut s = FacetScores::zeros("p");
            for (i, v) in raw.iter().enumerate() {
                s.set(FacetId::from_ordinal(i).unwrap(), *v);
            }
            let p = RoutingPolicy { threshold: theta, ..RoutingPolicy::default() };
            let sel = select_cvs(&s, &p, &all());
            let dims: BTreeSet<_> = sel.iter().map(|f| f.dimension()).collect();
            prop_assert_eq!(dims.len(), sel.len());
            prop_assert!(sel.iter().all(|f| s.get(*f) >= theta));
        }
    }
}
