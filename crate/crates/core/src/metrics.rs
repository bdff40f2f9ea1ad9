//! Answer normalization, Exact Match, token F1 and phase aggregation.
//!
//! Normalization follows the SQuAD convention: lowercase, strip every
//! Unicode punctuation character (general category P*), drop the article
//! tokens `a`/`an`/`the`, and collapse whitespace.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("gold answer list is empty")]
    EmptyGoldList,
    #[error("pre_t and post_t records cover different items")]
    MixedMetricPhases,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreT,
    PostT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Em,
    F1,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Em => "em",
            Metric::F1 => "f1",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "em" => Ok(Metric::Em),
            "f1" => Ok(Metric::F1),
            other => Err(format!("unknown metric {other:?} (expected em or f1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub item_id: String,
    pub em: u8,
    pub f1: f64,
    pub phase: Phase,
}

impl MetricRecord {
    pub fn score(prediction: &str, golds: &[String], item_id: &str, phase: Phase) -> Result<Self, MetricsError> {
        Ok(Self {
            item_id: item_id.to_string(),
            em: exact_match(prediction, golds)?,
            f1: token_f1(prediction, golds)?,
            phase,
        })
    }

    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Em => f64::from(self.em),
            Metric::F1 => self.f1,
        }
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !is_punctuation(*c)).collect();
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<u8, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGoldList);
    }
    let pred = normalize_answer(prediction);
    Ok(u8::from(golds.iter().any(|g| normalize_answer(g.as_ref()) == pred)))
}

fn f1_single(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1 over normalized strings, maximized over golds.
pub fn token_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGoldList);
    }
    let pred_norm = normalize_answer(prediction);
    let pred: Vec<&str> = pred_norm.split_whitespace().collect();
    Ok(golds
        .iter()
        .map(|g| {
            let gold_norm = normalize_answer(g.as_ref());
            let gold: Vec<&str> = gold_norm.split_whitespace().collect();
            f1_single(&pred, &gold)
        })
        .fold(0.0, f64::max))
}

/// Rounds to one decimal, half away from zero.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Phase scores as percentages; absent phases are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pre_t: Option<f64>,
    pub post_t: Option<f64>,
    pub gain: Option<f64>,
}

fn phase_mean(records: &[MetricRecord], phase: Phase, metric: Metric) -> Option<f64> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.phase == phase)
        .map(|r| r.value(metric))
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64 * 100.0)
    }
}

fn phase_ids(records: &[MetricRecord], phase: Phase) -> Vec<&str> {
    let mut ids: Vec<&str> = records
        .iter()
        .filter(|r| r.phase == phase)
        .map(|r| r.item_id.as_str())
        .collect();
    ids.sort_unstable();
    ids
}

pub fn aggregate(records: &[MetricRecord], metric: Metric) -> Result<Aggregate, MetricsError> {
    let pre = phase_mean(records, Phase::PreT, metric);
    let post = phase_mean(records, Phase::PostT, metric);
    if pre.is_some() && post.is_some() && phase_ids(records, Phase::PreT) != phase_ids(records, Phase::PostT) {
        return Err(MetricsError::MixedMetricPhases);
    }
    Ok(Aggregate {
        pre_t: pre.map(round1),
        post_t: post.map(round1),
        gain: pre.zip(post).map(|(a, b)| round1(b - a)),
    })
}

/// One line of the JSON summary emitted per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub dataset: String,
    pub metric: Metric,
    pub pre_t: f64,
    pub post_t: f64,
    pub gain: f64,
    pub n_items: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, em: u8, phase: Phase) -> MetricRecord {
        MetricRecord {
            item_id: id.into(),
            em,
            f1: f64::from(em),
            phase,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The  Quick,  Brown fox!"), "quick brown fox");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("a an the"), "");
    }

    #[test]
    fn normalization_keeps_symbols_that_are_not_punctuation() {
        // '$' and '+' are category S, not P.
        assert_eq!(normalize_answer("$5 + tax"), "$5 + tax");
        assert_eq!(normalize_answer("«Bonjour» — monde…"), "bonjour monde");
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("Paris", &["Paris"]).unwrap(), 1);
        assert_eq!(exact_match("The Eiffel Tower.", &["Eiffel Tower"]).unwrap(), 1);
        assert_eq!(exact_match("London", &["Paris"]).unwrap(), 0);
        assert_eq!(exact_match::<&str>("x", &[]), Err(MetricsError::EmptyGoldList));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("martial art", &["a martial art"]).unwrap(), 1.0);
        assert!((token_f1("art of karate", &["martial art"]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(token_f1("x", &["x"]).unwrap(), 1.0);
        assert_eq!(token_f1("", &["the"]).unwrap(), 1.0);
        assert_eq!(token_f1("", &["paris"]).unwrap(), 0.0);
        assert_eq!(token_f1::<&str>("x", &[]), Err(MetricsError::EmptyGoldList));
    }

    #[test]
    fn f1_uses_multiset_overlap() {
        // pred [new, new, york] vs gold [new, york]: overlap 2, P = 2/3, R = 1.
        let f = token_f1("new new york", &["new york"]).unwrap();
        assert!((f - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_takes_max_over_golds() {
        let f = token_f1("barack obama", &["obama", "barack obama"]).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn aggregate_table_row() {
        // 1000 items, 362 correct before and 498 after.
        let mut records = Vec::new();
        for i in 0..1000 {
            let id = format!("q{i}");
            records.push(rec(&id, u8::from(i < 362), Phase::PreT));
            records.push(rec(&id, u8::from(i < 498), Phase::PostT));
        }
        let agg = aggregate(&records, Metric::Em).unwrap();
        assert_eq!(agg.pre_t, Some(36.2));
        assert_eq!(agg.post_t, Some(49.8));
        assert_eq!(agg.gain, Some(13.6));
    }

    #[test]
    fn aggregate_identical_phases_has_zero_gain() {
        let records = vec![rec("a", 1, Phase::PreT), rec("a", 1, Phase::PostT)];
        assert_eq!(aggregate(&records, Metric::Em).unwrap().gain, Some(0.0));
    }

    #[test]
    fn aggregate_single_phase() {
        let records = vec![rec("a", 1, Phase::PostT), rec("b", 1, Phase::PostT), rec("c", 0, Phase::PostT)];
        let agg = aggregate(&records, Metric::Em).unwrap();
        assert_eq!(agg.post_t, Some(66.7));
        assert_eq!(agg.pre_t, None);
        assert_eq!(agg.gain, None);
    }

    #[test]
    fn aggregate_rejects_mismatched_universe() {
        let records = vec![rec("a", 1, Phase::PreT), rec("b", 1, Phase::PostT)];
        assert_eq!(aggregate(&records, Metric::Em), Err(MetricsError::MixedMetricPhases));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec("[a-z]{1,5}", 0..6)
        }

        proptest! {
            #[test]
            fn f1_bounded_and_dominates_em(p in words(), g in words()) {
                let (p, g) = (p.join(" "), g.join(" "));
                let f1 = token_f1(&p, std::slice::from_ref(&g)).unwrap();
                let em = exact_match(&p, &[g]).unwrap();
                prop_assert!((0.0..=1.0).contains(&f1));
                if em == 1 {
                    prop_assert_eq!(f1, 1.0);
                }
            }

            #[test]
            fn f1_symmetric_for_single_gold(p in words(), g in words()) {
                let (p, g) = (p.join(" "), g.join(" "));
                prop_assert_eq!(token_f1(&p, std::slice::from_ref(&g)).unwrap(), token_f1(&g, &[p]).unwrap());
            }

            #[test]
            fn metrics_ignore_case_punctuation_articles(p in words(), g in words(), punct in "[.,!?;:'\"]") {
                let (p, g) = (p.join(" "), g.join(" "));
                let noisy = format!("The {}{} ", p.to_uppercase(), punct);
                prop_assert_eq!(exact_match(&noisy, std::slice::from_ref(&g)).unwrap(), exact_match(&p, std::slice::from_ref(&g)).unwrap());
                prop_assert_eq!(token_f1(&noisy, std::slice::from_ref(&g)).unwrap(), token_f1(&p, &[g]).unwrap());
            }

            #[test]
            fn aggregate_is_weighted_mean_of_parts(a in proptest::collection::vec(0u8..=1, 1..20),
                                                   b in proptest::collection::vec(0u8..=1, 1..20)) {
                let part = |xs: &[u8], prefix: &str| -> Vec<MetricRecord> {
                    xs.iter().enumerate().map(|(i, e)| rec(&format!("{prefix}{i}"), *e, Phase::PostT)).collect()
                };
                let (ra, rb) = (part(&a, "a"), part(&b, "b"));
                let mean = |r: &[MetricRecord]| r.iter().map(|x| f64::from(x.em)).sum::<f64>() / r.len() as f64;
                let all: Vec<_> = ra.iter().chain(&rb).cloned().collect();
                let weighted = (mean(&ra) * ra.len() as f64 + mean(&rb) * rb.len() as f64) / all.len() as f64;
                let agg = aggregate(&all, Metric::Em).unwrap();
                prop_assert_eq!(agg.post_t, Some(round1(weighted * 100.0)));
            }
        }
    }
}
