//! Model-level filter summaries and per-document explanation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifact::Validate;
use crate::cluster::FilterClusters;
use crate::corpus::{pad_ids, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::CnnModel;
use crate::negation::{FilterNegatives, NegativeCase, NegativeNgram};
use crate::slots::{decompose_unchecked, ScoredNgram};
use crate::threshold::FilterProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopNgram {
    pub ngram: ScoredNgram,
    pub negatives: Vec<NegativeNgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSummary {
    pub centroid: Vec<f64>,
    pub size: usize,
    pub size_fraction: f64,
    pub top_ngrams: Vec<TopNgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSummary {
    pub filter_id: usize,
    pub width: usize,
    pub class_identity: usize,
    #[serde(with = "crate::artifact::extended_f64")]
    pub threshold: f64,
    pub achieved_purity: Option<f64>,
    pub coverage: f64,
    /// No threshold reaches the purity target; the filter is ignored.
    pub uninformative: bool,
    pub clusters: Vec<ClusterSummary>,
}

fn mismatch(filter: usize, what: &str) -> Error {
    Error::InvalidArgument(format!("filter {filter}: {what} do not match the profiles"))
}

/// Joins profiles, clusters and negatives into one record per filter.
pub fn summarize_model(
    model: &CnnModel,
    profiles: &[FilterProfile],
    clusters: &[FilterClusters],
    negatives: &[FilterNegatives],
) -> Result<Vec<FilterSummary>> {
    let m = model.filter_count();
    for len in [profiles.len(), clusters.len(), negatives.len()] {
        if len != m {
            return Err(Error::Dimension { expected: m, found: len });
        }
    }
    model
        .filters
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let (p, c, n) = (&profiles[j], &clusters[j], &negatives[j]);
            if p.filter_id != j || c.filter_id != j || n.filter_id != j {
                return Err(mismatch(j, "filter ids"));
            }
            if c.threshold.to_bits() != p.threshold.to_bits() {
                return Err(mismatch(j, "cluster thresholds"));
            }
            if n.threshold.to_bits() != p.threshold.to_bits() {
                return Err(mismatch(j, "negative thresholds"));
            }
            let uninformative = !p.is_informative();
            let clusters = c
                .clusters
                .iter()
                .map(|cl| ClusterSummary {
                    centroid: cl.centroid.clone(),
                    size: cl.size,
                    size_fraction: cl.size_fraction,
                    top_ngrams: cl
                        .top_ngrams
                        .iter()
                        .map(|ng| TopNgram {
                            ngram: ng.clone(),
                            negatives: n
                                .negatives
                                .iter()
                                .filter(|neg| neg.base == ng.slots.token_ids)
                                .cloned()
                                .collect(),
                        })
                        .collect(),
                })
                .collect();
            Ok(FilterSummary {
                filter_id: j,
                width: f.width,
                class_identity: p.class_identity,
                threshold: p.threshold,
                achieved_purity: p.achieved_purity,
                coverage: p.coverage,
                uninformative,
                clusters,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRow {
    pub filter_id: usize,
    pub class_identity: usize,
    /// Start of the winning ngram in the padded document.
    pub position: usize,
    pub ngram: Vec<TokenId>,
    pub ngram_text: String,
    /// Raw max-pooled convolution score.
    pub score: f64,
    pub bias: f64,
    pub slots: Vec<f64>,
    #[serde(with = "crate::artifact::extended_f64")]
    pub threshold: f64,
    pub passed_threshold: bool,
    pub case2_negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionExplanation {
    pub text: String,
    pub label: Option<usize>,
    pub predicted_class: usize,
    pub probability: f64,
    pub rows: Vec<ExplanationRow>,
}

/// One row per filter, taken from the plain forward pass's max-pooling
/// winners. A row is a Case 2 negative when its ngram misses the threshold
/// but would reach it without its negative slot activations.
pub fn explain_prediction(
    ids: &[TokenId],
    label: Option<usize>,
    model: &CnnModel,
    profiles: &[FilterProfile],
    vocab: &Vocabulary,
) -> Result<PredictionExplanation> {
    if profiles.len() != model.filter_count() {
        return Err(Error::Dimension { expected: model.filter_count(), found: profiles.len() });
    }
    let padded = pad_ids(ids, model.max_width());
    let pass = model.forward(&padded)?;
    let predicted_class = pass.predicted();
    let rows = model
        .filters
        .iter()
        .zip(profiles)
        .enumerate()
        .map(|(j, (f, p))| {
            let prov = &pass.pool.provenance[j];
            let slots = decompose_unchecked(&prov.token_ids, f, &model.embeddings);
            let score = pass.pool.pre_relu[j];
            let passed = score >= p.threshold;
            let negative: f64 = slots.activations.iter().filter(|a| **a < 0.0).sum();
            let case2 = !passed && p.is_informative() && slots.total + f.bias - negative >= p.threshold;
            ExplanationRow {
                filter_id: j,
                class_identity: p.class_identity,
                position: prov.position,
                ngram_text: vocab.join(&prov.token_ids),
                ngram: prov.token_ids.clone(),
                score,
                bias: f.bias,
                slots: slots.activations,
                threshold: p.threshold,
                passed_threshold: passed,
                case2_negative: case2,
            }
        })
        .collect();
    Ok(PredictionExplanation {
        text: vocab.join(ids),
        label,
        predicted_class,
        probability: pass.probs[predicted_class],
        rows,
    })
}

impl Validate for FilterSummary {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Schema(format!("filter {}: {msg}", self.filter_id)));
        if self.uninformative == self.threshold.is_finite() {
            return bad("uninformative flag disagrees with the threshold");
        }
        if self.uninformative && !self.clusters.is_empty() {
            return bad("uninformative filter has clusters");
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return bad("coverage outside [0,1]");
        }
        for c in &self.clusters {
            if c.centroid.len() != self.width {
                return bad("centroid width");
            }
            for t in &c.top_ngrams {
                t.ngram.validate()?;
                if t.negatives.iter().any(|n| n.base != t.ngram.slots.token_ids) {
                    return bad("negative attached to the wrong ngram");
                }
            }
        }
        Ok(())
    }
}

impl Validate for PredictionExplanation {
    fn validate(&self) -> Result<()> {
        for (j, r) in self.rows.iter().enumerate() {
            let bad = |msg: &str| Err(Error::Schema(format!("explanation row {j}: {msg}")));
            if r.filter_id != j {
                return bad("rows out of filter order");
            }
            if r.slots.len() != r.ngram.len() {
                return bad("slot count differs from ngram width");
            }
            let total: f64 = r.slots.iter().sum::<f64>() + r.bias;
            if (total - r.score).abs() > 1e-9 {
                return bad("slot scores do not add up to the row score");
            }
            if r.passed_threshold != (r.score >= r.threshold) {
                return bad("passed flag disagrees with the threshold");
            }
            if r.case2_negative && r.passed_threshold {
                return bad("a passing ngram cannot be a negative");
            }
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Schema("probability outside [0,1]".into()));
        }
        Ok(())
    }
}

fn marked(text: &str, bold: bool, italic: bool) -> String {
    if bold {
        format!("*{text}*")
    } else if italic {
        format!("_{text}_")
    } else {
        text.to_string()
    }
}

fn fmt_slots(slots: &[f64]) -> String {
    slots.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(" ")
}

fn fmt_threshold(t: f64) -> String {
    if t.is_finite() {
        format!("{t:.4}")
    } else {
        "inf".into()
    }
}

/// Left-aligned columns separated by two spaces.
fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Threshold-passing ngrams are `*bold*`, Case 2 negatives `_italic_`.
pub fn render_summary_text(summaries: &[FilterSummary]) -> String {
    let mut out = String::new();
    for s in summaries {
        let purity = s.achieved_purity.map_or("-".into(), |p| format!("{p:.3}"));
        let _ = writeln!(
            out,
            "filter {}  width {}  class {}  threshold {}  purity {}  coverage {:.3}",
            s.filter_id,
            s.width,
            s.class_identity,
            fmt_threshold(s.threshold),
            purity,
            s.coverage
        );
        if s.uninformative {
            out.push_str("  uninformative\n\n");
            continue;
        }
        for (k, c) in s.clusters.iter().enumerate() {
            let _ = writeln!(
                out,
                "  cluster {}  {:.1}% ({} ngrams)  centroid [{}]",
                k + 1,
                100.0 * c.size_fraction,
                c.size,
                fmt_slots(&c.centroid)
            );
            let mut rows = Vec::new();
            for t in &c.top_ngrams {
                rows.push(vec![
                    "   ".into(),
                    marked(&t.ngram.text, true, false),
                    format!("{:.4}", t.ngram.score),
                    fmt_slots(&t.ngram.slots.activations),
                ]);
                for n in &t.negatives {
                    let case2 = n.case == NegativeCase::Case2;
                    rows.push(vec![
                        "     ".into(),
                        marked(&n.variant_text, false, case2),
                        format!("{:.4}", n.variant_score),
                        fmt_slots(&n.variant_slots),
                    ]);
                }
            }
            out.push_str(&table(&rows));
        }
        out.push('\n');
    }
    out
}

pub fn render_explanations_text(explanations: &[PredictionExplanation]) -> String {
    let mut out = String::new();
    for e in explanations {
        let _ = writeln!(out, "document: {}", e.text);
        let label = e.label.map_or(String::new(), |l| format!("  label {l}"));
        let _ = writeln!(out, "predicted: {} (p = {:.4}){label}", e.predicted_class, e.probability);
        let mut rows = vec![vec!["filter".into(), "class".into(), "ngram".into(), "score".into(), "threshold".into(), "slots".into()]];
        for r in &e.rows {
            rows.push(vec![
                r.filter_id.to_string(),
                r.class_identity.to_string(),
                marked(&r.ngram_text, r.passed_threshold, r.case2_negative),
                format!("{:.4}", r.score),
                fmt_threshold(r.threshold),
                fmt_slots(&r.slots),
            ]);
        }
        out.push_str(&table(&rows));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::{schema, Artifact};
    use crate::cluster::cluster_filter_ngrams;
    use crate::corpus::EmbeddingTable;
    use crate::model::fixtures::random_model;
    use crate::model::{ConvFilter, ModelConfig};
    use crate::negation::find_negative_ngrams;
    use crate::numerics::{DenseMatrix, DenseVector};
    use crate::slots::NgramIndex;

    fn profile(j: usize, class: usize, t: f64) -> FilterProfile {
        FilterProfile {
            filter_id: j,
            class_identity: class,
            threshold: t,
            achieved_purity: t.is_finite().then_some(0.9),
            coverage: if t.is_finite() { 0.5 } else { 0.0 },
        }
    }

    /// Two width-2 filters over one-hot embeddings: filter 0 fires on
    /// "very good" (class 1), filter 1 on "not good" (class 0). "not"
    /// carries a strongly negative first-slot weight in filter 0.
    fn sentiment_model() -> (CnnModel, Vocabulary) {
        let vocab = Vocabulary::from_tokens(["very", "good", "not", "it", "was"].map(String::from)).unwrap();
        let d = vocab.len();
        let mut emb = DenseMatrix::zeros(d, d);
        for id in 1..d {
            emb.set(id, id, 1.0);
        }
        let id = |w: &str| vocab.id(w) as usize;
        let mut w0 = DenseMatrix::zeros(d, 2);
        w0.set(id("very"), 0, 2.0);
        w0.set(id("not"), 0, -2.5);
        w0.set(id("good"), 1, 3.0);
        let mut w1 = DenseMatrix::zeros(d, 2);
        w1.set(id("not"), 0, 2.0);
        w1.set(id("good"), 1, 1.5);
        w1.set(id("very"), 0, -0.5);
        let config = ModelConfig { embedding_dim: d, filters: "2:2".parse().unwrap(), classes: 2, head_bias: true };
        let model = CnnModel {
            config,
            embeddings: EmbeddingTable { matrix: emb },
            filters: vec![ConvFilter::new(0, w0, -0.5), ConvFilter::new(1, w1, -0.5)],
            head: DenseMatrix::new(2, 2, vec![-1.0, 1.0, 1.0, -1.0]).unwrap(),
            head_bias: DenseVector::new(vec![0.0, 0.0]).unwrap(),
        };
        model.validate().unwrap();
        (model, vocab)
    }

    #[test]
    fn explanation_cleans_filters_that_miss_threshold() {
        let (model, vocab) = sentiment_model();
        let profiles = vec![profile(0, 1, 3.0), profile(1, 0, 2.5)];
        let e = explain_prediction(&vocab.encode("it was very good"), Some(1), &model, &profiles, &vocab).unwrap();
        e.validate().unwrap();
        assert_eq!(e.predicted_class, 1);
        assert_eq!(e.rows.len(), 2);
        assert_eq!(e.rows[0].ngram_text, "very good");
        assert!(e.rows[0].passed_threshold);
        // the negative-class filter's best ngram is only "good" after a
        // weak word, well under its threshold
        assert!(!e.rows[1].passed_threshold);
        assert!(!e.rows[1].case2_negative);
        let text = render_explanations_text(&[e]);
        assert!(text.contains("*very good*"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn negated_winner_is_flagged_case2() {
        let (model, vocab) = sentiment_model();
        let profiles = vec![profile(0, 1, 1.0), profile(1, 0, 2.5)];
        let e = explain_prediction(&vocab.encode("not good"), None, &model, &profiles, &vocab).unwrap();
        let r = &e.rows[0];
        assert_eq!(r.ngram_text, "not good");
        // -2.5 + 3 - 0.5 = 0 < 1, and without the -2.5 it is 2.5 >= 1
        assert!(r.score.abs() < 1e-12);
        assert!(!r.passed_threshold && r.case2_negative);
        assert!(render_explanations_text(&[e.clone()]).contains("_not good_"));
        assert!(e.rows[1].passed_threshold);
    }

    #[test]
    fn unk_only_document_on_zero_model_scores_bias() {
        let mut model = random_model(ModelConfig { embedding_dim: 3, ..Default::default() }, 5, 1);
        for f in &mut model.filters {
            f.weights = DenseMatrix::zeros(3, f.width);
        }
        let vocab = Vocabulary::from_tokens(["a", "b", "c"].map(String::from)).unwrap();
        let profiles: Vec<FilterProfile> = (0..10).map(|j| profile(j, 0, 0.0)).collect();
        let e = explain_prediction(&vocab.encode("zzz qqq"), None, &model, &profiles, &vocab).unwrap();
        assert_eq!(e.rows.len(), 10);
        for (r, f) in e.rows.iter().zip(&model.filters) {
            assert_eq!(r.score, f.bias);
            assert_eq!(r.position, 0);
            assert_eq!(r.passed_threshold, f.bias >= 0.0);
        }
        e.validate().unwrap();
    }

    #[test]
    fn summary_joins_inputs_and_round_trips() {
        let (model, vocab) = sentiment_model();
        let docs = vec![
            vocab.encode("it was very good"),
            vocab.encode("it was not good"),
            vocab.encode("very good very good"),
        ];
        let index = NgramIndex::from_sequences(&docs, &[2]);
        let profiles = vec![profile(0, 1, 1.0), profile(1, 0, f64::INFINITY)];
        let c0 = cluster_filter_ngrams(&model.filters[0], &model.embeddings, &index, &profiles[0], &vocab, 3).unwrap();
        let bases: Vec<Vec<TokenId>> = c0.clusters.iter().flat_map(|c| c.top_ngrams.iter().map(|n| n.slots.token_ids.clone())).collect();
        let n0 = find_negative_ngrams(&model.filters[0], &model.embeddings, &profiles[0], &index, &bases, &vocab, 1, 5).unwrap();
        let clusters = vec![
            c0,
            FilterClusters { filter_id: 1, threshold: f64::INFINITY, points: vec![], result: None, clusters: vec![] },
        ];
        let negatives = vec![
            FilterNegatives { filter_id: 0, threshold: 1.0, bias: -0.5, max_hamming: 1, negatives: n0 },
            FilterNegatives { filter_id: 1, threshold: f64::INFINITY, bias: -0.5, max_hamming: 1, negatives: vec![] },
        ];
        let summaries = summarize_model(&model, &profiles, &clusters, &negatives).unwrap();
        assert_eq!(summaries.len(), 2);
        assert!(summaries[1].uninformative && summaries[1].clusters.is_empty());
        let top = &summaries[0].clusters[0].top_ngrams[0];
        assert_eq!(top.ngram.text, "very good");
        assert!(top.negatives.iter().any(|n| n.variant_text == "not good" && n.case == NegativeCase::Case2));
        let text = render_summary_text(&summaries);
        assert!(text.contains("*very good*") && text.contains("_not good_") && text.contains("uninformative"));

        let art = Artifact::new(schema::SUMMARY, vec![], summaries.clone());
        let json = art.to_json().unwrap();
        let back = Artifact::<Vec<FilterSummary>>::from_json(&json, schema::SUMMARY).unwrap();
        assert_eq!(back.payload, summaries);
        assert_eq!(back.to_json().unwrap(), json);

        let mut wrong = negatives.clone();
        wrong[0].threshold = 2.0;
        assert!(summarize_model(&model, &profiles, &clusters, &wrong).is_err());
        assert!(summarize_model(&model, &profiles[..1], &clusters, &negatives).is_err());
    }
}
