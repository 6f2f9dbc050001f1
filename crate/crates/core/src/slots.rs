//! Per-word decomposition of filter scores, top words per slot, and the
//! comparison between the best naturally occurring and best possible ngrams.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::Validate;
use crate::corpus::{pad_ids, EmbeddingTable, LabeledCorpus, TokenId, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{check_ngram, CnnModel, ConvFilter};

/// How much each word of an ngram activates its slot of the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotActivationVector {
    pub token_ids: Vec<TokenId>,
    pub filter_id: usize,
    pub activations: Vec<f64>,
    /// Sum of `activations`; the filter bias is not included.
    pub total: f64,
}

impl SlotActivationVector {
    pub fn score(&self, bias: f64) -> f64 {
        self.total + bias
    }
}

pub fn slot_decompose(ids: &[TokenId], filter: &ConvFilter, embeddings: &EmbeddingTable) -> Result<SlotActivationVector> {
    check_ngram(ids, filter, embeddings)?;
    Ok(decompose_unchecked(ids, filter, embeddings))
}

pub(crate) fn decompose_unchecked(ids: &[TokenId], filter: &ConvFilter, embeddings: &EmbeddingTable) -> SlotActivationVector {
    let activations: Vec<f64> = ids
        .iter()
        .enumerate()
        .map(|(slot, &id)| filter.slot_activation(slot, embeddings.row(id)))
        .collect();
    // same accumulation order as the model's ngram score
    let mut total = 0.0;
    for a in &activations {
        total += a;
    }
    SlotActivationVector {
        token_ids: ids.to_vec(),
        filter_id: filter.filter_id,
        activations,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordScore {
    pub token_id: TokenId,
    pub token: String,
    pub score: f64,
}

fn slot_scores(filter: &ConvFilter, embeddings: &EmbeddingTable, slot: usize) -> Vec<(TokenId, f64)> {
    (0..embeddings.vocab_size() as TokenId)
        .filter(|&id| id != PAD)
        .map(|id| (id, filter.slot_activation(slot, embeddings.row(id))))
        .collect()
}

/// For each slot, the `k` highest-scoring vocabulary words (PAD excluded).
/// Equal scores keep id order.
pub fn top_words_per_slot(filter: &ConvFilter, embeddings: &EmbeddingTable, vocab: &Vocabulary, k: usize) -> Vec<Vec<WordScore>> {
    (0..filter.width)
        .map(|slot| {
            let mut scores = slot_scores(filter, embeddings, slot);
            scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scores
                .into_iter()
                .take(k)
                .map(|(id, score)| WordScore {
                    token_id: id,
                    token: vocab.token(id).to_string(),
                    score,
                })
                .collect()
        })
        .collect()
}

/// The highest slot-sum any PAD-free ngram can reach, found by maximizing
/// each slot independently, together with one ngram attaining it.
pub fn top_possible_ngram(filter: &ConvFilter, embeddings: &EmbeddingTable) -> (Vec<TokenId>, f64) {
    let mut ids = Vec::with_capacity(filter.width);
    let mut total = 0.0;
    for slot in 0..filter.width {
        let (id, best) = slot_scores(filter, embeddings, slot)
            .into_iter()
            .fold((PAD, f64::NEG_INFINITY), |acc, (id, s)| if s > acc.1 { (id, s) } else { acc });
        ids.push(id);
        total += best;
    }
    (ids, total)
}

pub fn max_possible_score(filter: &ConvFilter, embeddings: &EmbeddingTable) -> f64 {
    top_possible_ngram(filter, embeddings).1
}

/// Distinct ngrams of each width occurring in a padded corpus, sorted by
/// token ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NgramIndex {
    by_width: BTreeMap<usize, Vec<Vec<TokenId>>>,
}

impl NgramIndex {
    pub fn build(corpus: &LabeledCorpus, pad_width: usize, widths: &[usize]) -> Self {
        let padded: Vec<Vec<TokenId>> = corpus
            .documents
            .iter()
            .map(|d| pad_ids(&d.token_ids, pad_width))
            .collect();
        Self::from_sequences(&padded, widths)
    }

    pub fn for_model(model: &CnnModel, corpus: &LabeledCorpus) -> Self {
        let mut widths = model.config.filters.widths();
        widths.dedup();
        Self::build(corpus, model.max_width(), &widths)
    }

    pub fn from_sequences(sequences: &[Vec<TokenId>], widths: &[usize]) -> Self {
        let mut by_width = BTreeMap::new();
        for &w in widths {
            let set: BTreeSet<&[TokenId]> = sequences.iter().flat_map(|s| s.windows(w)).collect();
            by_width.insert(w, set.into_iter().map(<[TokenId]>::to_vec).collect());
        }
        Self { by_width }
    }

    pub fn ngrams(&self, width: usize) -> &[Vec<TokenId>] {
        self.by_width.get(&width).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredNgram {
    pub text: String,
    /// Convolution score, bias included.
    pub score: f64,
    pub slots: SlotActivationVector,
}

/// Every distinct corpus ngram of the filter's width with its score and
/// slot vector, unsorted.
pub(crate) fn score_all(filter: &ConvFilter, embeddings: &EmbeddingTable, index: &NgramIndex) -> Vec<(f64, SlotActivationVector)> {
    index
        .ngrams(filter.width)
        .par_iter()
        .map(|ids| {
            let slots = decompose_unchecked(ids, filter, embeddings);
            (slots.score(filter.bias), slots)
        })
        .collect()
}

pub(crate) fn sort_desc(scored: &mut [(f64, SlotActivationVector)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.token_ids.cmp(&b.1.token_ids)));
}

pub(crate) fn to_scored(vocab: &Vocabulary, score: f64, slots: SlotActivationVector) -> ScoredNgram {
    ScoredNgram {
        text: vocab.join(&slots.token_ids),
        score,
        slots,
    }
}

/// The `k` best-scoring distinct ngrams of the corpus; equal scores are
/// ordered by token ids.
pub fn top_natural_ngrams(
    filter: &ConvFilter,
    embeddings: &EmbeddingTable,
    index: &NgramIndex,
    vocab: &Vocabulary,
    k: usize,
) -> Vec<ScoredNgram> {
    let mut scored = score_all(filter, embeddings, index);
    sort_desc(&mut scored);
    scored
        .into_iter()
        .take(k)
        .map(|(score, slots)| to_scored(vocab, score, slots))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterGap {
    pub filter_id: usize,
    /// Best slot-sum over corpus ngrams.
    pub top_natural: f64,
    /// Best slot-sum over all PAD-free ngrams.
    pub top_possible: f64,
    pub bias: f64,
    /// `top_natural / top_possible`; absent when `top_possible` is zero.
    pub ratio: Option<f64>,
    /// `1 - ratio`.
    pub gap: Option<f64>,
    /// The same gap computed on bias-inclusive scores.
    pub gap_with_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapReport {
    pub filters: Vec<FilterGap>,
    /// Mean of the defined per-filter gaps.
    pub mean_gap: Option<f64>,
    pub mean_gap_with_bias: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn natural_possible_gap(model: &CnnModel, index: &NgramIndex) -> Result<GapReport> {
    let filters = model
        .filters
        .iter()
        .map(|f| {
            let top_natural = score_all(f, &model.embeddings, index)
                .iter()
                .map(|(_, s)| s.total)
                .fold(f64::NEG_INFINITY, f64::max);
            if !top_natural.is_finite() {
                return Err(Error::Empty("no corpus ngrams of the filter's width"));
            }
            let top_possible = max_possible_score(f, &model.embeddings);
            let ratio = (top_possible != 0.0).then(|| top_natural / top_possible);
            let biased = top_possible + f.bias;
            Ok(FilterGap {
                filter_id: f.filter_id,
                top_natural,
                top_possible,
                bias: f.bias,
                ratio,
                gap: ratio.map(|r| 1.0 - r),
                gap_with_bias: (biased != 0.0).then(|| 1.0 - (top_natural + f.bias) / biased),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GapReport {
        mean_gap: mean_defined(filters.iter().map(|g| g.gap)),
        mean_gap_with_bias: mean_defined(filters.iter().map(|g| g.gap_with_bias)),
        filters,
    })
}

/// Everything the slot analysis reports for one filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSlots {
    pub filter_id: usize,
    pub width: usize,
    pub bias: f64,
    pub top_words: Vec<Vec<WordScore>>,
    pub top_possible: ScoredNgram,
    pub top_natural: Vec<ScoredNgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotsReport {
    pub filters: Vec<FilterSlots>,
    pub gap: GapReport,
}

pub fn analyze_slots(model: &CnnModel, index: &NgramIndex, vocab: &Vocabulary, k: usize) -> Result<SlotsReport> {
    let filters = model
        .filters
        .iter()
        .map(|f| {
            let (ids, _) = top_possible_ngram(f, &model.embeddings);
            let slots = decompose_unchecked(&ids, f, &model.embeddings);
            FilterSlots {
                filter_id: f.filter_id,
                width: f.width,
                bias: f.bias,
                top_words: top_words_per_slot(f, &model.embeddings, vocab, k),
                top_possible: to_scored(vocab, slots.score(f.bias), slots),
                top_natural: top_natural_ngrams(f, &model.embeddings, index, vocab, k),
            }
        })
        .collect();
    Ok(SlotsReport {
        filters,
        gap: natural_possible_gap(model, index)?,
    })
}

fn check_slot_vector(s: &SlotActivationVector) -> Result<()> {
    if s.activations.len() != s.token_ids.len() {
        return Err(Error::Schema("slot vector length differs from ngram width".into()));
    }
    let sum: f64 = s.activations.iter().sum();
    if (sum - s.total).abs() > 1e-9 {
        return Err(Error::Schema(format!("slot total {} != sum {sum}", s.total)));
    }
    Ok(())
}

impl Validate for ScoredNgram {
    fn validate(&self) -> Result<()> {
        check_slot_vector(&self.slots)
    }
}

impl Validate for SlotsReport {
    fn validate(&self) -> Result<()> {
        if self.filters.len() != self.gap.filters.len() {
            return Err(Error::Schema("gap report does not cover every filter".into()));
        }
        for f in &self.filters {
            if f.top_words.len() != f.width {
                return Err(Error::Schema(format!("filter {}: wrong slot count", f.filter_id)));
            }
            for slot in &f.top_words {
                if slot.windows(2).any(|w| w[0].score < w[1].score) {
                    return Err(Error::Schema(format!("filter {}: slot ranking not sorted", f.filter_id)));
                }
            }
            f.top_possible.validate()?;
            f.top_natural.validate()?;
            if f.top_natural.windows(2).any(|w| w[0].score < w[1].score) {
                return Err(Error::Schema(format!("filter {}: ngram ranking not sorted", f.filter_id)));
            }
        }
        Ok(())
    }
}
