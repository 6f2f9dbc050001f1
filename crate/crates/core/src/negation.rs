//! Below-threshold "flipped versions" of high-scoring ngrams.

use std::collections::HashSet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::artifact::Validate;
use crate::corpus::{EmbeddingTable, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{check_ngram, ConvFilter};
use crate::slots::{decompose_unchecked, score_all, NgramIndex};
use crate::threshold::FilterProfile;

pub const DEFAULT_HAMMING: usize = 1;
pub const DEFAULT_BOTTOM_K: usize = 5;

pub fn hamming(a: &[TokenId], b: &[TokenId]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), found: b.len() });
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Case 1: high-scoring words were replaced by low-scoring ones. Case 2:
/// the replacements carry negative activations that alone keep the variant
/// below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NegativeCase {
    Case1,
    Case2,
}

impl Serialize for NegativeCase {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(match self {
            NegativeCase::Case1 => 1,
            NegativeCase::Case2 => 2,
        })
    }
}

impl<'de> Deserialize<'de> for NegativeCase {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            1 => Ok(NegativeCase::Case1),
            2 => Ok(NegativeCase::Case2),
            n => Err(serde::de::Error::custom(format!("negative case must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeNgram {
    pub base: Vec<TokenId>,
    pub base_text: String,
    pub base_score: f64,
    pub variant: Vec<TokenId>,
    pub variant_text: String,
    pub changed_slots: Vec<usize>,
    pub variant_score: f64,
    pub variant_slots: Vec<f64>,
    pub case: NegativeCase,
}

impl NegativeNgram {
    /// Variant slot-sum plus bias, with the negative activations of the
    /// changed slots removed.
    pub fn score_without_negative_changes(&self, bias: f64) -> f64 {
        let total: f64 = self.variant_slots.iter().sum();
        let negative: f64 = self
            .changed_slots
            .iter()
            .map(|&i| self.variant_slots[i])
            .filter(|a| *a < 0.0)
            .sum();
        total + bias - negative
    }
}

/// Case 2 when every changed slot has a negative activation and dropping
/// those activations lifts the score to the threshold.
pub fn classify_case(neg: &NegativeNgram, filter: &ConvFilter, threshold: f64) -> NegativeCase {
    let all_negative = !neg.changed_slots.is_empty() && neg.changed_slots.iter().all(|&i| neg.variant_slots[i] < 0.0);
    if all_negative && neg.score_without_negative_changes(filter.bias) >= threshold {
        NegativeCase::Case2
    } else {
        NegativeCase::Case1
    }
}

/// For each base ngram (in the given rank order) scoring at least the
/// threshold, the `bottom_k` lowest-scoring distinct corpus ngrams that score
/// below it and differ from the base in 1 to `max_hamming` positions.
#[allow(clippy::too_many_arguments)]
pub fn find_negative_ngrams(
    filter: &ConvFilter,
    embeddings: &EmbeddingTable,
    profile: &FilterProfile,
    index: &NgramIndex,
    bases: &[Vec<TokenId>],
    vocab: &Vocabulary,
    max_hamming: usize,
    bottom_k: usize,
) -> Result<Vec<NegativeNgram>> {
    let t = profile.threshold;
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("filter {} has no finite threshold", filter.filter_id)));
    }
    let mut below: Vec<_> = score_all(filter, embeddings, index)
        .into_iter()
        .filter(|(s, _)| *s < t)
        .collect();
    below.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.token_ids.cmp(&b.1.token_ids)));

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for base in bases {
        check_ngram(base, filter, embeddings)?;
        if !seen.insert(base.clone()) {
            continue;
        }
        let base_score = decompose_unchecked(base, filter, embeddings).score(filter.bias);
        if base_score < t {
            continue;
        }
        let variants = below
            .iter()
            .filter(|(_, s)| {
                let d = hamming(base, &s.token_ids).unwrap_or(usize::MAX);
                (1..=max_hamming).contains(&d)
            })
            .take(bottom_k);
        for (score, slots) in variants {
            let changed_slots: Vec<usize> = (0..base.len()).filter(|&i| base[i] != slots.token_ids[i]).collect();
            let mut neg = NegativeNgram {
                base: base.clone(),
                base_text: vocab.join(base),
                base_score,
                variant: slots.token_ids.clone(),
                variant_text: vocab.join(&slots.token_ids),
                changed_slots,
                variant_score: *score,
                variant_slots: slots.activations.clone(),
                case: NegativeCase::Case1,
            };
            neg.case = classify_case(&neg, filter, t);
            out.push(neg);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterNegatives {
    pub filter_id: usize,
    #[serde(with = "crate::artifact::extended_f64")]
    pub threshold: f64,
    pub bias: f64,
    pub max_hamming: usize,
    pub negatives: Vec<NegativeNgram>,
}

impl Validate for FilterNegatives {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Schema(format!("filter {}: {msg}", self.filter_id)));
        for n in &self.negatives {
            if n.base.len() != n.variant.len() || n.variant_slots.len() != n.variant.len() {
                return bad("negative ngram widths disagree");
            }
            let changed: Vec<usize> = (0..n.base.len()).filter(|&i| n.base[i] != n.variant[i]).collect();
            if changed != n.changed_slots || changed.is_empty() || changed.len() > self.max_hamming {
                return bad("changed slots do not match the ngrams");
            }
            if n.variant_score >= self.threshold || n.base_score < self.threshold {
                return bad("negative ngram on the wrong side of the threshold");
            }
            if n.case == NegativeCase::Case2 && n.score_without_negative_changes(self.bias) < self.threshold {
                return bad("case 2 negative does not pass without its negative slots");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::random_model;
    use crate::model::{ngram_score, ModelConfig};
    use crate::numerics::SeededRng;
    use crate::slots::fixtures::hand_filter;
    use proptest::prelude::*;

    fn profile(t: f64) -> FilterProfile {
        FilterProfile {
            filter_id: 0,
            class_identity: 1,
            threshold: t,
            achieved_purity: Some(1.0),
            coverage: 0.5,
        }
    }

    /// Slot activations of the electronics-review negative table, one word
    /// per row, zero where the table is silent.
    fn table_fixture() -> (Vocabulary, crate::corpus::EmbeddingTable, ConvFilter) {
        hand_filter(
            &[
                ("'m", vec![2.59, 0.0, 0.0]),
                ("really", vec![0.0, 1.86, 0.0]),
                ("pleased", vec![0.0, 0.0, 5.05]),
                ("not", vec![-2.6, -3.4, -2.49]),
                ("upset", vec![0.0, 0.0, -1.14]),
                ("is", vec![2.3, 0.0, 0.0]),
                ("extremely", vec![0.0, 3.24, 0.0]),
                ("useful", vec![0.0, 0.0, 3.96]),
                ("limited", vec![0.0, 0.0, -2.8]),
                ("noisy", vec![0.0, 0.0, -2.77]),
                ("only", vec![0.0, -2.82, 0.0]),
                ("surprisingly", vec![0.0, 4.32, 0.0]),
                ("good", vec![0.0, 0.0, 2.8]),
                ("no", vec![0.0, -1.88, 0.0]),
                ("probably", vec![0.0, -1.66, 0.0]),
                ("am", vec![2.01, 0.0, 0.0]),
                ("very", vec![0.0, 2.17, 0.0]),
                ("satisfied", vec![0.0, 0.0, 5.09]),
                ("dissatisfied", vec![0.0, 0.0, -1.9]),
                ("disappointed", vec![0.0, 0.0, -1.87]),
            ],
            0.0,
        )
    }

    const TABLE: [(&str, &[(&str, bool)]); 4] = [
        ("'m really pleased", &[("'m not pleased", true), ("'m really not", false), ("'m really upset", false)]),
        (
            "is extremely useful",
            &[("is not useful", true), ("is extremely limited", true), ("is extremely noisy", true), ("is only useful", true)],
        ),
        (
            "is surprisingly good",
            &[("is not good", false), ("is only good", false), ("is no good", false), ("is probably good", false)],
        ),
        (
            "am very satisfied",
            &[("not very satisfied", true), ("am very dissatisfied", false), ("am very disappointed", false), ("am not satisfied", true)],
        ),
    ];

    #[test]
    fn hamming_examples() {
        let v = Vocabulary::from_tokens(["'m", "really", "pleased", "not"].map(String::from)).unwrap();
        assert_eq!(hamming(&v.encode("'m really pleased"), &v.encode("'m really pleased")).unwrap(), 0);
        assert_eq!(hamming(&v.encode("'m really pleased"), &v.encode("'m not pleased")).unwrap(), 1);
        assert!(hamming(&[1, 2], &[1]).is_err());
        let mut rng = SeededRng::new(3);
        for _ in 0..100 {
            let a: Vec<TokenId> = (0..4).map(|_| rng.below(3) as TokenId).collect();
            let b: Vec<TokenId> = (0..4).map(|_| rng.below(3) as TokenId).collect();
            let mut n = 0;
            for i in 0..4 {
                if a[i] != b[i] {
                    n += 1;
                }
            }
            assert_eq!(hamming(&a, &b).unwrap(), n);
        }
    }

    #[test]
    fn not_pleased_arithmetic() {
        let (vocab, emb, f) = table_fixture();
        let index = NgramIndex::from_sequences(&[vocab.encode("'m not pleased")], &[3]);
        let bases = vec![vocab.encode("'m really pleased")];
        assert!((ngram_score(&bases[0], &f, &emb).unwrap() - 9.5).abs() < 1e-12);
        for t in [4.25, 5.3, 7.64] {
            let negs = find_negative_ngrams(&f, &emb, &profile(t), &index, &bases, &vocab, 1, 5).unwrap();
            assert_eq!(negs.len(), 1);
            let n = &negs[0];
            assert_eq!(n.changed_slots, vec![1]);
            assert_eq!(n.variant_slots[1], -3.4);
            assert!((n.variant_score - 4.24).abs() < 1e-12);
            assert!((n.score_without_negative_changes(0.0) - 7.64).abs() < 1e-12);
            assert_eq!(n.case, NegativeCase::Case2, "t = {t}");
        }
        let negs = find_negative_ngrams(&f, &emb, &profile(7.7), &index, &bases, &vocab, 1, 5).unwrap();
        assert_eq!(negs[0].case, NegativeCase::Case1);
    }

    #[test]
    fn full_table_reproduces() {
        let (vocab, emb, f) = table_fixture();
        let mut docs = Vec::new();
        for (base, rows) in TABLE {
            docs.push(vocab.encode(base));
            docs.extend(rows.iter().map(|(r, _)| vocab.encode(r)));
        }
        let index = NgramIndex::from_sequences(&docs, &[3]);
        let bases: Vec<Vec<TokenId>> = TABLE.iter().map(|(b, _)| vocab.encode(b)).collect();
        let prof = profile(5.3);
        let negs = find_negative_ngrams(&f, &emb, &prof, &index, &bases, &vocab, 1, 5).unwrap();
        for (base, rows) in TABLE {
            let found: Vec<&NegativeNgram> = negs.iter().filter(|n| n.base_text == base).collect();
            assert_eq!(found.len(), rows.len(), "{base}");
            for (text, bold) in rows {
                let n = found.iter().find(|n| n.variant_text == *text).unwrap();
                let want = if *bold { NegativeCase::Case2 } else { NegativeCase::Case1 };
                assert_eq!(n.case, want, "{text}");
            }
        }
        let fneg = FilterNegatives { filter_id: 0, threshold: 5.3, bias: 0.0, max_hamming: 1, negatives: negs };
        fneg.validate().unwrap();
    }

    #[test]
    fn is_not_useful_changes_the_middle_slot() {
        let (vocab, emb, f) = table_fixture();
        let index = NgramIndex::from_sequences(&[vocab.encode("is extremely useful"), vocab.encode("is not useful")], &[3]);
        let negs = find_negative_ngrams(&f, &emb, &profile(5.3), &index, &[vocab.encode("is extremely useful")], &vocab, 1, 5).unwrap();
        assert_eq!(negs.len(), 1);
        assert_eq!(negs[0].variant_text, "is not useful");
        assert_eq!(negs[0].changed_slots, vec![1]);
    }

    #[test]
    fn above_threshold_corpus_has_no_negatives() {
        let (vocab, emb, f) = table_fixture();
        let index = NgramIndex::from_sequences(&[vocab.encode("is extremely useful"), vocab.encode("am very satisfied")], &[3]);
        let negs = find_negative_ngrams(&f, &emb, &profile(5.3), &index, &[vocab.encode("is extremely useful")], &vocab, 1, 5).unwrap();
        assert!(negs.is_empty());
    }

    #[test]
    fn positive_replacement_is_case_one() {
        let (vocab, emb, f) = hand_filter(&[("a", vec![3.0, 2.0]), ("b", vec![0.1, 2.0]), ("c", vec![0.0, 3.0])], 0.0);
        let index = NgramIndex::from_sequences(&[vocab.encode("a c b c")], &[2]);
        let negs = find_negative_ngrams(&f, &emb, &profile(4.0), &index, &[vocab.encode("a c")], &vocab, 1, 5).unwrap();
        assert_eq!(negs.len(), 1);
        assert_eq!(negs[0].variant_text, "b c");
        assert_eq!(negs[0].case, NegativeCase::Case1);
    }

    #[test]
    fn bottom_k_keeps_lowest() {
        let words: Vec<(String, Vec<f64>)> = (0..8).map(|i| (format!("w{i}"), vec![-(i as f64), 0.0])).collect();
        let mut table: Vec<(&str, Vec<f64>)> = words.iter().map(|(w, a)| (w.as_str(), a.clone())).collect();
        table.push(("top", vec![5.0, 0.0]));
        table.push(("end", vec![0.0, 1.0]));
        let (vocab, emb, f) = hand_filter(&table, 0.0);
        let docs: Vec<Vec<TokenId>> = (0..8).map(|i| vocab.encode(&format!("w{i} end"))).chain([vocab.encode("top end")]).collect();
        let index = NgramIndex::from_sequences(&docs, &[2]);
        let negs = find_negative_ngrams(&f, &emb, &profile(3.0), &index, &[vocab.encode("top end")], &vocab, 1, 3).unwrap();
        let got: Vec<&str> = negs.iter().map(|n| n.variant_text.as_str()).collect();
        assert_eq!(got, vec!["w7 end", "w6 end", "w5 end"]);
    }

    /// Independent reading of the case definition on raw numbers.
    fn case_oracle(base: &[TokenId], variant: &[TokenId], slots: &[f64], bias: f64, t: f64) -> u8 {
        let mut changed_negative = 0.0;
        let mut changed = 0;
        let mut negative = 0;
        for i in 0..base.len() {
            if base[i] != variant[i] {
                changed += 1;
                if slots[i] < 0.0 {
                    negative += 1;
                    changed_negative += slots[i];
                }
            }
        }
        let full: f64 = slots.iter().sum::<f64>() + bias;
        if changed > 0 && negative == changed && full - changed_negative >= t {
            2
        } else {
            1
        }
    }

    #[test]
    fn classify_case_matches_oracle_on_random_fixtures() {
        let mut rng = SeededRng::new(44);
        for _ in 0..1000 {
            let width = 1 + rng.below(4);
            let base: Vec<TokenId> = (0..width).map(|_| 1 + rng.below(5) as TokenId).collect();
            let mut variant = base.clone();
            for v in variant.iter_mut() {
                if rng.chance(0.4) {
                    *v = 1 + rng.below(5) as TokenId;
                }
            }
            let slots: Vec<f64> = (0..width).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let bias = rng.uniform(-1.0, 1.0);
            let t = rng.uniform(-2.0, 6.0);
            let f = ConvFilter::new(0, crate::numerics::DenseMatrix::zeros(1, width), bias);
            let neg = NegativeNgram {
                changed_slots: (0..width).filter(|&i| base[i] != variant[i]).collect(),
                base_text: String::new(),
                variant_text: String::new(),
                base_score: 0.0,
                variant_score: slots.iter().sum::<f64>() + bias,
                variant_slots: slots.clone(),
                base,
                variant,
                case: NegativeCase::Case1,
            };
            let want = case_oracle(&neg.base, &neg.variant, &slots, bias, t);
            let got = match classify_case(&neg, &f, t) {
                NegativeCase::Case1 => 1,
                NegativeCase::Case2 => 2,
            };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn case_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&NegativeCase::Case2).unwrap(), "2");
        assert_eq!(serde_json::from_str::<NegativeCase>("1").unwrap(), NegativeCase::Case1);
        assert!(serde_json::from_str::<NegativeCase>("3").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn matches_brute_force_pairing(seed in 0u64..1000, docs in prop::collection::vec(prop::collection::vec(1u32..6, 2..8), 2..6), k in 1usize..3) {
            let model = random_model(ModelConfig { embedding_dim: 3, filters: "2:1".parse().unwrap(), ..Default::default() }, 6, seed);
            let f = &model.filters[0];
            let emb = &model.embeddings;
            let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"].map(String::from)).unwrap();
            let index = NgramIndex::from_sequences(&docs, &[2]);
            let all = index.ngrams(2);
            let mut scores: Vec<f64> = all.iter().map(|n| ngram_score(n, f, emb).unwrap()).collect();
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = scores[scores.len() / 2];
            let bases: Vec<Vec<TokenId>> = all.iter().filter(|n| ngram_score(n, f, emb).unwrap() >= t).cloned().collect();
            let got = find_negative_ngrams(f, emb, &profile(t), &index, &bases, &vocab, k, usize::MAX).unwrap();

            let mut want = Vec::new();
            for b in &bases {
                for v in all {
                    let d = b.iter().zip(v).filter(|(x, y)| x != y).count();
                    let s = ngram_score(v, f, emb).unwrap();
                    if d >= 1 && d <= k && s < t {
                        want.push((b.clone(), v.clone()));
                    }
                }
            }
            let mut got_pairs: Vec<_> = got.iter().map(|n| (n.base.clone(), n.variant.clone())).collect();
            got_pairs.sort();
            want.sort();
            prop_assert_eq!(got_pairs, want);
            for n in &got {
                let sans = n.score_without_negative_changes(f.bias);
                if n.case == NegativeCase::Case2 {
                    prop_assert!(sans >= t);
                }
                prop_assert!((n.variant_slots.iter().sum::<f64>() + f.bias - n.variant_score).abs() < 1e-9);
            }
        }
    }
}
