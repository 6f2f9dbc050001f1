//! Per-filter thresholds that separate informative pooled values from the
//! ones max-pooling picked only because nothing scored higher.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::Validate;
use crate::corpus::{pad_ids, LabeledCorpus, TokenId};
use crate::error::{Error, Result};
use crate::model::{CnnModel, ForwardPass};
use crate::numerics::{argmax, softmax};

pub const DEFAULT_PURITY: f64 = 0.75;

/// The class a filter votes for: the row of `W` with the largest weight in
/// the filter's column.
pub fn class_identity(model: &CnnModel, filter: usize) -> usize {
    argmax(&model.head.column(filter)).expect("head has at least one class")
}

/// One `(pooled value, prediction matched the filter's class)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub value: f64,
    pub correlated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdDataset {
    /// `pairs[j]` holds one pair per document for filter `j`.
    pub pairs: Vec<Vec<ThresholdPair>>,
}

pub fn build_threshold_dataset(model: &CnnModel, corpus: &LabeledCorpus) -> Result<ThresholdDataset> {
    if corpus.is_empty() {
        return Err(Error::Empty("threshold corpus"));
    }
    let identities: Vec<usize> = (0..model.filter_count()).map(|j| class_identity(model, j)).collect();
    let width = model.max_width();
    let passes = corpus
        .documents
        .par_iter()
        .map(|doc| model.forward(&pad_ids(&doc.token_ids, width)))
        .collect::<Result<Vec<_>>>()?;
    let pairs = identities
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            passes
                .iter()
                .map(|fw| ThresholdPair {
                    value: fw.pool.pooled[j],
                    correlated: fw.predicted() == c,
                })
                .collect()
        })
        .collect();
    Ok(ThresholdDataset { pairs })
}

/// Fraction of pairs at or above `t` whose prediction agreed with the
/// filter's class. `None` when nothing reaches `t`.
pub fn purity(pairs: &[ThresholdPair], t: f64) -> Option<f64> {
    let (hits, total) = pairs
        .iter()
        .filter(|p| p.value >= t)
        .fold((0usize, 0usize), |(h, n), p| (h + usize::from(p.correlated), n + 1));
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Fraction of pairs at or above `t`.
pub fn coverage(pairs: &[ThresholdPair], t: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| p.value >= t).count() as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    /// `f64::INFINITY` when no candidate reaches the target purity.
    pub threshold: f64,
    pub purity: Option<f64>,
    pub coverage: f64,
}

/// Lowest candidate threshold (0 or an observed value) whose purity reaches
/// `target`; `+∞` with zero coverage when none does.
pub fn select_threshold(pairs: &[ThresholdPair], target: f64) -> ThresholdChoice {
    let mut sorted: Vec<ThresholdPair> = pairs.to_vec();
    sorted.sort_by(|a, b| b.value.total_cmp(&a.value));
    // walk values from the top, recording (candidate, hits, count) for the
    // set of pairs at or above each distinct value
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let (mut hits, mut count) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].value;
        while i < sorted.len() && sorted[i].value == v {
            hits += usize::from(sorted[i].correlated);
            count += 1;
            i += 1;
        }
        if v >= 0.0 {
            candidates.push((v, hits, count));
        }
    }
    if candidates.last().is_none_or(|c| c.0 > 0.0) {
        // 0 is always a candidate; it admits every non-negative value
        let n = sorted.iter().filter(|p| p.value >= 0.0).count();
        let h = sorted.iter().filter(|p| p.value >= 0.0 && p.correlated).count();
        candidates.push((0.0, h, n));
    }
    for &(t, h, n) in candidates.iter().rev() {
        if n > 0 {
            let p = h as f64 / n as f64;
            if p >= target {
                return ThresholdChoice {
                    threshold: t,
                    purity: Some(p),
                    coverage: n as f64 / pairs.len() as f64,
                };
            }
        }
    }
    ThresholdChoice {
        threshold: f64::INFINITY,
        purity: None,
        coverage: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterProfile {
    pub filter_id: usize,
    pub class_identity: usize,
    #[serde(with = "crate::artifact::extended_f64")]
    pub threshold: f64,
    /// Absent when the threshold is infinite.
    pub achieved_purity: Option<f64>,
    pub coverage: f64,
}

impl FilterProfile {
    pub fn is_informative(&self) -> bool {
        self.threshold.is_finite()
    }

    /// Internal consistency, plus the purity floor when a target is given.
    pub fn check(&self, target_purity: Option<f64>) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::Schema(format!("filter {}: coverage outside [0,1]", self.filter_id)));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::Schema(format!("filter {}: bad threshold", self.filter_id)));
        }
        match (self.threshold.is_finite(), self.achieved_purity) {
            (true, Some(p)) => {
                if target_purity.is_some_and(|t| p < t) {
                    return Err(Error::Schema(format!("filter {}: purity below target", self.filter_id)));
                }
            }
            (false, None) if self.coverage == 0.0 => {}
            _ => {
                return Err(Error::Schema(format!(
                    "filter {}: purity/threshold/coverage disagree",
                    self.filter_id
                )))
            }
        }
        Ok(())
    }
}

impl Validate for FilterProfile {
    fn validate(&self) -> Result<()> {
        self.check(None)
    }
}

pub fn derive_profiles(model: &CnnModel, dataset: &ThresholdDataset, target: f64) -> Vec<FilterProfile> {
    dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(j, pairs)| {
            let choice = select_threshold(pairs, target);
            FilterProfile {
                filter_id: j,
                class_identity: class_identity(model, j),
                threshold: choice.threshold,
                achieved_purity: choice.purity,
                coverage: choice.coverage,
            }
        })
        .collect()
}

fn check_profiles(model: &CnnModel, profiles: &[FilterProfile]) -> Result<()> {
    if profiles.len() != model.filter_count() {
        return Err(Error::Dimension {
            expected: model.filter_count(),
            found: profiles.len(),
        });
    }
    Ok(())
}

/// Forward pass with ReLU replaced by the per-filter threshold function:
/// each pooled value is kept when it reaches the filter's threshold and
/// zeroed otherwise.
pub fn thresholded_forward(model: &CnnModel, ids: &[TokenId], profiles: &[FilterProfile]) -> Result<ForwardPass> {
    check_profiles(model, profiles)?;
    let conv = model.convolve(ids)?;
    let mut pool = model.pool(ids, &conv);
    for (p, (raw, prof)) in pool.pooled.iter_mut().zip(pool.pre_relu.iter().zip(profiles)) {
        *p = if *raw >= prof.threshold { *raw } else { 0.0 };
    }
    let logits = model.logits(&pool.pooled);
    let probs = softmax(&logits);
    Ok(ForwardPass { logits, probs, pool, conv })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEvaluation {
    pub relu_accuracy: f64,
    pub thresholded_accuracy: f64,
    /// Mean over filters of the fraction of documents whose pooled value
    /// reaches the filter's threshold.
    pub mean_coverage: f64,
}

pub fn evaluate_thresholded(model: &CnnModel, profiles: &[FilterProfile], corpus: &LabeledCorpus) -> Result<ThresholdEvaluation> {
    check_profiles(model, profiles)?;
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let width = model.max_width();
    let rows = corpus
        .documents
        .par_iter()
        .map(|doc| -> Result<(bool, bool, Vec<bool>)> {
            let ids = pad_ids(&doc.token_ids, width);
            let plain = model.forward(&ids)?;
            let gated = thresholded_forward(model, &ids, profiles)?;
            let passed = plain
                .pool
                .pooled
                .iter()
                .zip(profiles)
                .map(|(p, prof)| *p >= prof.threshold)
                .collect();
            Ok((plain.predicted() == doc.label, gated.predicted() == doc.label, passed))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let m = profiles.len();
    let mut per_filter = vec![0usize; m];
    for (_, _, passed) in &rows {
        for (c, p) in per_filter.iter_mut().zip(passed) {
            *c += usize::from(*p);
        }
    }
    Ok(ThresholdEvaluation {
        relu_accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
        thresholded_accuracy: rows.iter().filter(|r| r.1).count() as f64 / n,
        mean_coverage: per_filter.iter().map(|&c| c as f64 / n).sum::<f64>() / m as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub purity: f64,
    pub accuracy: f64,
    pub mean_coverage: f64,
}

/// Thresholded accuracy and coverage over target purities `0, step, 2·step, ..., 1`.
pub fn purity_sweep(
    model: &CnnModel,
    dataset: &ThresholdDataset,
    corpus: &LabeledCorpus,
    step: f64,
) -> Result<Vec<SweepPoint>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument("sweep step must lie in (0, 1]".into()));
    }
    let steps = (1.0 / step).round() as usize;
    (0..=steps)
        .map(|i| {
            let target = (i as f64 * step).min(1.0);
            let profiles = derive_profiles(model, dataset, target);
            let eval = evaluate_thresholded(model, &profiles, corpus)?;
            Ok(SweepPoint {
                purity: target,
                accuracy: eval.thresholded_accuracy,
                mean_coverage: eval.mean_coverage,
            })
        })
        .collect()
}
