//! Cross-entropy training with hand-derived gradients and Adam.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, TokenId, PAD};
use crate::error::{Error, Result};
use crate::model::CnnModel;
use crate::numerics::{log_softmax, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub fine_tune_embeddings: bool,
    /// Restore the parameters of the epoch with the best dev accuracy.
    pub keep_best_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            fine_tune_embeddings: true,
            keep_best_dev: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_loss: Vec<f64>,
    /// `None` for every epoch when no dev split was given.
    pub dev_accuracy: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
}

/// `-ln probs[label]`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln()
}

/// Cross-entropy evaluated from logits through log-softmax.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> f64 {
    -log_softmax(logits)[label]
}

/// Which parameter array a gradient slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embeddings,
    FilterWeights(usize),
    FilterBias(usize),
    Head,
    HeadBias,
}

/// Gradients with the shape of a [`CnnModel`]. Embedding gradients are kept
/// only for rows that were touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding_rows: BTreeMap<TokenId, Vec<f64>>,
    pub filter_weights: Vec<Vec<f64>>,
    pub filter_bias: Vec<f64>,
    pub head: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &CnnModel) -> Self {
        Self {
            embedding_rows: BTreeMap::new(),
            filter_weights: model
                .filters
                .iter()
                .map(|f| vec![0.0; f.weights.as_slice().len()])
                .collect(),
            filter_bias: vec![0.0; model.filter_count()],
            head: vec![0.0; model.head.as_slice().len()],
            head_bias: vec![0.0; model.class_count()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, row) in &other.embedding_rows {
            let dst = self
                .embedding_rows
                .entry(*id)
                .or_insert_with(|| vec![0.0; row.len()]);
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        for (dst, src) in self.filter_weights.iter_mut().zip(&other.filter_weights) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        add_slice(&mut self.filter_bias, &other.filter_bias);
        add_slice(&mut self.head, &other.head);
        add_slice(&mut self.head_bias, &other.head_bias);
    }

    pub fn scale(&mut self, factor: f64) {
        self.embedding_rows
            .values_mut()
            .flatten()
            .chain(self.filter_weights.iter_mut().flatten())
            .chain(&mut self.filter_bias)
            .chain(&mut self.head)
            .chain(&mut self.head_bias)
            .for_each(|v| *v *= factor);
    }

    /// Dense embedding gradient of `vocab_size × d` entries.
    pub fn dense_embeddings(&self, vocab_size: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size * dim];
        for (&id, row) in &self.embedding_rows {
            out[id as usize * dim..(id as usize + 1) * dim].copy_from_slice(row);
        }
        out
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Mutable views of every parameter array, in a fixed order shared with
/// [`gradient_groups`].
pub fn parameter_groups_mut(model: &mut CnnModel) -> Vec<(ParamGroup, &mut [f64])> {
    let mut groups: Vec<(ParamGroup, &mut [f64])> =
        vec![(ParamGroup::Embeddings, model.embeddings.matrix.as_mut_slice())];
    for (j, f) in model.filters.iter_mut().enumerate() {
        groups.push((ParamGroup::FilterWeights(j), f.weights.as_mut_slice()));
        groups.push((ParamGroup::FilterBias(j), std::slice::from_mut(&mut f.bias)));
    }
    groups.push((ParamGroup::Head, model.head.as_mut_slice()));
    groups.push((ParamGroup::HeadBias, model.head_bias.as_mut_slice()));
    groups
}

/// Dense gradient arrays in the order of [`parameter_groups_mut`].
pub fn gradient_groups(model: &CnnModel, grads: &Gradients) -> Vec<(ParamGroup, Vec<f64>)> {
    let mut groups = vec![(
        ParamGroup::Embeddings,
        grads.dense_embeddings(model.embeddings.vocab_size(), model.embeddings.dim()),
    )];
    for j in 0..model.filter_count() {
        groups.push((ParamGroup::FilterWeights(j), grads.filter_weights[j].clone()));
        groups.push((ParamGroup::FilterBias(j), vec![grads.filter_bias[j]]));
    }
    groups.push((ParamGroup::Head, grads.head.clone()));
    groups.push((ParamGroup::HeadBias, grads.head_bias.clone()));
    groups
}

/// Loss and gradients for one padded document.
///
/// Max-pooling routes each filter's gradient to its single winning ngram,
/// and only when the pooled maximum is strictly positive. The PAD row never
/// receives a gradient; neither does the head bias when it is disabled.
pub fn backward(model: &CnnModel, ids: &[TokenId], label: usize) -> Result<(f64, Gradients)> {
    if label >= model.class_count() {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let fw = model.forward(ids)?;
    let loss = cross_entropy_from_logits(&fw.logits, label);
    let mut grads = Gradients::zeros(model);
    let m = model.filter_count();
    let d = model.embeddings.dim();

    let mut dlogits = fw.probs.clone();
    dlogits[label] -= 1.0;
    for (k, &dl) in dlogits.iter().enumerate() {
        for (j, &p) in fw.pool.pooled.iter().enumerate() {
            grads.head[k * m + j] = dl * p;
        }
    }
    if model.config.head_bias {
        grads.head_bias.copy_from_slice(&dlogits);
    }

    for (j, f) in model.filters.iter().enumerate() {
        if fw.pool.pre_relu[j] <= 0.0 {
            continue;
        }
        let dp: f64 = dlogits
            .iter()
            .enumerate()
            .map(|(k, dl)| model.head.get(k, j) * dl)
            .sum();
        grads.filter_bias[j] = dp;
        let w = f.weights.as_slice();
        let dw = &mut grads.filter_weights[j];
        for (slot, &id) in fw.pool.provenance[j].token_ids.iter().enumerate() {
            let emb = model.embeddings.row(id);
            for k in 0..d {
                dw[k * f.width + slot] += dp * emb[k];
            }
            if id != PAD {
                let row = grads.embedding_rows.entry(id).or_insert_with(|| vec![0.0; d]);
                for k in 0..d {
                    row[k] += dp * w[k * f.width + slot];
                }
            }
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    debug_assert_eq!(params.len(), grads.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

fn is_trainable(group: ParamGroup, model: &CnnModel, cfg: &TrainConfig) -> bool {
    match group {
        ParamGroup::Embeddings => cfg.fine_tune_embeddings,
        ParamGroup::HeadBias => model.config.head_bias,
        _ => true,
    }
}

/// Fraction of documents whose prediction matches the gold label.
pub fn accuracy(model: &CnnModel, corpus: &LabeledCorpus) -> Result<f64> {
    let max_width = model.max_width();
    let hits = corpus
        .documents
        .par_iter()
        .map(|doc| {
            let ids = crate::corpus::pad_ids(&doc.token_ids, max_width);
            model.predict(&ids).map(|p| usize::from(p == doc.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / corpus.len() as f64)
}

/// Mini-batch training. Shuffling draws from a [`SeededRng`] seeded with
/// `config.seed`, so equal seeds give bit-identical models.
pub fn train(
    model: &mut CnnModel,
    train_corpus: &LabeledCorpus,
    dev: Option<&LabeledCorpus>,
    config: &TrainConfig,
) -> Result<TrainMetrics> {
    config.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let docs = train_corpus.padded(model.max_width());
    let adam = config.adam();
    let mut rng = SeededRng::new(config.seed);
    let mut states: Vec<AdamState> = gradient_groups(model, &Gradients::zeros(model))
        .iter()
        .map(|(_, g)| AdamState::new(g.len()))
        .collect();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut metrics = TrainMetrics {
        train_loss: Vec::with_capacity(config.epochs),
        dev_accuracy: Vec::with_capacity(config.epochs),
        best_epoch: None,
    };
    let mut best: Option<(f64, CnnModel)> = None;

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut total = Gradients::zeros(model);
            for &i in batch {
                let (loss, g) = backward(model, &docs[i].token_ids, docs[i].label)?;
                epoch_loss += loss;
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            let grads = gradient_groups(model, &total);
            let trainable: Vec<bool> = grads.iter().map(|(g, _)| is_trainable(*g, model, config)).collect();
            for (((_, params), (_, g)), (state, train_it)) in parameter_groups_mut(model)
                .into_iter()
                .zip(&grads)
                .zip(states.iter_mut().zip(trainable))
            {
                if train_it {
                    adam_step(params, g, state, &adam);
                }
            }
            // PAD stays at zero
            model.embeddings.matrix.row_mut(PAD as usize).fill(0.0);
        }
        metrics.train_loss.push(epoch_loss / docs.len() as f64);
        let dev_acc = dev.map(|d| accuracy(model, d)).transpose()?;
        metrics.dev_accuracy.push(dev_acc);
        if let Some(acc) = dev_acc {
            log::info!("epoch {}: loss {:.5} dev acc {:.4}", epoch + 1, epoch_loss / docs.len() as f64, acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
                metrics.best_epoch = Some(epoch);
            }
        } else {
            log::info!("epoch {}: loss {:.5}", epoch + 1, epoch_loss / docs.len() as f64);
        }
    }
    if config.keep_best_dev {
        if let Some((_, best_model)) = best {
            *model = best_model;
        }
    }
    Ok(metrics)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose perturbation crossed a max-pool or ReLU kink.
    pub skipped: usize,
    pub worst: Option<(ParamGroup, usize, f64, f64)>,
}

const KINK_MARGIN: f64 = 1e-7;

/// Checks every trainable parameter of `model` against central differences
/// of the mean loss over `docs` (padded `(ids, label)` pairs).
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(model: &CnnModel, docs: &[(Vec<TokenId>, usize)], eps: f64) -> Result<GradCheckReport> {
    if docs.is_empty() {
        return Err(Error::Empty("gradient-check documents"));
    }
    let mut total = Gradients::zeros(model);
    for (ids, label) in docs {
        total.add_assign(&backward(model, ids, *label)?.1);
    }
    total.scale(1.0 / docs.len() as f64);
    let analytic = gradient_groups(model, &total);
    let d = model.embeddings.dim();

    // winning positions and ReLU gates per document
    type PoolState = Vec<(Vec<usize>, Vec<bool>)>;
    let mean_loss = |m: &CnnModel| -> Result<(f64, PoolState)> {
        let mut loss = 0.0;
        let mut state = Vec::with_capacity(docs.len());
        for (ids, label) in docs {
            let fw = m.forward(ids)?;
            loss += cross_entropy_from_logits(&fw.logits, *label);
            state.push((
                fw.pool.provenance.iter().map(|p| p.position).collect(),
                fw.pool.pre_relu.iter().map(|&v| v > 0.0).collect(),
            ));
        }
        Ok((loss / docs.len() as f64, state))
    };
    let near_kink = |m: &CnnModel| -> Result<bool> {
        for (ids, _) in docs {
            let fw = m.forward(ids)?;
            if fw.pool.pre_relu.iter().any(|v| v.abs() < KINK_MARGIN) {
                return Ok(true);
            }
            for ((row, prov), f) in fw.conv.rows.iter().zip(&fw.pool.provenance).zip(&m.filters) {
                let top = row[prov.position];
                // repeats of the winning ngram move with it and are no kink
                if row.iter().enumerate().any(|(i, &s)| {
                    top - s < KINK_MARGIN && ids[i..i + f.width] != prov.token_ids[..]
                }) {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    };
    let (_, base_state) = mean_loss(model)?;
    let base_kink = near_kink(model)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut probe = model.clone();
    for (gi, (group, grad)) in analytic.iter().enumerate() {
        if !is_trainable(*group, model, &TrainConfig::default()) {
            continue;
        }
        #[allow(clippy::needless_range_loop)]
        for idx in 0..grad.len() {
            if *group == ParamGroup::Embeddings && idx < d {
                continue; // PAD row is frozen
            }
            let original = parameter_groups_mut(&mut probe)[gi].1[idx];
            parameter_groups_mut(&mut probe)[gi].1[idx] = original + eps;
            let (plus, plus_state) = mean_loss(&probe)?;
            parameter_groups_mut(&mut probe)[gi].1[idx] = original - eps;
            let (minus, minus_state) = mean_loss(&probe)?;
            parameter_groups_mut(&mut probe)[gi].1[idx] = original;
            if base_kink || plus_state != base_state || minus_state != base_state {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((*group, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
