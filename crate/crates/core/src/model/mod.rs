//! One-layer text CNN: embedding lookup, parallel convolutions of several
//! widths, global max-pooling followed by ReLU, and a linear softmax head.

mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{deserialize_model, serialize_model, MODEL_FORMAT_VERSION};

use crate::corpus::{EmbeddingTable, TokenId, PAD};
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, DenseMatrix, DenseVector, SeededRng};

/// Filter widths with their counts, written `2:4,3:3,4:3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec(pub Vec<(usize, usize)>);

impl FilterSpec {
    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, n)| n).sum()
    }

    pub fn max_width(&self) -> usize {
        self.0.iter().map(|(w, _)| *w).max().unwrap_or(1)
    }

    /// Width of every filter, in filter-id order.
    pub fn widths(&self) -> Vec<usize> {
        self.0
            .iter()
            .flat_map(|&(w, n)| std::iter::repeat_n(w, n))
            .collect()
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec(vec![(2, 4), (3, 3), (4, 3)])
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || Error::InvalidArgument(format!("bad filter group {part:?}, expected WIDTH:COUNT"));
            let (w, n) = part.split_once(':').ok_or_else(bad)?;
            let w: usize = w.trim().parse().map_err(|_| bad())?;
            let n: usize = n.trim().parse().map_err(|_| bad())?;
            if w == 0 || n == 0 {
                return Err(bad());
            }
            groups.push((w, n));
        }
        if groups.is_empty() {
            return Err(Error::InvalidArgument("no filters configured".into()));
        }
        Ok(FilterSpec(groups))
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(w, n)| format!("{w}:{n}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub filters: FilterSpec,
    pub classes: usize,
    /// Whether the head learns a per-class bias. When off the bias stays zero.
    pub head_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 50,
            filters: FilterSpec::default(),
            classes: 2,
            head_bias: true,
        }
    }
}

/// A width-`ℓ` filter. Column `i` of the `d × ℓ` weight matrix is slot `i`,
/// the block that multiplies the `i`-th word of an ngram.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    pub filter_id: usize,
    pub width: usize,
    pub weights: DenseMatrix,
    pub bias: f64,
}

impl ConvFilter {
    pub fn new(filter_id: usize, weights: DenseMatrix, bias: f64) -> Self {
        Self {
            filter_id,
            width: weights.cols(),
            weights,
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    /// `⟨w, f(slot)⟩` for one word vector.
    #[inline]
    pub fn slot_activation(&self, slot: usize, word: &[f64]) -> f64 {
        let w = self.weights.as_slice();
        let mut acc = 0.0;
        for (k, x) in word.iter().enumerate() {
            acc += x * w[k * self.width + slot];
        }
        acc
    }

    pub fn slot_weights(&self, slot: usize) -> Vec<f64> {
        self.weights.column(slot)
    }

    /// Sum of slot activations over an ngram, without the bias.
    #[inline]
    pub(crate) fn slot_sum_unchecked(&self, ids: &[TokenId], embeddings: &EmbeddingTable) -> f64 {
        let mut total = 0.0;
        for (slot, &id) in ids.iter().enumerate() {
            total += self.slot_activation(slot, embeddings.row(id));
        }
        total
    }

    #[inline]
    pub(crate) fn score_unchecked(&self, ids: &[TokenId], embeddings: &EmbeddingTable) -> f64 {
        self.slot_sum_unchecked(ids, embeddings) + self.bias
    }
}

/// The convolution score `⟨u, f⟩ + b` of one ngram.
pub fn ngram_score(ids: &[TokenId], filter: &ConvFilter, embeddings: &EmbeddingTable) -> Result<f64> {
    check_ngram(ids, filter, embeddings)?;
    Ok(filter.score_unchecked(ids, embeddings))
}

pub(crate) fn check_ngram(ids: &[TokenId], filter: &ConvFilter, embeddings: &EmbeddingTable) -> Result<()> {
    if ids.len() != filter.width {
        return Err(Error::Dimension {
            expected: filter.width,
            found: ids.len(),
        });
    }
    if filter.dim() != embeddings.dim() {
        return Err(Error::Dimension {
            expected: embeddings.dim(),
            found: filter.dim(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= embeddings.vocab_size()) {
        return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Ngram scores per filter; entry `i` of row `j` is the ngram starting at
/// padded position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMap {
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub position: usize,
    pub token_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolResult {
    /// Values fed to the head. ReLU of `pre_relu` in the plain forward pass.
    pub pooled: Vec<f64>,
    /// Raw per-filter maxima.
    pub pre_relu: Vec<f64>,
    /// The ngram that won max-pooling for each filter.
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub pool: PoolResult,
    pub conv: ConvMap,
}

impl ForwardPass {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits).expect("at least one class")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub config: ModelConfig,
    pub embeddings: EmbeddingTable,
    pub filters: Vec<ConvFilter>,
    /// `c × m` head weights `W`.
    pub head: DenseMatrix,
    pub head_bias: DenseVector,
}

impl CnnModel {
    /// Fresh model around the given embeddings. Filter and head weights are
    /// drawn from `uniform(-a, a)` with `a = 1/sqrt(fan_in)`; biases start at zero.
    pub fn initialize(config: ModelConfig, embeddings: EmbeddingTable, rng: &mut SeededRng) -> Result<Self> {
        if config.classes < 1 {
            return Err(Error::InvalidArgument("model needs at least one class".into()));
        }
        if embeddings.dim() != config.embedding_dim {
            return Err(Error::Dimension {
                expected: config.embedding_dim,
                found: embeddings.dim(),
            });
        }
        let d = config.embedding_dim;
        let filters = config
            .filters
            .widths()
            .into_iter()
            .enumerate()
            .map(|(id, width)| {
                let a = 1.0 / ((d * width) as f64).sqrt();
                let values = (0..d * width).map(|_| rng.uniform(-a, a)).collect();
                ConvFilter::new(id, DenseMatrix::new(d, width, values).expect("sized"), 0.0)
            })
            .collect::<Vec<_>>();
        let m = filters.len();
        let a = 1.0 / (m as f64).sqrt();
        let head_values = (0..config.classes * m).map(|_| rng.uniform(-a, a)).collect();
        let model = Self {
            head: DenseMatrix::new(config.classes, m, head_values)?,
            head_bias: DenseVector::zeros(config.classes),
            config,
            embeddings,
            filters,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.config.embedding_dim;
        if self.embeddings.dim() != d {
            return Err(Error::Dimension { expected: d, found: self.embeddings.dim() });
        }
        if self.embeddings.vocab_size() < 2 {
            return Err(Error::InvalidArgument("embedding table lacks PAD/UNK rows".into()));
        }
        let widths = self.config.filters.widths();
        if widths.len() != self.filters.len() {
            return Err(Error::Dimension { expected: widths.len(), found: self.filters.len() });
        }
        for (j, (f, w)) in self.filters.iter().zip(&widths).enumerate() {
            if f.filter_id != j || f.width != *w || f.dim() != d {
                return Err(Error::InvalidArgument(format!("filter {j} does not match the configuration")));
            }
        }
        if self.head.rows() != self.config.classes || self.head.cols() != self.filters.len() {
            return Err(Error::Dimension { expected: self.filters.len(), found: self.head.cols() });
        }
        if self.head_bias.len() != self.config.classes {
            return Err(Error::Dimension { expected: self.config.classes, found: self.head_bias.len() });
        }
        Ok(())
    }

    pub fn filter_count(&self) -> usize {
        self.filters.len()
    }

    pub fn class_count(&self) -> usize {
        self.config.classes
    }

    pub fn max_width(&self) -> usize {
        self.config.filters.max_width()
    }

    /// Convolution scores for a padded token sequence.
    pub fn convolve(&self, ids: &[TokenId]) -> Result<ConvMap> {
        self.check_document(ids)?;
        let rows = self
            .filters
            .iter()
            .map(|f| {
                ids.windows(f.width)
                    .map(|ngram| f.score_unchecked(ngram, &self.embeddings))
                    .collect()
            })
            .collect();
        Ok(ConvMap { rows })
    }

    /// Max-pool each conv row. Ties go to the lowest start position.
    pub fn pool(&self, ids: &[TokenId], conv: &ConvMap) -> PoolResult {
        let m = self.filters.len();
        let mut pooled = Vec::with_capacity(m);
        let mut pre_relu = Vec::with_capacity(m);
        let mut provenance = Vec::with_capacity(m);
        for (f, row) in self.filters.iter().zip(&conv.rows) {
            let pos = argmax(row).expect("conv row non-empty");
            pre_relu.push(row[pos]);
            pooled.push(row[pos].max(0.0));
            provenance.push(Provenance {
                position: pos,
                token_ids: ids[pos..pos + f.width].to_vec(),
            });
        }
        PoolResult { pooled, pre_relu, provenance }
    }

    /// `W·p + b`.
    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let mut logits = self.head.mul_vec(pooled).expect("pooled length matches head");
        for (l, b) in logits.iter_mut().zip(self.head_bias.as_slice()) {
            *l += b;
        }
        logits
    }

    /// Forward pass over an already padded document.
    pub fn forward(&self, ids: &[TokenId]) -> Result<ForwardPass> {
        let conv = self.convolve(ids)?;
        let pool = self.pool(ids, &conv);
        let logits = self.logits(&pool.pooled);
        let probs = softmax(&logits);
        Ok(ForwardPass { logits, probs, pool, conv })
    }

    pub fn predict(&self, ids: &[TokenId]) -> Result<usize> {
        Ok(self.forward(ids)?.predicted())
    }

    fn check_document(&self, ids: &[TokenId]) -> Result<()> {
        if !ids.iter().any(|&id| id != PAD) {
            return Err(Error::Empty("document has no real tokens"));
        }
        if ids.len() < self.max_width() {
            return Err(Error::InvalidArgument(format!(
                "document of length {} is shorter than the widest filter; pad it first",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.embeddings.vocab_size()) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }
}
