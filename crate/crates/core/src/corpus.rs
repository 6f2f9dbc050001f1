//! Tokenization, vocabulary, labeled TSV corpora, and GloVe-format embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const PAD_TOKEN: &str = "PAD";
pub const UNK_TOKEN: &str = "UNK";

const CLITIC_SUFFIXES: [&str; 6] = ["'s", "'m", "'re", "'ve", "'ll", "'d"];

/// Lowercases, separates punctuation, and splits English clitics the way
/// treebank tokenizers do (`didn't` becomes `did n't`, `i'm` becomes `i 'm`).
/// Hyphens between word characters stay inside the word.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut word = String::new();
        for (i, &ch) in chars.iter().enumerate() {
            let prev_word = i > 0 && chars[i - 1].is_alphanumeric();
            let next_word = chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
            let joins = ch.is_alphanumeric()
                || ((ch == '-' || ch == '\'') && prev_word && next_word && !word.is_empty());
            if joins {
                word.push(ch);
            } else {
                flush_word(&mut word, &mut out);
                if ch == '\'' && next_word && !prev_word {
                    // leading apostrophe: keep it attached to a clitic ("'m")
                    word.push(ch);
                } else {
                    out.push(ch.to_string());
                }
            }
        }
        flush_word(&mut word, &mut out);
    }
    out
}

fn flush_word(word: &mut String, out: &mut Vec<String>) {
    if word.is_empty() {
        return;
    }
    let w = std::mem::take(word);
    if !w.contains('\'') {
        out.push(w);
        return;
    }
    if CLITIC_SUFFIXES.contains(&w.as_str()) || w == "n't" {
        out.push(w);
        return;
    }
    if let Some(stem) = w.strip_suffix("n't").filter(|s| !s.is_empty() && !s.contains('\'')) {
        out.push(stem.to_string());
        out.push("n't".to_string());
        return;
    }
    for suffix in CLITIC_SUFFIXES {
        if let Some(stem) = w.strip_suffix(suffix).filter(|s| !s.is_empty() && !s.contains('\'')) {
            out.push(stem.to_string());
            out.push(suffix.to_string());
            return;
        }
    }
    // any other apostrophe use: split on it
    for (i, part) in w.split('\'').enumerate() {
        if i > 0 {
            out.push("'".to_string());
        }
        if !part.is_empty() {
            out.push(part.to_string());
        }
    }
}

/// Token ↔ id mapping with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Counts tokens over `texts` and assigns ids in order of descending
    /// frequency (ties broken lexicographically). Tokens seen fewer than
    /// `min_count` times fall back to `UNK`.
    pub fn build<I, S>(texts: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                total += 1;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if total == 0 {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_count && tok != PAD_TOKEN && tok != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Builds a vocabulary whose non-reserved ids follow the given order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut vocab = Self {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            ids: HashMap::new(),
        };
        vocab.ids.insert(PAD_TOKEN.to_string(), PAD);
        vocab.ids.insert(UNK_TOKEN.to_string(), UNK);
        for tok in tokens {
            if vocab.ids.contains_key(&tok) {
                return Err(Error::InvalidArgument(format!("duplicate token {tok:?}")));
            }
            vocab.ids.insert(tok.clone(), vocab.tokens.len() as TokenId);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id)).collect()
    }

    pub fn join(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub token_ids: Vec<TokenId>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub documents: Vec<Document>,
    pub split: Split,
    pub class_count: usize,
}

impl LabeledCorpus {
    pub fn new(documents: Vec<Document>, split: Split, class_count: usize) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        if let Some(doc) = documents.iter().find(|d| d.label >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {class_count} classes",
                doc.label
            )));
        }
        Ok(Self {
            documents,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Every document padded for filters up to `max_width` words.
    pub fn padded(&self, max_width: usize) -> Vec<Document> {
        self.documents
            .iter()
            .map(|d| pad_document(d, max_width))
            .collect()
    }
}

/// Surrounds the document with `max_width - 1` PADs on each side so every
/// filter width also sees boundary ngrams.
pub fn pad_document(doc: &Document, max_width: usize) -> Document {
    Document {
        token_ids: pad_ids(&doc.token_ids, max_width),
        label: doc.label,
    }
}

pub fn pad_ids(ids: &[TokenId], max_width: usize) -> Vec<TokenId> {
    let margin = max_width.saturating_sub(1);
    let mut out = Vec::with_capacity(ids.len() + 2 * margin);
    out.extend(std::iter::repeat_n(PAD, margin));
    out.extend_from_slice(ids);
    out.extend(std::iter::repeat_n(PAD, margin));
    out
}

/// Raw `(label, text)` rows from a `label<TAB>text` file body.
pub fn parse_tsv_rows(body: &str) -> Result<Vec<(usize, String)>> {
    let mut rows = Vec::new();
    for (n, line) in body.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "missing tab between label and text"))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::parse(line_no, format!("label {label:?} is not a non-negative integer")))?;
        if tokenize(text).is_empty() {
            return Err(Error::parse(line_no, "document has no tokens"));
        }
        rows.push((label, text.to_string()));
    }
    Ok(rows)
}

/// Parses a TSV corpus body. Without a vocabulary one is built from this
/// corpus first, keeping tokens seen at least `min_count` times.
pub fn parse_tsv_corpus(
    body: &str,
    vocab: Option<&Vocabulary>,
    min_count: usize,
    split: Split,
) -> Result<(LabeledCorpus, Vocabulary)> {
    let rows = parse_tsv_rows(body)?;
    if rows.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(rows.iter().map(|(_, t)| t.as_str()), min_count)?,
    };
    let class_count = rows.iter().map(|(l, _)| l + 1).max().unwrap_or(1).max(2);
    let documents = rows
        .iter()
        .map(|(label, text)| Document {
            token_ids: vocab.encode(text),
            label: *label,
        })
        .collect();
    Ok((LabeledCorpus::new(documents, split, class_count)?, vocab))
}

pub fn load_tsv_corpus(
    path: &Path,
    vocab: Option<&Vocabulary>,
    min_count: usize,
    split: Split,
) -> Result<(LabeledCorpus, Vocabulary)> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv_corpus(&body, vocab, min_count, split).map_err(|e| e.in_file(path))
}

/// `vocab_size × d` word vectors; row `PAD` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: DenseMatrix,
}

impl EmbeddingTable {
    /// Every non-PAD row drawn from `uniform(-0.25, 0.25)`.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut matrix = DenseMatrix::zeros(vocab_size, dim);
        for id in 1..vocab_size {
            for v in matrix.row_mut(id) {
                *v = rng.uniform(-0.25, 0.25);
            }
        }
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    #[inline]
    pub fn row(&self, id: TokenId) -> &[f64] {
        self.matrix.row(id as usize)
    }
}

/// Reads GloVe text-format vectors (`token v1 ... vd` per line) for the
/// tokens of `vocab`. Rows for tokens absent from the file are drawn from
/// `uniform(-0.25, 0.25)` in id order. When a token repeats, the first line wins.
pub fn read_embeddings<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(line_no, format!("{f:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                line_no,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if let Some(id) = vocab.get(token).filter(|&id| id != PAD) {
            rows[id as usize].get_or_insert(values);
        }
    }
    let mut matrix = DenseMatrix::zeros(vocab.len(), dim);
    for (id, row) in rows.into_iter().enumerate().skip(1) {
        let target = matrix.row_mut(id);
        match row {
            Some(values) => target.copy_from_slice(&values),
            None => target.iter_mut().for_each(|v| *v = rng.uniform(-0.25, 0.25)),
        }
    }
    Ok(EmbeddingTable { matrix })
}

pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), vocab, dim, rng).map_err(|e| e.in_file(path))
}
