//! Description encoder: word tokenizer, embedding + positional token encoder,
//! and softmax attention pooling into a single text vector.

use crate::numerics::{dot, softmax, softmax_backward, Matrix, ParamTensor};
use rand::Rng;
use std::collections::HashMap;
use thiserror::Error;

pub const DEFAULT_MAX_TOKENS: usize = 512;
pub const UNKNOWN_ID: usize = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {size}")]
    UnknownId { id: usize, size: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Splits into lowercase alphanumeric runs; every other non-space character
/// is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// `tokens[id - 1]` is the token for `id`; id 0 is unknown.
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_tokens: usize,
}

impl Vocabulary {
    /// Builds from a corpus: tokens by descending frequency, ties
    /// lexicographic, ids from 1.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_tokens: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in split_words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect(), max_tokens)
    }

    /// Rebuilds from an ordered token list (id `i + 1` for `tokens[i]`).
    pub fn from_tokens(tokens: Vec<String>, max_tokens: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        Self { tokens, index, max_tokens }
    }

    /// Number of ids including the unknown id.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.tokens.get(i)).map(String::as_str)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_words(text)
        .iter()
        .take(vocab.max_tokens)
        .map(|w| vocab.id(w))
        .collect()
}

pub struct TextEncoderParams {
    pub embedding: ParamTensor,
    pub positional: ParamTensor,
    /// Pooling vector, stored as a `1 x d` row.
    pub u: ParamTensor,
}

impl TextEncoderParams {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, max_tokens: usize, d: usize, rng: &mut R) -> Self {
        Self {
            embedding: ParamTensor::xavier("text.embedding", vocab_size, d, rng),
            positional: ParamTensor::xavier("text.positional", max_tokens, d, rng),
            u: ParamTensor::zeros("text.u", 1, d),
        }
    }

    pub fn width(&self) -> usize {
        self.embedding.value.cols()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.embedding, &self.positional, &self.u]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.embedding, &mut self.positional, &mut self.u]
    }
}

pub fn encode_tokens(ids: &[usize], params: &TextEncoderParams) -> Result<Matrix, TextError> {
    if ids.is_empty() {
        return Err(TextError::EmptySequence);
    }
    let d = params.width();
    let size = params.embedding.value.rows();
    let max = params.positional.value.rows();
    if ids.len() > max {
        return Err(TextError::ShapeMismatch {
            what: "sequence longer than positional table",
            expected: (max, d),
            got: (ids.len(), d),
        });
    }
    let mut out = Matrix::zeros(ids.len(), d);
    for (i, &id) in ids.iter().enumerate() {
        if id >= size {
            return Err(TextError::UnknownId { id, size });
        }
        let row = out.row_mut(i);
        for ((o, e), p) in row
            .iter_mut()
            .zip(params.embedding.value.row(id))
            .zip(params.positional.value.row(i))
        {
            *o = e + p;
        }
    }
    Ok(out)
}

/// Attention pooling; returns `(h_text, alpha)`.
pub fn attention_pool(h_expl: &Matrix, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>), TextError> {
    if h_expl.rows() == 0 {
        return Err(TextError::EmptySequence);
    }
    if u.len() != h_expl.cols() {
        return Err(TextError::ShapeMismatch {
            what: "pooling vector",
            expected: (1, h_expl.cols()),
            got: (1, u.len()),
        });
    }
    let alpha = softmax(&h_expl.matvec(u));
    Ok((h_expl.t_matvec(&alpha), alpha))
}

/// Gradients of attention pooling: returns `(d h_expl, d u)`.
pub fn attention_pool_backward(h_expl: &Matrix, u: &[f64], alpha: &[f64], d_out: &[f64]) -> (Matrix, Vec<f64>) {
    let d_alpha = h_expl.matvec(d_out);
    let ds = softmax_backward(alpha, &d_alpha);
    let du = h_expl.t_matvec(&ds);
    let mut dh = Matrix::zeros(h_expl.rows(), h_expl.cols());
    dh.add_outer(alpha, d_out);
    dh.add_outer(&ds, u);
    (dh, du)
}

/// Anything turning a token sequence into a finite `m x d` matrix.
pub trait TokenEncoder {
    fn width(&self) -> usize;
    fn encode(&self, ids: &[usize]) -> Result<Matrix, TextError>;
}

impl TokenEncoder for TextEncoderParams {
    fn width(&self) -> usize {
        TextEncoderParams::width(self)
    }

    fn encode(&self, ids: &[usize]) -> Result<Matrix, TextError> {
        encode_tokens(ids, self)
    }
}

pub struct TextCache {
    ids: Vec<usize>,
    h_expl: Matrix,
    alpha: Vec<f64>,
}

impl TextCache {
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

impl TextEncoderParams {
    pub fn forward(&self, ids: &[usize]) -> Result<(Vec<f64>, TextCache), TextError> {
        let h_expl = encode_tokens(ids, self)?;
        let (h_text, alpha) = attention_pool(&h_expl, self.u.value.as_slice())?;
        Ok((
            h_text,
            TextCache {
                ids: ids.to_vec(),
                h_expl,
                alpha,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextCache, d_text: &[f64]) {
        let (dh, du) = attention_pool_backward(&cache.h_expl, self.u.value.as_slice(), &cache.alpha, d_text);
        for (a, b) in self.u.grad.as_mut_slice().iter_mut().zip(&du) {
            *a += b;
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let g = dh.row(i);
            for (a, b) in self.embedding.grad.row_mut(id).iter_mut().zip(g) {
                *a += b;
            }
            for (a, b) in self.positional.grad.row_mut(i).iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Scalar probe used in tests and gradient checks.
pub fn probe(v: &[f64], w: &[f64]) -> f64 {
    dot(v, w)
}
