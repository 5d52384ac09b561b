//! Precomputed response vectors for one model and top-k lookup.

use std::collections::HashSet;

use echoless::checkpoint::Checkpoint;
use echoless::encoder::Side;
use echoless::text::{encode_text, normalize, tokenize};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ServeError;

/// Hex SHA-256 of checkpoint bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
    /// The candidate normalizes to the same text as the query.
    pub echo: bool,
}

/// Unit-normalized response-side vectors, one row per response text.
#[derive(Debug)]
pub struct ResponseIndex {
    texts: Vec<String>,
    normalized: Vec<String>,
    vectors: Vec<Vec<f64>>,
    fingerprint: String,
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    (norm > 0.0).then(|| x.into_iter().map(|a| a / norm).collect())
}

impl ResponseIndex {
    /// Encodes every response through the response side. Texts with no
    /// tokens are skipped with a warning.
    pub fn build(checkpoint: &Checkpoint, fingerprint: String, responses: &[String]) -> Result<Self, ServeError> {
        let max_len = checkpoint.model.config.max_len;
        let mut texts = Vec::new();
        let mut seqs = Vec::new();
        for text in responses {
            if tokenize(text).is_empty() {
                log::warn!("skipping response with no tokens: {text:?}");
                continue;
            }
            seqs.push(encode_text(text, &checkpoint.vocab, max_len)?);
            texts.push(text.clone());
        }
        if seqs.is_empty() {
            return Err(ServeError::EmptyPool);
        }
        let encoded = checkpoint.model.encode_batch(&seqs, Side::Response)?;
        let mut kept_texts = Vec::with_capacity(texts.len());
        let mut vectors = Vec::with_capacity(texts.len());
        for (text, v) in texts.into_iter().zip(encoded) {
            match unit(v.as_slice()) {
                Some(u) => {
                    kept_texts.push(text);
                    vectors.push(u);
                }
                None => log::warn!("skipping response with a zero vector: {text:?}"),
            }
        }
        if vectors.is_empty() {
            return Err(ServeError::EmptyPool);
        }
        Ok(Self {
            normalized: kept_texts.iter().map(|t| normalize(t)).collect(),
            texts: kept_texts,
            vectors,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Top `k` responses for `context`, best first, ties by index.
    pub fn query(&self, checkpoint: &Checkpoint, context: &str, k: usize) -> Result<Vec<Candidate>, ServeError> {
        if k == 0 {
            return Err(ServeError::InvalidRequest("k must be at least 1".into()));
        }
        if tokenize(context).is_empty() {
            return Err(ServeError::InvalidRequest("context is empty".into()));
        }
        let seq = encode_text(context, &checkpoint.vocab, checkpoint.model.config.max_len)?;
        let c = checkpoint.model.encode(&seq, Side::Context)?;
        let c =
            unit(c.as_slice()).ok_or_else(|| ServeError::InvalidRequest("context encodes to a zero vector".into()))?;
        let scores: Vec<f64> = self
            .vectors
            .iter()
            .map(|r| r.iter().zip(&c).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        let query = normalize(context);
        Ok(order
            .into_iter()
            .map(|i| Candidate {
                text: self.texts[i].clone(),
                score: scores[i],
                echo: self.normalized[i] == query,
            })
            .collect())
    }
}

/// Reads a response pool: one response per line, or `context<TAB>response`
/// lines whose two columns both join the pool. Blank lines are ignored and
/// repeats (after normalization) are dropped.
pub fn parse_response_pool(content: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in content.lines() {
        for text in line.split('\t') {
            let text = text.trim();
            if text.is_empty() {
                continue;
            }
            if seen.insert(normalize(text)) {
                out.push(text.to_string());
            }
        }
    }
    out
}
