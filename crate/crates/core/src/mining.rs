//! Negative selection for the triplet objective.
//!
//! Three in-batch regimes: random negatives (RN), hard negatives among the
//! batch responses (HN_r), and hard negatives among batch responses and
//! batch contexts, the pair's own context included (HN_rc). A hard
//! negative is the highest-scoring candidate that still scores at most the
//! positive and no more than `margin` below it. There is also an offline
//! pass that scans a whole dataset with a fixed model.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{match_score, DualEncoder, EncoderError, Side};
use crate::numerics::Real;
use crate::text::TokenIdSequence;

pub const DEFAULT_MARGIN: f32 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiningError {
    #[error("margin {0} outside (0, 2)")]
    InvalidMargin(f32),
    #[error("unknown strategy {0:?} (expected rn, hn_r or hn_rc)")]
    UnknownStrategy(String),
    #[error("unknown fallback {0:?} (expected random or skip)")]
    UnknownFallback(String),
    #[error("score matrix is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    ScoreShape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("HN_rc selection needs context candidates in the score matrix")]
    MissingContexts,
    #[error("pair index {index} outside batch of {batch}")]
    PairIndex { index: usize, batch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "rn")]
    Random,
    #[serde(rename = "hn_r")]
    HardResponses,
    #[serde(rename = "hn_rc")]
    HardResponsesContexts,
}

impl StrategyKind {
    pub fn uses_contexts(self) -> bool {
        self == StrategyKind::HardResponsesContexts
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "rn",
            StrategyKind::HardResponses => "hn_r",
            StrategyKind::HardResponsesContexts => "hn_rc",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = MiningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rn" | "random" => Ok(StrategyKind::Random),
            "hn_r" | "hnr" => Ok(StrategyKind::HardResponses),
            "hn_rc" | "hnrc" | "hn_r+c" => Ok(StrategyKind::HardResponsesContexts),
            _ => Err(MiningError::UnknownStrategy(s.to_string())),
        }
    }
}

/// What to do when no candidate falls inside the hard-negative window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    /// A uniformly drawn candidate scoring below the positive.
    #[default]
    Random,
    Skip,
}

impl FromStr for Fallback {
    type Err = MiningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Fallback::Random),
            "skip" => Ok(Fallback::Skip),
            _ => Err(MiningError::UnknownFallback(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningStrategy {
    pub kind: StrategyKind,
    pub margin: f32,
    pub fallback: Fallback,
}

impl MiningStrategy {
    pub fn new(kind: StrategyKind, margin: f32, fallback: Fallback) -> Result<Self, MiningError> {
        if !(margin > 0.0 && margin < 2.0) {
            return Err(MiningError::InvalidMargin(margin));
        }
        Ok(Self { kind, margin, fallback })
    }
}

/// Where a chosen negative came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Response,
    Context,
    OwnContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSelection {
    /// Column of the score matrix.
    pub column: usize,
    pub origin: Origin,
    pub score: f32,
    pub was_fallback: bool,
}

/// `max(0, m - s_pos + s_neg)`.
pub fn triplet_loss<F: Real>(s_pos: F, s_neg: F, margin: F) -> F {
    (margin - s_pos + s_neg).max(F::zero())
}

/// Scores of every batch context against every candidate.
///
/// Row `i` is context `i`. Columns `0..B` are the batch responses, so the
/// positive of row `i` sits at column `i`. When contexts are candidates,
/// columns `B..2B` hold the batch contexts encoded on the response side.
///
/// Keys identify texts: two candidates with equal keys are textually
/// identical. They live in one space shared by responses and contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    batch: usize,
    values: Vec<f32>,
    response_keys: Vec<u64>,
    context_keys: Option<Vec<u64>>,
}

impl BatchScores {
    pub fn new(values: Vec<f32>, response_keys: Vec<u64>, context_keys: Option<Vec<u64>>) -> Result<Self, MiningError> {
        let batch = response_keys.len();
        let cols = if context_keys.is_some() { 2 * batch } else { batch };
        if let Some(ck) = &context_keys {
            if ck.len() != batch {
                return Err(MiningError::ScoreShape {
                    rows: ck.len(),
                    cols,
                    expected_rows: batch,
                    expected_cols: cols,
                });
            }
        }
        if values.len() != batch * cols {
            return Err(MiningError::ScoreShape {
                rows: if cols == 0 { 0 } else { values.len() / cols },
                cols,
                expected_rows: batch,
                expected_cols: cols,
            });
        }
        Ok(Self {
            batch,
            values,
            response_keys,
            context_keys,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn columns(&self) -> usize {
        if self.context_keys.is_some() {
            2 * self.batch
        } else {
            self.batch
        }
    }

    pub fn score(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.columns() + col]
    }

    pub fn has_contexts(&self) -> bool {
        self.context_keys.is_some()
    }

    pub fn origin(&self, row: usize, col: usize) -> Origin {
        if col < self.batch {
            Origin::Response
        } else if col - self.batch == row {
            Origin::OwnContext
        } else {
            Origin::Context
        }
    }

    /// Columns eligible as negatives for row `i`, in ascending order: never
    /// the positive, never a text identical to the positive response.
    pub fn candidates(&self, i: usize, with_contexts: bool) -> Vec<usize> {
        let positive = self.response_keys[i];
        let mut out: Vec<usize> = (0..self.batch)
            .filter(|&j| j != i && self.response_keys[j] != positive)
            .collect();
        if with_contexts {
            if let Some(ck) = &self.context_keys {
                out.extend((0..self.batch).filter(|&j| ck[j] != positive).map(|j| self.batch + j));
            }
        }
        out
    }
}

/// Picks the negative for pair `i`. `Ok(None)` means the pair is skipped.
///
/// Random draws use `rng.gen_range(0..n)` over the eligible columns in
/// ascending order, so a given seed always yields the same choice.
pub fn select_in_batch(
    scores: &BatchScores,
    i: usize,
    strategy: &MiningStrategy,
    rng: &mut impl Rng,
) -> Result<Option<NegativeSelection>, MiningError> {
    if i >= scores.batch() {
        return Err(MiningError::PairIndex {
            index: i,
            batch: scores.batch(),
        });
    }
    let with_contexts = strategy.kind.uses_contexts();
    if with_contexts && !scores.has_contexts() {
        return Err(MiningError::MissingContexts);
    }
    let candidates = scores.candidates(i, with_contexts);
    if candidates.is_empty() {
        return Ok(None);
    }
    let pick = |col: usize, was_fallback: bool| NegativeSelection {
        column: col,
        origin: scores.origin(i, col),
        score: scores.score(i, col),
        was_fallback,
    };

    if strategy.kind == StrategyKind::Random {
        let col = candidates[rng.gen_range(0..candidates.len())];
        return Ok(Some(pick(col, false)));
    }

    let s_pos = scores.score(i, i);
    let mut best: Option<usize> = None;
    for &col in &candidates {
        let s = scores.score(i, col);
        let gap = s_pos - s;
        if (0.0..=strategy.margin).contains(&gap) && best.is_none_or(|b| s > scores.score(i, b)) {
            best = Some(col);
        }
    }
    if let Some(col) = best {
        return Ok(Some(pick(col, false)));
    }
    match strategy.fallback {
        Fallback::Skip => Ok(None),
        Fallback::Random => {
            let below: Vec<usize> = candidates.into_iter().filter(|&c| scores.score(i, c) < s_pos).collect();
            if below.is_empty() {
                return Ok(None);
            }
            Ok(Some(pick(below[rng.gen_range(0..below.len())], true)))
        }
    }
}

/// Selection counts over a step or an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub pairs: usize,
    pub selected: usize,
    pub skipped: usize,
    pub own_context: usize,
    pub other_context: usize,
    pub fallback: usize,
}

impl MiningStats {
    pub fn record(&mut self, selection: Option<&NegativeSelection>) {
        self.pairs += 1;
        match selection {
            None => self.skipped += 1,
            Some(s) => {
                self.selected += 1;
                match s.origin {
                    Origin::OwnContext => self.own_context += 1,
                    Origin::Context => self.other_context += 1,
                    Origin::Response => {}
                }
                if s.was_fallback {
                    self.fallback += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &MiningStats) {
        self.pairs += other.pairs;
        self.selected += other.selected;
        self.skipped += other.skipped;
        self.own_context += other.own_context;
        self.other_context += other.other_context;
        self.fallback += other.fallback;
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Share of chosen negatives that were the pair's own context.
    pub fn own_context_fraction(&self) -> f64 {
        Self::ratio(self.own_context, self.selected)
    }

    /// Share of chosen negatives that were any context.
    pub fn context_fraction(&self) -> f64 {
        Self::ratio(self.own_context + self.other_context, self.selected)
    }

    /// Share of chosen negatives drawn by the fallback policy.
    pub fn fallback_rate(&self) -> f64 {
        Self::ratio(self.fallback, self.selected)
    }

    pub fn skip_rate(&self) -> f64 {
        Self::ratio(self.skipped, self.pairs)
    }
}

pub fn mining_stats<'a, I>(selections: I) -> MiningStats
where
    I: IntoIterator<Item = Option<&'a NegativeSelection>>,
{
    let mut stats = MiningStats::default();
    for s in selections {
        stats.record(s);
    }
    stats
}

/// A dataset pair `(c_i, r_j)` accepted by the offline pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    pub context: usize,
    pub response: usize,
    /// `score(i, i) - score(i, j)`, at most the margin.
    pub gap: f32,
}

/// Offline pass over `n` pairs with a fixed scorer: keeps every `(i, j)`,
/// `j != i`, with `score(i, i) - score(i, j) <= margin`.
///
/// With `cap` set and fewer than `n - 1` candidates allowed, each context
/// scores a uniform sample of `cap` responses instead of all of them.
pub fn mine_dataset_negatives(
    n: usize,
    mut score: impl FnMut(usize, usize) -> f32,
    margin: f32,
    cap: Option<usize>,
    rng: &mut impl Rng,
) -> Vec<MinedPair> {
    let mut out = Vec::new();
    for i in 0..n {
        let others = n.saturating_sub(1);
        let mut candidates: Vec<usize> = match cap {
            Some(c) if c < others => index::sample(rng, others, c).into_vec(),
            _ => (0..others).collect(),
        };
        candidates.sort_unstable();
        let s_pos = score(i, i);
        for k in candidates {
            let j = if k < i { k } else { k + 1 };
            let gap = s_pos - score(i, j);
            if gap <= margin {
                out.push(MinedPair {
                    context: i,
                    response: j,
                    gap,
                });
            }
        }
    }
    out
}

/// Runs the offline pass with a trained model. Responses textually
/// identical to the positive are dropped, as in-batch selection does.
pub fn mine_with_model<F: Real>(
    model: &DualEncoder<F>,
    contexts: &[TokenIdSequence],
    responses: &[TokenIdSequence],
    response_keys: &[u64],
    margin: f32,
    cap: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<MinedPair>, EncoderError> {
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let cv = model.encode_batch(contexts, Side::Context)?;
    let rv = model.encode_batch(responses, Side::Response)?;
    let mut failure = None;
    let mined = mine_dataset_negatives(
        contexts.len(),
        |i, j| match match_score(&cv[i], &rv[j]) {
            Ok(s) => s.as_f64() as f32,
            Err(e) => {
                failure.get_or_insert(e);
                f32::NAN
            }
        },
        margin,
        cap,
        rng,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(mined
        .into_iter()
        .filter(|p| response_keys[p.response] != response_keys[p.context])
        .collect())
}
