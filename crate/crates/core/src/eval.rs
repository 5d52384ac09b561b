//! Pooled-answer evaluation.
//!
//! Every test context is scored against one pool holding all test
//! responses and all test contexts. The ground truth is the only relevant
//! item, so average precision reduces to the reciprocal rank. The echo
//! metrics track where the context itself lands.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{DualEncoder, EncoderError, Side, ThoughtVector};
use crate::numerics::Real;
use crate::text::{encode_text, normalize, PairDataset, TextError, TokenIdSequence, Vocabulary};

pub const RECALL_CUTOFFS: [usize; 3] = [2, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("pool integrity: {0}")]
    Integrity(String),
    #[error("expected {expected} scores, got {got}")]
    ScoreCount { expected: usize, got: usize },
    #[error("unknown regime {0:?} (expected RN, BL, HN_r or HN_rc)")]
    UnknownRegime(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Evaluation regime. `Baseline` is a random-negative model whose rankings
/// are post-filtered to drop the context itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "RN")]
    Random,
    #[serde(rename = "BL")]
    Baseline,
    #[serde(rename = "HN_r")]
    HardResponses,
    #[serde(rename = "HN_rc")]
    HardResponsesContexts,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Random => "RN",
            Regime::Baseline => "BL",
            Regime::HardResponses => "HN_r",
            Regime::HardResponsesContexts => "HN_rc",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rn" => Ok(Regime::Random),
            "bl" => Ok(Regime::Baseline),
            "hn_r" => Ok(Regime::HardResponses),
            "hn_rc" | "hn_r+c" => Ok(Regime::HardResponsesContexts),
            _ => Err(EvalError::UnknownRegime(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    /// Text of the first occurrence.
    pub text: String,
    pub normalized: String,
    pub is_response: bool,
    pub is_context: bool,
    /// Test rows whose response is this entry.
    pub response_rows: Vec<usize>,
    /// Test rows whose context is this entry.
    pub context_rows: Vec<usize>,
}

/// Deduplicated union of test responses and test contexts. Responses are
/// inserted first, in row order, then contexts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerPool {
    entries: Vec<PoolEntry>,
    gt_index: Vec<usize>,
    context_index: Vec<usize>,
}

impl AnswerPool {
    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of test rows.
    pub fn rows(&self) -> usize {
        self.gt_index.len()
    }

    pub fn gt_index(&self, row: usize) -> usize {
        self.gt_index[row]
    }

    pub fn context_index(&self, row: usize) -> usize {
        self.context_index[row]
    }
}

pub fn build_answer_pool(testset: &PairDataset) -> Result<AnswerPool, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut entries: Vec<PoolEntry> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut insert = |text: &str, row: usize, as_response: bool| -> usize {
        let key = normalize(text);
        let idx = *lookup.entry(key.clone()).or_insert_with(|| {
            entries.push(PoolEntry {
                text: text.to_string(),
                normalized: key,
                is_response: false,
                is_context: false,
                response_rows: Vec::new(),
                context_rows: Vec::new(),
            });
            entries.len() - 1
        });
        let e = &mut entries[idx];
        if as_response {
            e.is_response = true;
            e.response_rows.push(row);
        } else {
            e.is_context = true;
            e.context_rows.push(row);
        }
        idx
    };
    let pairs = testset.pairs();
    let gt_index: Vec<usize> = pairs
        .iter()
        .enumerate()
        .map(|(row, p)| insert(&p.response, row, true))
        .collect();
    let context_index: Vec<usize> = pairs
        .iter()
        .enumerate()
        .map(|(row, p)| insert(&p.context, row, false))
        .collect();
    Ok(AnswerPool {
        entries,
        gt_index,
        context_index,
    })
}

/// One context's ranking over the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub row: usize,
    /// Pool indices, best first.
    pub order: Vec<usize>,
    /// Scores aligned with `order`.
    pub scores: Vec<f64>,
    pub gt_position: usize,
    /// `None` once the context has been filtered out.
    pub context_position: Option<usize>,
    pub top_score: f64,
    pub gt_score: f64,
    pub context_score: Option<f64>,
}

/// Sorts pool-aligned `scores` for test row `row`. Ties keep pool order.
pub fn rank_scores(pool: &AnswerPool, row: usize, scores: &[f64]) -> Result<RankingResult, EvalError> {
    if scores.len() != pool.len() {
        return Err(EvalError::ScoreCount {
            expected: pool.len(),
            got: scores.len(),
        });
    }
    if row >= pool.rows() {
        return Err(EvalError::Integrity(format!(
            "row {row} not in pool of {} rows",
            pool.rows()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let position = |idx: usize| order.iter().position(|&i| i == idx);
    let gt = pool.gt_index(row);
    let ctx = pool.context_index(row);
    let gt_position = position(gt).ok_or_else(|| EvalError::Integrity("ground truth missing".into()))?;
    let context_position = position(ctx).ok_or_else(|| EvalError::Integrity("context missing".into()))?;
    Ok(RankingResult {
        row,
        scores: order.iter().map(|&i| scores[i]).collect(),
        order,
        gt_position,
        context_position: Some(context_position),
        top_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        gt_score: scores[gt],
        context_score: Some(scores[ctx]),
    })
}

pub fn average_precision(result: &RankingResult) -> f64 {
    1.0 / (result.gt_position as f64 + 1.0)
}

pub fn recall_at_n(result: &RankingResult, n: usize) -> f64 {
    if result.gt_position < n {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoMetrics {
    pub rank_context: usize,
    pub diff_top: f64,
    pub diff_response: f64,
}

/// `None` when the context is no longer ranked.
pub fn echo_metrics(result: &RankingResult) -> Option<EchoMetrics> {
    let position = result.context_position?;
    let score = result.context_score?;
    Some(EchoMetrics {
        rank_context: position,
        diff_top: result.top_score - score,
        diff_response: result.gt_score - score,
    })
}

/// Drops the entry equal to the context. When the context is textually its
/// own ground truth, the entry stays so the relevant item is never lost.
pub fn baseline_filter(result: &RankingResult, pool: &AnswerPool) -> RankingResult {
    let ctx = pool.context_index(result.row);
    let gt = pool.gt_index(result.row);
    let keep: Vec<usize> = (0..result.order.len())
        .filter(|&k| result.order[k] != ctx || ctx == gt)
        .collect();
    let order: Vec<usize> = keep.iter().map(|&k| result.order[k]).collect();
    let scores: Vec<f64> = keep.iter().map(|&k| result.scores[k]).collect();
    let gt_position = order.iter().position(|&i| i == gt).expect("ground truth is kept");
    RankingResult {
        row: result.row,
        top_score: scores.first().copied().unwrap_or(result.gt_score),
        order,
        scores,
        gt_position,
        context_position: None,
        gt_score: result.gt_score,
        context_score: None,
    }
}

/// Metrics averaged over test contexts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: Regime,
    pub contexts: usize,
    pub average_precision: f64,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub rank_context: Option<f64>,
    pub diff_top: Option<f64>,
    pub diff_response: Option<f64>,
}

impl MetricsReport {
    pub fn from_results(regime: Regime, results: &[RankingResult]) -> Self {
        let n = results.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RankingResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        let echoes: Option<Vec<EchoMetrics>> = results.iter().map(echo_metrics).collect();
        let echoes = echoes.filter(|e| !e.is_empty());
        let echo_mean =
            |f: fn(&EchoMetrics) -> f64| echoes.as_ref().map(|e| e.iter().map(f).sum::<f64>() / e.len() as f64);
        Self {
            regime,
            contexts: results.len(),
            average_precision: mean(&average_precision),
            recall_at_2: mean(&|r| recall_at_n(r, RECALL_CUTOFFS[0])),
            recall_at_5: mean(&|r| recall_at_n(r, RECALL_CUTOFFS[1])),
            recall_at_10: mean(&|r| recall_at_n(r, RECALL_CUTOFFS[2])),
            rank_context: echo_mean(|e| e.rank_context as f64),
            diff_top: echo_mean(|e| e.diff_top),
            diff_response: echo_mean(|e| e.diff_response),
        }
    }

    pub fn tsv_header() -> &'static str {
        "regime\tap\trecall@2\trecall@5\trecall@10\trank_context\tdiff_top\tdiff_response"
    }

    /// One row in the header's column order; absent echo metrics print as `-`.
    pub fn to_tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}",
            self.regime,
            self.average_precision,
            self.recall_at_2,
            self.recall_at_5,
            self.recall_at_10,
            opt(self.rank_context),
            opt(self.diff_top),
            opt(self.diff_response),
        )
    }
}

/// A test set with its pool and token ids prepared once.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pool: AnswerPool,
    contexts: Vec<TokenIdSequence>,
    answers: Vec<TokenIdSequence>,
}

impl EvalSet {
    pub fn new(testset: &PairDataset, vocab: &Vocabulary, max_len: usize) -> Result<Self, EvalError> {
        let pool = build_answer_pool(testset)?;
        let contexts = testset
            .pairs()
            .iter()
            .map(|p| encode_text(&p.context, vocab, max_len))
            .collect::<Result<Vec<_>, _>>()?;
        let answers = pool
            .entries()
            .iter()
            .map(|e| encode_text(&e.text, vocab, max_len))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            pool,
            contexts,
            answers,
        })
    }

    pub fn pool(&self) -> &AnswerPool {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

fn unit_rows<F: Real>(vectors: &[ThoughtVector<F>]) -> Result<Vec<Vec<f64>>, EvalError> {
    vectors
        .iter()
        .map(|v| {
            let x: Vec<f64> = v.as_slice().iter().map(|a| a.as_f64()).collect();
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EvalError::Encoder(EncoderError::Numerics(
                    crate::numerics::NumericsError::ZeroNorm,
                )));
            }
            Ok(x.into_iter().map(|a| a / norm).collect())
        })
        .collect()
}

/// Cosine scores of every test context against every pool entry.
pub fn score_pool<F: Real>(model: &DualEncoder<F>, set: &EvalSet) -> Result<Vec<Vec<f64>>, EvalError> {
    let c = unit_rows(&model.encode_batch(&set.contexts, Side::Context)?)?;
    let a = unit_rows(&model.encode_batch(&set.answers, Side::Response)?)?;
    Ok(c.iter()
        .map(|cv| {
            a.iter()
                .map(|av| cv.iter().zip(av).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
                .collect()
        })
        .collect())
}

pub fn rank_all<F: Real>(model: &DualEncoder<F>, set: &EvalSet) -> Result<Vec<RankingResult>, EvalError> {
    score_pool(model, set)?
        .iter()
        .enumerate()
        .map(|(row, scores)| rank_scores(&set.pool, row, scores))
        .collect()
}

/// Averages per-context metrics. Under [`Regime::Baseline`] every ranking
/// is post-filtered first.
pub fn evaluate_model<F: Real>(
    model: &DualEncoder<F>,
    set: &EvalSet,
    regime: Regime,
) -> Result<MetricsReport, EvalError> {
    let mut results = rank_all(model, set)?;
    if regime == Regime::Baseline {
        results = results.iter().map(|r| baseline_filter(r, &set.pool)).collect();
    }
    Ok(MetricsReport::from_results(regime, &results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Pair, Split};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dataset(pairs: &[(&str, &str)]) -> PairDataset {
        PairDataset::new(pairs.iter().map(|(c, r)| Pair::new(*c, *r)).collect(), Split::Test)
    }

    #[test]
    fn distinct_texts_double_the_pool() {
        let pairs: Vec<Pair> = (0..509)
            .map(|i| Pair::new(format!("context {i}"), format!("response {i}")))
            .collect();
        let pool = build_answer_pool(&PairDataset::new(pairs, Split::Test)).unwrap();
        assert_eq!(pool.len(), 1018);
    }

    #[test]
    fn context_equal_to_response_merges() {
        let pool = build_answer_pool(&dataset(&[("hello", "hi there"), ("Hi there", "bye")])).unwrap();
        assert_eq!(pool.len(), 3);
        let merged = &pool.entries()[0];
        assert!(merged.is_response && merged.is_context);
        assert_eq!(merged.response_rows, vec![0]);
        assert_eq!(merged.context_rows, vec![1]);
        assert_eq!(pool.context_index(1), 0);
    }

    #[test]
    fn two_pair_pool_by_hand() {
        let pool = build_answer_pool(&dataset(&[("a", "b"), ("c", "d")])).unwrap();
        let texts: Vec<&str> = pool.entries().iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, vec!["b", "d", "a", "c"]);
        assert_eq!((pool.gt_index(0), pool.context_index(0)), (0, 2));
        assert_eq!((pool.gt_index(1), pool.context_index(1)), (1, 3));
        assert!(build_answer_pool(&dataset(&[])).is_err());
    }

    /// Pool of rows (c0, r0), (c1, r1): entries [r0, r1, c0, c1].
    fn two_row_pool() -> AnswerPool {
        build_answer_pool(&dataset(&[("c0", "r0"), ("c1", "r1")])).unwrap()
    }

    #[test]
    fn hand_scored_ranking() {
        let pool = two_row_pool();
        // context 0.9, gt 0.8, others 0.5 and 0.1.
        let r = rank_scores(&pool, 0, &[0.8, 0.5, 0.9, 0.1]).unwrap();
        assert_eq!(r.context_position, Some(0));
        assert_eq!(r.gt_position, 1);
        let e = echo_metrics(&r).unwrap();
        assert_eq!(e.rank_context, 0);
        assert_eq!(e.diff_top, 0.0);
        assert_abs_diff_eq!(e.diff_response, -0.1, epsilon = 1e-12);
    }

    #[test]
    fn ties_keep_pool_order() {
        let pool = two_row_pool();
        let r = rank_scores(&pool, 1, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.order, vec![0, 1, 2, 3]);
        assert_eq!(r.gt_position, 1);
        let r = rank_scores(&pool, 1, &[0.1, 0.9, 0.2, 0.3]).unwrap();
        assert_eq!(r.gt_position, 0);
        assert!(echo_metrics(&r).unwrap().diff_response > 0.0);
    }

    #[test]
    fn ap_and_recall_boundaries() {
        let pool = two_row_pool();
        let mut r = rank_scores(&pool, 0, &[0.9, 0.1, 0.2, 0.3]).unwrap();
        assert_eq!(average_precision(&r), 1.0);
        r.gt_position = 4;
        assert_abs_diff_eq!(average_precision(&r), 0.2);
        r.gt_position = 1;
        assert_eq!(recall_at_n(&r, 2), 1.0);
        r.gt_position = 2;
        assert_eq!(recall_at_n(&r, 2), 0.0);
        r.gt_position = 9;
        assert_eq!(recall_at_n(&r, 10), 1.0);
    }

    #[test]
    fn report_means_by_hand() {
        let pool = two_row_pool();
        let a = rank_scores(&pool, 0, &[0.9, 0.1, 0.2, 0.3]).unwrap();
        let b = rank_scores(&pool, 1, &[0.9, 0.5, 0.2, 0.8]).unwrap();
        // Row 1: order r0 0.9, c1 0.8, r1 0.5, c0 0.2 → gt at 2, context at 1.
        assert_eq!(b.gt_position, 2);
        let rep = MetricsReport::from_results(Regime::Random, &[a.clone(), b]);
        assert_abs_diff_eq!(rep.average_precision, (1.0 + 1.0 / 3.0) / 2.0);
        assert_abs_diff_eq!(rep.recall_at_2, 0.5);
        assert_abs_diff_eq!(rep.recall_at_5, 1.0);
        // Row 0: order r0 0.9, c1 0.3, c0 0.2, r1 0.1 → context at 2.
        assert_abs_diff_eq!(rep.rank_context.unwrap(), 1.5);
        assert_abs_diff_eq!(
            rep.diff_top.unwrap(),
            ((0.9 - 0.2) + (0.9 - 0.8)) / 2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            rep.diff_response.unwrap(),
            ((0.9 - 0.2) + (0.5 - 0.8)) / 2.0,
            epsilon = 1e-12
        );
        let single = MetricsReport::from_results(Regime::Random, std::slice::from_ref(&a));
        assert_eq!(single.average_precision, average_precision(&a));
    }

    #[test]
    fn baseline_removes_top_context() {
        let pool = two_row_pool();
        let r = rank_scores(&pool, 0, &[0.8, 0.5, 0.9, 0.1]).unwrap();
        let f = baseline_filter(&r, &pool);
        assert_eq!(f.gt_position, r.gt_position - 1);
        assert_eq!(f.order.len(), 3);
        assert!(echo_metrics(&f).is_none());
        let rep = MetricsReport::from_results(Regime::Baseline, &[f]);
        assert!(rep.rank_context.is_none());
        assert!(rep.to_tsv_row().ends_with("\t-\t-\t-"));
    }

    #[test]
    fn baseline_keeps_context_that_is_its_own_answer() {
        let pool = build_answer_pool(&dataset(&[("same", "same"), ("x", "y")])).unwrap();
        assert_eq!(pool.gt_index(0), pool.context_index(0));
        let scores = vec![0.2; pool.len()];
        let r = rank_scores(&pool, 0, &scores).unwrap();
        let f = baseline_filter(&r, &pool);
        assert_eq!(f.order.len(), pool.len());
        assert_eq!(f.gt_position, r.gt_position);
    }

    #[test]
    fn baseline_leaves_ranking_unchanged_when_context_below_gt() {
        let pool = two_row_pool();
        let r = rank_scores(&pool, 0, &[0.95, 0.5, 0.1, 0.2]).unwrap();
        let f = baseline_filter(&r, &pool);
        assert_eq!(f.gt_position, r.gt_position);
    }

    #[test]
    fn tsv_column_order() {
        let rep = MetricsReport {
            regime: Regime::Random,
            contexts: 509,
            average_precision: 0.12,
            recall_at_2: 0.18,
            recall_at_5: 0.36,
            recall_at_10: 0.45,
            rank_context: Some(0.9),
            diff_top: Some(0.008),
            diff_response: Some(-0.15),
        };
        assert_eq!(
            rep.to_tsv_row(),
            "RN\t0.1200\t0.1800\t0.3600\t0.4500\t0.9000\t0.0080\t-0.1500"
        );
        assert_eq!(MetricsReport::tsv_header().split('\t').count(), 8);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["regime"], "RN");
    }

    proptest! {
        #[test]
        fn filtering_never_demotes_ground_truth(scores in prop::collection::vec(-1.0f64..1.0, 4)) {
            let pool = two_row_pool();
            for row in 0..2 {
                let r = rank_scores(&pool, row, &scores).unwrap();
                let f = baseline_filter(&r, &pool);
                prop_assert!(f.gt_position <= r.gt_position);
                prop_assert!(average_precision(&f) >= average_precision(&r));
                let e = echo_metrics(&r).unwrap();
                prop_assert!(e.diff_top >= 0.0);
                prop_assert!(recall_at_n(&r, 2) <= recall_at_n(&r, 5));
                prop_assert!(recall_at_n(&r, 5) <= recall_at_n(&r, 10));
            }
        }
    }
}
