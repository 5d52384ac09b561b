//! Mini-batch training: Adam, per-batch negative selection, validation-based
//! model selection and an optional offline mine-then-train mode.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{encode_batch, BoundEncoder, DualEncoder, EncoderError, Side};
use crate::eval::{evaluate_model, EvalError, EvalSet, Regime};
use crate::mining::{
    mine_with_model, select_in_batch, BatchScores, Fallback, MinedPair, MiningError, MiningStats, MiningStrategy,
    NegativeSelection, StrategyKind, DEFAULT_MARGIN,
};
use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};
use crate::text::{encode_text, normalize, PairDataset, TextError, TokenIdSequence, Vocabulary, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at step {step}: loss {loss} non-finite twice in a row")]
    Diverged { step: usize, loss: f32 },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub margin: f32,
    pub strategy: StrategyKind,
    pub fallback: Fallback,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Validate every this many steps; 0 validates only at epoch ends.
    pub validation_every: usize,
    pub seed: u64,
    /// Offline mine-then-train rounds after an initial random-negative
    /// phase. 0 trains online with `strategy`.
    pub offline_rounds: usize,
    /// Responses scored per context when mining offline.
    pub offline_candidate_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            margin: DEFAULT_MARGIN,
            strategy: StrategyKind::HardResponsesContexts,
            fallback: Fallback::Random,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 30,
            validation_every: 0,
            seed: 0,
            offline_rounds: 0,
            offline_candidate_cap: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.offline_rounds > 0 && self.offline_candidate_cap == 0 {
            return bad("offline_candidate_cap must be positive".into());
        }
        self.mining_strategy()?;
        Ok(())
    }

    pub fn mining_strategy(&self) -> Result<MiningStrategy, MiningError> {
        MiningStrategy::new(self.strategy, self.margin, self.fallback)
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[&Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `None` gradients mark frozen tensors,
    /// which stay untouched. Returns `false` when a non-finite gradient made
    /// the step a no-op.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Option<Tensor<F>>],
        hp: &AdamParams,
    ) -> Result<bool, TrainError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TrainError::Optimizer(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() {
                return Err(TrainError::Optimizer(format!("param {i} changed shape")));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TrainError::Optimizer(format!(
                        "gradient {i} has shape {:?}, param {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
            log::warn!(
                "event=skip_update reason=non_finite_gradient tensor={i} step={}",
                self.step
            );
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (F::from_f64(hp.beta1), F::from_f64(hp.beta2));
        let (one, lr, eps) = (F::one(), F::from_f64(hp.learning_rate), F::from_f64(hp.epsilon));
        let (c1, c2) = (F::from_f64(c1), F::from_f64(c2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

/// Training pairs as token ids, with text-identity keys shared between
/// contexts and responses.
#[derive(Clone, Debug)]
pub struct EncodedPairs {
    pub contexts: Vec<TokenIdSequence>,
    pub responses: Vec<TokenIdSequence>,
    pub context_keys: Vec<u64>,
    pub response_keys: Vec<u64>,
}

impl EncodedPairs {
    pub fn new(dataset: &PairDataset, vocab: &Vocabulary, max_len: usize) -> Result<Self, TextError> {
        let mut ids: HashMap<String, u64> = HashMap::new();
        let mut key = |text: &str| {
            let next = ids.len() as u64;
            *ids.entry(normalize(text)).or_insert(next)
        };
        let mut out = Self {
            contexts: Vec::with_capacity(dataset.len()),
            responses: Vec::with_capacity(dataset.len()),
            context_keys: Vec::with_capacity(dataset.len()),
            response_keys: Vec::with_capacity(dataset.len()),
        };
        for p in dataset.pairs() {
            out.contexts.push(encode_text(&p.context, vocab, max_len)?);
            out.responses.push(encode_text(&p.response, vocab, max_len)?);
            out.context_keys.push(key(&p.context));
            out.response_keys.push(key(&p.response));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Cosine score matrix `B × K` between context-side encodings of `contexts`
/// and response-side encodings of `candidates`.
pub fn score_matrix<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    contexts: &[&TokenIdSequence],
    candidates: &[&TokenIdSequence],
    max_len: usize,
) -> Result<Var, EncoderError> {
    let c = encode_batch(g, bound, contexts, Side::Context, max_len)?;
    let r = encode_batch(g, bound, candidates, Side::Response, max_len)?;
    let cn = g.normalize_rows(c)?;
    let rn = g.normalize_rows(r)?;
    let rt = g.transpose(rn)?;
    Ok(g.matmul(cn, rt)?)
}

/// Mean triplet hinge over `(row, positive column, negative column)` cells
/// of a score matrix.
pub fn triplet_batch_loss<F: Real>(
    g: &mut Graph<F>,
    scores: Var,
    triples: &[(usize, usize, usize)],
    margin: F,
) -> Result<Var, NumericsError> {
    let pos_cells: Vec<(usize, usize)> = triples.iter().map(|&(i, p, _)| (i, p)).collect();
    let neg_cells: Vec<(usize, usize)> = triples.iter().map(|&(i, _, n)| (i, n)).collect();
    let pos = g.pick(scores, &pos_cells)?;
    let neg = g.pick(scores, &neg_cells)?;
    let gap = g.sub(neg, pos)?;
    let shifted = g.shift(gap, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean hinge over non-skipped pairs; `None` when every pair was skipped.
    pub loss: Option<f32>,
    pub selections: Vec<Option<NegativeSelection>>,
    pub stats: MiningStats,
    /// Whether parameters changed.
    pub applied: bool,
}

fn apply_gradients<F: Real>(
    model: &mut DualEncoder<F>,
    adam: &mut AdamState<F>,
    g: &Graph<F>,
    bound: &BoundEncoder,
    loss: Var,
    hp: &AdamParams,
) -> Result<bool, TrainError> {
    let mut grads = g.backward(loss)?;
    let trainable = model.embedding.trainable;
    let mut per_tensor: Vec<Option<Tensor<F>>> = bound.vars().into_iter().map(|v| Some(grads.take(v))).collect();
    match per_tensor[0].as_mut() {
        Some(_) if !trainable => per_tensor[0] = None,
        Some(emb) => {
            let dim = emb.cols();
            let pad = PAD as usize;
            emb.data_mut()[pad * dim..(pad + 1) * dim].fill(F::zero());
        }
        None => {}
    }
    let mut params = model.tensors_mut();
    adam.step(&mut params, &per_tensor, hp)
}

fn loss_value<F: Real>(g: &Graph<F>, loss: Var) -> f32 {
    g.value(loss).data()[0].as_f64() as f32
}

/// One online step: encode the batch, score, select a negative per pair
/// with `strategy`, and update on the mean hinge of the selected triplets.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Real>(
    model: &mut DualEncoder<F>,
    adam: &mut AdamState<F>,
    data: &EncodedPairs,
    batch: &[usize],
    strategy: &MiningStrategy,
    hp: &AdamParams,
    rng: &mut impl Rng,
) -> Result<StepOutcome, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::InvalidConfig(format!("batch of {} pairs", batch.len())));
    }
    let with_contexts = strategy.kind.uses_contexts();
    let contexts: Vec<&TokenIdSequence> = batch.iter().map(|&i| &data.contexts[i]).collect();
    let mut candidates: Vec<&TokenIdSequence> = batch.iter().map(|&i| &data.responses[i]).collect();
    if with_contexts {
        candidates.extend(contexts.iter().copied());
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let scores = score_matrix(&mut g, &bound, &contexts, &candidates, model.config.max_len)?;
    let values: Vec<f32> = g.value(scores).data().iter().map(|v| v.as_f64() as f32).collect();
    let response_keys: Vec<u64> = batch.iter().map(|&i| data.response_keys[i]).collect();
    let context_keys = with_contexts.then(|| batch.iter().map(|&i| data.context_keys[i]).collect());
    let batch_scores = BatchScores::new(values, response_keys, context_keys)?;

    let mut selections = Vec::with_capacity(batch.len());
    let mut stats = MiningStats::default();
    let mut triples = Vec::new();
    for i in 0..batch.len() {
        let sel = select_in_batch(&batch_scores, i, strategy, rng)?;
        stats.record(sel.as_ref());
        if let Some(s) = &sel {
            triples.push((i, i, s.column));
        }
        selections.push(sel);
    }
    if triples.is_empty() {
        return Ok(StepOutcome {
            loss: None,
            selections,
            stats,
            applied: false,
        });
    }
    let loss = triplet_batch_loss(&mut g, scores, &triples, F::from_f64(strategy.margin as f64))?;
    let value = loss_value(&g, loss);
    let applied = apply_gradients(model, adam, &g, &bound, loss, hp)?;
    Ok(StepOutcome {
        loss: Some(value),
        selections,
        stats,
        applied,
    })
}

/// One step on fixed triplets from offline mining.
pub fn train_step_mined<F: Real>(
    model: &mut DualEncoder<F>,
    adam: &mut AdamState<F>,
    data: &EncodedPairs,
    triplets: &[MinedPair],
    margin: f32,
    hp: &AdamParams,
) -> Result<StepOutcome, TrainError> {
    if triplets.is_empty() {
        return Err(TrainError::InvalidConfig("empty triplet batch".into()));
    }
    let b = triplets.len();
    let contexts: Vec<&TokenIdSequence> = triplets.iter().map(|t| &data.contexts[t.context]).collect();
    let candidates: Vec<&TokenIdSequence> = triplets
        .iter()
        .map(|t| &data.responses[t.context])
        .chain(triplets.iter().map(|t| &data.responses[t.response]))
        .collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let scores = score_matrix(&mut g, &bound, &contexts, &candidates, model.config.max_len)?;
    let triples: Vec<(usize, usize, usize)> = (0..b).map(|k| (k, k, b + k)).collect();
    let loss = triplet_batch_loss(&mut g, scores, &triples, F::from_f64(margin as f64))?;
    let value = loss_value(&g, loss);
    let applied = apply_gradients(model, adam, &g, &bound, loss, hp)?;
    let mut stats = MiningStats::default();
    for _ in 0..b {
        stats.record(Some(&NegativeSelection {
            column: 0,
            origin: crate::mining::Origin::Response,
            score: 0.0,
            was_fallback: false,
        }));
    }
    Ok(StepOutcome {
        loss: Some(value),
        selections: Vec::new(),
        stats,
        applied,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub round: usize,
    pub steps: usize,
    pub mean_loss: Option<f64>,
    pub stats: MiningStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub average_precision: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Checkpoint with the highest validation AP; earliest wins ties.
    pub best: Checkpoint,
    pub best_step: usize,
    pub final_model: DualEncoder<f32>,
    pub epochs: Vec<EpochSummary>,
    pub validations: Vec<ValidationPoint>,
    /// Structured `key=value` lines, identical across runs with equal inputs.
    pub log: Vec<String>,
}

struct RunLog(Vec<String>);

impl RunLog {
    fn emit(&mut self, line: String) {
        log::info!("{line}");
        self.0.push(line);
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x}"))
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    vocab: &'a Vocabulary,
    data: EncodedPairs,
    eval_set: EvalSet,
    model: DualEncoder<f32>,
    adam: AdamState<f32>,
    hp: AdamParams,
    rng: ChaCha8Rng,
    log: RunLog,
    step: usize,
    epoch: usize,
    last_validated: Option<usize>,
    best: Option<(f64, usize, DualEncoder<f32>)>,
    validations: Vec<ValidationPoint>,
    epochs: Vec<EpochSummary>,
    bad_losses: usize,
}

impl Trainer<'_> {
    fn validate(&mut self) -> Result<(), TrainError> {
        if self.last_validated == Some(self.step) {
            return Ok(());
        }
        let report = evaluate_model(&self.model, &self.eval_set, Regime::Random)?;
        let ap = report.average_precision;
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| ap > *b);
        if improved {
            self.best = Some((ap, self.step, self.model.clone()));
        }
        self.log.emit(format!(
            "event=validation step={} epoch={} ap={} best={}",
            self.step, self.epoch, ap, improved
        ));
        self.validations.push(ValidationPoint {
            step: self.step,
            average_precision: ap,
        });
        self.last_validated = Some(self.step);
        Ok(())
    }

    fn after_step(&mut self, round: usize, outcome: &StepOutcome) -> Result<(), TrainError> {
        self.step += 1;
        self.log.emit(format!(
            "event=step step={} epoch={} round={} loss={} selected={} skipped={} fallback_rate={} own_context_fraction={} applied={}",
            self.step,
            self.epoch,
            round,
            outcome.loss.map_or_else(|| "none".to_string(), |l| format!("{l}")),
            outcome.stats.selected,
            outcome.stats.skipped,
            outcome.stats.fallback_rate(),
            outcome.stats.own_context_fraction(),
            outcome.applied,
        ));
        match outcome.loss {
            Some(l) if !l.is_finite() => {
                self.bad_losses += 1;
                if self.bad_losses >= 2 {
                    self.log
                        .emit(format!("event=abort step={} reason=diverged loss={l}", self.step));
                    return Err(TrainError::Diverged {
                        step: self.step,
                        loss: l,
                    });
                }
            }
            Some(_) => self.bad_losses = 0,
            None => {}
        }
        if self.config.validation_every > 0 && self.step.is_multiple_of(self.config.validation_every) {
            self.validate()?;
        }
        Ok(())
    }

    fn end_epoch(&mut self, round: usize, steps: usize, losses: &[f64], stats: MiningStats) -> Result<(), TrainError> {
        let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        self.log.emit(format!(
            "event=epoch epoch={} round={} steps={} mean_loss={} pairs={} selected={} skipped={} own_context={} other_context={} own_context_fraction={} context_fraction={} fallback_rate={} skip_rate={}",
            self.epoch,
            round,
            steps,
            fmt_opt(mean_loss),
            stats.pairs,
            stats.selected,
            stats.skipped,
            stats.own_context,
            stats.other_context,
            stats.own_context_fraction(),
            stats.context_fraction(),
            stats.fallback_rate(),
            stats.skip_rate(),
        ));
        self.epochs.push(EpochSummary {
            epoch: self.epoch,
            round,
            steps,
            mean_loss,
            stats,
        });
        self.validate()?;
        self.epoch += 1;
        Ok(())
    }

    fn online_epochs(&mut self, round: usize, strategy: &MiningStrategy) -> Result<(), TrainError> {
        let n = self.data.len();
        for _ in 0..self.config.max_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let (mut steps, mut losses, mut stats) = (0, Vec::new(), MiningStats::default());
            for batch in order.chunks(self.config.batch_size) {
                if batch.len() < 2 {
                    continue;
                }
                let outcome = train_step(
                    &mut self.model,
                    &mut self.adam,
                    &self.data,
                    batch,
                    strategy,
                    &self.hp,
                    &mut self.rng,
                )?;
                steps += 1;
                stats.merge(&outcome.stats);
                if let Some(l) = outcome.loss {
                    losses.push(l as f64);
                }
                self.after_step(round, &outcome)?;
            }
            self.end_epoch(round, steps, &losses, stats)?;
        }
        Ok(())
    }

    /// Mines with the current model, then trains on the mined triplets.
    /// Returns `false` when nothing was mined.
    fn offline_round(&mut self, round: usize) -> Result<bool, TrainError> {
        let cap = self.config.offline_candidate_cap;
        let mut mined = mine_with_model(
            &self.model,
            &self.data.contexts,
            &self.data.responses,
            &self.data.response_keys,
            self.config.margin,
            Some(cap),
            &mut self.rng,
        )?;
        let total = mined.len();
        // One epoch covers at most as many triplets as there are pairs.
        mined.shuffle(&mut self.rng);
        mined.truncate(self.data.len());
        self.log.emit(format!(
            "event=offline_mine round={round} mined={total} kept={}",
            mined.len()
        ));
        if mined.is_empty() {
            return Ok(false);
        }
        for _ in 0..self.config.max_epochs {
            mined.shuffle(&mut self.rng);
            let (mut steps, mut losses, mut stats) = (0, Vec::new(), MiningStats::default());
            for batch in mined.chunks(self.config.batch_size) {
                let outcome = train_step_mined(
                    &mut self.model,
                    &mut self.adam,
                    &self.data,
                    batch,
                    self.config.margin,
                    &self.hp,
                )?;
                steps += 1;
                stats.merge(&outcome.stats);
                if let Some(l) = outcome.loss {
                    losses.push(l as f64);
                }
                self.after_step(round, &outcome)?;
            }
            self.end_epoch(round, steps, &losses, stats)?;
        }
        Ok(true)
    }
}

/// Trains `initial` and returns the best checkpoint by validation AP,
/// evaluated before the first step, every `validation_every` steps and at
/// each epoch end.
pub fn fit(
    initial: DualEncoder<f32>,
    vocab: &Vocabulary,
    train: &PairDataset,
    validation: &PairDataset,
    config: &TrainConfig,
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let max_len = initial.config.max_len;
    let data = EncodedPairs::new(train, vocab, max_len)?;
    let eval_set = EvalSet::new(validation, vocab, max_len)?;
    let adam = AdamState::new(&initial.tensors());
    let mut t = Trainer {
        config,
        vocab,
        data,
        eval_set,
        model: initial,
        adam,
        hp: config.adam(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        log: RunLog(Vec::new()),
        step: 0,
        epoch: 0,
        last_validated: None,
        best: None,
        validations: Vec::new(),
        epochs: Vec::new(),
        bad_losses: 0,
    };
    t.log.emit(format!(
        "event=start strategy={} margin={} batch_size={} learning_rate={} max_epochs={} seed={} offline_rounds={} train_pairs={} validation_pairs={} params={}",
        config.strategy,
        config.margin,
        config.batch_size,
        config.learning_rate,
        config.max_epochs,
        config.seed,
        config.offline_rounds,
        train.len(),
        validation.len(),
        t.model.param_count(),
    ));
    t.validate()?;
    if config.offline_rounds == 0 {
        t.online_epochs(0, &config.mining_strategy()?)?;
    } else {
        let warmup = MiningStrategy::new(StrategyKind::Random, config.margin, config.fallback)?;
        t.online_epochs(0, &warmup)?;
        for round in 1..=config.offline_rounds {
            if !t.offline_round(round)? {
                break;
            }
        }
    }
    let (ap, best_step, best_model) = t.best.take().expect("validated at least once");
    t.log.emit(format!(
        "event=done steps={} best_step={best_step} best_ap={ap}",
        t.step
    ));
    Ok(FitOutcome {
        best: Checkpoint {
            model: best_model,
            vocab: t.vocab.clone(),
            train: config.clone(),
            validation_ap: ap,
        },
        best_step,
        final_model: t.model,
        epochs: t.epochs,
        validations: t.validations,
        log: t.log.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::text::{Pair, Split};
    use approx::assert_abs_diff_eq;

    fn scalar_state(p: f64) -> (Tensor<f64>, AdamState<f64>) {
        let t = Tensor::scalar(p);
        let s = AdamState::new(&[&t]);
        (t, s)
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let (mut p, mut s) = scalar_state(1.0);
        let hp = AdamParams::default();
        assert!(s.step(&mut [&mut p], &[Some(Tensor::scalar(1.0))], &hp).unwrap());
        // t = 1: m̂ = g, v̂ = g², so the update is lr · g / (|g| + ε).
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert_abs_diff_eq!(p.data()[0], expected, epsilon = 1e-12);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_counts_step() {
        let (mut p, mut s) = scalar_state(0.7);
        s.step(&mut [&mut p], &[Some(Tensor::scalar(0.0))], &AdamParams::default())
            .unwrap();
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_skips_non_finite_and_frozen() {
        let (mut p, mut s) = scalar_state(0.7);
        let applied = s
            .step(&mut [&mut p], &[Some(Tensor::scalar(f64::NAN))], &AdamParams::default())
            .unwrap();
        assert!(!applied);
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(s.step_count(), 0);
        s.step(&mut [&mut p], &[None], &AdamParams::default()).unwrap();
        assert_eq!(p.data()[0], 0.7);
        let mut wrong = Tensor::zeros(&[2]);
        assert!(s.step(&mut [&mut wrong], &[None], &AdamParams::default()).is_err());
    }

    fn toy_data(n: usize) -> (PairDataset, Vocabulary) {
        let pairs: Vec<Pair> = (0..n)
            .map(|i| Pair::new(format!("how is thing {i} ?"), format!("thing {i} is fine {}", i % 3)))
            .collect();
        let ds = PairDataset::new(pairs, Split::Train);
        let vocab = crate::text::build_vocab(&ds, 1, None).unwrap();
        (ds, vocab)
    }

    fn toy_model(vocab: &Vocabulary, seed: u64) -> DualEncoder<f32> {
        let config = EncoderConfig {
            emb_dim: 8,
            hidden: 6,
            max_len: 20,
        };
        DualEncoder::random(config, vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn all_skipped_step_changes_nothing() {
        let (ds, vocab) = toy_data(8);
        let data = EncodedPairs::new(&ds, &vocab, 20).unwrap();
        let mut model = toy_model(&vocab, 1);
        let before = model.clone();
        let mut adam = AdamState::new(&model.tensors());
        // A margin this small leaves the window empty almost surely.
        let strategy = MiningStrategy::new(StrategyKind::HardResponses, 1e-30, Fallback::Skip).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = train_step(
            &mut model,
            &mut adam,
            &data,
            &[0, 1, 2],
            &strategy,
            &AdamParams::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.loss, None);
        assert!(!out.applied);
        assert_eq!(model, before);
    }

    #[test]
    fn zero_learning_rate_gives_same_loss_twice() {
        let (ds, vocab) = toy_data(8);
        let data = EncodedPairs::new(&ds, &vocab, 20).unwrap();
        let mut model = toy_model(&vocab, 2);
        let mut adam = AdamState::new(&model.tensors());
        let hp = AdamParams {
            learning_rate: 0.0,
            ..AdamParams::default()
        };
        let strategy = MiningStrategy::new(StrategyKind::HardResponsesContexts, 0.05, Fallback::Random).unwrap();
        let batch = [0, 1, 2, 3, 4];
        let a = train_step(
            &mut model,
            &mut adam,
            &data,
            &batch,
            &strategy,
            &hp,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = train_step(
            &mut model,
            &mut adam,
            &data,
            &batch,
            &strategy,
            &hp,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.selections, b.selections);
    }

    #[test]
    fn padding_row_and_frozen_embedding_stay_put() {
        let (ds, vocab) = toy_data(8);
        let data = EncodedPairs::new(&ds, &vocab, 20).unwrap();
        let strategy = MiningStrategy::new(StrategyKind::Random, 0.05, Fallback::Random).unwrap();
        for frozen in [false, true] {
            let mut model = toy_model(&vocab, 3);
            model.embedding.trainable = !frozen;
            let before = model.embedding.table.clone();
            let mut adam = AdamState::new(&model.tensors());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for _ in 0..3 {
                train_step(
                    &mut model,
                    &mut adam,
                    &data,
                    &[0, 1, 2, 3],
                    &strategy,
                    &AdamParams::default(),
                    &mut rng,
                )
                .unwrap();
            }
            let dim = before.cols();
            assert_eq!(&model.embedding.table.data()[..dim], &before.data()[..dim]);
            assert_eq!(model.embedding.table == before, frozen);
        }
    }

    fn fit_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: epochs,
            validation_every: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (ds, vocab) = toy_data(12);
        let model = toy_model(&vocab, 4);
        let out = fit(
            model.clone(),
            &vocab,
            &ds,
            &ds.slice(0, 4, Split::Validation),
            &fit_config(0),
        )
        .unwrap();
        assert_eq!(out.best.model, model);
        assert_eq!(out.best_step, 0);
        assert_eq!(out.validations.len(), 1);
        assert_eq!(out.best.validation_ap, out.validations[0].average_precision);
    }

    #[test]
    fn fit_keeps_argmax_and_is_reproducible() {
        let (ds, vocab) = toy_data(12);
        let valid = ds.slice(0, 6, Split::Validation);
        let run = || fit(toy_model(&vocab, 4), &vocab, &ds, &valid, &fit_config(3)).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
        let max = a
            .validations
            .iter()
            .map(|v| v.average_precision)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.validation_ap, max);
        assert!(a.best.validation_ap >= a.validations[0].average_precision);
        assert_eq!(a.epochs.len(), 3);
        assert!(a.log.iter().any(|l| l.starts_with("event=epoch")));
    }

    #[test]
    fn offline_rounds_run_after_warmup() {
        let (ds, vocab) = toy_data(12);
        let config = TrainConfig {
            offline_rounds: 1,
            offline_candidate_cap: 5,
            margin: 1.5,
            ..fit_config(1)
        };
        let out = fit(
            toy_model(&vocab, 4),
            &vocab,
            &ds,
            &ds.slice(0, 4, Split::Validation),
            &config,
        )
        .unwrap();
        assert!(out.log.iter().any(|l| l.starts_with("event=offline_mine round=1")));
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.epochs[1].round, 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            margin: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
