//! Dual encoder: two independent bidirectional LSTMs over a shared word
//! embedding table, max-pooled over time into thought vectors and matched
//! by cosine similarity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cosine_similarity, Graph, NumericsError, Real, Tensor, Var};
use crate::text::{EmbeddingMatrix, TokenIdSequence, DEFAULT_MAX_LEN};

/// Sequences encoded per graph by [`DualEncoder::encode_batch`].
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale sizes that train on a CPU in minutes.
    fn default() -> Self {
        Self {
            emb_dim: 32,
            hidden: 64,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl EncoderConfig {
    /// 256-d embeddings, 1024 units per direction.
    pub fn full_scale() -> Self {
        Self {
            emb_dim: 256,
            hidden: 1024,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.emb_dim == 0 || self.hidden == 0 || self.max_len == 0 {
            return Err(EncoderError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn thought_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Context,
    Response,
}

/// One LSTM direction. Gate columns are laid out as
/// `[input | forget | candidate | output]`, each `hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<F> {
    pub w_input: Tensor<F>,
    pub w_hidden: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> LstmParams<F> {
    /// Uniform(-1/√h, 1/√h) weights, zero biases except the forget gate at 1.
    pub fn init(emb_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let w_input = uniform(emb_dim, 4 * hidden);
        let w_hidden = uniform(hidden, 4 * hidden);
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = F::one();
        }
        Self {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.rows()
    }

    fn cast<G: Real>(&self) -> LstmParams<G> {
        LstmParams {
            w_input: self.w_input.cast(),
            w_hidden: self.w_hidden.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideParams<F> {
    pub forward: LstmParams<F>,
    pub backward: LstmParams<F>,
}

impl<F: Real> SideParams<F> {
    pub fn init(emb_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            forward: LstmParams::init(emb_dim, hidden, rng),
            backward: LstmParams::init(emb_dim, hidden, rng),
        }
    }

    fn cast<G: Real>(&self) -> SideParams<G> {
        SideParams {
            forward: self.forward.cast(),
            backward: self.backward.cast(),
        }
    }
}

/// Max-pooled encoder output, `2 × hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct ThoughtVector<F>(Vec<F>);

impl<F: Real> ThoughtVector<F> {
    pub fn new(values: Vec<F>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of a context vector and a response vector.
pub fn match_score<F: Real>(c: &ThoughtVector<F>, r: &ThoughtVector<F>) -> Result<F, EncoderError> {
    Ok(cosine_similarity(c.as_slice(), r.as_slice())?)
}

/// Parameters of the whole model. Context and response sides have separate
/// LSTM weights and share the embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder<F> {
    pub config: EncoderConfig,
    pub embedding: EmbeddingMatrix<F>,
    pub context: SideParams<F>,
    pub response: SideParams<F>,
}

/// Graph handles of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// Graph handles of every model tensor, in [`DualEncoder::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub embedding: Var,
    pub context: [BoundLstm; 2],
    pub response: [BoundLstm; 2],
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in self.context.iter().chain(&self.response) {
            out.extend([l.w_input, l.w_hidden, l.bias]);
        }
        out
    }

    /// Inverse of [`BoundEncoder::vars`].
    pub fn from_vars(vars: &[Var]) -> Option<Self> {
        if vars.len() != TENSOR_NAMES.len() {
            return None;
        }
        let lstm = |k: usize| BoundLstm {
            w_input: vars[k],
            w_hidden: vars[k + 1],
            bias: vars[k + 2],
        };
        Some(Self {
            embedding: vars[0],
            context: [lstm(1), lstm(4)],
            response: [lstm(7), lstm(10)],
        })
    }

    fn side(&self, side: Side) -> &[BoundLstm; 2] {
        match side {
            Side::Context => &self.context,
            Side::Response => &self.response,
        }
    }
}

pub const TENSOR_NAMES: [&str; 13] = [
    "embedding",
    "context.forward.w_input",
    "context.forward.w_hidden",
    "context.forward.bias",
    "context.backward.w_input",
    "context.backward.w_hidden",
    "context.backward.bias",
    "response.forward.w_input",
    "response.forward.w_hidden",
    "response.forward.bias",
    "response.backward.w_input",
    "response.backward.w_hidden",
    "response.backward.bias",
];

impl<F: Real> DualEncoder<F> {
    pub fn new(config: EncoderConfig, embedding: EmbeddingMatrix<F>, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        if embedding.dim() != config.emb_dim {
            return Err(EncoderError::InvalidConfig(format!(
                "embedding dim {} != emb_dim {}",
                embedding.dim(),
                config.emb_dim
            )));
        }
        let context = SideParams::init(config.emb_dim, config.hidden, rng);
        let response = SideParams::init(config.emb_dim, config.hidden, rng);
        Ok(Self {
            config,
            embedding,
            context,
            response,
        })
    }

    /// Fresh model with a randomly initialized, trainable embedding table.
    pub fn random(config: EncoderConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        let embedding = EmbeddingMatrix::random(vocab_size, config.emb_dim, rng);
        Self::new(config, embedding, rng)
    }

    /// All-zero model of the given shape, to be filled via
    /// [`DualEncoder::tensors_mut`].
    pub fn zeros(config: EncoderConfig, vocab_size: usize, trainable_embedding: bool) -> Self {
        let (e, h) = (config.emb_dim, config.hidden);
        let lstm = || LstmParams {
            w_input: Tensor::zeros(&[e, 4 * h]),
            w_hidden: Tensor::zeros(&[h, 4 * h]),
            bias: Tensor::zeros(&[1, 4 * h]),
        };
        let side = || SideParams {
            forward: lstm(),
            backward: lstm(),
        };
        Self {
            config,
            embedding: EmbeddingMatrix {
                table: Tensor::zeros(&[vocab_size, e]),
                trainable: trainable_embedding,
            },
            context: side(),
            response: side(),
        }
    }

    fn lstms(&self) -> [&LstmParams<F>; 4] {
        [
            &self.context.forward,
            &self.context.backward,
            &self.response.forward,
            &self.response.backward,
        ]
    }

    /// Every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.embedding.table];
        for l in self.lstms() {
            out.extend([&l.w_input, &l.w_hidden, &l.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embedding.table];
        for l in [
            &mut self.context.forward,
            &mut self.context.backward,
            &mut self.response.forward,
            &mut self.response.backward,
        ] {
            out.extend([&mut l.w_input, &mut l.w_hidden, &mut l.bias]);
        }
        out
    }

    /// Trainable parameter count excluding the embedding table.
    pub fn recurrent_param_count(&self) -> usize {
        self.lstms()
            .iter()
            .map(|l| l.w_input.len() + l.w_hidden.len() + l.bias.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.recurrent_param_count() + self.embedding.table.len()
    }

    pub fn cast<G: Real>(&self) -> DualEncoder<G> {
        DualEncoder {
            config: self.config,
            embedding: self.embedding.cast(),
            context: self.context.cast(),
            response: self.response.cast(),
        }
    }

    /// Records every tensor as a leaf. With `track` off nothing takes a
    /// gradient; a frozen embedding never does.
    pub fn bind(&self, g: &mut Graph<F>, track: bool) -> BoundEncoder {
        let embedding = g.leaf(self.embedding.table.clone(), track && self.embedding.trainable);
        let mut bind_lstm = |l: &LstmParams<F>| BoundLstm {
            w_input: g.leaf(l.w_input.clone(), track),
            w_hidden: g.leaf(l.w_hidden.clone(), track),
            bias: g.leaf(l.bias.clone(), track),
        };
        let context = [bind_lstm(&self.context.forward), bind_lstm(&self.context.backward)];
        let response = [bind_lstm(&self.response.forward), bind_lstm(&self.response.backward)];
        BoundEncoder {
            embedding,
            context,
            response,
        }
    }

    pub fn encode(&self, seq: &TokenIdSequence, side: Side) -> Result<ThoughtVector<F>, EncoderError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = encode_single(&mut g, &bound, seq, side, self.config.max_len)?;
        Ok(ThoughtVector(g.value(out).data().to_vec()))
    }

    /// Same result as calling [`DualEncoder::encode`] per item, computed on
    /// padded batches.
    pub fn encode_batch(&self, seqs: &[TokenIdSequence], side: Side) -> Result<Vec<ThoughtVector<F>>, EncoderError> {
        if seqs.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let refs: Vec<&TokenIdSequence> = chunk.iter().collect();
            let pooled = encode_batch(&mut g, &bound, &refs, side, self.config.max_len)?;
            let v = g.value(pooled);
            out.extend((0..v.rows()).map(|r| ThoughtVector(v.row(r).to_vec())));
        }
        Ok(out)
    }
}

/// One LSTM cell update for a batch: `x` is `B×E`, `h` and `c` are `B×h`,
/// `ones` is a `B×1` column of ones used to add the bias row.
pub fn recurrent_step<F: Real>(
    g: &mut Graph<F>,
    params: &BoundLstm,
    x: Var,
    h: Var,
    c: Var,
    ones: Var,
) -> Result<(Var, Var), EncoderError> {
    let hidden = g.value(params.w_hidden).rows();
    let xw = g.matmul(x, params.w_input)?;
    let hw = g.matmul(h, params.w_hidden)?;
    let b = g.matmul(ones, params.bias)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add(pre, b)?;
    let i = g.narrow_cols(pre, 0, hidden)?;
    let f = g.narrow_cols(pre, hidden, hidden)?;
    let cand = g.narrow_cols(pre, 2 * hidden, hidden)?;
    let o = g.narrow_cols(pre, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs one direction over time-major id columns and returns the hidden
/// state of every step.
fn run_direction<F: Real>(
    g: &mut Graph<F>,
    embedding: Var,
    params: &BoundLstm,
    steps: &[Vec<usize>],
) -> Result<Vec<Var>, EncoderError> {
    let batch = steps[0].len();
    let hidden = g.value(params.w_hidden).rows();
    let ones = g.constant(Tensor::filled(&[batch, 1], F::one()));
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut out = Vec::with_capacity(steps.len());
    for ids in steps {
        let x = g.gather_rows(embedding, ids)?;
        let (h2, c2) = recurrent_step(g, params, x, h, c, ones)?;
        h = h2;
        c = c2;
        out.push(h);
    }
    Ok(out)
}

fn check_len(seq: &TokenIdSequence, max_len: usize) -> Result<(), EncoderError> {
    if seq.len() > max_len {
        return Err(EncoderError::SequenceTooLong {
            len: seq.len(),
            max_len,
        });
    }
    Ok(())
}

/// Unbatched encoding: both directions, per-position hidden pairs stacked
/// into a `T × 2h` matrix, then max over time. Returns a `[2h]` vector.
pub fn encode_single<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    seq: &TokenIdSequence,
    side: Side,
    max_len: usize,
) -> Result<Var, EncoderError> {
    check_len(seq, max_len)?;
    let ids: Vec<usize> = seq.ids().iter().map(|&i| i as usize).collect();
    let t_len = ids.len();
    let fwd_steps: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i]).collect();
    let bwd_steps: Vec<Vec<usize>> = ids.iter().rev().map(|&i| vec![i]).collect();
    let [fwd, bwd] = bound.side(side);
    let hf = run_direction(g, bound.embedding, fwd, &fwd_steps)?;
    let hb = run_direction(g, bound.embedding, bwd, &bwd_steps)?;
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        rows.push(g.concat_cols(&[hf[t], hb[t_len - 1 - t]])?);
    }
    let stacked = g.stack_rows(&rows)?;
    Ok(g.max_over_time(stacked)?)
}

/// Batched encoding of mixed-length sequences, returning `B × 2h`.
///
/// Sequences are left-aligned and padded; the backward direction runs over
/// each sequence reversed on its own, so padding only ever follows real
/// tokens. Padded steps are excluded from the max-pool.
pub fn encode_batch<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundEncoder,
    seqs: &[&TokenIdSequence],
    side: Side,
    max_len: usize,
) -> Result<Var, EncoderError> {
    if seqs.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    for s in seqs {
        check_len(s, max_len)?;
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let t_max = *lengths.iter().max().expect("nonempty batch");
    let column = |t: usize, reversed: bool| -> Vec<usize> {
        seqs.iter()
            .map(|s| {
                let ids = s.ids();
                match (t < ids.len(), reversed) {
                    (false, _) => crate::text::PAD as usize,
                    (true, false) => ids[t] as usize,
                    (true, true) => ids[ids.len() - 1 - t] as usize,
                }
            })
            .collect()
    };
    let fwd_steps: Vec<Vec<usize>> = (0..t_max).map(|t| column(t, false)).collect();
    let bwd_steps: Vec<Vec<usize>> = (0..t_max).map(|t| column(t, true)).collect();
    let [fwd, bwd] = bound.side(side);
    let hf = run_direction(g, bound.embedding, fwd, &fwd_steps)?;
    let hb = run_direction(g, bound.embedding, bwd, &bwd_steps)?;
    let pf = g.masked_step_max(&hf, &lengths)?;
    let pb = g.masked_step_max(&hb, &lengths)?;
    Ok(g.concat_cols(&[pf, pb])?)
}
