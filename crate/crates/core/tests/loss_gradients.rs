//! Finite-difference check of the full training loss: both encoders,
//! cosine score matrix and triplet hinge, over every model tensor.

use echoless::encoder::{BoundEncoder, DualEncoder, EncoderConfig};
use echoless::numerics::{grad_check, Graph, Tensor};
use echoless::text::TokenIdSequence;
use echoless::training::{score_matrix, triplet_batch_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 7;
const MAX_LEN: usize = 3;
const MARGIN: f64 = 0.5;

fn config() -> EncoderConfig {
    EncoderConfig {
        emb_dim: 8,
        hidden: 4,
        max_len: MAX_LEN,
    }
}

fn random_seq(rng: &mut impl Rng) -> TokenIdSequence {
    let len = rng.gen_range(1..=MAX_LEN);
    TokenIdSequence::new((0..len).map(|_| rng.gen_range(1..VOCAB as u32)).collect()).unwrap()
}

struct Point {
    tensors: Vec<Tensor<f64>>,
    contexts: Vec<TokenIdSequence>,
    candidates: Vec<TokenIdSequence>,
    triples: Vec<(usize, usize, usize)>,
}

impl Point {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DualEncoder::<f64>::random(config(), VOCAB, &mut rng).unwrap();
        let batch = 3;
        let contexts: Vec<_> = (0..batch).map(|_| random_seq(&mut rng)).collect();
        let responses: Vec<_> = (0..batch).map(|_| random_seq(&mut rng)).collect();
        // Responses first, then the same contexts on the response side.
        let candidates: Vec<_> = responses.iter().chain(&contexts).cloned().collect();
        let triples = (0..batch)
            .map(|i| {
                let neg = loop {
                    let j = rng.gen_range(0..2 * batch);
                    if j != i {
                        break j;
                    }
                };
                (i, i, neg)
            })
            .collect();
        Self {
            tensors: model.tensors().into_iter().cloned().collect(),
            contexts,
            candidates,
            triples,
        }
    }

    fn loss(&self, g: &mut Graph<f64>, bound: &BoundEncoder) -> echoless::numerics::Var {
        let c: Vec<&TokenIdSequence> = self.contexts.iter().collect();
        let r: Vec<&TokenIdSequence> = self.candidates.iter().collect();
        let scores = score_matrix(g, bound, &c, &r, MAX_LEN).unwrap();
        triplet_batch_loss(g, scores, &self.triples, MARGIN).unwrap()
    }

    /// Smallest distance of any hinge argument from the relu kink.
    fn kink_distance(&self) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<_> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let bound = BoundEncoder::from_vars(&vars).unwrap();
        let c: Vec<&TokenIdSequence> = self.contexts.iter().collect();
        let r: Vec<&TokenIdSequence> = self.candidates.iter().collect();
        let scores = score_matrix(&mut g, &bound, &c, &r, MAX_LEN).unwrap();
        let s = g.value(scores);
        self.triples
            .iter()
            .map(|&(i, p, n)| (s.at(i, n) - s.at(i, p) + MARGIN).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

#[test]
fn composite_loss_gradients_match_finite_differences() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 10 {
        seed += 1;
        let point = Point::random(seed);
        if point.kink_distance() < 1e-3 {
            continue;
        }
        let err = grad_check(
            |g, vars| {
                let bound = BoundEncoder::from_vars(vars).unwrap();
                Ok(point.loss(g, &bound))
            },
            &point.tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        checked += 1;
    }
}

#[test]
fn loss_is_zero_when_every_negative_is_far_below() {
    let point = Point::random(3);
    let mut g = Graph::new();
    let vars: Vec<_> = point.tensors.iter().map(|t| g.param(t.clone())).collect();
    let bound = BoundEncoder::from_vars(&vars).unwrap();
    let c: Vec<&TokenIdSequence> = point.contexts.iter().collect();
    let r: Vec<&TokenIdSequence> = point.candidates.iter().collect();
    let scores = score_matrix(&mut g, &bound, &c, &r, MAX_LEN).unwrap();
    let loss = triplet_batch_loss(&mut g, scores, &point.triples, -2.0).unwrap();
    assert_eq!(g.value(loss).data()[0], 0.0);
    let grads = g.backward(loss).unwrap();
    for v in vars {
        assert!(grads.get(v).data().iter().all(|&x| x == 0.0));
    }
}
