//! Trains a random-negative and a context-aware hard-negative model on the
//! synthetic corpus and prints both metric rows.

use echoless::encoder::{DualEncoder, EncoderConfig};
use echoless::eval::{evaluate_model, EvalSet, MetricsReport, Regime};
use echoless::mining::StrategyKind;
use echoless::synthetic::{synthetic_splits, SyntheticConfig};
use echoless::text::build_vocab;
use echoless::training::{fit, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let (train, valid, test) = synthetic_splits(seed, 1600, 200, 200, &SyntheticConfig::default());
    let vocab = build_vocab(&train, 1, None).unwrap();
    let test_set = EvalSet::new(&test, &vocab, 20).unwrap();
    println!("{}", MetricsReport::tsv_header());
    for strategy in [StrategyKind::Random, StrategyKind::HardResponsesContexts] {
        let config = TrainConfig {
            strategy,
            max_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DualEncoder::random(EncoderConfig::default(), vocab.len(), &mut rng).unwrap();
        let start = std::time::Instant::now();
        let out = fit(model, &vocab, &train, &valid, &config).unwrap();
        let own = out
            .epochs
            .iter()
            .map(|e| e.stats.own_context_fraction())
            .fold(0.0, f64::max);
        eprintln!(
            "{strategy}: {:?}, best step {}, val ap {:.4}, max own-context fraction {own:.3}",
            start.elapsed(),
            out.best_step,
            out.best.validation_ap
        );
        let regimes: &[Regime] = match strategy {
            StrategyKind::Random => &[Regime::Random, Regime::Baseline],
            _ => &[Regime::HardResponsesContexts],
        };
        for &regime in regimes {
            let report = evaluate_model(&out.best.model, &test_set, regime).unwrap();
            println!("{}", report.to_tsv_row());
        }
    }
}
