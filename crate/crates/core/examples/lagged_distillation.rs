//! Lagged-map task (`y_i = x_{i+2}`) decoded at wait-1: two of every
//! target token's sources are unread when it is written. Compares the
//! student trained without and with the hidden-state distillation term.
//!
//! `cargo run --release --example lagged_distillation [steps] [seed]`

use waitk::eval::{evaluate_model, hidden_distance_stats};
use waitk::training::{generate_synthetic, SyntheticTaskSpec, TaskKind, TrainConfig, Trainer};
use waitk::ModelConfig;

fn main() -> waitk::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SyntheticTaskSpec {
        kind: TaskKind::LaggedMap,
        lag: 2,
        successor_prob: 0.9,
        seed: 1,
        ..Default::default()
    };
    let train = generate_synthetic(&spec, 4000)?;
    let test = generate_synthetic(&SyntheticTaskSpec { seed: 777, ..spec }, 200)?;

    for lambda in [0.0, 0.1] {
        let cfg = TrainConfig {
            max_steps: steps,
            teacher_steps: steps,
            k: 1,
            lambda,
            seed,
            ..Default::default()
        };
        let mut t = Trainer::new(
            ModelConfig {
                k: 1,
                ..ModelConfig::default()
            },
            cfg,
        )?;
        t.fit(&train, |_| {})?;
        let r = evaluate_model(&t.student, &test, 1)?.report;
        let dist = hidden_distance_stats(&t.student, &t.teacher, &test)?;
        println!(
            "λ={lambda:<4} BLEU {:6.2}  absent 1-gram {:.4}  present 1-gram {:.4}  student–teacher L2 {:.4}",
            r.corpus_bleu,
            r.absent_1gram.unwrap_or(f64::NAN),
            r.present_1gram.unwrap_or(f64::NAN),
            dist
        );
    }
    Ok(())
}
