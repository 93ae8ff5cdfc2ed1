//! Trains a wait-3 student (with its offline teacher) on the synthetic copy
//! task, reports BLEU and Average Lagging on held-out data and round-trips
//! the checkpoint.
//!
//! `cargo run --release --example copy_task [steps]`

use waitk::eval::evaluate_model;
use waitk::model::checkpoint;
use waitk::training::{generate_synthetic, SyntheticTaskSpec, TrainConfig, Trainer};
use waitk::ModelConfig;

fn main() -> waitk::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let spec = SyntheticTaskSpec::default();
    let train = generate_synthetic(&spec, 4000)?;
    let test = generate_synthetic(&SyntheticTaskSpec { seed: 777, ..spec }, 200)?;

    let cfg = TrainConfig {
        max_steps: steps,
        teacher_steps: steps,
        k: 3,
        ..Default::default()
    };
    let mut trainer = Trainer::new(ModelConfig::default(), cfg)?;
    trainer.fit(&train, |m| {
        if m.step % 250 == 0 {
            println!(
                "step {:>5}  student {:.4}  teacher {:.4}  distill {:.4}",
                m.step, m.loss_student, m.loss_teacher, m.loss_distill
            );
        }
    })?;

    let report = evaluate_model(&trainer.student, &test, 3)?.report;
    println!(
        "BLEU {:.2}  AL {:.3}  truncated {}",
        report.corpus_bleu, report.mean_al, report.truncated
    );

    let bytes = checkpoint::to_bytes(&trainer.student);
    let back = checkpoint::from_bytes(&bytes)?;
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    println!("checkpoint: {} bytes, reload is bit-identical", bytes.len());
    Ok(())
}
