//! Trains copy-task students at k ∈ {1, 3, 5} and decodes each under every
//! test k.
//!
//! `cargo run --release --example k_matrix [steps]`

use waitk::eval::k_matrix;
use waitk::training::{generate_synthetic, SyntheticTaskSpec, TrainConfig, Trainer};
use waitk::{ModelConfig, Seq2Seq};

fn main() -> waitk::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let spec = SyntheticTaskSpec::default();
    let train = generate_synthetic(&spec, 4000)?;
    let test = generate_synthetic(&SyntheticTaskSpec { seed: 777, ..spec }, 100)?;
    let ks = [1, 3, 5];
    let mut students = Vec::new();
    for k in ks {
        let cfg = TrainConfig {
            max_steps: steps,
            teacher_steps: steps,
            k,
            ..Default::default()
        };
        let mut t = Trainer::new(
            ModelConfig {
                k,
                ..ModelConfig::default()
            },
            cfg,
        )?;
        t.fit(&train, |_| {})?;
        students.push(t.student);
    }
    let refs: Vec<(usize, &Seq2Seq)> = ks.iter().copied().zip(students.iter()).collect();
    let m = k_matrix(&refs, &ks, &test)?;
    print!("{}", m.to_csv());
    println!(
        "every column peaks at train k ≥ test k: {}",
        m.columns_peak_at_or_above_diagonal()
    );
    Ok(())
}
