//! The average embedding layer: after `i` reads, every encoder state
//! `z_j` (`j < i`) is shifted by the projected mean of the first `i` source
//! embeddings. States for unread positions stay zero.

use waitk::{ModelConfig, Seq2Seq, Variant};

fn main() -> waitk::Result<()> {
    let model = Seq2Seq::new(ModelConfig::default(), Variant::Incremental, 3)?;
    let src = [6, 11, 8, 20, 13];
    let e = model.source_embeddings(&src)?;
    let z = model.encode_unidirectional(&src)?.z;
    let h = model.ael_forward(&e, &z)?;

    println!("‖h(i, j) − z_j‖ after i reads (rows) for position j (columns):");
    for i in 1..=src.len() {
        let cells: Vec<String> = (0..src.len())
            .map(|j| {
                let shift: f64 = h
                    .state(i, j)
                    .iter()
                    .zip(z.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if j < i {
                    format!("{shift:7.3}")
                } else {
                    format!("{:>7}", "·")
                }
            })
            .collect();
        println!("i={i}  {}", cells.join(" "));
    }
    Ok(())
}
