//! Forward cost of the per-prefix recompute baseline, the incremental
//! encoder and the offline model as the sentence grows.

use waitk::bench::{scaling_sweep, to_csv, BenchSpec};

fn main() -> waitk::Result<()> {
    let mut base = BenchSpec::standard(64, 1);
    base.trials = 5;
    let rows = scaling_sweep(&base, &[8, 16, 32, 64], &[1, 3])?;
    print!("{}", to_csv(&rows));
    println!();
    println!("{:>4} {:>2} {:>16} {:>16}", "n", "k", "encoder MACs ×", "time ×");
    for chunk in rows.chunks(3) {
        let (base, inc) = (&chunk[0], &chunk[1]);
        println!(
            "{:>4} {:>2} {:>16.1} {:>16.1}",
            base.n,
            base.k,
            base.encoder_macs as f64 / inc.encoder_macs as f64,
            base.median_secs / inc.median_secs
        );
    }
    Ok(())
}
