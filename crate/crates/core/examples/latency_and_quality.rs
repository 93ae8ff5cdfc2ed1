//! Average Lagging of a few hand-written read/write traces, and BLEU of a
//! small corpus.

use waitk::eval::{corpus_bleu, sentence_bleu};
use waitk::waitk::{average_lagging, DecodeTrace, WaitKSchedule};

fn trace(n: usize, reads: &[usize]) -> DecodeTrace {
    let mut t = DecodeTrace::new(n);
    for (i, &g) in reads.iter().enumerate() {
        t.push(i, g);
    }
    t
}

fn main() -> waitk::Result<()> {
    for k in [1, 2, 4] {
        let reads = WaitKSchedule::new(k, 6)?.values(6);
        let al = average_lagging(&trace(6, &reads));
        println!("wait-{k}  reads {reads:?}  AL {:.2}", al.value);
    }
    let al = average_lagging(&trace(6, &[6; 6]));
    println!("wait-all                    AL {:.2}", al.value);
    let al = average_lagging(&trace(6, &[1, 2]));
    println!("stopped early (truncated={}) AL {:.2}", al.truncated, al.value);

    let hyp = vec![vec!["the", "cat", "sat", "on", "the", "mat"], vec!["a", "dog", "ran"]];
    let refs = vec![
        vec![vec!["the", "cat", "sat", "on", "the", "mat"]],
        vec![vec!["a", "dog", "ran", "home"]],
    ];
    println!("corpus BLEU {:.2}", corpus_bleu(&hyp, &refs)?);
    println!("self BLEU {:.2}", sentence_bleu(&hyp[0], &refs[0]));
    Ok(())
}
