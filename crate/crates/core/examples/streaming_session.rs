//! Drives a streaming session by hand: read `k` tokens, then alternate one
//! write and one read. Each read extends the encoder cache by one state; no
//! earlier state is recomputed.

use waitk::decode::{default_max_len, select_token, streaming_decode};
use waitk::model::StreamingSession;
use waitk::vocab::{BOS, EOS};
use waitk::{ModelConfig, Seq2Seq, Variant};

fn main() -> waitk::Result<()> {
    let model = Seq2Seq::new(ModelConfig::default(), Variant::Incremental, 7)?;
    let src = [5, 9, 12, 4, 30, 17];
    let k = 2;

    let mut session = StreamingSession::new(&model);
    let mut prev = BOS;
    let mut out = Vec::new();
    for step in 0..default_max_len(src.len()) {
        let need = (k + step).min(src.len());
        while session.read_count() < need {
            let tok = src[session.read_count()];
            let state = session.read(tok)?.expect("incremental encoder returns its state");
            println!(
                "read  {tok:>3}  |z| = {:.3}",
                state.iter().map(|x| x * x).sum::<f64>().sqrt()
            );
        }
        let token = select_token(&session.write(prev)?, need == src.len());
        if token == EOS {
            break;
        }
        println!("write {token:>3}  (source read: {need})");
        out.push(token);
        prev = token;
    }

    let reference = streaming_decode(&model, &src, k, default_max_len(src.len()))?;
    assert_eq!(reference.tokens, out);
    println!("visible source per write: {:?}", session.access_log());
    Ok(())
}
