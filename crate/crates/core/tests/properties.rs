use proptest::prelude::*;
use waitk::eval::{corpus_bleu, present_absent_split, sentence_bleu, OneGramTally};
use waitk::tape::Graph;
use waitk::waitk::{average_lagging, build_masks, DecodeTrace, WaitKSchedule};

fn ideal_trace(k: usize, n: usize, m: usize) -> DecodeTrace {
    let schedule = WaitKSchedule::new(k, n).unwrap();
    let mut trace = DecodeTrace::new(n);
    for (t, g) in schedule.values(m).into_iter().enumerate() {
        trace.push(t, g);
    }
    trace
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in prop::collection::vec(-30.0f64..30.0, 36),
        drop in prop::collection::vec(any::<bool>(), 36),
    ) {
        let mut g = Graph::inference();
        let values = seed[..rows * cols].to_vec();
        let mut keep = drop[..rows * cols].to_vec();
        for r in 0..rows {
            keep[r * cols] = true;
        }
        let x = g.constant(&[rows, cols], values).unwrap();
        let p = g.masked_softmax(x, &keep).unwrap();
        let out = g.value(p);
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !keep[r * cols + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn lagging_of_the_ideal_schedule_is_k(k in 1usize..=9, n in 10usize..=20) {
        let al = average_lagging(&ideal_trace(k, n, n));
        prop_assert!((al.value - k as f64).abs() < 1e-9, "{}", al.value);
        prop_assert!(!al.truncated);
    }

    #[test]
    fn lagging_grows_with_k(n in 2usize..=20, m in 1usize..=30, k in 1usize..=10) {
        let lo = average_lagging(&ideal_trace(k, n, m)).value;
        let hi = average_lagging(&ideal_trace(k + 1, n, m)).value;
        prop_assert!(hi >= lo - 1e-12, "{lo} > {hi}");
    }

    #[test]
    fn masks_match_a_direct_loop(k in 1usize..8, n in 1usize..12, steps in 1usize..20) {
        let m = build_masks(&WaitKSchedule::new(k, n).unwrap(), steps).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(m.encoder_causal[i * n + j], j <= i);
            }
        }
        for t in 0..steps {
            let g = (k + t).min(n);
            for j in 0..n {
                prop_assert_eq!(m.cross_row(t)[j], j < g);
            }
            prop_assert_eq!(m.visible_count(t), g);
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(
        corpus in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)),
            1..8,
        ),
        rotate in 0usize..8,
    ) {
        let (c, r): (Vec<_>, Vec<_>) = corpus.iter().cloned().map(|(a, b)| (a, vec![b])).unzip();
        let base = corpus_bleu(&c, &r).unwrap();
        let mut pairs: Vec<_> = c.into_iter().zip(r).collect();
        let len = pairs.len();
        pairs.rotate_left(rotate % len);
        pairs.reverse();
        let (c2, r2): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        prop_assert!((corpus_bleu(&c2, &r2).unwrap() - base).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&base));
    }

    #[test]
    fn present_and_absent_partition_the_output(
        n in 1usize..15,
        k in 1usize..6,
        generated in 0usize..25,
        lag in 0usize..4,
    ) {
        let alignment: Vec<_> = (1..=n).map(|i| (i, (i + lag).min(n))).collect();
        let split = present_absent_split(Some(&alignment), generated, n, k).unwrap();
        let mut all: Vec<_> = split.present.iter().chain(&split.absent).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..generated).collect::<Vec<_>>());
        if lag < k {
            prop_assert!(split.absent.is_empty());
        }
    }
}

#[test]
fn bleu_extremes() {
    let s = vec![1, 2, 3, 4, 5];
    assert!((sentence_bleu(&s, &[s.clone()]) - 100.0).abs() < 1e-9);
    assert_eq!(sentence_bleu(&s, &[vec![6, 7, 8, 9]]), 0.0);
}

#[test]
fn missing_alignment_gives_no_split() {
    assert!(present_absent_split(None, 3, 3, 1).is_none());
    assert!(present_absent_split(Some(&[]), 3, 3, 1).is_none());
}

#[test]
fn one_gram_tally_clips_repeats() {
    let t = OneGramTally::of(&[1, 1, 1, 2], &[1, 2, 3]);
    assert_eq!(t.matched, 2);
    assert_eq!(t.score(), Some(0.5));
}
