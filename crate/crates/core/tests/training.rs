use std::io::Write as _;

use waitk::model::{checkpoint, PaddedBatch};
use waitk::training::{generate_synthetic, load_corpus, SyntheticTaskSpec, TaskKind, TrainConfig, TrainMode, Trainer};
use waitk::vocab::{FILLER, RESERVED};
use waitk::{Error, ModelConfig};

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        src_vocab: 16,
        tgt_vocab: 16,
        max_len: 24,
        k: 2,
    }
}

fn copy_data(n: usize) -> Vec<waitk::training::ParallelExample> {
    let spec = SyntheticTaskSpec {
        vocab_size: 16,
        min_len: 3,
        max_len: 6,
        ..Default::default()
    };
    generate_synthetic(&spec, n).unwrap()
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        teacher_steps: steps,
        batch_size: 8,
        k: 2,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let data = copy_data(64);
    let run = || {
        let mut t = Trainer::new(small(), cfg(5)).unwrap();
        let log = t.fit(&data, |_| {}).unwrap();
        (log, checkpoint::to_bytes(&t.student), checkpoint::to_bytes(&t.teacher))
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_falls_over_the_first_steps() {
    let data = copy_data(64);
    let mut t = Trainer::new(small(), cfg(10)).unwrap();
    let log = t.fit(&data, |_| {}).unwrap();
    let first = log[0].loss_student + log[0].loss_teacher;
    let last = log[9].loss_student + log[9].loss_teacher;
    assert!(last < first, "{first} -> {last}");
    assert!(log.iter().all(|m| m.grad_norm.is_finite()));
}

#[test]
fn frozen_teacher_does_not_move() {
    let data = copy_data(32);
    let mut t = Trainer::new(small(), cfg(3)).unwrap();
    let before = checkpoint::to_bytes(&t.teacher);
    let pairs: Vec<_> = data[..8].iter().map(|e| (e.src.clone(), e.tgt.clone())).collect();
    let batch = PaddedBatch::new(&pairs).unwrap();
    for _ in 0..3 {
        let m = t.train_step(&batch, true).unwrap();
        assert!(m.loss_teacher > 0.0);
    }
    assert_eq!(checkpoint::to_bytes(&t.teacher), before);
}

#[test]
fn pretrain_mode_runs_teacher_phase_first() {
    let data = copy_data(32);
    let mut c = cfg(2);
    c.mode = TrainMode::PretrainFixedTeacher;
    c.teacher_steps = 3;
    let mut t = Trainer::new(small(), c).unwrap();
    let log = t.fit(&data, |_| {}).unwrap();
    assert_eq!(log.len(), 5);
    assert!(log[..3].iter().all(|m| m.loss_student == 0.0));
    assert!(log[3..].iter().all(|m| m.loss_student > 0.0));
}

#[test]
fn zero_lambda_leaves_the_distance_unoptimised() {
    // With λ = 0 the distance is still reported but carries no gradient.
    let data = copy_data(32);
    let mut c = cfg(1);
    c.lambda = 0.0;
    let t = Trainer::new(small(), c).unwrap();
    let pairs: Vec<_> = data[..4].iter().map(|e| (e.src.clone(), e.tgt.clone())).collect();
    let batch = PaddedBatch::new(&pairs).unwrap();
    let (with_zero, _) = t.objective(&batch).unwrap();
    let mut c = cfg(1);
    c.lambda = 0.5;
    let t2 = Trainer::new(small(), c).unwrap();
    let (with_half, _) = t2.objective(&batch).unwrap();
    assert!(with_half > with_zero);
}

#[test]
fn synthetic_tokens_are_close_to_uniform() {
    for p in [0.0, 0.9] {
        let spec = SyntheticTaskSpec {
            vocab_size: 12,
            min_len: 10,
            max_len: 10,
            successor_prob: p,
            seed: 3,
            ..Default::default()
        };
        let data = generate_synthetic(&spec, 10_000).unwrap();
        let mut counts = vec![0usize; 12];
        for ex in &data {
            for &t in &ex.src {
                counts[t] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / (12 - RESERVED) as f64;
        for &c in &counts[RESERVED..] {
            assert!((c as f64 - expected).abs() / expected < 0.05, "p={p}: {counts:?}");
        }
        assert!(counts[..RESERVED].iter().all(|&c| c == 0));
    }
}

#[test]
fn held_out_sets_share_the_successor_table() {
    let spec = SyntheticTaskSpec {
        successor_prob: 1.0,
        min_len: 2,
        max_len: 2,
        ..Default::default()
    };
    let next = |seed| {
        let data = generate_synthetic(&SyntheticTaskSpec { seed, ..spec.clone() }, 200).unwrap();
        let mut table = vec![0; 32];
        for ex in data {
            table[ex.src[0]] = ex.src[1];
        }
        table
    };
    assert_eq!(next(1), next(777));
    let other = SyntheticTaskSpec {
        map_seed: 5,
        ..spec.clone()
    };
    let a = generate_synthetic(&spec, 50).unwrap();
    let b = generate_synthetic(&other, 50).unwrap();
    assert_ne!(a, b);
}

#[test]
fn lagged_map_targets_follow_the_source() {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::LaggedMap,
        lag: 2,
        ..Default::default()
    };
    for ex in generate_synthetic(&spec, 100).unwrap() {
        let n = ex.src.len();
        for (i, &t) in ex.tgt.iter().enumerate() {
            if i + 2 < n {
                assert_eq!(t, ex.src[i + 2]);
            } else {
                assert_eq!(t, FILLER);
            }
        }
    }
}

#[test]
fn corpus_loading_builds_frequency_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
    std::fs::File::create(&s).unwrap().write_all(b"a b a\n\nc a\n").unwrap();
    std::fs::File::create(&t).unwrap().write_all(b"x y\nz\ny\n").unwrap();
    let c = load_corpus(&s, &t).unwrap();
    assert_eq!(c.skipped, 1);
    assert_eq!(c.examples.len(), 2);
    assert_eq!(c.src_vocab.id("a"), RESERVED);
    assert_eq!(c.examples[0].src, vec![RESERVED, RESERVED + 1, RESERVED]);
    assert_eq!(c.tgt_vocab.id("y"), RESERVED);

    std::fs::File::create(&t).unwrap().write_all(b"x\n").unwrap();
    assert!(matches!(load_corpus(&s, &t), Err(Error::Ingestion(_))));
    assert!(matches!(
        load_corpus(&dir.path().join("missing"), &t),
        Err(Error::Io { .. })
    ));
}

#[test]
fn checkpoint_file_round_trip() {
    let data = copy_data(16);
    let mut t = Trainer::new(small(), cfg(2)).unwrap();
    t.fit(&data, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    checkpoint::save(&t.student, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), checkpoint::to_bytes(&t.student));
    assert_eq!(back.variant, t.student.variant);
}
