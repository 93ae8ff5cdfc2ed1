use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waitk::waitk::WaitKSchedule;
use waitk::{Error, ModelConfig, Seq2Seq, Tensor, Variant};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 4,
        d_ff: 24,
        src_vocab: 24,
        tgt_vocab: 22,
        max_len: 40,
        k: 2,
    }
}

fn sentence(rng: &mut ChaCha8Rng, max: usize) -> Vec<usize> {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| rng.gen_range(4..24)).collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unidirectional_prefixes_are_stable(src in prop::collection::vec(4usize..24, 1..=16), seed in 0u64..4) {
        let model = Seq2Seq::new(config(), Variant::Incremental, seed).unwrap();
        let full = model.encode_unidirectional(&src).unwrap();
        for p in 1..=src.len() {
            let part = model.encode_unidirectional(&src[..p]).unwrap();
            prop_assert_eq!(part.z.values(), &full.z.values()[..p * 16]);
        }
    }

    #[test]
    fn ael_is_zero_above_the_diagonal(src in prop::collection::vec(4usize..24, 1..=10)) {
        let model = Seq2Seq::new(config(), Variant::Incremental, 9).unwrap();
        let e = model.source_embeddings(&src).unwrap();
        let z = model.encode_unidirectional(&src).unwrap().z;
        let h = model.ael_forward(&e, &z).unwrap();
        let n = src.len();
        for i in 1..=n {
            for j in i..n {
                prop_assert!(h.state(i, j).iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn ael_matches_a_sequential_running_mean() {
    let model = Seq2Seq::new(config(), Variant::Incremental, 1).unwrap();
    let w = model.params.get(model.ael_weight().unwrap()).clone();
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [1, 2, 7, 33, 64] {
        let e = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let z = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let mut cfg_model = model.clone();
        cfg_model.config.max_len = 64;
        let h = cfg_model.ael_forward(&e, &z).unwrap();
        let mut sum = vec![0.0; d];
        for i in 1..=n {
            for (s, x) in sum.iter_mut().zip(e.row(i - 1)) {
                *s += x;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / i as f64).collect();
            let f: Vec<f64> = (0..d)
                .map(|c| (0..d).map(|r| mean[r] * w.values()[r * d + c]).sum())
                .collect();
            for j in 0..i {
                let want: Vec<f64> = f.iter().zip(z.row(j)).map(|(a, b)| a + b).collect();
                assert!(max_gap(h.state(i, j), &want) <= 1e-12, "n={n} i={i} j={j}");
            }
        }
    }
}

#[test]
fn two_point_average() {
    let mut model = Seq2Seq::new(
        ModelConfig {
            d_model: 2,
            n_heads: 1,
            ..config()
        },
        Variant::Incremental,
        0,
    )
    .unwrap();
    let id = model.ael_weight().unwrap();
    model
        .params
        .get_mut(id)
        .values_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let e = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let z = Tensor::zeros(&[2, 2]);
    let h = model.ael_forward(&e, &z).unwrap();
    assert_eq!(h.state(2, 0), &[0.5, 0.5]);
    assert_eq!(h.state(2, 1), &[0.5, 0.5]);
    assert_eq!(h.state(1, 0), &[1.0, 0.0]);
}

#[test]
fn recompute_rows_equal_fresh_prefix_encodings() {
    let model = Seq2Seq::new(config(), Variant::Recompute, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let src = sentence(&mut rng, 12);
        let n = src.len();
        let k = rng.gen_range(1..=4);
        let steps = rng.gen_range(1..=n + 3);
        let schedule = WaitKSchedule::new(k, n).unwrap();
        let zs = model.encode_waitk_recompute(&src, &schedule, steps).unwrap();
        for t in 0..steps {
            let g = schedule.g0(t);
            let fresh = model.encode_bidirectional(&src[..g]).unwrap();
            let block = &zs.values()[t * n * 16..(t + 1) * n * 16];
            assert!(max_gap(&block[..g * 16], fresh.z.values()) <= 1e-12);
            assert!(block[g * 16..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn decode_step_matches_teacher_forced_batch() {
    let model = Seq2Seq::new(config(), Variant::Incremental, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let src = sentence(&mut rng, 10);
        let tgt: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(4..22)).collect();
        let k = rng.gen_range(1..=4);
        let (logits, _) = model.forward_single(&src, &tgt, k).unwrap();
        let z = model.encode_unidirectional(&src).unwrap();
        let e = model.source_embeddings(&src).unwrap();
        let h = model.ael_forward(&e, &z.z).unwrap();
        let schedule = WaitKSchedule::new(k, src.len()).unwrap();
        for t in 0..=tgt.len() {
            let step = model.decode_step(&tgt[..t], &z, &h, &schedule.values(t + 1)).unwrap();
            assert_eq!(step.shape(), &[22]);
            assert!(step.is_finite());
            let gap = max_gap(step.values(), logits.row(t));
            assert!(gap <= 1e-12, "t={t} k={k} n={} gap={gap:e}", src.len());
        }
    }
}

#[test]
fn zero_ael_weight_reduces_to_plain_encoder_states() {
    let mut model = Seq2Seq::new(config(), Variant::Incremental, 6).unwrap();
    let id = model.ael_weight().unwrap();
    model.params.get_mut(id).values_mut().fill(0.0);
    let src = vec![5, 9, 11, 4, 20];
    let z = model.encode_unidirectional(&src).unwrap();
    let h = model
        .ael_forward(&model.source_embeddings(&src).unwrap(), &z.z)
        .unwrap();
    let mut plain = model.clone();
    plain.variant = Variant::Offline;
    for prefix in [&[][..], &[7, 8][..]] {
        let reads = vec![src.len(); prefix.len() + 1];
        let with_ael = model.decode_step(prefix, &z, &h, &reads).unwrap();
        let without = plain.decode_step(prefix, &z, &h, &reads).unwrap();
        assert!(max_gap(with_ael.values(), without.values()) <= 1e-12);
    }
}

#[test]
fn decode_step_rejects_out_of_range_visibility() {
    let model = Seq2Seq::new(config(), Variant::Incremental, 0).unwrap();
    let src = vec![4, 5, 6];
    let z = model.encode_unidirectional(&src).unwrap();
    let h = model
        .ael_forward(&model.source_embeddings(&src).unwrap(), &z.z)
        .unwrap();
    for reads in [&[0][..], &[4], &[1, 2], &[3, 2]] {
        let prefix = vec![5; reads.len() - 1];
        let prefix = if reads.len() == 2 && reads[0] == 1 {
            vec![]
        } else {
            prefix
        };
        assert!(
            matches!(model.decode_step(&prefix, &z, &h, reads), Err(Error::Schedule(_))),
            "{reads:?}"
        );
    }
}

#[test]
fn student_logits_are_finite_on_random_inputs() {
    let model = Seq2Seq::new(config(), Variant::Incremental, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let src = sentence(&mut rng, 16);
        let tgt: Vec<usize> = sentence(&mut rng, 16).into_iter().map(|t| t % 22).collect();
        let k = rng.gen_range(1..=20);
        let schedule = WaitKSchedule::new(k, src.len()).unwrap();
        let (logits, z) = model.forward_student(&src, &tgt, &schedule).unwrap();
        assert!(logits.is_finite());
        assert_eq!(z.z.shape(), &[src.len(), 16]);
    }
}

#[test]
fn teacher_forward_is_deterministic() {
    let a = Seq2Seq::new(config(), Variant::Offline, 21).unwrap();
    let b = Seq2Seq::new(config(), Variant::Offline, 21).unwrap();
    let (la, za) = a.forward_teacher(&[4, 5, 6], &[7, 8]).unwrap();
    let (lb, zb) = b.forward_teacher(&[4, 5, 6], &[7, 8]).unwrap();
    assert_eq!(la, lb);
    assert_eq!(za.z.shape(), &[3, 16]);
    assert_eq!(za, zb);
}

#[test]
fn wait_all_student_sees_the_whole_source() {
    // With k ≥ n every step attends to the full source, so the logits are
    // the same for every k beyond the length.
    let model = Seq2Seq::new(config(), Variant::Incremental, 4).unwrap();
    let src = vec![4, 9, 13];
    let tgt = vec![5, 6, 7, 8];
    let a = model.forward_single(&src, &tgt, 3).unwrap().0;
    let b = model.forward_single(&src, &tgt, 17).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn too_long_and_out_of_vocabulary_inputs_are_rejected() {
    let model = Seq2Seq::new(config(), Variant::Offline, 0).unwrap();
    assert!(matches!(
        model.encode_bidirectional(&vec![4; 41]),
        Err(Error::Length { .. })
    ));
    assert!(matches!(model.encode_bidirectional(&[4, 99]), Err(Error::Index { .. })));
    assert!(matches!(model.encode_bidirectional(&[]), Err(Error::Contract(_))));
}
