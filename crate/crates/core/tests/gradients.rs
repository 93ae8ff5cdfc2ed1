use waitk::gradcheck::{check_case, check_composite_loss, primitive_suite};
use waitk::ModelConfig;

const STEP: f64 = 1e-5;

#[test]
fn every_primitive_matches_central_differences() {
    let mut failed = Vec::new();
    for case in primitive_suite() {
        let r = check_case(&case, STEP, 1e-4).unwrap();
        if !r.passed() {
            failed.push(format!("{} {} max rel {:.2e}", r.op, r.shape, r.max_rel_err));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        src_vocab: 10,
        tgt_vocab: 11,
        max_len: 16,
        k: 2,
    }
}

#[test]
fn joint_objective_gradient_over_random_parameters() {
    let pairs = vec![(vec![4, 5, 6, 7], vec![8, 9, 4]), (vec![9, 4], vec![5, 6, 7, 10])];
    let r = check_composite_loss(&tiny(), &pairs, 2, 10, 3, STEP, 1e-3).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn joint_objective_gradient_at_three_shapes() {
    let shapes: [(usize, Vec<(Vec<usize>, Vec<usize>)>); 3] = [
        (1, vec![(vec![4], vec![5])]),
        (2, vec![(vec![4, 5, 6], vec![7, 8, 9])]),
        (3, vec![(vec![4, 5, 6, 7, 8], vec![9]), (vec![6], vec![4, 5, 6, 7])]),
    ];
    for (k, pairs) in shapes {
        let r = check_composite_loss(&tiny(), &pairs, k, 2, k as u64, STEP, 1e-4).unwrap();
        assert!(r.passed(), "k={k}: {r:?}");
    }
}
