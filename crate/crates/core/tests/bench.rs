use waitk::bench::{bench_forward, scaling_sweep, to_csv, BenchSpec, BenchVariant};

fn spec(n: usize, t: usize, k: usize) -> BenchSpec {
    let mut s = BenchSpec::standard(n, k);
    s.model.d_model = 16;
    s.model.d_ff = 32;
    s.t = t;
    s.model.max_len = n.max(t) + 8;
    s
}

#[test]
fn incremental_encoder_cost_ignores_decode_length() {
    let short = bench_forward(BenchVariant::IncrementalAel, &spec(12, 12, 1)).unwrap();
    let long = bench_forward(BenchVariant::IncrementalAel, &spec(12, 24, 1)).unwrap();
    assert_eq!(short.encoder_macs, long.encoder_macs);
    assert!(long.mac_count > short.mac_count);
}

#[test]
fn baseline_cost_grows_at_least_linearly_in_steps() {
    let macs: Vec<u64> = [8, 16, 32, 64]
        .iter()
        .map(|&t| {
            bench_forward(BenchVariant::BaselineBi, &spec(t, t, 1))
                .unwrap()
                .mac_count
        })
        .collect();
    for w in macs.windows(2) {
        assert!(w[1] >= 2 * w[0], "{macs:?}");
    }
}

#[test]
fn separation_widens_with_length() {
    let rows = scaling_sweep(&spec(8, 8, 1), &[8, 32], &[1]).unwrap();
    let ratio = |base: usize| {
        (
            rows[base].encoder_macs as f64 / rows[base + 1].encoder_macs as f64,
            rows[base].median_secs / rows[base + 1].median_secs,
        )
    };
    let (mac8, time8) = ratio(0);
    let (mac32, time32) = ratio(3);
    assert!(mac32 > mac8, "{mac8} {mac32}");
    assert!(time32 > time8, "{time8} {time32}");
}

#[test]
fn sweep_csv_has_a_row_per_variant_and_setting() {
    let rows = scaling_sweep(&spec(4, 4, 1), &[4, 6], &[1, 2]).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 3);
    let csv = to_csv(&rows);
    assert_eq!(csv.lines().count(), 13);
    assert!(csv.starts_with("variant,n,T,k,median_secs,mac_count\n"));
    assert!(rows.iter().all(|r| r.median_secs > 0.0 && r.mac_count > 0));
}
