use latmap_core::checkpoint::Checkpoint;
use latmap_core::data::{encode_idx, parse_idx, BatchIterator};
use latmap_core::metrics::{hungarian, sliced_w2, wasserstein_1d};
use latmap_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_bytes_round_trip(a in matrix(1..5, 1..5), b in matrix(1..4, 1..6), step in 0u64..1_000_000) {
        let mut ck = Checkpoint::new();
        ck.insert("a", a.cast());
        ck.insert("b.weight", b.cast());
        ck.set_meta("step", step);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&ck));
        prop_assert_eq!(back.meta_parse::<u64>("step").unwrap(), step);
    }

    #[test]
    fn truncated_checkpoint_is_rejected(a in matrix(1..5, 1..5), cut in 1usize..4) {
        let mut ck = Checkpoint::new();
        ck.insert("a", a.cast());
        let bytes = ck.to_bytes();
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn batch_norm_output_is_standardized(x in matrix(2..40, 1..4)) {
        // keep columns away from constant so 1/(var+eps) stays well conditioned
        let var = x.col_var();
        prop_assume!(var.data().iter().all(|&v| v > 0.5));
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let z = tape.batch_norm(v, 1e-5).unwrap();
        let z = tape.value(z);
        for &m in z.col_mean().data() {
            prop_assert!(m.abs() < 1e-12);
        }
        for (&zv, &xv) in z.col_var().data().iter().zip(var.data()) {
            prop_assert!((zv - xv / (xv + 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn hungarian_matches_brute_force(n in 1usize..6, seed in any::<u64>()) {
        let mut s = seed | 1;
        let cost: Vec<f64> = (0..n * n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 1000) as f64 / 10.0
            })
            .collect();
        let (assign, total) = hungarian(&cost, n).unwrap();
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((total - best).abs() < 1e-9);
        let mut seen = assign.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn sliced_w2_is_a_symmetric_discrepancy(a in matrix(8..9, 3..4), b in matrix(8..9, 3..4)) {
        let ab = sliced_w2(&a, &b, 16, 3).unwrap();
        let ba = sliced_w2(&b, &a, 16, 3).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert!(sliced_w2(&a, &a, 16, 3).unwrap() < 1e-12);
    }

    #[test]
    fn wasserstein_1d_ignores_order(mut a in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let b: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        a.reverse();
        prop_assert!((wasserstein_1d(&a, &b).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn idx_round_trip(rows in 1u32..6, h in 1u32..5, w in 1u32..5, seed in any::<u8>()) {
        let payload: Vec<u8> = (0..rows * h * w).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let t = parse_idx::<f32>(&encode_idx(&[rows, h, w], &payload)).unwrap();
        prop_assert_eq!(t.shape(), &[rows as usize, (h * w) as usize][..]);
        for (&v, &b) in t.data().iter().zip(&payload) {
            prop_assert_eq!(v, b as f32 / 255.0);
        }
    }

    #[test]
    fn every_epoch_is_a_permutation(n in 2usize..60, b in 1usize..20, seed in any::<u64>()) {
        prop_assume!(b <= n);
        let mut it = BatchIterator::new(n, b, seed).unwrap();
        let per = it.batches_per_epoch();
        prop_assert_eq!(per, n / b);
        for _ in 0..2 {
            let mut seen: Vec<usize> = (0..per).flat_map(|_| it.next_indices()).collect();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), per * b);
            prop_assert!(seen.iter().all(|&i| i < n));
        }
    }
}
