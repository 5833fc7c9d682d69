use proptest::prelude::*;
use sormamba::analysis::bias_gap;
use sormamba::blocks::inverse_permutation;
use sormamba::data::{chronological_split, Normalizer, Split, SplitFamily};
use sormamba::objectives::{pearson_matrix, total_loss};
use sormamba::ssm::{naive_scan, selective_scan, Discretization, ScanInputs};
use sormamba::tensor::gather_axis;
use sormamba::{Tape, Tensor};

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        x in tensor(vec![4, 20], -1.0, 1.0),
        scale in 0.5f64..3.0,
        shift in -5.0f64..5.0,
    ) {
        let r = pearson_matrix(&x, 1e-8).unwrap();
        let mut y = x.clone();
        for v in &mut y.data_mut()[..20] {
            *v = *v * scale + shift;
        }
        let s = pearson_matrix(&y, 1e-8).unwrap();
        for (a, b) in r.values.data().iter().zip(s.values.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for i in 0..4 {
            prop_assert_eq!(r.get(i, i), 1.0);
            for j in 0..4 {
                prop_assert_eq!(r.get(i, j), r.get(j, i));
                prop_assert!(r.get(i, j).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn channel_permutation_round_trips(perm in (1usize..9).prop_flat_map(permutation), k in 1usize..5) {
        let c = perm.len();
        let x = Tensor::from_fn(&[2, k, c], |i| i as f64);
        let back = gather_axis(&gather_axis(&x, 2, &perm).unwrap(), 2, &inverse_permutation(&perm)).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn normalizer_round_trips(rows in tensor(vec![30, 3], -100.0, 100.0)) {
        let n = Normalizer::fit(&rows);
        let back = n.denormalize(&n.normalize(&rows));
        for (a, b) in back.data().iter().zip(rows.data()) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn total_loss_is_fcst_plus_weighted_regs(
        fcst in 0.0f64..10.0,
        regs in prop::collection::vec(0.0f64..1.0, 0..5),
        lambda in 0.0f64..1.0,
    ) {
        let tape = Tape::new();
        let f = tape.leaf(Tensor::scalar(fcst), true);
        let r: Vec<_> = regs.iter().map(|&v| tape.leaf(Tensor::scalar(v), true)).collect();
        let (total, report) = total_loss(&tape, f, &r, lambda).unwrap();
        prop_assert_eq!(tape.value(total).item(), report.recompute_total(lambda));
        let expected = fcst + lambda * regs.iter().sum::<f64>();
        prop_assert!((report.total - expected).abs() < 1e-12);
        if lambda == 0.0 || regs.is_empty() {
            prop_assert_eq!(report.total.to_bits(), fcst.to_bits());
        }
    }

    #[test]
    fn scan_matches_recurrence(
        seed_shape in (1usize..3, 1usize..12, 1usize..4, 1usize..5),
        zoh in any::<bool>(),
    ) {
        let (b, s, di, n) = seed_shape;
        let mode = if zoh { Discretization::ZohExact } else { Discretization::EulerB };
        let mk = |shape: &[usize], f: fn(usize) -> f64| Tensor::from_fn(shape, f);
        let x = ScanInputs {
            u: mk(&[b, s, di], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0),
            delta: mk(&[b, s, di], |i| 0.05 + ((i * 13) % 7) as f64 / 10.0),
            a: mk(&[di, n], |i| -0.1 - ((i * 5) % 9) as f64 / 4.0),
            b: mk(&[b, s, n], |i| ((i * 17) % 5) as f64 / 2.0 - 1.0),
            c: mk(&[b, s, n], |i| ((i * 29) % 3) as f64 - 1.0),
            d: mk(&[di], |i| i as f64 / 3.0),
        };
        let fast = selective_scan(&x, mode).unwrap();
        let slow = naive_scan(&x, mode).unwrap();
        for (p, q) in fast.data().iter().zip(slow.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn splits_partition_the_series(len in 200usize..100_000, ratio622 in any::<bool>()) {
        let family = if ratio622 { SplitFamily::Ratio622 } else { SplitFamily::Ratio712 };
        let b = chronological_split(len, family).unwrap();
        let (tr, va, te) = (b.range(Split::Train), b.range(Split::Val), b.range(Split::Test));
        prop_assert_eq!(tr.start, 0);
        prop_assert_eq!(tr.end, va.start);
        prop_assert_eq!(va.end, te.start);
        prop_assert_eq!(te.end, len);
        for split in Split::ALL {
            prop_assert_eq!(b.segment(split, 24).end, b.range(split).end);
        }
    }

    #[test]
    fn bias_gap_sign_follows_reversed_order(fwd in 0.01f64..2.0, rev in 0.01f64..2.0) {
        let g = bias_gap(fwd, rev);
        prop_assert!((g.abs_gap - (rev - fwd).abs()).abs() < 1e-15);
        prop_assert_eq!(g.rel_gap > 0.0, rev > fwd);
    }
}
