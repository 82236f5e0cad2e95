use proptest::prelude::*;

use attnlab::bounds::{kernel_sup_bound, radius_envelope};
use attnlab::dynamics::{attention_weights_raw, attention_weights_rescaled, velocity_raw, AttentionTriple, TokenCloud};
use attnlab::linalg::io::{read_matrix, write_matrix};
use attnlab::linalg::{norm, op_norm, Matrix};
use attnlab::transport::w2;

fn matrix(d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0_f64, d * d).prop_map(move |v| Matrix::new(d, d, v).unwrap())
}

fn cloud(n: usize, d: usize) -> impl Strategy<Value = TokenCloud> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0_f64, d), n).prop_map(|p| TokenCloud::new(p).unwrap())
}

fn triple(d: usize) -> impl Strategy<Value = AttentionTriple> {
    (matrix(d), matrix(d), matrix(d)).prop_map(|(q, k, v)| AttentionTriple::new(q, k, v).unwrap())
}

fn pair(max_n: usize) -> impl Strategy<Value = (TokenCloud, TokenCloud)> {
    (1..=max_n, 1..=3_usize).prop_flat_map(|(n, d)| (cloud(n, d), cloud(n, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_probability_vectors(
        (t, c) in (1..=3_usize, 1..=6_usize).prop_flat_map(|(d, n)| (triple(d), cloud(n, d))),
        time in 0.0..4.0_f64,
    ) {
        for p in [attention_weights_raw(&t, &c).unwrap(), attention_weights_rescaled(&t, &c, time).unwrap()] {
            for i in 0..p.rows() {
                let row = p.row(i);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn velocity_is_permutation_equivariant(
        (t, c, perm) in (1..=3_usize, 2..=6_usize)
            .prop_flat_map(|(d, n)| (triple(d), cloud(n, d), Just((0..n).collect::<Vec<_>>()).prop_shuffle())),
    ) {
        let v = velocity_raw(&t, &c).unwrap();
        let vp = velocity_raw(&t, &c.permuted(&perm)).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert_eq!(&vp[i], &v[j]);
        }
    }

    #[test]
    fn kernel_is_bounded_on_a_ball((t, c) in (1..=3_usize, 1..=6_usize).prop_flat_map(|(d, n)| (triple(d), cloud(n, d)))) {
        let r = c.max_norm();
        let bound = kernel_sup_bound(&t, r);
        for v in velocity_raw(&t, &c).unwrap() {
            prop_assert!(norm(&v) <= bound * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn w2_is_a_symmetric_metric_on_clouds((a, b) in pair(6)) {
        prop_assert_eq!(w2(&a, &a).unwrap(), 0.0);
        let ab = w2(&a, &b).unwrap();
        let ba = w2(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        let n = a.n() as f64;
        let identity_plan = (a.points().iter().zip(b.points()).map(|(x, y)| {
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        }).sum::<f64>() / n).sqrt();
        prop_assert!(ab <= identity_plan + 1e-12);
    }

    #[test]
    fn w2_ignores_relabeling(
        (a, perm) in (1..=3_usize, 1..=6_usize)
            .prop_flat_map(|(d, n)| (cloud(n, d), Just((0..n).collect::<Vec<_>>()).prop_shuffle())),
    ) {
        prop_assert!(w2(&a, &a.permuted(&perm)).unwrap() <= 1e-12);
    }

    #[test]
    fn linear_pushforward_is_lipschitz(
        (a, b, m) in (1..=5_usize, 1..=3_usize).prop_flat_map(|(n, d)| (cloud(n, d), cloud(n, d), matrix(d))),
    ) {
        let pushed = w2(&a.map_linear(&m), &b.map_linear(&m)).unwrap();
        prop_assert!(pushed <= op_norm(&m) * w2(&a, &b).unwrap() * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn radius_envelope_grows_with_time(v in matrix(2), w in matrix(2), r0 in 0.0..5.0_f64, t in 0.0..3.0_f64, dt in 0.0..1.0_f64) {
        prop_assert!(radius_envelope(r0, &v, &w, t) >= r0);
        prop_assert!(radius_envelope(r0, &v, &w, t + dt) >= radius_envelope(r0, &v, &w, t));
    }

    #[test]
    fn matrix_files_round_trip(m in (1..=4_usize).prop_flat_map(matrix)) {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        prop_assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
    }
}
