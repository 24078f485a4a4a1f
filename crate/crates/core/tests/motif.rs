use esrf::motif::{motif_adjacency, Motif, MotifSet};
use esrf::SparseMatrix;
use proptest::prelude::*;

fn graph() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    (2usize..12, 1usize..8).prop_flat_map(|(m, n)| {
        (
            Just(m),
            Just(n),
            proptest::collection::vec((0..m, 0..m), 0..40),
            proptest::collection::vec((0..m, 0..n), 0..40),
        )
    })
}

fn build(m: usize, n: usize, social: &[(usize, usize)], feedback: &[(usize, usize)]) -> (SparseMatrix, SparseMatrix) {
    let s: Vec<_> = social.iter().filter(|(a, b)| a != b).map(|&(a, b)| (a, b, 1.0)).collect();
    let y: Vec<_> = feedback.iter().map(|&(u, i)| (u, i, 1.0)).collect();
    (
        SparseMatrix::from_triplets(m, m, &s).unwrap().binarized(),
        SparseMatrix::from_triplets(m, n, &y).unwrap().binarized(),
    )
}

proptest! {
    #[test]
    fn adjacencies_are_symmetric_counts((m, n, social, feedback) in graph()) {
        let (s, y) = build(m, n, &social, &feedback);
        for motif in Motif::ALL {
            let a = motif_adjacency(&s, &y, motif).unwrap();
            prop_assert!(a.is_symmetric(), "{motif}");
            for (r, c, v) in a.iter() {
                prop_assert!(r != c);
                prop_assert!(v > 0.0 && v.fract() == 0.0, "{motif} {v}");
            }
        }
    }

    #[test]
    fn relabeling_users_permutes_adjacencies((m, n, social, feedback) in graph(), shift in 1usize..11) {
        let p = |u: usize| (u + shift) % m;
        let (s, y) = build(m, n, &social, &feedback);
        let moved_social: Vec<_> = social.iter().map(|&(a, b)| (p(a), p(b))).collect();
        let moved_feedback: Vec<_> = feedback.iter().map(|&(u, i)| (p(u), i)).collect();
        let (s2, y2) = build(m, n, &moved_social, &moved_feedback);
        for motif in Motif::ALL {
            let a = motif_adjacency(&s, &y, motif).unwrap();
            let b = motif_adjacency(&s2, &y2, motif).unwrap();
            for r in 0..m {
                for c in 0..m {
                    prop_assert_eq!(a.get(r, c), b.get(p(r), p(c)), "{}", motif);
                }
            }
        }
    }

    #[test]
    fn propagation_matrix_is_row_stochastic((m, n, social, feedback) in graph()) {
        let (s, y) = build(m, n, &social, &feedback);
        let set = MotifSet::build(&s, &y, false).unwrap();
        for total in set.normalized.row_sums() {
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
