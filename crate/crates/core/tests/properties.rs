//! Randomized invariants.

use dualda::autodiff::Graph;
use dualda::data::{load_features, save_features, BatchIterator, Dataset, Domain, Format};
use dualda::losses::{draw_projections, filter_confident, swd_with};
use dualda::matrix::Matrix;
use dualda::metrics::pca_project;
use dualda::proto::Prototypes;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn probabilities(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |v| {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(rows, cols, v).unwrap());
        let p = g.row_softmax(x);
        g.value(p).clone()
    })
}

fn swd_value(p: &Matrix, q: &Matrix, theta: &Matrix) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(p.clone()), g.constant(q.clone()));
    let s = swd_with(&mut g, a, b, theta).unwrap();
    g.value(s).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(1..6, 1..6)) {
        let mut g = Graph::new();
        let v = g.constant(x.map(|a| a * 100.0));
        let p = g.row_softmax(v);
        let p = g.value(p);
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.row(i).iter().all(|&e| (0.0..=1.0).contains(&e)));
        }
    }

    #[test]
    fn sort_matches_reference_sort(x in matrix(1..8, 1..5)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let s = g.sort_columns(v);
        let s = g.value(s);
        for j in 0..x.cols() {
            let mut col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, j)).collect();
            col.sort_by(f64::total_cmp);
            let got: Vec<f64> = (0..x.rows()).map(|i| s.get(i, j)).collect();
            prop_assert_eq!(got, col);
        }
    }

    #[test]
    fn forward_backward_stays_finite(x in matrix(2..6, 2..6), w in matrix(2..6, 2..6)) {
        prop_assume!(x.cols() == w.rows());
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let wv = g.leaf(w, true);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.relu(h);
        let p = g.row_softmax(h);
        let c = g.clamp_min(p, 1e-12);
        let l = g.log(c).unwrap();
        let s = g.sort_columns(l);
        let n = g.row_norm(s);
        let root = g.sum(n);
        g.backward(root).unwrap();
        prop_assert!(g.value(root).is_finite());
        prop_assert!(g.grad(xv).unwrap().is_finite() && g.grad(wv).unwrap().is_finite());
    }

    #[test]
    fn swd_is_a_symmetric_permutation_invariant_discrepancy(
        p in probabilities(6, 3),
        q in probabilities(6, 3),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = draw_projections(3, 16, &mut rng);
        let pq = swd_value(&p, &q, &theta);
        prop_assert!(pq >= 0.0);
        prop_assert!(swd_value(&p, &p, &theta) == 0.0);
        prop_assert!((pq - swd_value(&q, &p, &theta)).abs() < 1e-15);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let p2 = p.select_rows(&perm);
        perm.shuffle(&mut rng);
        let q2 = q.select_rows(&perm);
        prop_assert!((pq - swd_value(&p2, &q2, &theta)).abs() < 1e-14);
    }

    #[test]
    fn smaller_sigma_never_shrinks_the_subset(p in probabilities(10, 4), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(filter_confident(&p, lo).len() >= filter_confident(&p, hi).len());
    }

    #[test]
    fn prototype_rows_sum_to_one_and_ignore_scale(
        mu in matrix(3..4, 4..5),
        z in matrix(1..10, 4..5),
        k in 0.01f64..100.0,
    ) {
        prop_assume!((0..mu.rows()).all(|c| mu.row(c).iter().any(|&x| x.abs() > 1e-3)));
        prop_assume!((0..z.rows()).all(|i| z.row(i).iter().any(|&x| x.abs() > 1e-3)));
        let p = Prototypes { mu, source_counts: vec![1; 3], target_counts: vec![0; 3], temperature: 0.7 };
        let a = p.predict(&z).unwrap();
        let b = p.predict(&z.map(|x| x * k)).unwrap();
        for i in 0..a.rows() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert_eq!(a.argmax_rows(), b.argmax_rows());
    }

    #[test]
    fn refinement_fixed_point_and_step_budget(mu in matrix(3..4, 3..4), z in matrix(5..30, 3..4), steps in 1usize..5) {
        prop_assume!((0..mu.rows()).all(|c| mu.row(c).iter().any(|&x| x.abs() > 1e-3)));
        prop_assume!((0..z.rows()).all(|i| z.row(i).iter().any(|&x| x.abs() > 1e-3)));
        let p = Prototypes { mu, source_counts: vec![1; 3], target_counts: vec![0; 3], temperature: 1.0 };
        let r = p.refine_on_target(&z, steps).unwrap();
        prop_assert!(r.passes <= steps);
        if r.converged {
            let again = r.prototypes.refine_on_target(&z, steps).unwrap();
            prop_assert_eq!(&again.labels, &r.labels);
            prop_assert_eq!(&again.prototypes.mu, &r.prototypes.mu);
        }
    }

    #[test]
    fn each_epoch_visits_every_index_once(n in 1usize..50, batch in 1usize..20, seed in any::<u64>()) {
        let mut it = BatchIterator::new(n, batch, ChaCha8Rng::seed_from_u64(seed));
        for _ in 0..2 {
            let mut seen = Vec::new();
            while seen.len() < n {
                seen.extend(it.next_indices());
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn feature_files_round_trip_bitwise(x in matrix(1..8, 1..5), labelled in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = labelled.then(|| {
            let mut l: Vec<usize> = (0..x.rows()).map(|i| i % 3).collect();
            l.shuffle(&mut rng);
            l
        });
        let classes = 3;
        let ds = Dataset::new(x.map(|v| v * 1.234_567_890_123), labels, Domain::Target, classes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("d.csv", Format::Csv), ("d.bin", Format::Binary)] {
            let path = dir.path().join(name);
            save_features(&ds, &path, fmt).unwrap();
            let back = load_features(&path, fmt, Domain::Target).unwrap();
            prop_assert_eq!(&back.features, &ds.features);
            prop_assert_eq!(&back.labels, &ds.labels);
        }
    }

    #[test]
    fn pca_coordinates_are_centered_and_ordered(z in matrix(3..30, 2..6)) {
        let p = pca_project(&z).unwrap();
        if !p.degenerate {
            let m = p.coords.column_means();
            prop_assert!(m.as_slice().iter().all(|v| v.abs() < 1e-10));
            prop_assert!(p.variances[0] >= p.variances[1]);
        }
    }
}
