use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use farecontrast::data::{read_csv, write_csv, Record};
use farecontrast::encoder::{similarity_matrix, ScoringConfig, SimilarityMatrix};
use farecontrast::eval::{bias_removal_mse, equalized_odds, GroupedPredictions};
use farecontrast::fare::{attention_scores, fare, prepare_protected, AttentionConfig};
use farecontrast::kernels::{kernel_matrix, KernelKind, KernelSpec};
use farecontrast::losses::{cclk_score, farecontrast_loss, infonce_loss};
use farecontrast::numerics::{softmax_rows, Matrix};
use farecontrast::sparse::{build_supports, hash, sparse_attention_scores, sparse_fare, LshConfig, LshRound};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn sims(b: usize, seed: u64) -> SimilarityMatrix {
    let x = matrix(b, 4, -1.0, 1.0, seed);
    let y = matrix(b, 4, -1.0, 1.0, seed ^ 0xabcd);
    similarity_matrix(&x, &y, &ScoringConfig { tau: 0.5 }).unwrap()
}

fn protected(b: usize, seed: u64) -> Matrix {
    matrix(b, 3, 0.05, 1.0, seed)
}

fn permuted(m: &Matrix, perm: &[usize]) -> Matrix {
    m.select_rows(perm)
}

fn permuted_square(m: &Matrix, perm: &[usize]) -> Matrix {
    let b = perm.len();
    let mut out = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            out.set(i, j, m.get(perm[i], perm[j]));
        }
    }
    out
}

fn permutation(b: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..b).collect();
    for i in (1..b).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), shift in -50.0f64..50.0,
    ) {
        let s = matrix(rows, cols, -20.0, 20.0, seed);
        let p = softmax_rows(&s);
        for i in 0..rows {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let shifted = softmax_rows(&s.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn fare_is_permutation_equivariant(b in 2usize..24, seed in any::<u64>()) {
        let u = sims(b, seed);
        let z = prepare_protected(&protected(b, seed), true).unwrap();
        let params = AttentionConfig::default().init(3, seed).unwrap();
        let o = fare(&u, &attention_scores(&z, &params).unwrap()).unwrap();

        let perm = permutation(b, seed.wrapping_add(1));
        let u_p = SimilarityMatrix::new(permuted_square(u.matrix(), &perm)).unwrap();
        let z_p = permuted(&z, &perm);
        let o_p = fare(&u_p, &attention_scores(&z_p, &params).unwrap()).unwrap();
        for i in 0..b {
            prop_assert!((o_p[i] - o[perm[i]]).abs() < 1e-12 * o[perm[i]].abs().max(1.0));
        }
    }

    #[test]
    fn fare_output_lies_in_row_range(b in 2usize..24, seed in any::<u64>()) {
        let u = sims(b, seed);
        let z = prepare_protected(&protected(b, seed), true).unwrap();
        let params = AttentionConfig::default().init(3, seed).unwrap();
        let o = fare(&u, &attention_scores(&z, &params).unwrap()).unwrap();
        for (i, &v) in o.iter().enumerate() {
            let row = u.matrix().row(i);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn losses_are_positive(b in 2usize..24, seed in any::<u64>()) {
        let u = sims(b, seed);
        prop_assert!(infonce_loss(&u).unwrap() > 0.0);
        let z = prepare_protected(&protected(b, seed), true).unwrap();
        let params = AttentionConfig::default().init(3, seed).unwrap();
        let o = fare(&u, &attention_scores(&z, &params).unwrap()).unwrap();
        prop_assert!(farecontrast_loss(&u, &o).unwrap() > 0.0);
    }

    #[test]
    fn lsh_hash_is_antipodal(seed in any::<u64>(), buckets in (1usize..8).prop_map(|h| 2 * h)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let round = LshRound::draw(3, buckets, &mut rng);
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        prop_assert_eq!(hash(&neg, &round.r), (hash(&z, &round.r) + buckets / 2) % buckets);
    }

    #[test]
    fn lsh_supports_grow_with_rounds(b in 2usize..40, seed in any::<u64>(), chunk in 1usize..10) {
        let z = prepare_protected(&protected(b, seed), true).unwrap();
        let few = LshConfig { rounds: 2, chunk_size: chunk, seed, ..LshConfig::default() };
        let more = LshConfig { rounds: 5, ..few.clone() };
        let s_few = build_supports(&z, &few).unwrap();
        let s_more = build_supports(&z, &more).unwrap();
        prop_assert!(s_more.is_superset_of(&s_few));
        for i in 0..b {
            prop_assert!(s_few.contains(i, i));
            for &j in s_few.get(i) {
                prop_assert!(s_few.contains(j, i), "supports are symmetric");
            }
        }
    }

    #[test]
    fn sparse_fare_stays_within_support_range(b in 2usize..30, seed in any::<u64>()) {
        let u = sims(b, seed);
        let z = prepare_protected(&protected(b, seed), true).unwrap();
        let params = AttentionConfig::default().init(3, seed).unwrap();
        let s = build_supports(&z, &LshConfig { chunk_size: 4, seed, ..LshConfig::default() }).unwrap();
        let o = sparse_fare(&u, &sparse_attention_scores(&z, &params, &s).unwrap(), &s).unwrap();
        for i in 0..b {
            let vals: Vec<f64> = s.get(i).iter().map(|&j| u.matrix().get(i, j)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(o[i] >= lo * (1.0 - 1e-12) && o[i] <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn support_dump_round_trips(b in 1usize..30, seed in any::<u64>()) {
        let z = prepare_protected(&protected(b, seed), true).unwrap();
        let s = build_supports(&z, &LshConfig { chunk_size: 3, seed, ..LshConfig::default() }).unwrap();
        prop_assert_eq!(farecontrast::sparse::SupportSet::parse_dump(&s.dump()).unwrap(), s);
    }

    #[test]
    fn csv_round_trip_is_exact(
        rows in proptest::collection::vec(
            (proptest::collection::vec(-1e6f64..1e6, 3), 0usize..20, proptest::collection::vec(0.0f64..=1.0, 2)),
            1..20,
        )
    ) {
        let records: Vec<Record> = rows
            .into_iter()
            .map(|(features, label, protected)| Record { features, label, protected })
            .collect();
        let mut buf = Vec::new();
        write_csv(&records, &mut buf).unwrap();
        prop_assert_eq!(read_csv(buf.as_slice(), "memory").unwrap(), records);
    }

    #[test]
    fn equalized_odds_ignores_group_relabeling(
        cells in proptest::collection::vec((0usize..2, 0usize..2), 8..60), seed in any::<u64>(),
    ) {
        // Every (group, class) pair present so all conditionals are defined.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut groups = Vec::new();
        for g in 0..2 {
            for y in 0..2 {
                pred.push(y);
                truth.push(y);
                groups.push(g);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (p, t) in cells {
            pred.push(p);
            truth.push(t);
            groups.push(rng.random_range(0..2));
        }
        let swapped: Vec<usize> = groups.iter().map(|g| 1 - g).collect();
        let a = equalized_odds(&GroupedPredictions::new(pred.clone(), truth.clone(), groups).unwrap()).unwrap();
        let b = equalized_odds(&GroupedPredictions::new(pred, truth, swapped).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn bias_mse_is_invariant_to_affine_embedding_maps(n in 20usize..60, seed in any::<u64>(), scale in 0.5f64..3.0) {
        let e_train = matrix(n, 3, -1.0, 1.0, seed);
        let e_test = matrix(n / 2, 3, -1.0, 1.0, seed ^ 1);
        let z_train = matrix(n, 2, 0.0, 1.0, seed ^ 2);
        let z_test = matrix(n / 2, 2, 0.0, 1.0, seed ^ 3);
        let base = bias_removal_mse(&e_train, &z_train, &e_test, &z_test).unwrap();
        let mix = matrix(3, 3, -1.0, 1.0, seed ^ 4).zip_map(&Matrix::identity(3).scale(3.0), "mix", |a, b| a + b).unwrap();
        let warp = |e: &Matrix| e.matmul(&mix).unwrap().map(|v| scale * v + 0.7);
        let moved = bias_removal_mse(&warp(&e_train), &z_train, &warp(&e_test), &z_test).unwrap();
        prop_assert!((base - moved).abs() < 1e-6 * base.max(1e-3));
    }

    #[test]
    fn kernels_are_positive_semidefinite(b in 1usize..16, seed in any::<u64>(), which in 0usize..5) {
        let z = protected(b, seed);
        let kind = [KernelKind::Cosine, KernelKind::Rbf, KernelKind::Linear, KernelKind::Polynomial, KernelKind::Laplacian][which];
        let k = kernel_matrix(&z, &KernelSpec::new(kind)).unwrap();
        let na = DMatrix::from_row_slice(b, b, k.as_slice());
        prop_assert!(na.clone().transpose() == na);
        let scale = na.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let smallest = na.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(smallest >= -1e-9 * scale, "smallest eigenvalue {smallest}");
    }

    #[test]
    fn cclk_with_tiny_ridge_recovers_positives(b in 1usize..10, seed in any::<u64>()) {
        // An invertible kernel makes (K + λI)^{-1}K approach the identity.
        let u = sims(b, seed);
        let a = matrix(b, b, -1.0, 1.0, seed ^ 9);
        let k = a.matmul_transposed(&a).unwrap().zip_map(&Matrix::identity(b), "k", |x, y| x + y).unwrap();
        let s = cclk_score(&u, &k, 1e-10).unwrap();
        for i in 0..b {
            prop_assert!((s[i] - u.matrix().get(i, i)).abs() < 1e-7 * u.matrix().get(i, i).max(1.0));
        }
    }
}
