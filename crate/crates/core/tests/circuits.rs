use nalgebra::DMatrix;
use proptest::prelude::*;
use sortlab::circuits::{circuit_rank, numerical_rank, ov_circuit, qk_circuit, singular_values, CircuitSet};
use sortlab::model::{init_model, ModelConfig};
use sortlab::numkernel::{Matrix, RandomSource};

fn random_matrix(rows: usize, cols: usize, rank: usize, seed: u64) -> Matrix {
    let mut rng = RandomSource::new(seed);
    let a = Matrix::from_fn(rows, rank, |_, _| rng.normal());
    let b = Matrix::from_fn(rank, cols, |_, _| rng.normal());
    a.matmul(&b).unwrap()
}

fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut s: Vec<f64> = d.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn singular_values_match_nalgebra() {
    for (i, &(r, c, k)) in [(6, 6, 6), (9, 5, 5), (5, 9, 3), (20, 20, 7), (52, 52, 48)].iter().enumerate() {
        let m = random_matrix(r, c, k, 100 + i as u64);
        let ours = singular_values(&m);
        let want = oracle_singular_values(&m);
        let top = want[0];
        for (a, b) in ours.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * top, "{r}x{c}: {a} vs {b}");
        }
    }
}

#[test]
fn rank_of_constructed_low_rank_products() {
    for k in [1, 3, 10, 24] {
        let m = random_matrix(30, 30, k, k as u64);
        assert_eq!(numerical_rank(&m, 1e-3), k);
    }
    assert_eq!(numerical_rank(&Matrix::zeros(4, 4), 1e-3), 0);
}

#[test]
fn untrained_baseline_reports_full_circuit_rank() {
    let p = init_model(&ModelConfig::default()).unwrap();
    assert_eq!(circuit_rank(&p, 1e-3).unwrap(), 192);
    let c = CircuitSet::compute(&p, 1e-3).unwrap();
    for h in &c.heads {
        assert_eq!((h.ov_rank, h.qk_rank), (48, 48));
        assert_eq!(h.ov.shape(), (52, 52));
    }
}

#[test]
fn circuits_match_explicit_products() {
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 5,
        num_heads: 2,
        d_head: 3,
        list_length: 3,
        use_layer_norm: false,
        init_std: Some(0.5),
        seed: 4,
    };
    let p = init_model(&cfg).unwrap();
    let e = DMatrix::from_row_slice(7, 5, p.embed.as_slice());
    let u = DMatrix::from_row_slice(5, 7, p.unembed.as_slice());
    for h in 0..2 {
        let hp = &p.heads[h];
        let m = |x: &Matrix| DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
        let ov = &e * m(&hp.w_v) * m(&hp.w_o) * &u;
        let qk = &e * m(&hp.w_q) * m(&hp.w_k).transpose() * e.transpose();
        let ours_ov = ov_circuit(&p, h).unwrap();
        let ours_qk = qk_circuit(&p, h).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((ours_ov[(i, j)] - ov[(i, j)]).abs() < 1e-12);
                assert!((ours_qk[(i, j)] - qk[(i, j)]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rank_is_monotone_in_tolerance(seed in 0u64..1000, k in 1usize..8, t1 in 1e-8f64..1e-1, t2 in 1e-8f64..1e-1) {
        let m = random_matrix(10, 9, k, seed);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(numerical_rank(&m, lo) >= numerical_rank(&m, hi));
        prop_assert!(numerical_rank(&m, lo) <= 9);
    }

    #[test]
    fn singular_values_are_sorted_and_nonnegative(seed in 0u64..1000, r in 1usize..12, c in 1usize..12) {
        let m = random_matrix(r, c, r.min(c), seed);
        let s = singular_values(&m);
        prop_assert_eq!(s.len(), r.min(c));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&x| x >= 0.0));
        let fro: f64 = s.iter().map(|x| x * x).sum();
        prop_assert!((fro - m.sum_sq()).abs() <= 1e-9 * m.sum_sq().max(1.0));
    }
}
