//! Tests for the brute-force reference implementations.

use pmlp_core::linalg::DenseMatrix;
use pmlp_core::oracle::*;
use pmlp_core::sketch::SketchOp;
use pmlp_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = DenseMatrix<f64>;

fn random_full_rank(d: usize, n: usize, seed: u64) -> M {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = M::zeros(d, n);
    for i in 0..d {
        for j in 0..n {
            a.set(i, j, rng.gen::<f64>() * 2.0 - 1.0);
        }
        // distinct dominant entries keep the rows independent
        a.set(i, i, a.get(i, i) + 3.0);
    }
    a
}

#[test]
fn projection_has_trace_d_and_passes_identity_checks() {
    let (d, n) = (3, 7);
    let a = random_full_rank(d, n, 1);
    let w: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * i as f64).collect();
    let p = naive_projection(&a, &w).unwrap();
    let trace: f64 = (0..n).map(|i| p.get(i, i)).sum();
    assert!((trace - d as f64).abs() < 1e-8, "trace {trace}");
}

#[test]
fn naive_query_with_identity_sketch_is_the_projection_action() {
    let (d, n) = (2, 5);
    let a = random_full_rank(d, n, 2);
    let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.05 * i as f64).collect();
    let fh: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.5).collect();
    let p = naive_projection(&a, &w).unwrap();
    let expect = p.matvec(&fh);
    let got = naive_query(&a, &w, &fh, &SketchOp::identity(n)).unwrap();
    for (x, y) in got.iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn reference_step_satisfies_the_step_identity() {
    let (d, n) = (3, 8);
    let a = random_full_rank(d, n, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let s: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let t = 1.0;
    let eps = 0.02;
    let t_new = (1.0 - eps / (3.0 * (n as f64).sqrt())) * t;
    let lambda = 2.0 * (n as f64).ln().max(2.0);
    let st = reference_step(&a, &x, &s, t, t_new, eps, lambda).unwrap();
    // X delta^_s + S delta^_x = delta~_mu
    for i in 0..n {
        let lhs = x[i] * st.ds[i] + s[i] * st.dx[i];
        let scale = st.delta_mu[i].abs().max(1.0);
        assert!(
            (lhs - st.delta_mu[i]).abs() < 1e-10 * scale,
            "identity broken at {i}: {lhs} vs {}",
            st.delta_mu[i]
        );
    }
}

#[test]
fn tiny_lp_solves_a_known_optimum() {
    // min -x1 - 2 x2 s.t. x1 + x2 + x3 = 1, x >= 0  => x = (0, 1, 0), obj -2
    let a = M::from_rows(&[vec![1.0, 1.0, 1.0]]);
    match tiny_lp_exact(&a, &[1.0], &[-1.0, -2.0, 0.0]).unwrap() {
        TinyLp::Optimal { x, objective } => {
            assert!((objective + 2.0).abs() < 1e-9);
            assert!((x[1] - 1.0).abs() < 1e-9);
        }
        other => panic!("expected optimum, got {other:?}"),
    }
}

#[test]
fn tiny_lp_detects_infeasibility() {
    // x1 + x2 = -1 with x >= 0 has no solution
    let a = M::from_rows(&[vec![1.0, 1.0]]);
    assert!(matches!(
        tiny_lp_exact(&a, &[-1.0], &[1.0, 1.0]).unwrap(),
        TinyLp::Infeasible
    ));
}

#[test]
fn tiny_lp_detects_unboundedness() {
    // min -x1 s.t. x1 - x2 = 0: the ray (1,1) is feasible and improving
    let a = M::from_rows(&[vec![1.0, -1.0]]);
    assert!(matches!(
        tiny_lp_exact(&a, &[0.0], &[-1.0, 0.0]).unwrap(),
        TinyLp::Unbounded
    ));
}

#[test]
fn tiny_lp_two_constraints() {
    // min x1 + x2 + x3 s.t. x1 + x4 = 1, x2 + x3 = 2 => obj 2 (x3 or x2), x1 = 0
    let a = M::from_rows(&[vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]]);
    match tiny_lp_exact(&a, &[1.0, 2.0], &[1.0, 1.0, 1.0, 0.0]).unwrap() {
        TinyLp::Optimal { objective, .. } => assert!((objective - 2.0).abs() < 1e-9),
        other => panic!("expected optimum, got {other:?}"),
    }
}

#[test]
fn tiny_lp_rejects_oversized_instances() {
    let a = M::zeros(13, 20);
    let b = vec![0.0; 13];
    let c = vec![0.0; 20];
    assert!(matches!(
        tiny_lp_exact(&a, &b, &c),
        Err(Error::InvalidDim(_))
    ));
}
