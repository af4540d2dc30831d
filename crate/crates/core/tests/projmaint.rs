//! Tests for the projection-maintenance structure: the soft-threshold
//! helpers, and random drift walks where every combined update-and-query is
//! audited against the brute-force oracle and the member invariants.

use pmlp_core::linalg::DenseMatrix;
use pmlp_core::oracle::naive_query;
use pmlp_core::projmaint::{adjust, psi, soft_threshold, FFunc, MaintParams, MaintState};
use pmlp_core::sketch::SketchPool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = DenseMatrix<f64>;

fn random_full_rank(d: usize, n: usize, rng: &mut ChaCha8Rng) -> M {
    let mut a = M::zeros(d, n);
    for i in 0..d {
        for j in 0..n {
            a.set(i, j, rng.gen::<f64>() * 2.0 - 1.0);
        }
        a.set(i, i, a.get(i, i) + 3.0);
    }
    a
}

fn desk_params() -> MaintParams<f64> {
    MaintParams::new(0.05, 0.005, 8.0 / 9.0, 2.0 / 3.0)
}

// ---------------------------------------------------------------------------
// helpers

#[test]
fn psi_knots_and_plateau() {
    let eps = 0.05f64;
    assert_eq!(psi(0.0, eps), 0.0);
    assert!((psi(eps, eps) - eps / 2.0).abs() < 1e-15);
    assert!((psi(-eps, eps) - eps / 2.0).abs() < 1e-15);
    assert!((psi(2.0 * eps, eps) - eps).abs() < 1e-15);
    assert_eq!(psi(5.0 * eps, eps), eps);
    // continuity across the knots
    let h = 1e-9;
    assert!((psi(eps + h, eps) - psi(eps - h, eps)).abs() < 1e-7);
    assert!((psi(2.0 * eps + h, eps) - psi(2.0 * eps - h, eps)).abs() < 1e-7);
    // monotone on [0, 2 eps]
    let mut prev = 0.0;
    for k in 1..200 {
        let x = 2.0 * eps * k as f64 / 200.0;
        let y = psi(x, eps);
        assert!(y >= prev - 1e-15);
        prev = y;
    }
}

#[test]
fn soft_threshold_takes_scores_above_eps() {
    let y = [0.9, 0.5, 0.2, 0.05];
    let w = [10.0, 20.0, 30.0, 40.0];
    let v = [1.0, 2.0, 3.0, 4.0];
    // threshold not reached: exactly the scores >= eps are taken
    let (out, k) = soft_threshold(&y, &w, &v, 0.1, 4, 0.8);
    assert_eq!(k, 3);
    assert_eq!(out, vec![10.0, 20.0, 30.0, 4.0]);
}

#[test]
fn soft_threshold_expands_geometrically_at_threshold() {
    let y = [0.9, 0.5, 0.2, 0.05];
    let w = [10.0, 20.0, 30.0, 40.0];
    let v = [1.0, 2.0, 3.0, 4.0];
    // k = 3 >= threshold 2: expand to ceil(4.5) clamped at n = 4, take all
    let (out, k) = soft_threshold(&y, &w, &v, 0.1, 2, 0.8);
    assert_eq!(k, 4);
    assert_eq!(out, vec![10.0, 20.0, 30.0, 40.0]);
}

#[test]
fn soft_threshold_expansion_stops_on_decay() {
    // scores drop sharply after the first two; decay factor cuts the growth
    let y = [1.0, 0.99, 1e-6, 1e-7, 1e-8, 0.0];
    let w = [9.0; 6];
    let v = [1.0; 6];
    let (_, k) = soft_threshold(&y, &w, &v, 0.5, 2, 0.9);
    // k starts at 2, expands to 3, then y[pi(3)] = 1e-6 < 0.9 * y[pi(2)]
    assert_eq!(k, 3);
}

#[test]
fn soft_threshold_zero_scores() {
    let y = [0.0; 4];
    let w = [9.0; 4];
    let v = [1.0, 2.0, 3.0, 4.0];
    let (out, k) = soft_threshold(&y, &w, &v, 0.1, 2, 0.8);
    assert_eq!(k, 0);
    assert_eq!(out, v.to_vec());
}

#[test]
fn adjust_snaps_near_entries_back() {
    let v = [1.0, 1.0, 1.0];
    let v_tilde = [1.0, 1.2, 1.0];
    // entry 0: changed but within the band -> snapped to v
    // entry 1: unchanged from v~ -> passes through even though in band? no,
    //          1.2 is outside the band anyway
    // entry 2: changed and far -> passes through
    let v_tmp = [1.004, 1.2, 1.5];
    let out = adjust(&v_tmp, &v_tilde, &v, 0.01);
    assert_eq!(out, vec![1.0, 1.2, 1.5]);
}

#[test]
fn adjust_keeps_unchanged_entries() {
    // an entry equal to v~ is never snapped, even inside the band
    let v = [1.0];
    let v_tilde = [1.004];
    let v_tmp = [1.004];
    let out = adjust(&v_tmp, &v_tilde, &v, 0.01);
    assert_eq!(out, vec![1.004]);
}

// ---------------------------------------------------------------------------
// initialize + single query

#[test]
fn fresh_state_passes_all_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (d, n) = (4, 8);
    let a = random_full_rank(d, n, &mut rng);
    let w0: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let h0: Vec<f64> = (0..n).map(|_| 0.9 + 0.2 * rng.gen::<f64>()).collect();
    let pool = SketchPool::identity(4, n);
    let st = MaintState::initialize(&a, FFunc::Sqrt, &desk_params(), &w0, &h0, pool)
        .unwrap();
    let rep = st.check_invariants();
    assert!(
        rep.max_residual < 1e-10,
        "fresh residuals: {:?}",
        rep.entries
    );
    assert!(rep.eps_far_ok);
    assert_eq!(rep.s_size, 0);
    assert_eq!(rep.t_size, 0);
}

#[test]
fn first_query_matches_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, n) = (4, 8);
    let a = random_full_rank(d, n, &mut rng);
    let w0: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let h0: Vec<f64> = (0..n).map(|_| 0.9 + 0.2 * rng.gen::<f64>()).collect();
    let pool = SketchPool::identity(4, n);
    let mut st =
        MaintState::initialize(&a, FFunc::Sqrt, &desk_params(), &w0, &h0, pool).unwrap();
    let op = st.pool.get(0).unwrap().clone();
    let r = st.query(&w0, &h0).unwrap();
    let fh: Vec<f64> = h0.iter().map(|&x| x.sqrt()).collect();
    let expect = naive_query(&a, &w0, &fh, &op).unwrap();
    for i in 0..n {
        assert!(
            (r[i] - expect[i]).abs() < 1e-10,
            "coordinate {i}: {} vs {}",
            r[i],
            expect[i]
        );
    }
    assert_eq!(st.l, 1);
}

// ---------------------------------------------------------------------------
// drift walks audited against the oracle

fn walk(
    n: usize,
    d: usize,
    steps: usize,
    f: FFunc<f64>,
    use_srht: bool,
    seed: u64,
) -> (usize, usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_full_rank(d, n, &mut rng);
    let mut w: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let mut h: Vec<f64> = (0..n).map(|_| 0.9 + 0.2 * rng.gen::<f64>()).collect();
    let pool = if use_srht {
        SketchPool::srht(steps + 1, n.max(4), n, seed ^ 0x5eed)
    } else {
        SketchPool::identity(steps + 1, n)
    };
    let mut st = MaintState::initialize(&a, f, &desk_params(), &w, &h, pool).unwrap();
    let (mut mu, mut pmu, mut vu, mut pvu) = (0, 0, 0, 0);
    for step in 0..steps {
        for i in 0..n {
            w[i] *= 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) / 8.0;
            h[i] *= 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) / 8.0;
        }
        let l_used = st.l;
        let out = st.update_query(&w, &h).unwrap();
        // counter laws
        assert!(out.k == 0 || (out.k >= st.thresh_k && out.k <= n));
        assert!(
            out.ktilde == 0
                || (out.ktilde >= st.thresh_ktilde && out.ktilde <= 2 * st.thresh_k)
        );
        assert!(out.p == 0 || (out.p >= st.thresh_k && out.p <= n));
        assert!(
            out.ptilde == 0
                || (out.ptilde >= st.thresh_ktilde && out.ptilde <= 2 * st.thresh_k)
        );
        // query vs oracle with the same sketch
        let op = st.pool.get(l_used).unwrap();
        let fh: Vec<f64> = out.h_appr.iter().map(|&x| f.eval(x)).collect();
        let expect = naive_query(&a, &out.w_appr, &fh, op).unwrap();
        let scale = expect.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
        for i in 0..n {
            let diff = (out.r[i] - expect[i]).abs();
            assert!(
                diff <= 1e-6 * scale,
                "step {step} coord {i}: {} vs {} (rel {})",
                out.r[i],
                expect[i],
                diff / scale
            );
        }
        // all member invariants after every call
        let rep = st.check_invariants();
        assert!(
            rep.max_residual <= 1e-8,
            "step {step} residuals: {:?}",
            rep.entries
        );
        assert!(rep.eps_far_ok, "step {step} separation {}", rep.eps_far_min_sep);
        assert!(rep.s_size < st.thresh_k);
        mu = st.counters.matrix_updates.max(mu);
        pmu = st.counters.partial_matrix_updates.max(pmu);
        vu = st.counters.vector_updates.max(vu);
        pvu = st.counters.partial_vector_updates.max(pvu);
    }
    (mu, pmu, vu, pvu)
}

#[test]
fn walk_identity_sqrt_n8() {
    let (mu, _pmu, vu, _pvu) = walk(8, 4, 40, FFunc::Sqrt, false, 21);
    // drifts of up to 1/8 per step must trigger refreshes eventually
    assert!(mu + vu > 0, "no full refresh fired in 40 steps");
}

#[test]
fn walk_identity_sqrt_n16() {
    walk(16, 8, 40, FFunc::Sqrt, false, 22);
}

#[test]
fn walk_identity_sinh_n8() {
    walk(8, 4, 40, FFunc::SinhRatio { lambda: 4.0 }, false, 23);
}

#[test]
fn walk_srht_sqrt_n8() {
    walk(8, 4, 40, FFunc::Sqrt, true, 24);
}

#[test]
fn walk_srht_sqrt_n16() {
    walk(16, 8, 40, FFunc::Sqrt, true, 25);
}

#[test]
fn walk_small_n4() {
    walk(4, 2, 30, FFunc::Sqrt, false, 26);
}

fn sparse_walk(n: usize, d: usize, steps: usize, per_step: usize, seed: u64) {
    // drift only a few coordinates per step so the lazy and partial paths
    // (nonempty S, the Woodbury-corrected B/E/F, the dS terms of the query)
    // carry the load instead of full refreshes
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_full_rank(d, n, &mut rng);
    let mut w: Vec<f64> = (0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let mut h: Vec<f64> = (0..n).map(|_| 0.9 + 0.2 * rng.gen::<f64>()).collect();
    let pool = SketchPool::identity(steps + 1, n);
    let mut st =
        MaintState::initialize(&a, FFunc::Sqrt, &desk_params(), &w, &h, pool).unwrap();
    let mut queries_with_nonempty_s = 0;
    for step in 0..steps {
        for _ in 0..per_step {
            let i = rng.gen_range(0..n);
            w[i] *= 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) / 8.0;
            let j = rng.gen_range(0..n);
            h[j] *= 1.0 + (rng.gen::<f64>() * 2.0 - 1.0) / 8.0;
        }
        let l_used = st.l;
        if !st.s_set.is_empty() {
            queries_with_nonempty_s += 1;
        }
        let out = st.update_query(&w, &h).unwrap();
        let op = st.pool.get(l_used).unwrap();
        let fh: Vec<f64> = out.h_appr.iter().map(|&x| x.sqrt()).collect();
        let expect = naive_query(&a, &out.w_appr, &fh, op).unwrap();
        let scale = expect.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
        for i in 0..n {
            assert!(
                (out.r[i] - expect[i]).abs() <= 1e-6 * scale,
                "step {step} coord {i}"
            );
        }
        let rep = st.check_invariants();
        assert!(
            rep.max_residual <= 1e-8,
            "step {step} residuals: {:?}",
            rep.entries
        );
        assert!(rep.eps_far_ok);
    }
    assert!(
        st.counters.partial_matrix_updates > 0,
        "sparse walk never hit the partial path: {:?}",
        st.counters
    );
    assert!(queries_with_nonempty_s > 0, "S never stayed populated");
}

#[test]
fn sparse_walk_n16() {
    sparse_walk(16, 8, 60, 3, 41);
}

#[test]
fn sparse_walk_n32() {
    sparse_walk(32, 16, 60, 4, 42);
}

#[test]
fn big_jump_forces_a_matrix_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (d, n) = (4, 8);
    let a = random_full_rank(d, n, &mut rng);
    let w0: Vec<f64> = vec![1.0; n];
    let h0: Vec<f64> = vec![1.0; n];
    let pool = SketchPool::identity(3, n);
    let mut st =
        MaintState::initialize(&a, FFunc::Sqrt, &desk_params(), &w0, &h0, pool).unwrap();
    // double every coordinate: far outside every band
    let w: Vec<f64> = vec![2.0; n];
    let h: Vec<f64> = vec![2.0; n];
    let out = st.update_query(&w, &h).unwrap();
    assert_eq!(st.counters.matrix_updates, 1);
    assert_eq!(st.counters.vector_updates, 1);
    assert_eq!(out.w_appr, w);
    assert_eq!(out.h_appr, h);
    let rep = st.check_invariants();
    assert!(rep.max_residual <= 1e-8, "residuals: {:?}", rep.entries);
}

#[test]
fn pool_exhaustion_surfaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (d, n) = (2, 4);
    let a = random_full_rank(d, n, &mut rng);
    let w0 = vec![1.0; n];
    let h0 = vec![1.0; n];
    let pool = SketchPool::identity(1, n);
    let mut st =
        MaintState::initialize(&a, FFunc::Sqrt, &desk_params(), &w0, &h0, pool).unwrap();
    st.query(&w0, &h0).unwrap();
    assert!(matches!(
        st.query(&w0, &h0),
        Err(pmlp_core::Error::PoolExhausted(1))
    ));
}
