//! The stochastic central-path driver: parameterization, potential
//! bookkeeping, one-step logic, the classical fallback, LP initialization,
//! and the solve loop in both infeasible and feasible modes.

use crate::feasible::{self, FeasKind};
use crate::linalg::{self, mat_inverse, DenseMatrix};
use crate::projmaint::{FFunc, MaintCounters, MaintParams, MaintState};
use crate::sketch::SketchPool;
use crate::{Error, Result, Scalar};

// ---------------------------------------------------------------------------
// configuration

/// Which driver variant runs: the plain sketched path or the implicitly
/// feasible one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Infeasible,
    Feasible,
}

/// Sketch family for the pre-drawn pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchMode {
    Srht,
    Identity,
}

/// Solver knobs. `None` fields resolve to n-dependent defaults at solve
/// time; `paper_constants` switches the defaults to the (astronomically
/// conservative) theory values.
#[derive(Debug, Clone)]
pub struct SolverConfig<F: Scalar> {
    /// target accuracy of the returned solution
    pub delta: F,
    pub mode: SolveMode,
    pub sketch_mode: SketchMode,
    pub seed: u64,
    /// outer-iteration cap; `None` derives one from the t-schedule
    pub max_iters: Option<usize>,
    pub paper_constants: bool,
    /// level-1 refresh exponent `a`
    pub a_exp: f64,
    /// level-2 refresh exponent `a~`
    pub atilde_exp: f64,
    pub eps: Option<F>,
    pub eps_mp: Option<F>,
    pub eps_far: Option<F>,
    pub lambda: Option<F>,
    pub sketch_rows: Option<usize>,
    pub l_sketch: Option<usize>,
    pub thresh_k: Option<usize>,
    pub thresh_ktilde: Option<usize>,
}

impl<F: Scalar> Default for SolverConfig<F> {
    fn default() -> Self {
        Self {
            delta: F::from_f64_lossy(0.05),
            mode: SolveMode::Infeasible,
            sketch_mode: SketchMode::Srht,
            seed: 7,
            max_iters: None,
            paper_constants: false,
            a_exp: 8.0 / 9.0,
            atilde_exp: 2.0 / 3.0,
            eps: None,
            eps_mp: None,
            eps_far: None,
            lambda: None,
            sketch_rows: None,
            l_sketch: None,
            thresh_k: None,
            thresh_ktilde: None,
        }
    }
}

/// Fully resolved n-dependent parameters.
#[derive(Debug, Clone)]
pub struct Params<F> {
    pub eps: F,
    pub eps_mp: F,
    pub eps_far: F,
    pub lambda: F,
    pub sketch_rows: usize,
    pub l_sketch: usize,
}

impl<F: Scalar> SolverConfig<F> {
    /// Resolve the defaults for dimension `n` (of the LP the driver
    /// actually runs on), honoring explicit overrides.
    pub fn resolved(&self, n: usize) -> Params<F> {
        let nf = n as f64;
        let ln_n = nf.ln().max(1.0);
        let (eps, eps_mp, eps_far, lambda, rows) = if self.paper_constants {
            (
                1e-7 / ln_n,
                1e-5 / ln_n,
                1e-7 / (ln_n * ln_n),
                40.0 * ln_n,
                // 10^22 sqrt(n) log^10 n capped at n: always the cap here
                n,
            )
        } else {
            let e_mp = 0.05;
            (
                0.02,
                e_mp,
                e_mp / 10.0,
                (2.0 * nf.ln()).max(4.0),
                ((4.0 * nf.sqrt() * ln_n * ln_n).ceil() as usize).min(n),
            )
        };
        let l_sketch = (2.0 * nf.sqrt()).ceil() as usize;
        Params {
            eps: self.eps.unwrap_or_else(|| F::from_f64_lossy(eps)),
            eps_mp: self.eps_mp.unwrap_or_else(|| F::from_f64_lossy(eps_mp)),
            eps_far: self.eps_far.unwrap_or_else(|| F::from_f64_lossy(eps_far)),
            lambda: self.lambda.unwrap_or_else(|| F::from_f64_lossy(lambda)),
            sketch_rows: self.sketch_rows.unwrap_or(rows).clamp(1, n),
            l_sketch: self.l_sketch.unwrap_or(l_sketch).max(1),
        }
    }
}

/// A standard-form LP: min c'x s.t. Ax = b, x >= 0.
#[derive(Debug, Clone)]
pub struct LpInstance<F: Scalar> {
    pub name: String,
    pub a: DenseMatrix<F>,
    pub b: Vec<F>,
    pub c: Vec<F>,
    /// l1 diameter bound of the feasible polytope, if known
    pub r_bound: Option<F>,
}

// ---------------------------------------------------------------------------
// outputs

/// Aggregate event counts over a whole solve (both data structures,
/// across re-initializations).
#[derive(Debug, Clone, Default)]
pub struct SolveCounters {
    pub matrix_updates: usize,
    pub partial_matrix_updates: usize,
    pub vector_updates: usize,
    pub partial_vector_updates: usize,
    pub rejected_steps: usize,
    pub classical_steps: usize,
}

impl SolveCounters {
    fn absorb(&mut self, c: &MaintCounters) {
        self.matrix_updates += c.matrix_updates;
        self.partial_matrix_updates += c.partial_matrix_updates;
        self.vector_updates += c.vector_updates;
        self.partial_vector_updates += c.partial_vector_updates;
    }
}

/// One per-iteration trace record.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iter: usize,
    pub t: f64,
    pub phi: f64,
    pub k: usize,
    pub ktilde: usize,
    pub p: usize,
    pub ptilde: usize,
    /// rejected repeat-loop attempts in this iteration
    pub rejected: usize,
    pub classical: bool,
}

/// Final solver output on the original LP.
#[derive(Debug, Clone)]
pub struct Solution<F: Scalar> {
    pub x: Vec<F>,
    pub objective: F,
    pub feasibility_l1: F,
    pub iterations: usize,
    pub counters: SolveCounters,
    pub classical_steps: usize,
    pub potential_max: f64,
    /// worst relative violation of X~ dhat_s + S~ dhat_x = delta~_mu over
    /// accepted steps (infeasible mode; 0 in feasible mode)
    pub step_identity_max: f64,
    /// worst ||A x_mat - b||_1 / (||A||_1 ||x||_1 + ||b||_1) over
    /// iterations of the modified LP (feasible mode; 0 otherwise)
    pub feasibility_ratio_max: f64,
    pub trace: Vec<TraceRecord>,
}

// ---------------------------------------------------------------------------
// potential

/// `Phi_lambda(mu/t - 1)` and its gradient `lambda sinh(lambda (mu_i/t - 1))`.
pub fn potential<F: Scalar>(mu: &[F], t: F, lambda: F) -> Result<(F, Vec<F>)> {
    let guard = F::from_f64_lossy(700.0);
    let mut phi = F::zero();
    let mut grad = Vec::with_capacity(mu.len());
    for &m in mu {
        let arg = lambda * (m / t - F::one());
        if arg.abs() > guard {
            return Err(Error::PotentialBlowup(arg.abs().to_f64_lossy()));
        }
        phi = phi + arg.cosh();
        grad.push(lambda * arg.sinh());
    }
    Ok((phi, grad))
}

/// Induced l1 norm of a matrix (max absolute column sum).
pub fn mat_norm1<F: Scalar>(a: &DenseMatrix<F>) -> F {
    let mut best = F::zero();
    for j in 0..a.cols {
        let mut s = F::zero();
        for i in 0..a.rows {
            s = s + a.get(i, j).abs();
        }
        if s > best {
            best = s;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// complexity planner

/// Optimal refresh exponents and the resulting runtime exponent for matrix
/// multiplication exponent `omega` and rectangular exponent `alpha`.
pub fn plan_exponents(omega: f64, alpha: f64) -> (f64, f64, f64) {
    let a = alpha.min(4.0 * omega / (3.0 * (2.0 * omega - 1.0)));
    let atilde = (alpha * a).min(2.0 / (2.0 * omega - 1.0));
    let exponent = omega
        .max(2.5 - a / 2.0)
        .max(1.5 + a - atilde / 2.0)
        .max(0.5 + (omega - 1.0) * atilde + a);
    (a, atilde, exponent)
}

// ---------------------------------------------------------------------------
// LP initialization

/// How to map a modified-LP solution back to the original LP.
#[derive(Debug, Clone)]
pub struct RecoverInfo<F> {
    pub n_orig: usize,
    /// factor that undoes the objective rescaling (||c||_inf / delta')
    pub obj_scale: F,
    pub delta_prime: F,
    pub m_big: F,
}

impl<F: Scalar> RecoverInfo<F> {
    /// Drop the two artificial coordinates.
    pub fn recover(&self, x_mod: &[F]) -> Vec<F> {
        x_mod[..self.n_orig].to_vec()
    }
}

/// The modified LP with a trivially centered starting point.
#[derive(Debug, Clone)]
pub struct InitLp<F: Scalar> {
    pub a_bar: DenseMatrix<F>,
    pub b_bar: Vec<F>,
    pub c_bar: Vec<F>,
    pub x0: Vec<F>,
    pub s0: Vec<F>,
    pub recover: RecoverInfo<F>,
}

/// Standard big-M style transformation: two artificial columns plus a
/// summing row give an interior starting pair with x0*s0 within delta' of 1
/// coordinatewise and exact primal/dual feasibility.
pub fn init_lp<F: Scalar>(
    a: &DenseMatrix<F>,
    b: &[F],
    c: &[F],
    delta: F,
) -> Result<InitLp<F>> {
    let (d, n) = (a.rows, a.cols);
    if d == 0 || n == 0 || d > n {
        return Err(Error::InvalidDim(format!("need 0 < d <= n, got d = {d}, n = {n}")));
    }
    if b.len() != d || c.len() != n {
        return Err(Error::DimMismatch(format!(
            "b/c length {}/{} vs d = {d}, n = {n}",
            b.len(),
            c.len()
        )));
    }
    if !(delta > F::zero()) {
        return Err(Error::DegenerateInput("delta must be positive".into()));
    }
    let delta_p = delta.min(F::from_f64_lossy(0.05)) / F::from_f64_lossy(2.0);
    // power of two so that (M_b * z) * (1/M_b) = z without rounding
    let m_big_raw = F::from_f64_lossy(4.0 * n as f64) / delta_p;
    let m_big = F::from_f64_lossy((m_big_raw.to_f64_lossy().log2().ceil()).exp2());
    let inv_m = F::one() / m_big;

    // A_bar = [A, 0, M_b (b - A 1); 1', 1, 1]
    let ones = vec![F::one(); n];
    let a_ones = a.matvec(&ones);
    let mut a_bar = DenseMatrix::zeros(d + 1, n + 2);
    for i in 0..d {
        for j in 0..n {
            a_bar.set(i, j, a.get(i, j));
        }
        a_bar.set(i, n + 1, m_big * (b[i] - a_ones[i]));
    }
    for j in 0..n + 2 {
        a_bar.set(d, j, F::one());
    }

    let mut b_bar = b.to_vec();
    b_bar.push(F::from_f64_lossy((n + 1) as f64) + inv_m);

    let c_norm = linalg::norm_inf(c);
    let scale = if c_norm > F::zero() { delta_p / c_norm } else { F::zero() };
    let mut c_bar: Vec<F> = c.iter().map(|&ci| scale * ci).collect();
    c_bar.push(F::zero());
    c_bar.push(m_big);

    let mut x0 = vec![F::one(); n + 1];
    x0.push(inv_m);
    // s0 = c_bar - A_bar' y0 with y0 = (0_d, -1), i.e. c_bar + 1
    let s0: Vec<F> = c_bar.iter().map(|&ci| ci + F::one()).collect();

    let obj_scale = if c_norm > F::zero() { c_norm / delta_p } else { F::one() };
    Ok(InitLp {
        a_bar,
        b_bar,
        c_bar,
        x0,
        s0,
        recover: RecoverInfo { n_orig: n, obj_scale, delta_prime: delta_p, m_big },
    })
}

// ---------------------------------------------------------------------------
// one step of the central path

/// Everything an accepted infeasible-mode step exposes.
#[derive(Debug, Clone)]
pub struct StepOut<F> {
    pub dx: Vec<F>,
    pub ds: Vec<F>,
    pub x_tilde: Vec<F>,
    pub s_tilde: Vec<F>,
    pub delta_mu: Vec<F>,
    pub w_appr: Vec<F>,
    pub k: usize,
    pub ktilde: usize,
    pub p: usize,
    pub ptilde: usize,
}

/// One sketched central-path step (infeasible mode). Both structures must
/// share the sketch cursor; `mp_t` runs `f(x) = sqrt(x)` on `(x/s, xs)` and
/// `mp_phi` runs the potential-gradient ratio on `(x/s, xs/t)`.
#[allow(clippy::too_many_arguments)]
pub fn one_step<F: Scalar>(
    mp_t: &mut MaintState<F>,
    mp_phi: &mut MaintState<F>,
    x_bar: &[F],
    s_bar: &[F],
    t: F,
    t_new: F,
    eps: F,
    lambda: F,
) -> Result<StepOut<F>> {
    let n = x_bar.len();
    let w_bar = linalg::vdiv(x_bar, s_bar);
    let mu_bar = linalg::vmul(x_bar, s_bar);
    let out_t = mp_t.update_query(&w_bar, &mu_bar)?;
    let mu_over_t: Vec<F> = mu_bar.iter().map(|&m| m / t).collect();
    let out_phi = mp_phi.update_query(&w_bar, &mu_over_t)?;
    debug_assert!(
        out_t
            .w_appr
            .iter()
            .zip(&out_phi.w_appr)
            .all(|(&a, &b)| a == b),
        "the two structures must return the same w approximation"
    );

    let w_t = &out_t.w_appr;
    let g_phi = &out_phi.h_appr;
    let q_phi = mp_phi.f.eval_vec(g_phi);
    let mu_t: Vec<F> = g_phi.iter().map(|&g| g * t).collect();
    let x_t: Vec<F> = (0..n).map(|i| (mu_t[i] * w_t[i]).sqrt()).collect();
    let s_t: Vec<F> = (0..n).map(|i| (mu_t[i] / w_t[i]).sqrt()).collect();

    let ratio = t_new / t - F::one();
    let grad: Vec<F> = mu_t
        .iter()
        .map(|&m| lambda * (lambda * (m / t - F::one())).sinh())
        .collect();
    let gn = linalg::norm2(&grad);
    if !gn.is_finite() {
        return Err(Error::PotentialBlowup(f64::INFINITY));
    }
    // ZeroGradient: an exactly centered iterate drops the potential term
    let half = F::from_f64_lossy(0.5);
    let phi_coef = if gn < F::from_f64_lossy(1e-14) {
        F::zero()
    } else {
        -half * eps * t_new / (t.sqrt() * gn)
    };

    let mut delta_mu = Vec::with_capacity(n);
    let mut p_mu = Vec::with_capacity(n);
    for i in 0..n {
        let d_t = ratio * mu_t[i];
        let d_phi = phi_coef * t.sqrt() * (mu_t[i] / t).sqrt() * q_phi[i];
        delta_mu.push(d_t + d_phi);
        p_mu.push(ratio * out_t.r[i] + phi_coef * out_phi.r[i]);
    }
    let mut dx = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    for i in 0..n {
        let sq = mu_t[i].sqrt();
        ds.push(s_t[i] / sq * p_mu[i]);
        dx.push(delta_mu[i] / s_t[i] - x_t[i] / sq * p_mu[i]);
    }
    Ok(StepOut {
        dx,
        ds,
        x_tilde: x_t,
        s_tilde: s_t,
        delta_mu,
        w_appr: out_t.w_appr,
        k: out_t.k,
        ktilde: out_t.ktilde,
        p: out_t.p,
        ptilde: out_t.ptilde,
    })
}

/// Everything an accepted feasible-mode step exposes.
#[derive(Debug, Clone)]
pub struct FeasStepOut<F> {
    pub dx: Vec<F>,
    pub ds: Vec<F>,
    /// q_{t,x} + q_{Phi,x}: the exact-direction part the driver adds to x
    pub q_sum: Vec<F>,
    pub w_appr: Vec<F>,
    /// mp_t's h approximation (the mu proxy), used at re-initialization
    pub h_appr_t: Vec<F>,
    pub k: usize,
    pub ktilde: usize,
    pub p: usize,
    pub ptilde: usize,
}

/// The feasible-mode combined update: UpdateG first (its output feeds the
/// u-accumulation hooks inside UpdateV and Query), then UpdateV, then Query,
/// then the three scaled output vectors.
#[allow(clippy::type_complexity)]
fn feas_update_query<F: Scalar>(
    mp: &mut MaintState<F>,
    w_new: &[F],
    h_new: &[F],
) -> Result<(Vec<F>, Vec<F>, Vec<F>, Vec<F>, Vec<F>, usize, usize, usize, usize)> {
    let (h_appr, p, ptilde) = mp.update_g(h_new)?;
    let (w_appr, k, ktilde) = mp.update_v(w_new, Some(&h_appr))?;
    let r = mp.query(&w_appr, &h_appr)?;
    let ext = mp.feas.as_ref().expect("feasible extension present");
    let c = match feasible::scalar_c(ext, &h_appr) {
        Ok(c) => c,
        Err(Error::ZeroGradient) => F::zero(),
        Err(e) => return Err(e),
    };
    let fh = mp.f.eval_vec(&h_appr);
    let n = w_appr.len();
    let mut q_x = Vec::with_capacity(n);
    let mut p_x = Vec::with_capacity(n);
    let mut p_s = Vec::with_capacity(n);
    for i in 0..n {
        let sw = w_appr[i].sqrt();
        q_x.push(sw * c * fh[i]);
        p_x.push(sw * c * r[i]);
        p_s.push(c * r[i] / sw);
    }
    Ok((q_x, p_x, p_s, w_appr, h_appr, k, ktilde, p, ptilde))
}

/// One feasible-mode step: both structures accumulate their implicit
/// corrections; the caller applies `q_sum` to the implicit x on acceptance.
pub fn one_step_feasible<F: Scalar>(
    mp_t: &mut MaintState<F>,
    mp_phi: &mut MaintState<F>,
    x_bar: &[F],
    s_bar: &[F],
    t: F,
) -> Result<FeasStepOut<F>> {
    let w_bar = linalg::vdiv(x_bar, s_bar);
    let mu_bar = linalg::vmul(x_bar, s_bar);
    let (q_tx, p_tx, p_ts, w_appr, h_appr_t, k, ktilde, p, ptilde) =
        feas_update_query(mp_t, &w_bar, &mu_bar)?;
    let mu_over_t: Vec<F> = mu_bar.iter().map(|&m| m / t).collect();
    let (q_px, p_px, p_ps, _, _, _, _, _, _) = feas_update_query(mp_phi, &w_bar, &mu_over_t)?;
    let n = w_bar.len();
    let mut dx = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    let mut q_sum = Vec::with_capacity(n);
    for i in 0..n {
        q_sum.push(q_tx[i] + q_px[i]);
        dx.push(q_tx[i] + q_px[i] - (p_tx[i] + p_px[i]));
        ds.push(p_ts[i] + p_ps[i]);
    }
    Ok(FeasStepOut { dx, ds, q_sum, w_appr, h_appr_t, k, ktilde, p, ptilde })
}

// ---------------------------------------------------------------------------
// classical fallback

/// Apply `P v` with `P = sqrt(W) A'(AWA')^{-1} A sqrt(W)` from scratch.
fn apply_projection<F: Scalar>(a: &DenseMatrix<F>, w: &[F], v: &[F]) -> Result<Vec<F>> {
    let sw: Vec<F> = w.iter().map(|&x| x.sqrt()).collect();
    let swv = linalg::vmul(&sw, v);
    let u = a.matvec(&swv);
    let awat = a.diag_mul_right(w).matmul(&a.transpose());
    let inv = mat_inverse(&awat)?;
    let y = inv.matvec(&u);
    Ok(linalg::vmul(&sw, &a.matvec_t(&y)))
}

/// Exact (unsketched) recentering: Newton steps toward `xs = t_new` with a
/// halving line search enforcing positivity and potential non-increase,
/// until `max_i |x_i s_i / t_new - 1| <= 0.01` or `100 sqrt(n)` steps.
pub fn classical_step<F: Scalar>(
    a: &DenseMatrix<F>,
    x: &[F],
    s: &[F],
    t_new: F,
    lambda: F,
) -> Result<(Vec<F>, Vec<F>)> {
    let n = x.len();
    let cap = (100.0 * (n as f64).sqrt()).ceil() as usize;
    let target = F::from_f64_lossy(0.01);
    let mut x = x.to_vec();
    let mut s = s.to_vec();
    for _ in 0..cap {
        let mu = linalg::vmul(&x, &s);
        let dev = mu
            .iter()
            .map(|&m| (m / t_new - F::one()).abs())
            .fold(F::zero(), F::max);
        if dev <= target {
            return Ok((x, s));
        }
        let w = linalg::vdiv(&x, &s);
        let sqmu: Vec<F> = mu.iter().map(|&m| m.sqrt()).collect();
        let v: Vec<F> = (0..n).map(|i| (t_new - mu[i]) / sqmu[i]).collect();
        let pv = apply_projection(a, &w, &v)?;
        let dx: Vec<F> = (0..n).map(|i| x[i] / sqmu[i] * (v[i] - pv[i])).collect();
        let ds: Vec<F> = (0..n).map(|i| s[i] / sqmu[i] * pv[i]).collect();

        let phi_cur = potential(&mu, t_new, lambda).ok().map(|(p, _)| p);
        let mut eta = F::one();
        let mut accepted = false;
        for _ in 0..64 {
            let xc: Vec<F> = (0..n).map(|i| x[i] + eta * dx[i]).collect();
            let sc: Vec<F> = (0..n).map(|i| s[i] + eta * ds[i]).collect();
            let positive = xc.iter().all(|&v| v > F::zero()) && sc.iter().all(|&v| v > F::zero());
            if positive {
                let muc = linalg::vmul(&xc, &sc);
                let ok = match (phi_cur, potential(&muc, t_new, lambda)) {
                    (Some(p0), Ok((p1, _))) => p1 <= p0 * (F::one() + F::from_f64_lossy(1e-12)),
                    // the current point overflows the guard: any candidate
                    // with a finite potential is progress
                    (None, Ok(_)) => true,
                    // both overflow: fall back to the max deviation
                    (None, Err(_)) => {
                        let devc = muc
                            .iter()
                            .map(|&m| (m / t_new - F::one()).abs())
                            .fold(F::zero(), F::max);
                        devc < dev
                    }
                    (Some(_), Err(_)) => false,
                };
                if ok {
                    x = xc;
                    s = sc;
                    accepted = true;
                    break;
                }
            }
            eta = eta * F::from_f64_lossy(0.5);
        }
        if !accepted {
            return Err(Error::NoConvergence(cap));
        }
    }
    Err(Error::NoConvergence(cap))
}

// ---------------------------------------------------------------------------
// the solve loop

struct Driver<'a, F: Scalar> {
    a: &'a DenseMatrix<F>,
    cfg: &'a SolverConfig<F>,
    prm: Params<F>,
    maint: MaintParams<F>,
    seed_ctr: u64,
    counters: SolveCounters,
    trace: Vec<TraceRecord>,
    potential_max: f64,
    step_identity_max: f64,
    feasibility_ratio_max: f64,
}

impl<'a, F: Scalar> Driver<'a, F> {
    fn fresh_pool(&mut self) -> SketchPool<F> {
        let n = self.a.cols;
        match self.cfg.sketch_mode {
            SketchMode::Identity => SketchPool::identity(self.prm.l_sketch, n),
            SketchMode::Srht => {
                self.seed_ctr = self.seed_ctr.wrapping_add(1);
                SketchPool::srht(self.prm.l_sketch, self.prm.sketch_rows, n, self.seed_ctr)
            }
        }
    }

    /// Build both structures at `(w0, h_t)` / `(w0, h_phi)` with a fresh
    /// shared pool; in feasible mode the implicit extension is attached.
    fn init_states(
        &mut self,
        w0: &[F],
        h_t: &[F],
        h_phi: &[F],
    ) -> Result<(MaintState<F>, MaintState<F>)> {
        let pool = self.fresh_pool();
        let mut mp_t = MaintState::initialize(self.a, FFunc::Sqrt, &self.maint, w0, h_t, pool.clone())?;
        let mut mp_phi = MaintState::initialize(
            self.a,
            FFunc::SinhRatio { lambda: self.prm.lambda },
            &self.maint,
            w0,
            h_phi,
            pool,
        )?;
        if self.cfg.mode == SolveMode::Feasible {
            feasible::attach(&mut mp_t, FeasKind::T, self.prm.eps);
            feasible::attach(&mut mp_phi, FeasKind::Phi { lambda: self.prm.lambda }, self.prm.eps);
        }
        Ok((mp_t, mp_phi))
    }

    fn retire(&mut self, mp_t: &MaintState<F>, mp_phi: &MaintState<F>) {
        self.counters.absorb(&mp_t.counters);
        self.counters.absorb(&mp_phi.counters);
    }
}

fn phi_or_inf<F: Scalar>(mu: &[F], t: F, lambda: F) -> f64 {
    match potential(mu, t, lambda) {
        Ok((p, _)) => p.to_f64_lossy(),
        Err(_) => f64::INFINITY,
    }
}

fn default_max_iters(n: usize, eps: f64, t_end: f64) -> usize {
    let shrink = eps / (3.0 * (n as f64).sqrt());
    (((1.0 / t_end).ln() / shrink).ceil() as usize) * 2 + 1000
}

/// Heuristic l1 diameter bound when the instance does not carry one:
/// `n * max|b| / (smallest nonzero |A_ij|)`, floored at n.
pub fn default_r_bound<F: Scalar>(a: &DenseMatrix<F>, b: &[F]) -> F {
    let n = F::from_f64_lossy(a.cols as f64);
    let bmax = linalg::norm_inf(b).max(F::one());
    let mut pivot = F::infinity();
    for i in 0..a.rows {
        for j in 0..a.cols {
            let v = a.get(i, j).abs();
            if v > F::zero() && v < pivot {
                pivot = v;
            }
        }
    }
    if !pivot.is_finite() {
        pivot = F::one();
    }
    (n * bmax / pivot).max(n)
}

/// Solve the LP: rescale so the polytope fits inside the l1 ball of radius
/// n, modify to a well-centered standard form, run the sketched
/// central-path loop, and map the iterate back.
pub fn solve<F: Scalar>(lp: &LpInstance<F>, cfg: &SolverConfig<F>) -> Result<Solution<F>> {
    // substitute x = (R/n) z so that ||z||_1 <= n on the feasible set and
    // the summing row of the modified LP cannot cut off the optimum
    let r_eff = lp
        .r_bound
        .unwrap_or_else(|| default_r_bound(&lp.a, &lp.b))
        .max(F::one());
    let x_scale = r_eff / F::from_f64_lossy(lp.a.cols as f64);
    let a_z = lp.a.scale(x_scale);
    let c_z: Vec<F> = lp.c.iter().map(|&v| v * x_scale).collect();
    let init = init_lp(&a_z, &lp.b, &c_z, cfg.delta)?;
    let a = init.a_bar.clone();
    let n = a.cols;
    let prm = cfg.resolved(n);
    let mut maint = MaintParams::new(prm.eps_mp, prm.eps_far, cfg.a_exp, cfg.atilde_exp);
    maint.thresh_k = cfg.thresh_k;
    maint.thresh_ktilde = cfg.thresh_ktilde;

    let lambda = prm.lambda;
    let eps = prm.eps;
    let delta_loop = (cfg.delta / F::from_f64_lossy(2.0)).min(F::one() / lambda);
    let n_f = F::from_f64_lossy(n as f64);
    let t_end = delta_loop * delta_loop / (F::from_f64_lossy(32.0) * n_f * n_f * n_f);
    let max_iters = cfg
        .max_iters
        .unwrap_or_else(|| default_max_iters(n, eps.to_f64_lossy(), t_end.to_f64_lossy()));

    let mut drv = Driver {
        a: &a,
        cfg,
        prm: prm.clone(),
        maint,
        seed_ctr: cfg.seed,
        counters: SolveCounters::default(),
        trace: Vec::new(),
        potential_max: 0.0,
        step_identity_max: 0.0,
        feasibility_ratio_max: 0.0,
    };

    let x_mod = match cfg.mode {
        SolveMode::Infeasible => run_infeasible(&mut drv, &init, t_end, max_iters)?,
        SolveMode::Feasible => run_feasible(&mut drv, &init, t_end, max_iters)?,
    };

    // tiny negative dust from the implicit representation is clamped; any
    // real violation would fail the end-to-end bound tests anyway
    let floor = F::from_f64_lossy(-1e-9);
    let x_rec: Vec<F> = init
        .recover
        .recover(&x_mod)
        .into_iter()
        .map(|v| v * x_scale)
        .map(|v| if v < F::zero() && v > floor { F::zero() } else { v })
        .collect();
    let objective = linalg::dot(&lp.c, &x_rec);
    let resid = linalg::vsub(&lp.a.matvec(&x_rec), &lp.b);
    let iterations = drv.trace.len();
    Ok(Solution {
        x: x_rec,
        objective,
        feasibility_l1: linalg::norm1(&resid),
        iterations,
        classical_steps: drv.counters.classical_steps,
        counters: drv.counters,
        potential_max: drv.potential_max,
        step_identity_max: drv.step_identity_max,
        feasibility_ratio_max: drv.feasibility_ratio_max,
        trace: drv.trace,
    })
}

/// Check the accepted-step identity and the per-iteration movement bounds
/// (debug builds only).
fn debug_step_checks<F: Scalar>(
    x: &[F],
    s: &[F],
    x_new: &[F],
    s_new: &[F],
    eps: F,
) {
    if cfg!(debug_assertions) {
        let bound = F::from_f64_lossy(10.0) * eps;
        for i in 0..x.len() {
            let wr = (x_new[i] / s_new[i]) / (x[i] / s[i]) - F::one();
            let mr = (x_new[i] * s_new[i]) / (x[i] * s[i]) - F::one();
            debug_assert!(wr.abs() <= bound, "w movement {wr} exceeds 10 eps at {i}");
            debug_assert!(mr.abs() <= bound, "mu movement {mr} exceeds 10 eps at {i}");
        }
    }
}

fn run_infeasible<F: Scalar>(
    drv: &mut Driver<F>,
    init: &InitLp<F>,
    t_end: F,
    max_iters: usize,
) -> Result<Vec<F>> {
    let n = drv.a.cols;
    let n_cube = F::from_f64_lossy((n as f64).powi(3));
    let three_eps = F::from_f64_lossy(3.0) * drv.prm.eps;
    let lambda = drv.prm.lambda;
    let mut x = init.x0.clone();
    let mut s = init.s0.clone();
    let mut t = F::one();
    let (mut mp_t, mut mp_phi) = {
        let w0 = linalg::vdiv(&x, &s);
        let h0 = linalg::vmul(&x, &s);
        drv.init_states(&w0, &h0, &h0)?
    };
    let mut iter = 0usize;
    while t > t_end {
        iter += 1;
        if iter > max_iters {
            return Err(Error::MaxItersExceeded(max_iters));
        }
        let shrink = F::one() - drv.prm.eps / (F::from_f64_lossy(3.0) * F::from_f64_lossy(n as f64).sqrt());
        let t_new = shrink * t;

        let mut rejected = 0usize;
        let mut force_classical = false;
        let mut step = None;
        while step.is_none() && !force_classical {
            match one_step(&mut mp_t, &mut mp_phi, &x, &s, t, t_new, drv.prm.eps, lambda) {
                Ok(st) => {
                    let rx = linalg::norm_inf(&linalg::vdiv(&st.dx, &x));
                    let rs = linalg::norm_inf(&linalg::vdiv(&st.ds, &s));
                    if rx <= three_eps && rs <= three_eps {
                        step = Some(st);
                    } else {
                        rejected += 1;
                        drv.counters.rejected_steps += 1;
                        if rejected > 1000 {
                            return Err(Error::NoConvergence(rejected));
                        }
                    }
                }
                Err(Error::PoolExhausted(_)) => {
                    drv.retire(&mp_t, &mp_phi);
                    let w0 = linalg::vdiv(&x, &s);
                    let h0 = linalg::vmul(&x, &s);
                    let h_phi: Vec<F> = h0.iter().map(|&m| m / t).collect();
                    let (nt, np) = drv.init_states(&w0, &h0, &h_phi)?;
                    mp_t = nt;
                    mp_phi = np;
                }
                Err(Error::PotentialBlowup(_)) => {
                    force_classical = true;
                }
                Err(e) => return Err(e),
            }
        }

        let (x_new, s_new, phi, classical, kk) = if let (Some(st), false) = (step, force_classical)
        {
            let x_new = linalg::vadd(&x, &st.dx);
            let s_new = linalg::vadd(&s, &st.ds);
            // step identity residual
            let mut worst = 0.0f64;
            for i in 0..n {
                let lhs = st.x_tilde[i] * st.ds[i] + st.s_tilde[i] * st.dx[i];
                let scale = st.delta_mu[i].abs().max(F::one()).to_f64_lossy();
                let resid = (lhs - st.delta_mu[i]).abs().to_f64_lossy() / scale;
                worst = worst.max(resid);
            }
            drv.step_identity_max = drv.step_identity_max.max(worst);
            debug_step_checks(&x, &s, &x_new, &s_new, drv.prm.eps);
            let mu_new = linalg::vmul(&x_new, &s_new);
            let phi = phi_or_inf(&mu_new, t, lambda);
            let classical = !(phi <= n_cube.to_f64_lossy());
            (x_new, s_new, phi, classical, (st.k, st.ktilde, st.p, st.ptilde))
        } else {
            (x.clone(), s.clone(), f64::INFINITY, true, (0, 0, 0, 0))
        };

        let (x_new, s_new) = if classical {
            drv.counters.classical_steps += 1;
            let (xc, sc) = classical_step(drv.a, &x, &s, t_new, lambda)?;
            drv.retire(&mp_t, &mp_phi);
            let w0 = linalg::vdiv(&xc, &sc);
            let h0 = linalg::vmul(&xc, &sc);
            let h_phi: Vec<F> = h0.iter().map(|&m| m / t).collect();
            let (nt, np) = drv.init_states(&w0, &h0, &h_phi)?;
            mp_t = nt;
            mp_phi = np;
            (xc, sc)
        } else {
            (x_new, s_new)
        };

        drv.potential_max = drv.potential_max.max(phi);
        drv.trace.push(TraceRecord {
            iter,
            t: t.to_f64_lossy(),
            phi,
            k: kk.0,
            ktilde: kk.1,
            p: kk.2,
            ptilde: kk.3,
            rejected,
            classical,
        });
        x = x_new;
        s = s_new;
        t = t_new;
    }
    drv.retire(&mp_t, &mp_phi);
    Ok(x)
}

fn run_feasible<F: Scalar>(
    drv: &mut Driver<F>,
    init: &InitLp<F>,
    t_end: F,
    max_iters: usize,
) -> Result<Vec<F>> {
    let n = drv.a.cols;
    let n_cube = F::from_f64_lossy((n as f64).powi(3));
    let five_eps = F::from_f64_lossy(5.0) * drv.prm.eps;
    let lambda = drv.prm.lambda;
    let sqrt_n = (n as f64).sqrt();
    let b_norm1 = linalg::norm1(&init.b_bar);
    let a_norm1 = mat_norm1(drv.a);

    // implicit accumulators x, s and explicit sketched iterates x_bar, s_bar
    let mut x = init.x0.clone();
    let mut s = init.s0.clone();
    let mut x_bar = x.clone();
    let mut s_bar = s.clone();
    let mut w_old = linalg::vdiv(&x, &s);
    let mut t = F::one();
    let mut t_old = t;
    let mut j = 0usize;

    let (mut mp_t, mut mp_phi) = {
        let w0 = linalg::vdiv(&x, &s);
        let h0 = linalg::vmul(&x, &s);
        drv.init_states(&w0, &h0, &h0)?
    };

    let mut iter = 0usize;
    while t > t_end {
        iter += 1;
        if iter > max_iters {
            return Err(Error::MaxItersExceeded(max_iters));
        }
        let shrink = F::one() - drv.prm.eps / (F::from_f64_lossy(3.0) * F::from_f64_lossy(n as f64).sqrt());
        let t_new = shrink * t;
        j += 1;

        let mut rejected = 0usize;
        let mut force_classical = false;
        let mut step = None;
        while step.is_none() && !force_classical {
            if let Some(ext) = mp_t.feas.as_mut() {
                ext.set_epoch(t, t_new);
            }
            if let Some(ext) = mp_phi.feas.as_mut() {
                ext.set_epoch(t, t_new);
            }
            let snap_t = mp_t.clone();
            let snap_phi = mp_phi.clone();
            match one_step_feasible(&mut mp_t, &mut mp_phi, &x_bar, &s_bar, t) {
                Ok(st) => {
                    let rx = linalg::norm_inf(&linalg::vdiv(&st.dx, &x_bar));
                    let rs = linalg::norm_inf(&linalg::vdiv(&st.ds, &s_bar));
                    if rx <= five_eps && rs <= five_eps {
                        step = Some(st);
                    } else {
                        // revoke everything but the sketch cursor
                        let (lt, lp) = (mp_t.l, mp_phi.l);
                        mp_t = snap_t;
                        mp_phi = snap_phi;
                        mp_t.l = lt;
                        mp_phi.l = lp;
                        rejected += 1;
                        drv.counters.rejected_steps += 1;
                        if rejected > 1000 {
                            return Err(Error::NoConvergence(rejected));
                        }
                    }
                }
                Err(Error::PoolExhausted(_)) => {
                    // flush the pending corrections, then rebuild with a
                    // fresh pool so nothing is lost
                    let (xm, sm) = feasible::materialize(&x, &s, &mp_t, &mp_phi);
                    x = xm;
                    s = sm;
                    drv.retire(&mp_t, &mp_phi);
                    let w0 = linalg::vdiv(&x_bar, &s_bar);
                    let h0 = linalg::vmul(&x_bar, &s_bar);
                    let h_phi: Vec<F> = h0.iter().map(|&m| m / t).collect();
                    let (nt, np) = drv.init_states(&w0, &h0, &h_phi)?;
                    mp_t = nt;
                    mp_phi = np;
                    w_old = w0;
                    j = 1;
                    t_old = t;
                }
                Err(Error::PotentialBlowup(_)) => force_classical = true,
                Err(e) => return Err(e),
            }
        }

        let (phi, classical, kk) = if let (Some(st), false) = (step, force_classical) {
            x = linalg::vadd(&x, &st.q_sum);
            x_bar = linalg::vadd(&x_bar, &st.dx);
            s_bar = linalg::vadd(&s_bar, &st.ds);
            feasible::make_feasible(
                &mut x_bar,
                &mut s_bar,
                &x,
                &s,
                &mut w_old,
                &st.w_appr,
                &mp_t,
                &mp_phi,
            );
            if j as f64 > sqrt_n || t < t_old / F::from_f64_lossy(2.0) {
                let (xm, sm) = feasible::materialize(&x, &s, &mp_t, &mp_phi);
                x = xm;
                s = sm;
                drv.retire(&mp_t, &mp_phi);
                let h_phi: Vec<F> = st.h_appr_t.iter().map(|&m| m / t).collect();
                let (nt, np) = drv.init_states(&st.w_appr, &st.h_appr_t, &h_phi)?;
                mp_t = nt;
                mp_phi = np;
                w_old = st.w_appr.clone();
                j = 1;
                t_old = t;
            }
            let mu_bar = linalg::vmul(&x_bar, &s_bar);
            let phi = phi_or_inf(&mu_bar, t, lambda);
            (phi, !(phi <= n_cube.to_f64_lossy()), (st.k, st.ktilde, st.p, st.ptilde))
        } else {
            (f64::INFINITY, true, (0, 0, 0, 0))
        };

        if classical {
            drv.counters.classical_steps += 1;
            let (xc, sc) = classical_step(drv.a, &x_bar, &s_bar, t_new, lambda)?;
            x_bar = xc;
            s_bar = sc;
            // pending corrections were either flushed above or belong to a
            // trajectory the classical step just replaced
            x = x_bar.clone();
            s = s_bar.clone();
            drv.retire(&mp_t, &mp_phi);
            let w0 = linalg::vdiv(&x_bar, &s_bar);
            let h0 = linalg::vmul(&x_bar, &s_bar);
            let h_phi: Vec<F> = h0.iter().map(|&m| m / t).collect();
            let (nt, np) = drv.init_states(&w0, &h0, &h_phi)?;
            mp_t = nt;
            mp_phi = np;
            w_old = w0;
            j = 1;
            t_old = t;
        }

        // feasibility of the materialized iterate, tracked every iteration
        let (xm, _) = feasible::materialize(&x, &s, &mp_t, &mp_phi);
        let resid = linalg::norm1(&linalg::vsub(&drv.a.matvec(&xm), &init.b_bar));
        let scale = a_norm1 * linalg::norm1(&xm) + b_norm1;
        drv.feasibility_ratio_max = drv
            .feasibility_ratio_max
            .max((resid / scale).to_f64_lossy());

        drv.potential_max = drv.potential_max.max(phi);
        drv.trace.push(TraceRecord {
            iter,
            t: t.to_f64_lossy(),
            phi,
            k: kk.0,
            ktilde: kk.1,
            p: kk.2,
            ptilde: kk.3,
            rejected,
            classical,
        });
        t = t_new;
    }
    let (xm, sm) = feasible::materialize(&x, &s, &mp_t, &mp_phi);
    drv.retire(&mp_t, &mp_phi);
    let _ = sm;
    Ok(xm)
}
