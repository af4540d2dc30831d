//! Two-level lazy projection maintenance.
//!
//! The structure keeps the sketched projection query
//! `R[l]^T R[l] sqrt(W) A^T (A W A^T)^{-1} A sqrt(W) f(h)`
//! answerable while `w` and `h` drift, by maintaining two levels of
//! approximation (`v` with a full refresh, `v~` with a cheap partial
//! refresh) and a family of low-rank correction terms. Every member is tied
//! to an explicit invariant that [`MaintState::check_invariants`] recomputes
//! by brute force.

use crate::linalg::{
    self, cols_mul_vec, mat_inverse, pad, rows_mul_dense, rows_mul_dense_vec,
    rows_mul_rows_t, rows_t_mul_rows, rows_t_mul_vec, square_mul_rows, square_mul_vec,
    DenseMatrix, IndexSet, PadMode, PaddedBlock, PaddedVec,
};
use crate::sketch::SketchPool;
use crate::{Error, Result, Scalar};

// ---------------------------------------------------------------------------
// scalar function f

/// The scalar function `f` the query applies to `h`; closed under cloning so
/// the state stays a plain value type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FFunc<F> {
    /// `f(x) = sqrt(x)`
    Sqrt,
    /// `f(x) = lambda * sinh(lambda * (x - 1)) / sqrt(x)`
    SinhRatio { lambda: F },
}

impl<F: Scalar> FFunc<F> {
    pub fn eval(&self, x: F) -> F {
        match self {
            FFunc::Sqrt => x.sqrt(),
            FFunc::SinhRatio { lambda } => {
                *lambda * (*lambda * (x - F::one())).sinh() / x.sqrt()
            }
        }
    }

    pub fn eval_vec(&self, h: &[F]) -> Vec<F> {
        h.iter().map(|&x| self.eval(x)).collect()
    }
}

// ---------------------------------------------------------------------------
// soft threshold helpers

/// Soft-threshold shaping function: quadratic ramp up to `eps_mp`, inverted
/// quadratic up to `2 eps_mp`, then flat at `eps_mp`.
pub fn psi<F: Scalar>(x: F, eps_mp: F) -> F {
    let ax = x.abs();
    let two = F::from_f64_lossy(2.0);
    if ax <= eps_mp {
        ax * ax / (two * eps_mp)
    } else if ax <= two * eps_mp {
        let r = two * eps_mp - ax;
        eps_mp - r * r / (two * eps_mp)
    } else {
        eps_mp
    }
}

/// Score-driven partial overwrite of `v` by `w_new`.
///
/// Sorts the scores descending (stable, ties by ascending index), takes the
/// `k` entries with score `>= eps`, and when `k` reaches the threshold
/// expands it geometrically (factor 1.5) until the sorted scores drop by the
/// decay factor or everything is taken. Returns the new vector and `k`.
pub fn soft_threshold<F: Scalar>(
    y: &[F],
    w_new: &[F],
    v: &[F],
    eps: F,
    threshold: usize,
    decay: F,
) -> (Vec<F>, usize) {
    let n = y.len();
    debug_assert_eq!(w_new.len(), n);
    debug_assert_eq!(v.len(), n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable descending sort keeps ties in ascending index order
    order.sort_by(|&i, &j| y[j].partial_cmp(&y[i]).unwrap());
    let mut k = y.iter().filter(|&&s| s >= eps).count();
    if k >= threshold && k > 0 {
        loop {
            let expanded = ((k as f64) * 1.5).ceil() as usize;
            k = expanded.min(n);
            if k == n {
                break;
            }
            let back = ((k as f64) / 1.5).ceil() as usize;
            // 1-indexed positions k and ceil(k/1.5)
            if y[order[k - 1]] < decay * y[order[back - 1]] {
                break;
            }
        }
    }
    let mut out = v.to_vec();
    for &i in order.iter().take(k) {
        out[i] = w_new[i];
    }
    (out, k)
}

/// Snap entries of `v_tmp` that changed but stayed within the `eps_far`
/// relative band of `v` back to `v`, so the level sets stay separated.
pub fn adjust<F: Scalar>(v_tmp: &[F], v_tilde: &[F], v: &[F], eps_far: F) -> Vec<F> {
    let n = v_tmp.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = (F::one() - eps_far) * v[i];
        let hi = (F::one() + eps_far) * v[i];
        if v_tmp[i] != v_tilde[i] && v_tmp[i] >= lo && v_tmp[i] <= hi {
            out.push(v[i]);
        } else {
            out.push(v_tmp[i]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// parameters

/// Tunable knobs of the maintenance structure.
#[derive(Debug, Clone)]
pub struct MaintParams<F> {
    pub eps_mp: F,
    pub eps_far: F,
    /// level-1 exponent `a`: full refresh threshold is `ceil(n^a)`
    pub a_exp: f64,
    /// level-2 exponent `a~`: partial refresh threshold is `ceil(n^a~)`
    pub atilde_exp: f64,
    /// explicit override of the full-refresh threshold
    pub thresh_k: Option<usize>,
    /// explicit override of the partial-refresh threshold
    pub thresh_ktilde: Option<usize>,
    /// explicit override of the padded-block capacity
    pub capacity: Option<usize>,
    /// soft-threshold decay factor; default `max(0, 1 - 1/ln n)`
    pub st_decay: Option<f64>,
}

impl<F: Scalar> MaintParams<F> {
    pub fn new(eps_mp: F, eps_far: F, a_exp: f64, atilde_exp: f64) -> Self {
        Self {
            eps_mp,
            eps_far,
            a_exp,
            atilde_exp,
            thresh_k: None,
            thresh_ktilde: None,
            capacity: None,
            st_decay: None,
        }
    }
}

// ---------------------------------------------------------------------------
// local variables of a query / partial update

/// Deltas between the incoming approximations and the stored state.
#[derive(Debug, Clone)]
pub struct Locals<F> {
    /// `W^appr - V~` (diagonal)
    pub d_delta: Vec<F>,
    /// `sqrt(W^appr) - sqrt(V~)` (diagonal)
    pub d_gamma: Vec<F>,
    /// `supp(w^appr - v~)`
    pub d_s: IndexSet,
    /// `Delta + dDelta`
    pub delta_new: Vec<F>,
    /// `Gamma + dGamma`
    pub gamma_new: Vec<F>,
    /// `supp(w^appr - v)`
    pub s_new: IndexSet,
    /// `(S u dS) \ S^new`, always inside `S n dS`
    pub s_prime: IndexSet,
    /// `sqrt(W^appr) f(h^appr) - sqrt(V~) f(g~)`, zero when no `h` given
    pub d_xi: Vec<F>,
    /// `xi + dXi`
    pub xi_new: Vec<F>,
}

/// Operation counters, reported by the solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaintCounters {
    pub matrix_updates: usize,
    pub partial_matrix_updates: usize,
    pub vector_updates: usize,
    pub partial_vector_updates: usize,
}

/// Outcome of a combined update-and-query call.
#[derive(Debug, Clone)]
pub struct UpdateQueryOut<F> {
    pub w_appr: Vec<F>,
    pub h_appr: Vec<F>,
    pub r: Vec<F>,
    /// full refresh size of the `w` side (0 when none fired)
    pub k: usize,
    /// partial refresh size of the `w` side
    pub ktilde: usize,
    /// full refresh size of the `h` side
    pub p: usize,
    /// partial refresh size of the `h` side
    pub ptilde: usize,
}

// ---------------------------------------------------------------------------
// the state

/// The projection-maintenance data structure.
#[derive(Debug, Clone)]
pub struct MaintState<F: Scalar> {
    // problem data
    pub a: DenseMatrix<F>,
    pub f: FFunc<F>,
    pub eps_mp: F,
    pub eps_far: F,
    pub thresh_k: usize,
    pub thresh_ktilde: usize,
    pub capacity: usize,
    pub st_decay: F,

    // sketches: the pre-drawn pool, its dense stack, and the cursor
    pub pool: SketchPool<F>,
    pub r_stack: DenseMatrix<F>,
    pub sketch_rows: usize,
    pub l: usize,

    // level approximations
    pub v: Vec<F>,
    pub v_tilde: Vec<F>,
    pub g: Vec<F>,
    pub g_tilde: Vec<F>,

    // maintained members and their invariants (see check_invariants)
    pub m: DenseMatrix<F>,
    pub q: DenseMatrix<F>,
    pub beta1: Vec<F>,
    pub beta2: Vec<F>,
    pub s_set: IndexSet,
    pub t_set: IndexSet,
    pub delta: Vec<F>,
    pub gamma: Vec<F>,
    pub xi: Vec<F>,
    pub b_blk: PaddedBlock<F>,
    pub e_blk: PaddedBlock<F>,
    pub f_blk: PaddedBlock<F>,
    pub gamma1: PaddedVec<F>,
    pub gamma2: Vec<F>,

    pub counters: MaintCounters,

    /// implicit-iterate extension; `None` in plain (infeasible-path) mode
    pub feas: Option<crate::feasible::FeasibleExt<F>>,
}

fn sqrt_vec<F: Scalar>(v: &[F]) -> Vec<F> {
    v.iter().map(|&x| x.sqrt()).collect()
}

impl<F: Scalar> MaintState<F> {
    /// Build a fresh structure with both levels anchored at `w0`, `h0`.
    pub fn initialize(
        a: &DenseMatrix<F>,
        f: FFunc<F>,
        params: &MaintParams<F>,
        w0: &[F],
        h0: &[F],
        pool: SketchPool<F>,
    ) -> Result<Self> {
        let n = a.cols;
        if n == 0 || a.rows == 0 || a.rows > n {
            return Err(Error::InvalidDim(format!(
                "need 0 < d <= n, got d = {}, n = {n}",
                a.rows
            )));
        }
        if w0.len() != n || h0.len() != n {
            return Err(Error::DimMismatch(format!(
                "w0/h0 length {}/{} vs n = {n}",
                w0.len(),
                h0.len()
            )));
        }
        if pool.is_empty() {
            return Err(Error::PoolExhausted(0));
        }
        let nf = n as f64;
        let clamp = |x: f64| -> usize { (x.ceil() as usize).clamp(1, n) };
        let thresh_k = params.thresh_k.unwrap_or_else(|| clamp(nf.powf(params.a_exp)));
        let thresh_ktilde = params
            .thresh_ktilde
            .unwrap_or_else(|| clamp(nf.powf(params.atilde_exp)))
            .min(thresh_k);
        let capacity = params.capacity.unwrap_or((6 * thresh_k).min(n)).min(n).max(1);
        let st_decay =
            F::from_f64_lossy(params.st_decay.unwrap_or((1.0 - 1.0 / nf.ln()).max(0.0)));

        let sketch_rows = pool.ops[0].rows();
        let total = pool.len() * sketch_rows;
        let mut r_stack = DenseMatrix::zeros(total, n);
        for (idx, op) in pool.ops.iter().enumerate() {
            let d = op.to_dense();
            for i in 0..sketch_rows {
                for j in 0..n {
                    r_stack.set(idx * sketch_rows + i, j, d.get(i, j));
                }
            }
        }

        // M = A^T (A V A^T)^{-1} A with V = diag(w0)
        let awat = a.diag_mul_right(w0).matmul(&a.transpose());
        let inv = mat_inverse(&awat)?;
        let m = a.transpose().matmul(&inv).matmul(&a);
        // Q = R sqrt(V) M
        let q = r_stack.matmul(&m.diag_mul_left(&sqrt_vec(w0)));
        let fh = f.eval_vec(h0);
        let svf: Vec<F> = (0..n).map(|i| w0[i].sqrt() * fh[i]).collect();
        let beta1 = q.matvec(&svf);
        let beta2 = m.matvec(&svf);
        let lb = total;

        Ok(Self {
            a: a.clone(),
            f,
            eps_mp: params.eps_mp,
            eps_far: params.eps_far,
            thresh_k,
            thresh_ktilde,
            capacity,
            st_decay,
            pool,
            r_stack,
            sketch_rows,
            l: 0,
            v: w0.to_vec(),
            v_tilde: w0.to_vec(),
            g: h0.to_vec(),
            g_tilde: h0.to_vec(),
            m,
            q,
            beta1,
            beta2,
            s_set: IndexSet::empty(),
            t_set: IndexSet::empty(),
            delta: vec![F::zero(); n],
            gamma: vec![F::zero(); n],
            xi: vec![F::zero(); n],
            b_blk: PaddedBlock::identity_square(capacity),
            e_blk: PaddedBlock::zero_rows(n, capacity),
            f_blk: PaddedBlock::zero_cols(lb, capacity),
            gamma1: PaddedVec::zero(capacity),
            gamma2: vec![F::zero(); n],
            counters: MaintCounters::default(),
            feas: None,
        })
    }

    pub fn n(&self) -> usize {
        self.a.cols
    }

    fn fg(&self) -> Vec<F> {
        self.f.eval_vec(&self.g)
    }

    fn fg_tilde(&self) -> Vec<F> {
        self.f.eval_vec(&self.g_tilde)
    }

    /// Rows `[l*b, (l+1)*b)` of a stacked `(L*b) x *` matrix.
    fn level_rows(&self, m: &DenseMatrix<F>) -> DenseMatrix<F> {
        let b = self.sketch_rows;
        m.row_range(self.l * b, (self.l + 1) * b)
    }

    /// The `F[l]` slice: same slots, payload rows restricted to level `l`.
    fn f_blk_level(&self) -> PaddedBlock<F> {
        PaddedBlock {
            capacity: self.f_blk.capacity,
            slots: self.f_blk.slots.clone(),
            payload: self.level_rows(&self.f_blk.payload),
            mode: PadMode::Cols,
            identity_diag: false,
        }
    }

    // -----------------------------------------------------------------------
    // local variables

    /// Deltas of an incoming `(w^appr, h^appr)` pair against the stored
    /// members; `h_appr = None` leaves the `xi` deltas at zero.
    pub fn compute_locals(&self, w_appr: &[F], h_appr: Option<&[F]>) -> Locals<F> {
        let n = self.n();
        let d_delta = linalg::vsub(w_appr, &self.v_tilde);
        let d_gamma = linalg::vsub(&sqrt_vec(w_appr), &sqrt_vec(&self.v_tilde));
        let d_s = IndexSet::support_diff(w_appr, &self.v_tilde);
        let delta_new = linalg::vadd(&self.delta, &d_delta);
        let gamma_new = linalg::vadd(&self.gamma, &d_gamma);
        let s_new = IndexSet::support_diff(w_appr, &self.v);
        let s_prime = self.s_set.union(&d_s).difference(&s_new);
        let d_xi = match h_appr {
            Some(h) => {
                let fh = self.f.eval_vec(h);
                let fgt = self.fg_tilde();
                (0..n)
                    .map(|i| {
                        w_appr[i].sqrt() * fh[i] - self.v_tilde[i].sqrt() * fgt[i]
                    })
                    .collect()
            }
            None => vec![F::zero(); n],
        };
        let xi_new = linalg::vadd(&self.xi, &d_xi);
        Locals {
            d_delta,
            d_gamma,
            d_s,
            delta_new,
            gamma_new,
            s_new,
            s_prime,
            d_xi,
            xi_new,
        }
    }

    /// The structured square block
    /// `L_*[(Delta^new_{S^new})^{-1} + M_{S^new,S^new}] - L_*[Delta_S^{-1} + M_{S,S}]`.
    fn structured_n(&self, locals: &Locals<F>) -> Result<PaddedBlock<F>> {
        let blk_new = self.inv_delta_plus_m(&locals.s_new, &locals.delta_new)?;
        let blk_old = self.inv_delta_plus_m(&self.s_set, &self.delta)?;
        blk_new.sub(&blk_old)
    }

    /// `L_*[diag(delta_S)^{-1} + M_{S,S}]` for a given support and diagonal.
    fn inv_delta_plus_m(&self, s: &IndexSet, delta: &[F]) -> Result<PaddedBlock<F>> {
        let k = s.len();
        let mut compact = self.m.submatrix(s, s);
        for (p, &i) in s.items().iter().enumerate() {
            if delta[i] == F::zero() {
                return Err(Error::SingularMatrix(format!(
                    "zero diagonal delta at supported index {i}"
                )));
            }
            compact.set(p, p, compact.get(p, p) + F::one() / delta[i]);
        }
        let _ = k;
        pad(&compact, s, self.capacity, PadMode::Square)
    }

    // -----------------------------------------------------------------------
    // update_v / update_g

    /// Two-level lazy acceptance of a new `w`. Returns the approximation the
    /// caller must use plus the refresh sizes `(k, k~)`; `h_appr` feeds the
    /// implicit-iterate hooks of any matrix update that fires.
    pub fn update_v(
        &mut self,
        w_new: &[F],
        h_appr: Option<&[F]>,
    ) -> Result<(Vec<F>, usize, usize)> {
        let n = self.n();
        assert_eq!(w_new.len(), n);
        let two = F::from_f64_lossy(2.0);
        let y1: Vec<F> = (0..n)
            .map(|i| psi(w_new[i] / self.v_tilde[i] - F::one(), self.eps_mp))
            .collect();
        let (vt_tmp, ktilde) = soft_threshold(
            &y1,
            w_new,
            &self.v_tilde,
            self.eps_mp / two,
            self.thresh_ktilde,
            self.st_decay,
        );
        let vt_new = adjust(&vt_tmp, &self.v_tilde, &self.v, self.eps_far);

        let far_count = IndexSet::support_diff(&vt_new, &self.v).len();
        if far_count >= self.thresh_k {
            let y2: Vec<F> = (0..n)
                .map(|i| {
                    psi(w_new[i] / self.v[i] - F::one(), self.eps_mp)
                        + psi(w_new[i] / self.v_tilde[i] - F::one(), self.eps_mp)
                })
                .collect();
            let thresh_eps =
                self.eps_far * self.eps_far / (F::from_f64_lossy(32.0) * self.eps_mp);
            let (v_new, k) = soft_threshold(
                &y2,
                w_new,
                &self.v,
                thresh_eps,
                self.thresh_k,
                self.st_decay,
            );
            self.matrix_update(&v_new, h_appr)?;
            return Ok((v_new, k, 0));
        }
        let near_count = IndexSet::support_diff(&vt_new, &self.v_tilde).len();
        if near_count >= self.thresh_ktilde {
            self.partial_matrix_update(&vt_new, h_appr)?;
            return Ok((vt_new, 0, ktilde));
        }
        // lazy: hand out the filtered value without touching the members
        Ok((vt_new, 0, 0))
    }

    /// Mirror of [`update_v`] for the `h` side.
    pub fn update_g(&mut self, h_new: &[F]) -> Result<(Vec<F>, usize, usize)> {
        let n = self.n();
        assert_eq!(h_new.len(), n);
        let two = F::from_f64_lossy(2.0);
        let y1: Vec<F> = (0..n)
            .map(|i| psi(h_new[i] / self.g_tilde[i] - F::one(), self.eps_mp))
            .collect();
        let (gt_tmp, ptilde) = soft_threshold(
            &y1,
            h_new,
            &self.g_tilde,
            self.eps_mp / two,
            self.thresh_ktilde,
            self.st_decay,
        );
        let gt_new = adjust(&gt_tmp, &self.g_tilde, &self.g, self.eps_far);

        let far_count = IndexSet::support_diff(&gt_new, &self.g).len();
        if far_count >= self.thresh_k {
            let y2: Vec<F> = (0..n)
                .map(|i| {
                    psi(h_new[i] / self.g[i] - F::one(), self.eps_mp)
                        + psi(h_new[i] / self.g_tilde[i] - F::one(), self.eps_mp)
                })
                .collect();
            let thresh_eps =
                self.eps_far * self.eps_far / (F::from_f64_lossy(32.0) * self.eps_mp);
            let (g_new, p) = soft_threshold(
                &y2,
                h_new,
                &self.g,
                thresh_eps,
                self.thresh_k,
                self.st_decay,
            );
            self.vector_update(&g_new)?;
            return Ok((g_new, p, 0));
        }
        let near_count = IndexSet::support_diff(&gt_new, &self.g_tilde).len();
        if near_count >= self.thresh_ktilde {
            self.partial_vector_update(&gt_new)?;
            return Ok((gt_new, 0, ptilde));
        }
        Ok((gt_new, 0, 0))
    }

    // -----------------------------------------------------------------------
    // the four refresh operations

    /// Full refresh: recompute `M` (rank-`|S^new|` correction), `Q`, the
    /// betas, and collapse both levels onto `w^appr`.
    pub fn matrix_update(&mut self, w_appr: &[F], h_appr: Option<&[F]>) -> Result<()> {
        let n = self.n();
        let locals = self.compute_locals(w_appr, None);
        let s_new = &locals.s_new;

        let m_tmp = if s_new.is_empty() {
            self.m.clone()
        } else {
            let ms = self.m.col_select(s_new); // n x k
            let mut inner = self.m.submatrix(s_new, s_new);
            for (p, &i) in s_new.items().iter().enumerate() {
                if locals.delta_new[i] == F::zero() {
                    return Err(Error::SingularMatrix(format!(
                        "zero delta at index {i} of S^new"
                    )));
                }
                inner.set(p, p, inner.get(p, p) + F::one() / locals.delta_new[i]);
            }
            let inner_inv = mat_inverse(&inner)?;
            self.m.sub(&ms.matmul(&inner_inv).matmul(&ms.transpose()))
        };

        // Q^tmp = Q + R Gamma^new M^tmp + R sqrt(V) (M^tmp - M)
        let diff = m_tmp.sub(&self.m);
        let sv = sqrt_vec(&self.v);
        let mut inner = m_tmp.diag_mul_left(&locals.gamma_new);
        inner = inner.add(&diff.diag_mul_left(&sv));
        let q_tmp = self.q.add(&self.r_stack.matmul(&inner));

        let fgv = self.fg();
        let swf: Vec<F> = (0..n).map(|i| w_appr[i].sqrt() * fgv[i]).collect();
        let beta1_tmp = q_tmp.matvec(&swf);
        let beta2_tmp = m_tmp.matvec(&swf);
        let fgt = self.fg_tilde();
        let xi_tmp: Vec<F> = (0..n)
            .map(|i| w_appr[i].sqrt() * (fgt[i] - fgv[i]))
            .collect();

        if self.feas.is_some() {
            crate::feasible::on_matrix_update(self, w_appr, h_appr, &m_tmp)?;
        }

        self.m = m_tmp;
        self.q = q_tmp;
        self.beta1 = beta1_tmp;
        self.beta2 = beta2_tmp;
        self.xi = xi_tmp;
        self.v = w_appr.to_vec();
        self.v_tilde = w_appr.to_vec();
        self.s_set = IndexSet::empty();
        self.delta = vec![F::zero(); n];
        self.gamma = vec![F::zero(); n];
        self.b_blk = PaddedBlock::identity_square(self.capacity);
        self.e_blk = PaddedBlock::zero_rows(n, self.capacity);
        self.f_blk = PaddedBlock::zero_cols(self.r_stack.rows, self.capacity);
        self.gamma1 = PaddedVec::zero(self.capacity);
        self.gamma2 = vec![F::zero(); n];
        self.counters.matrix_updates += 1;
        Ok(())
    }

    /// Partial refresh: absorb the drift of `v~` into the low-rank
    /// correction terms `B`, `E`, `F` without touching `M` or `Q`.
    pub fn partial_matrix_update(
        &mut self,
        w_appr: &[F],
        h_appr: Option<&[F]>,
    ) -> Result<()> {
        let n = self.n();
        let locals = self.compute_locals(w_appr, None);
        let mt = self.m.transpose();

        // Woodbury update of B through the structured decomposition
        let n_blk = self.structured_n(&locals)?;
        let s1 = self.s_set.difference(&locals.d_s);
        let (uprime, c, u) = linalg::decompose_ucu(&n_blk, &s1, &locals.d_s)?;
        let k3 = c.rows;
        let (b_tmp, bu_mid) = if k3 == 0 {
            (self.b_blk.clone(), None)
        } else {
            let bu = square_mul_rows(&self.b_blk, &uprime)?;
            let c_inv = mat_inverse(&c)?;
            let mid = c_inv.add(&rows_t_mul_rows(&u, &bu)?);
            let mid_inv = mat_inverse(&mid)?;
            let bu_mid = rows_mul_dense(&bu, &mid_inv);
            // U^T B = (B^T U)^T, with B^T formed explicitly
            let b_t = PaddedBlock {
                capacity: self.b_blk.capacity,
                slots: self.b_blk.slots.clone(),
                payload: self.b_blk.payload.transpose(),
                mode: PadMode::Square,
                identity_diag: self.b_blk.identity_diag,
            };
            let btu = square_mul_rows(&b_t, &u)?;
            let corr = rows_mul_rows_t(&bu_mid, &btu)?;
            (self.b_blk.sub(&corr)?, Some((bu_mid, u.clone())))
        };

        // F^tmp = F + R Gamma (L_c[M_{dS \ S}] - L_c[M_{S'}]) + R dGamma L_c[M_{S^new}]
        let ds_not_s = locals.d_s.difference(&self.s_set);
        let cols_a = pad(&self.m, &ds_not_s, self.capacity, PadMode::Cols)?
            .sub(&pad(&self.m, &locals.s_prime, self.capacity, PadMode::Cols)?)?;
        let cols_b = pad(&self.m, &locals.s_new, self.capacity, PadMode::Cols)?;
        let ga = cols_a.payload.diag_mul_left(&self.gamma);
        let gb = cols_b.payload.diag_mul_left(&locals.d_gamma);
        let mut f_tmp = self.f_blk.clone();
        let add_a = PaddedBlock {
            capacity: self.capacity,
            slots: cols_a.slots.clone(),
            payload: self.r_stack.matmul(&ga),
            mode: PadMode::Cols,
            identity_diag: false,
        };
        let add_b = PaddedBlock {
            capacity: self.capacity,
            slots: cols_b.slots.clone(),
            payload: self.r_stack.matmul(&gb),
            mode: PadMode::Cols,
            identity_diag: false,
        };
        f_tmp = f_tmp.add(&add_a)?.add(&add_b)?;

        // E^tmp = E + B^tmp (L_r[(M_{dS\S})^T] - L_r[(M_{S'})^T])
        //           - B U' mid^{-1} U^T E
        let rows_diff = pad(&mt, &ds_not_s, self.capacity, PadMode::Rows)?
            .sub(&pad(&mt, &locals.s_prime, self.capacity, PadMode::Rows)?)?;
        let mut e_tmp = self.e_blk.add(&square_mul_rows(&b_tmp, &rows_diff)?)?;
        if let Some((bu_mid, u)) = &bu_mid {
            let ute = rows_t_mul_rows(u, &self.e_blk)?;
            e_tmp = e_tmp.sub(&rows_mul_dense(bu_mid, &ute))?;
        }

        // xi^tmp = sqrt(W^appr) f(g~) - sqrt(V) f(g)
        let fgt = self.fg_tilde();
        let fgv = self.fg();
        let xi_tmp: Vec<F> = (0..n)
            .map(|i| w_appr[i].sqrt() * fgt[i] - self.v[i].sqrt() * fgv[i])
            .collect();

        // gamma1^tmp = B^tmp L_r[beta2_{S^new}] + B^tmp L_r[(M_{S^new})^T] xi^tmp
        let pv_beta = PaddedVec::pad(&self.beta2, &locals.s_new, self.capacity)?;
        let rows_sn = pad(&mt, &locals.s_new, self.capacity, PadMode::Rows)?;
        let pv_m_xi = rows_mul_dense_vec(&rows_sn, &xi_tmp);
        let gamma1_tmp = square_mul_vec(&b_tmp, &pv_beta)?
            .add(&square_mul_vec(&b_tmp, &pv_m_xi)?)?;

        // gamma2^tmp = gamma2 + (Gamma + dGamma) M (sqrt(W^appr) - sqrt(V~)) f(g~)
        //                     + dGamma M (sqrt(V~) f(g~) - sqrt(V) f(g))
        let y1: Vec<F> = (0..n).map(|i| locals.d_gamma[i] * fgt[i]).collect();
        let my1 = self.m.matvec(&y1);
        let y2: Vec<F> = (0..n)
            .map(|i| self.v_tilde[i].sqrt() * fgt[i] - self.v[i].sqrt() * fgv[i])
            .collect();
        let my2 = self.m.matvec(&y2);
        let gamma2_tmp: Vec<F> = (0..n)
            .map(|i| {
                self.gamma2[i]
                    + locals.gamma_new[i] * my1[i]
                    + locals.d_gamma[i] * my2[i]
            })
            .collect();

        if self.feas.is_some() {
            crate::feasible::on_partial_matrix_update(
                self, w_appr, h_appr, &b_tmp, &locals,
            )?;
        }

        self.v_tilde = w_appr.to_vec();
        self.s_set = locals.s_new;
        self.delta = locals.delta_new;
        self.gamma = locals.gamma_new;
        self.b_blk = b_tmp;
        self.e_blk = e_tmp;
        self.f_blk = f_tmp;
        self.xi = xi_tmp;
        self.gamma1 = gamma1_tmp;
        self.gamma2 = gamma2_tmp;
        self.counters.partial_matrix_updates += 1;
        Ok(())
    }

    /// Full refresh of the `h` side: fold `f(h^appr) - f(g)` into the betas
    /// and collapse both `g` levels.
    pub fn vector_update(&mut self, h_appr: &[F]) -> Result<()> {
        let n = self.n();
        let fh = self.f.eval_vec(h_appr);
        let fgv = self.fg();
        let dv: Vec<F> = (0..n)
            .map(|i| self.v[i].sqrt() * (fh[i] - fgv[i]))
            .collect();
        self.beta1 = linalg::vadd(&self.beta1, &self.q.matvec(&dv));
        self.beta2 = linalg::vadd(&self.beta2, &self.m.matvec(&dv));
        let xi_tmp: Vec<F> = (0..n)
            .map(|i| (self.v_tilde[i].sqrt() - self.v[i].sqrt()) * fh[i])
            .collect();
        let mt = self.m.transpose();
        let pv_beta = PaddedVec::pad(&self.beta2, &self.s_set, self.capacity)?;
        let rows_s = pad(&mt, &self.s_set, self.capacity, PadMode::Rows)?;
        let pv_m_xi = rows_mul_dense_vec(&rows_s, &xi_tmp);
        self.gamma1 = square_mul_vec(&self.b_blk, &pv_beta)?
            .add(&square_mul_vec(&self.b_blk, &pv_m_xi)?)?;
        let mxi = self.m.matvec(&xi_tmp);
        self.gamma2 = (0..n).map(|i| self.gamma[i] * mxi[i]).collect();
        self.xi = xi_tmp;
        self.g = h_appr.to_vec();
        self.g_tilde = h_appr.to_vec();
        self.t_set = IndexSet::empty();
        self.counters.vector_updates += 1;
        Ok(())
    }

    /// Partial refresh of the `h` side: shift `g~` only.
    pub fn partial_vector_update(&mut self, h_appr: &[F]) -> Result<()> {
        let n = self.n();
        let fh = self.f.eval_vec(h_appr);
        let fgt = self.fg_tilde();
        let fgv = self.fg();
        let xi_tmp: Vec<F> = (0..n)
            .map(|i| self.v_tilde[i].sqrt() * fh[i] - self.v[i].sqrt() * fgv[i])
            .collect();
        let dv: Vec<F> = (0..n)
            .map(|i| self.v_tilde[i].sqrt() * (fh[i] - fgt[i]))
            .collect();
        let mt = self.m.transpose();
        let rows_s = pad(&mt, &self.s_set, self.capacity, PadMode::Rows)?;
        let pv = rows_mul_dense_vec(&rows_s, &dv);
        self.gamma1 = self.gamma1.add(&square_mul_vec(&self.b_blk, &pv)?)?;
        let mdv = self.m.matvec(&dv);
        for i in 0..n {
            self.gamma2[i] = self.gamma2[i] + self.gamma[i] * mdv[i];
        }
        self.xi = xi_tmp;
        self.t_set = IndexSet::support_diff(h_appr, &self.g);
        self.g_tilde = h_appr.to_vec();
        self.counters.partial_vector_updates += 1;
        Ok(())
    }

    // -----------------------------------------------------------------------
    // query

    /// Answer `R[l]^T R[l] sqrt(W^appr) A^T (A W^appr A^T)^{-1} A sqrt(W^appr)
    /// f(h^appr)` from the maintained members and advance the sketch cursor.
    pub fn query(&mut self, w_appr: &[F], h_appr: &[F]) -> Result<Vec<F>> {
        let n = self.n();
        assert_eq!(w_appr.len(), n);
        assert_eq!(h_appr.len(), n);
        let locals = self.compute_locals(w_appr, Some(h_appr));
        let op = self.pool.get(self.l)?.clone();
        let q_l = self.level_rows(&self.q);
        let beta1_l = {
            let b = self.sketch_rows;
            self.beta1[self.l * b..(self.l + 1) * b].to_vec()
        };
        let mt = self.m.transpose();

        // r1 = beta1[l]
        let r1 = beta1_l;

        // r2 = Q[l] xi + R[l] gamma2 + R[l] dGamma M (xi + dXi)
        //      + (Q[l] + R[l] Gamma M) dXi
        let m_xi_new = self.m.matvec(&locals.xi_new);
        let dg_m: Vec<F> = (0..n).map(|i| locals.d_gamma[i] * m_xi_new[i]).collect();
        let m_dxi = self.m.matvec(&locals.d_xi);
        let g_m_dxi: Vec<F> = (0..n).map(|i| self.gamma[i] * m_dxi[i]).collect();
        let mut r2 = q_l.matvec(&self.xi);
        r2 = linalg::vadd(&r2, &op.apply(&self.gamma2));
        r2 = linalg::vadd(&r2, &op.apply(&dg_m));
        r2 = linalg::vadd(&r2, &q_l.matvec(&locals.d_xi));
        r2 = linalg::vadd(&r2, &op.apply(&g_m_dxi));

        // r3 = R[l] (Gamma + dGamma) beta2
        let gb: Vec<F> = (0..n).map(|i| locals.gamma_new[i] * self.beta2[i]).collect();
        let r3 = op.apply(&gb);

        // dGamma-side low-rank correction
        let ds_not_s = locals.d_s.difference(&self.s_set);
        // dgamma = B (L_r[beta2_{dS\S}] - L_r[beta2_{S'}])
        //        + B (L_r[(M_{dS\S})^T] - L_r[(M_{S'})^T]) (xi + dXi)
        //        + E dXi
        let pv_beta = PaddedVec::pad(&self.beta2, &ds_not_s, self.capacity)?
            .sub(&PaddedVec::pad(&self.beta2, &locals.s_prime, self.capacity)?)?;
        let term1 = square_mul_vec(&self.b_blk, &pv_beta)?;
        let rows_diff = pad(&mt, &ds_not_s, self.capacity, PadMode::Rows)?
            .sub(&pad(&mt, &locals.s_prime, self.capacity, PadMode::Rows)?)?;
        let pv_m = rows_mul_dense_vec(&rows_diff, &locals.xi_new);
        let term2 = square_mul_vec(&self.b_blk, &pv_m)?;
        let term3 = rows_mul_dense_vec(&self.e_blk, &locals.d_xi);
        let dgamma = term1.add(&term2)?.add(&term3)?;

        // decomposition of the structured difference block
        let n_blk = self.structured_n(&locals)?;
        let s1 = self.s_set.difference(&locals.d_s);
        let (_uprime, c, u) = linalg::decompose_ucu(&n_blk, &s1, &locals.d_s)?;
        let k2 = locals.d_s.len();

        // dE = E_{dS} - B_{dS n S} M_{dS n S, dS}, with the S' columns
        // negated and the (S n dS) \ S' columns zeroed; U^tmp = [B_dS, B_dS, dE]
        let g1_plus = self.gamma1.add(&dgamma)?;
        let gamma_tmp = if k2 == 0 {
            PaddedVec::zero(self.capacity)
        } else {
            let u_slots = self.b_blk.slots.union(&self.s_set).union(&locals.d_s);
            if u_slots.len() > self.capacity {
                return Err(Error::CapacityExceeded {
                    needed: u_slots.len(),
                    capacity: self.capacity,
                });
            }
            let rows = u_slots.len();
            let mut b_cols = DenseMatrix::zeros(self.capacity, k2);
            let mut de = DenseMatrix::zeros(self.capacity, k2);
            let s_cap_ds = self.s_set.intersect(&locals.d_s);
            for (qc, &j) in locals.d_s.items().iter().enumerate() {
                // column of B at j (identity-padded semantics)
                for (p, &i) in u_slots.items().iter().enumerate() {
                    b_cols.set(p, qc, self.b_blk.square_get(i, j));
                }
                // column of E at j
                for (p, &i) in u_slots.items().iter().enumerate() {
                    let ev = match self.e_blk.slots.pos(i) {
                        Some(pe) => self.e_blk.payload.get(pe, j),
                        None => F::zero(),
                    };
                    de.set(p, qc, ev);
                }
                // minus B_{:, dS n S} M_{dS n S, j}
                for &i2 in s_cap_ds.items() {
                    let mij = self.m.get(i2, j);
                    if mij == F::zero() {
                        continue;
                    }
                    for (p, &i) in u_slots.items().iter().enumerate() {
                        de.set(p, qc, de.get(p, qc) - self.b_blk.square_get(i, i2) * mij);
                    }
                }
                // sign fixes per column class
                if locals.s_prime.contains(j) {
                    for p in 0..rows {
                        de.set(p, qc, -de.get(p, qc));
                    }
                } else if s_cap_ds.contains(j) {
                    for p in 0..rows {
                        de.set(p, qc, F::zero());
                    }
                }
            }
            let u_tmp = PaddedBlock {
                capacity: self.capacity,
                slots: u_slots,
                payload: DenseMatrix::hcat(&[&b_cols, &b_cols, &de]),
                mode: PadMode::Rows,
                identity_diag: false,
            };
            // gamma^tmp = U^tmp (C^{-1} + U^T U^tmp)^{-1} U^T (gamma1 + dgamma)
            let c_inv = mat_inverse(&c)?;
            let mid = c_inv.add(&rows_t_mul_rows(&u, &u_tmp)?);
            let mid_inv = mat_inverse(&mid)?;
            let z = rows_t_mul_vec(&u, &g1_plus);
            let y = mid_inv.matvec(&z);
            rows_mul_dense_vec(&u_tmp, &y)
        };

        // r4 = (L_c[(Q[l])_{S^new}] + F[l]
        //       + R[l] Gamma (L_c[M_{dS\S}] - L_c[M_{S'}])
        //       + R[l] dGamma L_c[M_{S^new}]) (gamma^tmp - gamma1 - dgamma)
        let vec_part = gamma_tmp.sub(&g1_plus)?;
        let term_a = pad(&q_l, &locals.s_new, self.capacity, PadMode::Cols)?;
        let term_b = self.f_blk_level();
        let cols_diff = pad(&self.m, &ds_not_s, self.capacity, PadMode::Cols)?
            .sub(&pad(&self.m, &locals.s_prime, self.capacity, PadMode::Cols)?)?;
        let term_c = PaddedBlock {
            capacity: self.capacity,
            slots: cols_diff.slots.clone(),
            payload: op.apply_mat(&cols_diff.payload.diag_mul_left(&self.gamma)),
            mode: PadMode::Cols,
            identity_diag: false,
        };
        let cols_sn = pad(&self.m, &locals.s_new, self.capacity, PadMode::Cols)?;
        let term_d = PaddedBlock {
            capacity: self.capacity,
            slots: cols_sn.slots.clone(),
            payload: op.apply_mat(&cols_sn.payload.diag_mul_left(&locals.d_gamma)),
            mode: PadMode::Cols,
            identity_diag: false,
        };
        let lhs = term_a.add(&term_b)?.add(&term_c)?.add(&term_d)?;
        let r4 = cols_mul_vec(&lhs, &vec_part);

        // r = R[l]^T (r1 + r2 + r3 + r4)
        let mut acc = r1;
        acc = linalg::vadd(&acc, &r2);
        acc = linalg::vadd(&acc, &r3);
        acc = linalg::vadd(&acc, &r4);
        let r = op.apply_t(&acc);
        self.l += 1;

        if self.feas.is_some() {
            crate::feasible::on_query(self, w_appr, h_appr, &locals, &vec_part)?;
        }
        Ok(r)
    }

    /// Update both sides from fresh iterates, then query: the plain-mode
    /// combined operation.
    pub fn update_query(&mut self, w_new: &[F], h_new: &[F]) -> Result<UpdateQueryOut<F>> {
        let (w_appr, k, ktilde) = self.update_v(w_new, None)?;
        let (h_appr, p, ptilde) = self.update_g(h_new)?;
        let r = self.query(&w_appr, &h_appr)?;
        Ok(UpdateQueryOut { w_appr, h_appr, r, k, ktilde, p, ptilde })
    }

    // -----------------------------------------------------------------------
    // invariant checking

    /// Recompute every maintained member by brute force and report the
    /// relative residuals; never fails, numerical breakdowns surface as
    /// infinite residuals.
    pub fn check_invariants(&self) -> InvariantReport {
        let n = self.n();
        let lb = self.r_stack.rows;
        let mut entries: Vec<(&'static str, f64)> = Vec::new();
        let rel = |diff: f64, scale: f64| diff / scale.max(1.0);

        let max_abs_m = |a: &DenseMatrix<F>| a.norm_max().to_f64_lossy();
        let diff_m = |a: &DenseMatrix<F>, b: &DenseMatrix<F>| {
            a.sub(b).norm_max().to_f64_lossy()
        };
        let diff_v =
            |a: &[F], b: &[F]| linalg::norm_inf(&linalg::vsub(a, b)).to_f64_lossy();
        let max_abs_v = |a: &[F]| linalg::norm_inf(a).to_f64_lossy();

        // 1. M = A^T (A V A^T)^{-1} A
        let m_ref = self
            .a
            .diag_mul_right(&self.v)
            .matmul(&self.a.transpose());
        let m_res = match mat_inverse(&m_ref) {
            Ok(inv) => {
                let mr = self.a.transpose().matmul(&inv).matmul(&self.a);
                rel(diff_m(&self.m, &mr), max_abs_m(&mr))
            }
            Err(_) => f64::INFINITY,
        };
        entries.push(("M", m_res));

        // 2. Q = R sqrt(V) M
        let q_ref = self
            .r_stack
            .matmul(&self.m.diag_mul_left(&sqrt_vec(&self.v)));
        entries.push(("Q", rel(diff_m(&self.q, &q_ref), max_abs_m(&q_ref))));

        // 3/4. betas
        let fgv = self.fg();
        let svf: Vec<F> = (0..n).map(|i| self.v[i].sqrt() * fgv[i]).collect();
        let b1_ref = self.q.matvec(&svf);
        entries.push(("beta1", rel(diff_v(&self.beta1, &b1_ref), max_abs_v(&b1_ref))));
        let b2_ref = self.m.matvec(&svf);
        entries.push(("beta2", rel(diff_v(&self.beta2, &b2_ref), max_abs_v(&b2_ref))));

        // 5/6. supports
        let s_ref = IndexSet::support_diff(&self.v_tilde, &self.v);
        entries.push(("S", if s_ref == self.s_set { 0.0 } else { f64::INFINITY }));
        let t_ref = IndexSet::support_diff(&self.g_tilde, &self.g);
        entries.push(("T", if t_ref == self.t_set { 0.0 } else { f64::INFINITY }));

        // 7/8. diagonal drifts
        let d_ref = linalg::vsub(&self.v_tilde, &self.v);
        entries.push(("Delta", rel(diff_v(&self.delta, &d_ref), max_abs_v(&d_ref))));
        let g_ref = linalg::vsub(&sqrt_vec(&self.v_tilde), &sqrt_vec(&self.v));
        entries.push(("Gamma", rel(diff_v(&self.gamma, &g_ref), max_abs_v(&g_ref))));

        // 9. xi
        let fgt = self.fg_tilde();
        let xi_ref: Vec<F> = (0..n)
            .map(|i| self.v_tilde[i].sqrt() * fgt[i] - self.v[i].sqrt() * fgv[i])
            .collect();
        entries.push(("xi", rel(diff_v(&self.xi, &xi_ref), max_abs_v(&xi_ref))));

        // 10. B = L_*[(Delta_SS^{-1} + M_SS)^{-1}]
        let b_res = (|| -> std::result::Result<f64, Error> {
            let blk = self.inv_delta_plus_m_checked()?;
            let inv = blk.square_inverse()?;
            let lhs = self.b_blk.to_dense(n, n);
            let rhs = inv.to_dense(n, n);
            Ok(rel(diff_m(&lhs, &rhs), max_abs_m(&rhs)))
        })()
        .unwrap_or(f64::INFINITY);
        entries.push(("B", b_res));

        // 11. E = B L_r[(M_S)^T]
        let mt = self.m.transpose();
        let e_res = (|| -> std::result::Result<f64, Error> {
            let rows_s = pad(&mt, &self.s_set, self.capacity, PadMode::Rows)?;
            let e_ref = square_mul_rows(&self.b_blk, &rows_s)?;
            Ok(rel(
                diff_m(&self.e_blk.to_dense(n, n), &e_ref.to_dense(n, n)),
                max_abs_m(&e_ref.to_dense(n, n)),
            ))
        })()
        .unwrap_or(f64::INFINITY);
        entries.push(("E", e_res));

        // 12. F = R Gamma L_c[M_S]
        let f_res = (|| -> std::result::Result<f64, Error> {
            let cols_s = pad(&self.m, &self.s_set, self.capacity, PadMode::Cols)?;
            let f_ref = PaddedBlock {
                capacity: self.capacity,
                slots: cols_s.slots.clone(),
                payload: self
                    .r_stack
                    .matmul(&cols_s.payload.diag_mul_left(&self.gamma)),
                mode: PadMode::Cols,
                identity_diag: false,
            };
            Ok(rel(
                diff_m(&self.f_blk.to_dense(lb, n), &f_ref.to_dense(lb, n)),
                max_abs_m(&f_ref.to_dense(lb, n)),
            ))
        })()
        .unwrap_or(f64::INFINITY);
        entries.push(("F", f_res));

        // 13. gamma1 = B L_r[beta2_S] + B L_r[(M_S)^T] xi
        let g1_res = (|| -> std::result::Result<f64, Error> {
            let pv_beta = PaddedVec::pad(&self.beta2, &self.s_set, self.capacity)?;
            let rows_s = pad(&mt, &self.s_set, self.capacity, PadMode::Rows)?;
            let pv_m = rows_mul_dense_vec(&rows_s, &self.xi);
            let g1_ref = square_mul_vec(&self.b_blk, &pv_beta)?
                .add(&square_mul_vec(&self.b_blk, &pv_m)?)?;
            Ok(rel(
                diff_v(&self.gamma1.to_dense(n), &g1_ref.to_dense(n)),
                max_abs_v(&g1_ref.to_dense(n)),
            ))
        })()
        .unwrap_or(f64::INFINITY);
        entries.push(("gamma1", g1_res));

        // 14. gamma2 = Gamma M xi
        let mxi = self.m.matvec(&self.xi);
        let g2_ref: Vec<F> = (0..n).map(|i| self.gamma[i] * mxi[i]).collect();
        entries.push((
            "gamma2",
            rel(diff_v(&self.gamma2, &g2_ref), max_abs_v(&g2_ref)),
        ));

        let max_residual = entries
            .iter()
            .map(|&(_, r)| r)
            .fold(0.0f64, f64::max);

        // eps_far separation of the surviving S entries
        let mut min_sep = f64::INFINITY;
        for &i in self.s_set.items() {
            let sep = (self.v_tilde[i] / self.v[i] - F::one()).abs().to_f64_lossy();
            min_sep = min_sep.min(sep);
        }
        let eps_far = self.eps_far.to_f64_lossy();
        let eps_far_ok = self.s_set.is_empty() || min_sep >= eps_far * (1.0 - 1e-9);

        InvariantReport {
            entries: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            max_residual,
            s_size: self.s_set.len(),
            t_size: self.t_set.len(),
            thresh_k: self.thresh_k,
            thresh_ktilde: self.thresh_ktilde,
            eps_far_min_sep: min_sep,
            eps_far_ok,
        }
    }

    fn inv_delta_plus_m_checked(&self) -> Result<PaddedBlock<F>> {
        self.inv_delta_plus_m(&self.s_set, &self.delta)
    }
}

/// Result of a full invariant audit.
#[derive(Debug, Clone)]
pub struct InvariantReport {
    /// `(name, relative residual)` for the fourteen member invariants
    pub entries: Vec<(String, f64)>,
    pub max_residual: f64,
    pub s_size: usize,
    pub t_size: usize,
    pub thresh_k: usize,
    pub thresh_ktilde: usize,
    /// `min_{i in S} |v~_i / v_i - 1|`, infinite when `S` is empty
    pub eps_far_min_sep: f64,
    pub eps_far_ok: bool,
}

impl InvariantReport {
    pub fn residual(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }
}
