//! Implicit-iterate extension of the projection maintenance.
//!
//! In feasible mode the driver never applies projected corrections to `x`
//! and `s` directly; the structure accumulates them in `u1..u4` (with the
//! dense carriers `G = V~ M` and `M`) so that `Ax = b` stays exact for the
//! materialized iterate `x - (u1 + G u2)`, `s + (u3 + M u4)`.

use crate::linalg::{self, pad, rows_mul_dense_vec, square_mul_vec, DenseMatrix, PadMode};
use crate::projmaint::{Locals, MaintState};
use crate::{Error, Result, Scalar};

/// Which scalar prefactor this instance contributes to the combined step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeasKind<F> {
    /// the `f(x) = sqrt(x)` instance; `c = t_new/t - 1`
    T,
    /// the potential-gradient instance;
    /// `c = -(eps/2) t_new / (sqrt(t) ||grad Phi_lambda(h - 1)||)`
    Phi { lambda: F },
}

/// Per-instance extension state.
#[derive(Debug, Clone)]
pub struct FeasibleExt<F> {
    pub kind: FeasKind<F>,
    pub eps: F,
    pub t: F,
    pub t_new: F,
    /// invariant: `G = V~ M`
    pub g_mat: DenseMatrix<F>,
    pub u1: Vec<F>,
    pub u2: Vec<F>,
    pub u3: Vec<F>,
    pub u4: Vec<F>,
    /// set by a matrix refresh; the query that follows in the same round
    /// must not accumulate again (the refresh already absorbed this
    /// round's correction)
    pub absorbed: bool,
}

impl<F: Scalar> FeasibleExt<F> {
    /// Update the central-path epoch the scalar prefactor is computed from.
    pub fn set_epoch(&mut self, t: F, t_new: F) {
        self.t = t;
        self.t_new = t_new;
    }
}

/// Attach the extension to a freshly initialized structure:
/// `G = W0 M`, `u1..u4 = 0`.
pub fn attach<F: Scalar>(state: &mut MaintState<F>, kind: FeasKind<F>, eps: F) {
    let n = state.n();
    let g_mat = state.m.diag_mul_left(&state.v_tilde);
    state.feas = Some(FeasibleExt {
        kind,
        eps,
        t: F::one(),
        t_new: F::one(),
        g_mat,
        u1: vec![F::zero(); n],
        u2: vec![F::zero(); n],
        u3: vec![F::zero(); n],
        u4: vec![F::zero(); n],
        absorbed: false,
    });
}

/// `scalar_c` with the ZeroGradient case mapped to `c = 0`: an exactly
/// centered iterate needs no potential correction, so the accumulators
/// simply receive nothing.
fn scalar_c_or_zero<F: Scalar>(ext: &FeasibleExt<F>, h_appr: &[F]) -> Result<F> {
    match scalar_c(ext, h_appr) {
        Ok(c) => Ok(c),
        Err(Error::ZeroGradient) => Ok(F::zero()),
        Err(e) => Err(e),
    }
}

/// The scalar prefactor `c` of the pending correction for this instance.
pub fn scalar_c<F: Scalar>(ext: &FeasibleExt<F>, h_appr: &[F]) -> Result<F> {
    match ext.kind {
        FeasKind::T => Ok(ext.t_new / ext.t - F::one()),
        FeasKind::Phi { lambda } => {
            // h is mu~ / t, so grad Phi is evaluated at h - 1
            let grad: Vec<F> = h_appr
                .iter()
                .map(|&h| lambda * (lambda * (h - F::one())).sinh())
                .collect();
            let gnorm = linalg::norm2(&grad);
            if gnorm == F::zero() || !gnorm.is_finite() {
                return Err(Error::ZeroGradient);
            }
            let half = F::from_f64_lossy(0.5);
            Ok(-half * ext.eps * ext.t_new / (ext.t.sqrt() * gnorm))
        }
    }
}

fn require_h<'a, F>(h_appr: Option<&'a [F]>) -> Result<&'a [F]> {
    h_appr.ok_or_else(|| {
        Error::DegenerateInput("feasible-mode update needs the h approximation".into())
    })
}

/// Query-time accumulation into `u1`, `u2`, `u4`.
pub(crate) fn on_query<F: Scalar>(
    state: &mut MaintState<F>,
    w_appr: &[F],
    h_appr: &[F],
    locals: &Locals<F>,
    vec_part: &crate::linalg::PaddedVec<F>,
) -> Result<()> {
    let n = state.n();
    let ext = state.feas.as_mut().expect("feasible extension present");
    if ext.absorbed {
        // a matrix refresh in this round already accumulated the correction
        ext.absorbed = false;
        return Ok(());
    }
    let ext = state.feas.as_ref().unwrap();
    let c = scalar_c_or_zero(ext, h_appr)?;
    let fh = state.f.eval_vec(h_appr);
    let fg = state.f.eval_vec(&state.g);
    // 1_{S^new} (gamma^tmp - gamma1 - dgamma): padded slots of S^new into R^n
    let dense = vec_part.to_dense(n);
    let mut mask = vec![F::zero(); n];
    for &i in locals.s_new.items() {
        mask[i] = dense[i];
    }
    let inner: Vec<F> = (0..n)
        .map(|i| w_appr[i].sqrt() * fh[i] - state.v[i].sqrt() * fg[i] + mask[i])
        .collect();
    let minner = state.m.matvec(&inner);
    let ext = state.feas.as_mut().unwrap();
    for i in 0..n {
        ext.u1[i] = ext.u1[i]
            + c * (w_appr[i] - state.v_tilde[i]) * (state.beta2[i] + minner[i]);
        let inc = c * (w_appr[i].sqrt() * fh[i] + mask[i]);
        ext.u2[i] = ext.u2[i] + inc;
        ext.u4[i] = ext.u4[i] + inc;
    }
    Ok(())
}

/// Full-refresh flush: fold the pending corrections through the new `G` and
/// the old `M`, then clear `u2`, `u4`.
pub(crate) fn on_matrix_update<F: Scalar>(
    state: &mut MaintState<F>,
    w_appr: &[F],
    h_appr: Option<&[F]>,
    m_tmp: &DenseMatrix<F>,
) -> Result<()> {
    let n = state.n();
    let h = require_h(h_appr)?;
    let ext = state.feas.as_ref().expect("feasible extension present");
    let c = scalar_c_or_zero(ext, h)?;
    let fh = state.f.eval_vec(h);
    let swf: Vec<F> = (0..n).map(|i| w_appr[i].sqrt() * fh[i]).collect();
    let m_swf = m_tmp.matvec(&swf);
    let ext_u2 = state.feas.as_ref().unwrap().u2.clone();
    // flush the pending u2 through the old G, mirroring the old-M u3 flush
    let g_u2 = state.feas.as_ref().unwrap().g_mat.matvec(&ext_u2);
    let ext_u4 = state.feas.as_ref().unwrap().u4.clone();
    let m_old_u4 = state.m.matvec(&ext_u4);
    let ext = state.feas.as_mut().unwrap();
    ext.g_mat = m_tmp.diag_mul_left(w_appr);
    for i in 0..n {
        ext.u1[i] = ext.u1[i] + g_u2[i] + c * w_appr[i] * m_swf[i];
        ext.u3[i] = ext.u3[i] + m_old_u4[i] + c * m_swf[i];
        ext.u2[i] = F::zero();
        ext.u4[i] = F::zero();
    }
    ext.absorbed = true;
    Ok(())
}

/// Partial-refresh accumulation: shift `G` with the `v~` drift and absorb
/// the drift's effect on the pending corrections.
pub(crate) fn on_partial_matrix_update<F: Scalar>(
    state: &mut MaintState<F>,
    w_appr: &[F],
    h_appr: Option<&[F]>,
    b_tmp: &crate::linalg::PaddedBlock<F>,
    locals: &Locals<F>,
) -> Result<()> {
    let n = state.n();
    let h = require_h(h_appr)?;
    let ext = state.feas.as_ref().expect("feasible extension present");
    let c = scalar_c_or_zero(ext, h)?;
    let fh = state.f.eval_vec(h);
    let swf: Vec<F> = (0..n).map(|i| w_appr[i].sqrt() * fh[i]).collect();
    // 1_{S^new} B^tmp L_r[(M_{S^new})^T] sqrt(W) f(h)
    let mt = state.m.transpose();
    let rows_sn = pad(&mt, &locals.s_new, state.capacity, PadMode::Rows)?;
    let pv = rows_mul_dense_vec(&rows_sn, &swf);
    let bv = square_mul_vec(b_tmp, &pv)?;
    let bv_dense = bv.to_dense(n);
    let mut mask = vec![F::zero(); n];
    for &i in locals.s_new.items() {
        mask[i] = bv_dense[i];
    }
    let u2_old = state.feas.as_ref().unwrap().u2.clone();
    let m_u2 = state.m.matvec(&u2_old);
    let ext = state.feas.as_mut().unwrap();
    for i in 0..n {
        // the G shift below moves G u2 by +(W - V~) M u2; u1 compensates
        // with the opposite sign so the pending x only gains this round's
        // correction
        let drift = w_appr[i] - state.v_tilde[i];
        ext.u1[i] = ext.u1[i] - drift * m_u2[i];
        let inc = c * (swf[i] - mask[i]);
        ext.u2[i] = ext.u2[i] + inc;
        ext.u4[i] = ext.u4[i] + inc;
    }
    ext.absorbed = true;
    // G <- G + (W^appr - V~) M
    let drift_m = state.m.diag_mul_left(&linalg::vsub(w_appr, &state.v_tilde));
    ext.g_mat = ext.g_mat.add(&drift_m);
    Ok(())
}

/// Pending correction of the `x` side: `u1 + G u2`.
pub fn pending_x<F: Scalar>(state: &MaintState<F>) -> Vec<F> {
    let ext = state.feas.as_ref().expect("feasible extension present");
    linalg::vadd(&ext.u1, &ext.g_mat.matvec(&ext.u2))
}

/// Pending correction of the `s` side: `u3 + M u4`.
pub fn pending_s<F: Scalar>(state: &MaintState<F>) -> Vec<F> {
    let ext = state.feas.as_ref().expect("feasible extension present");
    linalg::vadd(&ext.u3, &state.m.matvec(&ext.u4))
}

/// Materialize the true iterate from the implicit representation:
/// `x - sum(u1 + G u2)`, `s + sum(u3 + M u4)` over both instances.
pub fn materialize<F: Scalar>(
    x: &[F],
    s: &[F],
    mp_t: &MaintState<F>,
    mp_phi: &MaintState<F>,
) -> (Vec<F>, Vec<F>) {
    let px = linalg::vadd(&pending_x(mp_t), &pending_x(mp_phi));
    let ps = linalg::vadd(&pending_s(mp_t), &pending_s(mp_phi));
    (linalg::vsub(x, &px), linalg::vadd(s, &ps))
}

/// Pull the coordinates whose `w` moved far (more than half relatively)
/// out of the implicit representation so the explicit `x_bar`, `s_bar`
/// stay accurate there.
#[allow(clippy::too_many_arguments)]
pub fn make_feasible<F: Scalar>(
    x_bar: &mut [F],
    s_bar: &mut [F],
    x: &[F],
    s: &[F],
    w_old: &mut [F],
    w_appr: &[F],
    mp_t: &MaintState<F>,
    mp_phi: &MaintState<F>,
) {
    let n = x.len();
    let half = F::from_f64_lossy(0.5);
    let hat: Vec<usize> = (0..n)
        .filter(|&i| (w_old[i] - w_appr[i]).abs() > half * w_old[i])
        .collect();
    if hat.is_empty() {
        return;
    }
    let px = linalg::vadd(&pending_x(mp_t), &pending_x(mp_phi));
    let ps = linalg::vadd(&pending_s(mp_t), &pending_s(mp_phi));
    for &i in &hat {
        x_bar[i] = x[i] - px[i];
        s_bar[i] = s[i] + ps[i];
        w_old[i] = w_appr[i];
    }
}
