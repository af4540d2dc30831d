//! Brute-force references used by the test suites: exact projection
//! matrices, the definitional sketched query, an exact central-path step,
//! and a basis-enumeration LP solver for tiny instances.

use crate::linalg::{self, mat_inverse, DenseMatrix};
use crate::sketch::SketchOp;
use crate::{Error, Result, Scalar};

/// `P(w) = sqrt(W) A^T (A W A^T)^{-1} A sqrt(W)`, computed directly.
///
/// Asserts the projection identities `P^2 = P` and `P = P^T` to 1e-8
/// (relative to the largest entry), so a caller with an ill-conditioned `w`
/// fails loudly instead of comparing against garbage.
pub fn naive_projection<F: Scalar>(a: &DenseMatrix<F>, w: &[F]) -> Result<DenseMatrix<F>> {
    let n = a.cols;
    assert_eq!(w.len(), n);
    let sqrt_w: Vec<F> = w.iter().map(|&x| x.sqrt()).collect();
    let aw = a.diag_mul_right(w);
    let awat = aw.matmul(&a.transpose());
    let inv = mat_inverse(&awat)?;
    let asw = a.diag_mul_right(&sqrt_w);
    let p = asw.transpose().matmul(&inv).matmul(&asw);
    let tol = F::from_f64_lossy(1e-8) * p.norm_max().max(F::one());
    let p2 = p.matmul(&p);
    for i in 0..n {
        for j in 0..n {
            let idem = (p2.get(i, j) - p.get(i, j)).abs();
            let sym = (p.get(i, j) - p.get(j, i)).abs();
            assert!(
                idem < tol && sym < tol,
                "projection identities violated at ({i},{j}): idem {idem}, sym {sym}"
            );
        }
    }
    Ok(p)
}

/// Definitional sketched query: `R^T R P(w) fh`.
pub fn naive_query<F: Scalar>(
    a: &DenseMatrix<F>,
    w: &[F],
    fh: &[F],
    r: &SketchOp<F>,
) -> Result<Vec<F>> {
    let p = naive_projection(a, w)?;
    let y = p.matvec(fh);
    Ok(r.apply_t(&r.apply(&y)))
}

/// One exact (unsketched) central-path step computed from the definitions.
#[derive(Debug, Clone)]
pub struct RefStep<F> {
    pub delta_mu: Vec<F>,
    pub dx: Vec<F>,
    pub ds: Vec<F>,
}

/// Evaluate the step definitions with the complementarity proxy
/// `mu~ = x * s` and the exact projection in place of the sketched one.
#[allow(clippy::too_many_arguments)]
pub fn reference_step<F: Scalar>(
    a: &DenseMatrix<F>,
    x: &[F],
    s: &[F],
    t: F,
    t_new: F,
    eps: F,
    lambda: F,
) -> Result<RefStep<F>> {
    let n = x.len();
    assert_eq!(s.len(), n);
    let w: Vec<F> = linalg::vdiv(x, s);
    let mu: Vec<F> = linalg::vmul(x, s);
    let sqrt_mu: Vec<F> = mu.iter().map(|&m| m.sqrt()).collect();

    // grad_i = lambda * sinh(lambda * (mu_i/t - 1))
    let grad: Vec<F> = mu
        .iter()
        .map(|&m| lambda * (lambda * (m / t - F::one())).sinh())
        .collect();
    let gnorm = linalg::norm2(&grad);
    if gnorm == F::zero() || !gnorm.is_finite() {
        return Err(Error::ZeroGradient);
    }

    let shift = t_new / t - F::one();
    // delta~_mu = shift * mu - (eps/2) * t_new * grad / ||grad||
    let half_eps = eps / F::from_f64_lossy(2.0);
    let delta_mu: Vec<F> = (0..n)
        .map(|i| shift * mu[i] - half_eps * t_new * grad[i] / gnorm)
        .collect();

    // p_mu with the exact projection: f_t = sqrt, f_phi(y) = grad-like over sqrt
    let p = naive_projection(a, &w)?;
    let f_phi: Vec<F> = mu
        .iter()
        .map(|&m| {
            let y = m / t;
            lambda * (lambda * (y - F::one())).sinh() / y.sqrt()
        })
        .collect();
    let p_t = p.matvec(&sqrt_mu);
    let p_phi = p.matvec(&f_phi);
    let c_phi = half_eps * t_new / (t.sqrt() * gnorm);
    let p_mu: Vec<F> = (0..n).map(|i| shift * p_t[i] - c_phi * p_phi[i]).collect();

    let dx: Vec<F> = (0..n)
        .map(|i| delta_mu[i] / s[i] - x[i] / sqrt_mu[i] * p_mu[i])
        .collect();
    let ds: Vec<F> = (0..n).map(|i| s[i] / sqrt_mu[i] * p_mu[i]).collect();
    Ok(RefStep { delta_mu, dx, ds })
}

/// Outcome of the exact tiny-LP solver.
#[derive(Debug, Clone)]
pub enum TinyLp<F> {
    Optimal { x: Vec<F>, objective: F },
    Infeasible,
    Unbounded,
}

const TINY_TOL: f64 = 1e-9;

/// Exact solver for `min c^T x, Ax = b, x >= 0` by enumerating all bases.
///
/// Caps: `n <= 24`, `d <= 12`. Requires `A` of full row rank in the sense
/// that at least one basis is nonsingular when the LP is feasible; rays at
/// feasible bases detect unboundedness.
pub fn tiny_lp_exact<F: Scalar>(
    a: &DenseMatrix<F>,
    b: &[F],
    c: &[F],
) -> Result<TinyLp<F>> {
    let (d, n) = (a.rows, a.cols);
    if n > 24 || d > 12 || d > n {
        return Err(Error::InvalidDim(format!(
            "tiny_lp_exact caps are n <= 24, d <= 12, d <= n; got n = {n}, d = {d}"
        )));
    }
    assert_eq!(b.len(), d);
    assert_eq!(c.len(), n);
    let tol = F::from_f64_lossy(TINY_TOL);

    let mut best: Option<(Vec<F>, F)> = None;
    let mut basis: Vec<usize> = (0..d).collect();
    loop {
        if let Some(res) = check_basis(a, b, c, &basis, tol)? {
            match res {
                BasisOutcome::Unbounded => return Ok(TinyLp::Unbounded),
                BasisOutcome::Vertex { x, objective } => {
                    if best.as_ref().map_or(true, |(_, o)| objective < *o) {
                        best = Some((x, objective));
                    }
                }
            }
        }
        // next combination of d indices out of n
        let mut i = d;
        loop {
            if i == 0 {
                return Ok(match best {
                    Some((x, objective)) => TinyLp::Optimal { x, objective },
                    None => TinyLp::Infeasible,
                });
            }
            i -= 1;
            if basis[i] < n - (d - i) {
                basis[i] += 1;
                for j in i + 1..d {
                    basis[j] = basis[j - 1] + 1;
                }
                break;
            }
        }
    }
}

enum BasisOutcome<F> {
    Vertex { x: Vec<F>, objective: F },
    Unbounded,
}

fn check_basis<F: Scalar>(
    a: &DenseMatrix<F>,
    b: &[F],
    c: &[F],
    basis: &[usize],
    tol: F,
) -> Result<Option<BasisOutcome<F>>> {
    let (d, n) = (a.rows, a.cols);
    let mut ab = DenseMatrix::zeros(d, d);
    for (q, &j) in basis.iter().enumerate() {
        for i in 0..d {
            ab.set(i, q, a.get(i, j));
        }
    }
    let ab_inv = match mat_inverse(&ab) {
        Ok(m) => m,
        Err(Error::SingularMatrix(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let xb = ab_inv.matvec(b);
    if xb.iter().any(|&v| v < -tol) {
        return Ok(None);
    }
    // feasible vertex; scan nonbasic columns for improving rays
    let cb: Vec<F> = basis.iter().map(|&j| c[j]).collect();
    let y = ab_inv.transpose().matvec(&cb); // simplex multipliers
    let in_basis = |j: usize| basis.contains(&j);
    for j in 0..n {
        if in_basis(j) {
            continue;
        }
        let col: Vec<F> = (0..d).map(|i| a.get(i, j)).collect();
        let reduced = c[j] - linalg::dot(&y, &col);
        if reduced < -tol {
            let dir = ab_inv.matvec(&col);
            // basic part moves by -dir per unit of x_j
            if dir.iter().all(|&v| v <= tol) {
                return Ok(Some(BasisOutcome::Unbounded));
            }
        }
    }
    let mut x = vec![F::zero(); n];
    for (q, &j) in basis.iter().enumerate() {
        x[j] = xb[q].max(F::zero());
    }
    let objective = linalg::dot(c, &x);
    Ok(Some(BasisOutcome::Vertex { x, objective }))
}
