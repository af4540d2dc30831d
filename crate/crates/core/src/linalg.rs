//! Dense real linear algebra: row-major matrices, a pivoted-LU inverse,
//! Woodbury low-rank updates, sorted index sets, and the fixed-capacity
//! padded-block containers (with zero padding for row/column blocks and
//! identity padding for square blocks) that make submatrix algebra
//! slot-aligned.

use crate::{Error, Result, Scalar};

// ---------------------------------------------------------------------------
// vector helpers

pub fn vadd<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn vsub<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn vscale<F: Scalar>(c: F, a: &[F]) -> Vec<F> {
    a.iter().map(|&x| c * x).collect()
}

pub fn vmul<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub fn vdiv<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x / y).collect()
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

pub fn norm1<F: Scalar>(a: &[F]) -> F {
    a.iter().map(|&x| x.abs()).sum()
}

pub fn norm_inf<F: Scalar>(a: &[F]) -> F {
    a.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
}

// ---------------------------------------------------------------------------
// DenseMatrix

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> DenseMatrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, F::one());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// Diagonal matrix from a vector.
    pub fn diag(d: &[F]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: vadd(&self.data, &other.data),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: vsub(&self.data, &other.data),
        }
    }

    pub fn scale(&self, c: F) -> Self {
        Self { rows: self.rows, cols: self.cols, data: vscale(c, &self.data) }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == F::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[F]) -> Vec<F> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[F]) -> Vec<F> {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![F::zero(); self.cols];
        for i in 0..self.rows {
            let c = v[i];
            if c == F::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + c * a;
            }
        }
        out
    }

    /// Scale row i by d[i] (left-multiply by diag(d)).
    pub fn diag_mul_left(&self, d: &[F]) -> Self {
        assert_eq!(self.rows, d.len());
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                m.set(i, j, d[i] * self.get(i, j));
            }
        }
        m
    }

    /// Scale column j by d[j] (right-multiply by diag(d)).
    pub fn diag_mul_right(&self, d: &[F]) -> Self {
        assert_eq!(self.cols, d.len());
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                m.set(i, j, self.get(i, j) * d[j]);
            }
        }
        m
    }

    /// Copy of rows `lo..hi`.
    pub fn row_range(&self, lo: usize, hi: usize) -> Self {
        assert!(lo <= hi && hi <= self.rows);
        Self {
            rows: hi - lo,
            cols: self.cols,
            data: self.data[lo * self.cols..hi * self.cols].to_vec(),
        }
    }

    /// Columns indexed by `s`, in the order of `s`.
    pub fn col_select(&self, s: &IndexSet) -> Self {
        let mut m = Self::zeros(self.rows, s.len());
        for i in 0..self.rows {
            for (p, &j) in s.items().iter().enumerate() {
                m.set(i, p, self.get(i, j));
            }
        }
        m
    }

    /// Rows indexed by `s`, in the order of `s`.
    pub fn row_select(&self, s: &IndexSet) -> Self {
        let mut m = Self::zeros(s.len(), self.cols);
        for (p, &i) in s.items().iter().enumerate() {
            for j in 0..self.cols {
                m.set(p, j, self.get(i, j));
            }
        }
        m
    }

    /// Principal-style submatrix with rows from `rs` and columns from `cs`.
    pub fn submatrix(&self, rs: &IndexSet, cs: &IndexSet) -> Self {
        let mut m = Self::zeros(rs.len(), cs.len());
        for (p, &i) in rs.items().iter().enumerate() {
            for (q, &j) in cs.items().iter().enumerate() {
                m.set(p, q, self.get(i, j));
            }
        }
        m
    }

    /// Horizontal concatenation.
    pub fn hcat(blocks: &[&Self]) -> Self {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut m = Self::zeros(rows, cols);
        let mut off = 0;
        for b in blocks {
            assert_eq!(b.rows, rows);
            for i in 0..rows {
                for j in 0..b.cols {
                    m.set(i, off + j, b.get(i, j));
                }
            }
            off += b.cols;
        }
        m
    }

    pub fn norm_max(&self) -> F {
        norm_inf(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// inverse and Woodbury

/// Relative pivot threshold below which a matrix is declared singular.
const PIVOT_REL_TOL: f64 = 1e-12;

/// Inverse of a square matrix via row-pivoted Gauss-Jordan elimination.
///
/// Fails with `SingularMatrix` when a pivot falls below `1e-12` times the
/// largest entry of the corresponding column of the input; the per-column
/// scaling keeps badly scaled but invertible diagonals from tripping it.
pub fn mat_inverse<F: Scalar>(m: &DenseMatrix<F>) -> Result<DenseMatrix<F>> {
    assert_eq!(m.rows, m.cols, "mat_inverse needs a square matrix");
    let n = m.rows;
    if n == 0 {
        return Ok(DenseMatrix::zeros(0, 0));
    }
    let scale = m.norm_max();
    if scale == F::zero() || !scale.is_finite() {
        return Err(Error::SingularMatrix(format!(
            "zero or non-finite matrix of dim {n}"
        )));
    }
    let rel = F::from_f64_lossy(PIVOT_REL_TOL);
    let col_tol: Vec<F> = (0..n)
        .map(|j| {
            let mut c = F::zero();
            for i in 0..n {
                let v = m.get(i, j).abs();
                if v > c {
                    c = v;
                }
            }
            rel * c
        })
        .collect();
    // Augmented [M | I], eliminated in place.
    let mut a = m.clone();
    let mut inv = DenseMatrix::<F>::identity(n);
    for col in 0..n {
        // partial pivoting
        let mut piv = col;
        let mut best = a.get(col, col).abs();
        for r in col + 1..n {
            let v = a.get(r, col).abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= col_tol[col] {
            return Err(Error::SingularMatrix(format!(
                "pivot {best} below threshold at column {col}"
            )));
        }
        if piv != col {
            for j in 0..n {
                let (x, y) = (a.get(col, j), a.get(piv, j));
                a.set(col, j, y);
                a.set(piv, j, x);
                let (x, y) = (inv.get(col, j), inv.get(piv, j));
                inv.set(col, j, y);
                inv.set(piv, j, x);
            }
        }
        let p = a.get(col, col);
        let pinv = F::one() / p;
        for j in 0..n {
            a.set(col, j, a.get(col, j) * pinv);
            inv.set(col, j, inv.get(col, j) * pinv);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(r, col);
            if f == F::zero() {
                continue;
            }
            for j in 0..n {
                a.set(r, j, a.get(r, j) - f * a.get(col, j));
                inv.set(r, j, inv.get(r, j) - f * inv.get(col, j));
            }
        }
    }
    Ok(inv)
}

/// `(M + U C V)^{-1}` from `M^{-1}` via the Woodbury identity:
/// `Minv - Minv U (C^{-1} + V Minv U)^{-1} V Minv`.
pub fn woodbury<F: Scalar>(
    minv: &DenseMatrix<F>,
    u: &DenseMatrix<F>,
    c: &DenseMatrix<F>,
    v: &DenseMatrix<F>,
) -> Result<DenseMatrix<F>> {
    let k = u.cols;
    assert_eq!(minv.rows, minv.cols);
    assert_eq!(u.rows, minv.rows);
    assert_eq!(c.rows, k);
    assert_eq!(c.cols, k);
    assert_eq!(v.rows, k);
    assert_eq!(v.cols, minv.cols);
    if k == 0 {
        return Ok(minv.clone());
    }
    let cinv = mat_inverse(c)?;
    let minv_u = minv.matmul(u);
    let v_minv = v.matmul(minv);
    let cap = cinv.add(&v.matmul(&minv_u));
    let cap_inv = mat_inverse(&cap)?;
    Ok(minv.sub(&minv_u.matmul(&cap_inv).matmul(&v_minv)))
}

// ---------------------------------------------------------------------------
// IndexSet

/// Sorted list of distinct indices in `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet {
    items: Vec<usize>,
}

impl IndexSet {
    pub fn new(mut items: Vec<usize>) -> Self {
        items.sort_unstable();
        items.dedup();
        Self { items }
    }

    pub fn empty() -> Self {
        Self { items: Vec::new() }
    }

    /// Support of `a - b`: indices where the vectors differ.
    pub fn support_diff<F: Scalar>(a: &[F], b: &[F]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        Self {
            items: (0..a.len()).filter(|&i| a[i] != b[i]).collect(),
        }
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.items.binary_search(&i).is_ok()
    }

    /// Position of `i` within the sorted list, if present.
    pub fn pos(&self, i: usize) -> Option<usize> {
        self.items.binary_search(&i).ok()
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut v = self.items.clone();
        v.extend_from_slice(&other.items);
        Self::new(v)
    }

    pub fn intersect(&self, other: &Self) -> Self {
        Self {
            items: self
                .items
                .iter()
                .copied()
                .filter(|&i| other.contains(i))
                .collect(),
        }
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self {
            items: self
                .items
                .iter()
                .copied()
                .filter(|&i| !other.contains(i))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// PaddedBlock / PaddedVec

/// How a block is padded into its fixed-capacity container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Column block: payload is `k1 x capacity`; occupied slots hold columns.
    Cols,
    /// Row block: payload is `capacity x k2`; occupied slots hold rows.
    Rows,
    /// Square block: payload is `capacity x capacity`; both axes slotted.
    Square,
}

/// A submatrix stored in a fixed-capacity zero-padded (or, for square
/// blocks, identity-padded) container. Slot `p` of each padded axis holds
/// original index `slots[p]`; slots are kept sorted ascending and the
/// remaining `capacity - |slots|` positions are EMPTY.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBlock<F> {
    pub capacity: usize,
    pub slots: IndexSet,
    pub payload: DenseMatrix<F>,
    pub mode: PadMode,
    /// Square blocks only: EMPTY diagonal positions read as 1 instead of 0,
    /// and the block acts as the identity outside its occupied slots.
    pub identity_diag: bool,
}

impl<F: Scalar> PaddedBlock<F> {
    fn check_capacity(capacity: usize, needed: usize) -> Result<()> {
        if needed > capacity {
            Err(Error::CapacityExceeded { needed, capacity })
        } else {
            Ok(())
        }
    }

    /// All-zero column block with no occupied slots (used for a fresh F).
    pub fn zero_cols(rows: usize, capacity: usize) -> Self {
        Self {
            capacity,
            slots: IndexSet::empty(),
            payload: DenseMatrix::zeros(rows, capacity),
            mode: PadMode::Cols,
            identity_diag: false,
        }
    }

    /// All-zero row block with no occupied slots (used for a fresh E).
    pub fn zero_rows(cols: usize, capacity: usize) -> Self {
        Self {
            capacity,
            slots: IndexSet::empty(),
            payload: DenseMatrix::zeros(capacity, cols),
            mode: PadMode::Rows,
            identity_diag: false,
        }
    }

    /// Identity-padded square block with no occupied slots (a fresh B).
    pub fn identity_square(capacity: usize) -> Self {
        Self {
            capacity,
            slots: IndexSet::empty(),
            payload: DenseMatrix::identity(capacity),
            mode: PadMode::Square,
            identity_diag: true,
        }
    }

    pub fn occupied(&self) -> usize {
        self.slots.len()
    }

    /// Semantic entry lookup for square blocks by original indices.
    pub fn square_get(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.mode, PadMode::Square);
        match (self.slots.pos(i), self.slots.pos(j)) {
            (Some(p), Some(q)) => self.payload.get(p, q),
            _ => {
                if i == j && self.identity_diag {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }

    /// Re-pad onto a superset slot list; payload entries move to their new
    /// positions, EMPTY positions stay zero (or 1 on the diagonal for
    /// identity-padded squares whose index enters the occupied range).
    pub fn repad(&self, new_slots: &IndexSet) -> Result<Self> {
        debug_assert!(
            self.slots.items().iter().all(|&i| new_slots.contains(i)),
            "repad target must be a superset"
        );
        Self::check_capacity(self.capacity, new_slots.len())?;
        let payload = match self.mode {
            PadMode::Cols => {
                let mut p = DenseMatrix::zeros(self.payload.rows, self.capacity);
                for (old, &orig) in self.slots.items().iter().enumerate() {
                    let new = new_slots.pos(orig).unwrap();
                    for r in 0..p.rows {
                        p.set(r, new, self.payload.get(r, old));
                    }
                }
                p
            }
            PadMode::Rows => {
                let mut p = DenseMatrix::zeros(self.capacity, self.payload.cols);
                for (old, &orig) in self.slots.items().iter().enumerate() {
                    let new = new_slots.pos(orig).unwrap();
                    for c in 0..p.cols {
                        p.set(new, c, self.payload.get(old, c));
                    }
                }
                p
            }
            PadMode::Square => {
                let mut p = if self.identity_diag {
                    DenseMatrix::identity(self.capacity)
                } else {
                    DenseMatrix::zeros(self.capacity, self.capacity)
                };
                for (pi, &oi) in self.slots.items().iter().enumerate() {
                    let ni = new_slots.pos(oi).unwrap();
                    if self.identity_diag {
                        // clear the default 1 before copying the row/col
                        p.set(ni, ni, F::zero());
                    }
                    for (pj, &oj) in self.slots.items().iter().enumerate() {
                        let nj = new_slots.pos(oj).unwrap();
                        p.set(ni, nj, self.payload.get(pi, pj));
                    }
                }
                p
            }
        };
        Ok(Self {
            capacity: self.capacity,
            slots: new_slots.clone(),
            payload,
            mode: self.mode,
            identity_diag: self.identity_diag,
        })
    }

    /// Slot-aligned addition; occupied slots become the union.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.mode != other.mode {
            return Err(Error::AlignmentError(format!(
                "cannot add {:?} block to {:?} block",
                self.mode, other.mode
            )));
        }
        if self.identity_diag && other.identity_diag {
            return Err(Error::AlignmentError(
                "adding two identity-padded squares would double the implied 1s".into(),
            ));
        }
        let u = self.slots.union(&other.slots);
        let a = self.repad(&u)?;
        let b = other.repad(&u)?;
        // At most one operand carries implied 1s; the payload sum then has a
        // 1-plus-0 tail diagonal, which is exactly identity padding again.
        let mut out = a;
        out.payload = out.payload.add(&b.payload);
        out.identity_diag = self.identity_diag || other.identity_diag;
        Ok(out)
    }

    /// Slot-aligned subtraction; for two identity-padded squares the implied
    /// 1s cancel and the result is a zero-padded square.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.mode != other.mode {
            return Err(Error::AlignmentError(format!(
                "cannot subtract {:?} block from {:?} block",
                other.mode, self.mode
            )));
        }
        if other.identity_diag && !self.identity_diag {
            return Err(Error::AlignmentError(
                "zero-padded minus identity-padded square is not representable".into(),
            ));
        }
        let u = self.slots.union(&other.slots);
        let a = self.repad(&u)?;
        let b = other.repad(&u)?;
        let mut out = a;
        out.payload = out.payload.sub(&b.payload);
        out.identity_diag = self.identity_diag && !other.identity_diag;
        if self.identity_diag && other.identity_diag {
            // the EMPTY tail held 1s in both payloads and now holds 0s
            out.identity_diag = false;
        }
        Ok(out)
    }

    /// Semantic dense embedding into the ambient dimension, used by tests
    /// and oracles. For identity-padded squares the off-slot diagonal is 1.
    pub fn to_dense(&self, ambient_rows: usize, ambient_cols: usize) -> DenseMatrix<F> {
        match self.mode {
            PadMode::Cols => {
                assert_eq!(ambient_rows, self.payload.rows);
                let mut m = DenseMatrix::zeros(ambient_rows, ambient_cols);
                for (p, &j) in self.slots.items().iter().enumerate() {
                    for i in 0..ambient_rows {
                        m.set(i, j, self.payload.get(i, p));
                    }
                }
                m
            }
            PadMode::Rows => {
                assert_eq!(ambient_cols, self.payload.cols);
                let mut m = DenseMatrix::zeros(ambient_rows, ambient_cols);
                for (p, &i) in self.slots.items().iter().enumerate() {
                    for j in 0..ambient_cols {
                        m.set(i, j, self.payload.get(p, j));
                    }
                }
                m
            }
            PadMode::Square => {
                assert_eq!(ambient_rows, ambient_cols);
                let mut m = if self.identity_diag {
                    DenseMatrix::identity(ambient_rows)
                } else {
                    DenseMatrix::zeros(ambient_rows, ambient_cols)
                };
                for (pi, &i) in self.slots.items().iter().enumerate() {
                    if self.identity_diag {
                        m.set(i, i, F::zero());
                    }
                    for (pj, &j) in self.slots.items().iter().enumerate() {
                        m.set(i, j, self.payload.get(pi, pj));
                    }
                }
                m
            }
        }
    }

    /// Inverse of a square block; identity padding inverts to itself, so only
    /// the occupied principal payload is inverted.
    pub fn square_inverse(&self) -> Result<Self> {
        assert_eq!(self.mode, PadMode::Square);
        if !self.identity_diag {
            return Err(Error::AlignmentError(
                "only identity-padded squares have a well-defined inverse".into(),
            ));
        }
        let k = self.slots.len();
        let occ = self.payload_occupied_square();
        let inv = mat_inverse(&occ)?;
        let mut out = Self::identity_square(self.capacity);
        out.slots = self.slots.clone();
        for i in 0..k {
            out.payload.set(i, i, F::zero());
            for j in 0..k {
                out.payload.set(i, j, inv.get(i, j));
            }
        }
        Ok(out)
    }

    /// The occupied `|slots| x |slots|` corner of a square payload.
    pub fn payload_occupied_square(&self) -> DenseMatrix<F> {
        assert_eq!(self.mode, PadMode::Square);
        let k = self.slots.len();
        let mut m = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                m.set(i, j, self.payload.get(i, j));
            }
        }
        m
    }
}

/// A vector stored in a fixed-capacity zero-padded container with the same
/// slot discipline as `PaddedBlock`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedVec<F> {
    pub capacity: usize,
    pub slots: IndexSet,
    /// Length `capacity`; positions past `|slots|` are zero.
    pub payload: Vec<F>,
}

impl<F: Scalar> PaddedVec<F> {
    pub fn zero(capacity: usize) -> Self {
        Self {
            capacity,
            slots: IndexSet::empty(),
            payload: vec![F::zero(); capacity],
        }
    }

    /// `L_r[v_S]`: store the subvector of `v` indexed by `s`.
    pub fn pad(v: &[F], s: &IndexSet, capacity: usize) -> Result<Self> {
        if s.len() > capacity {
            return Err(Error::CapacityExceeded { needed: s.len(), capacity });
        }
        let mut payload = vec![F::zero(); capacity];
        for (p, &i) in s.items().iter().enumerate() {
            payload[p] = v[i];
        }
        Ok(Self { capacity, slots: s.clone(), payload })
    }

    pub fn repad(&self, new_slots: &IndexSet) -> Result<Self> {
        if new_slots.len() > self.capacity {
            return Err(Error::CapacityExceeded {
                needed: new_slots.len(),
                capacity: self.capacity,
            });
        }
        let mut payload = vec![F::zero(); self.capacity];
        for (old, &orig) in self.slots.items().iter().enumerate() {
            payload[new_slots.pos(orig).unwrap()] = self.payload[old];
        }
        Ok(Self { capacity: self.capacity, slots: new_slots.clone(), payload })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let u = self.slots.union(&other.slots);
        let a = self.repad(&u)?;
        let b = other.repad(&u)?;
        Ok(Self {
            capacity: a.capacity,
            slots: u,
            payload: vadd(&a.payload, &b.payload),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let u = self.slots.union(&other.slots);
        let a = self.repad(&u)?;
        let b = other.repad(&u)?;
        Ok(Self {
            capacity: a.capacity,
            slots: u,
            payload: vsub(&a.payload, &b.payload),
        })
    }

    /// Semantic dense embedding.
    pub fn to_dense(&self, ambient: usize) -> Vec<F> {
        let mut v = vec![F::zero(); ambient];
        for (p, &i) in self.slots.items().iter().enumerate() {
            v[i] = self.payload[p];
        }
        v
    }
}

// ---------------------------------------------------------------------------
// pad / padded_mul

/// Build a padded block from a full matrix and an index set.
///
/// - `Cols`: occupied slots hold the columns of `m` indexed by `s`.
/// - `Rows`: occupied slots hold the rows of `m` indexed by `s`.
/// - `Square`: `m` must already be the compact `|s| x |s|` principal block;
///   EMPTY diagonal slots read as 1 (identity padding).
pub fn pad<F: Scalar>(
    m: &DenseMatrix<F>,
    s: &IndexSet,
    capacity: usize,
    mode: PadMode,
) -> Result<PaddedBlock<F>> {
    if s.len() > capacity {
        return Err(Error::CapacityExceeded { needed: s.len(), capacity });
    }
    match mode {
        PadMode::Cols => {
            let mut payload = DenseMatrix::zeros(m.rows, capacity);
            for (p, &j) in s.items().iter().enumerate() {
                for i in 0..m.rows {
                    payload.set(i, p, m.get(i, j));
                }
            }
            Ok(PaddedBlock {
                capacity,
                slots: s.clone(),
                payload,
                mode,
                identity_diag: false,
            })
        }
        PadMode::Rows => {
            let mut payload = DenseMatrix::zeros(capacity, m.cols);
            for (p, &i) in s.items().iter().enumerate() {
                for j in 0..m.cols {
                    payload.set(p, j, m.get(i, j));
                }
            }
            Ok(PaddedBlock {
                capacity,
                slots: s.clone(),
                payload,
                mode,
                identity_diag: false,
            })
        }
        PadMode::Square => {
            assert_eq!(m.rows, m.cols, "square pad needs a square matrix");
            assert_eq!(m.rows, s.len(), "square pad input must be compact on s");
            let mut payload = DenseMatrix::identity(capacity);
            for i in 0..s.len() {
                payload.set(i, i, F::zero());
                for j in 0..s.len() {
                    payload.set(i, j, m.get(i, j));
                }
            }
            Ok(PaddedBlock {
                capacity,
                slots: s.clone(),
                payload,
                mode,
                identity_diag: true,
            })
        }
    }
}

fn union_checked<F: Scalar>(a: &PaddedBlock<F>, b: &PaddedBlock<F>) -> Result<IndexSet> {
    let u = a.slots.union(&b.slots);
    let cap = a.capacity.min(b.capacity);
    if u.len() > cap {
        return Err(Error::CapacityExceeded { needed: u.len(), capacity: cap });
    }
    Ok(u)
}

/// `L_c[A_S1] * L_r[(B_S2)^T]`: slot-aligned product of a column block and a
/// row block, contracting over the shared index space. The Remark requires a
/// subset relation between the slot sets.
pub fn cols_mul_rows<F: Scalar>(
    a: &PaddedBlock<F>,
    b: &PaddedBlock<F>,
) -> Result<DenseMatrix<F>> {
    assert_eq!(a.mode, PadMode::Cols);
    assert_eq!(b.mode, PadMode::Rows);
    let (sa, sb) = (&a.slots, &b.slots);
    let nested = sa.items().iter().all(|&i| sb.contains(i))
        || sb.items().iter().all(|&i| sa.contains(i));
    if !nested {
        return Err(Error::AlignmentError(
            "column/row block product needs nested slot sets".into(),
        ));
    }
    let shared = sa.intersect(sb);
    let mut out = DenseMatrix::zeros(a.payload.rows, b.payload.cols);
    for &idx in shared.items() {
        let pa = sa.pos(idx).unwrap();
        let pb = sb.pos(idx).unwrap();
        for i in 0..out.rows {
            let av = a.payload.get(i, pa);
            if av == F::zero() {
                continue;
            }
            for j in 0..out.cols {
                out.set(i, j, out.get(i, j) + av * b.payload.get(pb, j));
            }
        }
    }
    Ok(out)
}

/// Identity-or-zero padded square times a row block: the square acts on the
/// slotted axis; result is a row block on the union slot set.
pub fn square_mul_rows<F: Scalar>(
    sq: &PaddedBlock<F>,
    rows: &PaddedBlock<F>,
) -> Result<PaddedBlock<F>> {
    assert_eq!(sq.mode, PadMode::Square);
    assert_eq!(rows.mode, PadMode::Rows);
    let u = union_checked(sq, rows)?;
    let a = sq.repad(&u)?;
    let b = rows.repad(&u)?;
    let k = u.len();
    let cols = rows.payload.cols;
    let mut payload = DenseMatrix::zeros(rows.capacity, cols);
    for i in 0..k {
        for t in 0..k {
            let av = a.payload.get(i, t);
            if av == F::zero() {
                continue;
            }
            for j in 0..cols {
                payload.set(i, j, payload.get(i, j) + av * b.payload.get(t, j));
            }
        }
    }
    Ok(PaddedBlock {
        capacity: rows.capacity,
        slots: u,
        payload,
        mode: PadMode::Rows,
        identity_diag: false,
    })
}

/// Square block times a padded vector.
pub fn square_mul_vec<F: Scalar>(
    sq: &PaddedBlock<F>,
    v: &PaddedVec<F>,
) -> Result<PaddedVec<F>> {
    assert_eq!(sq.mode, PadMode::Square);
    let u = sq.slots.union(&v.slots);
    if u.len() > sq.capacity {
        return Err(Error::CapacityExceeded { needed: u.len(), capacity: sq.capacity });
    }
    let a = sq.repad(&u)?;
    let b = v.repad(&u)?;
    let k = u.len();
    let mut payload = vec![F::zero(); v.capacity];
    for i in 0..k {
        let mut acc = F::zero();
        for t in 0..k {
            acc = acc + a.payload.get(i, t) * b.payload[t];
        }
        payload[i] = acc;
    }
    Ok(PaddedVec { capacity: v.capacity, slots: u, payload })
}

/// Row block times a dense vector over its full (unslotted) column space.
pub fn rows_mul_dense_vec<F: Scalar>(rows: &PaddedBlock<F>, v: &[F]) -> PaddedVec<F> {
    assert_eq!(rows.mode, PadMode::Rows);
    assert_eq!(rows.payload.cols, v.len());
    let mut payload = vec![F::zero(); rows.capacity];
    for p in 0..rows.slots.len() {
        payload[p] = dot(rows.payload.row(p), v);
    }
    PaddedVec {
        capacity: rows.capacity,
        slots: rows.slots.clone(),
        payload,
    }
}

/// Row block times a dense matrix over its full column space.
pub fn rows_mul_dense<F: Scalar>(
    rows: &PaddedBlock<F>,
    m: &DenseMatrix<F>,
) -> PaddedBlock<F> {
    assert_eq!(rows.mode, PadMode::Rows);
    assert_eq!(rows.payload.cols, m.rows);
    let k = rows.slots.len();
    let mut payload = DenseMatrix::zeros(rows.capacity, m.cols);
    for p in 0..k {
        for t in 0..m.rows {
            let av = rows.payload.get(p, t);
            if av == F::zero() {
                continue;
            }
            for j in 0..m.cols {
                payload.set(p, j, payload.get(p, j) + av * m.get(t, j));
            }
        }
    }
    PaddedBlock {
        capacity: rows.capacity,
        slots: rows.slots.clone(),
        payload,
        mode: PadMode::Rows,
        identity_diag: false,
    }
}

/// `A^T B` for two row blocks, contracting over the slotted axis (aligned by
/// original index); the result is a small dense matrix.
pub fn rows_t_mul_rows<F: Scalar>(
    a: &PaddedBlock<F>,
    b: &PaddedBlock<F>,
) -> Result<DenseMatrix<F>> {
    assert_eq!(a.mode, PadMode::Rows);
    assert_eq!(b.mode, PadMode::Rows);
    let shared = a.slots.intersect(&b.slots);
    let mut out = DenseMatrix::zeros(a.payload.cols, b.payload.cols);
    for &idx in shared.items() {
        let pa = a.slots.pos(idx).unwrap();
        let pb = b.slots.pos(idx).unwrap();
        for i in 0..out.rows {
            let av = a.payload.get(pa, i);
            if av == F::zero() {
                continue;
            }
            for j in 0..out.cols {
                out.set(i, j, out.get(i, j) + av * b.payload.get(pb, j));
            }
        }
    }
    Ok(out)
}

/// `A^T v` for a row block and a padded vector, aligned by original index.
pub fn rows_t_mul_vec<F: Scalar>(a: &PaddedBlock<F>, v: &PaddedVec<F>) -> Vec<F> {
    assert_eq!(a.mode, PadMode::Rows);
    let shared = a.slots.intersect(&v.slots);
    let mut out = vec![F::zero(); a.payload.cols];
    for &idx in shared.items() {
        let pa = a.slots.pos(idx).unwrap();
        let pv = v.slots.pos(idx).unwrap();
        let c = v.payload[pv];
        if c == F::zero() {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o = *o + c * a.payload.get(pa, j);
        }
    }
    out
}

/// `A B^T` for two row blocks: a zero-padded square on the union slot set.
pub fn rows_mul_rows_t<F: Scalar>(
    a: &PaddedBlock<F>,
    b: &PaddedBlock<F>,
) -> Result<PaddedBlock<F>> {
    assert_eq!(a.mode, PadMode::Rows);
    assert_eq!(b.mode, PadMode::Rows);
    assert_eq!(a.payload.cols, b.payload.cols);
    let u = union_checked(a, b)?;
    let ra = a.repad(&u)?;
    let rb = b.repad(&u)?;
    let k = u.len();
    let cap = a.capacity;
    let mut payload = DenseMatrix::zeros(cap, cap);
    for i in 0..k {
        for j in 0..k {
            payload.set(i, j, dot(ra.payload.row(i), rb.payload.row(j)));
        }
    }
    Ok(PaddedBlock {
        capacity: cap,
        slots: u,
        payload,
        mode: PadMode::Square,
        identity_diag: false,
    })
}

/// Dense matrix times a column block over the full shared (unslotted) axis.
pub fn dense_mul_cols<F: Scalar>(
    m: &DenseMatrix<F>,
    cols: &PaddedBlock<F>,
) -> PaddedBlock<F> {
    assert_eq!(cols.mode, PadMode::Cols);
    assert_eq!(m.cols, cols.payload.rows);
    let k = cols.slots.len();
    let mut payload = DenseMatrix::zeros(m.rows, cols.capacity);
    for i in 0..m.rows {
        for t in 0..m.cols {
            let av = m.get(i, t);
            if av == F::zero() {
                continue;
            }
            for p in 0..k {
                payload.set(i, p, payload.get(i, p) + av * cols.payload.get(t, p));
            }
        }
    }
    PaddedBlock {
        capacity: cols.capacity,
        slots: cols.slots.clone(),
        payload,
        mode: PadMode::Cols,
        identity_diag: false,
    }
}

/// Column block times a padded vector, aligned by original index.
pub fn cols_mul_vec<F: Scalar>(cols: &PaddedBlock<F>, v: &PaddedVec<F>) -> Vec<F> {
    assert_eq!(cols.mode, PadMode::Cols);
    let shared = cols.slots.intersect(&v.slots);
    let mut out = vec![F::zero(); cols.payload.rows];
    for &idx in shared.items() {
        let pc = cols.slots.pos(idx).unwrap();
        let pv = v.slots.pos(idx).unwrap();
        let c = v.payload[pv];
        if c == F::zero() {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + c * cols.payload.get(i, pc);
        }
    }
    out
}

/// Column block times a square block: result is a column block on the union.
pub fn cols_mul_square<F: Scalar>(
    cols: &PaddedBlock<F>,
    sq: &PaddedBlock<F>,
) -> Result<PaddedBlock<F>> {
    assert_eq!(cols.mode, PadMode::Cols);
    assert_eq!(sq.mode, PadMode::Square);
    let u = union_checked(cols, sq)?;
    let a = cols.repad(&u)?;
    let b = sq.repad(&u)?;
    let k = u.len();
    let mut payload = DenseMatrix::zeros(cols.payload.rows, cols.capacity);
    for i in 0..payload.rows {
        for t in 0..k {
            let av = a.payload.get(i, t);
            if av == F::zero() {
                continue;
            }
            for j in 0..k {
                payload.set(i, j, payload.get(i, j) + av * b.payload.get(t, j));
            }
        }
    }
    Ok(PaddedBlock {
        capacity: cols.capacity,
        slots: u,
        payload,
        mode: PadMode::Cols,
        identity_diag: false,
    })
}

/// Square times square: slot-aligned payload product on the union.
pub fn square_mul_square<F: Scalar>(
    a: &PaddedBlock<F>,
    b: &PaddedBlock<F>,
) -> Result<PaddedBlock<F>> {
    assert_eq!(a.mode, PadMode::Square);
    assert_eq!(b.mode, PadMode::Square);
    let u = union_checked(a, b)?;
    let ra = a.repad(&u)?;
    let rb = b.repad(&u)?;
    let k = u.len();
    let cap = a.capacity;
    let identity_diag = a.identity_diag && b.identity_diag;
    let mut payload = if identity_diag {
        DenseMatrix::identity(cap)
    } else {
        DenseMatrix::zeros(cap, cap)
    };
    for i in 0..k {
        if identity_diag {
            payload.set(i, i, F::zero());
        }
        for j in 0..k {
            let mut acc = F::zero();
            for t in 0..k {
                acc = acc + ra.payload.get(i, t) * rb.payload.get(t, j);
            }
            payload.set(i, j, acc);
        }
    }
    Ok(PaddedBlock {
        capacity: cap,
        slots: u,
        payload,
        mode: PadMode::Square,
        identity_diag,
    })
}

/// Operand of the generic padded multiplication.
pub enum PadOperand<'a, F> {
    Block(&'a PaddedBlock<F>),
    Dense(&'a DenseMatrix<F>),
}

/// Result of the generic padded multiplication.
#[derive(Debug, Clone)]
pub enum PadProduct<F> {
    Block(PaddedBlock<F>),
    Dense(DenseMatrix<F>),
}

/// Generic slot-aligned multiplication covering the operand combinations the
/// algorithms use. Products that never arise are rejected as alignment
/// errors.
pub fn padded_mul<F: Scalar>(
    lhs: PadOperand<'_, F>,
    rhs: PadOperand<'_, F>,
) -> Result<PadProduct<F>> {
    use PadMode::*;
    use PadOperand::*;
    match (lhs, rhs) {
        (Block(a), Block(b)) => match (a.mode, b.mode) {
            (Cols, Rows) => Ok(PadProduct::Dense(cols_mul_rows(a, b)?)),
            (Square, Rows) => Ok(PadProduct::Block(square_mul_rows(a, b)?)),
            (Cols, Square) => Ok(PadProduct::Block(cols_mul_square(a, b)?)),
            (Square, Square) => Ok(PadProduct::Block(square_mul_square(a, b)?)),
            (m1, m2) => Err(Error::AlignmentError(format!(
                "unsupported block product {m1:?} x {m2:?}"
            ))),
        },
        (Dense(m), Block(b)) if b.mode == Cols => {
            Ok(PadProduct::Block(dense_mul_cols(m, b)))
        }
        (Block(a), Dense(m)) if a.mode == Rows => {
            Ok(PadProduct::Block(rows_mul_dense(a, m)))
        }
        _ => Err(Error::AlignmentError(
            "unsupported dense/block operand combination".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Decompose

/// `U' C U^T` decomposition of a symmetric zero-padded square block whose
/// nonzeros are confined to the `(S1,S2)`, `(S2,S1)` and `(S2,S2)` blocks.
///
/// Returns row blocks `U'` and `U` of shape `capacity x 3|S2|` and the dense
/// `3|S2| x 3|S2|` block-diagonal core `C = blockdiag(I, N_{S2,S2}, I)`; the
/// construction is pure copying and satisfies `U' C U^T = N` exactly.
pub fn decompose_ucu<F: Scalar>(
    n_blk: &PaddedBlock<F>,
    s1: &IndexSet,
    s2: &IndexSet,
) -> Result<(PaddedBlock<F>, DenseMatrix<F>, PaddedBlock<F>)> {
    assert_eq!(n_blk.mode, PadMode::Square);
    assert!(!n_blk.identity_diag, "Decompose input must be zero-padded");
    if !s1.intersect(s2).is_empty() {
        return Err(Error::StructureViolation("S1 and S2 must be disjoint".into()));
    }
    // Structural check: nonzeros only in the permitted blocks.
    for (pi, &i) in n_blk.slots.items().iter().enumerate() {
        for (pj, &j) in n_blk.slots.items().iter().enumerate() {
            let v = n_blk.payload.get(pi, pj);
            if v == F::zero() {
                continue;
            }
            let ok = (s1.contains(i) && s2.contains(j))
                || (s2.contains(i) && s1.contains(j))
                || (s2.contains(i) && s2.contains(j));
            if !ok {
                return Err(Error::StructureViolation(format!(
                    "nonzero entry at ({i},{j}) outside the permitted blocks"
                )));
            }
        }
    }
    let cap = n_blk.capacity;
    let k = s2.len();
    let union = s1.union(s2);
    if union.len() > cap {
        return Err(Error::CapacityExceeded { needed: union.len(), capacity: cap });
    }

    // U1: identity on the S2 rows; U2 = L_r[N_{S1,S2}].
    let n_get = |i: usize, j: usize| n_blk.square_get(i, j);
    let mut u1 = DenseMatrix::zeros(cap, k);
    let mut u2 = DenseMatrix::zeros(cap, k);
    for (p, &i) in union.items().iter().enumerate() {
        for (q, &j) in s2.items().iter().enumerate() {
            if i == j {
                u1.set(p, q, F::one());
            }
            if s1.contains(i) {
                u2.set(p, q, n_get(i, j));
            }
        }
    }
    let uprime_payload = DenseMatrix::hcat(&[&u1, &u1, &u2]);
    let u_payload = DenseMatrix::hcat(&[&u2, &u1, &u1]);
    let mut c = DenseMatrix::zeros(3 * k, 3 * k);
    for q in 0..k {
        c.set(q, q, F::one());
        c.set(2 * k + q, 2 * k + q, F::one());
        for q2 in 0..k {
            c.set(k + q, k + q2, n_get(s2.items()[q], s2.items()[q2]));
        }
    }
    let mk = |payload| PaddedBlock {
        capacity: cap,
        slots: union.clone(),
        payload,
        mode: PadMode::Rows,
        identity_diag: false,
    };
    Ok((mk(uprime_payload), c, mk(u_payload)))
}
