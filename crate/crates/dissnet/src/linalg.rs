//! Dense symmetric and block matrix algebra.
//!
//! Everything here is value-semantic and works on [`DenseMatrix`]. The
//! positive-definiteness test is a diagonally pivoted Cholesky factorization
//! with an explicit margin, so "strictly positive definite" has a concrete
//! numerical meaning throughout the crate.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type DenseMatrix = DMatrix<f64>;

/// Relative tolerance for the symmetry precondition of the PD test.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Maximum absolute row sum.
pub fn inf_norm(a: &DenseMatrix) -> f64 {
    a.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(a: &DenseMatrix) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn ensure_square(a: &DenseMatrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Returns `A + Aᵀ`.
///
/// Entry `(i, j)` is computed as `a[(i, j)] + a[(j, i)]`, so both triangles are
/// bit-identical.
pub fn symmetrize(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = ensure_square(a)?;
    Ok(DenseMatrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)]))
}

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetric_part(a: &DenseMatrix) -> DenseMatrix {
    let n = a.nrows();
    DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Largest absolute difference between `A` and `Aᵀ`.
pub fn asymmetry(a: &DenseMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Checks that `a` is square and symmetric within `1e-10·‖A‖∞`.
pub fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    ensure_square(a)?;
    let tolerance = SYMMETRY_TOLERANCE * inf_norm(a);
    let asym = asymmetry(a);
    if asym > tolerance {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tolerance,
        });
    }
    Ok(())
}

/// Default strictness margin of the PD test: `1e-9·(1 + ‖S‖∞)`.
pub fn default_pd_margin(s: &DenseMatrix) -> f64 {
    1e-9 * (1.0 + inf_norm(s))
}

/// Pivoted Cholesky test: true iff `S − margin·I` factors with all pivots
/// strictly positive.
///
/// An empty matrix is positive definite by convention.
pub fn is_positive_definite(s: &DenseMatrix, margin: f64) -> Result<bool> {
    check_symmetric(s)?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "PD margin must be non-negative, got {margin}"
        )));
    }
    let n = s.nrows();
    let mut work = symmetric_part(s);
    for i in 0..n {
        work[(i, i)] -= margin;
    }
    Ok(pivoted_cholesky_in_place(&mut work))
}

/// PD test with [`default_pd_margin`].
pub fn is_pd(s: &DenseMatrix) -> Result<bool> {
    is_positive_definite(s, default_pd_margin(s))
}

/// Runs an outer-product Cholesky with diagonal pivoting; returns false at the
/// first non-positive pivot. The matrix is overwritten.
fn pivoted_cholesky_in_place(work: &mut DenseMatrix) -> bool {
    let n = work.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (best, pivot) = (k..n)
            .map(|idx| (idx, work[(order[idx], order[idx])]))
            .fold((k, f64::NEG_INFINITY), |acc, cand| {
                if cand.1 > acc.1 {
                    cand
                } else {
                    acc
                }
            });
        if !(pivot > 0.0) || !pivot.is_finite() {
            return false;
        }
        order.swap(k, best);
        let pk = order[k];
        let root = pivot.sqrt();
        for &ri in &order[(k + 1)..] {
            work[(ri, pk)] /= root;
        }
        for a in (k + 1)..n {
            let ra = order[a];
            let la = work[(ra, pk)];
            if la == 0.0 {
                continue;
            }
            for &rb in &order[(k + 1)..=a] {
                let update = la * work[(rb, pk)];
                work[(ra, rb)] -= update;
                if ra != rb {
                    work[(rb, ra)] = work[(ra, rb)];
                }
            }
        }
    }
    true
}

/// Smallest eigenvalue of a symmetric matrix (symmetric part is used).
pub fn min_eigenvalue(s: &DenseMatrix) -> f64 {
    if s.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetric_part(s)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix (symmetric part is used).
pub fn max_eigenvalue(s: &DenseMatrix) -> f64 {
    if s.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    symmetric_part(s)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sorted eigenvalues of a symmetric matrix.
pub fn sorted_eigenvalues(s: &DenseMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetric_part(s).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Block-diagonal concatenation of possibly rectangular blocks.
pub fn block_diag(blocks: &[DenseMatrix]) -> DenseMatrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DenseMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Symmetric permutation: `out[(a, b)] = s[(perm[a], perm[b])]`, i.e. `PᵀSP`
/// for the permutation matrix with `P[(perm[a], a)] = 1`.
pub fn permute_symmetric(s: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    let n = perm.len();
    DenseMatrix::from_fn(n, n, |a, b| s[(perm[a], perm[b])])
}

/// Permutation matrix `P` with `P[(perm[a], a)] = 1`.
pub fn permutation_matrix(perm: &[usize]) -> DenseMatrix {
    let n = perm.len();
    let mut p = DenseMatrix::zeros(n, n);
    for (a, &src) in perm.iter().enumerate() {
        p[(src, a)] = 1.0;
    }
    p
}

fn offsets(partition: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(partition.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &s in partition {
        acc += s;
        out.push(acc);
    }
    out
}

/// A dense matrix with row and column block partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    row_partition: Vec<usize>,
    col_partition: Vec<usize>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
    data: DenseMatrix,
}

impl BlockMatrix {
    pub fn new(row_partition: Vec<usize>, col_partition: Vec<usize>, data: DenseMatrix) -> Result<Self> {
        let row_offsets = offsets(&row_partition);
        let col_offsets = offsets(&col_partition);
        if *row_offsets.last().unwrap() != data.nrows() || *col_offsets.last().unwrap() != data.ncols() {
            return Err(Error::Dimension(format!(
                "partitions sum to {}x{} but data is {}x{}",
                row_offsets.last().unwrap(),
                col_offsets.last().unwrap(),
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self {
            row_partition,
            col_partition,
            row_offsets,
            col_offsets,
            data,
        })
    }

    pub fn zeros(row_partition: Vec<usize>, col_partition: Vec<usize>) -> Self {
        let rows = row_partition.iter().sum();
        let cols = col_partition.iter().sum();
        Self::new(row_partition, col_partition, DenseMatrix::zeros(rows, cols))
            .expect("partition sums match by construction")
    }

    /// Square symmetric-partition block-diagonal matrix.
    pub fn block_diagonal(blocks: &[DenseMatrix]) -> Self {
        let rows = blocks.iter().map(|b| b.nrows()).collect();
        let cols = blocks.iter().map(|b| b.ncols()).collect();
        Self::new(rows, cols, block_diag(blocks)).expect("sizes match by construction")
    }

    pub fn row_partition(&self) -> &[usize] {
        &self.row_partition
    }

    pub fn col_partition(&self) -> &[usize] {
        &self.col_partition
    }

    pub fn row_offset(&self, i: usize) -> usize {
        self.row_offsets[i]
    }

    pub fn col_offset(&self, j: usize) -> usize {
        self.col_offsets[j]
    }

    pub fn block_rows(&self) -> usize {
        self.row_partition.len()
    }

    pub fn block_cols(&self) -> usize {
        self.col_partition.len()
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn into_data(self) -> DenseMatrix {
        self.data
    }

    pub fn block(&self, i: usize, j: usize) -> DenseMatrix {
        self.data
            .view(
                (self.row_offsets[i], self.col_offsets[j]),
                (self.row_partition[i], self.col_partition[j]),
            )
            .into_owned()
    }

    pub fn set_block(&mut self, i: usize, j: usize, value: &DenseMatrix) -> Result<()> {
        if value.nrows() != self.row_partition[i] || value.ncols() != self.col_partition[j] {
            return Err(Error::Dimension(format!(
                "block ({i},{j}) is {}x{}, got {}x{}",
                self.row_partition[i],
                self.col_partition[j],
                value.nrows(),
                value.ncols()
            )));
        }
        self.data
            .view_mut((self.row_offsets[i], self.col_offsets[j]), (value.nrows(), value.ncols()))
            .copy_from(value);
        Ok(())
    }

    /// True when every off-diagonal block is exactly zero.
    pub fn is_block_diagonal(&self) -> bool {
        (0..self.block_rows()).all(|i| {
            (0..self.block_cols()).all(|j| i == j || self.block(i, j).iter().all(|v| *v == 0.0))
        })
    }
}

/// A square block-block matrix `Ψ = [Ψ^{kl}]` with `m` outer groups; outer
/// group `k` is split into `n` inner blocks with sizes `inner[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBlockMatrix {
    inner: Vec<Vec<usize>>,
    data: DenseMatrix,
}

impl BlockBlockMatrix {
    pub fn new(inner: Vec<Vec<usize>>, data: DenseMatrix) -> Result<Self> {
        ensure_square(&data)?;
        let Some(first) = inner.first() else {
            return Err(Error::Empty("block-block matrix without outer groups".into()));
        };
        let n = first.len();
        if inner.iter().any(|p| p.len() != n) {
            return Err(Error::Dimension(
                "inner partitions have different block counts across outer groups".into(),
            ));
        }
        let total: usize = inner.iter().flatten().sum();
        if total != data.nrows() {
            return Err(Error::Dimension(format!(
                "inner partitions sum to {total} but data is {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { inner, data })
    }

    pub fn outer_count(&self) -> usize {
        self.inner.len()
    }

    pub fn inner_count(&self) -> usize {
        self.inner[0].len()
    }

    pub fn inner_partitions(&self) -> &[Vec<usize>] {
        &self.inner
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    /// The BEW permutation: new position `a` takes old row `perm[a]`, ordered
    /// by inner index first and outer group second.
    pub fn bew_permutation(&self) -> Vec<usize> {
        bew_permutation(&self.inner)
    }

    /// Block sizes of the BEW result: `Σ_k inner[k][i]` for each `i`.
    pub fn bew_partition(&self) -> Vec<usize> {
        (0..self.inner_count())
            .map(|i| self.inner.iter().map(|p| p[i]).sum())
            .collect()
    }
}

/// Permutation vector that regroups a block-block layout by inner index.
pub fn bew_permutation(inner: &[Vec<usize>]) -> Vec<usize> {
    let group_offsets: Vec<Vec<usize>> = {
        let mut start = 0;
        inner
            .iter()
            .map(|p| {
                let mut offs = offsets(p);
                for o in offs.iter_mut() {
                    *o += start;
                }
                start = *offs.last().unwrap();
                offs
            })
            .collect()
    };
    let n = inner.first().map_or(0, |p| p.len());
    let mut perm = Vec::new();
    for i in 0..n {
        for (k, p) in inner.iter().enumerate() {
            let base = group_offsets[k][i];
            perm.extend(base..base + p[i]);
        }
    }
    perm
}

/// Block element-wise reordering `BEW(Ψ) = PᵀΨP`.
pub fn bew(psi: &BlockBlockMatrix) -> Result<BlockMatrix> {
    let perm = psi.bew_permutation();
    let partition = psi.bew_partition();
    BlockMatrix::new(partition.clone(), partition, permute_symmetric(&psi.data, &perm))
}

fn ensure_dims(name: &str, a: &DenseMatrix, rows: usize, cols: usize) -> Result<()> {
    if a.nrows() != rows || a.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// `[[Θ, ΘΦ], [ΦᵀΘ, Γ]]`, which is PD iff `ΦᵀΘΦ − Γ ≺ 0` when `Θ ≻ 0`.
pub fn schur_embed(theta: &DenseMatrix, phi: &DenseMatrix, gamma: &DenseMatrix) -> Result<DenseMatrix> {
    let n = ensure_square(theta)?;
    let k = ensure_square(gamma)?;
    ensure_dims("Φ", phi, n, k)?;
    check_symmetric(theta)?;
    check_symmetric(gamma)?;
    if !is_positive_definite(theta, 0.0)? {
        return Err(Error::NotPositiveDefinite(
            "Θ must be positive definite for the Schur embedding; use alpha_embed".into(),
        ));
    }
    let theta_phi = theta * phi;
    let mut out = DenseMatrix::zeros(n + k, n + k);
    out.view_mut((0, 0), (n, n)).copy_from(theta);
    out.view_mut((0, n), (n, k)).copy_from(&theta_phi);
    out.view_mut((n, 0), (k, n)).copy_from(&theta_phi.transpose());
    out.view_mut((n, n), (k, k)).copy_from(gamma);
    Ok(out)
}

/// `−α(ΦᵀΘ + ΘΦ) + α²Θ + Γ`; PD of the result is sufficient for
/// `ΦᵀΘΦ − Γ ≺ 0` when `Θ ≺ 0`.
pub fn alpha_embed(theta: &DenseMatrix, phi: &DenseMatrix, gamma: &DenseMatrix, alpha: f64) -> Result<DenseMatrix> {
    let n = ensure_square(theta)?;
    ensure_dims("Φ", phi, n, n)?;
    ensure_dims("Γ", gamma, n, n)?;
    check_symmetric(theta)?;
    check_symmetric(gamma)?;
    if !is_positive_definite(&(-theta), 0.0)? {
        return Err(Error::NotNegativeDefinite("Θ must be negative definite".into()));
    }
    let cross = phi.transpose() * theta + theta * phi;
    let raw = -alpha * cross + alpha * alpha * theta + gamma;
    Ok(symmetric_part(&raw))
}

/// `ΦᵀΘΦ − Γ`, the quadratic form both embeddings certify.
pub fn quadratic_form(theta: &DenseMatrix, phi: &DenseMatrix, gamma: &DenseMatrix) -> DenseMatrix {
    symmetric_part(&(phi.transpose() * theta * phi - gamma))
}
