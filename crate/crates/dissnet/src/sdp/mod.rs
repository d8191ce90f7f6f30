//! LMI modeling layer and solver front end.
//!
//! A problem is a set of decision variables (scalars or rectangular matrix
//! blocks), symmetric matrix expressions affine in those variables that must be
//! positive semidefinite above a margin, scalar linear constraints and an
//! optional linear objective. Matrix blocks are expanded entrywise, so every
//! expression is ultimately `C + Σ x_k F_k` with sparse symmetric `F_k`.

mod dump;
mod ipm;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, is_positive_definite, min_eigenvalue, DenseMatrix};

pub use dump::write_triplets;

/// Handle to a declared decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar reference to entry `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> ScalarRef {
        debug_assert!(r < self.rows && c < self.cols);
        ScalarRef {
            var: self.id,
            entry: r * self.cols + c,
        }
    }

    /// Reference to a scalar variable's only entry.
    pub fn scalar(&self) -> ScalarRef {
        self.at(0, 0)
    }
}

/// One scalar entry of a decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScalarRef {
    pub var: usize,
    pub entry: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Scalar,
    MatrixBlock { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVar {
    pub id: usize,
    pub name: String,
    pub kind: VarKind,
    pub lower_bound: Option<f64>,
}

impl DecisionVar {
    pub fn shape(&self) -> (usize, usize) {
        match self.kind {
            VarKind::Scalar => (1, 1),
            VarKind::MatrixBlock { rows, cols } => (rows, cols),
        }
    }
}

/// Sparse symmetric coefficient: key `(a, b)` with `a ≤ b` stands for the
/// value at `(a, b)` and, when `a < b`, also at `(b, a)`.
pub(crate) type SymCoeff = BTreeMap<(usize, usize), f64>;

fn add_pair(coeff: &mut SymCoeff, i: usize, j: usize, v: f64) {
    if v == 0.0 {
        return;
    }
    if i == j {
        *coeff.entry((i, i)).or_insert(0.0) += 2.0 * v;
    } else {
        *coeff.entry((i.min(j), i.max(j))).or_insert(0.0) += v;
    }
}

fn coeff_to_dense(coeff: &SymCoeff, n: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(n, n);
    for (&(a, b), &v) in coeff {
        out[(a, b)] += v;
        if a != b {
            out[(b, a)] += v;
        }
    }
    out
}

/// Symmetric matrix expression `C + Σ_k x_k F_k`.
///
/// Placement methods put a block `T` at `(row, col)` and `Tᵀ` at `(col, row)`;
/// a placement on the diagonal (`row == col`) therefore contributes `T + Tᵀ`.
/// The `*_sym` variants add an already symmetric block once.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrixExpr {
    dim: usize,
    constant: DenseMatrix,
    terms: BTreeMap<ScalarRef, SymCoeff>,
}

impl AffineMatrixExpr {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            constant: DenseMatrix::zeros(dim, dim),
            terms: BTreeMap::new(),
        }
    }

    /// Expression equal to a fixed symmetric matrix.
    pub fn constant_matrix(c: &DenseMatrix) -> Self {
        let mut e = Self::new(c.nrows());
        e.constant_sym(0, c);
        e
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constant(&self) -> &DenseMatrix {
        &self.constant
    }

    pub(crate) fn terms(&self) -> &BTreeMap<ScalarRef, SymCoeff> {
        &self.terms
    }

    /// Scalars referenced with a nonzero coefficient.
    pub fn referenced(&self) -> impl Iterator<Item = ScalarRef> + '_ {
        self.terms.iter().filter(|(_, c)| !c.is_empty()).map(|(s, _)| *s)
    }

    fn check_fit(&self, row: usize, col: usize, rows: usize, cols: usize) {
        assert!(
            row + rows <= self.dim && col + cols <= self.dim,
            "block {rows}x{cols} at ({row},{col}) does not fit a {0}x{0} frame",
            self.dim
        );
    }

    /// Adds `T` at `(row, col)` and `Tᵀ` at `(col, row)`.
    pub fn constant_block(&mut self, row: usize, col: usize, t: &DenseMatrix) {
        self.check_fit(row, col, t.nrows(), t.ncols());
        for i in 0..t.nrows() {
            for j in 0..t.ncols() {
                let v = t[(i, j)];
                self.constant[(row + i, col + j)] += v;
                self.constant[(col + j, row + i)] += v;
            }
        }
    }

    /// Adds a symmetric block once on the diagonal at `offset`.
    pub fn constant_sym(&mut self, offset: usize, s: &DenseMatrix) {
        self.check_fit(offset, offset, s.nrows(), s.ncols());
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                self.constant[(offset + i, offset + j)] += v;
            }
        }
    }

    fn push_outer(&mut self, sref: ScalarRef, row: usize, col: usize, left: &[f64], right: &[f64], scale: f64) {
        let coeff = self.terms.entry(sref).or_default();
        for (i, &l) in left.iter().enumerate() {
            if l == 0.0 {
                continue;
            }
            for (j, &r) in right.iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                add_pair(coeff, row + i, col + j, scale * l * r);
            }
        }
    }

    /// Adds `x·C` at `(row, col)` plus transpose.
    pub fn scalar_block(&mut self, sref: ScalarRef, row: usize, col: usize, c: &DenseMatrix) {
        self.check_fit(row, col, c.nrows(), c.ncols());
        let coeff = self.terms.entry(sref).or_default();
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                add_pair(coeff, row + i, col + j, c[(i, j)]);
            }
        }
    }

    /// Adds `x·S` once on the diagonal at `offset` (`S` symmetric).
    pub fn scalar_sym(&mut self, sref: ScalarRef, offset: usize, s: &DenseMatrix) {
        self.scalar_block(sref, offset, offset, &(s * 0.5));
    }

    /// Adds `x·I_k` once on the diagonal at `offset`.
    pub fn scalar_identity(&mut self, sref: ScalarRef, offset: usize, k: usize, scale: f64) {
        self.scalar_sym(sref, offset, &(DenseMatrix::identity(k, k) * scale));
    }

    /// Adds `left·V·right` at `(row, col)` plus transpose for a matrix-block
    /// variable `V`.
    pub fn matrix_block(&mut self, var: Var, row: usize, col: usize, left: &DenseMatrix, right: &DenseMatrix) {
        assert_eq!(left.ncols(), var.rows, "left factor does not match variable rows");
        assert_eq!(right.nrows(), var.cols, "right factor does not match variable columns");
        self.check_fit(row, col, left.nrows(), right.ncols());
        for r in 0..var.rows {
            let lcol: Vec<f64> = left.column(r).iter().copied().collect();
            if lcol.iter().all(|v| *v == 0.0) {
                continue;
            }
            for c in 0..var.cols {
                let rrow: Vec<f64> = right.row(c).iter().copied().collect();
                self.push_outer(var.at(r, c), row, col, &lcol, &rrow, 1.0);
            }
        }
    }

    /// Adds `left·Vᵀ·right` at `(row, col)` plus transpose.
    pub fn matrix_block_transposed(&mut self, var: Var, row: usize, col: usize, left: &DenseMatrix, right: &DenseMatrix) {
        assert_eq!(left.ncols(), var.cols);
        assert_eq!(right.nrows(), var.rows);
        self.check_fit(row, col, left.nrows(), right.ncols());
        for r in 0..var.rows {
            for c in 0..var.cols {
                // Vᵀ has entry (c, r) = V(r, c): outer product of left[:, c] and right[r, :].
                let lcol: Vec<f64> = left.column(c).iter().copied().collect();
                let rrow: Vec<f64> = right.row(r).iter().copied().collect();
                self.push_outer(var.at(r, c), row, col, &lcol, &rrow, 1.0);
            }
        }
    }

    /// Adds `x·F` for a full symmetric coefficient.
    pub fn scalar_full(&mut self, sref: ScalarRef, f: &DenseMatrix) {
        self.scalar_sym(sref, 0, f);
    }

    /// Adds another expression of the same dimension.
    pub fn add_expr(&mut self, other: &AffineMatrixExpr) {
        assert_eq!(self.dim, other.dim);
        self.constant += &other.constant;
        for (s, c) in &other.terms {
            let target = self.terms.entry(*s).or_default();
            for (k, v) in c {
                *target.entry(*k).or_insert(0.0) += v;
            }
        }
    }

    /// Dense coefficient of one scalar (zero if absent).
    pub fn coefficient(&self, sref: ScalarRef) -> DenseMatrix {
        self.terms
            .get(&sref)
            .map(|c| coeff_to_dense(c, self.dim))
            .unwrap_or_else(|| DenseMatrix::zeros(self.dim, self.dim))
    }

    /// `PᵀEP` for a permutation vector (`out[(a,b)] = E[(perm[a], perm[b])]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.dim);
        let mut inverse = vec![0; perm.len()];
        for (a, &src) in perm.iter().enumerate() {
            inverse[src] = a;
        }
        let terms = self
            .terms
            .iter()
            .map(|(s, c)| {
                let mapped = c
                    .iter()
                    .map(|(&(a, b), &v)| {
                        let (x, y) = (inverse[a], inverse[b]);
                        ((x.min(y), x.max(y)), v)
                    })
                    .collect();
                (*s, mapped)
            })
            .collect();
        Self {
            dim: self.dim,
            constant: crate::linalg::permute_symmetric(&self.constant, perm),
            terms,
        }
    }

    /// Substitutes known values for some scalars, moving them into the constant.
    pub fn substitute(&self, values: &BTreeMap<ScalarRef, f64>) -> Self {
        let mut out = Self {
            dim: self.dim,
            constant: self.constant.clone(),
            terms: BTreeMap::new(),
        };
        for (s, c) in &self.terms {
            if let Some(v) = values.get(s) {
                out.constant += coeff_to_dense(c, self.dim) * *v;
            } else {
                out.terms.insert(*s, c.clone());
            }
        }
        out
    }

    /// Evaluates the expression at scalar values given by a lookup.
    pub fn evaluate_with(&self, lookup: impl Fn(ScalarRef) -> Option<f64>) -> Result<DenseMatrix> {
        let mut out = self.constant.clone();
        for (s, c) in &self.terms {
            if c.is_empty() {
                continue;
            }
            let v = lookup(*s).ok_or_else(|| Error::MissingVariable(format!("variable {} entry {}", s.var, s.entry)))?;
            if v == 0.0 {
                continue;
            }
            for (&(a, b), &w) in c {
                out[(a, b)] += v * w;
                if a != b {
                    out[(b, a)] += v * w;
                }
            }
        }
        Ok(out)
    }
}

/// Values for decision variables, keyed by variable id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    values: BTreeMap<usize, DenseMatrix>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, var: Var, value: DenseMatrix) {
        assert_eq!(value.shape(), (var.rows, var.cols), "assignment shape mismatch");
        self.values.insert(var.id, value);
    }

    pub fn set_scalar(&mut self, var: Var, value: f64) {
        self.set(var, DenseMatrix::from_element(1, 1, value));
    }

    pub fn get(&self, sref: ScalarRef) -> Option<f64> {
        self.values.get(&sref.var).map(|m| {
            let cols = m.ncols();
            m[(sref.entry / cols, sref.entry % cols)]
        })
    }

    pub fn matrix(&self, var: Var) -> Option<&DenseMatrix> {
        self.values.get(&var.id)
    }

    /// Entrywise sum with another assignment over the union of keys.
    pub fn sum(&self, other: &Assignment) -> Assignment {
        let mut out = self.clone();
        for (k, v) in &other.values {
            out.values
                .entry(*k)
                .and_modify(|m| *m += v)
                .or_insert_with(|| v.clone());
        }
        out
    }
}

/// Exact affine evaluation of an expression.
pub fn evaluate(expr: &AffineMatrixExpr, assignment: &Assignment) -> Result<DenseMatrix> {
    expr.evaluate_with(|s| assignment.get(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdConstraint {
    pub expr: AffineMatrixExpr,
    pub margin: f64,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    /// `Σ a_k x_k ≥ rhs`
    GreaterEq,
    /// `Σ a_k x_k = rhs`
    Equal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub terms: Vec<(ScalarRef, f64)>,
    pub kind: LinearKind,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub sense: Sense,
    pub terms: Vec<(ScalarRef, f64)>,
}

/// An LMI feasibility or optimization problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SdpProblem {
    vars: Vec<DecisionVar>,
    fixed: BTreeMap<ScalarRef, f64>,
    psd: Vec<PsdConstraint>,
    linear: Vec<LinearConstraint>,
    objective: Option<Objective>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_scalar(&mut self, name: impl Into<String>, lower_bound: Option<f64>) -> Var {
        let id = self.vars.len();
        self.vars.push(DecisionVar {
            id,
            name: name.into(),
            kind: VarKind::Scalar,
            lower_bound,
        });
        Var { id, rows: 1, cols: 1 }
    }

    pub fn add_matrix(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Var {
        let id = self.vars.len();
        self.vars.push(DecisionVar {
            id,
            name: name.into(),
            kind: VarKind::MatrixBlock { rows, cols },
            lower_bound: None,
        });
        Var { id, rows, cols }
    }

    pub fn vars(&self) -> &[DecisionVar] {
        &self.vars
    }

    pub fn var_handle(&self, id: usize) -> Var {
        let (rows, cols) = self.vars[id].shape();
        Var { id, rows, cols }
    }

    /// Pins one scalar entry to a value; it is then a constant, not a decision.
    pub fn fix(&mut self, sref: ScalarRef, value: f64) {
        self.fixed.insert(sref, value);
    }

    /// Pins every entry of a matrix variable.
    pub fn fix_matrix(&mut self, var: Var, value: &DenseMatrix) {
        for r in 0..var.rows {
            for c in 0..var.cols {
                self.fix(var.at(r, c), value[(r, c)]);
            }
        }
    }

    pub fn fixed(&self) -> &BTreeMap<ScalarRef, f64> {
        &self.fixed
    }

    pub fn is_fixed(&self, sref: ScalarRef) -> bool {
        self.fixed.contains_key(&sref)
    }

    pub fn add_psd(&mut self, expr: AffineMatrixExpr, margin: f64, label: impl Into<String>) {
        self.psd.push(PsdConstraint {
            expr,
            margin,
            label: label.into(),
        });
    }

    pub fn add_linear(&mut self, terms: Vec<(ScalarRef, f64)>, kind: LinearKind, rhs: f64) {
        self.linear.push(LinearConstraint { terms, kind, rhs });
    }

    pub fn set_objective(&mut self, sense: Sense, terms: Vec<(ScalarRef, f64)>) {
        self.objective = Some(Objective { sense, terms });
    }

    /// Adds terms to the current objective (creating a minimization if none).
    pub fn add_objective_terms(&mut self, terms: Vec<(ScalarRef, f64)>) {
        match &mut self.objective {
            Some(obj) => {
                let sign = if obj.sense == Sense::Minimize { 1.0 } else { -1.0 };
                obj.terms.extend(terms.into_iter().map(|(s, c)| (s, sign * c)));
            }
            None => self.objective = Some(Objective {
                sense: Sense::Minimize,
                terms,
            }),
        }
    }

    pub fn psd_constraints(&self) -> &[PsdConstraint] {
        &self.psd
    }

    pub fn linear_constraints(&self) -> &[LinearConstraint] {
        &self.linear
    }

    pub fn objective(&self) -> Option<&Objective> {
        self.objective.as_ref()
    }

    /// Scalars that are decisions (declared, not fixed), in a stable order.
    pub fn free_scalars(&self) -> Vec<ScalarRef> {
        let mut out = Vec::new();
        for v in &self.vars {
            let (rows, cols) = v.shape();
            for e in 0..rows * cols {
                let s = ScalarRef { var: v.id, entry: e };
                if !self.fixed.contains_key(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for c in &self.psd {
            if !(c.margin >= 0.0) {
                return Err(Error::InvalidProblem(format!("constraint `{}` has a negative margin", c.label)));
            }
        }
        let mut referenced = std::collections::BTreeSet::new();
        for c in &self.psd {
            for s in c.expr.referenced() {
                if s.var >= self.vars.len() {
                    return Err(Error::InvalidProblem(format!("constraint `{}` references undeclared variable {}", c.label, s.var)));
                }
                referenced.insert(s);
            }
        }
        for c in &self.linear {
            for (s, a) in &c.terms {
                if *a != 0.0 {
                    referenced.insert(*s);
                }
            }
        }
        for v in &self.vars {
            let (rows, cols) = v.shape();
            let any_free = (0..rows * cols).any(|e| !self.fixed.contains_key(&ScalarRef { var: v.id, entry: e }));
            let any_ref = (0..rows * cols).any(|e| referenced.contains(&ScalarRef { var: v.id, entry: e }));
            if any_free && !any_ref {
                return Err(Error::InvalidProblem(format!("variable `{}` is not referenced by any constraint", v.name)));
            }
        }
        Ok(())
    }

    /// Evaluates a constraint expression at a solution's values.
    pub fn evaluate_constraint(&self, index: usize, values: &Assignment) -> Result<DenseMatrix> {
        evaluate(&self.psd[index].expr, values)
    }
}

/// Introduces `t ≥ Σ_k (w_k x_k)²` through the embedding `[[t, wᵀ], [w, I]] ⪰ 0`
/// and adds `t` to the objective (minimized). Returns the epigraph variable,
/// or `None` for an empty term list.
pub fn add_soft_quadratic_cost(problem: &mut SdpProblem, weighted_terms: &[(ScalarRef, f64)]) -> Result<Option<Var>> {
    if weighted_terms.is_empty() {
        return Ok(None);
    }
    if let Some((_, w)) = weighted_terms.iter().find(|(_, w)| !(*w > 0.0)) {
        return Err(Error::InvalidArgument(format!("soft-cost weights must be positive, got {w}")));
    }
    let k = weighted_terms.len();
    let t = problem.add_scalar("soft_cost", Some(0.0));
    let mut expr = AffineMatrixExpr::new(k + 1);
    expr.scalar_identity(t.scalar(), 0, 1, 1.0);
    expr.constant_sym(1, &DenseMatrix::identity(k, k));
    for (idx, (s, w)) in weighted_terms.iter().enumerate() {
        let mut e = DenseMatrix::zeros(1, 1);
        e[(0, 0)] = *w;
        expr.scalar_block(*s, 1 + idx, 0, &e);
    }
    problem.add_psd(expr, 0.0, "soft_cost_epigraph");
    problem.add_objective_terms(vec![(t.scalar(), 1.0)]);
    Ok(Some(t))
}

/// Solver status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Feasible,
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Feasible | SolveStatus::Optimal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SolveStatus,
    pub assignment: Assignment,
    /// Smallest eigenvalue over all PSD constraints at the assignment.
    pub achieved_margin: f64,
    /// Slack of the feasibility phase: the largest uniform shift `t` with every
    /// constraint `⪰ (margin + t)·I`.
    pub feasibility_slack: f64,
    pub objective_value: Option<f64>,
    pub iterations: usize,
    pub message: String,
}

impl SdpSolution {
    pub fn scalar(&self, var: Var) -> f64 {
        self.assignment.get(var.scalar()).unwrap_or(f64::NAN)
    }

    pub fn matrix(&self, var: Var) -> DenseMatrix {
        self.assignment
            .matrix(var)
            .cloned()
            .unwrap_or_else(|| DenseMatrix::from_element(var.rows, var.cols, f64::NAN))
    }

    pub fn value(&self, sref: ScalarRef) -> f64 {
        self.assignment.get(sref).unwrap_or(f64::NAN)
    }

    fn failure(status: SolveStatus, message: impl Into<String>, slack: f64, iterations: usize) -> Self {
        Self {
            status,
            assignment: Assignment::new(),
            achieved_margin: f64::NAN,
            feasibility_slack: slack,
            objective_value: None,
            iterations,
            message: message.into(),
        }
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative accuracy for residuals and duality gap.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Every free scalar is boxed to `[-var_bound, var_bound]`.
    pub var_bound: f64,
    /// Feasibility slack below `-infeasibility_threshold` is reported as infeasible.
    pub infeasibility_threshold: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 150,
            var_bound: 1e4,
            infeasibility_threshold: 1e-7,
        }
    }
}

/// Default strictness margin for an LMI with constant part `c`: `1e-6·(1 + ‖c‖∞)`.
pub fn default_margin(constant: &DenseMatrix) -> f64 {
    1e-6 * (1.0 + inf_norm(constant))
}

/// A solution touching the safety box is only unbounded if a 100 times wider
/// box improves the objective materially. Objectives that merely approach an
/// infimum as some multiplier grows change by far less.
fn objective_grows_with_box(problem: &SdpProblem, options: &SolveOptions, std: &ipm::StandardForm, x: &nalgebra::DVector<f64>) -> Result<bool> {
    let wide_opts = SolveOptions {
        var_bound: options.var_bound * 100.0,
        ..*options
    };
    let wide = ipm::StandardForm::build(problem, &wide_opts);
    let start = wide.feasibility(&wide_opts).map_err(Error::NumericalFailure)?;
    let Ok(r) = wide.optimize(&start.x, &wide_opts) else {
        return Ok(true);
    };
    let narrow_value = std.objective_value(problem, x);
    let wide_value = wide.objective_value(problem, &r.x);
    Ok((wide_value - narrow_value).abs() > 1e-2 * (1.0 + narrow_value.abs()))
}

/// Solves the problem: a slack-maximizing feasibility phase, then the objective
/// (if any). Successful results are re-verified with the PD test.
pub fn solve(problem: &SdpProblem, options: &SolveOptions) -> Result<SdpSolution> {
    problem.validate()?;
    let std = ipm::StandardForm::build(problem, options);

    let phase1 = std.feasibility(options);
    let (x_feas, slack, iters1) = match phase1 {
        Ok(r) => (r.x, r.slack, r.iterations),
        Err(msg) => return Ok(SdpSolution::failure(SolveStatus::NumericalFailure, msg, f64::NAN, 0)),
    };
    if slack < -options.infeasibility_threshold * std.scale() {
        return Ok(SdpSolution::failure(
            SolveStatus::Infeasible,
            format!("maximal feasibility slack {slack:.3e} is negative"),
            slack,
            iters1,
        ));
    }

    let (x, status, iterations, message) = if std.has_objective() {
        match std.optimize(&x_feas, options) {
            Ok(r) => {
                if r.hit_box && objective_grows_with_box(problem, options, &std, &r.x)? {
                    return Ok(SdpSolution {
                        status: SolveStatus::Unbounded,
                        assignment: std.assignment(problem, &r.x),
                        achieved_margin: f64::NAN,
                        feasibility_slack: slack,
                        objective_value: Some(std.objective_value(problem, &r.x)),
                        iterations: iters1 + r.iterations,
                        message: "objective pushes a variable to the safety box".into(),
                    });
                }
                (r.x, SolveStatus::Optimal, iters1 + r.iterations, String::new())
            }
            Err(msg) => return Ok(SdpSolution::failure(SolveStatus::NumericalFailure, msg, slack, iters1)),
        }
    } else {
        (x_feas, SolveStatus::Feasible, iters1, String::new())
    };

    let assignment = std.assignment(problem, &x);
    let mut achieved = f64::INFINITY;
    for (k, c) in problem.psd.iter().enumerate() {
        let value = problem.evaluate_constraint(k, &assignment)?;
        if !is_positive_definite(&value, c.margin)? {
            let msg = format!(
                "constraint `{}` fails re-verification at margin {:.3e} (λmin = {:.3e})",
                c.label,
                c.margin,
                min_eigenvalue(&value)
            );
            if slack <= options.infeasibility_threshold * std.scale() {
                return Ok(SdpSolution::failure(SolveStatus::Infeasible, msg, slack, iterations));
            }
            return Ok(SdpSolution::failure(SolveStatus::NumericalFailure, msg, slack, iterations));
        }
        achieved = achieved.min(min_eigenvalue(&value));
    }
    for c in &problem.linear {
        let lhs: f64 = c.terms.iter().map(|(s, a)| a * assignment.get(*s).unwrap_or(0.0)).sum();
        let tol = 1e-7 * (1.0 + c.rhs.abs());
        let ok = match c.kind {
            LinearKind::GreaterEq => lhs >= c.rhs - tol,
            LinearKind::Equal => (lhs - c.rhs).abs() <= tol,
        };
        if !ok {
            return Ok(SdpSolution::failure(
                SolveStatus::NumericalFailure,
                format!("linear constraint violated: {lhs} vs {}", c.rhs),
                slack,
                iterations,
            ));
        }
    }
    let objective_value = problem.objective.as_ref().map(|_| std.objective_value(problem, &x));
    Ok(SdpSolution {
        status,
        assignment,
        achieved_margin: achieved,
        feasibility_slack: slack,
        objective_value,
        iterations,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn evaluate_examples() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("p", None);
        let mut e = AffineMatrixExpr::new(2);
        e.scalar_identity(x.scalar(), 0, 2, 1.0);
        let mut a = Assignment::new();
        a.set_scalar(x, 3.0);
        assert_eq!(evaluate(&e, &a).unwrap(), DenseMatrix::identity(2, 2) * 3.0);
        a.set_scalar(x, 0.0);
        assert_eq!(evaluate(&e, &a).unwrap(), *e.constant());
        assert!(evaluate(&e, &Assignment::new()).is_err());
    }

    #[test]
    fn diagonal_placement_is_symmetrized_sum() {
        let mut p = SdpProblem::new();
        let v = p.add_matrix("V", 2, 2);
        let mut e = AffineMatrixExpr::new(2);
        e.matrix_block(v, 0, 0, &DenseMatrix::identity(2, 2), &DenseMatrix::identity(2, 2));
        let mut a = Assignment::new();
        let val = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        a.set(v, val.clone());
        assert_eq!(evaluate(&e, &a).unwrap(), &val + val.transpose());
    }

    #[test]
    fn transposed_placement() {
        let mut p = SdpProblem::new();
        let v = p.add_matrix("V", 1, 2);
        let mut e = AffineMatrixExpr::new(3);
        // Vᵀ (2x1) at rows 1..3, column 0.
        e.matrix_block_transposed(v, 1, 0, &DenseMatrix::identity(2, 2), &DenseMatrix::identity(1, 1));
        let mut a = Assignment::new();
        a.set(v, m(1, 2, &[5.0, 7.0]));
        let out = evaluate(&e, &a).unwrap();
        assert_eq!(out[(1, 0)], 5.0);
        assert_eq!(out[(2, 0)], 7.0);
        assert_eq!(out[(0, 2)], 7.0);
    }

    #[test]
    fn minimize_t_with_margin() {
        let eps = 1e-3;
        let mut p = SdpProblem::new();
        let t = p.add_scalar("t", None);
        let mut e = AffineMatrixExpr::new(2);
        e.scalar_identity(t.scalar(), 0, 2, 1.0);
        e.constant_block(0, 1, &m(1, 1, &[1.0]));
        p.add_psd(e, eps, "lmi");
        p.set_objective(Sense::Minimize, vec![(t.scalar(), 1.0)]);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.scalar(t) - (1.0 + eps)).abs() < 1e-6, "t = {}", sol.scalar(t));
    }

    #[test]
    fn simple_feasibility() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("p", None);
        let mut e = AffineMatrixExpr::new(1);
        e.scalar_identity(x.scalar(), 0, 1, 1.0);
        e.constant_sym(0, &m(1, 1, &[-1.0]));
        p.add_psd(e, 0.0, "p - 1 >= 0");
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Feasible);
        assert!(sol.scalar(x) >= 1.0);
    }

    #[test]
    fn infeasible_is_detected() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("x", None);
        let mut a = AffineMatrixExpr::new(1);
        a.scalar_identity(x.scalar(), 0, 1, 1.0);
        a.constant_sym(0, &m(1, 1, &[-2.0]));
        let mut b = AffineMatrixExpr::new(1);
        b.scalar_identity(x.scalar(), 0, 1, -1.0);
        b.constant_sym(0, &m(1, 1, &[1.0]));
        p.add_psd(a, 0.0, "x >= 2");
        p.add_psd(b, 0.0, "x <= 1");
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unbounded_is_reported() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("x", None);
        let mut a = AffineMatrixExpr::new(1);
        a.scalar_identity(x.scalar(), 0, 1, 1.0);
        p.add_psd(a, 0.0, "x >= 0");
        p.set_objective(Sense::Maximize, vec![(x.scalar(), 1.0)]);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn soft_cost_epigraph() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("x", None);
        // x >= 0.5
        let mut a = AffineMatrixExpr::new(1);
        a.scalar_identity(x.scalar(), 0, 1, 1.0);
        a.constant_sym(0, &m(1, 1, &[-0.5]));
        p.add_psd(a, 0.0, "x >= 0.5");
        let t = add_soft_quadratic_cost(&mut p, &[(x.scalar(), 1.0)]).unwrap().unwrap();
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let v = sol.scalar(x);
        assert!((sol.scalar(t) - v * v).abs() < 1e-6);
        assert!((v - 0.5).abs() < 1e-5);
        assert!(add_soft_quadratic_cost(&mut p, &[]).unwrap().is_none());
        assert!(add_soft_quadratic_cost(&mut p, &[(x.scalar(), 0.0)]).is_err());
    }

    #[test]
    fn equality_constraints() {
        let mut p = SdpProblem::new();
        let a = p.add_scalar("a", Some(0.0));
        let b = p.add_scalar("b", Some(0.0));
        let mut e = AffineMatrixExpr::new(2);
        e.scalar_sym(a.scalar(), 0, &m(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        e.scalar_sym(b.scalar(), 0, &m(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        p.add_psd(e, 0.0, "diag");
        p.add_linear(vec![(a.scalar(), 1.0), (b.scalar(), 1.0)], LinearKind::Equal, 1.0);
        p.set_objective(Sense::Minimize, vec![(a.scalar(), 1.0), (b.scalar(), 2.0)]);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.scalar(a) - 1.0).abs() < 1e-6);
        assert!(sol.scalar(b).abs() < 1e-6);
    }

    #[test]
    fn unreferenced_variable_is_rejected() {
        let mut p = SdpProblem::new();
        p.add_scalar("lonely", None);
        assert!(matches!(solve(&p, &SolveOptions::default()), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn fixed_entries_become_constants() {
        let mut p = SdpProblem::new();
        let v = p.add_matrix("V", 1, 2);
        let mut e = AffineMatrixExpr::new(2);
        e.matrix_block(v, 0, 0, &m(1, 1, &[0.5]), &m(2, 1, &[1.0, 0.0]));
        e.matrix_block(v, 1, 1, &m(1, 1, &[0.5]), &m(2, 1, &[0.0, 1.0]));
        p.add_psd(e, 0.0, "diag(v0, v1)");
        p.fix(v.at(0, 1), 3.0);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.status.is_success());
        assert_eq!(sol.matrix(v)[(0, 1)], 3.0);
    }
}
