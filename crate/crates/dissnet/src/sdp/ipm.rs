//! Dense primal-dual interior-point method for
//! `min cᵀx  s.t.  F_k(x) = F_k0 + Σ x_i F_ki ⪰ 0,  b + Ax ≥ 0,  Gx = h`.
//!
//! Search directions follow the HKM scaling with a Mehrotra predictor-corrector
//! step; the Schur complement `H_ij = Σ_k tr(F_ki S_k⁻¹ F_kj Z_k)` is formed
//! densely and factored by Cholesky, with equality rows eliminated through a
//! second, small Cholesky.

use std::collections::BTreeMap;

use nalgebra::DVector;

use super::{Assignment, LinearKind, ScalarRef, SdpProblem, Sense, SolveOptions};
use crate::linalg::{inf_norm, min_eigenvalue, DenseMatrix};

type Sparse = Vec<(usize, usize, f64)>;

#[derive(Debug, Clone)]
struct DenseBlock {
    dim: usize,
    f0: DenseMatrix,
    /// (variable index, sparse symmetric coefficient in canonical `a ≤ b` form)
    coeffs: Vec<(usize, Sparse)>,
}

impl DenseBlock {
    fn eval(&self, x: &DVector<f64>) -> DenseMatrix {
        let mut out = self.f0.clone();
        for (i, c) in &self.coeffs {
            let xi = x[*i];
            if xi == 0.0 {
                continue;
            }
            add_sparse(&mut out, c, xi);
        }
        out
    }

    fn eval_direction(&self, dx: &DVector<f64>) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.dim, self.dim);
        for (i, c) in &self.coeffs {
            if dx[*i] != 0.0 {
                add_sparse(&mut out, c, dx[*i]);
            }
        }
        out
    }
}

fn add_sparse(out: &mut DenseMatrix, c: &Sparse, scale: f64) {
    for &(a, b, v) in c {
        out[(a, b)] += scale * v;
        if a != b {
            out[(b, a)] += scale * v;
        }
    }
}

/// `tr(F M)` for a sparse symmetric `F`.
fn trace_with(c: &Sparse, m: &DenseMatrix) -> f64 {
    c.iter()
        .map(|&(a, b, v)| if a == b { v * m[(a, a)] } else { v * (m[(a, b)] + m[(b, a)]) })
        .sum()
}

fn sparse_to_dense(c: &Sparse, n: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(n, n);
    add_sparse(&mut out, c, 1.0);
    out
}

/// A conic program in the solver's internal layout.
#[derive(Debug, Clone)]
struct Cone {
    n: usize,
    blocks: Vec<DenseBlock>,
    lp_a: DenseMatrix,
    lp_b: DVector<f64>,
    eq_g: DenseMatrix,
    eq_h: DVector<f64>,
    c: DVector<f64>,
}

pub(super) struct FeasibilityResult {
    pub x: DVector<f64>,
    pub slack: f64,
    pub iterations: usize,
}

pub(super) struct OptimizeResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub hit_box: bool,
}

/// Sparse row `aᵀx`, constant `b`, and whether the feasibility slack may relax it.
type InequalityRow = (Vec<(usize, f64)>, f64, bool);

/// Block size, constant term and per-variable sparse coefficients.
pub(super) type DumpBlock<'a> = (usize, &'a DenseMatrix, Vec<(usize, &'a [(usize, usize, f64)])>);

/// The problem with fixed entries folded into constants and margins applied.
pub(super) struct StandardForm {
    free: Vec<ScalarRef>,
    blocks: Vec<DenseBlock>,
    /// Inequality rows `b + aᵀx ≥ 0`, flagged when the feasibility slack may relax them.
    ineq: Vec<InequalityRow>,
    eq: Vec<(Vec<(usize, f64)>, f64)>,
    c: DVector<f64>,
    has_objective: bool,
    var_bound: f64,
    scale: f64,
}

impl StandardForm {
    pub fn build(problem: &SdpProblem, options: &SolveOptions) -> Self {
        let free = problem.free_scalars();
        let index: BTreeMap<ScalarRef, usize> = free.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let mut blocks = Vec::new();
        let mut scale: f64 = 1.0;
        for c in problem.psd_constraints() {
            let dim = c.expr.dim();
            let mut f0 = c.expr.constant().clone();
            let mut coeffs: BTreeMap<usize, Sparse> = BTreeMap::new();
            for (s, coeff) in c.expr.terms() {
                if coeff.is_empty() {
                    continue;
                }
                if let Some(v) = problem.fixed().get(s) {
                    for (&(a, b), &w) in coeff {
                        f0[(a, b)] += v * w;
                        if a != b {
                            f0[(b, a)] += v * w;
                        }
                    }
                } else if let Some(&i) = index.get(s) {
                    let entry = coeffs.entry(i).or_default();
                    entry.extend(coeff.iter().filter(|(_, w)| **w != 0.0).map(|(&(a, b), &w)| (a, b, w)));
                }
            }
            let norm = inf_norm(&f0);
            scale = scale.max(1.0 + norm);
            // A small extra shift keeps the final iterate strictly above the
            // requested margin despite residuals of order `tolerance`.
            let guard = 10.0 * options.tolerance * (1.0 + norm);
            for d in 0..dim {
                f0[(d, d)] -= c.margin + guard;
            }
            blocks.push(DenseBlock {
                dim,
                f0,
                coeffs: coeffs.into_iter().collect(),
            });
        }

        let fixed_value = |s: &ScalarRef| problem.fixed().get(s).copied();
        let mut ineq = Vec::new();
        let mut eq = Vec::new();
        for v in problem.vars() {
            if let Some(lb) = v.lower_bound {
                let s = ScalarRef { var: v.id, entry: 0 };
                if let Some(&i) = index.get(&s) {
                    ineq.push((vec![(i, 1.0)], -lb, true));
                }
            }
        }
        for lc in problem.linear_constraints() {
            let mut row = Vec::new();
            let mut constant = -lc.rhs;
            for (s, a) in &lc.terms {
                if let Some(v) = fixed_value(s) {
                    constant += a * v;
                } else if let Some(&i) = index.get(s) {
                    row.push((i, *a));
                }
            }
            match lc.kind {
                LinearKind::GreaterEq => ineq.push((row, constant, true)),
                LinearKind::Equal => eq.push((row, -constant)),
            }
        }
        for i in 0..free.len() {
            ineq.push((vec![(i, -1.0)], options.var_bound, false));
            ineq.push((vec![(i, 1.0)], options.var_bound, false));
        }

        let mut c = DVector::zeros(free.len());
        let has_objective = problem.objective().is_some();
        if let Some(obj) = problem.objective() {
            let sign = if obj.sense == Sense::Minimize { 1.0 } else { -1.0 };
            for (s, a) in &obj.terms {
                if let Some(&i) = index.get(s) {
                    c[i] += sign * a;
                }
            }
        }
        Self {
            free,
            blocks,
            ineq,
            eq,
            c,
            has_objective,
            var_bound: options.var_bound,
            scale,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn has_objective(&self) -> bool {
        self.has_objective
    }

    fn n(&self) -> usize {
        self.free.len()
    }

    fn lp_matrices(&self, rows: &[InequalityRow], n: usize) -> (DenseMatrix, DVector<f64>) {
        let mut a = DenseMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (r, (coeffs, constant, _)) in rows.iter().enumerate() {
            for &(i, v) in coeffs {
                a[(r, i)] += v;
            }
            b[r] = *constant;
        }
        (a, b)
    }

    fn eq_matrices(&self, n: usize) -> (DenseMatrix, DVector<f64>) {
        let mut g = DenseMatrix::zeros(self.eq.len(), n);
        let mut h = DVector::zeros(self.eq.len());
        for (r, (coeffs, rhs)) in self.eq.iter().enumerate() {
            for &(i, v) in coeffs {
                g[(r, i)] += v;
            }
            h[r] = *rhs;
        }
        (g, h)
    }

    /// Maximizes a uniform slack `t` on every PSD block and relaxable
    /// inequality; returns the point and `t*`.
    pub fn feasibility(&self, options: &SolveOptions) -> Result<FeasibilityResult, String> {
        let n = self.n();
        let t_index = n;
        let t_cap = 1e3 * self.scale;
        let mut blocks = self.blocks.clone();
        for b in &mut blocks {
            let coeff: Sparse = (0..b.dim).map(|d| (d, d, -1.0)).collect();
            b.coeffs.push((t_index, coeff));
        }
        let mut rows: Vec<InequalityRow> = self
            .ineq
            .iter()
            .map(|(coeffs, constant, relax)| {
                let mut coeffs = coeffs.clone();
                if *relax {
                    coeffs.push((t_index, -1.0));
                }
                (coeffs, *constant, *relax)
            })
            .collect();
        rows.push((vec![(t_index, -1.0)], t_cap, false));
        let (lp_a, lp_b) = self.lp_matrices(&rows, n + 1);
        let (g, h) = self.eq_matrices(n + 1);
        let mut c = DVector::zeros(n + 1);
        c[t_index] = -1.0;

        // Start strictly inside every inequality except the equalities.
        let mut x0 = DVector::zeros(n + 1);
        let mut t0 = f64::INFINITY;
        for b in &blocks {
            t0 = t0.min(min_eigenvalue(&b.f0));
        }
        for (r, (_, _, relax)) in rows.iter().enumerate() {
            if *relax {
                t0 = t0.min(lp_b[r]);
            }
        }
        if !t0.is_finite() {
            t0 = 0.0;
        }
        x0[t_index] = t0 - 1.0;
        let cone = Cone {
            n: n + 1,
            blocks,
            lp_a,
            lp_b,
            eq_g: g,
            eq_h: h,
            c,
        };
        let out = run(&cone, &x0, options)?;
        let slack = out.x[t_index];
        let x = out.x.rows(0, n).into_owned();
        Ok(FeasibilityResult {
            x,
            slack,
            iterations: out.iterations,
        })
    }

    /// Minimizes the objective starting from a feasibility-phase point.
    pub fn optimize(&self, x0: &DVector<f64>, options: &SolveOptions) -> Result<OptimizeResult, String> {
        let n = self.n();
        let (lp_a, lp_b) = self.lp_matrices(&self.ineq, n);
        let (g, h) = self.eq_matrices(n);
        let cone = Cone {
            n,
            blocks: self.blocks.clone(),
            lp_a,
            lp_b,
            eq_g: g,
            eq_h: h,
            c: self.c.clone(),
        };
        let out = run(&cone, x0, options)?;
        let hit_box = out.x.iter().any(|v| v.abs() >= 0.99 * self.var_bound);
        Ok(OptimizeResult {
            x: out.x,
            iterations: out.iterations,
            hit_box,
        })
    }

    pub fn assignment(&self, problem: &SdpProblem, x: &DVector<f64>) -> Assignment {
        let mut values: BTreeMap<usize, DenseMatrix> = problem
            .vars()
            .iter()
            .map(|v| {
                let (r, c) = v.shape();
                (v.id, DenseMatrix::zeros(r, c))
            })
            .collect();
        let mut put = |s: ScalarRef, val: f64| {
            let m = values.get_mut(&s.var).expect("declared variable");
            let cols = m.ncols();
            m[(s.entry / cols, s.entry % cols)] = val;
        };
        for (s, v) in problem.fixed() {
            put(*s, *v);
        }
        for (i, s) in self.free.iter().enumerate() {
            put(*s, x[i]);
        }
        let mut a = Assignment::new();
        for v in problem.vars() {
            a.set(problem.var_handle(v.id), values.remove(&v.id).unwrap());
        }
        a
    }

    pub fn objective_value(&self, problem: &SdpProblem, x: &DVector<f64>) -> f64 {
        let a = self.assignment(problem, x);
        problem
            .objective()
            .map(|o| o.terms.iter().map(|(s, c)| c * a.get(*s).unwrap_or(0.0)).sum())
            .unwrap_or(0.0)
    }

    /// Standard-form data for the triplet dump: `(blocks, lp rows, eq rows, c)`.
    pub fn dump_data(&self) -> DumpData<'_> {
        DumpData {
            n: self.n(),
            blocks: self
                .blocks
                .iter()
                .map(|b| (b.dim, &b.f0, b.coeffs.iter().map(|(i, c)| (*i, c.as_slice())).collect()))
                .collect(),
            ineq: self.ineq.iter().map(|(r, c, _)| (r.as_slice(), *c)).collect(),
            eq: self.eq.iter().map(|(r, h)| (r.as_slice(), *h)).collect(),
            c: &self.c,
        }
    }
}

pub(super) struct DumpData<'a> {
    pub n: usize,
    pub blocks: Vec<DumpBlock<'a>>,
    pub ineq: Vec<(&'a [(usize, f64)], f64)>,
    pub eq: Vec<(&'a [(usize, f64)], f64)>,
    pub c: &'a DVector<f64>,
}

trait IdentityShift {
    fn fill_with_identity_scaled_add(&mut self, s: f64);
}

impl IdentityShift for DenseMatrix {
    fn fill_with_identity_scaled_add(&mut self, s: f64) {
        for d in 0..self.nrows().min(self.ncols()) {
            self[(d, d)] += s;
        }
    }
}

struct RunResult {
    x: DVector<f64>,
    iterations: usize,
}

struct Direction {
    dx: DVector<f64>,
    ds: Vec<DenseMatrix>,
    dz: Vec<DenseMatrix>,
    dsl: DVector<f64>,
    dzl: DVector<f64>,
    dlam: DVector<f64>,
}

fn inverse_spd(s: &DenseMatrix) -> Option<(DenseMatrix, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let chol = s.clone().cholesky()?;
    let inv = chol.inverse();
    Some((crate::linalg::symmetric_part(&inv), chol))
}

/// Largest `α ≤ 1/τ·limit` keeping `S + αΔS ⪰ 0`, via the Cholesky factor of `S`.
fn max_step_psd(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, ds: &DenseMatrix) -> f64 {
    let l = chol.l();
    let Some(y) = l.solve_lower_triangular(ds) else {
        return 0.0;
    };
    let Some(w) = l.solve_lower_triangular(&y.transpose()) else {
        return 0.0;
    };
    let lam = min_eigenvalue(&w);
    if lam < 0.0 {
        -1.0 / lam
    } else {
        f64::INFINITY
    }
}

fn max_step_lp(s: &DVector<f64>, ds: &DVector<f64>) -> f64 {
    s.iter()
        .zip(ds.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

/// Acceptance thresholds for a near-optimal point kept as a fallback.
const NEAR_DUAL: f64 = 1e-6;
const NEAR_GAP: f64 = 1e-7;

fn run(cone: &Cone, x0: &DVector<f64>, options: &SolveOptions) -> Result<RunResult, String> {
    let n = cone.n;
    let nl = cone.lp_b.len();
    let ne = cone.eq_h.len();
    let nu: f64 = cone.blocks.iter().map(|b| b.dim as f64).sum::<f64>() + nl as f64;
    let mut x = x0.clone();

    let mut s_blk: Vec<DenseMatrix> = Vec::with_capacity(cone.blocks.len());
    let mut z_blk: Vec<DenseMatrix> = Vec::with_capacity(cone.blocks.len());
    for b in &cone.blocks {
        let f = b.eval(&x);
        let norm = inf_norm(&f).max(1.0);
        let lam = min_eigenvalue(&f);
        if lam > 1e-2 * norm {
            s_blk.push(f);
        } else {
            s_blk.push(DenseMatrix::identity(b.dim, b.dim) * (10.0 * norm));
        }
        z_blk.push(DenseMatrix::identity(b.dim, b.dim));
    }
    let lp_val = &cone.lp_b + &cone.lp_a * &x;
    let mut s_lp = DVector::from_fn(nl, |r, _| if lp_val[r] > 1e-2 { lp_val[r] } else { 10.0 * (1.0 + lp_val[r].abs()) });
    let mut z_lp = DVector::from_element(nl, 1.0);
    let mut lam = DVector::zeros(ne);

    let norm_f0: Vec<f64> = cone.blocks.iter().map(|b| b.f0.norm()).collect();
    let norm_b = cone.lp_b.norm();
    let norm_c = cone.c.norm();
    let norm_h = cone.eq_h.norm();

    let mut stall = 0;
    let mut fallback: Option<RunResult> = None;
    for iter in 0..options.max_iterations {
        // Residuals.
        let rp: Vec<DenseMatrix> = cone.blocks.iter().zip(&s_blk).map(|(b, s)| b.eval(&x) - s).collect();
        let rp_lp = &cone.lp_b + &cone.lp_a * &x - &s_lp;
        let mut rd = cone.c.clone() - cone.lp_a.transpose() * &z_lp - cone.eq_g.transpose() * &lam;
        for (b, z) in cone.blocks.iter().zip(&z_blk) {
            for (i, c) in &b.coeffs {
                rd[*i] -= trace_with(c, z);
            }
        }
        let re = &cone.eq_h - &cone.eq_g * &x;

        let gap: f64 = s_blk.iter().zip(&z_blk).map(|(s, z)| (s * z).trace()).sum::<f64>() + s_lp.dot(&z_lp);
        let mu = gap / nu.max(1.0);
        let pobj = cone.c.dot(&x);
        let dobj: f64 = -cone.blocks.iter().zip(&z_blk).map(|(b, z)| (&b.f0 * z).trace()).sum::<f64>()
            - cone.lp_b.dot(&z_lp)
            + cone.eq_h.dot(&lam);

        let pinf = rp
            .iter()
            .zip(&norm_f0)
            .map(|(r, nf)| r.norm() / (1.0 + nf))
            .fold(rp_lp.norm() / (1.0 + norm_b), f64::max);
        let dinf = rd.norm() / (1.0 + norm_c);
        let einf = re.norm() / (1.0 + norm_h);
        let relgap = gap / (1.0 + pobj.abs() + dobj.abs());
        let tol = options.tolerance;
        if pinf < tol && dinf < tol && einf < tol && relgap < tol {
            return Ok(RunResult { x, iterations: iter });
        }
        if !(gap.is_finite() && pinf.is_finite() && dinf.is_finite()) {
            return fallback.ok_or_else(|| "interior-point iterates became non-finite".into());
        }
        // Close to the optimum the dual residual can drift while the gap keeps
        // shrinking; remember such a point in case the iteration breaks down.
        if pinf < tol && einf < tol && dinf < NEAR_DUAL && relgap < NEAR_GAP {
            fallback = Some(RunResult { x: x.clone(), iterations: iter });
        }

        // Schur complement.
        let mut s_inv = Vec::with_capacity(s_blk.len());
        let mut s_chol = Vec::with_capacity(s_blk.len());
        for s in &s_blk {
            let Some((inv, chol)) = inverse_spd(s) else {
                return fallback.ok_or_else(|| "slack matrix lost positive definiteness".into());
            };
            s_inv.push(inv);
            s_chol.push(chol);
        }
        let mut z_chol = Vec::with_capacity(z_blk.len());
        for z in &z_blk {
            let Some(c) = z.clone().cholesky() else {
                return fallback.ok_or_else(|| "dual matrix lost positive definiteness".into());
            };
            z_chol.push(c);
        }
        let mut k = DenseMatrix::zeros(n, n);
        for (bi, b) in cone.blocks.iter().enumerate() {
            let si = &s_inv[bi];
            let z = &z_blk[bi];
            let dim = b.dim;
            for (jj, (j, cj)) in b.coeffs.iter().enumerate() {
                let p = if cj.len() * 2 >= dim {
                    si * sparse_to_dense(cj, dim) * z
                } else {
                    let mut p = DenseMatrix::zeros(dim, dim);
                    for &(a, c, v) in cj {
                        p += v * si.column(a) * z.row(c);
                        if a != c {
                            p += v * si.column(c) * z.row(a);
                        }
                    }
                    p
                };
                for (i, ci) in b.coeffs.iter().take(jj + 1) {
                    let h = trace_with(ci, &p);
                    k[(*i, *j)] += h;
                    if i != j {
                        k[(*j, *i)] += h;
                    }
                }
            }
        }
        let d_lp = DVector::from_fn(nl, |r, _| z_lp[r] / s_lp[r]);
        let mut ad = cone.lp_a.clone();
        for r in 0..nl {
            ad.row_mut(r).scale_mut(d_lp[r]);
        }
        k += cone.lp_a.transpose() * ad;
        k = crate::linalg::symmetric_part(&k);
        let kchol = match k.clone().cholesky() {
            Some(c) => c,
            None => {
                let reg = 1e-12 * k.diagonal().amax().max(1.0);
                let mut kr = k.clone();
                kr.fill_with_identity_scaled_add(reg);
                match kr.cholesky() {
                    Some(c) => c,
                    None => return fallback.ok_or_else(|| "Schur complement is not positive definite".into()),
                }
            }
        };
        let geq = if ne > 0 {
            let kinv_gt = kchol.solve(&cone.eq_g.transpose());
            let m = &cone.eq_g * &kinv_gt;
            match m.cholesky() {
                Some(c) => Some((kinv_gt, c)),
                None => return fallback.ok_or_else(|| "equality constraints are rank deficient".into()),
            }
        } else {
            None
        };

        // Fixed part of the right-hand side.
        let mut r_fixed = -cone.c.clone() + cone.eq_g.transpose() * &lam - cone.lp_a.transpose() * d_lp.component_mul(&rp_lp);
        for (bi, b) in cone.blocks.iter().enumerate() {
            let m = crate::linalg::symmetric_part(&(&s_inv[bi] * &rp[bi] * &z_blk[bi]));
            for (i, c) in &b.coeffs {
                r_fixed[*i] -= trace_with(c, &m);
            }
        }

        let solve_dir = |targets: &[DenseMatrix], t_lp: &DVector<f64>| -> Direction {
            let mut r1 = r_fixed.clone() + cone.lp_a.transpose() * t_lp;
            for (bi, b) in cone.blocks.iter().enumerate() {
                for (i, c) in &b.coeffs {
                    r1[*i] += trace_with(c, &targets[bi]);
                }
            }
            let (dx, dlam) = match &geq {
                Some((kinv_gt, mchol)) => {
                    let kinv_r1 = kchol.solve(&r1);
                    let rhs = &re - &cone.eq_g * &kinv_r1;
                    let dlam = mchol.solve(&rhs);
                    (kinv_r1 + kinv_gt * &dlam, dlam)
                }
                None => (kchol.solve(&r1), DVector::zeros(0)),
            };
            let mut ds = Vec::with_capacity(cone.blocks.len());
            let mut dz = Vec::with_capacity(cone.blocks.len());
            for (bi, b) in cone.blocks.iter().enumerate() {
                let dsk = b.eval_direction(&dx) + &rp[bi];
                let tmp = &targets[bi] - &s_inv[bi] * &dsk * &z_blk[bi];
                let dzk = crate::linalg::symmetric_part(&tmp) - &z_blk[bi];
                ds.push(dsk);
                dz.push(dzk);
            }
            let dsl = &cone.lp_a * &dx + &rp_lp;
            let dzl = t_lp - &z_lp - d_lp.component_mul(&dsl);
            Direction { dx, ds, dz, dsl, dzl, dlam }
        };

        let step_lengths = |d: &Direction| -> (f64, f64) {
            let mut ap = max_step_lp(&s_lp, &d.dsl);
            let mut ad = max_step_lp(&z_lp, &d.dzl);
            for bi in 0..cone.blocks.len() {
                ap = ap.min(max_step_psd(&s_chol[bi], &d.ds[bi]));
                ad = ad.min(max_step_psd(&z_chol[bi], &d.dz[bi]));
            }
            (ap, ad)
        };

        // Predictor.
        let zero_targets: Vec<DenseMatrix> = cone.blocks.iter().map(|b| DenseMatrix::zeros(b.dim, b.dim)).collect();
        let aff = solve_dir(&zero_targets, &DVector::zeros(nl));
        let (ap, ad) = step_lengths(&aff);
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let mut gap_aff = 0.0;
        for bi in 0..cone.blocks.len() {
            let s = &s_blk[bi] + &aff.ds[bi] * ap;
            let z = &z_blk[bi] + &aff.dz[bi] * ad;
            gap_aff += (s * z).trace();
        }
        gap_aff += (&s_lp + &aff.dsl * ap).dot(&(&z_lp + &aff.dzl * ad));
        let sigma = (gap_aff.max(0.0) / gap.max(f64::MIN_POSITIVE)).powi(3).clamp(0.0, 1.0);

        // Corrector.
        let targets: Vec<DenseMatrix> = (0..cone.blocks.len())
            .map(|bi| {
                let dim = cone.blocks[bi].dim;
                let inner = DenseMatrix::identity(dim, dim) * (sigma * mu) - &aff.ds[bi] * &aff.dz[bi];
                crate::linalg::symmetric_part(&(&s_inv[bi] * inner))
            })
            .collect();
        let t_lp = DVector::from_fn(nl, |r, _| (sigma * mu - aff.dsl[r] * aff.dzl[r]) / s_lp[r]);
        let dir = solve_dir(&targets, &t_lp);
        let (ap, ad) = step_lengths(&dir);
        let tau = if iter < 5 { 0.9 } else { 0.98 };
        let ap = (tau * ap).min(1.0);
        let ad = (tau * ad).min(1.0);

        x += &dir.dx * ap;
        for bi in 0..cone.blocks.len() {
            s_blk[bi] = crate::linalg::symmetric_part(&(&s_blk[bi] + &dir.ds[bi] * ap));
            z_blk[bi] = crate::linalg::symmetric_part(&(&z_blk[bi] + &dir.dz[bi] * ad));
        }
        s_lp += &dir.dsl * ap;
        z_lp += &dir.dzl * ad;
        lam += &dir.dlam * ad;

        if ap < 1e-10 && ad < 1e-10 {
            stall += 1;
            if stall >= 3 {
                return fallback.ok_or_else(|| format!("interior-point method stalled at iteration {iter}"));
            }
        } else {
            stall = 0;
        }
    }
    fallback.ok_or_else(|| format!("interior-point method did not converge in {} iterations", options.max_iterations))
}
