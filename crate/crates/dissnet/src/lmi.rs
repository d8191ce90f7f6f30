//! Assembly of the network LMIs shared by analysis, synthesis and the
//! decentralized layer.
//!
//! Every configuration is handled by one frame. With `Φ = M` (rows `u, ū, z`,
//! columns `y, ȳ, w`), `Θ = diag(X_p¹¹, X̄_p̄¹¹, −Y²²)` and `Γ` collecting the
//! cross and constant supply terms, the dissipativity condition reads
//! `ΦᵀΘΦ − Γ ≺ 0`. The embedded form is `[[Θ, ΘΦ], [ΦᵀΘ, Γ]] ≻ 0` with the
//! change of variables `L = X_p¹¹ M` on the input rows. Agents whose `X¹¹` is
//! negative definite leave the `Θ` frame and are handled by the lower-bound
//! relaxation `Γ + α²JᵀX¹¹J − α(LᵀJ + JᵀL) ≻ 0`.

use std::collections::BTreeMap;

use crate::dissipativity::{classify_x11, ratio_pair, Definiteness, SubsystemProfile, SupplyMatrix};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nsc::{block_name, ColGroup, InterconnectionMatrix, NscProblem, PortLayout, RowGroup};
use crate::sdp::{default_margin, AffineMatrixExpr, LinearKind, ScalarRef, SdpProblem, Sense, Var};

/// How the global specification `Y` enters the LMI.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SpecMode {
    /// No exogenous ports (NSC 1 and 3).
    None,
    Fixed(SupplyMatrix),
    /// `Y = [[g I, 0], [0, −I]]`, minimizing `g = γ²`.
    MinL2Gain,
    /// `Y = [[−ν I, ½I], [½I, −ρ I]]` after the congruence with `ρ̄ = 1/ρ`;
    /// maximizes `c1 ν − c2 ρ̄`.
    MaxPassivity { c1: f64, c2: f64 },
}

/// Content of one interconnection block in a frame.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BlockSource {
    Fixed(DenseMatrix),
    Free,
}

#[derive(Debug, Clone)]
pub(crate) struct FrameOptions {
    pub margin: Option<f64>,
    pub p_min: f64,
    /// Impose `Σp + Σp̄ = 1` (for homogeneous conditions).
    pub normalize: bool,
    /// Lower-bound relaxation parameter for agents with `X¹¹ ≺ 0`.
    pub alpha: f64,
    /// Lower bound on `ν` under a passivity objective (`None` = free).
    pub nu_floor: Option<f64>,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self {
            margin: None,
            p_min: 1e-6,
            normalize: false,
            alpha: 0.0,
            nu_floor: Some(0.0),
        }
    }
}

/// An assembled network LMI with handles to its decision variables.
#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub sdp: SdpProblem,
    pub layout: PortLayout,
    pub p: Vec<Var>,
    pub pbar: Vec<Var>,
    /// Free blocks: `L` for input rows, `M` itself for performance rows.
    pub blocks: BTreeMap<(RowGroup, ColGroup), Var>,
    pub fixed: BTreeMap<(RowGroup, ColGroup), DenseMatrix>,
    pub gain: Option<Var>,
    pub nu: Option<Var>,
    pub rho_bar: Option<Var>,
    pub lmi: usize,
    /// Agent owning each row of the LMI.
    pub row_owner: Vec<usize>,
}

impl Frame {
    /// Agent owning a decision scalar: `p_i` and `p̄_i` belong to agent `i`,
    /// block entries to the later of their row and column agents. Index
    /// variables are global and have no owner.
    pub fn scalar_owner(&self, s: ScalarRef) -> Option<usize> {
        if let Some(i) = self.p.iter().position(|v| v.id == s.var) {
            return Some(i);
        }
        if let Some(i) = self.pbar.iter().position(|v| v.id == s.var) {
            return Some(i);
        }
        for ((r, c), var) in &self.blocks {
            if var.id == s.var {
                let (a, b) = (s.entry / var.cols, s.entry % var.cols);
                let i = self.layout.row_owners(*r)[a];
                let j = self.layout.col_owners(*c)[b];
                return Some(i.max(j));
            }
        }
        None
    }

    pub fn lmi_expr(&self) -> &AffineMatrixExpr {
        &self.sdp.psd_constraints()[self.lmi].expr
    }
}

fn group_profiles(problem: &NscProblem, r: RowGroup) -> &[SubsystemProfile] {
    match r {
        RowGroup::Input => &problem.subsystems,
        RowGroup::PlantInput => &problem.plants,
        RowGroup::Performance => &[],
    }
}

fn selector(rows: std::ops::Range<usize>, total: usize) -> DenseMatrix {
    let mut s = DenseMatrix::zeros(rows.len(), total);
    for (k, r) in rows.enumerate() {
        s[(k, r)] = 1.0;
    }
    s
}

fn agent_rows(layout: &PortLayout, r: RowGroup, i: usize) -> std::ops::Range<usize> {
    let start = layout.row_agent_offset(r, i);
    start..start + layout.row_dims(r)[i]
}

/// Sign class of every agent's `X¹¹` in the input row groups; indefinite or
/// singular blocks are rejected.
pub(crate) fn classify(problem: &NscProblem) -> Result<BTreeMap<(RowGroup, usize), Definiteness>> {
    let mut out = BTreeMap::new();
    for r in [RowGroup::Input, RowGroup::PlantInput] {
        for (i, s) in group_profiles(problem, r).iter().enumerate() {
            if s.input_dim == 0 {
                out.insert((r, i), Definiteness::Positive);
                continue;
            }
            let d = classify_x11(&s.certificate);
            out.insert((r, i), d);
        }
    }
    Ok(out)
}

pub(crate) fn all_positive(classes: &BTreeMap<(RowGroup, usize), Definiteness>) -> bool {
    classes.values().all(|d| *d == Definiteness::Positive)
}

fn spec_dims_check(problem: &NscProblem, spec: &SpecMode) -> Result<()> {
    let layout = problem.layout();
    let (r, l) = (layout.col_size(ColGroup::Exogenous), layout.row_size(RowGroup::Performance));
    match spec {
        SpecMode::None => Ok(()),
        SpecMode::Fixed(y) => {
            if y.input_dim() != r || y.output_dim() != l {
                return Err(Error::Dimension(format!("Y must act on (w, z) of sizes ({r}, {l})")));
            }
            Ok(())
        }
        SpecMode::MinL2Gain => Ok(()),
        SpecMode::MaxPassivity { .. } => {
            if r != l {
                return Err(Error::Dimension(format!(
                    "passivity specifications need dim w = dim z, got {r} and {l}"
                )));
            }
            Ok(())
        }
    }
}

struct Scaffold {
    sdp: SdpProblem,
    p: Vec<Var>,
    pbar: Vec<Var>,
    gain: Option<Var>,
    nu: Option<Var>,
    rho_bar: Option<Var>,
}

fn scaffold(problem: &NscProblem, spec: &SpecMode, opts: &FrameOptions) -> Scaffold {
    let mut sdp = SdpProblem::new();
    let p: Vec<Var> = (0..problem.subsystems.len())
        .map(|i| sdp.add_scalar(format!("p{}", i + 1), Some(opts.p_min)))
        .collect();
    let pbar: Vec<Var> = (0..problem.plants.len())
        .map(|i| sdp.add_scalar(format!("pbar{}", i + 1), Some(opts.p_min)))
        .collect();
    if opts.normalize {
        let terms = p.iter().chain(&pbar).map(|v| (v.scalar(), 1.0)).collect();
        sdp.add_linear(terms, LinearKind::Equal, 1.0);
    }
    let (mut gain, mut nu, mut rho_bar) = (None, None, None);
    match spec {
        SpecMode::MinL2Gain => {
            let g = sdp.add_scalar("gamma_sq", Some(0.0));
            sdp.set_objective(Sense::Minimize, vec![(g.scalar(), 1.0)]);
            gain = Some(g);
        }
        SpecMode::MaxPassivity { c1, c2 } => {
            let n = sdp.add_scalar("nu", opts.nu_floor);
            let r = sdp.add_scalar("rho_bar", Some(0.0));
            sdp.set_objective(Sense::Maximize, vec![(n.scalar(), *c1), (r.scalar(), -*c2)]);
            nu = Some(n);
            rho_bar = Some(r);
        }
        _ => {}
    }
    Scaffold {
        sdp,
        p,
        pbar,
        gain,
        nu,
        rho_bar,
    }
}

/// Builds the embedded network LMI.
pub(crate) fn build_embedded(
    problem: &NscProblem,
    sources: &BTreeMap<(RowGroup, ColGroup), BlockSource>,
    spec: &SpecMode,
    opts: &FrameOptions,
) -> Result<Frame> {
    problem.check()?;
    spec_dims_check(problem, spec)?;
    let variant = problem.variant;
    let layout = problem.layout();
    let n = layout.agents();
    let classes = classify(problem)?;
    if let Some(((r, i), _)) = classes.iter().find(|(_, d)| **d == Definiteness::Indefinite) {
        let who = if *r == RowGroup::Input { "subsystem" } else { "plant" };
        return Err(Error::InvalidProblem(format!(
            "{who} {i}: X11 is neither positive nor negative definite; relax it with shift_ifp"
        )));
    }
    let Scaffold {
        mut sdp,
        p,
        pbar,
        gain,
        nu,
        rho_bar,
    } = scaffold(problem, spec, opts);
    let scale_var = |r: RowGroup, i: usize| if r == RowGroup::Input { p[i] } else { pbar[i] };

    // Free block variables.
    let mut blocks = BTreeMap::new();
    let mut fixed = BTreeMap::new();
    for r in variant.row_groups() {
        for c in variant.col_groups() {
            let (rows, cols) = (layout.row_size(r), layout.col_size(c));
            match sources.get(&(r, c)).unwrap_or(&BlockSource::Free) {
                BlockSource::Free => {
                    if rows * cols > 0 {
                        let prefix = if r == RowGroup::Performance { "M" } else { "L" };
                        let v = sdp.add_matrix(format!("{prefix}_{}", block_name(r, c)), rows, cols);
                        blocks.insert((r, c), v);
                    }
                }
                BlockSource::Fixed(m) => {
                    if m.nrows() != rows || m.ncols() != cols {
                        return Err(Error::Dimension(format!(
                            "fixed block M_{} must be {rows}x{cols}",
                            block_name(r, c)
                        )));
                    }
                    fixed.insert((r, c), m.clone());
                }
            }
        }
    }

    // Row layout: Θ part (positive input agents, then plant agents, then z), then Γ part.
    let positive = |r: RowGroup, i: usize| classes.get(&(r, i)).copied() == Some(Definiteness::Positive);
    let mut theta_start: BTreeMap<(RowGroup, usize), usize> = BTreeMap::new();
    let mut row_owner = Vec::new();
    let mut cursor = 0;
    for r in [RowGroup::Input, RowGroup::PlantInput] {
        if !variant.row_groups().contains(&r) {
            continue;
        }
        for i in 0..n {
            if positive(r, i) {
                theta_start.insert((r, i), cursor);
                cursor += layout.row_dims(r)[i];
                row_owner.extend(std::iter::repeat_n(i, layout.row_dims(r)[i]));
            }
        }
    }
    let z_start = cursor;
    let l_dim = layout.row_size(RowGroup::Performance);
    cursor += l_dim;
    row_owner.extend(layout.row_owners(RowGroup::Performance));
    let gamma0 = cursor;
    let mut col_start = BTreeMap::new();
    for c in variant.col_groups() {
        col_start.insert(c, cursor);
        cursor += layout.col_size(c);
        row_owner.extend(layout.col_owners(c));
    }
    let dim = cursor;
    let n_gamma = dim - gamma0;
    let mut expr = AffineMatrixExpr::new(dim);

    // Θ diagonal.
    for (&(r, i), &off) in &theta_start {
        let x11 = &group_profiles(problem, r)[i].certificate.x11;
        expr.scalar_sym(scale_var(r, i).scalar(), off, x11);
    }
    let z_theta = |mode: &SpecMode| -> Option<DenseMatrix> {
        match mode {
            SpecMode::Fixed(y) => Some(-&y.x22),
            _ => None,
        }
    };
    if l_dim > 0 {
        match spec {
            SpecMode::Fixed(y) => expr.constant_sym(z_start, &(-&y.x22)),
            SpecMode::MinL2Gain => expr.constant_sym(z_start, &DenseMatrix::identity(l_dim, l_dim)),
            SpecMode::MaxPassivity { .. } => {
                expr.scalar_identity(rho_bar.expect("passivity variable").scalar(), z_start, l_dim, 1.0)
            }
            SpecMode::None => {
                return Err(Error::InvalidProblem("performance outputs need a specification".into()));
            }
        }
    }

    // Off-diagonal ΘΦ and the Γ cross terms.
    for r in variant.row_groups() {
        for c in variant.col_groups() {
            let cols = layout.col_size(c);
            if cols == 0 || layout.row_size(r) == 0 {
                continue;
            }
            let col = col_start[&c];
            let eye_c = DenseMatrix::identity(cols, cols);
            match r {
                RowGroup::Input | RowGroup::PlantInput => {
                    let total_rows = layout.row_size(r);
                    let gamma_row_group = if r == RowGroup::Input { ColGroup::Output } else { ColGroup::PlantOutput };
                    for i in 0..n {
                        let rows_i = agent_rows(&layout, r, i);
                        if rows_i.is_empty() {
                            continue;
                        }
                        let cert = &group_profiles(problem, r)[i].certificate;
                        let (_, x21r) = ratio_pair(cert)?;
                        let y_row = col_start[&gamma_row_group] + layout.col_agent_offset(gamma_row_group, i);
                        match (blocks.get(&(r, c)), fixed.get(&(r, c))) {
                            (Some(var), _) => {
                                let sel = selector(rows_i.clone(), total_rows);
                                if let Some(&off) = theta_start.get(&(r, i)) {
                                    expr.matrix_block(*var, off, col, &sel, &eye_c);
                                }
                                expr.matrix_block(*var, y_row, col, &(-&x21r * &sel), &eye_c);
                            }
                            (None, Some(m)) => {
                                let m_i = m.rows(rows_i.start, rows_i.len()).into_owned();
                                let s = scale_var(r, i).scalar();
                                if let Some(&off) = theta_start.get(&(r, i)) {
                                    expr.scalar_block(s, off, col, &(&cert.x11 * &m_i));
                                }
                                expr.scalar_block(s, y_row, col, &(-&cert.x21 * &m_i));
                            }
                            (None, None) => {}
                        }
                    }
                }
                RowGroup::Performance => {
                    let w_row = col_start.get(&ColGroup::Exogenous).copied();
                    let y12 = match spec {
                        SpecMode::Fixed(y) => Some(y.x12.clone()),
                        SpecMode::MaxPassivity { .. } => {
                            Some(DenseMatrix::identity(layout.col_size(ColGroup::Exogenous), l_dim) * 0.5)
                        }
                        _ => None,
                    };
                    let left = z_theta(spec).unwrap_or_else(|| DenseMatrix::identity(l_dim, l_dim));
                    match (blocks.get(&(r, c)), fixed.get(&(r, c))) {
                        (Some(var), _) => {
                            expr.matrix_block(*var, z_start, col, &left, &eye_c);
                            if let (Some(w_row), Some(y12)) = (w_row, &y12) {
                                expr.matrix_block(*var, w_row, col, y12, &eye_c);
                            }
                        }
                        (None, Some(m)) => {
                            expr.constant_block(z_start, col, &(&left * m));
                            if let (Some(w_row), Some(y12)) = (w_row, &y12) {
                                expr.constant_block(w_row, col, &(y12 * m));
                            }
                        }
                        (None, None) => {}
                    }
                }
            }
        }
    }

    // Γ diagonal terms: −X_p²², −X̄_p̄²² and Y¹¹.
    for (r, c) in [(RowGroup::Input, ColGroup::Output), (RowGroup::PlantInput, ColGroup::PlantOutput)] {
        if !variant.col_groups().contains(&c) {
            continue;
        }
        for i in 0..n {
            let dim_i = layout.col_dims(c)[i];
            if dim_i == 0 {
                continue;
            }
            let cert = &group_profiles(problem, r)[i].certificate;
            let off = col_start[&c] + layout.col_agent_offset(c, i);
            expr.scalar_sym(scale_var(r, i).scalar(), off, &(-&cert.x22));
        }
    }
    if let Some(&w0) = col_start.get(&ColGroup::Exogenous) {
        let r_dim = layout.col_size(ColGroup::Exogenous);
        if r_dim > 0 {
            match spec {
                SpecMode::Fixed(y) => expr.constant_sym(w0, &y.x11),
                SpecMode::MinL2Gain => expr.scalar_identity(gain.expect("gain variable").scalar(), w0, r_dim, 1.0),
                SpecMode::MaxPassivity { .. } => expr.scalar_identity(nu.expect("nu variable").scalar(), w0, r_dim, -1.0),
                SpecMode::None => {}
            }
        }
    }

    // Lower-bound relaxation for agents with X¹¹ ≺ 0.
    let alpha = opts.alpha;
    for r in [RowGroup::Input, RowGroup::PlantInput] {
        if !variant.row_groups().contains(&r) {
            continue;
        }
        for i in 0..n {
            if positive(r, i) || alpha == 0.0 {
                continue;
            }
            let rows_i = agent_rows(&layout, r, i);
            let d = rows_i.len();
            // J: identity blocks on agent i's own column ports of matching size.
            let mut j = DenseMatrix::zeros(d, n_gamma);
            for c in variant.col_groups() {
                if layout.col_dims(c)[i] == d {
                    let off = col_start[&c] - gamma0 + layout.col_agent_offset(c, i);
                    j.view_mut((0, off), (d, d)).copy_from(&DenseMatrix::identity(d, d));
                }
            }
            let cert = &group_profiles(problem, r)[i].certificate;
            let s = scale_var(r, i).scalar();
            expr.scalar_sym(s, gamma0, &(j.transpose() * &cert.x11 * &j * (alpha * alpha)));
            let total_rows = layout.row_size(r);
            for c in variant.col_groups() {
                let cols = layout.col_size(c);
                if cols == 0 {
                    continue;
                }
                let eye_c = DenseMatrix::identity(cols, cols);
                let col = col_start[&c];
                match (blocks.get(&(r, c)), fixed.get(&(r, c))) {
                    (Some(var), _) => {
                        let right = selector(rows_i.clone(), total_rows).transpose() * &j * (-alpha);
                        expr.matrix_block_transposed(*var, col, gamma0, &eye_c, &right);
                    }
                    (None, Some(m)) => {
                        let m_i = m.rows(rows_i.start, d).into_owned();
                        let t = (&cert.x11 * &m_i).transpose() * &j * (-alpha);
                        expr.scalar_block(s, col, gamma0, &t);
                    }
                    (None, None) => {}
                }
            }
        }
    }

    let margin = opts.margin.unwrap_or_else(|| default_margin(expr.constant()));
    sdp.add_psd(expr, margin, "network_lmi");
    let lmi = sdp.psd_constraints().len() - 1;
    Ok(Frame {
        sdp,
        layout,
        p,
        pbar,
        blocks,
        fixed,
        gain,
        nu,
        rho_bar,
        lmi,
        row_owner,
    })
}

/// Stacked port maps `[u_i; y_i]` of an agent as functions of `ξ = [y; ȳ; w]`.
fn port_map(m: &InterconnectionMatrix, r: RowGroup, c: ColGroup, i: usize) -> DenseMatrix {
    let layout = &m.layout;
    let n_xi = layout.total_cols();
    let rows_i = agent_rows(layout, r, i);
    let ro = layout.row_group_offset(r) + rows_i.start;
    let u = m.full().rows(ro, rows_i.len()).into_owned();
    let co = layout.col_group_offset(c) + layout.col_agent_offset(c, i);
    let y = selector(co..co + layout.col_dims(c)[i], n_xi);
    let mut out = DenseMatrix::zeros(u.nrows() + y.nrows(), n_xi);
    out.rows_mut(0, u.nrows()).copy_from(&u);
    out.rows_mut(u.nrows(), y.nrows()).copy_from(&y);
    out
}

/// Builds the raw quadratic condition `−(Σ p_i Q_i + Σ p̄_i Q̄_i − Q_Y) ≻ 0`
/// for a fixed interconnection; valid for any sign of `X¹¹`.
pub(crate) fn build_raw(problem: &NscProblem, m: &InterconnectionMatrix, spec: &SpecMode, opts: &FrameOptions) -> Result<Frame> {
    problem.check()?;
    spec_dims_check(problem, spec)?;
    let layout = problem.layout();
    if m.layout != layout {
        return Err(Error::Dimension("interconnection matrix does not match the problem layout".into()));
    }
    let Scaffold {
        mut sdp,
        p,
        pbar,
        gain,
        nu,
        rho_bar,
    } = scaffold(problem, spec, opts);
    let n = layout.agents();
    let n_xi = layout.total_cols();
    let l_dim = layout.row_size(RowGroup::Performance);
    let passivity = matches!(spec, SpecMode::MaxPassivity { .. });
    let head = if passivity { l_dim } else { 0 };
    let mut expr = AffineMatrixExpr::new(head + n_xi);
    for (r, c, vars) in [(RowGroup::Input, ColGroup::Output, &p), (RowGroup::PlantInput, ColGroup::PlantOutput, &pbar)] {
        for (i, s) in group_profiles(problem, r).iter().enumerate() {
            if i >= n {
                break;
            }
            let a = port_map(m, r, c, i);
            let q = a.transpose() * s.certificate.full() * &a;
            expr.scalar_sym(vars[i].scalar(), head, &(-q));
        }
    }
    let w0 = layout.col_group_offset(ColGroup::Exogenous);
    let r_dim = layout.col_size(ColGroup::Exogenous);
    let e_w = selector(w0..w0 + r_dim, n_xi);
    let m_z = m.row_group(RowGroup::Performance);
    match spec {
        SpecMode::None => {}
        SpecMode::Fixed(y) => {
            let mut stacked = DenseMatrix::zeros(r_dim + l_dim, n_xi);
            stacked.rows_mut(0, r_dim).copy_from(&e_w);
            stacked.rows_mut(r_dim, l_dim).copy_from(&m_z);
            expr.constant_sym(head, &(stacked.transpose() * y.full() * &stacked));
        }
        SpecMode::MinL2Gain => {
            expr.scalar_sym(gain.expect("gain").scalar(), head, &(e_w.transpose() * &e_w));
            expr.constant_sym(head, &(-(m_z.transpose() * &m_z)));
        }
        SpecMode::MaxPassivity { .. } => {
            expr.scalar_identity(rho_bar.expect("rho_bar").scalar(), 0, l_dim, 1.0);
            expr.constant_block(0, head, &m_z);
            expr.scalar_sym(nu.expect("nu").scalar(), head, &(-(e_w.transpose() * &e_w)));
            expr.constant_block(head, head, &(e_w.transpose() * &m_z * 0.5));
        }
    }
    let margin = opts.margin.unwrap_or_else(|| default_margin(expr.constant()));
    sdp.add_psd(expr, margin, "raw_network_condition");
    let lmi = sdp.psd_constraints().len() - 1;
    let mut row_owner = if passivity { layout.row_owners(RowGroup::Performance) } else { vec![] };
    for c in crate::nsc::COL_GROUPS {
        row_owner.extend(layout.col_owners(c));
    }
    let fixed = problem
        .variant
        .row_groups()
        .into_iter()
        .flat_map(|r| problem.variant.col_groups().into_iter().map(move |c| (r, c)))
        .map(|(r, c)| ((r, c), m.block(r, c)))
        .collect();
    Ok(Frame {
        sdp,
        layout,
        p,
        pbar,
        blocks: BTreeMap::new(),
        fixed,
        gain,
        nu,
        rho_bar,
        lmi,
        row_owner,
    })
}

/// All blocks fixed to the given interconnection.
pub(crate) fn fixed_sources(m: &InterconnectionMatrix) -> BTreeMap<(RowGroup, ColGroup), BlockSource> {
    let mut out = BTreeMap::new();
    for r in m.variant.row_groups() {
        for c in m.variant.col_groups() {
            out.insert((r, c), BlockSource::Fixed(m.block(r, c)));
        }
    }
    out
}
