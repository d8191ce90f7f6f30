//! Decentralized and compositional testing or enforcement of `W ≻ 0` for a
//! network matrix `W`.
//!
//! Agents run in index order. Agent `i` receives the stored factor rows of all
//! earlier agents, forms its own row `[W̃_i1, …, W̃_ii]` of the block `LDLᵀ`
//! factorization `W = 𝒜𝒟𝒜ᵀ` (with `𝒟 = diag(W̃_jj⁻¹)`) and checks
//! `W̃_ii ≻ 0`. In enforce mode the agent first chooses its own decision
//! variables so that this holds, with every earlier decision frozen.
//!
//! Network LMIs come from the same frames used by centralized analysis and
//! synthesis, reordered so that each agent's ports are contiguous. A decision
//! scalar belongs to the later of the agents it couples, which keeps each
//! agent's row affine in its own variables only.

use std::collections::BTreeMap;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, is_pd, BlockMatrix, DenseMatrix};
use crate::lmi::{all_positive, build_embedded, classify, fixed_sources, BlockSource, Frame, FrameOptions, SpecMode};
use crate::nsc::{block_name, ColGroup, InterconnectionMatrix, NscProblem, RowGroup, Topology, Variant};
use crate::dissipativity::SubsystemProfile;
use crate::nsc::apply_topology;
use crate::sdp::{default_margin, solve, AffineMatrixExpr, LinearKind, ScalarRef, SdpProblem, Sense, SolveOptions};
use crate::synthesis::recover_interconnection;

/// Largest condition number of a stored diagonal factor before it is used.
pub const MAX_FACTOR_CONDITION: f64 = 1e12;

/// Whether agents only test `W̃_ii ≻ 0` or also choose their decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Test,
    Enforce,
}

#[derive(Debug, Clone)]
pub struct DecentralizedOptions {
    /// Strictness required of each local condition; defaults to a relative margin.
    pub margin: Option<f64>,
    pub p_min: f64,
    /// Each agent maximizes the smallest eigenvalue of its Schur block, which
    /// grows with its multipliers; they are capped at this factor times the
    /// largest multiplier already fixed (the first agent is capped at 1).
    pub multiplier_growth: f64,
    pub solver: SolveOptions,
}

impl Default for DecentralizedOptions {
    fn default() -> Self {
        Self {
            margin: None,
            p_min: 1e-6,
            multiplier_growth: 1.0,
            solver: SolveOptions::default(),
        }
    }
}

fn serialize_blocks<S: Serializer>(blocks: &[DenseMatrix], s: S) -> std::result::Result<S::Ok, S::Error> {
    let nested: Vec<Vec<Vec<f64>>> = blocks
        .iter()
        .map(|b| b.row_iter().map(|r| r.iter().copied().collect()).collect())
        .collect();
    nested.serialize(s)
}

/// What one agent keeps (and later hands to its successors).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentState {
    pub index: usize,
    /// `[W̃_i1, …, W̃_ii]`; the last block is the local Schur complement.
    #[serde(serialize_with = "serialize_blocks")]
    pub row: Vec<DenseMatrix>,
    /// Decisions fixed by this agent, by name.
    pub decisions: Vec<(String, f64)>,
    pub pd: bool,
    /// Smallest eigenvalue of `W̃_ii`.
    pub min_eigenvalue: f64,
}

impl AgentState {
    pub fn diagonal(&self) -> &DenseMatrix {
        self.row.last().expect("factor rows are never empty")
    }
}

/// Data agent `from` sends to a later agent `to`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionMessage {
    pub from: usize,
    pub to: usize,
    #[serde(serialize_with = "serialize_blocks")]
    pub factor_row: Vec<DenseMatrix>,
    pub decisions: Vec<(String, f64)>,
}

impl SessionMessage {
    fn size(&self) -> usize {
        self.factor_row.iter().map(|b| b.len()).sum::<usize>() + self.decisions.len()
    }
}

/// One record of the session log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub agent: usize,
    pub mode: SessionMode,
    pub pd: bool,
    /// `(sender, number of scalars received)` per incoming message.
    pub received: Vec<(usize, usize)>,
    pub decisions: usize,
    pub min_eigenvalue: f64,
}

/// Identifies a decision scalar by its role, independent of solver handles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum DecisionKey {
    Multiplier { group: RowGroup, agent: usize },
    Entry { row: RowGroup, col: ColGroup, r: usize, c: usize },
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Context {
    Matrix(BlockMatrix),
    Network {
        problem: NscProblem,
        fixed: Option<InterconnectionMatrix>,
        /// Given multipliers `(p, p̄)` of a test session.
        given: Option<(Vec<f64>, Vec<f64>)>,
    },
}

/// A run of the sequential protocol.
#[derive(Debug, Clone)]
pub struct Session {
    pub mode: SessionMode,
    pub agents: Vec<AgentState>,
    pub messages: Vec<SessionMessage>,
    pub log: Vec<LogEntry>,
    /// First agent whose local condition failed; later agents did not run.
    pub failed_at: Option<usize>,
    /// Multipliers fixed so far (network sessions).
    pub p: Vec<f64>,
    pub pbar: Vec<f64>,
    /// Interconnection certified by a completed network session.
    pub interconnection: Option<InterconnectionMatrix>,
    context: Context,
    frozen: BTreeMap<DecisionKey, (usize, f64)>,
    next_step: usize,
}

impl Session {
    fn new(mode: SessionMode, context: Context) -> Self {
        Self {
            mode,
            agents: vec![],
            messages: vec![],
            log: vec![],
            failed_at: None,
            p: vec![],
            pbar: vec![],
            interconnection: None,
            context,
            frozen: BTreeMap::new(),
            next_step: 0,
        }
    }

    /// Number of agents in the network this session covers.
    pub fn network_size(&self) -> usize {
        match &self.context {
            Context::Matrix(w) => w.block_rows(),
            Context::Network { problem, .. } => problem.agents(),
        }
    }

    /// True when every agent ran and passed.
    pub fn passed(&self) -> bool {
        self.failed_at.is_none() && self.agents.len() == self.network_size() && self.agents.iter().all(|a| a.pd)
    }

    /// The log as line-delimited JSON.
    pub fn log_lines(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entries serialize"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// `𝒜𝒟𝒜ᵀ` from the stored rows; equals `W` after a passing session.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let sizes: Vec<usize> = self.agents.iter().map(|a| a.diagonal().nrows()).collect();
        let (a, d_inv) = stacked_factor(&self.agents)?;
        let d = block_diag(&d_inv.iter().map(inverse_checked).collect::<Result<Vec<_>>>()?);
        debug_assert_eq!(a.nrows(), sizes.iter().sum::<usize>());
        Ok(&a * d * a.transpose())
    }

    fn truncate_to(&mut self, k: usize) {
        self.agents.truncate(k);
        self.messages.retain(|m| m.to < k);
        self.log.retain(|e| e.agent < k);
        self.next_step = self.log.last().map(|e| e.step + 1).unwrap_or(0);
        self.failed_at = self.failed_at.filter(|&f| f < k);
        self.frozen.retain(|_, (owner, _)| *owner < k);
        self.p.truncate(k);
        self.pbar.truncate(k);
        self.interconnection = None;
    }
}

fn inverse_checked(m: &DenseMatrix) -> Result<DenseMatrix> {
    let eig = m.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    if !(lo > 0.0) || hi / lo > MAX_FACTOR_CONDITION {
        return Err(Error::NumericalFailure(format!(
            "stored factor block is near singular (condition {:e})",
            hi / lo
        )));
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NumericalFailure("stored factor block lost positive definiteness".into()))
}

/// Lower block-triangular `𝒜` stacked from the rows, and the diagonal blocks `W̃_jj`.
fn stacked_factor(rows: &[AgentState]) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let sizes: Vec<usize> = rows.iter().map(|a| a.diagonal().nrows()).collect();
    let total: usize = sizes.iter().sum();
    let mut a = DenseMatrix::zeros(total, total);
    let mut ro = 0;
    for (j, agent) in rows.iter().enumerate() {
        if agent.row.len() != j + 1 {
            return Err(Error::Dimension(format!("agent {j} stores {} blocks, expected {}", agent.row.len(), j + 1)));
        }
        let mut co = 0;
        for (k, block) in agent.row.iter().enumerate() {
            a.view_mut((ro, co), (sizes[j], sizes[k])).copy_from(block);
            co += sizes[k];
        }
        ro += sizes[j];
    }
    Ok((a, rows.iter().map(|r| r.diagonal().clone()).collect()))
}

/// Result of one agent's factorization step.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStep {
    /// `[W̃_i1, …, W̃_ii]`.
    pub row: Vec<DenseMatrix>,
    pub pd: bool,
    pub min_eigenvalue: f64,
}

/// One step of the sequential factorization. `w_row` holds `W_i1, …, W_ii`
/// and `prior` the stored rows of agents `0..i` (all of which passed).
pub fn local_factor_step(i: usize, w_row: &[DenseMatrix], prior: &[AgentState]) -> Result<FactorStep> {
    if w_row.len() != i + 1 || prior.len() != i {
        return Err(Error::Dimension(format!(
            "agent {i} needs {} row blocks and {i} prior rows, got {} and {}",
            i + 1,
            w_row.len(),
            prior.len()
        )));
    }
    let d_i = w_row[i].nrows();
    if w_row[i].ncols() != d_i {
        return Err(Error::NotSquare { rows: d_i, cols: w_row[i].ncols() });
    }
    crate::linalg::check_symmetric(&w_row[i])?;
    for (j, agent) in prior.iter().enumerate() {
        if !agent.pd {
            return Err(Error::InvalidArgument(format!("prior agent {j} did not pass")));
        }
        let b = &w_row[j];
        if b.nrows() != d_i || b.ncols() != agent.diagonal().nrows() {
            return Err(Error::Dimension(format!("block W_{i}{j} has the wrong shape")));
        }
    }
    let inverses: Vec<DenseMatrix> = prior.iter().map(|a| inverse_checked(a.diagonal())).collect::<Result<_>>()?;
    // Forward substitution of W̃_i (𝒟𝒜ᵀ) = W_i; 𝒟𝒜ᵀ is unit upper block-triangular.
    let mut row: Vec<DenseMatrix> = Vec::with_capacity(i + 1);
    for k in 0..i {
        let mut x = w_row[k].clone();
        for j in 0..k {
            x -= &row[j] * &inverses[j] * prior[k].row[j].transpose();
        }
        row.push(x);
    }
    let mut diag = w_row[i].clone();
    for k in 0..i {
        diag -= &row[k] * &inverses[k] * row[k].transpose();
    }
    let diag = crate::linalg::symmetric_part(&diag);
    let pd = is_pd(&diag)?;
    let min_eigenvalue = if d_i == 0 { f64::INFINITY } else { crate::linalg::min_eigenvalue(&diag) };
    row.push(diag);
    Ok(FactorStep { row, pd, min_eigenvalue })
}

fn record_step(session: &mut Session, i: usize, step: FactorStep, decisions: Vec<(String, f64)>) {
    let received: Vec<SessionMessage> = session
        .agents
        .iter()
        .map(|a| SessionMessage {
            from: a.index,
            to: i,
            factor_row: a.row.clone(),
            decisions: a.decisions.clone(),
        })
        .collect();
    session.log.push(LogEntry {
        step: session.next_step,
        agent: i,
        mode: session.mode,
        pd: step.pd,
        received: received.iter().map(|m| (m.from, m.size())).collect(),
        decisions: decisions.len(),
        min_eigenvalue: step.min_eigenvalue,
    });
    session.next_step += 1;
    session.messages.extend(received);
    if !step.pd {
        session.failed_at = Some(i);
    }
    session.agents.push(AgentState {
        index: i,
        row: step.row,
        decisions,
        pd: step.pd,
        min_eigenvalue: step.min_eigenvalue,
    });
}

fn matrix_session_from(session: &mut Session, w: &BlockMatrix, start: usize) -> Result<()> {
    for i in start..w.block_rows() {
        if session.failed_at.is_some() {
            break;
        }
        let row: Vec<DenseMatrix> = (0..=i).map(|j| w.block(i, j)).collect();
        let step = local_factor_step(i, &row, &session.agents)?;
        record_step(session, i, step, vec![]);
    }
    Ok(())
}

/// Tests `W ≻ 0` agent by agent.
pub fn run_test_session(w: &BlockMatrix) -> Result<Session> {
    if w.row_partition() != w.col_partition() {
        return Err(Error::Dimension("network matrix needs equal row and column partitions".into()));
    }
    crate::linalg::check_symmetric(w.data())?;
    let mut session = Session::new(SessionMode::Test, Context::Matrix(w.clone()));
    matrix_session_from(&mut session, w, 0)?;
    Ok(session)
}

// ---------------------------------------------------------------------------
// Network LMIs.

struct Decision {
    key: DecisionKey,
    owner: usize,
    name: String,
    multiplier: bool,
}

/// The frame LMI reordered by agent, with ownership of every scalar.
struct Engine {
    frame: Frame,
    expr: AffineMatrixExpr,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    decisions: BTreeMap<ScalarRef, Decision>,
    zero_fixed: BTreeMap<ScalarRef, f64>,
}

fn spec_for(problem: &NscProblem) -> Result<SpecMode> {
    if !problem.variant.has_exogenous() {
        return Ok(SpecMode::None);
    }
    let y = problem
        .spec
        .clone()
        .ok_or_else(|| Error::InvalidProblem("a supply specification Y is required".into()))?;
    let layout = problem.layout();
    let w_dims = layout.col_dims(ColGroup::Exogenous).to_vec();
    let z_dims = layout.row_dims(RowGroup::Performance).to_vec();
    for (name, block, rows, cols) in [
        ("Y12", &y.x12, &w_dims, &z_dims),
        ("Y21", &y.x21, &z_dims, &w_dims),
        ("Y22", &y.x22, &z_dims, &z_dims),
    ] {
        let b = BlockMatrix::new(rows.clone(), cols.clone(), block.clone())?;
        if !b.is_block_diagonal() {
            return Err(Error::InvalidProblem(format!(
                "{name} must be block diagonal over the agents for a decentralized session"
            )));
        }
    }
    Ok(SpecMode::Fixed(y))
}

impl Engine {
    fn build(problem: &NscProblem, fixed: Option<&InterconnectionMatrix>, opts: &DecentralizedOptions) -> Result<Self> {
        let classes = classify(problem)?;
        if !all_positive(&classes) {
            return Err(Error::InvalidProblem(
                "decentralized sessions need every X11 block positive definite".into(),
            ));
        }
        let spec = spec_for(problem)?;
        let sources: BTreeMap<(RowGroup, ColGroup), BlockSource> = match fixed {
            Some(m) => fixed_sources(m),
            None => BTreeMap::new(),
        };
        let frame_opts = FrameOptions {
            margin: opts.margin,
            p_min: opts.p_min,
            normalize: false,
            alpha: 0.0,
            nu_floor: None,
        };
        let frame = build_embedded(problem, &sources, &spec, &frame_opts)?;
        let mut zero_fixed = BTreeMap::new();
        if let (Some(topology), None) = (&problem.topology, fixed) {
            topology.validate(problem.agents())?;
            for s in apply_topology(topology, &frame.layout, &frame.blocks).zero_fixes {
                zero_fixed.insert(s, 0.0);
            }
        }
        let n = problem.agents();
        let mut perm: Vec<usize> = (0..frame.row_owner.len()).collect();
        perm.sort_by_key(|&k| frame.row_owner[k]);
        let mut sizes = vec![0; n];
        for &o in &frame.row_owner {
            sizes[o] += 1;
        }
        let mut offsets = vec![0; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + sizes[i];
        }
        let expr = frame.lmi_expr().permuted(&perm);
        let mut decisions = BTreeMap::new();
        for (group, vars) in [(RowGroup::Input, &frame.p), (RowGroup::PlantInput, &frame.pbar)] {
            for (i, v) in vars.iter().enumerate() {
                let name = if group == RowGroup::Input { format!("p{}", i + 1) } else { format!("pbar{}", i + 1) };
                decisions.insert(
                    v.scalar(),
                    Decision {
                        key: DecisionKey::Multiplier { group, agent: i },
                        owner: i,
                        name,
                        multiplier: true,
                    },
                );
            }
        }
        for ((r, c), var) in &frame.blocks {
            let prefix = if *r == RowGroup::Performance { "M" } else { "L" };
            for a in 0..var.rows {
                for b in 0..var.cols {
                    let s = var.at(a, b);
                    let owner = frame.scalar_owner(s).expect("block entries have owners");
                    decisions.insert(
                        s,
                        Decision {
                            key: DecisionKey::Entry { row: *r, col: *c, r: a, c: b },
                            owner,
                            name: format!("{prefix}_{}[{},{}]", block_name(*r, *c), a + 1, b + 1),
                            multiplier: false,
                        },
                    );
                }
            }
        }
        Ok(Self {
            frame,
            expr,
            offsets,
            sizes,
            decisions,
            zero_fixed,
        })
    }

    fn agents(&self) -> usize {
        self.sizes.len()
    }

    /// Sub-block `(i, j)` of a full-size matrix in agent order.
    fn block(&self, m: &DenseMatrix, i: usize, j: usize) -> DenseMatrix {
        m.view((self.offsets[i], self.offsets[j]), (self.sizes[i], self.sizes[j])).into_owned()
    }

    /// Stacked `[W_i0, …, W_i(i-1)]` and `W_ii` of a full-size matrix.
    fn row_parts(&self, m: &DenseMatrix, i: usize) -> (DenseMatrix, DenseMatrix) {
        let before = self.offsets[i];
        (
            m.view((self.offsets[i], 0), (self.sizes[i], before)).into_owned(),
            self.block(m, i, i),
        )
    }

    /// Scalars appearing in agent `i`'s row blocks, with their coefficients.
    fn row_terms(&self, i: usize) -> Result<Vec<(ScalarRef, DenseMatrix)>> {
        let mut out = vec![];
        for s in self.expr.referenced() {
            let coeff = self.expr.coefficient(s);
            let (left, diag) = self.row_parts(&coeff, i);
            if left.iter().chain(diag.iter()).all(|v| *v == 0.0) {
                continue;
            }
            match self.decisions.get(&s) {
                Some(d) if d.owner <= i => out.push((s, coeff)),
                Some(d) => {
                    return Err(Error::InvalidProblem(format!(
                        "{} (agent {}) enters agent {i}'s row; the LMI is not a network matrix",
                        d.name, d.owner
                    )))
                }
                None => {
                    return Err(Error::InvalidProblem(
                        "a global decision variable enters the network LMI".into(),
                    ))
                }
            }
        }
        Ok(out)
    }

    fn known_values(&self, session: &Session) -> BTreeMap<ScalarRef, f64> {
        let mut out = self.zero_fixed.clone();
        for (s, d) in &self.decisions {
            if let Some((_, v)) = session.frozen.get(&d.key) {
                out.insert(*s, *v);
            }
        }
        out
    }

    /// Numeric row blocks `W_i0, …, W_ii` given values for every scalar in the row.
    fn numeric_row(&self, i: usize, terms: &[(ScalarRef, DenseMatrix)], values: &BTreeMap<ScalarRef, f64>) -> Result<Vec<DenseMatrix>> {
        let mut full = self.expr.constant().clone();
        for (s, c) in terms {
            let v = values
                .get(s)
                .ok_or_else(|| Error::MissingVariable(self.decisions.get(s).map(|d| d.name.clone()).unwrap_or_default()))?;
            full += c * *v;
        }
        Ok((0..=i).map(|j| self.block(&full, i, j)).collect())
    }

    /// Agent `i`'s local problem: maximize `τ` subject to
    /// `[[W_ii − τI, W_i T], [(W_i T)ᵀ, 𝒟⁻¹]] ⪰ 0` over its own scalars, with
    /// `T = (𝒟𝒜ᵀ)⁻¹`. By the Schur complement this is `W̃_ii ⪰ τI`.
    fn solve_local(
        &self,
        i: usize,
        terms: &[(ScalarRef, DenseMatrix)],
        known: &BTreeMap<ScalarRef, f64>,
        prior: &[AgentState],
        cap: f64,
        opts: &DecentralizedOptions,
    ) -> Result<Option<(BTreeMap<ScalarRef, f64>, f64)>> {
        let (a, diags) = stacked_factor(prior)?;
        let before = a.nrows();
        let d_inv_block = block_diag(&diags);
        for d in &diags {
            inverse_checked(d)?;
        }
        let t = if before == 0 {
            DenseMatrix::zeros(0, 0)
        } else {
            a.transpose()
                .lu()
                .solve(&d_inv_block)
                .ok_or_else(|| Error::NumericalFailure("prior factor rows are singular".into()))?
        };
        let d_i = self.sizes[i];
        let dim = d_i + before;
        let embed = |m: &DenseMatrix, bottom: Option<&DenseMatrix>| -> DenseMatrix {
            let (left, diag) = self.row_parts(m, i);
            let mut out = DenseMatrix::zeros(dim, dim);
            out.view_mut((0, 0), (d_i, d_i)).copy_from(&diag);
            if before > 0 {
                let lt = &left * &t;
                out.view_mut((0, d_i), (d_i, before)).copy_from(&lt);
                out.view_mut((d_i, 0), (before, d_i)).copy_from(&lt.transpose());
                if let Some(b) = bottom {
                    out.view_mut((d_i, d_i), (before, before)).copy_from(b);
                }
            }
            crate::linalg::symmetric_part(&out)
        };
        let mut constant = self.expr.constant().clone();
        let mut own = vec![];
        for (s, c) in terms {
            match known.get(s) {
                Some(v) => constant += c * *v,
                None => own.push((*s, c)),
            }
        }
        let mut sdp = SdpProblem::new();
        let mut expr = AffineMatrixExpr::constant_matrix(&embed(&constant, Some(&d_inv_block)));
        let slack = sdp.add_scalar("slack", None);
        expr.scalar_identity(slack.scalar(), 0, d_i, -1.0);
        let mut handles = vec![];
        for (s, c) in &own {
            let d = &self.decisions[s];
            let var = sdp.add_scalar(d.name.clone(), d.multiplier.then_some(opts.p_min));
            if d.multiplier {
                sdp.add_linear(vec![(var.scalar(), -1.0)], LinearKind::GreaterEq, -cap);
            }
            expr.scalar_full(var.scalar(), &embed(c, None));
            handles.push((*s, var));
        }
        let floor = 1e-10 * (1.0 + crate::linalg::inf_norm(expr.constant()));
        sdp.add_psd(expr, floor, format!("agent_{}", i + 1));
        sdp.set_objective(Sense::Maximize, vec![(slack.scalar(), 1.0)]);
        let sol = solve(&sdp, &opts.solver)?;
        if !sol.status.is_success() {
            return Ok(None);
        }
        let values: BTreeMap<ScalarRef, f64> = handles.into_iter().map(|(s, v)| (s, sol.scalar(v))).collect();
        Ok(Some((values, sol.scalar(slack))))
    }
}

type NetworkParts<'a> = (&'a NscProblem, Option<&'a InterconnectionMatrix>, Option<&'a (Vec<f64>, Vec<f64>)>);

fn network_parts(session: &Session) -> Result<NetworkParts<'_>> {
    match &session.context {
        Context::Network { problem, fixed, given } => Ok((problem, fixed.as_ref(), given.as_ref())),
        Context::Matrix(_) => Err(Error::InvalidArgument("not a network session".into())),
    }
}

/// Runs agents `start..` of a network session.
fn network_session_from(session: &mut Session, start: usize, opts: &DecentralizedOptions) -> Result<()> {
    let (problem, fixed, given) = network_parts(session)?;
    let engine = Engine::build(problem, fixed, opts)?;
    if let Some((p, pbar)) = given.cloned() {
        for (s, d) in &engine.decisions {
            if let DecisionKey::Multiplier { group, agent } = d.key {
                let v = if group == RowGroup::Input { p[agent] } else { pbar[agent] };
                let _ = s;
                session.frozen.insert(d.key, (agent, v));
            }
        }
    }
    for i in start..engine.agents() {
        if session.failed_at.is_some() {
            break;
        }
        let terms = engine.row_terms(i)?;
        let mut values = engine.known_values(session);
        let has_own = terms.iter().any(|(s, _)| !values.contains_key(s));
        let mut decided = vec![];
        if has_own {
            if session.mode == SessionMode::Test {
                return Err(Error::MissingVariable(format!("agent {i} has undetermined decisions in a test session")));
            }
            let cap = if i == 0 {
                1.0
            } else {
                let largest = session
                    .frozen
                    .iter()
                    .filter(|(k, _)| matches!(k, DecisionKey::Multiplier { .. }))
                    .map(|(_, (_, v))| *v)
                    .fold(0.0_f64, f64::max);
                opts.multiplier_growth * largest.max(1.0)
            };
            let local = engine.solve_local(i, &terms, &values, &session.agents, cap, opts)?;
            let accepted = local.filter(|(own, slack)| {
                let mut trial = values.clone();
                trial.extend(own.iter().map(|(s, v)| (*s, *v)));
                let w_ii = engine.numeric_row(i, &terms, &trial).map(|r| r[i].clone());
                w_ii.is_ok_and(|w| *slack >= opts.margin.unwrap_or_else(|| default_margin(&w)))
            });
            match accepted {
                Some((own, _)) => {
                    for (s, v) in own {
                        let d = &engine.decisions[&s];
                        decided.push((d.name.clone(), v));
                        session.frozen.insert(d.key, (d.owner, v));
                        values.insert(s, v);
                    }
                }
                None => {
                    let d_i = engine.sizes[i];
                    record_step(
                        session,
                        i,
                        FactorStep {
                            row: (0..=i).map(|j| DenseMatrix::zeros(d_i, engine.sizes[j])).collect(),
                            pd: false,
                            min_eigenvalue: f64::NAN,
                        },
                        vec![],
                    );
                    break;
                }
            }
        }
        let row = engine.numeric_row(i, &terms, &values)?;
        let step = local_factor_step(i, &row, &session.agents)?;
        record_step(session, i, step, decided);
    }
    finalize_network(session, &engine)
}

fn finalize_network(session: &mut Session, engine: &Engine) -> Result<()> {
    let (problem, fixed, _) = network_parts(session)?;
    let problem = problem.clone();
    let fixed = fixed.cloned();
    let get = |key: DecisionKey| session.frozen.get(&key).map(|(_, v)| *v);
    let multipliers = |group: RowGroup, n: usize| -> Vec<f64> {
        (0..n).map_while(|agent| get(DecisionKey::Multiplier { group, agent })).collect()
    };
    session.p = multipliers(RowGroup::Input, problem.subsystems.len());
    session.pbar = multipliers(RowGroup::PlantInput, problem.plants.len());
    if !session.passed() {
        session.interconnection = None;
        return Ok(());
    }
    session.interconnection = match fixed {
        Some(m) => Some(m),
        None => {
            let mut l = InterconnectionMatrix::zeros(problem.variant, problem.layout());
            for ((r, c), var) in &engine.frame.blocks {
                let mut block = DenseMatrix::zeros(var.rows, var.cols);
                for a in 0..var.rows {
                    for b in 0..var.cols {
                        block[(a, b)] = get(DecisionKey::Entry { row: *r, col: *c, r: a, c: b }).unwrap_or(0.0);
                    }
                }
                l.set_block(*r, *c, &block)?;
            }
            Some(recover_interconnection(&problem, &l, &session.p, &session.pbar)?)
        }
    };
    Ok(())
}

fn expect_variant(problem: &NscProblem, v: Variant) -> Result<()> {
    if problem.variant != v {
        return Err(Error::InvalidArgument(format!(
            "expected an NSC {} problem, got NSC {}",
            v.number(),
            problem.variant.number()
        )));
    }
    Ok(())
}

/// Stability test of NSC 1 for a given `M_uy`: each agent picks its
/// multiplier with the earlier ones frozen.
pub fn decentralized_analyze_nsc1(problem: &NscProblem, m_uy: &DenseMatrix, opts: &DecentralizedOptions) -> Result<Session> {
    expect_variant(problem, Variant::Nsc1)?;
    let mut m = InterconnectionMatrix::zeros(Variant::Nsc1, problem.layout());
    m.set_block(RowGroup::Input, ColGroup::Output, m_uy)?;
    decentralized_general(problem, GeneralMode::Enforce { interconnection: Some(m) }, opts)
}

/// Sequential synthesis of `M_uy` for NSC 1. Agent `i` fixes its multiplier
/// and every coupling block between itself and earlier agents.
pub fn decentralized_synth_nsc1(problem: &NscProblem, opts: &DecentralizedOptions) -> Result<(Session, Option<InterconnectionMatrix>)> {
    expect_variant(problem, Variant::Nsc1)?;
    let session = decentralized_general(problem, GeneralMode::Enforce { interconnection: None }, opts)?;
    let m = session.interconnection.clone();
    Ok((session, m))
}

/// What a general network session does.
#[derive(Debug, Clone)]
pub enum GeneralMode {
    /// Test the LMI at a given interconnection and given multipliers.
    Test {
        interconnection: InterconnectionMatrix,
        p: Vec<f64>,
        pbar: Vec<f64>,
    },
    /// Choose multipliers (and, without a given interconnection, the free
    /// blocks of `M`) agent by agent.
    Enforce { interconnection: Option<InterconnectionMatrix> },
}

/// Decentralized form of the network LMI of any variant.
pub fn decentralized_general(problem: &NscProblem, mode: GeneralMode, opts: &DecentralizedOptions) -> Result<Session> {
    problem.check()?;
    if problem.variant.has_plants() && problem.plants.len() != problem.subsystems.len() {
        return Err(Error::InvalidProblem("every subsystem needs a twin plant".into()));
    }
    let (session_mode, fixed, given) = match mode {
        GeneralMode::Test { interconnection, p, pbar } => {
            if p.len() != problem.subsystems.len() || pbar.len() != problem.plants.len() {
                return Err(Error::Dimension("one multiplier per subsystem and plant is required".into()));
            }
            (SessionMode::Test, Some(interconnection), Some((p, pbar)))
        }
        GeneralMode::Enforce { interconnection } => (SessionMode::Enforce, interconnection, None),
    };
    let mut session = Session::new(
        session_mode,
        Context::Network {
            problem: problem.clone(),
            fixed,
            given,
        },
    );
    network_session_from(&mut session, 0, opts)?;
    Ok(session)
}

/// A subsystem joining a network session.
#[derive(Debug, Clone)]
pub struct NewAgent {
    pub subsystem: SubsystemProfile,
    /// Twin plant (NSC 3 and 4).
    pub plant: Option<SubsystemProfile>,
    pub exogenous_dim: usize,
    pub performance_dim: usize,
    /// Allowed links to the existing agents when the problem has a topology.
    pub links: Option<Vec<bool>>,
    /// Interconnection over the enlarged network, for sessions over a fixed `M`.
    pub interconnection: Option<InterconnectionMatrix>,
    /// Multipliers `(p, p̄)` of the new agent, for test sessions.
    pub multipliers: Option<(f64, Option<f64>)>,
}

/// Data for a new last agent.
#[derive(Debug, Clone)]
pub enum Addition {
    /// Blocks `W_(N)0, …, W_(N)(N)` of a plain network matrix.
    Row(Vec<DenseMatrix>),
    Agent(Box<NewAgent>),
}

fn extended_topology(t: &Topology, links: &[bool]) -> Result<Topology> {
    let n = t.agents();
    if links.len() != n {
        return Err(Error::Dimension(format!("expected {n} link flags, got {}", links.len())));
    }
    let grow = |m: &DenseMatrix, edge: &dyn Fn(usize) -> f64, corner: f64| {
        DenseMatrix::from_fn(n + 1, n + 1, |a, b| match (a == n, b == n) {
            (false, false) => m[(a, b)],
            (true, true) => corner,
            (true, false) => edge(b),
            (false, true) => edge(a),
        })
    };
    let adjacency = grow(&t.adjacency, &|k| if links[k] { 1.0 } else { 0.0 }, 0.0);
    let cost = grow(&t.cost, &|_| 1.0, 1.0);
    Topology::new(adjacency, cost, t.mode)
}

/// Appends an agent and runs only its step; stored rows of the existing
/// agents are reused as they are.
pub fn add_subsystem(session: &Session, addition: Addition, opts: &DecentralizedOptions) -> Result<Session> {
    let mut out = session.clone();
    if out.failed_at.is_some() {
        return Err(Error::InvalidArgument("cannot extend a session that already failed".into()));
    }
    match (&mut out.context, addition) {
        (Context::Matrix(w), Addition::Row(blocks)) => {
            let n = w.block_rows();
            if blocks.len() != n + 1 {
                return Err(Error::Dimension(format!("expected {} blocks for the new row", n + 1)));
            }
            let d = blocks[n].nrows();
            let mut partition = w.row_partition().to_vec();
            partition.push(d);
            let mut grown = BlockMatrix::zeros(partition.clone(), partition);
            for a in 0..n {
                for b in 0..n {
                    grown.set_block(a, b, &w.block(a, b))?;
                }
            }
            for (j, blk) in blocks.iter().enumerate() {
                grown.set_block(n, j, blk)?;
                if j < n {
                    grown.set_block(j, n, &blk.transpose())?;
                }
            }
            crate::linalg::check_symmetric(grown.data())?;
            *w = grown.clone();
            matrix_session_from(&mut out, &grown, n)?;
        }
        (Context::Network { problem, fixed, given }, Addition::Agent(agent)) => {
            let n = problem.agents();
            problem.subsystems.push(agent.subsystem.clone());
            if problem.variant.has_plants() {
                let plant = agent
                    .plant
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("the new agent needs a twin plant".into()))?;
                problem.plants.push(plant);
            }
            if problem.variant.has_exogenous() {
                problem.exogenous_dims.push(agent.exogenous_dim);
                problem.performance_dims.push(agent.performance_dim);
            }
            if let Some(t) = &problem.topology {
                let links = agent.links.clone().unwrap_or_else(|| vec![true; n]);
                problem.topology = Some(extended_topology(t, &links)?);
            }
            if fixed.is_some() {
                let m = agent
                    .interconnection
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("sessions over a fixed M need the enlarged M".into()))?;
                if m.layout != problem.layout() {
                    return Err(Error::Dimension("enlarged M does not match the enlarged network".into()));
                }
                *fixed = Some(m);
            }
            if let Some((p, pbar)) = given {
                let (pn, pbarn) = agent
                    .multipliers
                    .ok_or_else(|| Error::InvalidArgument("test sessions need the new agent's multipliers".into()))?;
                p.push(pn);
                if problem.variant.has_plants() {
                    pbar.push(pbarn.ok_or_else(|| Error::InvalidArgument("missing the plant multiplier".into()))?);
                }
            }
            problem.check()?;
            network_session_from(&mut out, n, opts)?;
        }
        _ => return Err(Error::InvalidArgument("the addition does not match the session kind".into())),
    }
    Ok(out)
}

fn without_agent_ports(m: &InterconnectionMatrix, k: usize, layout: crate::nsc::PortLayout) -> Result<InterconnectionMatrix> {
    let old = &m.layout;
    let mut rows = vec![];
    for r in crate::nsc::ROW_GROUPS {
        for i in 0..old.agents() {
            if i != k {
                let start = old.row_group_offset(r) + old.row_agent_offset(r, i);
                rows.extend(start..start + old.row_dims(r)[i]);
            }
        }
    }
    let mut cols = vec![];
    for c in crate::nsc::COL_GROUPS {
        for j in 0..old.agents() {
            if j != k {
                let start = old.col_group_offset(c) + old.col_agent_offset(c, j);
                cols.extend(start..start + old.col_dims(c)[j]);
            }
        }
    }
    let data = DenseMatrix::from_fn(rows.len(), cols.len(), |a, b| m.full()[(rows[a], cols[b])]);
    InterconnectionMatrix::from_full(m.variant, layout, data)
}

/// Removes agent `k`. Agents before `k` are untouched; agents after it are
/// re-indexed and re-run. Removing the last agent needs no recomputation.
pub fn remove_subsystem(session: &Session, k: usize, opts: &DecentralizedOptions) -> Result<Session> {
    let n = session.network_size();
    if n == 0 {
        return Err(Error::Empty("the session has no agents".into()));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!("no agent {k} in a network of {n}")));
    }
    let mut out = session.clone();
    out.truncate_to(k);
    match &mut out.context {
        Context::Matrix(w) => {
            let partition: Vec<usize> = w.row_partition().iter().enumerate().filter(|(i, _)| *i != k).map(|(_, d)| *d).collect();
            let keep: Vec<usize> = (0..n).filter(|&i| i != k).collect();
            let mut shrunk = BlockMatrix::zeros(partition.clone(), partition);
            for (a, &i) in keep.iter().enumerate() {
                for (b, &j) in keep.iter().enumerate() {
                    shrunk.set_block(a, b, &w.block(i, j))?;
                }
            }
            *w = shrunk.clone();
            matrix_session_from(&mut out, &shrunk, k)?;
        }
        Context::Network { problem, fixed, given } => {
            problem.subsystems.remove(k);
            if problem.variant.has_plants() {
                problem.plants.remove(k);
            }
            if problem.variant.has_exogenous() {
                problem.exogenous_dims.remove(k);
                problem.performance_dims.remove(k);
            }
            if let Some(t) = &problem.topology {
                let keep: Vec<usize> = (0..n).filter(|&i| i != k).collect();
                let pick = |m: &DenseMatrix| DenseMatrix::from_fn(n - 1, n - 1, |a, b| m[(keep[a], keep[b])]);
                problem.topology = Some(Topology::new(pick(&t.adjacency), pick(&t.cost), t.mode)?);
            }
            if let Some(m) = fixed.as_ref() {
                *fixed = Some(without_agent_ports(m, k, problem.layout())?);
            }
            if let Some((p, pbar)) = given {
                p.remove(k);
                if !pbar.is_empty() {
                    pbar.remove(k);
                }
            }
            if n > 1 {
                network_session_from(&mut out, k, opts)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{analyze, AnalysisOptions};
    use crate::dissipativity::{DissipativityKind, SubsystemProfile};
    use crate::linalg::{is_positive_definite, min_eigenvalue};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DenseMatrix {
        DenseMatrix::from_element(1, 1, v)
    }

    fn l2(gamma: f64) -> SubsystemProfile {
        SubsystemProfile::from_kind(0, &DissipativityKind::L2Gain { gamma }, 1, 1).unwrap()
    }

    #[test]
    fn first_agent_keeps_its_block() {
        let step = local_factor_step(0, &[scalar(2.0)], &[]).unwrap();
        assert!(step.pd);
        assert_eq!(step.row, vec![scalar(2.0)]);
    }

    #[test]
    fn two_by_two_matches_schur_complement() {
        let w = BlockMatrix::new(vec![1, 1], vec![1, 1], DenseMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let s = run_test_session(&w).unwrap();
        assert!(s.passed());
        assert!((s.agents[1].row[0][(0, 0)] - 1.0).abs() < 1e-14);
        assert!((s.agents[1].row[1][(0, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn small_trailing_block_fails_like_cholesky() {
        let w = BlockMatrix::new(vec![1, 1], vec![1, 1], DenseMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 0.4])).unwrap();
        let s = run_test_session(&w).unwrap();
        assert_eq!(s.failed_at, Some(1));
        assert!(!s.passed());
    }

    #[test]
    fn identity_passes_for_any_partition() {
        let w = BlockMatrix::new(vec![2, 1, 3], vec![2, 1, 3], DenseMatrix::identity(6, 6)).unwrap();
        let s = run_test_session(&w).unwrap();
        assert!(s.passed());
        assert!(s.agents.iter().skip(1).all(|a| a.row[..a.index].iter().all(|b| b.amax() == 0.0)));
    }

    #[test]
    fn random_matrices_agree_with_direct_test_and_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let part: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
            let d: usize = part.iter().sum();
            let g = DenseMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let shift = rng.gen_range(-0.5..1.5);
            let w = crate::linalg::symmetric_part(&(&g * g.transpose())) * 0.5 + DenseMatrix::identity(d, d) * (shift - 0.3);
            let lam = min_eigenvalue(&w);
            if lam.abs() < 1e-8 {
                continue;
            }
            let s = run_test_session(&BlockMatrix::new(part.clone(), part, w.clone()).unwrap()).unwrap();
            assert_eq!(s.passed(), is_positive_definite(&w, 0.0).unwrap() && lam > 0.0);
            assert!(s.log.iter().all(|e| e.received.iter().all(|(from, _)| *from < e.agent)));
            if s.passed() {
                let r = s.reconstruct().unwrap();
                assert!((&r - &w).amax() <= 1e-8 * (1.0 + w.amax()));
            }
        }
    }

    #[test]
    fn single_agent_analysis_matches_small_gain() {
        let problem = NscProblem::nsc1(vec![l2(2.0)]);
        let ok = decentralized_analyze_nsc1(&problem, &scalar(0.4), &DecentralizedOptions::default()).unwrap();
        assert!(ok.passed());
        let bad = decentralized_analyze_nsc1(&problem, &scalar(0.6), &DecentralizedOptions::default()).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn single_agent_synthesis_satisfies_small_gain() {
        let problem = NscProblem::nsc1(vec![l2(2.0)]);
        let (s, m) = decentralized_synth_nsc1(&problem, &DecentralizedOptions::default()).unwrap();
        assert!(s.passed());
        let m = m.unwrap();
        assert!(m.full()[(0, 0)].abs() * 2.0 < 1.0);
    }

    #[test]
    fn synthesized_pair_certifies_centrally() {
        let problem = NscProblem::nsc1(vec![l2(1.5), l2(0.8)]);
        let (s, m) = decentralized_synth_nsc1(&problem, &DecentralizedOptions::default()).unwrap();
        assert!(s.passed(), "{}", s.log_lines());
        let r = analyze(&problem, &m.unwrap(), &AnalysisOptions::default()).unwrap();
        assert!(r.certified());
    }

    #[test]
    fn append_then_remove_restores_the_log() {
        let problem = NscProblem::nsc1(vec![l2(1.5), l2(0.8), l2(1.1)]);
        let opts = DecentralizedOptions::default();
        let (s, _) = decentralized_synth_nsc1(&problem, &opts).unwrap();
        let agent = NewAgent {
            subsystem: l2(1.0),
            plant: None,
            exogenous_dim: 0,
            performance_dim: 0,
            links: None,
            interconnection: None,
            multipliers: None,
        };
        let grown = add_subsystem(&s, Addition::Agent(Box::new(agent)), &opts).unwrap();
        assert_eq!(grown.log.len(), s.log.len() + 1);
        assert_eq!(&grown.log[..s.log.len()], &s.log[..]);
        let back = remove_subsystem(&grown, 3, &opts).unwrap();
        assert_eq!(back.log, s.log);
        assert_eq!(back.agents, s.agents);
    }

    #[test]
    fn removing_the_first_agent_reruns_everything() {
        let w = BlockMatrix::new(vec![1, 1, 1], vec![1, 1, 1], DenseMatrix::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 3.0])).unwrap();
        let s = run_test_session(&w).unwrap();
        let r = remove_subsystem(&s, 0, &DecentralizedOptions::default()).unwrap();
        assert_eq!(r.agents.len(), 2);
        assert_eq!(r.log.len(), 2);
        assert!(r.passed());
    }

    #[test]
    fn non_diagonal_performance_weight_is_rejected() {
        let subs = vec![l2(0.5), l2(0.5)];
        let y = crate::dissipativity::SupplyMatrix::new(
            DenseMatrix::identity(2, 2),
            DenseMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.0, 0.0]),
            DenseMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.1, 0.0]),
            -DenseMatrix::identity(2, 2),
        )
        .unwrap();
        let problem = NscProblem {
            variant: Variant::Nsc2,
            subsystems: subs,
            plants: vec![],
            spec: Some(y),
            exogenous_dims: vec![1, 1],
            performance_dims: vec![1, 1],
            topology: None,
        };
        let err = decentralized_general(&problem, GeneralMode::Enforce { interconnection: None }, &DecentralizedOptions::default());
        assert!(matches!(err, Err(Error::InvalidProblem(_))));
    }
}
