//! Interconnection synthesis: search for `M` (under a structure template and an
//! optional topology) such that the network is stable or `Y`-dissipative.
//!
//! Input-side blocks are searched through `L = X_p¹¹ M`, which keeps the
//! condition linear; [`recover_interconnection`] maps the solution back.
//! Performance-side blocks are decision variables themselves.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{analyze, placeholder_spec, AnalysisOptions, AnalysisResult, Indices};
use crate::dissipativity::Definiteness;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::lmi::{all_positive, build_embedded, classify, BlockSource, Frame, FrameOptions, SpecMode};
use crate::nsc::{apply_topology, ColGroup, InterconnectionMatrix, NscProblem, RowGroup, StructureTemplate, Variant};
use crate::sdp::{add_soft_quadratic_cost, solve, ScalarRef, SdpSolution, SolveOptions, SolveStatus};

/// What the synthesis optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisObjective {
    /// Any certified `M` (the most strictly feasible one).
    Feasible,
    /// Maximize `c1 ν − c2 ρ̄` with `ρ̄ = 1/ρ`.
    MaxPassivity { c1: f64, c2: f64 },
    /// Minimize `γ²`.
    MinL2Gain,
    /// Minimize the topology cost of the connections.
    SoftTopologyCost,
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub margin: Option<f64>,
    pub p_min: f64,
    /// Penalize `M` instead of `L` in the soft topology cost, by reweighting
    /// with the multipliers of the previous pass.
    pub soft_on_m: bool,
    pub reweight_passes: usize,
    /// Relaxation parameter for subsystems with `X¹¹ ≺ 0`; `None` searches a grid.
    pub alpha: Option<f64>,
    /// Re-run the analysis on the recovered `M`.
    pub verify: bool,
    pub solver: SolveOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            margin: None,
            p_min: 1e-6,
            soft_on_m: false,
            reweight_passes: 3,
            alpha: None,
            verify: true,
            solver: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisRequest {
    pub problem: NscProblem,
    pub template: StructureTemplate,
    pub objective: SynthesisObjective,
    pub options: SynthesisOptions,
}

impl SynthesisRequest {
    pub fn new(problem: NscProblem) -> Self {
        Self {
            problem,
            template: StructureTemplate::free(),
            objective: SynthesisObjective::Feasible,
            options: SynthesisOptions::default(),
        }
    }

    pub fn with_template(mut self, template: StructureTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_objective(mut self, objective: SynthesisObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_options(mut self, options: SynthesisOptions) -> Self {
        self.options = options;
        self
    }

    fn check(&self) -> Result<()> {
        match self.objective {
            SynthesisObjective::MaxPassivity { .. } | SynthesisObjective::MinL2Gain if !self.problem.variant.has_exogenous() => Err(
                Error::InvalidArgument("index objectives need exogenous ports (NSC 2 or 4)".into()),
            ),
            SynthesisObjective::SoftTopologyCost if !self.problem.topology.as_ref().is_some_and(|t| t.mode.is_soft()) => {
                Err(Error::InvalidArgument("a soft-topology objective needs a topology in soft or both mode".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisResult {
    pub status: SolveStatus,
    #[serde(skip)]
    pub m: Option<InterconnectionMatrix>,
    pub p: Vec<f64>,
    pub pbar: Vec<f64>,
    pub indices: Indices,
    pub achieved_margin: f64,
    pub required_margin: f64,
    /// Relaxation parameter used for subsystems with `X¹¹ ≺ 0`.
    pub alpha: Option<f64>,
    pub soft_cost: Option<f64>,
    #[serde(skip)]
    pub verification: Option<AnalysisResult>,
    pub message: String,
}

impl SynthesisResult {
    pub fn is_success(&self) -> bool {
        self.status.is_success() && self.m.is_some()
    }

    /// True when the recovered `M` passed the round-trip analysis (or none was requested).
    pub fn verified(&self) -> bool {
        self.verification.as_ref().is_none_or(|v| v.certified())
    }

    fn failed(status: SolveStatus, required_margin: f64, alpha: Option<f64>, message: String) -> Self {
        Self {
            status,
            m: None,
            p: vec![],
            pbar: vec![],
            indices: Indices::default(),
            achieved_margin: f64::NAN,
            required_margin,
            alpha,
            soft_cost: None,
            verification: None,
            message,
        }
    }
}

/// Maps `L`-form blocks back to the interconnection: input rows of agent `i`
/// are multiplied by `(p_i X_i¹¹)⁻¹` (the same for plants with `p̄_i`),
/// performance rows are taken as they are.
pub fn recover_interconnection(problem: &NscProblem, l: &InterconnectionMatrix, p: &[f64], pbar: &[f64]) -> Result<InterconnectionMatrix> {
    let layout = problem.layout();
    if l.layout != layout {
        return Err(Error::Dimension("L blocks do not match the problem's ports".into()));
    }
    let mut data = l.full().clone();
    for r in [RowGroup::Input, RowGroup::PlantInput] {
        if !problem.variant.row_groups().contains(&r) {
            continue;
        }
        let (profiles, scales, what) = match r {
            RowGroup::Input => (&problem.subsystems, p, "subsystem"),
            _ => (&problem.plants, pbar, "plant"),
        };
        if scales.len() != profiles.len() {
            return Err(Error::Dimension(format!("expected {} {what} multipliers, got {}", profiles.len(), scales.len())));
        }
        for (i, prof) in profiles.iter().enumerate() {
            let d = layout.row_dims(r)[i];
            if d == 0 {
                continue;
            }
            let scaled = &prof.certificate.x11 * scales[i];
            let lu = scaled.clone().lu();
            if !(scales[i] > 0.0) || !lu.is_invertible() {
                return Err(Error::Singular(format!("{what} {i}: scaled X11 block is singular (multiplier {})", scales[i])));
            }
            let start = layout.row_group_offset(r) + layout.row_agent_offset(r, i);
            let slab = data.rows(start, d).into_owned();
            let solved = lu.solve(&slab).ok_or_else(|| Error::Singular(format!("{what} {i}: recovery solve failed")))?;
            data.rows_mut(start, d).copy_from(&solved);
        }
    }
    InterconnectionMatrix::from_full(problem.variant, layout, data)
}

fn spec_mode(request: &SynthesisRequest) -> Result<SpecMode> {
    let problem = &request.problem;
    match request.objective {
        SynthesisObjective::MaxPassivity { c1, c2 } => Ok(SpecMode::MaxPassivity { c1, c2 }),
        SynthesisObjective::MinL2Gain => Ok(SpecMode::MinL2Gain),
        _ if problem.variant.has_exogenous() => problem
            .spec
            .clone()
            .map(SpecMode::Fixed)
            .ok_or_else(|| Error::InvalidProblem("a supply specification Y is required".into())),
        _ => Ok(SpecMode::None),
    }
}

/// The problem as handed to the frame builder: an optimized specification is
/// replaced by a placeholder so that structural validation passes.
fn frame_problem(request: &SynthesisRequest, spec: &SpecMode) -> NscProblem {
    let mut problem = request.problem.clone();
    if matches!(spec, SpecMode::MinL2Gain | SpecMode::MaxPassivity { .. }) {
        problem.spec = Some(placeholder_spec(&problem));
    }
    problem
}

fn sources(request: &SynthesisRequest) -> Result<BTreeMap<(RowGroup, ColGroup), BlockSource>> {
    let problem = &request.problem;
    let fixed = request.template.fixed_values(problem.variant, &problem.layout())?;
    let mut out = BTreeMap::new();
    for r in problem.variant.row_groups() {
        for c in problem.variant.col_groups() {
            let src = fixed.get(&(r, c)).cloned().map(BlockSource::Fixed).unwrap_or(BlockSource::Free);
            out.insert((r, c), src);
        }
    }
    Ok(out)
}

/// Soft weight of every free scalar. With `prior` multipliers the input-side
/// weights are divided by `p_i · mean(diag X_i¹¹)` so that the cost tracks `M`.
fn soft_weights(request: &SynthesisRequest, frame: &Frame, prior: Option<(&[f64], &[f64])>) -> Vec<(ScalarRef, f64)> {
    let Some(topology) = request.problem.topology.as_ref().filter(|t| t.mode.is_soft()) else {
        return vec![];
    };
    let terms = apply_topology(topology, &frame.layout, &frame.blocks).soft_terms;
    let Some((p, pbar)) = prior else {
        return terms;
    };
    let mut row_scale: BTreeMap<ScalarRef, f64> = BTreeMap::new();
    for ((r, _), var) in &frame.blocks {
        let (profiles, scales) = match r {
            RowGroup::Input => (&request.problem.subsystems, p),
            RowGroup::PlantInput => (&request.problem.plants, pbar),
            RowGroup::Performance => continue,
        };
        let owners = frame.layout.row_owners(*r);
        for (a, i) in owners.iter().enumerate() {
            let x11 = &profiles[*i].certificate.x11;
            let mean = x11.diagonal().mean().abs().max(f64::MIN_POSITIVE);
            for b in 0..var.cols {
                row_scale.insert(var.at(a, b), 1.0 / (scales[*i] * mean).max(1e-12));
            }
        }
    }
    terms
        .into_iter()
        .map(|(s, w)| (s, w * row_scale.get(&s).copied().unwrap_or(1.0)))
        .collect()
}

struct Attempt {
    frame: Frame,
    solution: SdpSolution,
    soft: Option<crate::sdp::Var>,
}

fn attempt(request: &SynthesisRequest, spec: &SpecMode, alpha: f64, prior: Option<(&[f64], &[f64])>) -> Result<Attempt> {
    let opts = &request.options;
    let problem = frame_problem(request, spec);
    let frame_opts = FrameOptions {
        margin: opts.margin,
        p_min: opts.p_min,
        normalize: matches!(spec, SpecMode::None),
        alpha,
        nu_floor: Some(0.0),
    };
    let mut frame = build_embedded(&problem, &sources(request)?, spec, &frame_opts)?;
    if let Some(topology) = &request.problem.topology {
        topology.validate(request.problem.agents())?;
        for s in apply_topology(topology, &frame.layout, &frame.blocks).zero_fixes {
            frame.sdp.fix(s, 0.0);
        }
    }
    let weights = soft_weights(request, &frame, prior);
    let soft = add_soft_quadratic_cost(&mut frame.sdp, &weights)?;
    let solution = solve(&frame.sdp, &opts.solver)?;
    Ok(Attempt { frame, solution, soft })
}

fn finish(request: &SynthesisRequest, att: &Attempt, alpha: Option<f64>) -> Result<SynthesisResult> {
    let Attempt { frame, solution: sol, soft } = att;
    let required = frame.sdp.psd_constraints()[frame.lmi].margin;
    if !sol.status.is_success() {
        return Ok(SynthesisResult::failed(sol.status, required, alpha, sol.message.clone()));
    }
    let problem = &request.problem;
    let p: Vec<f64> = frame.p.iter().map(|v| sol.scalar(*v)).collect();
    let pbar: Vec<f64> = frame.pbar.iter().map(|v| sol.scalar(*v)).collect();

    // Assemble L form (fixed blocks scaled into L), recover, then restore fixed blocks verbatim.
    let layout = problem.layout();
    let mut l = InterconnectionMatrix::zeros(problem.variant, layout.clone());
    for ((r, c), var) in &frame.blocks {
        l.set_block(*r, *c, &sol.matrix(*var))?;
    }
    for ((r, c), value) in &frame.fixed {
        let block = match r {
            RowGroup::Performance => value.clone(),
            _ => {
                let (profiles, scales) = if *r == RowGroup::Input { (&problem.subsystems, &p) } else { (&problem.plants, &pbar) };
                let blocks: Vec<DenseMatrix> = profiles
                    .iter()
                    .zip(scales.iter())
                    .map(|(prof, s)| &prof.certificate.x11 * *s)
                    .collect();
                crate::linalg::block_diag(&blocks) * value
            }
        };
        l.set_block(*r, *c, &block)?;
    }
    let mut m = recover_interconnection(problem, &l, &p, &pbar)?;
    for ((r, c), value) in &frame.fixed {
        m.set_block(*r, *c, value)?;
    }

    let mut indices = Indices::default();
    if let Some(g) = frame.gain {
        indices.gamma = Some(sol.scalar(g).max(0.0).sqrt());
    }
    if let (Some(nu), Some(rb)) = (frame.nu, frame.rho_bar) {
        indices.nu = Some(sol.scalar(nu));
        indices.rho = Some(1.0 / sol.scalar(rb));
    }

    let verification = if request.options.verify {
        Some(verify(request, &m, &indices, required)?)
    } else {
        None
    };
    Ok(SynthesisResult {
        status: sol.status,
        m: Some(m),
        p,
        pbar,
        indices,
        achieved_margin: sol.achieved_margin,
        required_margin: required,
        alpha,
        soft_cost: soft.map(|t| sol.scalar(t)),
        verification,
        message: sol.message.clone(),
    })
}

/// Round trip through the analysis: for an optimized specification the
/// achieved indices are turned into the fixed `Y` being checked.
fn verify(request: &SynthesisRequest, m: &InterconnectionMatrix, indices: &Indices, margin: f64) -> Result<AnalysisResult> {
    use crate::dissipativity::{supply_from_kind, DissipativityKind};
    let mut problem = request.problem.clone();
    let layout = problem.layout();
    let (r, l) = (layout.col_size(ColGroup::Exogenous), layout.row_size(RowGroup::Performance));
    let achieved = match request.objective {
        SynthesisObjective::MinL2Gain => indices.gamma.map(|g| DissipativityKind::L2Gain { gamma: g }),
        SynthesisObjective::MaxPassivity { .. } => indices
            .nu
            .zip(indices.rho)
            .map(|(nu, rho)| DissipativityKind::StrictlyPassive { nu, rho }),
        _ => None,
    };
    if let Some(kind) = achieved {
        problem.spec = Some(supply_from_kind(&kind, r, l)?);
    }
    // The optimum sits on the boundary of the strict LMI; the check uses half the margin.
    let opts = AnalysisOptions {
        margin: Some(if achieved_is_optimized(request) { 0.5 * margin } else { margin }),
        p_min: request.options.p_min,
        force_raw: false,
        solver: request.options.solver,
    };
    analyze(&problem, m, &opts)
}

fn achieved_is_optimized(request: &SynthesisRequest) -> bool {
    matches!(request.objective, SynthesisObjective::MinL2Gain | SynthesisObjective::MaxPassivity { .. })
}

fn run_with_alpha(request: &SynthesisRequest, spec: &SpecMode, alpha: f64) -> Result<SynthesisResult> {
    let first = attempt(request, spec, alpha, None)?;
    let reweight = request.options.soft_on_m && request.problem.topology.as_ref().is_some_and(|t| t.mode.is_soft());
    if !reweight || !first.solution.status.is_success() {
        return finish(request, &first, has_negative(request).then_some(alpha));
    }
    let mut best = first;
    for _ in 0..request.options.reweight_passes {
        let p: Vec<f64> = best.frame.p.iter().map(|v| best.solution.scalar(*v)).collect();
        let pbar: Vec<f64> = best.frame.pbar.iter().map(|v| best.solution.scalar(*v)).collect();
        let next = attempt(request, spec, alpha, Some((&p, &pbar)))?;
        if !next.solution.status.is_success() {
            break;
        }
        best = next;
    }
    finish(request, &best, has_negative(request).then_some(alpha))
}

fn has_negative(request: &SynthesisRequest) -> bool {
    classify(&request.problem).is_ok_and(|c| c.values().any(|d| *d == Definiteness::Negative))
}

/// Synthesizes an interconnection for any variant. Problems whose `X¹¹`
/// blocks are all positive definite use the embedded LMI directly; otherwise
/// the relaxation path of [`synth_negative_x11`] is taken.
pub fn synthesize(request: &SynthesisRequest) -> Result<SynthesisResult> {
    request.check()?;
    let spec = spec_mode(request)?;
    frame_problem(request, &spec).check()?;
    let classes = classify(&request.problem)?;
    if all_positive(&classes) {
        run_with_alpha(request, &spec, 0.0)
    } else {
        synth_negative_x11(request)
    }
}

fn expect_variant(request: &SynthesisRequest, v: Variant) -> Result<()> {
    if request.problem.variant != v {
        return Err(Error::InvalidArgument(format!(
            "expected an NSC {} problem, got NSC {}",
            v.number(),
            request.problem.variant.number()
        )));
    }
    Ok(())
}

pub fn synth_nsc1(request: &SynthesisRequest) -> Result<SynthesisResult> {
    expect_variant(request, Variant::Nsc1)?;
    synthesize(request)
}

pub fn synth_nsc2(request: &SynthesisRequest) -> Result<SynthesisResult> {
    expect_variant(request, Variant::Nsc2)?;
    synthesize(request)
}

pub fn synth_nsc3(request: &SynthesisRequest) -> Result<SynthesisResult> {
    expect_variant(request, Variant::Nsc3)?;
    synthesize(request)
}

pub fn synth_nsc4(request: &SynthesisRequest) -> Result<SynthesisResult> {
    expect_variant(request, Variant::Nsc4)?;
    synthesize(request)
}

/// Index-optimal synthesis; the request's objective must be `MaxPassivity` or `MinL2Gain`.
pub fn synth_optimal(request: &SynthesisRequest) -> Result<SynthesisResult> {
    if !achieved_is_optimized(request) {
        return Err(Error::InvalidArgument("optimal synthesis needs a MaxPassivity or MinL2Gain objective".into()));
    }
    synthesize(request)
}

/// Relaxation magnitudes tried when no `α` is given: `10^(k/2)` for `k = −12..=12`.
pub fn alpha_grid() -> Vec<f64> {
    let mags: Vec<f64> = (-12..=12).map(|k| 10f64.powf(k as f64 / 2.0)).collect();
    let mut out = vec![0.0];
    for s in [1.0, -1.0] {
        out.extend(mags.iter().map(|m| s * m));
    }
    out
}

/// Synthesis for subsystems whose `X¹¹` is negative definite. Their
/// quadratic term is bounded below through a fixed `α`; the LMI is affine
/// for each `α`, and without a given value the grid of [`alpha_grid`] is
/// searched concurrently, keeping the most strictly feasible candidate.
pub fn synth_negative_x11(request: &SynthesisRequest) -> Result<SynthesisResult> {
    request.check()?;
    let spec = spec_mode(request)?;
    frame_problem(request, &spec).check()?;
    if let Some(alpha) = request.options.alpha {
        return run_with_alpha(request, &spec, alpha);
    }
    let zero = run_with_alpha(request, &spec, 0.0)?;
    if zero.is_success() && zero.verified() {
        return Ok(zero);
    }
    let grid = alpha_grid();
    let candidates: Vec<Result<SynthesisResult>> = grid[1..].par_iter().map(|a| run_with_alpha(request, &spec, *a)).collect();
    let mut best: Option<SynthesisResult> = None;
    for cand in candidates {
        let cand = cand?;
        if !(cand.is_success() && cand.verified()) {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => score(&cand, request) > score(b, request),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.unwrap_or_else(|| {
        SynthesisResult::failed(
            SolveStatus::Infeasible,
            zero.required_margin,
            None,
            format!("no relaxation parameter in the {}-point grid gives a feasible LMI", grid.len()),
        )
    }))
}

/// Ranking of grid candidates: objective value first for optimizing requests,
/// strict-feasibility margin otherwise.
fn score(r: &SynthesisResult, request: &SynthesisRequest) -> f64 {
    match request.objective {
        SynthesisObjective::MinL2Gain => -r.indices.gamma.unwrap_or(f64::INFINITY),
        SynthesisObjective::MaxPassivity { c1, c2 } => {
            c1 * r.indices.nu.unwrap_or(f64::NEG_INFINITY) - c2 / r.indices.rho.unwrap_or(f64::NAN)
        }
        SynthesisObjective::SoftTopologyCost => -r.soft_cost.unwrap_or(f64::INFINITY),
        SynthesisObjective::Feasible => r.achieved_margin,
    }
}
