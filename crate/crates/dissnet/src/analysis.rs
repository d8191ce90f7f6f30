//! Centralized certification of a given interconnection, and estimation of the
//! network's dissipativity indices.
//!
//! With `M` fixed the embedded synthesis LMI is affine in the multipliers
//! alone (`L = X_p¹¹M`), which is the form used whenever every `X¹¹` is
//! positive definite. Otherwise the raw quadratic condition is solved
//! directly; it is linear in the multipliers for a fixed `M` and needs no sign
//! assumption.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, DenseMatrix};
use crate::lmi::{all_positive, build_embedded, build_raw, classify, fixed_sources, Frame, FrameOptions, SpecMode};
use crate::nsc::{InterconnectionMatrix, NscProblem, Variant};
use crate::sdp::{solve, Assignment, SdpSolution, SolveOptions, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Certified,
    NotCertified,
}

/// Which LMI family produced the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisPath {
    Embedded,
    Raw,
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    /// Strictness margin of the LMI; `None` uses a margin relative to its constant part.
    pub margin: Option<f64>,
    pub p_min: f64,
    /// Force the raw quadratic form even when the embedded one applies.
    pub force_raw: bool,
    pub solver: SolveOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            margin: None,
            p_min: 1e-6,
            force_raw: false,
            solver: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisResult {
    pub verdict: Verdict,
    pub status: SolveStatus,
    pub path: AnalysisPath,
    pub p: Vec<f64>,
    pub pbar: Vec<f64>,
    /// Smallest eigenvalue of the LMI at the returned multipliers.
    pub achieved_margin: f64,
    pub required_margin: f64,
    #[serde(skip)]
    pub lmi: Option<DenseMatrix>,
    pub message: String,
}

impl AnalysisResult {
    pub fn certified(&self) -> bool {
        self.verdict == Verdict::Certified
    }
}

/// Dissipativity indices of the closed network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Indices {
    pub nu: Option<f64>,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
}

/// What [`estimate_indices`] optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexMode {
    /// Maximize `c1 ν − c2/ρ`.
    MaxPassivity { c1: f64, c2: f64 },
    /// Minimize `γ`.
    MinL2Gain,
}

fn fixed_spec(problem: &NscProblem) -> Result<SpecMode> {
    if problem.variant.has_exogenous() {
        problem
            .spec
            .clone()
            .map(SpecMode::Fixed)
            .ok_or_else(|| Error::InvalidProblem("a supply specification Y is required".into()))
    } else {
        Ok(SpecMode::None)
    }
}

fn build_frame(problem: &NscProblem, m: &InterconnectionMatrix, spec: &SpecMode, opts: &AnalysisOptions, nu_floor: Option<f64>) -> Result<(Frame, AnalysisPath)> {
    if m.variant != problem.variant {
        return Err(Error::InvalidArgument(format!(
            "interconnection is for NSC {} but the problem is NSC {}",
            m.variant.number(),
            problem.variant.number()
        )));
    }
    if m.layout != problem.layout() {
        return Err(Error::Dimension("interconnection matrix does not match the problem's ports".into()));
    }
    let frame_opts = FrameOptions {
        margin: opts.margin,
        p_min: opts.p_min,
        normalize: matches!(spec, SpecMode::None),
        alpha: 0.0,
        nu_floor,
    };
    problem.check()?;
    let classes = classify(problem)?;
    if all_positive(&classes) && !opts.force_raw {
        Ok((build_embedded(problem, &fixed_sources(m), spec, &frame_opts)?, AnalysisPath::Embedded))
    } else {
        Ok((build_raw(problem, m, spec, &frame_opts)?, AnalysisPath::Raw))
    }
}

fn to_result(frame: &Frame, sol: &SdpSolution, path: AnalysisPath) -> AnalysisResult {
    let ok = sol.status.is_success();
    let lmi = ok.then(|| frame.sdp.evaluate_constraint(frame.lmi, &sol.assignment).ok()).flatten();
    AnalysisResult {
        verdict: if ok { Verdict::Certified } else { Verdict::NotCertified },
        status: sol.status,
        path,
        p: if ok { frame.p.iter().map(|v| sol.scalar(*v)).collect() } else { vec![] },
        pbar: if ok { frame.pbar.iter().map(|v| sol.scalar(*v)).collect() } else { vec![] },
        achieved_margin: sol.achieved_margin,
        required_margin: frame.sdp.psd_constraints()[frame.lmi].margin,
        lmi,
        message: sol.message.clone(),
    }
}

/// Certifies stability (NSC 1, 3) or `Y`-dissipativity (NSC 2, 4) of a given
/// interconnection. The test is sufficient only: `NotCertified` does not
/// prove instability.
pub fn analyze(problem: &NscProblem, m: &InterconnectionMatrix, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    let spec = fixed_spec(problem)?;
    let (frame, path) = build_frame(problem, m, &spec, opts, None)?;
    let sol = solve(&frame.sdp, &opts.solver)?;
    Ok(to_result(&frame, &sol, path))
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

pub fn analyze_nsc1(problem: &NscProblem, m: &InterconnectionMatrix, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    expect_variant(problem, Variant::Nsc1)?;
    analyze(problem, m, opts)
}

pub fn analyze_nsc2(problem: &NscProblem, m: &InterconnectionMatrix, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    expect_variant(problem, Variant::Nsc2)?;
    analyze(problem, m, opts)
}

pub fn analyze_nsc3(problem: &NscProblem, m: &InterconnectionMatrix, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    expect_variant(problem, Variant::Nsc3)?;
    analyze(problem, m, opts)
}

pub fn analyze_nsc4(problem: &NscProblem, m: &InterconnectionMatrix, opts: &AnalysisOptions) -> Result<AnalysisResult> {
    expect_variant(problem, Variant::Nsc4)?;
    analyze(problem, m, opts)
}

/// One LMI form evaluated at given multipliers.
#[derive(Debug, Clone, Serialize)]
pub struct FixedEvaluation {
    pub path: AnalysisPath,
    pub min_eigenvalue: f64,
    #[serde(skip)]
    pub lmi: DenseMatrix,
}

impl FixedEvaluation {
    pub fn certified(&self) -> bool {
        self.min_eigenvalue > 0.0
    }
}

/// Evaluates the raw or the embedded network LMI at fixed `(p, p̄, M)`
/// without solving anything. The embedded form needs every `X¹¹ ≻ 0`.
pub fn evaluate_fixed(problem: &NscProblem, m: &InterconnectionMatrix, p: &[f64], pbar: &[f64], path: AnalysisPath) -> Result<FixedEvaluation> {
    if p.len() != problem.subsystems.len() || pbar.len() != problem.plants.len() {
        return Err(Error::Dimension("one multiplier per subsystem and plant is required".into()));
    }
    let opts = AnalysisOptions {
        force_raw: path == AnalysisPath::Raw,
        ..Default::default()
    };
    let spec = fixed_spec(problem)?;
    let (frame, built) = build_frame(problem, m, &spec, &opts, None)?;
    if built != path {
        return Err(Error::InvalidProblem("the embedded form needs every X11 block positive definite".into()));
    }
    let mut values = Assignment::new();
    for (var, v) in frame.p.iter().zip(p).chain(frame.pbar.iter().zip(pbar)) {
        values.set_scalar(*var, *v);
    }
    let lmi = frame.sdp.evaluate_constraint(frame.lmi, &values)?;
    Ok(FixedEvaluation {
        path,
        min_eigenvalue: min_eigenvalue(&lmi),
        lmi,
    })
}

/// Optimizes the network's indices over the analysis LMI with `M` fixed.
/// Any specification stored in the problem is ignored.
pub fn estimate_indices(problem: &NscProblem, m: &InterconnectionMatrix, mode: IndexMode, opts: &AnalysisOptions) -> Result<(Indices, AnalysisResult)> {
    if !problem.variant.has_exogenous() {
        return Err(Error::InvalidArgument("index estimation needs exogenous ports (NSC 2 or 4)".into()));
    }
    let spec = match mode {
        IndexMode::MaxPassivity { c1, c2 } => SpecMode::MaxPassivity { c1, c2 },
        IndexMode::MinL2Gain => SpecMode::MinL2Gain,
    };
    let mut stripped = problem.clone();
    stripped.spec = Some(placeholder_spec(problem));
    let (frame, path) = build_frame(&stripped, m, &spec, opts, None)?;
    let sol = solve(&frame.sdp, &opts.solver)?;
    let result = to_result(&frame, &sol, path);
    let mut indices = Indices::default();
    if result.certified() {
        if let Some(g) = frame.gain {
            indices.gamma = Some(sol.scalar(g).max(0.0).sqrt());
        }
        if let (Some(nu), Some(rb)) = (frame.nu, frame.rho_bar) {
            indices.nu = Some(sol.scalar(nu));
            indices.rho = Some(1.0 / sol.scalar(rb));
        }
    }
    Ok((indices, result))
}

/// A well-formed `Y` of the right size, used only to pass validation when the
/// specification itself is being optimized.
pub(crate) fn placeholder_spec(problem: &NscProblem) -> crate::dissipativity::SupplyMatrix {
    let layout = problem.layout();
    let r = layout.col_size(crate::nsc::ColGroup::Exogenous);
    let l = layout.row_size(crate::nsc::RowGroup::Performance);
    crate::dissipativity::SupplyMatrix::new(
        DenseMatrix::identity(r, r),
        DenseMatrix::zeros(r, l),
        DenseMatrix::zeros(l, r),
        -DenseMatrix::identity(l, l),
    )
    .expect("well-formed placeholder")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::{supply_from_kind, DissipativityKind, SubsystemProfile};
    use crate::nsc::{ColGroup, RowGroup};

    fn l2(gamma: f64) -> SubsystemProfile {
        SubsystemProfile::from_kind(0, &DissipativityKind::L2Gain { gamma }, 1, 1).unwrap()
    }

    fn scalar_loop(gamma: f64, m: f64) -> (NscProblem, InterconnectionMatrix) {
        let problem = NscProblem::nsc1(vec![l2(gamma)]);
        let mut mm = InterconnectionMatrix::zeros(Variant::Nsc1, problem.layout());
        mm.set_block(RowGroup::Input, ColGroup::Output, &DenseMatrix::from_element(1, 1, m)).unwrap();
        (problem, mm)
    }

    #[test]
    fn scalar_small_gain() {
        let (p, m) = scalar_loop(2.0, 0.4);
        assert!(analyze_nsc1(&p, &m, &AnalysisOptions::default()).unwrap().certified());
        let (p, m) = scalar_loop(2.0, 0.6);
        assert!(!analyze_nsc1(&p, &m, &AnalysisOptions::default()).unwrap().certified());
    }

    #[test]
    fn raw_path_agrees_on_scalar_loop() {
        let opts = AnalysisOptions {
            force_raw: true,
            ..Default::default()
        };
        let (p, m) = scalar_loop(2.0, 0.4);
        let r = analyze_nsc1(&p, &m, &opts).unwrap();
        assert!(r.certified());
        assert_eq!(r.path, AnalysisPath::Raw);
        let (p, m) = scalar_loop(2.0, 0.6);
        assert!(!analyze_nsc1(&p, &m, &opts).unwrap().certified());
    }

    #[test]
    fn decoupled_l2_subsystems_are_stable() {
        let problem = NscProblem::nsc1(vec![l2(3.0), l2(0.5), l2(10.0)]);
        let m = InterconnectionMatrix::zeros(Variant::Nsc1, problem.layout());
        let r = analyze_nsc1(&problem, &m, &AnalysisOptions::default()).unwrap();
        assert!(r.certified());
        assert!((r.p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_map_is_dissipative() {
        let y = supply_from_kind(&DissipativityKind::L2Gain { gamma: 1.0 }, 1, 1).unwrap();
        let problem = NscProblem {
            variant: Variant::Nsc2,
            subsystems: vec![l2(2.0)],
            plants: vec![],
            spec: Some(y),
            exogenous_dims: vec![1],
            performance_dims: vec![1],
            topology: None,
        };
        let m = InterconnectionMatrix::zeros(Variant::Nsc2, problem.layout());
        assert!(analyze_nsc2(&problem, &m, &AnalysisOptions::default()).unwrap().certified());
    }

    #[test]
    fn passive_pass_through_indices() {
        // u = w and z = y around a strictly passive subsystem: its own indices
        // are feasible, so the optimum is at least as good.
        let sub = SubsystemProfile::from_kind(0, &DissipativityKind::StrictlyPassive { nu: 0.5, rho: 0.25 }, 1, 1).unwrap();
        let problem = NscProblem {
            variant: Variant::Nsc2,
            subsystems: vec![sub],
            plants: vec![],
            spec: None,
            exogenous_dims: vec![1],
            performance_dims: vec![1],
            topology: None,
        };
        let data = DenseMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let m = InterconnectionMatrix::from_full(Variant::Nsc2, problem.layout(), data).unwrap();
        let (idx, r) = estimate_indices(&problem, &m, IndexMode::MaxPassivity { c1: 1.0, c2: 1.0 }, &AnalysisOptions::default()).unwrap();
        assert!(r.certified(), "{}", r.message);
        assert_eq!(r.path, AnalysisPath::Raw);
        let score = idx.nu.unwrap() - 1.0 / idx.rho.unwrap();
        assert!(score >= 0.5 - 4.0 - 1e-4, "{idx:?}");
    }

    #[test]
    fn l2_gain_of_scaled_subsystem() {
        // u = w, z = k y with an L2G(γ) subsystem: gain k γ.
        let problem = NscProblem {
            variant: Variant::Nsc2,
            subsystems: vec![l2(2.0)],
            plants: vec![],
            spec: None,
            exogenous_dims: vec![1],
            performance_dims: vec![1],
            topology: None,
        };
        let data = DenseMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        let m = InterconnectionMatrix::from_full(Variant::Nsc2, problem.layout(), data).unwrap();
        let (idx, r) = estimate_indices(&problem, &m, IndexMode::MinL2Gain, &AnalysisOptions::default()).unwrap();
        assert!(r.certified());
        assert!((idx.gamma.unwrap() - 1.0).abs() < 1e-3, "{idx:?}");
    }
}
