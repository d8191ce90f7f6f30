//! Networked system configurations (NSC 1–4): subsystem and plant lists,
//! port layout, interconnection matrices, topology constraints and standard
//! structure templates.
//!
//! All four configurations share one layout. Interconnection rows are grouped
//! as subsystem inputs `u`, plant inputs `ū` and performance outputs `z`;
//! columns as subsystem outputs `y`, plant outputs `ȳ` and exogenous inputs
//! `w`. A configuration without plants or exogenous ports simply has those
//! groups empty, so NSC 1 is NSC 4 with `ū, ȳ, w, z` of size zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dissipativity::{check_assumption1, check_assumption2, AssumptionReport, SubsystemProfile, SupplyMatrix};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sdp::{ScalarRef, Var};

/// Which of the four networked configurations a problem describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Variant {
    /// `u = M y`
    Nsc1,
    /// `[u; z] = M [y; w]`
    Nsc2,
    /// `[u; ū] = M [y; ȳ]`
    Nsc3,
    /// `[u; ū; z] = M [y; ȳ; w]`
    Nsc4,
}

impl Variant {
    pub fn number(self) -> u8 {
        match self {
            Variant::Nsc1 => 1,
            Variant::Nsc2 => 2,
            Variant::Nsc3 => 3,
            Variant::Nsc4 => 4,
        }
    }

    pub fn has_plants(self) -> bool {
        matches!(self, Variant::Nsc3 | Variant::Nsc4)
    }

    pub fn has_exogenous(self) -> bool {
        matches!(self, Variant::Nsc2 | Variant::Nsc4)
    }

    pub fn row_groups(self) -> Vec<RowGroup> {
        let mut out = vec![RowGroup::Input];
        if self.has_plants() {
            out.push(RowGroup::PlantInput);
        }
        if self.has_exogenous() {
            out.push(RowGroup::Performance);
        }
        out
    }

    pub fn col_groups(self) -> Vec<ColGroup> {
        let mut out = vec![ColGroup::Output];
        if self.has_plants() {
            out.push(ColGroup::PlantOutput);
        }
        if self.has_exogenous() {
            out.push(ColGroup::Exogenous);
        }
        out
    }
}

impl TryFrom<u8> for Variant {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Variant::Nsc1),
            2 => Ok(Variant::Nsc2),
            3 => Ok(Variant::Nsc3),
            4 => Ok(Variant::Nsc4),
            other => Err(format!("variant must be 1, 2, 3 or 4, got {other}")),
        }
    }
}

impl From<Variant> for u8 {
    fn from(v: Variant) -> u8 {
        v.number()
    }
}

/// Row groups of an interconnection matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowGroup {
    /// `u`
    Input,
    /// `ū`
    PlantInput,
    /// `z`
    Performance,
}

/// Column groups of an interconnection matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColGroup {
    /// `y`
    Output,
    /// `ȳ`
    PlantOutput,
    /// `w`
    Exogenous,
}

pub const ROW_GROUPS: [RowGroup; 3] = [RowGroup::Input, RowGroup::PlantInput, RowGroup::Performance];
pub const COL_GROUPS: [ColGroup; 3] = [ColGroup::Output, ColGroup::PlantOutput, ColGroup::Exogenous];

/// Conventional short name of a block, e.g. `uy`, `ubarybar`, `zw`.
pub fn block_name(r: RowGroup, c: ColGroup) -> &'static str {
    use ColGroup::*;
    use RowGroup::*;
    match (r, c) {
        (Input, Output) => "uy",
        (Input, PlantOutput) => "uybar",
        (Input, Exogenous) => "uw",
        (PlantInput, Output) => "ubary",
        (PlantInput, PlantOutput) => "ubarybar",
        (PlantInput, Exogenous) => "ubarw",
        (Performance, Output) => "zy",
        (Performance, PlantOutput) => "zybar",
        (Performance, Exogenous) => "zw",
    }
}

/// Inverse of [`block_name`].
pub fn parse_block_name(name: &str) -> Option<(RowGroup, ColGroup)> {
    ROW_GROUPS
        .iter()
        .flat_map(|r| COL_GROUPS.iter().map(move |c| (*r, *c)))
        .find(|(r, c)| block_name(*r, *c) == name)
}

/// Per-agent port dimensions. Agent `i` owns `Σ_i`, its twin plant `Σ̄_i`
/// (if any) and the exogenous ports `w_i`, `z_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PortLayout {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub plant_input: Vec<usize>,
    pub plant_output: Vec<usize>,
    pub exogenous: Vec<usize>,
    pub performance: Vec<usize>,
}

impl PortLayout {
    pub fn agents(&self) -> usize {
        self.input.len()
    }

    pub fn row_dims(&self, r: RowGroup) -> &[usize] {
        match r {
            RowGroup::Input => &self.input,
            RowGroup::PlantInput => &self.plant_input,
            RowGroup::Performance => &self.performance,
        }
    }

    pub fn col_dims(&self, c: ColGroup) -> &[usize] {
        match c {
            ColGroup::Output => &self.output,
            ColGroup::PlantOutput => &self.plant_output,
            ColGroup::Exogenous => &self.exogenous,
        }
    }

    pub fn row_size(&self, r: RowGroup) -> usize {
        self.row_dims(r).iter().sum()
    }

    pub fn col_size(&self, c: ColGroup) -> usize {
        self.col_dims(c).iter().sum()
    }

    pub fn total_rows(&self) -> usize {
        ROW_GROUPS.iter().map(|r| self.row_size(*r)).sum()
    }

    pub fn total_cols(&self) -> usize {
        COL_GROUPS.iter().map(|c| self.col_size(*c)).sum()
    }

    /// Offset of a row group inside the full interconnection matrix.
    pub fn row_group_offset(&self, r: RowGroup) -> usize {
        ROW_GROUPS.iter().take_while(|g| **g != r).map(|g| self.row_size(*g)).sum()
    }

    pub fn col_group_offset(&self, c: ColGroup) -> usize {
        COL_GROUPS.iter().take_while(|g| **g != c).map(|g| self.col_size(*g)).sum()
    }

    /// Offset of agent `i`'s rows within row group `r` (not the full matrix).
    pub fn row_agent_offset(&self, r: RowGroup, i: usize) -> usize {
        self.row_dims(r)[..i].iter().sum()
    }

    pub fn col_agent_offset(&self, c: ColGroup, j: usize) -> usize {
        self.col_dims(c)[..j].iter().sum()
    }

    /// Owning agent of each row of group `r`.
    pub fn row_owners(&self, r: RowGroup) -> Vec<usize> {
        owners(self.row_dims(r))
    }

    pub fn col_owners(&self, c: ColGroup) -> Vec<usize> {
        owners(self.col_dims(c))
    }
}

fn owners(dims: &[usize]) -> Vec<usize> {
    dims.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, *d)).collect()
}

/// How topology information constrains synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyMode {
    Hard,
    Soft,
    Both,
}

impl TopologyMode {
    pub fn is_hard(self) -> bool {
        matches!(self, TopologyMode::Hard | TopologyMode::Both)
    }

    pub fn is_soft(self) -> bool {
        matches!(self, TopologyMode::Soft | TopologyMode::Both)
    }
}

/// Communication graph between agents plus link costs.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub adjacency: DenseMatrix,
    pub cost: DenseMatrix,
    pub mode: TopologyMode,
}

impl Topology {
    pub fn new(adjacency: DenseMatrix, cost: DenseMatrix, mode: TopologyMode) -> Result<Self> {
        let t = Self { adjacency, cost, mode };
        t.validate(t.adjacency.nrows())?;
        Ok(t)
    }

    /// Complete graph with unit costs.
    pub fn complete(n: usize, mode: TopologyMode) -> Self {
        Self {
            adjacency: DenseMatrix::from_element(n, n, 1.0),
            cost: DenseMatrix::from_element(n, n, 1.0),
            mode,
        }
    }

    pub fn agents(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Whether agents `i` and `j` may be coupled. Self-loops are always allowed.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        i == j || self.adjacency[(i, j)] != 0.0
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let a = &self.adjacency;
        if a.nrows() != n || a.ncols() != n || self.cost.nrows() != n || self.cost.ncols() != n {
            return Err(Error::Dimension(format!("topology matrices must be {n}x{n}")));
        }
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidArgument(format!("adjacency entry ({i},{j}) = {v} is not 0/1")));
                }
                if v != a[(j, i)] {
                    return Err(Error::InvalidArgument(format!("adjacency is not symmetric at ({i},{j})")));
                }
                if !(self.cost[(i, j)] >= 0.0) {
                    return Err(Error::InvalidArgument(format!("cost entry ({i},{j}) must be non-negative")));
                }
            }
        }
        Ok(())
    }
}

/// Content of a block in a structure template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSpec {
    Zero,
    Identity,
    NegIdentity,
    Free,
}

impl BlockSpec {
    /// The fixed value of a non-free block.
    pub fn value(self, rows: usize, cols: usize) -> Result<Option<DenseMatrix>> {
        let eye = |s: f64| {
            if rows != cols {
                Err(Error::Dimension(format!("identity block must be square, got {rows}x{cols}")))
            } else {
                Ok(Some(DenseMatrix::identity(rows, cols) * s))
            }
        };
        match self {
            BlockSpec::Zero => Ok(Some(DenseMatrix::zeros(rows, cols))),
            BlockSpec::Identity => eye(1.0),
            BlockSpec::NegIdentity => eye(-1.0),
            BlockSpec::Free => Ok(None),
        }
    }
}

/// Standard control configurations expressed as NSC 4 block formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Series,
    Parallel,
    Feedback,
    FeedbackReconfiguration,
    ApproximateSimulation,
    Custom,
}

/// Which blocks of `M` are fixed, and to what. Blocks absent from the map are free.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureTemplate {
    pub name: TemplateName,
    pub fixed_blocks: BTreeMap<(RowGroup, ColGroup), BlockSpec>,
}

impl StructureTemplate {
    /// Every block free.
    pub fn free() -> Self {
        Self {
            name: TemplateName::Custom,
            fixed_blocks: BTreeMap::new(),
        }
    }

    pub fn custom(blocks: BTreeMap<(RowGroup, ColGroup), BlockSpec>) -> Self {
        Self {
            name: TemplateName::Custom,
            fixed_blocks: blocks,
        }
    }

    pub fn spec(&self, r: RowGroup, c: ColGroup) -> BlockSpec {
        self.fixed_blocks.get(&(r, c)).copied().unwrap_or(BlockSpec::Free)
    }

    pub fn free_blocks(&self, variant: Variant) -> Vec<(RowGroup, ColGroup)> {
        variant
            .row_groups()
            .into_iter()
            .flat_map(|r| variant.col_groups().into_iter().map(move |c| (r, c)))
            .filter(|(r, c)| self.spec(*r, *c) == BlockSpec::Free)
            .collect()
    }

    /// Fixed value for every non-free block, checked against the layout.
    pub fn fixed_values(&self, variant: Variant, layout: &PortLayout) -> Result<BTreeMap<(RowGroup, ColGroup), DenseMatrix>> {
        let mut out = BTreeMap::new();
        for r in variant.row_groups() {
            for c in variant.col_groups() {
                if let Some(v) = self.spec(r, c).value(layout.row_size(r), layout.col_size(c))? {
                    out.insert((r, c), v);
                }
            }
        }
        Ok(out)
    }
}

/// Builds a named template. The standard configurations are NSC 4 formats;
/// `Custom` yields the all-free template.
pub fn template_mask(name: TemplateName, variant: Variant, layout: &PortLayout) -> Result<StructureTemplate> {
    use BlockSpec::{Free as F, Identity as I, NegIdentity as NI, Zero as O};
    if name == TemplateName::Custom {
        return Ok(StructureTemplate::free());
    }
    if variant != Variant::Nsc4 {
        return Err(Error::InvalidArgument(format!(
            "template {name:?} describes an NSC 4 layout, not NSC {}",
            variant.number()
        )));
    }
    // Rows u, ū, z; columns y, ȳ, w.
    let rows: [[BlockSpec; 3]; 3] = match name {
        TemplateName::Series => [[O, F, I], [F, O, O], [O, F, O]],
        TemplateName::Parallel => [[O, O, I], [O, O, F], [I, F, O]],
        TemplateName::Feedback => [[O, F, I], [F, O, O], [I, O, O]],
        TemplateName::FeedbackReconfiguration => [[F, F, I], [F, F, O], [I, O, O]],
        TemplateName::ApproximateSimulation => [[O, O, I], [F, F, F], [I, NI, O]],
        TemplateName::Custom => unreachable!(),
    };
    let mut fixed = BTreeMap::new();
    for (ri, r) in ROW_GROUPS.iter().enumerate() {
        for (ci, c) in COL_GROUPS.iter().enumerate() {
            let spec = rows[ri][ci];
            if spec != BlockSpec::Free {
                spec.value(layout.row_size(*r), layout.col_size(*c))?;
                fixed.insert((*r, *c), spec);
            }
        }
    }
    Ok(StructureTemplate { name, fixed_blocks: fixed })
}

/// A static interconnection matrix over the full port layout.
#[derive(Debug, Clone, PartialEq)]
pub struct InterconnectionMatrix {
    pub variant: Variant,
    pub layout: PortLayout,
    data: DenseMatrix,
}

impl InterconnectionMatrix {
    pub fn zeros(variant: Variant, layout: PortLayout) -> Self {
        let data = DenseMatrix::zeros(layout.total_rows(), layout.total_cols());
        Self { variant, layout, data }
    }

    /// Wraps a full matrix with rows `[u; ū; z]` and columns `[y; ȳ; w]`.
    pub fn from_full(variant: Variant, layout: PortLayout, data: DenseMatrix) -> Result<Self> {
        if data.nrows() != layout.total_rows() || data.ncols() != layout.total_cols() {
            return Err(Error::Dimension(format!(
                "interconnection matrix must be {}x{}, got {}x{}",
                layout.total_rows(),
                layout.total_cols(),
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { variant, layout, data })
    }

    pub fn full(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn block(&self, r: RowGroup, c: ColGroup) -> DenseMatrix {
        let (ro, co) = (self.layout.row_group_offset(r), self.layout.col_group_offset(c));
        self.data
            .view((ro, co), (self.layout.row_size(r), self.layout.col_size(c)))
            .into_owned()
    }

    pub fn set_block(&mut self, r: RowGroup, c: ColGroup, value: &DenseMatrix) -> Result<()> {
        let (rows, cols) = (self.layout.row_size(r), self.layout.col_size(c));
        if value.nrows() != rows || value.ncols() != cols {
            return Err(Error::Dimension(format!(
                "block M_{} must be {rows}x{cols}, got {}x{}",
                block_name(r, c),
                value.nrows(),
                value.ncols()
            )));
        }
        let (ro, co) = (self.layout.row_group_offset(r), self.layout.col_group_offset(c));
        self.data.view_mut((ro, co), (rows, cols)).copy_from(value);
        Ok(())
    }

    /// The `(i, j)` agent sub-block of block `(r, c)`.
    pub fn agent_block(&self, r: RowGroup, c: ColGroup, i: usize, j: usize) -> DenseMatrix {
        let ro = self.layout.row_group_offset(r) + self.layout.row_agent_offset(r, i);
        let co = self.layout.col_group_offset(c) + self.layout.col_agent_offset(c, j);
        self.data
            .view((ro, co), (self.layout.row_dims(r)[i], self.layout.col_dims(c)[j]))
            .into_owned()
    }

    /// Rows of group `r` as a stacked matrix over all columns.
    pub fn row_group(&self, r: RowGroup) -> DenseMatrix {
        self.data
            .rows(self.layout.row_group_offset(r), self.layout.row_size(r))
            .into_owned()
    }

    /// Named non-empty blocks of this variant.
    pub fn named_blocks(&self) -> BTreeMap<String, DenseMatrix> {
        let mut out = BTreeMap::new();
        for r in self.variant.row_groups() {
            for c in self.variant.col_groups() {
                out.insert(block_name(r, c).to_string(), self.block(r, c));
            }
        }
        out
    }

    /// True if every off-diagonal agent block `(i, j)` with no edge is exactly zero.
    pub fn respects(&self, topology: &Topology) -> bool {
        let n = self.layout.agents();
        for r in self.variant.row_groups() {
            for c in self.variant.col_groups() {
                for i in 0..n {
                    for j in 0..n {
                        if !topology.allows(i, j) && self.agent_block(r, c, i, j).iter().any(|v| *v != 0.0) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// A networked system configuration instance.
#[derive(Debug, Clone, PartialEq)]
pub struct NscProblem {
    pub variant: Variant,
    pub subsystems: Vec<SubsystemProfile>,
    /// Twin plants `Σ̄_i` (NSC 3 and 4 only).
    pub plants: Vec<SubsystemProfile>,
    /// Global supply specification `Y` on `(w, z)` (NSC 2 and 4 only).
    pub spec: Option<SupplyMatrix>,
    /// Per-agent `w_i` dimensions.
    pub exogenous_dims: Vec<usize>,
    /// Per-agent `z_i` dimensions.
    pub performance_dims: Vec<usize>,
    pub topology: Option<Topology>,
}

impl NscProblem {
    /// NSC 1 over the given subsystems.
    pub fn nsc1(subsystems: Vec<SubsystemProfile>) -> Self {
        Self {
            variant: Variant::Nsc1,
            subsystems,
            plants: vec![],
            spec: None,
            exogenous_dims: vec![],
            performance_dims: vec![],
            topology: None,
        }
    }

    pub fn agents(&self) -> usize {
        self.subsystems.len()
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = Some(topology);
        self
    }

    pub fn layout(&self) -> PortLayout {
        let n = self.agents();
        let pick = |v: &[usize]| if v.len() == n { v.to_vec() } else { vec![0; n] };
        let plant = |f: fn(&SubsystemProfile) -> usize| {
            if self.plants.len() == n {
                self.plants.iter().map(f).collect()
            } else {
                vec![0; n]
            }
        };
        PortLayout {
            input: self.subsystems.iter().map(|s| s.input_dim).collect(),
            output: self.subsystems.iter().map(|s| s.output_dim).collect(),
            plant_input: plant(|s| s.input_dim),
            plant_output: plant(|s| s.output_dim),
            exogenous: pick(&self.exogenous_dims),
            performance: pick(&self.performance_dims),
        }
    }

    /// Structural check; returns the first violation as an error.
    pub fn check(&self) -> Result<()> {
        let report = validate(self);
        if report.valid {
            Ok(())
        } else {
            Err(Error::InvalidProblem(report.errors.join("; ")))
        }
    }
}

/// Result of [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub errors: Vec<String>,
    pub assumption1: AssumptionReport,
    pub assumption1_plants: Option<AssumptionReport>,
    pub assumption2: Option<AssumptionReport>,
}

/// Dimension closure, twin structure and the assumption sub-reports.
pub fn validate(problem: &NscProblem) -> ValidationReport {
    let mut errors = Vec::new();
    let n = problem.agents();
    let v = problem.variant;
    if n == 0 {
        errors.push("at least one subsystem is required".to_string());
    }
    for s in problem.subsystems.iter().chain(&problem.plants) {
        if let Err(e) = s.validate() {
            errors.push(e.to_string());
        }
    }
    if v.has_plants() {
        if problem.plants.len() != n {
            errors.push(format!(
                "NSC {} needs one plant per subsystem: {} subsystems, {} plants",
                v.number(),
                n,
                problem.plants.len()
            ));
        }
    } else if !problem.plants.is_empty() {
        errors.push(format!("NSC {} has no plants", v.number()));
    }
    if v.has_exogenous() {
        if problem.exogenous_dims.len() != n || problem.performance_dims.len() != n {
            errors.push(format!("exogenous and performance dimensions must list {n} agents"));
        }
        match &problem.spec {
            None => errors.push(format!("NSC {} needs a supply specification Y", v.number())),
            Some(y) => {
                let r: usize = problem.exogenous_dims.iter().sum();
                let l: usize = problem.performance_dims.iter().sum();
                if y.input_dim() != r || y.output_dim() != l {
                    errors.push(format!(
                        "Y must act on (w, z) of sizes ({r}, {l}), got ({}, {})",
                        y.input_dim(),
                        y.output_dim()
                    ));
                }
            }
        }
    } else {
        if problem.exogenous_dims.iter().chain(&problem.performance_dims).any(|d| *d != 0) {
            errors.push(format!("NSC {} has no exogenous ports", v.number()));
        }
        if problem.spec.is_some() {
            errors.push(format!("NSC {} takes no supply specification", v.number()));
        }
    }
    if let Some(t) = &problem.topology {
        if let Err(e) = t.validate(n) {
            errors.push(e.to_string());
        }
    }
    let assumption1 = check_assumption1(&problem.subsystems);
    let assumption1_plants = v.has_plants().then(|| check_assumption1(&problem.plants));
    let assumption2 = problem.spec.as_ref().map(check_assumption2);
    ValidationReport {
        valid: errors.is_empty(),
        errors,
        assumption1,
        assumption1_plants,
        assumption2,
    }
}

/// Constraints a topology imposes on interconnection variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopologyConstraints {
    /// Entries fixed to exactly zero.
    pub zero_fixes: Vec<ScalarRef>,
    /// Weighted entries for the quadratic link cost.
    pub soft_terms: Vec<(ScalarRef, f64)>,
}

/// Translates the topology into zero fixes (hard mode) and weighted cost
/// terms (soft mode) over the free block variables. A variable block for
/// `(r, c)` must span the full block of the layout.
pub fn apply_topology(
    topology: &Topology,
    layout: &PortLayout,
    variables: &BTreeMap<(RowGroup, ColGroup), Var>,
) -> TopologyConstraints {
    let mut out = TopologyConstraints::default();
    for ((r, c), var) in variables {
        let row_owner = layout.row_owners(*r);
        let col_owner = layout.col_owners(*c);
        for (a, i) in row_owner.iter().enumerate() {
            for (b, j) in col_owner.iter().enumerate() {
                let s = var.at(a, b);
                if topology.mode.is_hard() && !topology.allows(*i, *j) {
                    out.zero_fixes.push(s);
                } else if topology.mode.is_soft() {
                    let w = topology.cost[(*i, *j)];
                    if w > 0.0 {
                        out.soft_terms.push((s, w));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::DissipativityKind;
    use crate::sdp::SdpProblem;

    fn siso(kind: DissipativityKind, n: usize) -> Vec<SubsystemProfile> {
        (0..n).map(|i| SubsystemProfile::from_kind(i, &kind, 1, 1).unwrap()).collect()
    }

    fn study_adjacency() -> DenseMatrix {
        DenseMatrix::from_row_slice(
            5,
            5,
            &[
                0., 1., 1., 0., 0., 1., 0., 1., 0., 0., 1., 1., 0., 1., 1., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0.,
            ],
        )
    }

    #[test]
    fn five_siso_nsc1_is_valid() {
        let p = NscProblem::nsc1(siso(DissipativityKind::L2Gain { gamma: 1.0 }, 5));
        let r = validate(&p);
        assert!(r.valid, "{:?}", r.errors);
        assert!(r.assumption1.satisfied);
    }

    #[test]
    fn twin_mismatch_is_invalid() {
        let mut p = NscProblem::nsc1(siso(DissipativityKind::L2Gain { gamma: 1.0 }, 5));
        p.variant = Variant::Nsc3;
        p.plants = siso(DissipativityKind::L2Gain { gamma: 1.0 }, 4);
        assert!(!validate(&p).valid);
    }

    #[test]
    fn wrong_spec_dims_is_invalid() {
        let mut p = NscProblem::nsc1(siso(DissipativityKind::L2Gain { gamma: 1.0 }, 2));
        p.variant = Variant::Nsc2;
        p.exogenous_dims = vec![1, 1];
        p.performance_dims = vec![1, 1];
        p.spec = Some(crate::dissipativity::supply_from_kind(&DissipativityKind::L2Gain { gamma: 1.0 }, 1, 1).unwrap());
        assert!(!validate(&p).valid);
    }

    #[test]
    fn variant_serde_is_numeric() {
        assert_eq!(serde_json::to_string(&Variant::Nsc3).unwrap(), "3");
        assert_eq!(serde_json::from_str::<Variant>("2").unwrap(), Variant::Nsc2);
        assert!(serde_json::from_str::<Variant>("5").is_err());
    }

    fn unit_layout(n: usize) -> PortLayout {
        PortLayout {
            input: vec![1; n],
            output: vec![1; n],
            plant_input: vec![1; n],
            plant_output: vec![1; n],
            exogenous: vec![1; n],
            performance: vec![1; n],
        }
    }

    #[test]
    fn approximate_simulation_leaves_three_free_blocks() {
        let t = template_mask(TemplateName::ApproximateSimulation, Variant::Nsc4, &unit_layout(2)).unwrap();
        let free = t.free_blocks(Variant::Nsc4);
        assert_eq!(
            free,
            vec![
                (RowGroup::PlantInput, ColGroup::Output),
                (RowGroup::PlantInput, ColGroup::PlantOutput),
                (RowGroup::PlantInput, ColGroup::Exogenous)
            ]
        );
        assert_eq!(t.spec(RowGroup::Performance, ColGroup::PlantOutput), BlockSpec::NegIdentity);
    }

    #[test]
    fn custom_template_fixes_nothing() {
        let t = template_mask(TemplateName::Custom, Variant::Nsc4, &unit_layout(2)).unwrap();
        assert_eq!(t.free_blocks(Variant::Nsc4).len(), 9);
    }

    #[test]
    fn feedback_template_blocks() {
        let t = template_mask(TemplateName::Feedback, Variant::Nsc4, &unit_layout(3)).unwrap();
        assert_eq!(t.spec(RowGroup::PlantInput, ColGroup::Output), BlockSpec::Free);
        assert_eq!(t.spec(RowGroup::Input, ColGroup::Exogenous), BlockSpec::Identity);
        assert_eq!(t.spec(RowGroup::Performance, ColGroup::Output), BlockSpec::Identity);
        assert!(template_mask(TemplateName::Feedback, Variant::Nsc2, &unit_layout(3)).is_err());
    }

    #[test]
    fn hard_topology_masks_missing_edges() {
        let topo = Topology::new(study_adjacency(), DenseMatrix::from_element(5, 5, 1.0), TopologyMode::Hard).unwrap();
        let mut sdp = SdpProblem::new();
        let l = sdp.add_matrix("L_uy", 5, 5);
        let layout = NscProblem::nsc1(siso(DissipativityKind::L2Gain { gamma: 1.0 }, 5)).layout();
        let vars = BTreeMap::from([((RowGroup::Input, ColGroup::Output), l)]);
        let c = apply_topology(&topo, &layout, &vars);
        let mut fixed: Vec<(usize, usize)> = c.zero_fixes.iter().map(|s| (s.entry / 5, s.entry % 5)).collect();
        fixed.sort();
        assert_eq!(fixed, vec![(0, 3), (0, 4), (1, 3), (1, 4), (3, 0), (3, 1), (3, 4), (4, 0), (4, 1), (4, 3)]);
        assert!(c.soft_terms.is_empty());
    }

    #[test]
    fn complete_graph_has_no_fixes_and_soft_weights_follow_cost() {
        let mut cost = DenseMatrix::from_element(2, 2, 1.0);
        cost[(0, 0)] = 100.0;
        let topo = Topology::new(DenseMatrix::from_element(2, 2, 1.0), cost, TopologyMode::Soft).unwrap();
        let mut sdp = SdpProblem::new();
        let l = sdp.add_matrix("L_uy", 2, 2);
        let layout = NscProblem::nsc1(siso(DissipativityKind::L2Gain { gamma: 1.0 }, 2)).layout();
        let vars = BTreeMap::from([((RowGroup::Input, ColGroup::Output), l)]);
        let c = apply_topology(&topo, &layout, &vars);
        assert!(c.zero_fixes.is_empty());
        assert_eq!(c.soft_terms.len(), 4);
        assert_eq!(c.soft_terms[0], (l.at(0, 0), 100.0));
    }

    #[test]
    fn block_access_round_trip() {
        let layout = unit_layout(2);
        let mut m = InterconnectionMatrix::zeros(Variant::Nsc4, layout);
        let b = DenseMatrix::from_row_slice(2, 2, &[1., 2., 3., 4.]);
        m.set_block(RowGroup::PlantInput, ColGroup::Exogenous, &b).unwrap();
        assert_eq!(m.block(RowGroup::PlantInput, ColGroup::Exogenous), b);
        assert_eq!(m.agent_block(RowGroup::PlantInput, ColGroup::Exogenous, 1, 0)[(0, 0)], 3.0);
        assert_eq!(m.full()[(2, 4)], 1.0);
        assert_eq!(parse_block_name("ubarw"), Some((RowGroup::PlantInput, ColGroup::Exogenous)));
    }
}
