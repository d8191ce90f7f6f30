//! Time-domain simulation of networks of first-order SISO systems with output
//! delays, closed through a static interconnection matrix, plus the numerical
//! study catalog used throughout the examples.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::Serialize;

use crate::dissipativity::{DissipativityKind, SubsystemProfile, SupplyMatrix};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nsc::{ColGroup, InterconnectionMatrix, NscProblem, RowGroup, Topology, TopologyMode, Variant};

/// `G(s) = (a s + b)/(s + c) · e^{−d s}`, realized as `x' = −c x + u`,
/// `y_0 = (b − a c) x + a u`, followed by a pure delay of `d` on the output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderDelaySiso {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub delay: f64,
}

impl FirstOrderDelaySiso {
    pub fn new(a: f64, b: f64, c: f64, delay: f64) -> Result<Self> {
        if !(delay >= 0.0) || ![a, b, c, delay].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid first-order system ({a}, {b}, {c}, delay {delay})")));
        }
        Ok(Self { a, b, c, delay })
    }

    fn output_gain(&self) -> f64 {
        self.b - self.a * self.c
    }

    fn undelayed_output(&self, x: f64, u: f64) -> f64 {
        self.output_gain() * x + self.a * u
    }

    /// Instantaneous input-to-output gain (zero when the output is delayed).
    pub fn feedthrough(&self) -> f64 {
        if self.delay > 0.0 {
            0.0
        } else {
            self.a
        }
    }

    /// Steady-state gain `b / c`.
    pub fn dc_gain(&self) -> f64 {
        self.b / self.c
    }
}

/// A unit pulse injected on every excitation channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Excitation {
    pub amplitude: f64,
    pub start: f64,
    pub width: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            start: 1.0,
            width: 5.0,
        }
    }
}

impl Excitation {
    pub fn value(&self, t: f64) -> f64 {
        if t >= self.start && t < self.start + self.width {
            self.amplitude
        } else {
            0.0
        }
    }
}

/// A network of controllers (and optional twin plants) closed through `M`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub controllers: Vec<FirstOrderDelaySiso>,
    pub plants: Vec<FirstOrderDelaySiso>,
    pub m: InterconnectionMatrix,
    pub dt: f64,
    pub horizon: f64,
    pub excitation: Excitation,
    /// Static output feedback `w = e − K z`; `None` leaves `w = e`.
    pub feedback: Option<DenseMatrix>,
    pub divergence_threshold: f64,
}

impl ClosedLoop {
    pub fn new(controllers: Vec<FirstOrderDelaySiso>, plants: Vec<FirstOrderDelaySiso>, m: InterconnectionMatrix) -> Self {
        Self {
            controllers,
            plants,
            m,
            dt: 0.01,
            horizon: 100.0,
            excitation: Excitation::default(),
            feedback: None,
            divergence_threshold: 1e6,
        }
    }

    pub fn with_timing(mut self, dt: f64, horizon: f64) -> Self {
        self.dt = dt;
        self.horizon = horizon;
        self
    }
}

/// Sampled signals of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    /// Named traces, all as long as `t`.
    pub channels: Vec<(String, Vec<f64>)>,
    pub diverged: bool,
}

impl TimeSeries {
    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Traces whose names start with `prefix` followed by a digit.
    pub fn group(&self, prefix: &str) -> Vec<&[f64]> {
        self.channels
            .iter()
            .filter(|(n, _)| n.strip_prefix(prefix).is_some_and(|rest| rest.starts_with(|c: char| c.is_ascii_digit())))
            .map(|(_, v)| v.as_slice())
            .collect()
    }

    /// CSV with header `t,<channels>` and one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for (name, _) in &self.channels {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (k, t) in self.t.iter().enumerate() {
            let _ = write!(out, "{t}");
            for (_, v) in &self.channels {
                let _ = write!(out, ",{}", v[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Delay line holding the last `n + 1` samples of an undelayed output.
#[derive(Debug, Clone)]
struct DelayLine {
    samples: VecDeque<f64>,
    steps: usize,
}

impl DelayLine {
    fn new(steps: usize) -> Self {
        Self {
            samples: VecDeque::from(vec![0.0; steps + 1]),
            steps,
        }
    }

    /// Pushes the sample of the current step, dropping the oldest.
    fn push(&mut self, v: f64) {
        self.samples.push_back(v);
        self.samples.pop_front();
    }

    /// Linear interpolation between the two oldest samples, `θ ∈ [0, 1]`.
    fn delayed(&self, theta: f64) -> f64 {
        let lo = self.samples[0];
        let hi = if self.steps == 0 { lo } else { self.samples[1] };
        lo + theta * (hi - lo)
    }
}

struct Plan {
    systems: Vec<FirstOrderDelaySiso>,
    lines: Vec<Option<DelayLine>>,
    n_in: usize,
    n_w: usize,
    n_z: usize,
    m_io: DenseMatrix,
    m_iw: DenseMatrix,
    m_zo: DenseMatrix,
    m_zw: DenseMatrix,
    solver: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    excite_inputs: bool,
}

struct Signals {
    v: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
}

impl Plan {
    fn build(lp: &ClosedLoop) -> Result<Self> {
        let m = &lp.m;
        let layout = &m.layout;
        let n = layout.agents();
        if lp.controllers.len() != n {
            return Err(Error::Dimension(format!("{} controllers for {n} agents", lp.controllers.len())));
        }
        let with_plants = m.variant.has_plants();
        if with_plants && lp.plants.len() != n {
            return Err(Error::Dimension(format!("{} plants for {n} agents", lp.plants.len())));
        }
        for r in [RowGroup::Input, RowGroup::PlantInput] {
            if layout.row_dims(r).iter().any(|d| *d > 1) {
                return Err(Error::Dimension("only SISO systems can be simulated".into()));
            }
        }
        if !(lp.dt > 0.0) || !(lp.horizon > 0.0) {
            return Err(Error::InvalidArgument("dt and horizon must be positive".into()));
        }
        let mut systems = lp.controllers.clone();
        if with_plants {
            systems.extend(lp.plants.iter().copied());
        }
        let mut lines = Vec::new();
        for s in &systems {
            if s.delay > 0.0 {
                let steps = s.delay / lp.dt;
                if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
                    return Err(Error::InvalidArgument(format!("delay {} is not a multiple of dt {}", s.delay, lp.dt)));
                }
                lines.push(Some(DelayLine::new(steps.round() as usize)));
            } else {
                lines.push(None);
            }
        }
        let rows_in = |c: ColGroup| -> DenseMatrix {
            let top = m.block(RowGroup::Input, c);
            if with_plants {
                let bottom = m.block(RowGroup::PlantInput, c);
                let mut out = DenseMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
                out.rows_mut(0, top.nrows()).copy_from(&top);
                out.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
                out
            } else {
                top
            }
        };
        let hcat = |a: DenseMatrix, b: DenseMatrix| -> DenseMatrix {
            let mut out = DenseMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
            out.columns_mut(0, a.ncols()).copy_from(&a);
            out.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
            out
        };
        let m_io = if with_plants {
            hcat(rows_in(ColGroup::Output), rows_in(ColGroup::PlantOutput))
        } else {
            rows_in(ColGroup::Output)
        };
        let m_iw = rows_in(ColGroup::Exogenous);
        let m_zo = if with_plants {
            hcat(m.block(RowGroup::Performance, ColGroup::Output), m.block(RowGroup::Performance, ColGroup::PlantOutput))
        } else {
            m.block(RowGroup::Performance, ColGroup::Output)
        };
        let m_zw = m.block(RowGroup::Performance, ColGroup::Exogenous);
        let (n_in, n_w, n_z) = (systems.len(), m_iw.ncols(), m_zw.nrows());
        let k = match &lp.feedback {
            Some(k) if k.nrows() == n_w && k.ncols() == n_z => k.clone(),
            Some(k) => {
                return Err(Error::Dimension(format!(
                    "feedback gain must be {n_w}x{n_z}, got {}x{}",
                    k.nrows(),
                    k.ncols()
                )))
            }
            None => DenseMatrix::zeros(n_w, n_z),
        };
        // Unknowns [v; w]: v − D(M_io v + M_iw w) = y0 + D e_u, w + K(M_zo v + M_zw w) = e_w.
        let d = DenseMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n_in, systems.iter().map(|s| s.feedthrough())));
        let size = n_in + n_w;
        let mut a = DenseMatrix::identity(size, size);
        let mut coupling = DenseMatrix::zeros(size, size);
        coupling.view_mut((0, 0), (n_in, n_in)).copy_from(&(-&d * &m_io));
        coupling.view_mut((0, n_in), (n_in, n_w)).copy_from(&(-&d * &m_iw));
        coupling.view_mut((n_in, 0), (n_w, n_in)).copy_from(&(&k * &m_zo));
        coupling.view_mut((n_in, n_in), (n_w, n_w)).copy_from(&(&k * &m_zw));
        a += coupling;
        let solver = a.clone().lu();
        if !solver.is_invertible() || inverse_condition(&a) < 1e-14 {
            return Err(Error::Singular("algebraic loop through the instantaneous feedthrough paths is singular".into()));
        }
        Ok(Self {
            systems,
            lines,
            n_in,
            n_w,
            n_z,
            m_io,
            m_iw,
            m_zo,
            m_zw,
            solver,
            excite_inputs: n_w == 0,
        })
    }

    /// Port signals at state `x`, time `t`, with delay lines read at offset `θ`.
    fn signals(&self, x: &[f64], t: f64, theta: f64, excitation: &Excitation) -> Signals {
        let e = excitation.value(t);
        let e_u = if self.excite_inputs { e } else { 0.0 };
        let mut rhs = vec![0.0; self.n_in + self.n_w];
        for (i, s) in self.systems.iter().enumerate() {
            rhs[i] = match &self.lines[i] {
                Some(line) => line.delayed(theta),
                None => s.output_gain() * x[i] + s.a * e_u,
            };
        }
        for r in rhs.iter_mut().skip(self.n_in) {
            *r = e;
        }
        let sol = self.solver.solve(&nalgebra::DVector::from_vec(rhs)).expect("invertible loop");
        let v = sol.rows(0, self.n_in).into_owned();
        let w = sol.rows(self.n_in, self.n_w).into_owned();
        let u = &self.m_io * &v + &self.m_iw * &w;
        let z = &self.m_zo * &v + &self.m_zw * &w;
        Signals {
            v: v.iter().copied().collect(),
            w: w.iter().copied().collect(),
            u: u.iter().map(|u| u + e_u).collect(),
            z: z.iter().copied().collect(),
        }
    }

    fn derivative(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.systems.iter().enumerate().map(|(i, s)| -s.c * x[i] + u[i]).collect()
    }
}

fn inverse_condition(a: &DenseMatrix) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

/// Fixed-step RK4 integration from rest. Delayed outputs between stored
/// samples are linearly interpolated; the instantaneous loop is solved
/// exactly at every evaluation. Stops early when any signal exceeds the
/// divergence threshold.
pub fn simulate(lp: &ClosedLoop) -> Result<TimeSeries> {
    let mut plan = Plan::build(lp)?;
    let n = lp.controllers.len();
    let with_plants = plan.n_in > n;
    let steps = (lp.horizon / lp.dt).round() as usize;
    let mut names: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
    if with_plants {
        names.extend((1..=n).map(|i| format!("ybar{i}")));
    }
    names.extend((1..=plan.n_z).map(|i| format!("z{i}")));
    names.extend((1..=plan.n_w).map(|i| format!("w{i}")));
    names.extend((1..=n).map(|i| format!("u{i}")));
    if with_plants {
        names.extend((1..=n).map(|i| format!("ubar{i}")));
    }
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); names.len()];
    let mut t_grid = Vec::with_capacity(steps + 1);
    let mut x = vec![0.0; plan.n_in];
    let mut diverged = false;
    let h = lp.dt;
    for k in 0..=steps {
        let t = k as f64 * h;
        // Before this step's sample is pushed, the delayed value at t_k is the newest-but-n entry.
        let sig = plan.signals(&x, t, 1.0, &lp.excitation);
        t_grid.push(t);
        let record: Vec<f64> = sig.v.iter().chain(&sig.z).chain(&sig.w).chain(&sig.u).copied().collect();
        for (trace, v) in traces.iter_mut().zip(&record) {
            trace.push(*v);
        }
        if record.iter().chain(&x).any(|v| !v.is_finite() || v.abs() > lp.divergence_threshold) {
            diverged = true;
            break;
        }
        if k == steps {
            break;
        }
        for (i, s) in plan.systems.iter().enumerate() {
            if let Some(line) = plan.lines[i].as_mut() {
                line.push(s.undelayed_output(x[i], sig.u[i]));
            }
        }
        let k1 = plan.derivative(&x, &sig.u);
        let stage = |x0: &[f64], kk: &[f64], f: f64| -> Vec<f64> { x0.iter().zip(kk).map(|(a, b)| a + f * b).collect() };
        let x2 = stage(&x, &k1, h / 2.0);
        let k2 = plan.derivative(&x2, &plan.signals(&x2, t + h / 2.0, 0.5, &lp.excitation).u);
        let x3 = stage(&x, &k2, h / 2.0);
        let k3 = plan.derivative(&x3, &plan.signals(&x3, t + h / 2.0, 0.5, &lp.excitation).u);
        let x4 = stage(&x, &k3, h);
        let k4 = plan.derivative(&x4, &plan.signals(&x4, t + h, 1.0, &lp.excitation).u);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let channels = names.into_iter().zip(traces).collect();
    Ok(TimeSeries {
        t: t_grid,
        channels,
        diverged,
    })
}

/// Outcome of [`decay_metric`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decay {
    pub decayed: bool,
    /// Peak over the last fifth of the horizon divided by the overall peak.
    pub ratio: f64,
}

/// Decay of the output traces (`y`, `ybar` and `z`).
pub fn decay_metric(ts: &TimeSeries) -> Result<Decay> {
    let traces: Vec<&[f64]> = ["y", "ybar", "z"].iter().flat_map(|p| ts.group(p)).collect();
    decay_of(ts, &traces)
}

/// Decay of the traces of one channel group (for example `"z"`).
pub fn decay_metric_of(ts: &TimeSeries, prefix: &str) -> Result<Decay> {
    decay_of(ts, &ts.group(prefix))
}

fn decay_of(ts: &TimeSeries, traces: &[&[f64]]) -> Result<Decay> {
    if ts.t.is_empty() || traces.is_empty() {
        return Err(Error::Empty("time series has no output samples".into()));
    }
    let end = *ts.t.last().expect("non-empty");
    let tail_start = ts.t.partition_point(|t| *t < 0.8 * end);
    let peak = |range: std::ops::Range<usize>| {
        traces
            .iter()
            .flat_map(|tr| tr[range.clone()].iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let overall = peak(0..ts.t.len());
    let tail = peak(tail_start..ts.t.len());
    let ratio = if overall > 0.0 { tail / overall } else { 0.0 };
    Ok(Decay {
        decayed: !ts.diverged && ratio < 0.05,
        ratio,
    })
}

/// Closes an NSC 2 (or 4) loop with `w = e − k_sys z` and simulates it.
pub fn feedback_gain_demo(lp: &ClosedLoop, k_sys: f64) -> Result<TimeSeries> {
    let (n_w, n_z) = (
        lp.m.layout.col_size(ColGroup::Exogenous),
        lp.m.layout.row_size(RowGroup::Performance),
    );
    if n_w != n_z || n_w == 0 {
        return Err(Error::Dimension("the feedback demo needs square, non-empty exogenous ports".into()));
    }
    let mut closed = lp.clone();
    closed.feedback = Some(DenseMatrix::identity(n_w, n_z) * k_sys);
    simulate(&closed)
}

/// The five-agent numerical study: delayed first-order controllers with
/// L2-gain certificates and unstable first-order plants with output-feedback
/// passivity shortages.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCatalog {
    pub controllers: Vec<FirstOrderDelaySiso>,
    pub plants: Vec<FirstOrderDelaySiso>,
    pub gamma_sq: Vec<f64>,
    pub rho_bar: Vec<f64>,
    /// Input-feedforward index granted to the plants so that their `X¹¹` is positive.
    pub plant_shift: f64,
    pub adjacency: DenseMatrix,
    pub cost: DenseMatrix,
    /// Reference interconnection under the hard graph constraint.
    pub hard_m_uy: DenseMatrix,
    /// Reference interconnection under the soft graph constraint.
    pub soft_m_uy: DenseMatrix,
}

#[allow(clippy::approx_constant)]
pub fn builtin_study() -> StudyCatalog {
    let ctrl = |a: f64, b: f64, c: f64, d: f64| FirstOrderDelaySiso { a, b, c, delay: d };
    let plant = |a: f64, b: f64, c: f64| FirstOrderDelaySiso { a, b, c, delay: 0.0 };
    StudyCatalog {
        controllers: vec![
            ctrl(-2.0, 1.0, 1.0, 1.0),
            ctrl(-0.3, 16.0, 9.0, 1.2),
            ctrl(-0.2, 0.2, 1.0, 0.8),
            ctrl(-1.3, 0.2, 1.0, 0.9),
            ctrl(-1.2, 1.0, 3.0, 1.1),
        ],
        plants: vec![
            plant(1.0, 2.0, -1.0),
            plant(1.5, 3.0, -3.0),
            plant(2.0, 2.0, -5.0),
            plant(0.5, 1.0, -2.0),
            plant(3.0, 1.5, -4.0),
        ],
        gamma_sq: vec![4.00, 3.16, 0.04, 1.69, 1.44],
        rho_bar: vec![-0.50, -1.00, -2.50, -2.00, -2.67],
        plant_shift: 0.01,
        adjacency: DenseMatrix::from_row_slice(
            5,
            5,
            &[
                0., 1., 1., 0., 0., //
                1., 0., 1., 0., 0., //
                1., 1., 0., 1., 1., //
                0., 0., 1., 0., 0., //
                0., 0., 1., 0., 0.,
            ],
        ),
        cost: DenseMatrix::from_row_slice(
            5,
            5,
            &[
                100., 1., 1., 10., 10., //
                1., 100., 1., 10., 10., //
                1., 1., 100., 1., 1., //
                10., 10., 1., 100., 10., //
                10., 10., 1., 10., 100.,
            ],
        ),
        hard_m_uy: DenseMatrix::from_row_slice(
            5,
            5,
            &[
                0., 0.497, 1.226, 0., 0., //
                0.408, 0., 1.059, 0., 0., //
                -0.229, -0.099, 0., 0.318, 0.508, //
                0., 0., 0.902, 0., 0., //
                0., 0., 0.924, 0., 0.,
            ],
        ) * 0.1,
        soft_m_uy: DenseMatrix::from_row_slice(
            5,
            5,
            &[
                0., 0.099, 0.043, 0., 0., //
                0.110, 0., 0.048, 0., 0., //
                0.967, 0.966, 0., 1.510, 1.510, //
                0., 0., 0.094, 0., 0.011, //
                0., 0., 0.104, 0.012, 0.,
            ],
        ),
    }
}

impl StudyCatalog {
    pub fn agents(&self) -> usize {
        self.controllers.len()
    }

    pub fn controller_profiles(&self) -> Vec<SubsystemProfile> {
        self.gamma_sq
            .iter()
            .enumerate()
            .map(|(i, g2)| SubsystemProfile::from_kind(i, &DissipativityKind::L2Gain { gamma: g2.sqrt() }, 1, 1).expect("valid gain"))
            .collect()
    }

    /// Plant certificates `[[ε, ½], [½, −ρ̄_i]]`.
    pub fn plant_profiles(&self) -> Vec<SubsystemProfile> {
        self.rho_bar
            .iter()
            .enumerate()
            .map(|(i, rb)| {
                let x = DenseMatrix::from_row_slice(2, 2, &[self.plant_shift, 0.5, 0.5, -rb]);
                SubsystemProfile::new(i, SupplyMatrix::from_full(&x, 1).expect("2x2 supply"))
            })
            .collect()
    }

    pub fn topology(&self, mode: TopologyMode) -> Topology {
        Topology::new(self.adjacency.clone(), self.cost.clone(), mode).expect("study topology is valid")
    }

    pub fn nsc1(&self, mode: TopologyMode) -> NscProblem {
        NscProblem::nsc1(self.controller_profiles()).with_topology(self.topology(mode))
    }

    /// Controllers with one exogenous input and one performance output each.
    pub fn nsc2(&self, spec: Option<SupplyMatrix>, mode: TopologyMode) -> NscProblem {
        let n = self.agents();
        NscProblem {
            variant: Variant::Nsc2,
            subsystems: self.controller_profiles(),
            plants: vec![],
            spec,
            exogenous_dims: vec![1; n],
            performance_dims: vec![1; n],
            topology: Some(self.topology(mode)),
        }
    }

    pub fn nsc3(&self, mode: TopologyMode) -> NscProblem {
        NscProblem {
            variant: Variant::Nsc3,
            subsystems: self.controller_profiles(),
            plants: self.plant_profiles(),
            spec: None,
            exogenous_dims: vec![],
            performance_dims: vec![],
            topology: Some(self.topology(mode)),
        }
    }

    pub fn nsc4(&self, spec: Option<SupplyMatrix>, mode: TopologyMode) -> NscProblem {
        let n = self.agents();
        NscProblem {
            variant: Variant::Nsc4,
            subsystems: self.controller_profiles(),
            plants: self.plant_profiles(),
            spec,
            exogenous_dims: vec![1; n],
            performance_dims: vec![1; n],
            topology: Some(self.topology(mode)),
        }
    }

    /// A closed loop of the study systems through `m` (plants included when `m` has them).
    pub fn closed_loop(&self, m: InterconnectionMatrix) -> ClosedLoop {
        let plants = if m.variant.has_plants() { self.plants.clone() } else { vec![] };
        ClosedLoop::new(self.controllers.clone(), plants, m)
    }
}
