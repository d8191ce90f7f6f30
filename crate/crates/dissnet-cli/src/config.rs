//! Problem configuration files.
//!
//! A config is a JSON document with `schema_version: 1`. Matrices are
//! row-major nested arrays. Unknown fields are rejected so that typos surface
//! as errors with a line and column instead of being silently ignored.

use std::collections::BTreeMap;
use std::path::Path;

use dissnet::dissipativity::{DissipativityKind, SubsystemProfile, SupplyMatrix};
use dissnet::linalg::DenseMatrix;
use dissnet::lti_sim::FirstOrderDelaySiso;
use dissnet::nsc::{parse_block_name, InterconnectionMatrix, NscProblem, TemplateName, Topology, TopologyMode, Variant};
use serde::Deserialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub variant: Variant,
    pub subsystems: Vec<Certificate>,
    #[serde(default)]
    pub plants: Vec<Certificate>,
    /// Required supply rate `Y` on the exogenous ports.
    #[serde(default)]
    pub spec: Option<Certificate>,
    #[serde(default)]
    pub exogenous_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub performance_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub topology: Option<TopologyConfig>,
    #[serde(default)]
    pub template: Option<TemplateName>,
    #[serde(default)]
    pub objective: Option<ObjectiveConfig>,
    /// Blocks of a given interconnection by name (`uy`, `zw`, ...); missing blocks are zero.
    #[serde(default)]
    pub interconnection: Option<BTreeMap<String, Rows>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

/// A dissipativity certificate, either named or given as a raw matrix.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Certificate {
    Passive {
        #[serde(default = "one")]
        dim: usize,
    },
    /// Input-feedforward passive with index `nu`.
    Ifp {
        nu: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    /// Output-feedback passive with index `rho`.
    Ofp {
        rho: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    IfpOfp {
        nu: f64,
        rho: f64,
        #[serde(default = "one")]
        dim: usize,
    },
    L2gain {
        gamma: f64,
        #[serde(default = "one")]
        input_dim: usize,
        #[serde(default = "one")]
        output_dim: usize,
    },
    Raw {
        x: Rows,
        input_dim: usize,
    },
}

fn one() -> usize {
    1
}

impl Certificate {
    /// The supply matrix, with the port sizes either declared here or, for a
    /// specification, implied by the network (`fallback`).
    pub fn supply(&self, fallback: Option<(usize, usize)>) -> Result<SupplyMatrix, CliError> {
        let pick = |q: usize, m: usize| fallback.unwrap_or((q, m));
        let (kind, (q, m)) = match self {
            Certificate::Passive { dim } => (DissipativityKind::Passive, pick(*dim, *dim)),
            Certificate::Ifp { nu, dim } => (DissipativityKind::StrictlyPassive { nu: *nu, rho: 0.0 }, pick(*dim, *dim)),
            Certificate::Ofp { rho, dim } => (DissipativityKind::StrictlyPassive { nu: 0.0, rho: *rho }, pick(*dim, *dim)),
            Certificate::IfpOfp { nu, rho, dim } => (DissipativityKind::StrictlyPassive { nu: *nu, rho: *rho }, pick(*dim, *dim)),
            Certificate::L2gain { gamma, input_dim, output_dim } => (DissipativityKind::L2Gain { gamma: *gamma }, pick(*input_dim, *output_dim)),
            Certificate::Raw { x, input_dim } => {
                let full = matrix(x, "raw certificate")?;
                return Ok(SupplyMatrix::from_full(&full, *input_dim)?);
            }
        };
        Ok(dissnet::dissipativity::supply_from_kind(&kind, q, m)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub adjacency: Rows,
    /// Link costs; unit costs when absent.
    #[serde(default)]
    pub cost: Option<Rows>,
    #[serde(default = "hard")]
    pub mode: TopologyMode,
}

fn hard() -> TopologyMode {
    TopologyMode::Hard
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Feasible,
    MaxPassivity {
        #[serde(default = "unit")]
        c1: f64,
        #[serde(default = "unit")]
        c2: f64,
    },
    MinL2gain,
    SoftTopologyCost,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub margin: Option<f64>,
    pub p_min: Option<f64>,
    /// Relaxation parameter for certificates with a negative definite input block.
    pub alpha: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub controllers: Vec<SisoConfig>,
    #[serde(default)]
    pub plants: Vec<SisoConfig>,
}

/// `(a s + b)/(s + c) · e^{−delay s}`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisoConfig {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default)]
    pub delay: f64,
}

impl SisoConfig {
    pub fn system(&self) -> Result<FirstOrderDelaySiso, CliError> {
        Ok(FirstOrderDelaySiso::new(self.a, self.b, self.c, self.delay)?)
    }
}

/// Converts nested rows into a matrix, rejecting ragged input.
pub fn matrix(rows: &Rows, what: &str) -> Result<DenseMatrix, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|row| row.len() != c) {
        return Err(CliError::Config(format!("{what}: row {bad} has {} entries, expected {c}", rows[bad].len())));
    }
    Ok(DenseMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// The network problem, with the topology mode optionally overridden.
    pub fn problem(&self, mode: Option<TopologyMode>) -> Result<NscProblem, CliError> {
        let n = self.subsystems.len();
        let profiles = |certs: &[Certificate]| -> Result<Vec<SubsystemProfile>, CliError> {
            certs
                .iter()
                .enumerate()
                .map(|(i, c)| Ok(SubsystemProfile::new(i, c.supply(None)?)))
                .collect()
        };
        let exogenous = self.variant.has_exogenous();
        let dims = |given: &Option<Vec<usize>>| match given {
            Some(d) => d.clone(),
            None if exogenous => vec![1; n],
            None => vec![],
        };
        let exogenous_dims = dims(&self.exogenous_dims);
        let performance_dims = dims(&self.performance_dims);
        let spec = match &self.spec {
            Some(c) => {
                let w: usize = exogenous_dims.iter().sum();
                let z: usize = performance_dims.iter().sum();
                let fallback = (!matches!(c, Certificate::Raw { .. })).then_some((w, z));
                Some(c.supply(fallback)?)
            }
            None => None,
        };
        let topology = match &self.topology {
            Some(t) => {
                let adjacency = matrix(&t.adjacency, "topology adjacency")?;
                let cost = match &t.cost {
                    Some(c) => matrix(c, "topology cost")?,
                    None => DenseMatrix::from_element(adjacency.nrows(), adjacency.ncols(), 1.0),
                };
                Some(Topology::new(adjacency, cost, mode.unwrap_or(t.mode))?)
            }
            None => mode.map(|m| Topology::complete(n, m)),
        };
        Ok(NscProblem {
            variant: self.variant,
            subsystems: profiles(&self.subsystems)?,
            plants: profiles(&self.plants)?,
            spec,
            exogenous_dims,
            performance_dims,
            topology,
        })
    }

    /// The given interconnection, if any, laid out for `problem`.
    pub fn interconnection(&self, problem: &NscProblem) -> Result<Option<InterconnectionMatrix>, CliError> {
        let Some(blocks) = &self.interconnection else {
            return Ok(None);
        };
        let mut m = InterconnectionMatrix::zeros(problem.variant, problem.layout());
        for (name, rows) in blocks {
            let (r, c) = parse_block_name(name).ok_or_else(|| CliError::Config(format!("unknown interconnection block `{name}`")))?;
            if !problem.variant.row_groups().contains(&r) || !problem.variant.col_groups().contains(&c) {
                return Err(CliError::Config(format!("block `{name}` does not exist in NSC {}", problem.variant.number())));
            }
            m.set_block(r, c, &matrix(rows, name)?)?;
        }
        Ok(Some(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "variant": 1,
        "subsystems": [{"kind": "l2gain", "gamma": 2.0}],
        "interconnection": {"uy": [[0.3]]}
    }"#;

    #[test]
    fn parses_a_minimal_config() {
        let cfg = Config::parse(MINIMAL).unwrap();
        let p = cfg.problem(None).unwrap();
        assert_eq!(p.agents(), 1);
        let m = cfg.interconnection(&p).unwrap().unwrap();
        assert_eq!(m.full()[(0, 0)], 0.3);
    }

    #[test]
    fn unknown_fields_report_a_line() {
        let text = "{\n\"schema_version\": 1,\n\"variant\": 1,\n\"subsystems\": [],\n\"bogus\": 3\n}";
        let err = Config::parse(text).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 5"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = Config::parse(&MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn named_spec_takes_network_dimensions() {
        let text = r#"{"schema_version": 1, "variant": 2,
            "subsystems": [{"kind": "passive"}, {"kind": "passive"}],
            "spec": {"kind": "l2gain", "gamma": 1.0}}"#;
        let p = Config::parse(text).unwrap().problem(None).unwrap();
        assert_eq!(p.spec.unwrap().input_dim(), 2);
    }

    #[test]
    fn ragged_matrices_are_rejected() {
        assert!(matrix(&vec![vec![1.0, 2.0], vec![3.0]], "m").is_err());
    }
}
