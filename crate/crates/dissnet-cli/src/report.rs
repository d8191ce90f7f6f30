use std::collections::BTreeMap;

use dissnet::analysis::Indices;
use dissnet::decentralized::LogEntry;
use dissnet::linalg::DenseMatrix;
use dissnet::nsc::InterconnectionMatrix;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Certified,
    NotCertified,
    Feasible,
    Infeasible,
    Decayed,
    NotDecayed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Certified | Status::Feasible | Status::Decayed => 0,
            Status::NotCertified | Status::Infeasible | Status::NotDecayed => 2,
        }
    }

    pub fn certified(ok: bool) -> Self {
        if ok {
            Status::Certified
        } else {
            Status::NotCertified
        }
    }

    pub fn feasible(ok: bool) -> Self {
        if ok {
            Status::Feasible
        } else {
            Status::Infeasible
        }
    }

    pub fn decayed(ok: bool) -> Self {
        if ok {
            Status::Decayed
        } else {
            Status::NotDecayed
        }
    }
}

/// Outcome of one command, printed as JSON or as a short text summary.
#[derive(Debug, Clone)]
pub struct Report {
    pub status: Status,
    pub indices: Indices,
    pub p: Vec<f64>,
    pub pbar: Vec<f64>,
    pub m: Option<InterconnectionMatrix>,
    pub steps: Vec<LogEntry>,
    /// Command-specific fields, merged into the top level of the JSON.
    pub extra: BTreeMap<String, Value>,
}

pub fn rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl Report {
    pub fn new(status: Status) -> Self {
        Self {
            status,
            indices: Indices::default(),
            p: vec![],
            pbar: vec![],
            m: None,
            steps: vec![],
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(key.to_string(), serde_json::to_value(value).expect("report fields serialize"));
        self
    }

    pub fn to_json(&self) -> Value {
        let blocks: BTreeMap<String, Vec<Vec<f64>>> = self
            .m
            .iter()
            .flat_map(|m| m.named_blocks())
            .map(|(name, b)| (name, rows(&b)))
            .collect();
        let mut out = json!({
            "status": self.status,
            "indices": {"nu": self.indices.nu, "rho": self.indices.rho, "gamma": self.indices.gamma},
            "p": self.p,
            "pbar": self.pbar,
            "M": blocks,
            "session": {"steps": self.steps},
        });
        let map = out.as_object_mut().expect("object literal");
        for (k, v) in &self.extra {
            map.insert(k.clone(), v.clone());
        }
        out
    }

    /// Pretty JSON; keys are sorted, so the output is byte-stable.
    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("values serialize")
    }

    pub fn render_text(&self) -> String {
        let mut lines = vec![format!("status: {:?}", self.status)];
        let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        if self.indices != Indices::default() {
            lines.push(format!(
                "indices: nu {} rho {} gamma {}",
                fmt_opt(self.indices.nu),
                fmt_opt(self.indices.rho),
                fmt_opt(self.indices.gamma)
            ));
        }
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        if !self.p.is_empty() {
            lines.push(format!("p: {}", list(&self.p)));
        }
        if !self.pbar.is_empty() {
            lines.push(format!("pbar: {}", list(&self.pbar)));
        }
        for (k, v) in &self.extra {
            lines.push(format!("{k}: {v}"));
        }
        if let Some(m) = &self.m {
            for (name, b) in m.named_blocks() {
                if !b.is_empty() {
                    lines.push(format!("M[{name}]:"));
                    for r in b.row_iter() {
                        lines.push(format!("  {}", r.iter().map(|x| format!("{x:>10.4}")).collect::<Vec<_>>().join(" ")));
                    }
                }
            }
        }
        for s in &self.steps {
            lines.push(format!(
                "step {} agent {} pd {} min eigenvalue {:.3e}",
                s.step, s.agent, s.pd, s.min_eigenvalue
            ));
        }
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_are_sorted_and_complete() {
        let text = Report::new(Status::Feasible).with("zeta", 1).with("alpha", 2).render_json();
        let keys: Vec<&str> = ["M", "alpha", "indices", "p", "pbar", "session", "status", "zeta"].to_vec();
        let positions: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Status::Certified.exit_code(), 0);
        assert_eq!(Status::Infeasible.exit_code(), 2);
        assert_eq!(Status::decayed(false).exit_code(), 2);
    }
}
