//! Quadratic supply-rate certificates (X-EID matrices) and their scaled
//! network aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, block_diag, inf_norm, is_positive_definite, BlockMatrix, DenseMatrix};

/// The 2×2-block supply matrix `[[X11, X12], [X21, X22]]` acting on
/// `(input, output)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupplyMatrix {
    pub x11: DenseMatrix,
    pub x12: DenseMatrix,
    pub x21: DenseMatrix,
    pub x22: DenseMatrix,
}

impl SupplyMatrix {
    /// Builds a certificate and validates block shapes and symmetry.
    pub fn new(x11: DenseMatrix, x12: DenseMatrix, x21: DenseMatrix, x22: DenseMatrix) -> Result<Self> {
        let q = x11.nrows();
        let m = x22.nrows();
        let shapes_ok = x11.ncols() == q
            && x22.ncols() == m
            && x12.shape() == (q, m)
            && x21.shape() == (m, q);
        if !shapes_ok {
            return Err(Error::Dimension(format!(
                "supply blocks have shapes {:?} {:?} {:?} {:?}",
                x11.shape(),
                x12.shape(),
                x21.shape(),
                x22.shape()
            )));
        }
        let s = Self { x11, x12, x21, x22 };
        let full = s.full();
        let tol = 1e-10 * inf_norm(&full).max(1.0);
        if asymmetry(&full) > tol {
            return Err(Error::NotSymmetric {
                asymmetry: asymmetry(&full),
                tolerance: tol,
            });
        }
        Ok(s)
    }

    /// Splits a full `(q+m)×(q+m)` symmetric matrix after `q` rows.
    pub fn from_full(full: &DenseMatrix, q: usize) -> Result<Self> {
        if full.nrows() != full.ncols() || q > full.nrows() {
            return Err(Error::Dimension(format!(
                "cannot split a {}x{} supply matrix after {q}",
                full.nrows(),
                full.ncols()
            )));
        }
        let m = full.nrows() - q;
        Self::new(
            full.view((0, 0), (q, q)).into_owned(),
            full.view((0, q), (q, m)).into_owned(),
            full.view((q, 0), (m, q)).into_owned(),
            full.view((q, q), (m, m)).into_owned(),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.x11.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.x22.nrows()
    }

    pub fn full(&self) -> DenseMatrix {
        let q = self.input_dim();
        let m = self.output_dim();
        let mut out = DenseMatrix::zeros(q + m, q + m);
        out.view_mut((0, 0), (q, q)).copy_from(&self.x11);
        out.view_mut((0, q), (q, m)).copy_from(&self.x12);
        out.view_mut((q, 0), (m, q)).copy_from(&self.x21);
        out.view_mut((q, q), (m, m)).copy_from(&self.x22);
        out
    }

    /// Supply value `[u; y]ᵀ X [u; y]`.
    pub fn supply(&self, u: &DenseMatrix, y: &DenseMatrix) -> f64 {
        let v = DenseMatrix::from_fn(u.nrows() + y.nrows(), 1, |i, _| {
            if i < u.nrows() {
                u[(i, 0)]
            } else {
                y[(i - u.nrows(), 0)]
            }
        });
        (v.transpose() * self.full() * v)[(0, 0)]
    }

    /// Returns this certificate scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x11: &self.x11 * s,
            x12: &self.x12 * s,
            x21: &self.x21 * s,
            x22: &self.x22 * s,
        }
    }
}

/// Named dissipativity properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DissipativityKind {
    Passive,
    /// IFP(ν) and OFP(ρ) simultaneously.
    StrictlyPassive { nu: f64, rho: f64 },
    L2Gain { gamma: f64 },
    /// A raw certificate given as a full symmetric matrix, split after the input dimension.
    General { x: Vec<Vec<f64>> },
}

/// Converts a named property into its supply matrix.
pub fn supply_from_kind(kind: &DissipativityKind, q: usize, m: usize) -> Result<SupplyMatrix> {
    let eye_q = DenseMatrix::identity(q, q);
    let eye_m = DenseMatrix::identity(m, m);
    let half = |q: usize, m: usize| DenseMatrix::identity(q, m) * 0.5;
    match kind {
        DissipativityKind::Passive | DissipativityKind::StrictlyPassive { .. } if q != m => Err(Error::Dimension(
            format!("passivity certificates need equal input and output dimensions, got {q} and {m}"),
        )),
        DissipativityKind::Passive => SupplyMatrix::new(DenseMatrix::zeros(q, q), half(q, m), half(m, q), DenseMatrix::zeros(m, m)),
        DissipativityKind::StrictlyPassive { nu, rho } => {
            SupplyMatrix::new(-*nu * eye_q, half(q, m), half(m, q), -*rho * eye_m)
        }
        DissipativityKind::L2Gain { gamma } => {
            if !(*gamma > 0.0) {
                return Err(Error::InvalidArgument(format!("L2 gain must be positive, got {gamma}")));
            }
            SupplyMatrix::new(gamma * gamma * eye_q, DenseMatrix::zeros(q, m), DenseMatrix::zeros(m, q), -eye_m)
        }
        DissipativityKind::General { x } => {
            let n = x.len();
            if n != q + m || x.iter().any(|row| row.len() != n) {
                return Err(Error::Dimension(format!(
                    "general certificate must be {0}x{0}",
                    q + m
                )));
            }
            let full = DenseMatrix::from_fn(n, n, |i, j| x[i][j]);
            SupplyMatrix::from_full(&full, q)
        }
    }
}

/// Relaxes an IFP(ν) certificate to IFP(ν − ε): `X11 ↦ X11 + εI`.
pub fn shift_ifp(x: &SupplyMatrix, epsilon: f64) -> Result<SupplyMatrix> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("shift must be positive, got {epsilon}")));
    }
    let q = x.input_dim();
    if q != x.output_dim() {
        return Err(Error::InvalidArgument("not a passivity-form certificate (q ≠ m)".into()));
    }
    let half = DenseMatrix::identity(q, q) * 0.5;
    let nu = -x.x11[(0, 0)];
    let is_scaled_identity = |a: &DenseMatrix, s: f64| (a - DenseMatrix::identity(q, q) * s).amax() <= 1e-12;
    if !is_scaled_identity(&x.x12, 0.5) || !is_scaled_identity(&x.x21, 0.5) || !is_scaled_identity(&x.x11, -nu) {
        return Err(Error::InvalidArgument(
            "not a passivity-form certificate [[−νI, ½I], [½I, X22]]".into(),
        ));
    }
    SupplyMatrix::new(&x.x11 + DenseMatrix::identity(q, q) * epsilon, half.clone(), half, x.x22.clone())
}

/// One subsystem's ports and certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemProfile {
    pub id: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub certificate: SupplyMatrix,
}

impl SubsystemProfile {
    pub fn new(id: usize, certificate: SupplyMatrix) -> Self {
        Self {
            id,
            input_dim: certificate.input_dim(),
            output_dim: certificate.output_dim(),
            certificate,
        }
    }

    pub fn from_kind(id: usize, kind: &DissipativityKind, q: usize, m: usize) -> Result<Self> {
        Ok(Self::new(id, supply_from_kind(kind, q, m)?))
    }

    /// Checks that the certificate matches the declared port dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.certificate.input_dim() != self.input_dim || self.certificate.output_dim() != self.output_dim {
            return Err(Error::Dimension(format!(
                "subsystem {} declares ports {}x{} but its certificate is {}x{}",
                self.id,
                self.input_dim,
                self.output_dim,
                self.certificate.input_dim(),
                self.certificate.output_dim()
            )));
        }
        Ok(())
    }
}

/// Block-diagonal aggregates `X_p^{kl} = diag(p_i X_i^{kl})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledAggregate {
    pub x11: BlockMatrix,
    pub x12: BlockMatrix,
    pub x21: BlockMatrix,
    pub x22: BlockMatrix,
    pub p: Vec<f64>,
}

pub fn assemble_scaled(profiles: &[SubsystemProfile], p: &[f64]) -> Result<ScaledAggregate> {
    if profiles.len() != p.len() {
        return Err(Error::Dimension(format!(
            "{} profiles but {} multipliers",
            profiles.len(),
            p.len()
        )));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("multiplier p[{i}] = {v} is negative")));
    }
    let build = |pick: &dyn Fn(&SupplyMatrix) -> &DenseMatrix| {
        let blocks: Vec<DenseMatrix> = profiles.iter().zip(p).map(|(s, pi)| pick(&s.certificate) * *pi).collect();
        BlockMatrix::block_diagonal(&blocks)
    };
    Ok(ScaledAggregate {
        x11: build(&|c| &c.x11),
        x12: build(&|c| &c.x12),
        x21: build(&|c| &c.x21),
        x22: build(&|c| &c.x22),
        p: p.to_vec(),
    })
}

/// Per-subsystem ratio blocks `(X11)⁻¹X12` and `X21(X11)⁻¹`.
pub fn ratio_pair(cert: &SupplyMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let lu = cert.x11.clone().lu();
    let left = lu
        .solve(&cert.x12)
        .ok_or_else(|| Error::Singular("X11 is singular".into()))?;
    if !left.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular("X11 is singular".into()));
    }
    // X21 X11⁻¹ = (X11⁻ᵀ X21ᵀ)ᵀ and X11 is symmetric.
    let right = lu
        .solve(&cert.x21.transpose())
        .ok_or_else(|| Error::Singular("X11 is singular".into()))?
        .transpose();
    Ok((left, right))
}

/// Network ratio blocks `diag((X_i11)⁻¹X_i12)` and `diag(X_i21(X_i11)⁻¹)`.
pub fn ratio_blocks(profiles: &[SubsystemProfile]) -> Result<(BlockMatrix, BlockMatrix)> {
    let mut left = Vec::with_capacity(profiles.len());
    let mut right = Vec::with_capacity(profiles.len());
    for (i, s) in profiles.iter().enumerate() {
        let (l, r) = ratio_pair(&s.certificate).map_err(|_| Error::Singular(format!("X11 of subsystem {i} is singular")))?;
        left.push(l);
        right.push(r);
    }
    Ok((BlockMatrix::block_diagonal(&left), BlockMatrix::block_diagonal(&right)))
}

/// Outcome of an assumption check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub satisfied: bool,
    pub offenders: Vec<usize>,
    pub messages: Vec<String>,
}

/// Every `X_i11` positive definite.
pub fn check_assumption1(profiles: &[SubsystemProfile]) -> AssumptionReport {
    let mut offenders = Vec::new();
    let mut messages = Vec::new();
    for (i, s) in profiles.iter().enumerate() {
        if !is_positive_definite(&s.certificate.x11, 0.0).unwrap_or(false) {
            offenders.push(i);
            messages.push(format!(
                "subsystem {i}: X11 is not positive definite; relax it with shift_ifp or use the negative-X11 synthesis path"
            ));
        }
    }
    AssumptionReport {
        satisfied: offenders.is_empty(),
        offenders,
        messages,
    }
}

/// `Y22` negative definite.
pub fn check_assumption2(y: &SupplyMatrix) -> AssumptionReport {
    let ok = is_positive_definite(&(-&y.x22), 0.0).unwrap_or(false);
    AssumptionReport {
        satisfied: ok,
        offenders: if ok { vec![] } else { vec![0] },
        messages: if ok {
            vec![]
        } else {
            vec!["Y22 is not negative definite".into()]
        },
    }
}

/// Sign class of an `X11` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    Positive,
    Negative,
    Indefinite,
}

pub fn classify_x11(cert: &SupplyMatrix) -> Definiteness {
    if is_positive_definite(&cert.x11, 0.0).unwrap_or(false) {
        Definiteness::Positive
    } else if is_positive_definite(&(-&cert.x11), 0.0).unwrap_or(false) {
        Definiteness::Negative
    } else {
        Definiteness::Indefinite
    }
}

/// Block-diagonal stacking of one certificate block across profiles.
pub fn stack_blocks(profiles: &[SubsystemProfile], pick: impl Fn(&SupplyMatrix) -> &DenseMatrix) -> DenseMatrix {
    let blocks: Vec<DenseMatrix> = profiles.iter().map(|s| pick(&s.certificate).clone()).collect();
    block_diag(&blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DenseMatrix {
        DenseMatrix::from_element(1, 1, v)
    }

    #[test]
    fn l2gain_supply() {
        let s = supply_from_kind(&DissipativityKind::L2Gain { gamma: 2.0 }, 1, 1).unwrap();
        assert_eq!(s.full(), DenseMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, -1.0]));
        assert!(supply_from_kind(&DissipativityKind::L2Gain { gamma: 0.0 }, 1, 1).is_err());
    }

    #[test]
    fn passive_supply() {
        let s = supply_from_kind(&DissipativityKind::Passive, 2, 2).unwrap();
        assert_eq!(s.x12, DenseMatrix::identity(2, 2) * 0.5);
        assert!(supply_from_kind(&DissipativityKind::Passive, 2, 1).is_err());
    }

    #[test]
    fn passivity_shortage_gives_positive_x11() {
        let s = supply_from_kind(&DissipativityKind::StrictlyPassive { nu: -0.5, rho: -1.0 }, 1, 1).unwrap();
        assert_eq!(s.x11, scalar(0.5));
        assert!(check_assumption1(&[SubsystemProfile::new(0, s)]).satisfied);
    }

    #[test]
    fn shift_examples() {
        let s = supply_from_kind(&DissipativityKind::StrictlyPassive { nu: 0.1, rho: 0.0 }, 1, 1).unwrap();
        let t = shift_ifp(&s, 0.2).unwrap();
        assert!((t.x11[(0, 0)] - 0.1).abs() < 1e-15);
        let s = supply_from_kind(&DissipativityKind::StrictlyPassive { nu: 1.0, rho: 0.0 }, 2, 2).unwrap();
        let t = shift_ifp(&s, 1.5).unwrap();
        assert!((t.x11.clone() - DenseMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        assert!(check_assumption1(&[SubsystemProfile::new(0, t)]).satisfied);
        let tiny = shift_ifp(&s, 1e-14).unwrap();
        assert!((tiny.full() - s.full()).amax() < 1e-13);
        let l2 = supply_from_kind(&DissipativityKind::L2Gain { gamma: 1.0 }, 1, 1).unwrap();
        assert!(shift_ifp(&l2, 0.1).is_err());
    }

    #[test]
    fn scaled_aggregate_example() {
        let profiles: Vec<_> = [1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, g)| SubsystemProfile::from_kind(i, &DissipativityKind::L2Gain { gamma: *g }, 1, 1).unwrap())
            .collect();
        let agg = assemble_scaled(&profiles, &[2.0, 3.0]).unwrap();
        assert_eq!(agg.x11.data(), &DenseMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 12.0]));
        assert_eq!(agg.x22.data(), &DenseMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -3.0]));
        let zero = assemble_scaled(&profiles, &[0.0, 0.0]).unwrap();
        assert!(zero.x11.data().iter().all(|v| *v == 0.0));
        assert!(assemble_scaled(&profiles, &[1.0]).is_err());
        assert!(assemble_scaled(&profiles, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn ratio_examples() {
        let s = supply_from_kind(&DissipativityKind::StrictlyPassive { nu: -1.0, rho: 0.5 }, 1, 1).unwrap();
        let (l, r) = ratio_blocks(&[SubsystemProfile::new(0, s)]).unwrap();
        assert_eq!(l.data()[(0, 0)], 0.5);
        assert_eq!(r.data()[(0, 0)], 0.5);
        let g = SubsystemProfile::from_kind(0, &DissipativityKind::L2Gain { gamma: 3.0 }, 2, 1).unwrap();
        let (l, r) = ratio_blocks(&[g]).unwrap();
        assert!(l.data().iter().chain(r.data().iter()).all(|v| *v == 0.0));
        let p = SubsystemProfile::from_kind(0, &DissipativityKind::Passive, 1, 1).unwrap();
        assert!(matches!(ratio_blocks(&[p]), Err(Error::Singular(_))));
    }

    #[test]
    fn assumption_reports() {
        let p = SubsystemProfile::from_kind(3, &DissipativityKind::Passive, 1, 1).unwrap();
        let report = check_assumption1(&[p]);
        assert!(!report.satisfied);
        assert_eq!(report.offenders, vec![0]);
        assert!(report.messages[0].contains("shift_ifp"));
        let y = supply_from_kind(&DissipativityKind::StrictlyPassive { nu: 0.0, rho: 0.3 }, 2, 2).unwrap();
        assert!(check_assumption2(&y).satisfied);
        let y = supply_from_kind(&DissipativityKind::Passive, 2, 2).unwrap();
        assert!(!check_assumption2(&y).satisfied);
    }

    #[test]
    fn general_kind_round_trip() {
        let kind = DissipativityKind::General {
            x: vec![vec![1.0, 0.2], vec![0.2, -3.0]],
        };
        let s = supply_from_kind(&kind, 1, 1).unwrap();
        assert_eq!(s.x12, scalar(0.2));
        let bad = DissipativityKind::General {
            x: vec![vec![1.0, 0.2], vec![0.3, -3.0]],
        };
        assert!(supply_from_kind(&bad, 1, 1).is_err());
    }
}
