//! Plain-text export of a problem in SDPA-like sparse triplet form, for
//! cross-checking against external solvers.
//!
//! The first line holds the number of free scalars, then the number of blocks,
//! then the block sizes. The second line is the objective vector (minimization).
//! Each further line is `var block row col value` with 1-based indices; `var = 0`
//! is the constant part, and only the upper triangle is written. Scalar
//! inequalities form one trailing diagonal block; equalities are written as a
//! pair of opposite inequalities.

use std::fmt::Write;

use super::{ipm::StandardForm, SdpProblem, SolveOptions};

pub fn write_triplets(problem: &SdpProblem) -> String {
    let std = StandardForm::build(problem, &SolveOptions::default());
    let data = std.dump_data();
    let lp_rows = data.ineq.len() + 2 * data.eq.len();
    let mut dims: Vec<usize> = data.blocks.iter().map(|b| b.0).collect();
    if lp_rows > 0 {
        dims.push(lp_rows);
    }
    let mut out = String::new();
    let dim_text: Vec<String> = dims
        .iter()
        .enumerate()
        .map(|(k, d)| if lp_rows > 0 && k + 1 == dims.len() { format!("-{d}") } else { d.to_string() })
        .collect();
    let _ = writeln!(out, "{} {} {}", data.n, dims.len(), dim_text.join(" "));
    let c: Vec<String> = data.c.iter().map(|v| format!("{v:e}")).collect();
    let _ = writeln!(out, "{}", c.join(" "));
    for (k, (dim, f0, coeffs)) in data.blocks.iter().enumerate() {
        for a in 0..*dim {
            for b in a..*dim {
                let v = f0[(a, b)];
                if v != 0.0 {
                    let _ = writeln!(out, "0 {} {} {} {v:e}", k + 1, a + 1, b + 1);
                }
            }
        }
        for (var, entries) in coeffs {
            for &(a, b, v) in entries.iter() {
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                let _ = writeln!(out, "{} {} {} {} {v:e}", var + 1, k + 1, a + 1, b + 1);
            }
        }
    }
    if lp_rows > 0 {
        let block = dims.len();
        let mut row = 0;
        let mut emit = |out: &mut String, coeffs: &[(usize, f64)], constant: f64, sign: f64| {
            row += 1;
            if constant != 0.0 {
                let _ = writeln!(out, "0 {block} {row} {row} {:e}", sign * constant);
            }
            for &(i, v) in coeffs {
                let _ = writeln!(out, "{} {block} {row} {row} {:e}", i + 1, sign * v);
            }
        };
        for (coeffs, constant) in &data.ineq {
            emit(&mut out, coeffs, *constant, 1.0);
        }
        for (coeffs, rhs) in &data.eq {
            emit(&mut out, coeffs, -rhs, 1.0);
            emit(&mut out, coeffs, -rhs, -1.0);
        }
    }
    out
}
