use dissnet::linalg::{min_eigenvalue, DenseMatrix};
use dissnet::sdp::{solve, AffineMatrixExpr, SdpProblem, Sense, SolveOptions, Var};
use proptest::prelude::*;

/// `F0 + Σ x_k F_k ⪰ margin` with `x` confined to the unit ball, minimizing `c·x`.
#[derive(Debug, Clone)]
struct Instance {
    f0: DenseMatrix,
    fs: Vec<DenseMatrix>,
    cost: Vec<f64>,
}

fn symmetric(n: usize) -> impl Strategy<Value = DenseMatrix> {
    proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let a = DenseMatrix::from_row_slice(n, n, &v);
        (&a + a.transpose()) * 0.5
    })
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=3, 1usize..=3)
        .prop_flat_map(|(n, k)| (symmetric(n), proptest::collection::vec(symmetric(n), k), proptest::collection::vec(-1.0f64..1.0, k)))
        .prop_map(|(a, fs, cost)| {
            let n = a.nrows();
            // Strictly feasible at x = 0.
            let f0 = &a + DenseMatrix::identity(n, n) * (0.5 - min_eigenvalue(&a));
            Instance { f0, fs, cost }
        })
}

fn build(inst: &Instance, margin: f64) -> (SdpProblem, Vec<Var>) {
    let mut p = SdpProblem::new();
    let xs: Vec<Var> = (0..inst.fs.len()).map(|k| p.add_scalar(format!("x{k}"), None)).collect();
    let n = inst.f0.nrows();
    let mut lmi = AffineMatrixExpr::new(n);
    lmi.constant_sym(0, &inst.f0);
    for (x, f) in xs.iter().zip(&inst.fs) {
        lmi.scalar_sym(x.scalar(), 0, f);
    }
    p.add_psd(lmi, margin, "lmi");
    let k = xs.len();
    let mut ball = AffineMatrixExpr::new(k + 1);
    ball.constant_sym(0, &DenseMatrix::identity(k + 1, k + 1));
    for (i, x) in xs.iter().enumerate() {
        ball.scalar_block(x.scalar(), 0, i + 1, &DenseMatrix::from_element(1, 1, 1.0));
    }
    p.add_psd(ball, 0.0, "unit ball");
    p.set_objective(Sense::Minimize, xs.iter().zip(&inst.cost).map(|(x, c)| (x.scalar(), *c)).collect());
    (p, xs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn successful_solutions_satisfy_every_constraint(inst in instance()) {
        let (p, _) = build(&inst, 1e-3);
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        prop_assert!(sol.status.is_success(), "{:?}: {}", sol.status, sol.message);
        for (i, c) in p.psd_constraints().iter().enumerate() {
            let value = p.evaluate_constraint(i, &sol.assignment).unwrap();
            prop_assert!(min_eigenvalue(&value) >= c.margin - 1e-9);
        }
    }

    #[test]
    fn solving_twice_gives_the_same_answer(inst in instance()) {
        let (p, _) = build(&inst, 1e-3);
        let a = solve(&p, &SolveOptions::default()).unwrap();
        let b = solve(&p, &SolveOptions::default()).unwrap();
        prop_assert_eq!(a.status, b.status);
        prop_assert!((a.objective_value.unwrap() - b.objective_value.unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn loosening_the_margin_never_hurts(inst in instance()) {
        let tight = solve(&build(&inst, 0.2).0, &SolveOptions::default()).unwrap();
        let loose = solve(&build(&inst, 0.01).0, &SolveOptions::default()).unwrap();
        prop_assert!(loose.status.is_success());
        if tight.status.is_success() {
            let scale = 1.0 + inst.cost.iter().map(|c| c.abs()).sum::<f64>();
            prop_assert!(loose.objective_value.unwrap() <= tight.objective_value.unwrap() + 1e-6 * scale);
        }
    }
}
