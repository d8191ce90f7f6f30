use dissnet::analysis::{analyze, AnalysisOptions};
use dissnet::decentralized::{add_subsystem, decentralized_synth_nsc1, run_test_session, Addition, DecentralizedOptions};
use dissnet::dissipativity::{DissipativityKind, SubsystemProfile};
use dissnet::linalg::{min_eigenvalue, BlockMatrix, DenseMatrix};
use dissnet::nsc::NscProblem;
use proptest::prelude::*;

/// A symmetric block matrix whose smallest eigenvalue is `target`.
fn network_matrix() -> impl Strategy<Value = (Vec<usize>, DenseMatrix)> {
    proptest::collection::vec(1usize..=3, 1..=6)
        .prop_flat_map(|part| {
            let d: usize = part.iter().sum();
            (Just(part), proptest::collection::vec(-1.0f64..1.0, d * d), -0.5f64..0.5)
        })
        .prop_map(|(part, v, target)| {
            let d: usize = part.iter().sum();
            let a = DenseMatrix::from_row_slice(d, d, &v);
            let s = (&a + a.transpose()) * 0.5;
            let w = &s + DenseMatrix::identity(d, d) * (target - min_eigenvalue(&s));
            (part, w)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn session_matches_cholesky_and_reconstructs((part, w) in network_matrix()) {
        prop_assume!(min_eigenvalue(&w).abs() > 1e-8);
        let session = run_test_session(&BlockMatrix::new(part.clone(), part, w.clone()).unwrap()).unwrap();
        prop_assert_eq!(session.passed(), w.clone().cholesky().is_some());
        for entry in &session.log {
            prop_assert!(entry.received.iter().all(|(from, _)| *from < entry.agent));
        }
        if session.passed() {
            let r = session.reconstruct().unwrap();
            prop_assert!((&r - &w).amax() <= 1e-8 * (1.0 + w.amax()));
        }
    }

    #[test]
    fn appending_keeps_existing_rows((part, w) in network_matrix(), extra in 1usize..=2, seed in proptest::collection::vec(-1.0f64..1.0, 24)) {
        let base = BlockMatrix::new(part.clone(), part.clone(), w.clone()).unwrap();
        let session = run_test_session(&base).unwrap();
        prop_assume!(session.passed());
        let mut k = 0;
        let mut next = || { k += 1; seed[(k - 1) % seed.len()] * 0.1 };
        let mut row: Vec<DenseMatrix> = part.iter().map(|&s| DenseMatrix::from_fn(extra, s, |_, _| next())).collect();
        row.push(DenseMatrix::identity(extra, extra) * 10.0);
        let grown = add_subsystem(&session, Addition::Row(row), &DecentralizedOptions::default()).unwrap();
        prop_assert_eq!(&grown.agents[..session.agents.len()], &session.agents[..]);
        prop_assert_eq!(grown.log.len(), session.log.len() + 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn enforced_interconnections_certify_centrally(gammas in proptest::collection::vec(0.2f64..3.0, 1..=4)) {
        let problem = NscProblem::nsc1(
            gammas
                .iter()
                .enumerate()
                .map(|(i, g)| SubsystemProfile::from_kind(i, &DissipativityKind::L2Gain { gamma: *g }, 1, 1).unwrap())
                .collect(),
        );
        let (session, m) = decentralized_synth_nsc1(&problem, &DecentralizedOptions::default()).unwrap();
        prop_assert!(session.passed());
        let m = m.unwrap();
        prop_assert!(analyze(&problem, &m, &AnalysisOptions::default()).unwrap().certified());
    }
}
