use dissnet::analysis::{analyze, evaluate_fixed, AnalysisOptions, AnalysisPath};
use dissnet::dissipativity::{supply_from_kind, DissipativityKind, SubsystemProfile};
use dissnet::linalg::DenseMatrix;
use dissnet::nsc::{template_mask, InterconnectionMatrix, NscProblem, TemplateName, Topology, TopologyMode, Variant, COL_GROUPS, ROW_GROUPS};
use dissnet::synthesis::{synthesize, SynthesisRequest};
use proptest::prelude::*;

fn l2(id: usize, gamma: f64) -> SubsystemProfile {
    SubsystemProfile::from_kind(id, &DissipativityKind::L2Gain { gamma }, 1, 1).unwrap()
}

fn gains() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.2f64..3.0, 1..=3)
}

fn adjacency(n: usize, bits: &[bool]) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = if bits[k] { 1.0 } else { 0.0 };
            a[(i, j)] = v;
            a[(j, i)] = v;
            k += 1;
        }
    }
    a
}

fn nsc1_with_m() -> impl Strategy<Value = (NscProblem, InterconnectionMatrix)> {
    gains()
        .prop_flat_map(|g| {
            let n = g.len();
            (Just(g), proptest::collection::vec(-1.0f64..1.0, n * n), 0.05f64..1.0)
        })
        .prop_map(|(g, entries, scale)| {
            let n = g.len();
            let problem = NscProblem::nsc1(g.iter().enumerate().map(|(i, v)| l2(i, *v)).collect());
            let data = DenseMatrix::from_row_slice(n, n, &entries) * scale;
            let m = InterconnectionMatrix::from_full(Variant::Nsc1, problem.layout(), data).unwrap();
            (problem, m)
        })
}

fn nsc4(gammas: &[f64]) -> NscProblem {
    let n = gammas.len();
    let plants = gammas.iter().enumerate().map(|(i, g)| l2(i, 0.5 * g)).collect();
    let spec = supply_from_kind(&DissipativityKind::L2Gain { gamma: 20.0 }, n, n).unwrap();
    NscProblem {
        variant: Variant::Nsc4,
        subsystems: gammas.iter().enumerate().map(|(i, g)| l2(i, *g)).collect(),
        plants,
        spec: Some(spec),
        exogenous_dims: vec![1; n],
        performance_dims: vec![1; n],
        topology: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn certificates_survive_positive_rescaling((problem, m) in nsc1_with_m(), c in 0.01f64..100.0) {
        let r = analyze(&problem, &m, &AnalysisOptions::default()).unwrap();
        prop_assume!(r.certified());
        let scaled: Vec<f64> = r.p.iter().map(|v| v * c).collect();
        prop_assert!(evaluate_fixed(&problem, &m, &scaled, &[], AnalysisPath::Embedded).unwrap().certified());
        prop_assert!(evaluate_fixed(&problem, &m, &scaled, &[], AnalysisPath::Raw).unwrap().certified());
    }

    #[test]
    fn topology_does_not_change_analysis((problem, m) in nsc1_with_m(), bits in proptest::collection::vec(any::<bool>(), 3)) {
        let n = problem.agents();
        let a = adjacency(n, &bits);
        let constrained = problem.clone().with_topology(Topology::new(a.clone(), a, TopologyMode::Hard).unwrap());
        let free = analyze(&problem, &m, &AnalysisOptions::default()).unwrap();
        let bound = analyze(&constrained, &m, &AnalysisOptions::default()).unwrap();
        prop_assert_eq!(free.certified(), bound.certified());
    }

    #[test]
    fn hard_synthesis_is_certified_and_respects_the_graph(g in gains(), bits in proptest::collection::vec(any::<bool>(), 3)) {
        let n = g.len();
        let a = adjacency(n, &bits);
        let topology = Topology::new(a.clone(), DenseMatrix::from_element(n, n, 1.0), TopologyMode::Hard).unwrap();
        let problem = NscProblem::nsc1(g.iter().enumerate().map(|(i, v)| l2(i, *v)).collect()).with_topology(topology.clone());
        let r = synthesize(&SynthesisRequest::new(problem.clone())).unwrap();
        prop_assert!(r.is_success());
        let m = r.m.unwrap();
        for i in 0..n {
            for j in 0..n {
                if i != j && a[(i, j)] == 0.0 {
                    prop_assert_eq!(m.full()[(i, j)], 0.0);
                }
            }
        }
        prop_assert!(analyze(&problem, &m, &AnalysisOptions::default()).unwrap().certified());
    }

    #[test]
    fn templates_appear_verbatim(
        g in proptest::collection::vec(0.1f64..0.8, 1..=2),
        name in prop_oneof![
            Just(TemplateName::Series),
            Just(TemplateName::Parallel),
            Just(TemplateName::Feedback),
            Just(TemplateName::FeedbackReconfiguration),
            Just(TemplateName::ApproximateSimulation),
        ],
    ) {
        let problem = nsc4(&g);
        let template = template_mask(name, Variant::Nsc4, &problem.layout()).unwrap();
        let r = synthesize(&SynthesisRequest::new(problem.clone()).with_template(template.clone())).unwrap();
        prop_assume!(r.is_success());
        let m = r.m.unwrap();
        let fixed = template.fixed_values(Variant::Nsc4, &problem.layout()).unwrap();
        for row in ROW_GROUPS {
            for col in COL_GROUPS {
                if let Some(v) = fixed.get(&(row, col)) {
                    prop_assert_eq!(&m.block(row, col), v);
                }
            }
        }
        prop_assert!(analyze(&problem, &m, &AnalysisOptions::default()).unwrap().certified());
    }

    #[test]
    fn scalar_synthesis_obeys_small_gain(gamma in 0.05f64..20.0) {
        let r = synthesize(&SynthesisRequest::new(NscProblem::nsc1(vec![l2(0, gamma)]))).unwrap();
        let m = r.m.unwrap().full()[(0, 0)];
        prop_assert!(m.abs() * gamma < 1.0);
    }
}
