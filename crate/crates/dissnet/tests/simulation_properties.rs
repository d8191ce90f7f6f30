use dissnet::dissipativity::{DissipativityKind, SubsystemProfile};
use dissnet::linalg::DenseMatrix;
use dissnet::lti_sim::{builtin_study, decay_metric, simulate, ClosedLoop, Excitation, FirstOrderDelaySiso};
use dissnet::nsc::{InterconnectionMatrix, NscProblem, Variant};
use proptest::prelude::*;

fn single_loop(sys: FirstOrderDelaySiso, m: f64) -> ClosedLoop {
    let problem = NscProblem::nsc1(vec![SubsystemProfile::from_kind(0, &DissipativityKind::L2Gain { gamma: 1.0 }, 1, 1).unwrap()]);
    let mm = InterconnectionMatrix::from_full(Variant::Nsc1, problem.layout(), DenseMatrix::from_element(1, 1, m)).unwrap();
    ClosedLoop::new(vec![sys], vec![], mm)
}

/// `|G(jω)|` of `(a s + b)/(s + c)`; the delay does not change the magnitude.
fn magnitude(sys: &FirstOrderDelaySiso, w: f64) -> f64 {
    (sys.b * sys.b + (sys.a * w).powi(2)).sqrt() / (sys.c * sys.c + w * w).sqrt()
}

#[test]
fn study_gains_bound_the_frequency_response() {
    let s = builtin_study();
    for (sys, g2) in s.controllers.iter().zip(&s.gamma_sq) {
        let peak = (0..=600).map(|k| magnitude(sys, 10f64.powf(-3.0 + k as f64 / 100.0))).fold(0.0, f64::max);
        assert!(peak <= g2.sqrt() * 1.02, "peak {peak} exceeds gain {}", g2.sqrt());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn undelayed_step_shows_feedthrough_and_dc_gain(a in -2.0f64..2.0, b in -2.0f64..2.0, c in 0.5f64..3.0) {
        let sys = FirstOrderDelaySiso::new(a, b, c, 0.0).unwrap();
        let mut lp = single_loop(sys, 0.0).with_timing(0.01, 60.0 / c);
        lp.excitation = Excitation { amplitude: 1.0, start: 0.0, width: 1e9 };
        let ts = simulate(&lp).unwrap();
        let y = ts.channel("y1").unwrap();
        prop_assert_eq!(y[0], a);
        prop_assert!((y.last().unwrap() - sys.dc_gain()).abs() < 1e-9);
    }

    #[test]
    fn halving_the_step_barely_moves_the_decay_ratio(m in 0.05f64..0.4, steps in 0u32..=100) {
        let delay = f64::from(steps) * 0.01;
        let sys = FirstOrderDelaySiso::new(0.0, 2.0, 1.0, delay).unwrap();
        let coarse = decay_metric(&simulate(&single_loop(sys, m).with_timing(0.01, 80.0)).unwrap()).unwrap();
        let fine = decay_metric(&simulate(&single_loop(sys, m).with_timing(0.005, 80.0)).unwrap()).unwrap();
        prop_assert!(coarse.decayed && fine.decayed);
        prop_assert!((coarse.ratio - fine.ratio).abs() <= 0.1 * coarse.ratio.max(1e-12), "{} vs {}", coarse.ratio, fine.ratio);
    }
}
