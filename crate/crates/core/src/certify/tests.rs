use super::*;
use crate::expr::parse_expression;
use crate::model::parse_model;
use crate::sim::{integrate, SolverConfig};

fn system(src: &str) -> SystemModel {
    parse_model(src).unwrap().into_system().unwrap()
}

fn chain4(k: f64) -> NetworkSpec {
    parse_model(&format!(
        "params\n k = {k}\ntemplate cell {{\n states x\n d/dt x = -x\n}}\nnodes 1..4 : cell\n\
         coupling outer(j, i) = k*j - k*i\ncoupling inner(j, i) = k*j - k*i\n\
         edge 1 <-> 2, 3 <-> 4 : outer\nedge 2 <-> 3 : inner\n"
    ))
    .unwrap()
    .network()
    .unwrap()
    .clone()
}

fn mirror_then_all() -> Vec<Partition> {
    vec![
        Partition::from_assignment(&[0, 1, 1, 0]),
        Partition::single(4),
    ]
}

fn cfg(samples: usize) -> CertifyConfig {
    CertifyConfig::default().with_samples(samples)
}

#[test]
fn scalar_decay_and_growth() {
    let m = system("states x\ndynamics\n d/dt x = -x\n");
    for base in [Norm::One, Norm::Two, Norm::Infinity] {
        let c = certify_contraction(&m, &m.default_box(), &MeasureKind::new(base), &cfg(50)).unwrap();
        assert!(c.passed());
        assert!((c.margin - 1.0).abs() < 1e-14);
    }
    let m = system("states x\ndynamics\n d/dt x = x\n");
    let c = certify_contraction(&m, &m.default_box(), &MeasureKind::new(Norm::Two), &cfg(50)).unwrap();
    assert!(!c.passed());
    assert!(c.witness.is_some());
    let json = serde_json::to_value(&c).unwrap();
    for key in ["target", "measure", "weight", "box", "samples", "max_mu", "margin", "status", "witness", "model_hash"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["status"], "fail");
}

#[test]
fn weighted_one_norm_on_the_feedforward_loop() {
    let m = system(
        "params\n alpha1 = 1\n alpha2 = 1\n beta2 = 1\nstates Y Z\ninputs\n chi = 1\n\
         dynamics\n d/dt Y = -alpha1*Y + chi\n d/dt Z = beta2*chi/Y - alpha2*Z\n\
         box\n Y in [0.5, 10]\n Z in [0, 10]\n chi in [1, 10]\n",
    );
    let eps = 0.01;
    let kind = MeasureKind::weighted(Norm::One, DMatrix::from_diagonal(&nalgebra::dvector![1.0, eps])).unwrap();
    let c = certify_contraction(&m, &m.default_box(), &kind, &cfg(4000)).unwrap();
    assert!(c.passed());
    // Oracle: Θ J Θ⁻¹ = [[-1, 0], [-ε χ/Y², -1]]; its column-sum measure is
    // -1 + ε χ/Y², maximal at the corner Y = 0.5, χ = 10.
    let mut oracle = f64::NEG_INFINITY;
    for a in 0..100 {
        for b in 0..100 {
            let y = 0.5 + 9.5 * a as f64 / 99.0;
            let chi = 1.0 + 9.0 * b as f64 / 99.0;
            oracle = oracle.max((-1.0 + eps * chi / (y * y)).max(-1.0));
        }
    }
    assert!((c.max_mu - oracle).abs() < 1e-12, "{} vs {oracle}", c.max_mu);
    assert!((c.reevaluate(&m, &kind).unwrap() - c.max_mu).abs() <= 1e-12);
}

#[test]
fn pole_inside_the_box_is_reported() {
    let m = system("states x\ndynamics\n d/dt x = -1/x\nbox\n x in [-1, 1]\n");
    let err = certify_contraction(&m, &m.default_box(), &MeasureKind::new(Norm::Two), &cfg(20));
    // The corner samples avoid 0 but the Jacobian 1/x² is still finite; a
    // square-root pole is not.
    assert!(err.is_ok());
    let m = system("states x\ndynamics\n d/dt x = -sqrt(x)\nbox\n x in [-1, 1]\n");
    match certify_contraction(&m, &m.default_box(), &MeasureKind::new(Norm::Two), &cfg(20)) {
        Err(CertifyError::Jacobian { x, .. }) => assert!(x[0] <= 0.0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn chain_toward_mirror_subspace() {
    let spec = chain4(1.0);
    let m = spec.assemble().unwrap();
    let s = synchrony_subspace(&m, &mirror_then_all()[0]).unwrap();
    let c = certify_toward_subspace(&m, &s, &m.default_box(), &MeasureKind::new(Norm::Two), &cfg(100)).unwrap();
    // V J Vᵀ = [[-2, 1], [1, -4]] in the (x4 − x1, x3 − x2) coordinates.
    let oracle = -3.0 + 2f64.sqrt();
    assert!((c.max_mu - oracle).abs() < 1e-10, "{}", c.max_mu);
    assert!((c.reevaluate(&m, &MeasureKind::new(Norm::Two)).unwrap() - c.max_mu).abs() <= 1e-12);

    let expanding = system("states a b\ndynamics\n d/dt a = a\n d/dt b = b\n");
    let s = Subspace::from_basis(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
    let c = certify_toward_subspace(&expanding, &s, &expanding.default_box(), &MeasureKind::new(Norm::One), &cfg(10))
        .unwrap();
    assert!(!c.passed());
    assert!(matches!(
        certify_toward_subspace(&expanding, &Subspace::full(2), &expanding.default_box(), &MeasureKind::new(Norm::One), &cfg(10)),
        Err(CertifyError::Shape(_))
    ));
}

#[test]
fn chain_cascade_passes_and_synchronizes() {
    let spec = chain4(1.0);
    let cert = certify_cascade(&spec, &mirror_then_all(), &MeasureKind::new(Norm::Two), &cfg(200), None).unwrap();
    assert!(cert.status.passed());
    assert_eq!(cert.stages.len(), 2);
    assert!((cert.stages[0].certificate.margin - (3.0 - 2f64.sqrt())).abs() < 1e-10);
    // quotient: ẋa = -2xa + xb, ẋb = xa - 2xb toward xa = xb gives -3
    assert!((cert.stages[1].certificate.margin - 3.0).abs() < 1e-10);
    assert_eq!(cert.stages[1].clusters_from, vec![vec!["1", "4"], vec!["2", "3"]]);

    let m = spec.assemble().unwrap();
    let a = integrate(&m, &[1.0, -2.0, 3.0, 0.5], &SolverConfig::rk45(10.0, 1e-10, 1e-13)).unwrap();
    let b = integrate(&m, &[-1.0, 2.0, 0.0, 4.0], &SolverConfig::rk45(10.0, 1e-10, 1e-13)).unwrap();
    // Both trajectories contract at least at the full-state rate 1.
    let fit = estimate_contraction_rate(&a, &b, (0.0, 10.0)).unwrap();
    assert!(fit.rate >= 1.0 - 0.05, "{}", fit.rate);
}

#[test]
fn repulsive_chain_fails_at_the_first_stage() {
    let cert = certify_cascade(&chain4(-1.0), &mirror_then_all(), &MeasureKind::new(Norm::Two), &cfg(50), None).unwrap();
    assert_eq!(cert.failed_stage, Some(0));
    assert!(!cert.status.passed());
}

#[test]
fn cascade_agrees_with_the_scalar_condition() {
    // With g = −x and h = kx the scalar test is 1 + k > 0. The mirror stage
    // reduces to [[−(1+k), k], [k, −(1+3k)]], which has a positive eigenvalue
    // when 1 + 4k + 2k² < 0, so the two verdicts agree outside
    // (−1, −1 + 1/√2) and split inside it.
    for k in [-2.0, -1.0, -0.2, 0.25, 1.0, 3.0, -0.5, -0.8] {
        let scalar = system(&format!("params\n k = {k}\nstates x\ndynamics\n d/dt x = -x - k*x\n"));
        let s = certify_contraction(&scalar, &scalar.default_box(), &MeasureKind::new(Norm::Two), &cfg(10)).unwrap();
        let c = certify_cascade(&chain4(k), &mirror_then_all(), &MeasureKind::new(Norm::Two), &cfg(50), None).unwrap();
        let split = 1.0 + k > 0.0 && 1.0 + 4.0 * k + 2.0 * k * k < 0.0;
        assert_eq!(s.passed(), 1.0 + k > 0.0, "k = {k}");
        if split {
            assert!(s.passed() && c.failed_stage == Some(0), "k = {k}");
        } else {
            assert_eq!(s.passed(), c.status.passed(), "k = {k}");
        }
    }
}

#[test]
fn cascade_rejects_bad_nesting() {
    let spec = chain4(1.0);
    let bad = vec![Partition::single(4), Partition::from_assignment(&[0, 1, 1, 0])];
    assert!(matches!(
        certify_cascade(&spec, &bad, &MeasureKind::new(Norm::Two), &cfg(10), None),
        Err(CertifyError::Nesting(_))
    ));
    let unbalanced = vec![Partition::from_assignment(&[0, 0, 1, 1]), Partition::single(4)];
    assert!(certify_cascade(&spec, &unbalanced, &MeasureKind::new(Norm::Two), &cfg(10), None).is_err());
}

#[test]
fn hierarchical_groupings() {
    let tri = system("states a b c\ndynamics\n d/dt a = -a\n d/dt b = -2*b + sin(a)\n d/dt c = -c + b\n");
    let groups = vec![vec!["a".to_string()], vec!["b".to_string(), "c".to_string()]];
    // The {b, c} block [[-2, 0], [1, -1]] has μ∞ = 0 but μ₁ = −1.
    let kinds = vec![Some(MeasureKind::new(Norm::Two)), Some(MeasureKind::new(Norm::One))];
    let h = certify_hierarchical(&tri, &groups, &kinds, &tri.default_box(), &cfg(200), None).unwrap();
    assert!(h.status.passed());
    assert_eq!(h.orientation, "lower");
    assert_eq!(h.off_diagonal.len(), 1);
    // sup |cos a| over [-5, 5] is 1 (a = 0 is sampled by Halton only approximately)
    assert!(h.off_diagonal[0].2 <= 1.0 && h.off_diagonal[0].2 > 0.99);
    let strict = certify_hierarchical(&tri, &groups, &kinds, &tri.default_box(), &cfg(200), Some(0.5)).unwrap();
    assert!(!strict.status.passed());

    let coupled = system("states a b\ndynamics\n d/dt a = -a + b\n d/dt b = -b + a\n");
    let g = vec![vec!["a".to_string()], vec!["b".to_string()]];
    let k = vec![Some(MeasureKind::new(Norm::Two)); 2];
    assert!(matches!(
        certify_hierarchical(&coupled, &g, &k, &coupled.default_box(), &cfg(10), None),
        Err(CertifyError::Grouping(_))
    ));

    let diag = system("states a b\ndynamics\n d/dt a = -a\n d/dt b = -3*b\n");
    let h = certify_hierarchical(&diag, &g, &k, &diag.default_box(), &cfg(10), None).unwrap();
    assert!(h.status.passed() && h.off_diagonal.is_empty());
}

#[test]
fn second_order_ratio_condition() {
    let ratio = parse_expression("u/x").unwrap();
    let c = certify_second_order(0.1, &ratio, (1.0, 10.0), (1.0, 4.0), &cfg(500)).unwrap();
    assert!(c.status.passed() && c.ratio_condition);
    // inf (−u/x) = −4 against −1/(2ε) = −5
    assert!((c.margin - 1.0).abs() < 1e-12, "{}", c.margin);
    assert!((c.slope_sup - 1.0).abs() < 1e-12);

    let c = certify_second_order(0.1, &ratio, (0.1, 0.5), (1.0, 4.0), &cfg(500)).unwrap();
    assert!(!c.status.passed() && !c.ratio_condition);
    assert_eq!(c.witness, (0.1, 4.0));

    let atan = parse_expression("arctan(u/x)").unwrap();
    let c = certify_second_order(0.05, &atan, (1.0, 10.0), (1.0, 4.0), &cfg(500)).unwrap();
    assert!(c.status.passed() && c.ratio_condition);
    assert!(c.slope_sup <= 1.0);

    let not_ratio = parse_expression("u - x").unwrap();
    assert!(matches!(
        certify_second_order(0.1, &not_ratio, (1.0, 10.0), (1.0, 4.0), &cfg(50)),
        Err(CertifyError::Shape(_))
    ));
    assert!(certify_second_order(0.0, &ratio, (1.0, 10.0), (1.0, 4.0), &cfg(50)).is_err());
}

#[test]
fn virtual_systems() {
    let real = system("states x\ndynamics\n d/dt x = -x + sin(x)/2\n");
    let same = system("states y\ninputs\n x = external\ndynamics\n d/dt y = -y + sin(y)/2\n");
    let vbox = same.default_box();
    let vbox = SampleBox {
        inputs: Vec::new(),
        ..vbox
    };
    let c = certify_virtual(
        &same,
        &real,
        &VirtualBinding::identity(1),
        &real.default_box(),
        &vbox,
        &MeasureKind::new(Norm::Two),
        &cfg(200),
    )
    .unwrap();
    assert_eq!(c.consistency.max_residual, 0.0);
    assert!(c.status.passed());
    // Treating the nonlinearity as an input: v(y, x) = −y + sin(x)/2.
    let split = system("states y\ninputs\n x = external\ndynamics\n d/dt y = -y + sin(x)/2\n");
    let c = certify_virtual(&split, &real, &VirtualBinding::identity(1), &real.default_box(), &vbox, &MeasureKind::new(Norm::Two), &cfg(200))
        .unwrap();
    assert!(c.status.passed());
    assert!((c.contraction.margin - 1.0).abs() < 1e-14);

    let wrong = system("states y\ninputs\n x = external\ndynamics\n d/dt y = -y + sin(x)\n");
    let c = certify_virtual(&wrong, &real, &VirtualBinding::identity(1), &real.default_box(), &vbox, &MeasureKind::new(Norm::Two), &cfg(200))
        .unwrap();
    assert!(!c.consistency.pass && c.consistency.witness.is_some());
    assert!(!c.status.passed());

    let bad = VirtualBinding { copies: vec![vec![0, 1]] };
    assert!(matches!(
        certify_virtual(&same, &real, &bad, &real.default_box(), &vbox, &MeasureKind::new(Norm::Two), &cfg(10)),
        Err(CertifyError::Dimension(_))
    ));
}

#[test]
fn sampled_conditions() {
    let c = parse_expression("1/(2*eps) - (u/x + u*K*z/x^2)").unwrap();
    let ranges = vec![
        ("x".to_string(), (1.0, 10.0)),
        ("u".to_string(), (1.0, 3.0)),
        ("z".to_string(), (0.0, 1.0)),
    ];
    let params = vec![("eps".to_string(), 0.05), ("K".to_string(), 0.25)];
    let r = certify_condition(&c, &ranges, &params, &cfg(300)).unwrap();
    // worst corner x = 1, u = 3, z = 1: 10 − (3 + 0.75)
    assert!((r.margin - 6.25).abs() < 1e-12 && r.status.passed());
    assert_eq!(r.witness, vec![1.0, 3.0, 1.0]);
    assert!(certify_condition(&c, &ranges[..2], &params, &cfg(10)).is_err());
}

#[test]
fn identical_trajectories_underflow() {
    let m = system("states x\ndynamics\n d/dt x = -x\n");
    let a = integrate(&m, &[1.0], &SolverConfig::rk4(2.0, 0.1)).unwrap();
    assert!(matches!(estimate_contraction_rate(&a, &a, (0.0, 2.0)), Err(CertifyError::Sim(_))));
}
