use nalgebra::DMatrix;
use proptest::prelude::*;
use symcon_core::measures::{induced_norm, matrix_measure, measure_limit_estimate, MeasureKind, Norm};

fn matrix(max_n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| DMatrix::from_row_slice(n, n, &v))
    })
}

fn kinds() -> [MeasureKind; 3] {
    [
        MeasureKind::new(Norm::One),
        MeasureKind::new(Norm::Two),
        MeasureKind::new(Norm::Infinity),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn subadditive(a in matrix(6), seed in any::<u64>()) {
        let n = a.nrows();
        let b = DMatrix::from_fn(n, n, |i, j| (((seed >> ((i * n + j) % 60)) & 0xff) as f64 - 127.0) / 32.0);
        for kind in kinds() {
            let lhs = matrix_measure(&(&a + &b), &kind).unwrap();
            let rhs = matrix_measure(&a, &kind).unwrap() + matrix_measure(&b, &kind).unwrap();
            prop_assert!(lhs <= rhs + 1e-9);
        }
    }

    #[test]
    fn dominates_spectral_abscissa(a in matrix(6)) {
        let abscissa = a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        for kind in kinds() {
            prop_assert!(matrix_measure(&a, &kind).unwrap() >= abscissa - 1e-8);
        }
    }

    #[test]
    fn weighted_equals_measure_of_conjugate(a in matrix(5), d in proptest::collection::vec(0.1f64..10.0, 5)) {
        let n = a.nrows();
        let mut theta = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d[..n].to_vec()));
        if n > 1 {
            theta[(0, n - 1)] = 0.5;
        }
        for base in [Norm::One, Norm::Two, Norm::Infinity] {
            let kind = MeasureKind::weighted(base, theta.clone()).unwrap();
            let conj = kind.conjugate(&a).unwrap();
            prop_assert_eq!(
                matrix_measure(&a, &kind).unwrap(),
                matrix_measure(&conj, &MeasureKind::new(base)).unwrap()
            );
        }
    }

    #[test]
    fn limit_quotient_tracks_closed_form(a in matrix(8)) {
        for kind in kinds() {
            let closed = matrix_measure(&a, &kind).unwrap();
            let quotient = measure_limit_estimate(&a, &kind, 1e-7).unwrap();
            let scale = 1.0 + induced_norm(&a, kind.base);
            prop_assert!((closed - quotient).abs() <= 1e-4 * scale, "{closed} vs {quotient}");
        }
    }
}
