use proptest::collection::vec;
use proptest::prelude::*;
use subboost::bounds::{complexity_term, default_grid, evaluate_bound, margin_term, BoundInputs};

proptest! {
    #[test]
    fn decomposition_and_minimality(
        margins in vec(-2.0f64..5.0, 1..200),
        b_total in 0.0f64..5.0,
        x in 0.0f64..50.0,
        delta in 0.001f64..0.5,
    ) {
        prop_assume!(margins.iter().any(|m| *m > 0.01));
        let inputs = BoundInputs { margins: margins.clone(), b_total, x, delta };
        let grid = default_grid(&margins, 64).unwrap();
        let r = evaluate_bound(&inputs, &grid).unwrap();
        for p in &r.points {
            prop_assert!((p.bound - (p.margin_term + p.complexity_term + p.confidence_term)).abs() <= 1e-12);
            prop_assert!(r.bound_at_star <= p.bound);
        }
        prop_assert_eq!(r.vacuous, r.bound_at_star >= 1.0);
    }

    #[test]
    fn term_monotonicity(margins in vec(-2.0f64..5.0, 1..100), x in 0.1f64..10.0, b in 0.1f64..10.0) {
        prop_assume!(margins.iter().any(|m| *m > 0.01));
        let grid = default_grid(&margins, 32).unwrap();
        for w in grid.windows(2) {
            prop_assert!(margin_term(&margins, w[0]).unwrap() <= margin_term(&margins, w[1]).unwrap());
            prop_assert!(complexity_term(x, b, w[0], 100).unwrap() > complexity_term(x, b, w[1], 100).unwrap());
        }
    }

    #[test]
    fn complexity_is_additive_over_rounds(per_round in vec(0.0f64..2.0, 1..30), x in 0.0f64..100.0, theta in 0.01f64..10.0, n in 1usize..100_000) {
        let total: f64 = per_round.iter().sum();
        let whole = complexity_term(x, total, theta, n).unwrap();
        let parts: f64 = per_round.iter().map(|b| complexity_term(x, *b, theta, n).unwrap()).sum();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
    }
}
