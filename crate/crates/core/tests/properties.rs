use std::sync::Arc;

use chemolab::evolve::{dt_max, step, EvolutionState};
use chemolab::mesh::{build_grid, integrate, DomainSpec, Grid};
use chemolab::steady::ModelParams;
use chemolab::ScalarField;
use proptest::prelude::*;

fn grid() -> Arc<Grid> {
    build_grid(&DomainSpec::unit_interval(), &[33]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// One implicit step keeps u positive and v in (0, γ), and the mass
    /// changes exactly by the discrete logistic source.
    #[test]
    fn step_preserves_positivity_and_mass_balance(
        vals in prop::collection::vec(1e-6f64..5.0, 33),
        gamma in 0.01f64..1.0,
        frac in 0.05f64..1.0,
    ) {
        let g = grid();
        let params = ModelParams { gamma, ..ModelParams::default() };
        let u0 = ScalarField::new(&g, vals).unwrap();
        let s0 = EvolutionState::initial(u0, &params).unwrap();
        let dt = (frac * dt_max(&g, s0.v.values())).min(0.1);
        let s1 = step(&s0, dt, &params).unwrap();
        prop_assert!(s1.u.min() > 0.0);
        prop_assert!(s1.v.min() > 0.0 && s1.v.max() < gamma);
        // Patankar form: (u1 − u0)/dt = λ u0 − μ u0 u1 node by node, summed.
        let source: Vec<f64> = s0.u.values().iter().zip(s1.u.values())
            .map(|(a, b)| params.lambda * a - params.mu * a * b).collect();
        let src = integrate(&ScalarField::new(&g, source).unwrap());
        let change = (integrate(&s1.u) - integrate(&s0.u)) / dt;
        prop_assert!((change - src).abs() <= 1e-9 * (1.0 + src.abs()), "{} vs {}", change, src);
    }
}
