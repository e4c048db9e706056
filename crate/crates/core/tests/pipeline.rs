use lls_core::schema::{enumerate_moment_indices, enumerate_patterns, ResponsePattern};
use lls_core::{
    conditional_moments, estimate_plane, moment_residual, principal_angles, Basis, MomentMatrix,
    MomentSource, PlaneConfig, Schema, SolverConfig, SyntheticModel,
};
use proptest::prelude::*;

fn max_angle(a: &Basis, b: &Basis) -> f64 {
    principal_angles(a, b).unwrap().into_iter().fold(0.0, f64::max)
}

#[test]
fn sampled_frequencies_concentrate_on_exact_moments() {
    let schema = Schema::new(vec![2, 3, 2, 4, 2]).unwrap();
    let model = SyntheticModel::generate(&schema, 2, 4, 11).unwrap();
    let n = 40_000;
    let data = model.sample_dataset(n, 12).unwrap();
    let patterns = enumerate_patterns(&schema, 2);
    let observed = data.moments(&patterns);
    for (p, f) in patterns.iter().zip(observed) {
        let m = model.exact_moment(p);
        let sd = (m * (1.0 - m)).max(0.0).sqrt() / (n as f64).sqrt();
        assert!((f - m).abs() <= 5.0 * sd + 1e-12, "{}: {} vs {} (sd {})", p, f, m, sd);
    }
}

#[test]
fn exact_pipeline_recovers_plane_and_moments() {
    let schema = Schema::new(vec![3, 2, 2, 3, 2, 2]).unwrap();
    let model = SyntheticModel::generate(&schema, 2, 3, 5).unwrap();
    let m = MomentMatrix::from_source(&model, 2).unwrap();
    let (basis, report) = estimate_plane(&m, &PlaneConfig::default()).unwrap();
    assert_eq!(report.k, 2);
    assert!(max_angle(&basis, model.basis()) < 1e-8);

    let (truth, miss) = model.reexpress(&basis).unwrap();
    assert!(miss < 1e-8);
    let targets: Vec<ResponsePattern> = ["1,2,0,3,0,0", "2,0,1,0,0,0", "0,0,0,0,0,0"]
        .iter()
        .map(|s| ResponsePattern::parse(&schema, s).unwrap())
        .collect();
    let cfg = SolverConfig::default();
    let (table, freq) = conditional_moments(&basis, &model, &targets, &cfg).unwrap();
    assert!(moment_residual(&basis, &freq, &table) < 1e-9);
    for t in &targets {
        for order in 0..=cfg.moment_order {
            for v in enumerate_moment_indices(2, order) {
                let got = table.conditional(t, &v).expect("target moment solved");
                let want = truth.exact_conditional_moment(&v, t).unwrap();
                assert!((got - want).abs() < 1e-7, "{} {}: {} vs {}", t, v, got, want);
            }
        }
    }
}

#[test]
fn sampled_pipeline_with_fixed_dimension_is_close() {
    let schema = Schema::uniform(10, 2).unwrap();
    let model = SyntheticModel::generate(&schema, 2, 3, 21).unwrap();
    let data = model.sample_dataset(100_000, 22).unwrap();
    let m = MomentMatrix::from_dataset(&data, 2).unwrap();
    let cfg = PlaneConfig {
        k_override: Some(2),
        ..PlaneConfig::default()
    };
    let (basis, _) = estimate_plane(&m, &cfg).unwrap();
    assert!(max_angle(&basis, model.basis()) < 0.2);
}

#[test]
fn single_atom_has_rank_one_and_degenerate_plane() {
    let schema = Schema::uniform(5, 2).unwrap();
    let model = SyntheticModel::generate(&schema, 1, 1, 3).unwrap();
    let m = MomentMatrix::from_source(&model, 2).unwrap();
    let (_, report) = estimate_plane(&m, &PlaneConfig::default()).unwrap();
    assert_eq!(report.k0, 1);
    assert_eq!(report.k, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_moments_give_the_true_plane(seed in 0u64..1000, k in 1usize..4, extra in 0usize..3) {
        let schema = Schema::new(vec![2, 3, 2, 3, 2, 2, 3]).unwrap();
        let model = SyntheticModel::generate(&schema, k, k + extra, seed).unwrap();
        let m = MomentMatrix::from_source(&model, 2).unwrap();
        let (basis, report) = estimate_plane(&m, &PlaneConfig::default()).unwrap();
        prop_assert_eq!(report.k, k);
        prop_assert!(max_angle(&basis, model.basis()) < 1e-7);
        prop_assert!(basis.max_block_sum_error() < 1e-9);
    }

    #[test]
    fn conditional_first_moments_sum_to_one(seed in 0u64..1000) {
        let schema = Schema::new(vec![2, 2, 3, 2, 2]).unwrap();
        let model = SyntheticModel::generate(&schema, 2, 3, seed).unwrap();
        let target = ResponsePattern::parse(&schema, "1,2,3,0,0").unwrap();
        let cfg = SolverConfig { moment_order: 1, ..SolverConfig::default() };
        let (table, _) = conditional_moments(model.basis(), &model, std::slice::from_ref(&target), &cfg).unwrap();
        let s: f64 = enumerate_moment_indices(2, 1)
            .iter()
            .map(|v| table.conditional(&target, v).unwrap())
            .sum();
        prop_assert!((s - 1.0).abs() < 1e-8);
    }
}
