mod common;

use common::{case, proptest_config};
use deepsolve::dataio::{build_dataset, sample_loads, Dataset, Normalizer, ScalingSpec, Split, TrainSample};
use deepsolve::netmodel::build_admittance;
use deepsolve::opfref::OpfSolver;
use deepsolve::powerflow::{solve_pf, PfOptions};
use proptest::prelude::*;

/// A point inside the bounds of every variable, from fractions in `[0, 1]`.
fn physical(spec: &ScalingSpec, t: &[f64]) -> Vec<f64> {
    spec.vars.iter().zip(t).map(|(v, &t)| v.min + t * (v.max - v.min)).collect()
}

#[test]
fn layout_dimensions() {
    assert_eq!(ScalingSpec::from_case(&case("case30")).dim(), 11);
    assert_eq!(ScalingSpec::from_case(&case("case118")).dim(), 107);
}

#[test]
fn load_sampling_is_seeded_and_bounded() {
    let c = case("case30");
    let a = sample_loads(&c, 0.9, 1.1, 20, 7);
    assert_eq!(a, sample_loads(&c, 0.9, 1.1, 20, 7));
    assert_ne!(a, sample_loads(&c, 0.9, 1.1, 20, 8));
    let base = c.default_loads();
    for row in &a {
        for (x, b) in row.iter().zip(&base) {
            let (lo, hi) = if *b >= 0.0 { (0.9 * b, 1.1 * b) } else { (1.1 * b, 0.9 * b) };
            assert!(*x >= lo - 1e-15 && *x <= hi + 1e-15);
        }
    }
}

#[test]
fn labels_reconstruct_their_reference_solutions() {
    let c = case("case30");
    let solver = OpfSolver::new(&c);
    let (train, test) = build_dataset(&solver, 12, 4, (0.9, 1.1), 11).unwrap();
    assert_eq!((train.samples.len(), test.samples.len()), (12, 4));
    assert_eq!(train.normalizer, test.normalizer);
    let y = build_admittance(&c);
    for s in train.samples.iter().chain(&test.samples) {
        assert!(s.s_true.iter().all(|v| (0.0..=1.0).contains(v)));
        let iv = train.spec.to_independent(&train.spec.decode(&s.s_true).unwrap()).unwrap();
        let pf = solve_pf(&c, &y, &iv, &s.loads, &train.dependent_mean, &PfOptions::default()).unwrap();
        assert!(pf.converged);
        assert!((c.total_cost(&pf.p_gen) - s.objective).abs() < 1e-4 * s.objective);
        for i in 0..c.n_bus() {
            assert!((pf.v_mag[i] - s.v_mag[i]).abs() < 1e-5);
            assert!((pf.v_ang[i] - s.v_ang[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn normalizer_fits_training_loads_only() {
    let c = case("case30");
    let solver = OpfSolver::new(&c);
    let (train, _) = build_dataset(&solver, 10, 5, (0.9, 1.1), 2).unwrap();
    let rows: Vec<&[f64]> = train.samples.iter().map(|s| s.loads.as_slice()).collect();
    assert_eq!(train.normalizer, Normalizer::fit(&rows, 60));
}

fn synthetic(n_bus: usize, spec: ScalingSpec, rows: Vec<(Vec<f64>, Vec<f64>, f64)>) -> Dataset {
    let samples = rows
        .into_iter()
        .map(|(loads, s, obj)| TrainSample {
            loads: loads[..2 * n_bus].to_vec(),
            s_true: s,
            objective: obj,
            v_mag: loads[..n_bus].to_vec(),
            v_ang: loads[n_bus..2 * n_bus].to_vec(),
        })
        .collect();
    Dataset {
        case_name: "case30".into(),
        split: Split::Test,
        seed: 3,
        load_range: (0.9, 1.1),
        normalizer: Normalizer::identity(2 * n_bus),
        dependent_mean: deepsolve::powerflow::PfInit::flat(n_bus),
        spec,
        samples,
    }
}

proptest! {
    #![proptest_config(proptest_config(200))]

    #[test]
    fn codec_round_trip_case30(t in proptest::collection::vec(0.0..=1.0f64, 11)) {
        let spec = ScalingSpec::from_case(&case("case30"));
        let x = physical(&spec, &t);
        let back = spec.decode(&spec.encode(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoded_values_lie_in_unit_interval(t in proptest::collection::vec(0.0..=1.0f64, 107)) {
        let spec = ScalingSpec::from_case(&case("case118"));
        let s = spec.encode(&physical(&spec, &t)).unwrap();
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn out_of_bounds_is_rejected(t in proptest::collection::vec(0.0..=1.0f64, 11), k in 0usize..11, over in 1e-6..1.0f64) {
        let spec = ScalingSpec::from_case(&case("case30"));
        let mut x = physical(&spec, &t);
        x[k] = spec.vars[k].max + over;
        prop_assert!(spec.encode(&x).is_err());
    }
}

proptest! {
    #![proptest_config(proptest_config(32))]

    #[test]
    fn dataset_file_round_trip(
        rows in proptest::collection::vec(
            (proptest::collection::vec(-1e3..1e3f64, 60), proptest::collection::vec(0.0..=1.0f64, 11), 0.0..1e6f64),
            0..6,
        )
    ) {
        let spec = ScalingSpec::from_case(&case("case30"));
        let ds = synthetic(30, spec, rows);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.csv");
        ds.write(&p).unwrap();
        prop_assert_eq!(Dataset::read(&p).unwrap(), ds);
    }
}
