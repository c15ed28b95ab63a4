use mpc_portfolio::configspace::{ConfigurationSpace, HyperparameterSpec, Value, INACTIVE};
use mpc_portfolio::sysid::model_config_space;
use proptest::prelude::*;

/// A root categorical with two children per branch, bounds drawn by proptest.
fn space_from(lo: f64, width: f64, ilo: i64, iwidth: i64, log: bool) -> ConfigurationSpace {
    let hi = lo + width;
    ConfigurationSpace::new(
        "random",
        vec![
            HyperparameterSpec::categorical("root", &["a", "b", "c"], "a"),
            HyperparameterSpec::continuous("x", lo, hi, log, lo).when("root", &["a", "b"]),
            HyperparameterSpec::integer("n", ilo, ilo + iwidth, log, ilo).when("root", &["b"]),
            HyperparameterSpec::categorical("mode", &["p", "q"], "q").when("root", &["c"]),
            HyperparameterSpec::continuous("y", -3.0, 3.0, false, 0.0),
        ],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_configs_validate_and_round_trip(
        lo in 1e-3f64..10.0,
        width in 1e-2f64..100.0,
        ilo in 1i64..20,
        iwidth in 1i64..50,
        log in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let space = space_from(lo, width, ilo, iwidth, log);
        let c = space.sample(seed);
        prop_assert!(space.validate(&c).is_empty());
        let v = space.encode(&c).unwrap();
        prop_assert_eq!(v.len(), space.dim());
        prop_assert!(v.iter().all(|e| *e == INACTIVE || (0.0..=1.0).contains(e)));
        prop_assert_eq!(space.decode(&v).unwrap(), c.clone());
        prop_assert_eq!(space.parse_flat(&c.to_flat()).unwrap(), c);
    }
}

#[test]
fn shipped_space_round_trips_1000_samples() {
    let space = model_config_space();
    for seed in 0..1000 {
        let c = space.sample(seed);
        assert!(space.validate(&c).is_empty(), "{}", c.to_flat());
        assert_eq!(space.decode(&space.encode(&c).unwrap()).unwrap(), c);
    }
}

#[test]
fn log_uniform_density() {
    let space = ConfigurationSpace::new(
        "l",
        vec![HyperparameterSpec::continuous("x", 1e-4, 1.0, true, 1e-2)],
    )
    .unwrap();
    let mut logs: Vec<f64> = (0..10_000)
        .map(|s| {
            space
                .sample(s)
                .get("x")
                .and_then(Value::as_f64)
                .unwrap()
                .log10()
        })
        .collect();
    logs.sort_by(f64::total_cmp);
    let median = (logs[4999] + logs[5000]) / 2.0;
    assert!((median + 2.0).abs() <= 0.2, "{median}");
}
