mod common;

use std::collections::BTreeSet;

use common::{prices, random_matrix, rng};
use nalgebra::DMatrix;
use ouport::data_io::*;
use ouport::likelihood::{NllConvention, PenaltyConfig, Weights};
use ouport::ou_model::{selection_instance, simulate_universe, ARParams, Component, TimeGrid};
use ouport::solver::{fit_portfolio, FitFlag, FitResult, Init, SolverConfig};
use ouport::{Error, PriceMatrix};
use proptest::prelude::*;

fn parse(text: &str, missing: MissingPolicy) -> ouport::Result<LoadedPrices> {
    parse_prices(text.as_bytes(), &LoadOptions { missing, ..Default::default() })
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn well_formed_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(&path, "timestamp,AAA,BBB\n1,10.5,20\n2,11,19.5\n3,10.75,21\n").unwrap();
    let loaded = load_prices(&path, &LoadOptions::default()).unwrap();
    let s = loaded.prices;
    assert_eq!((s.rows(), s.cols()), (3, 2));
    assert_eq!(s.tickers, ["AAA", "BBB"]);
    assert_eq!(s.values[(2, 0)], 10.75);
    assert_eq!(s.dt, 1.0);
    assert!(loaded.warnings.is_empty());
}

#[test]
fn missing_cell_policies() {
    let text = "timestamp,A,B\n1,1,2\n2,,3\n3,4,\n4,5,6\n5,7,8\n";
    let filled = parse(text, MissingPolicy::ForwardFill).unwrap();
    let v = &filled.prices.values;
    assert_eq!(filled.prices.rows(), 5);
    assert_eq!(v[(1, 0)], 1.0);
    assert_eq!(v[(2, 1)], 3.0);
    assert_eq!(filled.warnings.len(), 2);
    assert!(filled.warnings[0].contains("line 3"));

    let dropped = parse(text, MissingPolicy::DropRows).unwrap();
    assert_eq!(dropped.prices.timestamps, strings(&["1", "4", "5"]));

    let err = parse(text, MissingPolicy::Error).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("line 3")), "{err}");
}

#[test]
fn leading_gaps_drop_rows() {
    let text = "timestamp,A,B\n1,,2\n2,1,3\n3,4,5\n4,5,6\n";
    let loaded = parse(text, MissingPolicy::ForwardFill).unwrap();
    assert_eq!(loaded.prices.timestamps, strings(&["2", "3", "4"]));
    assert_eq!(loaded.warnings.len(), 1);
}

#[test]
fn duplicate_and_unordered_timestamps_name_the_row() {
    let err = parse("timestamp,A\n1,1\n2,2\n2,3\n3,4\n", MissingPolicy::ForwardFill).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("line 4") && m.contains("duplicate")), "{err}");
    let err = parse("timestamp,A\n1,1\n3,2\n2,3\n", MissingPolicy::ForwardFill).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("line 4")), "{err}");
}

#[test]
fn malformed_input_is_described() {
    for (text, needle) in [
        ("timestamp\n1\n2\n3\n", "line 1"),
        ("timestamp,A\n1,1\n2,x\n3,3\n", "line 3"),
        ("timestamp,A\n1,1\n2,2,2\n3,3\n", "line 3"),
        ("timestamp,A\n1,1\nnoon,2\n3,3\n", "line 3"),
        ("timestamp,A\n1,1\n2,2\n", "usable rows"),
    ] {
        let err = parse(text, MissingPolicy::ForwardFill).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains(needle)), "{text:?}: {err}");
    }
}

#[test]
fn iso_timestamps() {
    let text = "timestamp,A\n2020-01-02,1\n2020-01-03T00:00:00,2\n2020-01-06 16:00:00,3\n2020-01-07T16:00:00Z,4\n";
    let s = parse(text, MissingPolicy::ForwardFill).unwrap().prices;
    assert_eq!(s.rows(), 4);
    assert_eq!(s.timestamps[0], "2020-01-02");
    let mixed = "timestamp,A\n1,1\n2020-01-03,2\n3,3\n";
    assert!(parse(mixed, MissingPolicy::ForwardFill).is_err());
}

#[test]
fn rescaling_is_opt_in() {
    let text = "timestamp,A,B\n1,100,1\n2,110,2\n3,90,3\n";
    let raw = parse(text, MissingPolicy::ForwardFill).unwrap().prices;
    assert_eq!(raw.values[(0, 0)], 100.0);
    let opts = LoadOptions { rescale: true, ..Default::default() };
    let scaled = parse_prices(text.as_bytes(), &opts).unwrap().prices;
    assert_ne!(scaled.values, raw.values);
    assert_eq!(scaled, raw.rescaled());
}

fn round_trip(s: &PriceMatrix) -> PriceMatrix {
    let mut buf = Vec::new();
    write_prices(s, &mut buf).unwrap();
    parse_prices(buf.as_slice(), &LoadOptions { dt: s.dt, ..Default::default() }).unwrap().prices
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn ingestion_is_lossless(rows in 3usize..30, m in 1usize..5, seed in any::<u64>(), exp in -300i32..300) {
        let mut r = rng(seed);
        let values = random_matrix(&mut r, rows, m).map(|v| v * 10f64.powi(exp / 10));
        let s = prices(values, 1.0);
        let once = round_trip(&s);
        prop_assert_eq!(&once, &s);
        prop_assert_eq!(round_trip(&once), once);
    }

    #[test]
    fn split_is_contiguous_and_exhaustive(rows in 6usize..200, frac in 0.05f64..0.95) {
        let s = prices(DMatrix::from_fn(rows, 2, |i, j| (i * 2 + j) as f64), 1.0);
        match train_test_split(&s, &SplitSpec { train_frac: frac }) {
            Ok((train, test)) => {
                prop_assert!(train.rows() >= 3 && test.rows() >= 3);
                prop_assert_eq!(train.rows(), (rows as f64 * frac).floor() as usize);
                let mut stamps = train.timestamps.clone();
                stamps.extend(test.timestamps.clone());
                prop_assert_eq!(&stamps, &s.timestamps);
                prop_assert_eq!(train.values.rows(0, train.rows()), s.values.rows(0, train.rows()));
            }
            Err(_) => {
                let cut = (rows as f64 * frac).floor() as usize;
                prop_assert!(cut < 3 || rows - cut < 3);
            }
        }
    }
}

#[test]
fn split_examples() {
    let s = prices(DMatrix::from_fn(10, 1, |i, _| i as f64), 1.0);
    let (train, test) = train_test_split(&s, &SplitSpec::default()).unwrap();
    assert_eq!(train.timestamps, strings(&["0", "1", "2", "3", "4", "5", "6"]));
    assert_eq!(test.timestamps, strings(&["7", "8", "9"]));
    assert_eq!(test.values[(0, 0)], 7.0);

    let short = prices(DMatrix::from_fn(4, 1, |i, _| i as f64), 1.0);
    assert!(train_test_split(&short, &SplitSpec { train_frac: 0.5 }).is_err());
    assert!(train_test_split(&s, &SplitSpec { train_frac: 1.0 }).is_err());
}

fn sample_result() -> FitResult {
    let s = selection_instance(3).unwrap();
    let mut fit = fit_portfolio(&s, &PenaltyConfig::new(0.05, 1.5).unwrap(), &SolverConfig::default()).unwrap();
    fit.nll_test = Some(-1.25e-3);
    fit.flags.insert(FitFlag::RestartFailed);
    fit.restart_objectives = vec![Some(fit.objective), None, Some(0.1 + 0.2)];
    fit
}

#[test]
fn result_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let fit = sample_result();
    save_result(&fit, &path).unwrap();
    assert_eq!(load_result(&path).unwrap(), fit);

    let mut empty = fit.clone();
    empty.trace.clear();
    empty.ou = None;
    empty.nll_test = None;
    empty.flags = BTreeSet::new();
    save_results(&[fit.clone(), empty.clone()], &path).unwrap();
    assert_eq!(load_results(&path).unwrap(), vec![fit, empty]);
}

#[test]
fn random_results_round_trip() {
    use rand::Rng;
    let mut r = rng(21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    for _ in 0..50 {
        let mut fit = sample_result();
        let m = fit.w.len();
        let raw = nalgebra::DVector::from_fn(m, |_, _| common::normal(&mut r));
        fit.w = Weights::new(&raw / raw.lp_norm(1)).unwrap();
        fit.ar = ARParams::new(r.random_range(1e-9..10.0), r.random_range(-1.0..1.5), common::normal(&mut r)).unwrap();
        fit.trace = (0..r.random_range(0..20)).map(|_| common::normal(&mut r) * 1e-7).collect();
        fit.objective = common::normal(&mut r);
        save_result(&fit, &path).unwrap();
        assert_eq!(load_result(&path).unwrap(), fit);
    }
}

#[test]
fn newer_format_version_is_rejected() {
    let fit = sample_result();
    let line = encode_document(RESULT_KIND, &fit).unwrap();
    assert!(line.contains("\"format_version\":1"));
    let bumped = line.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert_eq!(
        decode_document::<FitResult>(RESULT_KIND, &bumped).unwrap_err(),
        Error::FormatVersion { found: 2, supported: FORMAT_VERSION }
    );
    assert!(matches!(decode_document::<FitResult>("other", &line), Err(Error::Data(_))));
    assert!(matches!(decode_document::<FitResult>(RESULT_KIND, "{not json"), Err(Error::Data(_))));
}

fn five_series(seed: u64) -> PriceMatrix {
    let comps = [
        Component::Ou { mu: 1.0, sigma: 1.0, theta: 0.0 },
        Component::Ou { mu: 4.0, sigma: 1.0, theta: 1.0 },
        Component::Ou { mu: 1.0, sigma: 0.5, theta: 1.0 },
        Component::Ou { mu: 4.0, sigma: 0.5, theta: 0.0 },
        Component::Ou { mu: 2.0, sigma: 0.8, theta: 2.0 },
    ];
    simulate_universe(&comps, &TimeGrid::new(0.01, 5.0).unwrap(), seed).unwrap()
}

#[test]
fn first_stepwise_row_is_a_direct_fit() {
    let s = five_series(0);
    let order = strings(&["S3", "S1", "S4"]);
    let pen = PenaltyConfig::none();
    let cfg = SolverConfig::default();
    let split = SplitSpec::default();
    let table = stepwise_universe(&s, &order, &pen, &cfg, &split, NllConvention::PerObservation).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.assets.len(), 3);

    let (train, test) = train_test_split(&s.select_tickers(&order[..2]).unwrap(), &split).unwrap();
    let mut direct = fit_portfolio(&train, &pen, &cfg).unwrap();
    direct.evaluate_test(&test, NllConvention::PerObservation).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.k, 2);
    assert_eq!(row.assets, order[..2]);
    assert_eq!(row.objective, Some(direct.objective));
    assert_eq!(row.nll_train, Some(direct.nll_train));
    assert_eq!(row.nll_test, direct.nll_test);
    assert_eq!(row.weights.as_deref(), Some(direct.w.as_slice()));
}

#[test]
fn stepwise_train_nll_is_non_increasing() {
    let cfg = SolverConfig { restarts: 4, ..Default::default() };
    for seed in 0..5 {
        let s = five_series(seed);
        for order in [strings(&["S1", "S2", "S3", "S4", "S5"]), strings(&["S5", "S3", "S1", "S4", "S2"])] {
            let table = stepwise_universe(&s, &order, &PenaltyConfig::none(), &cfg, &SplitSpec::default(), NllConvention::PerObservation)
                .unwrap();
            let nll: Vec<f64> = table.rows.iter().map(|r| r.nll_train.unwrap()).collect();
            for pair in nll.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-6, "seed {seed}: {nll:?}");
            }
        }
    }
}

#[test]
fn orderings_agree_on_the_full_universe() {
    let cfg = SolverConfig { restarts: 32, ..Default::default() };
    let split = SplitSpec::default();
    let forward = strings(&["S1", "S2", "S3", "S4", "S5"]);
    let reversed = strings(&["S5", "S4", "S3", "S2", "S1"]);
    let mut agree = 0;
    for seed in 0..10 {
        let s = five_series(seed);
        let run = |order: &[String]| {
            stepwise_universe(&s, order, &PenaltyConfig::none(), &cfg, &split, NllConvention::PerObservation)
                .unwrap()
                .rows
                .pop()
                .unwrap()
        };
        let (f, r) = (run(&forward), run(&reversed));
        if (f.nll_train.unwrap() - r.nll_train.unwrap()).abs() < 1e-6 {
            agree += 1;
        }

        // reordering permutes the columns of one problem: the forward optimum,
        // permuted, is a fixed point of the reversed problem
        let train = train_test_split(&s.select_tickers(&reversed).unwrap(), &split).unwrap().0;
        let mut w = f.weights.unwrap();
        w.reverse();
        let cfg1 = SolverConfig { init: Init::Provided(w), ..SolverConfig::default() };
        let refit = fit_portfolio(&train, &PenaltyConfig::none(), &cfg1).unwrap();
        let gap = f.objective.unwrap() - refit.objective;
        assert!((-1e-12..1e-7).contains(&gap), "seed {seed}: gap {gap}");
    }
    // the objective is nonconvex; 32 cold starts occasionally miss the other basin
    assert!(agree >= 9, "{agree} of 10 seeds agree");
}

#[test]
fn stepwise_rejects_bad_orderings() {
    let s = five_series(0);
    let run = |order: &[&str]| {
        stepwise_universe(&s, &strings(order), &PenaltyConfig::none(), &SolverConfig::default(), &SplitSpec::default(), NllConvention::PerObservation)
    };
    assert!(matches!(run(&["S1"]), Err(Error::InvalidParameter(_))));
    assert!(matches!(run(&["S1", "S1"]), Err(Error::InvalidParameter(_))));
    assert!(run(&["S1", "ZZZ"]).is_err());
}

#[test]
fn table_headers() {
    let s = five_series(1);
    let table = stepwise_universe(
        &s,
        &strings(&["S1", "S2", "S3"]),
        &PenaltyConfig::none(),
        &SolverConfig::default(),
        &SplitSpec::default(),
        NllConvention::PerObservation,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_stepwise_csv(&table, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,assets,nll_train,nll_test,flags"));
    assert!(lines.next().unwrap().starts_with("2,S1;S2,"));
    assert_eq!(text.lines().count(), 3);

    let mut buf = Vec::new();
    write_asset_nll_csv(&table, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("asset,nll_train,nll_test"));
    assert_eq!(text.lines().count(), 4);
}
