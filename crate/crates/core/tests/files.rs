use qpi_core::eval::{read_report, ReportDoc};
use qpi_core::{
    coverage, emit_plot_data, emit_report, gen_sales_series, load_csv, parse_plot_data, rolling_backtest, save_csv, train_triple,
    Activation, BacktestConfig, IntervalSpec, NetworkShape, ReportFormat, ReportMeta, SalesSpec, TrainConfig, TrainedTriple, Tricks,
};

fn quick_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        lr0: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn sales_csv_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frame = gen_sales_series(&SalesSpec {
        days: 120,
        seed: 9,
        ..SalesSpec::default()
    })
    .unwrap();
    let path = dir.path().join("sales.csv");
    save_csv(&frame, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back, frame);
}

#[test]
fn triple_json_round_trip_predicts_identically() {
    let frame = gen_sales_series(&SalesSpec {
        days: 200,
        ..SalesSpec::default()
    })
    .unwrap();
    let data = qpi_core::make_windows(&frame, 14, 1).unwrap();
    let shape = NetworkShape::new(data.feature_dim(), vec![6], Activation::Tanh).unwrap();
    let triple = train_triple(&data, &shape, IntervalSpec::new(0.8).unwrap(), &quick_config(), Tricks::ALL).unwrap();
    let back = TrainedTriple::from_json(&triple.to_json().unwrap()).unwrap();
    for s in data.samples().iter().take(20) {
        assert_eq!(
            qpi_core::predict_interval(&triple, &s.features).unwrap(),
            qpi_core::predict_interval(&back, &s.features).unwrap()
        );
    }
}

#[test]
fn backtest_outputs_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let frame = gen_sales_series(&SalesSpec {
        days: 160,
        ..SalesSpec::default()
    })
    .unwrap();
    let specs: Vec<IntervalSpec> = [0.7, 0.9].iter().map(|&b| IntervalSpec::new(b).unwrap()).collect();
    let shape = NetworkShape::new(1, vec![4], Activation::Relu).unwrap();
    let bt = BacktestConfig {
        window: 14,
        horizon: 7,
        test_days: 21,
        refit_every: 2,
    };
    let points = rolling_backtest(&frame, &bt, &specs, &shape, &quick_config(), Tricks::NONE).unwrap();
    let plot = dir.path().join("plotdata.csv");
    emit_plot_data(&points, &plot).unwrap();
    assert_eq!(parse_plot_data(&plot).unwrap(), points);

    let meta = ReportMeta {
        seed: 0,
        config_hash: qpi_core::config_hash(&bt).unwrap(),
    };
    for (k, spec) in specs.iter().enumerate() {
        let report = coverage(&qpi_core::train::pairs_for_spec(&points, k)).unwrap();
        assert_eq!(report.n, 21);
        assert_eq!(report.nominal_width, spec.beta());
        let path = dir.path().join(format!("coverage_{}.json", spec.beta()));
        emit_report(std::slice::from_ref(&report), &meta, &path, ReportFormat::Json).unwrap();
        let doc: ReportDoc = read_report(&path).unwrap();
        assert_eq!(doc.report, report);
    }
}
