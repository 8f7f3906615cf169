use super::*;

fn d(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn small() -> GenConfig {
    GenConfig { firms: 12, observation_quarters: 4, pricing_days: 40, base_hazard: -4.0, ..GenConfig::default() }
}

fn windows() -> Windows {
    Windows { quarters: 12, pricing_days: 40 }
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic(&small(), 5).unwrap();
    let b = generate_synthetic(&small(), 5).unwrap();
    let c = generate_synthetic(&small(), 6).unwrap();
    assert_eq!(a.raw, b.raw);
    assert_ne!(a.raw, c.raw);
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let g = generate_synthetic(&GenConfig { auxiliary_features: 2, ..small() }, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_channels(&g.raw, dir.path()).unwrap();
    assert!(paths.auxiliary.is_some());
    let back = load_channels(&paths).unwrap();
    assert_eq!(back, g.raw);
    let a = Dataset::assemble(&g.raw, windows()).unwrap();
    let b = Dataset::assemble(&back, windows()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.channels, vec![Channel::Fundamental, Channel::Market, Channel::Pricing, Channel::Auxiliary]);
}

#[test]
fn csv_bytes_are_reproducible() {
    let g1 = generate_synthetic(&small(), 7).unwrap();
    let g2 = generate_synthetic(&small(), 7).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_channels(&g1.raw, d1.path()).unwrap();
    write_channels(&g2.raw, d2.path()).unwrap();
    for f in ["fundamental.csv", "market.csv", "pricing.csv", "labels.csv"] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn observations_cover_the_observation_quarters() {
    let g = generate_synthetic(&small(), 1).unwrap();
    let ds = Dataset::assemble(&g.raw, windows()).unwrap();
    assert!(!ds.is_empty());
    ds.audit_no_lookahead().unwrap();
    for o in &ds.observations {
        assert!(o.target.is_monotone());
        for c in &ds.channels {
            let p = ds.panel(ds.observations.iter().position(|x| x == o).unwrap(), *c).unwrap();
            assert_eq!(p.values.shape()[0], ds.windows.of(*c));
            assert!(p.dates.iter().all(|x| *x <= o.date));
        }
    }
    // 12 quarters of history are needed, so only the observation quarters qualify.
    assert!(ds.observations.iter().all(|o| o.date >= d("2002-12-31")));
}

fn quarter_row(firm: &str, date: &str, v: f64) -> QuarterRow {
    QuarterRow { firm_id: firm.into(), date: d(date), values: vec![Some(v)] }
}

fn tiny_raw() -> RawData {
    let dates = ["2010-03-31", "2010-06-30", "2010-09-30"];
    let mut raw = RawData::default();
    for (k, date) in dates.iter().enumerate() {
        raw.fundamental.push(quarter_row("A", date, k as f64));
        raw.market.push(quarter_row("A", date, -(k as f64)));
    }
    raw.fundamental.push(quarter_row("B", "2010-09-30", 1.0));
    raw.market.push(quarter_row("B", "2010-09-30", 1.0));
    let mut day = d("2010-01-01");
    while day <= d("2010-12-31") {
        for firm in ["A", "B"] {
            raw.pricing.push(PriceRow { firm_id: firm.into(), date: day, high: 2.0, low: 1.0, close: 1.5 });
        }
        day = day.succ_opt().unwrap();
    }
    raw.labels = vec![
        LabelRow { firm_id: "A".into(), default_date: Some(d("2010-08-15")) },
        LabelRow { firm_id: "B".into(), default_date: None },
        LabelRow { firm_id: "Z".into(), default_date: None },
    ];
    raw
}

#[test]
fn minimum_history_and_default_exclusion() {
    let ds = Dataset::assemble(&tiny_raw(), Windows { quarters: 2, pricing_days: 10 }).unwrap();
    // A: 03-31 lacks history, 06-30 kept, 09-30 after default. B: one quarter only.
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.observations[0].date, d("2010-06-30"));
    assert_eq!(ds.observations[0].target.y, [1, 1, 1, 1, 1, 1]);
    assert_eq!(ds.dropped.after_default, 1);
    assert_eq!(ds.dropped.insufficient_history[&Channel::Fundamental], 2);
    assert_eq!(ds.dropped.unknown_label_firms, 1);
}

#[test]
fn pricing_window_ends_at_observation_date() {
    let ds = Dataset::assemble(&tiny_raw(), Windows { quarters: 2, pricing_days: 10 }).unwrap();
    let p = ds.panel(0, Channel::Pricing).unwrap();
    assert_eq!(*p.dates.last().unwrap(), d("2010-06-30"));
    assert_eq!(p.dates.len(), 10);
}

#[test]
fn with_windows_rebuilds_and_counts_drops() {
    let g = generate_synthetic(&small(), 2).unwrap();
    let ds = Dataset::assemble(&g.raw, windows()).unwrap();
    let wide = ds.with_windows(Windows { quarters: 12, pricing_days: 100_000 }).unwrap();
    assert_eq!(wide.len(), 0);
    assert_eq!(wide.dropped.insufficient_history[&Channel::Pricing], ds.len());
    assert_eq!(ds.with_windows(ds.windows).unwrap(), ds);
}

#[test]
fn preprocess_fit_ignores_other_observations() {
    let g = generate_synthetic(&small(), 4).unwrap();
    let ds = Dataset::assemble(&g.raw, windows()).unwrap();
    let split = Split::holdout(&ds, 0).unwrap();
    let stats = fit_preprocess(&ds, &split.train).unwrap();
    let mut perturbed = ds.clone();
    for &i in &split.test {
        let firm = perturbed.observations[i].firm;
        for s in perturbed.firms[firm].series.values_mut() {
            s.values.iter_mut().for_each(|v| *v += 1e6);
        }
    }
    assert_eq!(fit_preprocess(&perturbed, &split.train).unwrap(), stats);
    let prepared = PreparedSet::build(&ds, &stats, &split.test).unwrap();
    for m in prepared.channels.values() {
        let f = m.cols / 2;
        for row in m.data.chunks(m.cols) {
            assert!(row[..f].iter().all(|v| (-6.0..=6.0).contains(v)));
            assert!(row[f..].iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }
}

#[test]
fn prepared_rows_match_apply_preprocess() {
    let g = generate_synthetic(&small(), 8).unwrap();
    let ds = Dataset::assemble(&g.raw, windows()).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let stats = fit_preprocess(&ds, &idx).unwrap();
    let prepared = PreparedSet::build(&ds, &stats, &idx[..3]).unwrap();
    for c in &ds.channels {
        let direct = apply_preprocess(&ds.panel(2, *c).unwrap(), stats.get(*c).unwrap()).unwrap();
        let batch = prepared.channel(*c).unwrap().batch(&[2]);
        assert_eq!(batch.data(), direct.data());
    }
}

#[test]
fn holdout_is_disjoint_by_firm() {
    let g = generate_synthetic(&GenConfig { firms: 30, ..small() }, 9).unwrap();
    let ds = Dataset::assemble(&g.raw, windows()).unwrap();
    let s = Split::holdout(&ds, 1).unwrap();
    let firms = |idx: &[usize]| idx.iter().map(|&i| ds.observations[i].firm).collect::<BTreeSet<_>>();
    assert!(firms(&s.train).is_disjoint(&firms(&s.test)));
    assert!(firms(&s.train).is_disjoint(&firms(&s.val)));
    assert!(firms(&s.val).is_disjoint(&firms(&s.test)));
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.len());
}

#[test]
fn malformed_rows_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_synthetic(&small(), 1).unwrap();
    let paths = write_channels(&g.raw, dir.path()).unwrap();
    let text = std::fs::read_to_string(&paths.labels).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "F0003,not-a-date";
    std::fs::write(&paths.labels, lines.join("\n")).unwrap();
    match load_channels(&paths) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("not-a-date"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn bad_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_synthetic(&small(), 1).unwrap();
    let paths = write_channels(&g.raw, dir.path()).unwrap();
    std::fs::write(&paths.market, "firm,report_date,m_001\n").unwrap();
    assert!(matches!(load_channels(&paths), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn channel_names_round_trip() {
    for c in Channel::ALL {
        assert_eq!(c.name().parse::<Channel>().unwrap(), c);
    }
}
