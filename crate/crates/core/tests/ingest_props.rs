mod common;

use chrono::{Duration, NaiveDate};
use gamcast::ingest::{
    covariates_for_range, decompose_values, derive_covariates, load_series, read_series, summary_stats,
    DailySeries,
};
use proptest::prelude::*;

fn series_strategy() -> impl Strategy<Value = DailySeries> {
    (0i64..2000, prop::collection::vec(0u64..5000, 1..120)).prop_map(|(offset, counts)| {
        let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + Duration::days(offset);
        DailySeries::from_counts("r", start, counts).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(series in series_strategy()) {
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let back = read_series(buf.as_slice(), "r").unwrap();
        prop_assert_eq!(back, series);
    }

    #[test]
    fn cyclic_covariates_follow_their_recurrences(offset in -400i64..400, len in 2usize..200) {
        let origin = NaiveDate::from_ymd_opt(2020, 2, 1).unwrap();
        let anchor = NaiveDate::from_ymd_opt(2020, 3, 17).unwrap();
        let c = covariates_for_range(origin, offset, len, anchor);
        prop_assert_eq!(c.len(), len);
        for i in 1..len {
            prop_assert_eq!(c.day[i], c.day[i - 1] + 1);
            prop_assert_eq!(c.dow[i], c.dow[i - 1] % 7 + 1);
            prop_assert_eq!(c.biweek[i], c.biweek[i - 1] % 14 + 1);
            prop_assert_eq!(c.dom[i], c.dom[i - 1] % 30 + 1);
        }
    }

    #[test]
    fn decomposition_is_additive(x in prop::collection::vec(0.0f64..500.0, 28..150), period in 2usize..14) {
        let d = decompose_values(&x, period).unwrap();
        let mean_seasonal: f64 = d.seasonal[..period].iter().sum::<f64>() / period as f64;
        prop_assert!(mean_seasonal.abs() < 1e-10);
        for i in 0..x.len() {
            if let (Some(t), Some(r)) = (d.trend[i], d.random[i]) {
                prop_assert!((t + d.seasonal[i] + r - x[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn summary_invariants(series in series_strategy().prop_filter("need two rows", |s| s.len() >= 2)) {
        let s = summary_stats(&series).unwrap();
        prop_assert!(s.quartiles.q1 <= s.quartiles.median && s.quartiles.median <= s.quartiles.q3);
        prop_assert!(s.dispersion_index.map_or(true, |d| d >= 0.0));
        prop_assert_eq!(s.histogram.counts.iter().sum::<usize>(), series.len());
        let (lo, hi) = s.fences;
        let flagged: std::collections::HashSet<_> = s.outliers.iter().map(|o| o.date).collect();
        for (d, &c) in series.dates().iter().zip(series.deaths()) {
            let c = c as f64;
            if flagged.contains(d) {
                prop_assert!(c < lo || c > hi);
            } else {
                prop_assert!(c >= lo && c <= hi);
            }
        }
    }
}

#[test]
fn canada_fixture_has_146_rows() {
    let s = load_series(common::data_dir().join("canada.csv"), "canada").unwrap();
    assert_eq!(s.len(), 146);
    assert_eq!(s.first_date(), NaiveDate::from_ymd_opt(2020, 1, 31).unwrap());
    assert_eq!(s.last_date(), NaiveDate::from_ymd_opt(2020, 6, 24).unwrap());
}

#[test]
fn anchor_and_weekly_period() {
    let anchor = NaiveDate::from_ymd_opt(2020, 3, 17).unwrap();
    let s = DailySeries::from_counts("r", NaiveDate::from_ymd_opt(2020, 3, 10).unwrap(), vec![1; 20]).unwrap();
    let c = derive_covariates(&s, anchor);
    assert_eq!(c.day[7], 0);
    assert_eq!(c.day[14], 7);
    assert_eq!(c.dow[14], c.dow[7]);
    assert_eq!(c.dow[7], 2);
}

#[test]
fn poisson_sample_is_equidispersed() {
    let mut rng = common::rng(99);
    let counts: Vec<u64> = (0..20_000)
        .map(|_| gamcast::Family::Poisson.sample(10.0, &mut rng) as u64)
        .collect();
    let s = DailySeries::from_counts("p", NaiveDate::from_ymd_opt(1970, 1, 1).unwrap(), counts).unwrap();
    let d = summary_stats(&s).unwrap().dispersion_index.unwrap();
    assert!((0.8..=1.2).contains(&d), "{d}");
}

#[test]
fn ramp_plus_sawtooth_trend_recovered() {
    let saw = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    let x: Vec<f64> = (0..70).map(|i| 2.0 + 0.5 * i as f64 + saw[i % 7]).collect();
    let d = decompose_values(&x, 7).unwrap();
    for i in 3..67 {
        assert!((d.trend[i].unwrap() - (2.0 + 0.5 * i as f64)).abs() < 1e-8);
    }
}

#[test]
fn load_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let gap = dir.path().join("gap.csv");
    std::fs::write(&gap, "date,deaths\n2020-03-01,1\n2020-03-03,2\n").unwrap();
    assert!(load_series(&gap, "x").is_err());
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert!(load_series(&empty, "x").is_err());
    let ok = dir.path().join("ok.csv");
    std::fs::write(&ok, "date,deaths\n2020-03-01,0\n2020-03-02,1\n2020-03-03,2\n").unwrap();
    assert_eq!(load_series(&ok, "x").unwrap().deaths(), &[0, 1, 2]);
    assert!(load_series(dir.path().join("missing.csv"), "x").is_err());
}
