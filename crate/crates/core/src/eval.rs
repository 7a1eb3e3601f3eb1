//! Coverage, width, rogue-point and crossing diagnostics, and the files they
//! are written to.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::{BacktestPoint, IntervalSpec, PredictionInterval};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub nominal_width: f64,
    /// Fraction of actuals inside the closed interval.
    pub success_rate: f64,
    pub mean_width: f64,
    /// Fraction of points whose median lies strictly outside the interval.
    pub rogue_rate: f64,
    /// Points with `upper < lower`.
    pub crossing_count: usize,
    pub n: usize,
}

/// Run identification stored next to each report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub version: u32,
    #[serde(flatten)]
    pub report: CoverageReport,
    pub meta: ReportMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn coverage(pairs: &[(PredictionInterval, f64)]) -> Result<CoverageReport> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::EmptyInput("coverage needs at least one interval"));
    };
    let n = pairs.len();
    let inside = pairs.iter().filter(|(pi, y)| pi.contains(*y)).count();
    let rogue = pairs.iter().filter(|(pi, _)| pi.is_rogue()).count();
    let crossing_count = pairs.iter().filter(|(pi, _)| pi.upper < pi.lower).count();
    let mean_width = pairs.iter().map(|(pi, _)| pi.width()).sum::<f64>() / n as f64;
    Ok(CoverageReport {
        nominal_width: first.spec.beta(),
        success_rate: inside as f64 / n as f64,
        mean_width,
        rogue_rate: rogue as f64 / n as f64,
        crossing_count,
        n,
    })
}

/// Number of timestamps at which some narrower nominal interval is wider
/// than a broader one. Every family must list the same timestamps.
pub fn nesting_violations(families: &[(IntervalSpec, Vec<(i64, PredictionInterval)>)]) -> Result<usize> {
    let Some((_, reference)) = families.first() else {
        return Ok(0);
    };
    for (spec, list) in families {
        if list.len() != reference.len() || list.iter().zip(reference).any(|(a, b)| a.0 != b.0) {
            return Err(Error::Misaligned(format!(
                "interval list for beta {} does not share the reference timestamps",
                spec.beta()
            )));
        }
    }
    let violations = (0..reference.len())
        .filter(|&i| {
            families.iter().any(|(narrow, a)| {
                families
                    .iter()
                    .any(|(broad, b)| narrow.beta() < broad.beta() && a[i].1.width() > b[i].1.width())
            })
        })
        .count();
    Ok(violations)
}

/// Per-spec interval families of a backtest, ready for [`nesting_violations`].
pub fn families(points: &[BacktestPoint]) -> Vec<(IntervalSpec, Vec<(i64, PredictionInterval)>)> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    (0..first.intervals.len())
        .map(|k| {
            let list = points.iter().map(|p| (p.timestamp, p.intervals[k])).collect();
            (first.intervals[k].spec, list)
        })
        .collect()
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Writes one report as a JSON object, several as a JSON array, or a CSV
/// table with one row per report.
pub fn emit_report(reports: &[CoverageReport], meta: &ReportMeta, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no coverage reports to write"));
    }
    let docs: Vec<ReportDoc> = reports
        .iter()
        .map(|r| ReportDoc {
            version: REPORT_FORMAT_VERSION,
            report: r.clone(),
            meta: meta.clone(),
        })
        .collect();
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json if docs.len() == 1 => serde_json::to_writer_pretty(&mut out, &docs[0])?,
        ReportFormat::Json => serde_json::to_writer_pretty(&mut out, &docs)?,
        ReportFormat::Csv => {
            writeln!(
                out,
                "nominal_width,success_rate,mean_width,rogue_rate,crossing_count,n,seed,config_hash"
            )?;
            for d in &docs {
                let r = &d.report;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.nominal_width,
                    r.success_rate,
                    r.mean_width,
                    r.rogue_rate,
                    r.crossing_count,
                    r.n,
                    d.meta.seed,
                    d.meta.config_hash
                )?;
            }
        }
    }
    if format == ReportFormat::Json {
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportDoc> {
    let doc: ReportDoc = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    if doc.version != REPORT_FORMAT_VERSION {
        return Err(Error::Schema(format!("unsupported report version {}", doc.version)));
    }
    Ok(doc)
}

/// Writes `t,actual,median,lower_<beta>,upper_<beta>,...`, one row per point.
pub fn emit_plot_data(points: &[BacktestPoint], path: impl AsRef<Path>) -> Result<()> {
    let Some(first) = points.first() else {
        return Err(Error::EmptyInput("no backtest points to write"));
    };
    let specs: Vec<IntervalSpec> = first.intervals.iter().map(|pi| pi.spec).collect();
    if specs.is_empty() {
        return Err(Error::EmptyInput("backtest points carry no intervals"));
    }
    for p in points {
        if p.intervals.len() != specs.len() || p.intervals.iter().zip(&specs).any(|(pi, s)| pi.spec != *s) {
            return Err(Error::Misaligned(format!("point at t={} has a different spec list", p.timestamp)));
        }
        if p.intervals.iter().any(|pi| pi.median != p.intervals[0].median) {
            return Err(Error::Misaligned(format!("medians differ across specs at t={}", p.timestamp)));
        }
    }

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["t".to_owned(), "actual".to_owned(), "median".to_owned()];
    for s in &specs {
        header.push(format!("lower_{}", s.beta()));
        header.push(format!("upper_{}", s.beta()));
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for p in points {
        row.clear();
        row.push(p.timestamp.to_string());
        row.push(p.actual.to_string());
        row.push(p.intervals[0].median.to_string());
        for pi in &p.intervals {
            row.push(pi.lower.to_string());
            row.push(pi.upper.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`emit_plot_data`].
pub fn parse_plot_data(path: impl AsRef<Path>) -> Result<Vec<BacktestPoint>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let malformed = |reason: String| Error::MalformedRow { line: 1, reason };
    if header.len() < 5 || header.len() % 2 == 0 || &header[0] != "t" || &header[1] != "actual" || &header[2] != "median" {
        return Err(malformed("expected `t,actual,median` followed by lower/upper pairs".into()));
    }
    let mut specs = Vec::new();
    for k in (3..header.len()).step_by(2) {
        let lo = header[k].strip_prefix("lower_");
        let hi = header[k + 1].strip_prefix("upper_");
        match (lo, hi) {
            (Some(a), Some(b)) if a == b => {
                let beta = a.parse().map_err(|_| malformed(format!("bad width in column `{}`", &header[k])))?;
                specs.push(IntervalSpec::new(beta)?);
            }
            _ => return Err(malformed(format!("columns `{}`/`{}` do not pair up", &header[k], &header[k + 1]))),
        }
    }

    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let num = |col: usize| -> Result<f64> {
            rec[col].parse().map_err(|_| Error::NonNumericCell {
                line,
                column: header[col].to_owned(),
                value: rec[col].to_owned(),
            })
        };
        let timestamp = rec[0].parse().map_err(|_| Error::NonNumericCell {
            line,
            column: "t".into(),
            value: rec[0].to_owned(),
        })?;
        let median = num(2)?;
        let intervals = specs
            .iter()
            .enumerate()
            .map(|(j, &spec)| {
                Ok(PredictionInterval {
                    lower: num(3 + 2 * j)?,
                    median,
                    upper: num(4 + 2 * j)?,
                    spec,
                })
            })
            .collect::<Result<_>>()?;
        points.push(BacktestPoint {
            timestamp,
            actual: num(1)?,
            intervals,
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("plot data has no rows"));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::QuantileLevel;
    use crate::oracle::{analytic_quantile, sample, DistributionSpec};

    fn pi(lower: f64, median: f64, upper: f64, beta: f64) -> PredictionInterval {
        PredictionInterval {
            lower,
            median,
            upper,
            spec: IntervalSpec::new(beta).unwrap(),
        }
    }

    #[test]
    fn direct_counts() {
        let r = coverage(&[(pi(0.0, 1.0, 2.0, 0.8), 1.5), (pi(0.0, 1.0, 2.0, 0.8), 3.0)]).unwrap();
        assert_eq!(r.success_rate, 0.5);
        assert_eq!(r.rogue_rate, 0.0);
        assert_eq!(r.mean_width, 2.0);
        assert_eq!(r.n, 2);
        assert_eq!(r.nominal_width, 0.8);

        let r = coverage(&[(pi(0.0, 1.0, 2.0, 0.8), 0.0), (pi(0.0, 1.0, 2.0, 0.8), 2.0)]).unwrap();
        assert_eq!(r.success_rate, 1.0);

        let r = coverage(&[(pi(2.0, 3.0, 1.0, 0.5), 1.5), (pi(0.0, -1.0, 0.5, 0.5), 0.0)]).unwrap();
        assert_eq!(r.crossing_count, 1);
        assert_eq!(r.rogue_rate, 1.0);
        assert!(r.mean_width < 0.0);

        assert!(matches!(coverage(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn envelope_intervals_cover_everything() {
        let ys = sample(&DistributionSpec::gaussian(3.0, 2.0).unwrap(), 500, 1);
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let pairs: Vec<_> = ys.iter().map(|&y| (pi(lo, 0.0, hi, 0.9), y)).collect();
        assert_eq!(coverage(&pairs).unwrap().success_rate, 1.0);
    }

    #[test]
    fn oracle_intervals_are_calibrated() {
        for (k, beta) in [0.5, 0.7, 0.9].into_iter().enumerate() {
            let dist = DistributionSpec::laplace(0.0, 1.5).unwrap();
            let lo = analytic_quantile(&dist, QuantileLevel::new(0.5 - beta / 2.0).unwrap());
            let hi = analytic_quantile(&dist, QuantileLevel::new(0.5 + beta / 2.0).unwrap());
            let n = 4_000;
            let pairs: Vec<_> = sample(&dist, n, 30 + k as u64)
                .into_iter()
                .map(|y| (pi(lo, 0.0, hi, beta), y))
                .collect();
            let r = coverage(&pairs).unwrap();
            assert!((r.success_rate - beta).abs() <= 2.0 / (n as f64).sqrt(), "{r:?}");
        }
    }

    #[test]
    fn nesting_counts() {
        let a = vec![(0, pi(0.0, 1.0, 10.0, 0.7)), (1, pi(0.0, 1.0, 2.0, 0.7))];
        let b = vec![(0, pi(2.0, 2.5, 3.0, 0.9)), (1, pi(-1.0, 1.0, 3.0, 0.9))];
        let s7 = IntervalSpec::new(0.7).unwrap();
        let s9 = IntervalSpec::new(0.9).unwrap();
        assert_eq!(nesting_violations(&[(s7, a.clone()), (s9, b.clone())]).unwrap(), 1);
        assert_eq!(nesting_violations(&[(s9, b.clone()), (s7, a.clone())]).unwrap(), 1);
        assert_eq!(nesting_violations(&[(s7, a.clone()), (s9, a.clone())]).unwrap(), 0);
        let nested = vec![(0, pi(-1.0, 0.0, 1.0, 0.9)), (1, pi(-1.0, 0.0, 1.0, 0.9))];
        let inner = vec![(0, pi(-0.5, 0.0, 0.5, 0.7)), (1, pi(-0.5, 0.0, 0.5, 0.7))];
        assert_eq!(nesting_violations(&[(s7, inner), (s9, nested)]).unwrap(), 0);
        assert!(matches!(
            nesting_violations(&[(s7, a), (s9, b[..1].to_vec())]),
            Err(Error::Misaligned(_))
        ));
    }

    fn points() -> Vec<BacktestPoint> {
        (0..5)
            .map(|i| {
                let m = 0.1 * i as f64 + 1.0 / 3.0;
                BacktestPoint {
                    timestamp: 100 + i,
                    actual: m + 0.7,
                    intervals: vec![pi(m - 1.0 / 7.0, m, m + 0.25, 0.75), pi(m - 2.0, m, m + 1e-17, 0.9)],
                }
            })
            .collect()
    }

    #[test]
    fn plot_data_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.csv");
        emit_plot_data(&points(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,actual,median,lower_0.75,upper_0.75,lower_0.9,upper_0.9\n"));
        assert_eq!(parse_plot_data(&p).unwrap(), points());
        assert!(emit_plot_data(&[], dir.path().join("empty.csv")).is_err());
        assert!(!dir.path().join("empty.csv").exists());

        let mut bad = points();
        bad[2].intervals[1].median += 1.0;
        assert!(matches!(emit_plot_data(&bad, dir.path().join("b.csv")), Err(Error::Misaligned(_))));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ReportMeta {
            seed: 7,
            config_hash: config_hash(&("cfg", 1)).unwrap(),
        };
        assert_eq!(meta.config_hash.len(), 16);
        let r = coverage(&pairs_of(&points(), 0)).unwrap();
        let p = dir.path().join("r.json");
        emit_report(std::slice::from_ref(&r), &meta, &p, ReportFormat::Json).unwrap();
        let doc = read_report(&p).unwrap();
        assert_eq!(doc.report, r);
        assert_eq!(doc.meta, meta);

        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["version", "nominal_width", "success_rate", "mean_width", "rogue_rate", "crossing_count", "n", "meta"] {
            assert!(v.get(key).is_some(), "{key}");
        }

        let c = dir.path().join("r.csv");
        emit_report(&[r.clone(), r], &meta, &c, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&c).unwrap().lines().count(), 3);
        assert!(emit_report(&[], &meta, dir.path().join("x.json"), ReportFormat::Json).is_err());
    }

    #[test]
    fn report_values_keep_full_precision() {
        let r = CoverageReport {
            nominal_width: 0.75,
            success_rate: 2.0 / 3.0,
            mean_width: 12.345678912345,
            rogue_rate: 1.0 / 7.0,
            crossing_count: 0,
            n: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let meta = ReportMeta { seed: 0, config_hash: "0".repeat(16) };
        emit_report(std::slice::from_ref(&r), &meta, &p, ReportFormat::Json).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("0.6666666666666666"), "{text}");
        assert_eq!(read_report(&p).unwrap().report, r);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        assert_eq!(config_hash(&[1, 2]).unwrap(), config_hash(&[1, 2]).unwrap());
        assert_ne!(config_hash(&[1, 2]).unwrap(), config_hash(&[2, 1]).unwrap());
    }

    fn pairs_of(points: &[BacktestPoint], k: usize) -> Vec<(PredictionInterval, f64)> {
        crate::train::pairs_for_spec(points, k)
    }
}
