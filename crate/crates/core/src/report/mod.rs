//! Machine-readable results and vector-graphic figures.
//!
//! `metrics.csv` is the source of truth; figures are derived from it and
//! never read back.

mod svg;

pub use svg::{render_curves, render_panels, render_selection_diagnostics, Facet, PlotSpec, Series, SeriesPoint};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::acquisition::Strategy;
use crate::harness::CycleRecord;
use crate::metrics::{aggregate, uniqueness_score, MetricsError, Summary, UniquenessRecord};
use crate::metrics::ratio_to_f64;

pub const METRICS_HEADER: &str = "strategy,pi_u,pi_t,repetition,cycle,cumulative_pct,f1_defect,faulty_selected_fraction";
pub const UNIQUENESS_HEADER: &str = "strategy,pi_u,pi_t,cycle,us,b,R";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to write")]
    Empty,
    #[error("empty facet {0:?}")]
    EmptyFacet(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed csv line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Decimal rendering with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.5}", x);
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{:.*}", decimals, x)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

/// The full `metrics.csv` text, rows sorted by
/// `(strategy, pi_u, pi_t, repetition, cycle)`.
pub fn metrics_csv_string(records: &[CycleRecord]) -> String {
    let mut sorted: Vec<&CycleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.strategy.as_str(), a.pi_u, a.pi_t, a.repetition, a.cycle)
            .cmp(&(b.strategy.as_str(), b.pi_u, b.pi_t, b.repetition, b.cycle))
    });
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            fmt_sig6(ratio_to_f64(r.pi_u)),
            fmt_sig6(ratio_to_f64(r.pi_t)),
            r.repetition,
            r.cycle,
            fmt_sig6(r.cumulative_pct()),
            fmt_sig6(r.f1_defect),
            fmt_sig6(r.faulty_selected_fraction),
        ));
    }
    out
}

pub fn write_metrics_csv(records: &[CycleRecord], path: &Path) -> Result<(), ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    write_file(path, &metrics_csv_string(records))
}

/// One parsed `metrics.csv` row. `pi_u` / `pi_t` keep their text form so
/// grouping is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub strategy: Strategy,
    pub pi_u: String,
    pub pi_t: String,
    pub repetition: usize,
    pub cycle: usize,
    pub cumulative_pct: f64,
    pub f1_defect: f64,
    pub faulty_selected_fraction: f64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(ReportError::Parse { line: 1, reason: "unexpected header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |reason: String| ReportError::Parse { line: i + 1, reason };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            Ok(MetricsRow {
                strategy: f[0].parse().map_err(|e: crate::acquisition::SelectionError| err(e.to_string()))?,
                pi_u: f[1].to_string(),
                pi_t: f[2].to_string(),
                repetition: int(f[3])?,
                cycle: int(f[4])?,
                cumulative_pct: num(f[5])?,
                f1_defect: num(f[6])?,
                faulty_selected_fraction: num(f[7])?,
            })
        })
        .collect()
}

/// Grouping key of aggregated curves.
pub type CurveKey = (Strategy, String, String, usize);

/// Per `(strategy, pi_u, pi_t, cycle)`: cumulative percent, F1 summary and
/// faulty-selection summary.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPoint {
    pub cumulative_pct: f64,
    pub f1: Summary<f64>,
    pub faulty: Summary<f64>,
}

pub fn aggregate_rows(rows: &[MetricsRow]) -> Result<BTreeMap<CurveKey, AggregatedPoint>, ReportError> {
    let key = |r: &MetricsRow| (r.strategy, r.pi_u.clone(), r.pi_t.clone(), r.cycle);
    let f1 = aggregate(rows.iter().map(|r| (key(r), r.f1_defect)))?;
    let faulty = aggregate(rows.iter().map(|r| (key(r), r.faulty_selected_fraction)))?;
    let pct = aggregate(rows.iter().map(|r| (key(r), r.cumulative_pct)))?;
    Ok(f1
        .into_iter()
        .map(|(k, s)| {
            let point = AggregatedPoint { cumulative_pct: pct[&k].mean, f1: s, faulty: faulty[&k] };
            (k, point)
        })
        .collect())
}

/// Uniqueness per `(strategy, pi_u, pi_t, cycle)` over all repetitions.
pub fn uniqueness_table(records: &[CycleRecord]) -> Result<Vec<(Strategy, String, String, UniquenessRecord)>, ReportError> {
    let mut groups: BTreeMap<(&str, _, _, usize), Vec<(usize, &[u64])>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.strategy.as_str(), r.pi_u, r.pi_t, r.cycle))
            .or_default()
            .push((r.repetition, r.selected_ids.as_slice()));
    }
    let mut out = Vec::new();
    for ((strategy, pi_u, pi_t, cycle), mut sets) in groups {
        if sets.len() < 2 {
            continue;
        }
        sets.sort_by_key(|s| s.0);
        let sets: Vec<&[u64]> = sets.into_iter().map(|s| s.1).collect();
        let u = uniqueness_score(cycle, &sets)?;
        out.push((strategy.parse().expect("known strategy"), fmt_sig6(ratio_to_f64(pi_u)), fmt_sig6(ratio_to_f64(pi_t)), u));
    }
    Ok(out)
}

pub fn uniqueness_csv_string(rows: &[(Strategy, String, String, UniquenessRecord)]) -> String {
    let mut out = String::from(UNIQUENESS_HEADER);
    out.push('\n');
    for (s, pu, pt, u) in rows {
        out.push_str(&format!("{s},{pu},{pt},{},{},{},{}\n", u.cycle, fmt_sig6(u.us_f64()), u.b, u.repetitions));
    }
    out
}

pub fn write_uniqueness_csv(records: &[CycleRecord], path: &Path) -> Result<(), ReportError> {
    let rows = uniqueness_table(records)?;
    write_file(path, &uniqueness_csv_string(&rows))
}

/// Parsed `uniqueness.csv`: `(strategy, pi_u, pi_t, cycle, us)`.
pub fn parse_uniqueness_csv(text: &str) -> Result<Vec<(Strategy, String, String, usize, f64)>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == UNIQUENESS_HEADER => {}
        _ => return Err(ReportError::Parse { line: 1, reason: "unexpected header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |reason: String| ReportError::Parse { line: i + 1, reason };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(err(format!("expected 7 fields, found {}", f.len())));
            }
            Ok((
                f[0].parse().map_err(|e: crate::acquisition::SelectionError| err(e.to_string()))?,
                f[1].to_string(),
                f[2].to_string(),
                f[3].parse().map_err(|e| err(format!("{e}")))?,
                f[4].parse().map_err(|e| err(format!("{e}")))?,
            ))
        })
        .collect()
}

fn file_label(pi: &str) -> String {
    let v: f64 = pi.parse().unwrap_or(f64::NAN);
    format!("{}", (v * 1e6).round() / 1e6)
}

pub fn f1_curves_file_name(pi_u: &str, pi_t: &str) -> String {
    format!("f1_curves_{}_{}.svg", file_label(pi_u), file_label(pi_t))
}

pub fn selection_diag_file_name(pi_u: &str) -> String {
    format!("selection_diag_{}.svg", file_label(pi_u))
}

fn strategy_series<F>(
    agg: &BTreeMap<CurveKey, AggregatedPoint>,
    keep: impl Fn(&CurveKey) -> bool,
    value: F,
) -> Vec<Series>
where
    F: Fn(&AggregatedPoint) -> (f64, f64, f64),
{
    let mut by_strategy: BTreeMap<&str, Vec<SeriesPoint>> = BTreeMap::new();
    for (k, p) in agg.iter().filter(|(k, _)| keep(k)) {
        let (mean, q1, q3) = value(p);
        by_strategy.entry(k.0.as_str()).or_default().push(SeriesPoint { x: p.cumulative_pct, mean, q1, q3 });
    }
    Strategy::ALL
        .iter()
        .filter_map(|s| by_strategy.remove(s.as_str()).map(|points| Series { label: s.to_string(), points }))
        .collect()
}

/// Figures written by [`render_report`].
#[derive(Debug, Default)]
pub struct RenderedFiles {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

/// Renders every figure for a metrics table (and optional uniqueness
/// table) into `out_dir`.
pub fn render_report(
    rows: &[MetricsRow],
    uniqueness: Option<&[(Strategy, String, String, usize, f64)]>,
    out_dir: &Path,
) -> Result<RenderedFiles, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let agg = aggregate_rows(rows)?;
    let mut pairs: Vec<(String, String)> = agg.keys().map(|k| (k.1.clone(), k.2.clone())).collect();
    pairs.sort_by(|a, b| {
        let pa: (f64, f64) = (a.0.parse().unwrap_or(0.0), a.1.parse().unwrap_or(0.0));
        let pb: (f64, f64) = (b.0.parse().unwrap_or(0.0), b.1.parse().unwrap_or(0.0));
        pa.partial_cmp(&pb).unwrap_or(std::cmp::Ordering::Equal)
    });
    pairs.dedup();
    let mut rendered = RenderedFiles::default();

    let f1_facet = |pu: &str, pt: &str| Facet {
        title: format!("pi_u = {pu}, pi_t = {pt}"),
        series: strategy_series(&agg, |k| k.1 == pu && k.2 == pt, |p| (p.f1.mean, p.f1.q1, p.f1.q3)),
        reference: None,
    };
    let curve_spec = |title: String, columns: usize| PlotSpec {
        title,
        x_label: "labeled pool (%)".into(),
        y_label: "F1 (defect)".into(),
        y_range: Some((0.0, 1.0)),
        columns,
    };
    for (pu, pt) in &pairs {
        let path = out_dir.join(f1_curves_file_name(pu, pt));
        render_curves(&[f1_facet(pu, pt)], &curve_spec(format!("Test F1, pi_u = {pu}, pi_t = {pt}"), 1), &path)?;
        rendered.files.push(path);
    }
    // Grid: one column per pi_u, matched test set on top, shifted below.
    let mut pius: Vec<&String> = pairs.iter().map(|p| &p.0).collect();
    pius.dedup();
    let matched: Vec<_> = pius.iter().filter(|pu| pairs.contains(&((**pu).clone(), (**pu).clone()))).collect();
    let shifted: Vec<_> = pairs.iter().filter(|(pu, pt)| pu != pt).collect();
    if !matched.is_empty() && !shifted.is_empty() {
        let mut facets: Vec<Facet> = Vec::new();
        for pu in &pius {
            facets.push(f1_facet(pu, pu));
        }
        for pu in &pius {
            if let Some((_, pt)) = shifted.iter().find(|(u, _)| u == *pu) {
                facets.push(f1_facet(pu, pt));
            }
        }
        let path = out_dir.join("f1_curves_grid.svg");
        if facets.iter().all(|f| !f.series.is_empty()) && facets.len() == 2 * pius.len() {
            render_curves(&facets, &curve_spec("Test F1 without (top) and with (bottom) label shift".into(), pius.len()), &path)?;
            rendered.files.push(path);
        }
    }

    for pu in pius {
        let pt = pairs.iter().find(|p| &p.0 == pu).map(|p| p.1.clone()).expect("pi_u present");
        let faulty = Facet {
            title: "(a) faulty images among selections".into(),
            series: strategy_series(&agg, |k| &k.1 == pu && k.2 == pt, |p| (p.faulty.mean, p.faulty.q1, p.faulty.q3)),
            reference: pu.parse().ok(),
        };
        let uniq = uniqueness.and_then(|u| {
            let mut by: BTreeMap<&str, Vec<SeriesPoint>> = BTreeMap::new();
            for (s, upu, upt, cycle, us) in u.iter().filter(|r| &r.1 == pu && r.2 == pt) {
                let x = agg.get(&(*s, upu.clone(), upt.clone(), *cycle)).map(|p| p.cumulative_pct).unwrap_or(*cycle as f64);
                by.entry(s.as_str()).or_default().push(SeriesPoint { x, mean: *us, q1: *us, q3: *us });
            }
            let series: Vec<Series> = Strategy::ALL
                .iter()
                .filter_map(|s| by.remove(s.as_str()).map(|points| Series { label: s.to_string(), points }))
                .collect();
            (!series.is_empty()).then(|| Facet { title: "(b) uniqueness score".into(), series, reference: None })
        });
        if uniq.is_none() {
            rendered.notices.push(format!("no uniqueness data for pi_u = {pu}; panel (b) omitted"));
        }
        let path = out_dir.join(selection_diag_file_name(pu));
        render_selection_diagnostics(&faulty, uniq.as_ref(), &format!("Selection diagnostics, pi_u = {pu}"), &path)?;
        rendered.files.push(path);
    }
    Ok(rendered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Fraction;

    fn record(strategy: Strategy, rep: usize, cycle: usize, f1: f64) -> CycleRecord {
        CycleRecord {
            strategy,
            pi_u: Fraction::new(1, 10),
            pi_t: Fraction::new(1, 20),
            repetition: rep,
            cycle,
            selected_ids: vec![(rep * 100 + cycle) as u64, 7],
            cumulative_labeled: 2 * (cycle + 1),
            pool_size: 100,
            f1_defect: f1,
            faulty_selected_fraction: 0.5,
            wall_time: 0.1,
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.1), "0.100000");
        assert_eq!(fmt_sig6(12.0), "12.0000");
        assert_eq!(fmt_sig6(0.0), "0.00000");
        assert_eq!(fmt_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig6(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig6(123456.7), "123457");
    }

    #[test]
    fn csv_rows_sorted_and_counted() {
        let mut records = Vec::new();
        for rep in (0..15).rev() {
            for cycle in 0..10 {
                records.push(record(Strategy::Random, rep, cycle, 0.25 + 0.01 * cycle as f64));
            }
        }
        let text = metrics_csv_string(&records);
        assert_eq!(text.lines().count(), 151);
        assert_eq!(text.lines().nth(1).unwrap(), "random,0.100000,0.0500000,0,0,2.00000,0.250000,0.500000");
        assert_eq!(text, metrics_csv_string(&records));
        let rows = parse_metrics_csv(&text).unwrap();
        assert_eq!(rows.len(), 150);
        for (row, rec) in rows.iter().zip({
            let mut r = records.clone();
            r.sort_by_key(|r| (r.repetition, r.cycle));
            r
        }) {
            assert!((row.f1_defect - rec.f1_defect).abs() <= 1e-6 * rec.f1_defect.abs());
        }
    }

    #[test]
    fn csv_strategy_order_is_by_name() {
        let text = metrics_csv_string(&[record(Strategy::Random, 0, 0, 0.1), record(Strategy::Coreset, 0, 0, 0.1)]);
        assert!(text.lines().nth(1).unwrap().starts_with("coreset"));
    }

    #[test]
    fn empty_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_metrics_csv(&[], &dir.path().join("m.csv")), Err(ReportError::Empty)));
    }

    #[test]
    fn uniqueness_of_fixed_picks_is_zero() {
        let mut records = Vec::new();
        for rep in 0..4 {
            for cycle in 0..3 {
                let mut r = record(Strategy::Entropy, rep, cycle, 0.3);
                r.selected_ids = vec![1 + cycle as u64 * 2, 2 + cycle as u64 * 2];
                records.push(r);
            }
        }
        let table = uniqueness_table(&records).unwrap();
        assert_eq!(table.len(), 3);
        assert!(table.iter().all(|t| t.3.us_f64() == 0.0 && t.3.b == 2 && t.3.repetitions == 4));
        let text = uniqueness_csv_string(&table);
        assert!(text.starts_with(UNIQUENESS_HEADER));
        assert_eq!(parse_uniqueness_csv(&text).unwrap().len(), 3);
    }

    #[test]
    fn file_names() {
        assert_eq!(f1_curves_file_name("0.100000", "0.0500000"), "f1_curves_0.1_0.05.svg");
        assert_eq!(selection_diag_file_name("1.00000"), "selection_diag_1.svg");
    }
}
