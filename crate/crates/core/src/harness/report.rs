use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::bench::BenchReport;
use crate::harness::run::{read_results, RunResult, Sweep, RESULTS_PREFIX};
use crate::training::{ModelKind, Regime};

/// Seed statistics of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub config_hash: String,
    pub sweep: Sweep,
    pub kind: ModelKind,
    pub regime: Regime,
    pub value: Option<f64>,
    /// Completed seeds.
    pub n: usize,
    pub failed: usize,
    pub f1_mean: Option<f64>,
    pub f1_std: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub time_ratio: Option<f64>,
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(xs: &[f64]) -> Option<(f64, Option<f64>)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

/// A fraction as a percentage, `75.5 ± 0.59` style; a lone seed shows no deviation.
pub fn format_pm(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.1} ± {:.2}", mean * 100.0, s * 100.0),
        None => format!("{:.1}", mean * 100.0),
    }
}

fn cell_order(a: &CellStats, b: &CellStats) -> std::cmp::Ordering {
    (&a.config_hash, a.sweep, a.regime.to_string(), a.kind.to_string())
        .cmp(&(&b.config_hash, b.sweep, b.regime.to_string(), b.kind.to_string()))
        .then_with(|| match (a.value, b.value) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (x, y) => x.is_some().cmp(&y.is_some()),
        })
}

/// Groups results by cell. The output order depends only on cell keys, never
/// on the order results arrive in.
pub fn aggregate(results: &[RunResult]) -> Vec<CellStats> {
    let mut groups: Vec<(CellStats, Vec<&RunResult>)> = Vec::new();
    for r in results {
        let same = |c: &CellStats| {
            c.config_hash == r.config_hash
                && c.sweep == r.cell.sweep
                && c.kind == r.cell.kind
                && c.regime == r.cell.regime
                && c.value == r.cell.value
        };
        match groups.iter_mut().find(|(c, _)| same(c)) {
            Some((_, v)) => v.push(r),
            None => groups.push((
                CellStats {
                    config_hash: r.config_hash.clone(),
                    sweep: r.cell.sweep,
                    kind: r.cell.kind,
                    regime: r.cell.regime,
                    value: r.cell.value,
                    n: 0,
                    failed: 0,
                    f1_mean: None,
                    f1_std: None,
                    acc_mean: None,
                    acc_std: None,
                    time_ratio: None,
                },
                vec![r],
            )),
        }
    }
    let mut out: Vec<CellStats> = groups
        .into_iter()
        .map(|(mut c, mut rs)| {
            rs.sort_by_key(|r| r.seed);
            let ok: Vec<_> = rs.iter().filter_map(|r| r.metrics).collect();
            c.n = ok.len();
            c.failed = rs.len() - ok.len();
            let f1: Vec<f64> = ok.iter().map(|m| m.f1).collect();
            let acc: Vec<f64> = ok.iter().map(|m| m.accuracy).collect();
            (c.f1_mean, c.f1_std) = mean_std(&f1).map_or((None, None), |(m, s)| (Some(m), s));
            (c.acc_mean, c.acc_std) = mean_std(&acc).map_or((None, None), |(m, s)| (Some(m), s));
            let times: Vec<f64> = rs.iter().filter_map(|r| r.time_ratio).collect();
            c.time_ratio = mean_std(&times).map(|(m, _)| m);
            c
        })
        .collect();
    out.sort_by(cell_order);
    out
}

#[derive(Clone, Debug)]
pub struct Report {
    pub cells: Vec<CellStats>,
    pub markdown: String,
    /// Files written: `report.csv`, `report.md` and one SVG per swept grid.
    pub files: Vec<PathBuf>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let name = e.file_name().to_string_lossy().into_owned();
        if path.is_dir() {
            if name != "runs" && name != "backbones" && name != "plots" {
                collect_files(&path, out)?;
            }
        } else if (name.starts_with(RESULTS_PREFIX) && name.ends_with(".jsonl")) || name == "bench.json" {
            out.push(path);
        }
    }
    Ok(())
}

fn dash(v: Option<String>) -> String {
    v.unwrap_or_else(|| "-".into())
}

fn cell_table(md: &mut String, sweep: Sweep, cells: &[&CellStats]) {
    let _ = writeln!(md, "| kind | regime | {} | n | F1 | Acc | Time |", sweep.axis());
    md.push_str("|---|---|---|---|---|---|---|\n");
    for c in cells {
        let n = if c.failed > 0 { format!("{} ({} failed)", c.n, c.failed) } else { c.n.to_string() };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            c.kind,
            c.regime,
            dash(c.value.map(|v| v.to_string())),
            n,
            dash(c.f1_mean.map(|m| format_pm(m, c.f1_std))),
            dash(c.acc_mean.map(|m| format_pm(m, c.acc_std))),
            dash(c.time_ratio.map(|t| format!("{t:.2}"))),
        );
    }
}

fn bench_table(md: &mut String, b: &BenchReport) {
    let _ = writeln!(md, "## bench ({})\n", b.config_hash);
    md.push_str("| model | seconds/batch | NoExp seconds/batch | ratio |\n|---|---|---|---|\n");
    for r in &b.rows {
        let _ = writeln!(md, "| {} | {:.5} | {:.5} | {:.2} |", r.model, r.seconds, r.baseline_seconds, r.ratio);
    }
    md.push('\n');
    for f in &b.flags {
        let mark = match f.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "info",
        };
        let _ = writeln!(md, "- {mark} {}: {}", f.name, f.detail);
    }
    md.push('\n');
}

/// Series label used in plots: corrupted kinds share one line across p.
fn series_label(c: &CellStats) -> String {
    let kind = match c.kind {
        ModelKind::ExpCorrupted(_) => "exp-corrupted".to_string(),
        ModelKind::ExpCorruptedTunable(_) => "exp-corrupted-tunable".to_string(),
        k => k.to_string(),
    };
    format!("{kind} / {}", c.regime)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// F1 against the swept value; cells without a value (anchors) are flat lines.
fn plot(path: &Path, title: &str, axis: &str, cells: &[&CellStats]) -> Result<()> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut anchors: BTreeMap<String, f64> = BTreeMap::new();
    for c in cells {
        let Some(f1) = c.f1_mean else { continue };
        match c.value {
            Some(v) => series.entry(series_label(c)).or_default().push((v, f1)),
            None => {
                anchors.insert(series_label(c), f1);
            }
        }
    }
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    if xs.is_empty() {
        return Ok(());
    }
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(axis).y_desc("F1").draw().map_err(plot_err)?;
    let mut k = 0;
    for (label, mut pts) in series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(k).to_rgba();
        k += 1;
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    for (label, f1) in anchors {
        let color = Palette99::pick(k).to_rgba();
        k += 1;
        chart
            .draw_series(LineSeries::new(vec![(x0, f1), (x1, f1)], color.stroke_width(1)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(1)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Aggregates every result file under `dir` into `report.csv`, `report.md`
/// and `plots/*.svg`, all written into `dir`.
pub fn report(dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Validation(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut results = Vec::new();
    let mut benches = Vec::new();
    for f in &files {
        if f.file_name().is_some_and(|n| n == "bench.json") {
            benches.push(serde_json::from_str::<BenchReport>(&fs::read_to_string(f)?)?);
        } else {
            results.extend(read_results(f)?);
        }
    }
    if results.is_empty() && benches.is_empty() {
        return Err(Error::Validation(format!("no run results under {}", dir.display())));
    }
    let cells = aggregate(&results);
    let mut written = Vec::new();

    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "config_hash", "sweep", "kind", "regime", "value", "n", "failed", "f1_mean", "f1_std", "acc_mean", "acc_std",
        "time_ratio",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &cells {
        w.write_record([
            c.config_hash.clone(),
            c.sweep.to_string(),
            c.kind.to_string(),
            c.regime.to_string(),
            opt(c.value),
            c.n.to_string(),
            c.failed.to_string(),
            opt(c.f1_mean),
            opt(c.f1_std),
            opt(c.acc_mean),
            opt(c.acc_std),
            opt(c.time_ratio),
        ])?;
    }
    w.flush()?;
    written.push(csv_path);

    let mut md = String::from("# Results\n\nF1 and accuracy in percent, mean ± sample std over seeds. Time is forward cost relative to NoExp.\n\n");
    let mut groups: Vec<(String, Sweep)> = cells.iter().map(|c| (c.config_hash.clone(), c.sweep)).collect();
    groups.dedup();
    let plot_dir = dir.join("plots");
    for (hash, sweep) in groups {
        let group: Vec<&CellStats> = cells.iter().filter(|c| c.config_hash == hash && c.sweep == sweep).collect();
        let _ = writeln!(md, "## {sweep} ({hash})\n");
        cell_table(&mut md, sweep, &group);
        md.push('\n');
        if sweep != Sweep::Train {
            fs::create_dir_all(&plot_dir)?;
            let path = plot_dir.join(format!("{hash}-{sweep}.svg"));
            plot(&path, &format!("{sweep} ({hash})"), sweep.axis(), &group)?;
            if path.exists() {
                let _ = writeln!(md, "![{sweep}](plots/{hash}-{sweep}.svg)\n");
                written.push(path);
            }
        }
    }
    for b in &benches {
        bench_table(&mut md, b);
    }
    let md_path = dir.join("report.md");
    fs::write(&md_path, &md)?;
    written.push(md_path);
    Ok(Report { cells, markdown: md, files: written })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_matches_table_style() {
        assert_eq!(format_pm(0.755, Some(0.0059)), "75.5 ± 0.59");
        assert_eq!(format_pm(0.755, None), "75.5");
    }

    #[test]
    fn single_value_has_no_std() {
        assert_eq!(mean_std(&[0.4]), Some((0.4, None)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn constant_values_have_zero_std() {
        let (m, s) = mean_std(&[0.8; 5]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert_eq!(format_pm(m, s), "80.0 ± 0.00");
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (_, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_directory_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(Error::Validation(_))));
    }
}
