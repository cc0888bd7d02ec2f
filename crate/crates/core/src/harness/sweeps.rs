use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{aggregate, CellStats};
use crate::harness::run::{write_results, Cell, RunContext, RunResult, Sweep};
use crate::perturbed_context::Variant;
use crate::training::{ModelKind, Regime};

/// A qualitative expectation checked on sweep means. `pass` is `None` when the
/// sweep did not produce the cells needed, or when the item is only reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub pass: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sweep: Sweep,
    pub config_hash: String,
    pub requested: usize,
    pub completed: usize,
    pub failed: usize,
    pub cells: Vec<CellStats>,
    pub flags: Vec<Flag>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub results: Vec<RunResult>,
    pub summary: SweepSummary,
}

impl SweepOutcome {
    pub fn all_completed(&self) -> bool {
        self.summary.failed == 0
    }
}

pub fn train_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &regime in &cfg.regimes {
        for &kind in &cfg.kinds {
            cells.push(Cell { sweep: Sweep::Train, kind, regime, value: None });
        }
    }
    cells
}

/// NoExp and ExpGold anchors, then ExpCorrupted(p) per p, plus the tunable
/// variant when the encoder is frozen.
pub fn corruption_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &regime in &cfg.regimes {
        let cell = |kind, value| Cell { sweep: Sweep::Corruption, kind, regime, value };
        cells.push(cell(ModelKind::NoExp, None));
        cells.push(cell(ModelKind::ExpGold, None));
        for &p in &cfg.corruption {
            cells.push(cell(ModelKind::ExpCorrupted(p), Some(p)));
            if regime == Regime::FrozenLM {
                cells.push(cell(ModelKind::ExpCorruptedTunable(p), Some(p)));
            }
        }
    }
    cells
}

pub fn data_fraction_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &regime in &cfg.regimes {
        for &f in &cfg.fractions {
            for &kind in &cfg.kinds {
                cells.push(Cell { sweep: Sweep::DataFraction, kind, regime, value: Some(f) });
            }
        }
    }
    cells
}

pub fn context_size_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &regime in &cfg.regimes {
        for &l in &cfg.context_sizes {
            let kind = ModelKind::PC(Variant::FactorizedRandom);
            cells.push(Cell { sweep: Sweep::ContextSize, kind, regime, value: Some(l as f64) });
        }
    }
    cells
}

pub fn cells_for(sweep: Sweep, cfg: &ExperimentConfig) -> Vec<Cell> {
    match sweep {
        Sweep::Train => train_cells(cfg),
        Sweep::Corruption => corruption_cells(cfg),
        Sweep::DataFraction => data_fraction_cells(cfg),
        Sweep::ContextSize => context_size_cells(cfg),
    }
}

/// Runs the grid, then writes `results-<sweep>.jsonl`, `<sweep>.csv` and
/// `<sweep>-summary.json` into the run directory.
pub fn run_sweep(ctx: &RunContext, sweep: Sweep, jobs: usize) -> Result<SweepOutcome> {
    let cells = cells_for(sweep, &ctx.config);
    let results = ctx.run_grid(&cells, jobs)?;
    let dir = ctx.run_dir();
    write_results(&dir, sweep, &results)?;
    write_csv(&dir.join(format!("{}.csv", sweep.name())), sweep, &results)?;
    let summary = summarize(sweep, &ctx.hash, &results);
    fs::write(dir.join(format!("{}-summary.json", sweep.name())), serde_json::to_string_pretty(&summary)?)?;
    Ok(SweepOutcome { results, summary })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: `<axis>,kind,seed,f1,acc,regime,precision,recall,time_ratio,seconds,status,error`.
pub fn write_csv(path: &Path, sweep: Sweep, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        sweep.axis(),
        "kind",
        "seed",
        "f1",
        "acc",
        "regime",
        "precision",
        "recall",
        "time_ratio",
        "seconds",
        "status",
        "error",
    ])?;
    for r in results {
        let m = r.metrics;
        w.write_record([
            opt(r.cell.value),
            r.cell.kind.to_string(),
            r.seed.to_string(),
            opt(m.map(|m| m.f1)),
            opt(m.map(|m| m.accuracy)),
            r.cell.regime.to_string(),
            opt(m.map(|m| m.precision)),
            opt(m.map(|m| m.recall)),
            opt(r.time_ratio),
            format!("{:.3}", r.seconds),
            if r.is_ok() { "ok" } else { "failed" }.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn summarize(sweep: Sweep, config_hash: &str, results: &[RunResult]) -> SweepSummary {
    let cells = aggregate(results);
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let flags = match sweep {
        Sweep::Train => Vec::new(),
        Sweep::Corruption => corruption_flags(&cells),
        Sweep::DataFraction => data_fraction_flags(&cells),
        Sweep::ContextSize => context_size_flags(&cells),
    };
    SweepSummary {
        sweep,
        config_hash: config_hash.to_string(),
        requested: results.len(),
        completed,
        failed: results.len() - completed,
        cells,
        flags,
    }
}

fn regimes(cells: &[CellStats]) -> Vec<Regime> {
    let mut r: Vec<Regime> = cells.iter().map(|c| c.regime).collect();
    r.sort_by_key(|r| r.to_string());
    r.dedup();
    r
}

fn mean_f1(cells: &[CellStats], regime: Regime, kind: ModelKind) -> Option<f64> {
    cells.iter().find(|c| c.regime == regime && c.kind == kind).and_then(|c| c.f1_mean)
}

fn flag(name: String, pass: Option<bool>, detail: String) -> Flag {
    Flag { name, pass, detail }
}

fn corruption_flags(cells: &[CellStats]) -> Vec<Flag> {
    let mut flags = Vec::new();
    for regime in regimes(cells) {
        let gold = mean_f1(cells, regime, ModelKind::ExpGold);
        let noexp = mean_f1(cells, regime, ModelKind::NoExp);
        let p0 = mean_f1(cells, regime, ModelKind::ExpCorrupted(0.0));
        let pmax = cells
            .iter()
            .filter(|c| c.regime == regime && matches!(c.kind, ModelKind::ExpCorrupted(_)))
            .filter_map(|c| c.value)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));

        flags.push(match (p0, gold) {
            (Some(a), Some(b)) => flag(
                format!("p0-matches-gold/{regime}"),
                Some((a - b).abs() <= 1e-12),
                format!("ExpCorrupted(0) {a:.4} vs ExpGold {b:.4}"),
            ),
            _ => flag(format!("p0-matches-gold/{regime}"), None, "p = 0 or ExpGold missing".into()),
        });

        let corrupted = pmax.and_then(|p| mean_f1(cells, regime, ModelKind::ExpCorrupted(p)));
        flags.push(match (gold, corrupted, noexp, pmax) {
            (Some(g), Some(c), Some(n), Some(p)) => flag(
                format!("gold>=corrupted>=no-exp/{regime}"),
                Some(g >= c && c >= n),
                format!(
                    "gold {g:.4}, corrupted(p={p}) {c:.4}, no-exp {n:.4}; corrupted-no-exp {:+.4}, gold-corrupted {:+.4}",
                    c - n,
                    g - c
                ),
            ),
            _ => flag(format!("gold>=corrupted>=no-exp/{regime}"), None, "anchor or corrupted cell missing".into()),
        });

        if regime == Regime::FrozenLM {
            let tunable = pmax.and_then(|p| mean_f1(cells, regime, ModelKind::ExpCorruptedTunable(p)));
            flags.push(match (tunable, corrupted, pmax) {
                (Some(t), Some(c), Some(p)) => flag(
                    format!("tunable>=corrupted/{regime}"),
                    Some(t >= c),
                    format!("ExpCorruptedTunable({p}) {t:.4} vs ExpCorrupted({p}) {c:.4}"),
                ),
                _ => flag(format!("tunable>=corrupted/{regime}"), None, "tunable cell missing".into()),
            });
        }
    }
    flags
}

/// Mean F1 by increasing swept value for one (kind, regime) series.
fn series(cells: &[CellStats], regime: Regime, kind: ModelKind) -> Vec<(f64, f64)> {
    let mut s: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.regime == regime && c.kind == kind)
        .filter_map(|c| Some((c.value?, c.f1_mean?)))
        .collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    s
}

fn data_fraction_flags(cells: &[CellStats]) -> Vec<Flag> {
    let mut kinds: Vec<ModelKind> = Vec::new();
    for c in cells {
        if !kinds.contains(&c.kind) {
            kinds.push(c.kind);
        }
    }
    let mut flags = Vec::new();
    for regime in regimes(cells) {
        for &kind in &kinds {
            let s = series(cells, regime, kind);
            if s.is_empty() {
                continue;
            }
            let monotone = s.windows(2).all(|w| w[1].1 >= w[0].1);
            let detail = s.iter().map(|(v, f)| format!("{v}: {f:.4}")).collect::<Vec<_>>().join(", ");
            flags.push(flag(format!("monotone/{kind}/{regime}"), Some(monotone), detail));
        }
    }
    flags
}

fn context_size_flags(cells: &[CellStats]) -> Vec<Flag> {
    let kind = ModelKind::PC(Variant::FactorizedRandom);
    let mut flags = Vec::new();
    for regime in regimes(cells) {
        let s = series(cells, regime, kind);
        let (Some(first), Some(last)) = (s.first(), s.last()) else {
            flags.push(flag(format!("context-size/{regime}"), None, "no completed cells".into()));
            continue;
        };
        match regime {
            Regime::FrozenLM => flags.push(flag(
                "largest-l>=smallest-l/frozen-lm".into(),
                Some(last.1 >= first.1),
                format!("l={} {:.4} vs l={} {:.4}", last.0, last.1, first.0, first.1),
            )),
            Regime::FineTune => {
                let max = s.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                let min = s.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
                flags.push(flag("spread/fine-tune".into(), None, format!("max-min F1 across l: {:.4}", max - min)));
            }
        }
    }
    flags
}
