use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::explanations::ExplanationSet;
use crate::harness::config::{load_task, ExperimentConfig, TaskSource};
use crate::harness::sweeps::Flag;
use crate::perturbed_context::{PCSpec, Variant};
use crate::training::{build_model, linear_fit, max_relative_deviation, measure_time, Backbone, BuildInputs, Model, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    /// Explanation count for ExpGold rows.
    pub n: Option<usize>,
    pub seconds: f64,
    pub baseline_seconds: f64,
    /// Relative to NoExp on the same batches.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub batch_size: usize,
    pub rows: Vec<BenchRow>,
    /// Largest relative deviation of the ExpGold cost ratios from their linear fit in n.
    pub linear_deviation: Option<f64>,
    pub exp_gold_over_pc: Option<f64>,
    pub pc_over_noexp: Option<f64>,
    pub flags: Vec<Flag>,
}

/// The timing task: the configured one, with the bench sentence lengths when generated.
pub fn bench_source(cfg: &ExperimentConfig) -> TaskSource {
    match &cfg.task {
        TaskSource::Generate(spec) => {
            TaskSource::Generate(crate::data::TaskSpec { sentence_len: cfg.bench.sentence_len, ..spec.clone() })
        }
        other => other.clone(),
    }
}

/// Forward cost of NoExp, ExpGold(n), PC(Random) and Mixture on a randomly
/// initialized encoder. Warmup batches are excluded from every measurement.
pub fn bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let task = load_task(&bench_source(cfg))?;
    let ds = &task.dataset;
    let bb = Backbone::fresh(cfg.encoder_config(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0))?;
    let pc = PCSpec { m: cfg.pc_m, ..PCSpec::new(Variant::Random, bb.encoder.d()) };
    let build = |kind: ModelKind, set: &ExplanationSet| -> Result<Model> {
        let inputs = BuildInputs { explanations: Some(set), pc: Some(pc), head_hidden: cfg.train.head_hidden };
        build_model(kind, &bb, ds, inputs, &mut ChaCha8Rng::seed_from_u64(0))
    };
    let b = &cfg.bench;
    let xs = if ds.val.is_empty() { &ds.train } else { &ds.val };
    let baseline = build(ModelKind::NoExp, &task.explanations)?;
    let time = |model: &Model, name: String, n: Option<usize>| -> Result<BenchRow> {
        let t = measure_time(model, &baseline, xs, b.batch_size, b.n_batches, b.warmup)?;
        Ok(BenchRow { model: name, n, seconds: t.seconds, baseline_seconds: t.baseline_seconds, ratio: t.ratio })
    };

    let mut rows = vec![time(&baseline, ModelKind::NoExp.to_string(), None)?];
    for &n in &b.exp_n {
        let m = build(ModelKind::ExpGold, &task.explanations.cycled(n))?;
        rows.push(time(&m, format!("{}({n})", ModelKind::ExpGold), Some(n))?);
    }
    let pc_kind = ModelKind::PC(Variant::Random);
    rows.push(time(&build(pc_kind, &task.explanations)?, pc_kind.to_string(), None)?);
    rows.push(time(&build(ModelKind::Mixture, &task.explanations)?, ModelKind::Mixture.to_string(), None)?);

    let gold: Vec<&BenchRow> = rows.iter().filter(|r| r.n.is_some()).collect();
    let xn: Vec<f64> = gold.iter().map(|r| r.n.unwrap_or(0) as f64).collect();
    // ratios, not raw seconds: each is timed interleaved with the baseline, so drift between rows cancels
    let ys: Vec<f64> = gold.iter().map(|r| r.ratio).collect();
    let linear_deviation = (gold.len() >= 3).then(|| max_relative_deviation(&xn, &ys));
    let pc_row = rows.iter().find(|r| r.model == pc_kind.to_string());
    let largest = gold.iter().max_by_key(|r| r.n);
    let exp_gold_over_pc = largest.zip(pc_row).map(|(g, p)| g.ratio / p.ratio);
    let pc_over_noexp = pc_row.map(|p| p.ratio);

    let mut flags = Vec::new();
    if let (Some(r), Some(g)) = (exp_gold_over_pc, largest) {
        flags.push(Flag {
            name: format!("exp-gold({})/pc>=8", g.n.unwrap_or(0)),
            pass: Some(r >= 8.0),
            detail: format!("{r:.2}"),
        });
    }
    if let Some(r) = pc_over_noexp {
        flags.push(Flag { name: "pc/no-exp<=1.5".into(), pass: Some(r <= 1.5), detail: format!("{r:.3}") });
    }
    if let Some(dev) = linear_deviation {
        let (slope, intercept) = linear_fit(&xn, &ys);
        flags.push(Flag {
            name: "exp-gold-linear-in-n".into(),
            pass: Some(dev <= 0.3),
            detail: format!("max deviation {dev:.3} from {slope:.3}·n + {intercept:.3} NoExp batches"),
        });
    }

    let report = BenchReport { config_hash: cfg.hash(), batch_size: b.batch_size, rows, linear_deviation, exp_gold_over_pc, pc_over_noexp, flags };
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(dir.join("bench.csv"))?;
    w.write_record(["model", "n", "seconds", "baseline_seconds", "ratio"])?;
    for r in &report.rows {
        w.write_record([
            r.model.clone(),
            r.n.map(|n| n.to_string()).unwrap_or_default(),
            r.seconds.to_string(),
            r.baseline_seconds.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(report)
}
