use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::subsample;
use crate::error::{Error, Result};
use crate::harness::config::{load_task, pretraining_corpus, ExperimentConfig, Task};
use crate::numerics::checkpoint;
use crate::perturbed_context::{PCSpec, Variant};
use crate::training::{
    build_model, evaluate, measure_time, mlm_pretrain, train, Backbone, BuildInputs, Metrics, Model, ModelKind, Regime,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    Train,
    Corruption,
    DataFraction,
    ContextSize,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Train => "train",
            Sweep::Corruption => "corruption",
            Sweep::DataFraction => "data-fraction",
            Sweep::ContextSize => "context-size",
        }
    }

    /// Column header of the swept value.
    pub fn axis(self) -> &'static str {
        match self {
            Sweep::Train => "value",
            Sweep::Corruption => "p",
            Sweep::DataFraction => "fraction",
            Sweep::ContextSize => "l",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One point of a grid; it runs once per seed.
///
/// `value` is the swept quantity: the training fraction, the context size l,
/// or the corruption fraction (`None` for the NoExp and ExpGold anchors).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sweep: Sweep,
    pub kind: ModelKind,
    pub regime: Regime,
    pub value: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    #[serde(flatten)]
    pub cell: Cell,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Test-split metrics (validation when the test split is empty).
    pub metrics: Option<Metrics>,
    /// Forward cost relative to NoExp on the same batches.
    pub time_ratio: Option<f64>,
    /// Wall-clock seconds for build, training and evaluation.
    pub seconds: f64,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn f1(&self) -> Option<f64> {
        self.metrics.map(|m| m.f1)
    }
}

/// Everything a run needs that does not change between cells.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub hash: String,
    pub task: Task,
    pub backbone: Backbone,
}

/// Loads the pretrained encoder from the backbone cache, or pretrains and stores it.
pub fn obtain_backbone(cfg: &ExperimentConfig, task: &Task) -> Result<Backbone> {
    let dir = cfg.backbone_dir();
    let enc = cfg.encoder_config(task.dataset.vocab.len());
    if dir.join("checkpoint.json").exists() {
        let bb = Backbone::load(&dir)?;
        if bb.encoder.config == enc {
            return Ok(bb);
        }
    }
    let mut bb = Backbone::fresh(enc, &mut ChaCha8Rng::seed_from_u64(cfg.pretrain.config.seed))?;
    if cfg.pretrain.corpus > 0 {
        let corpus = pretraining_corpus(&cfg.task, task, &cfg.pretrain)?;
        mlm_pretrain(&mut bb, &corpus, &cfg.pretrain.config)?;
        bb.save(&dir)?;
    }
    Ok(bb)
}

impl RunContext {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let task = load_task(&config.task)?;
        let backbone = obtain_backbone(&config, &task)?;
        let hash = config.hash();
        let dir = config.run_dir();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
        Ok(RunContext { config, hash, task, backbone })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }

    fn pc_spec(&self, cell: &Cell) -> PCSpec {
        let d = self.backbone.encoder.d();
        match cell.sweep {
            Sweep::ContextSize => PCSpec {
                m: self.config.pc_m,
                l: cell.value.unwrap_or(0.0) as usize,
                ..PCSpec::new(Variant::FactorizedRandom, d)
            },
            _ => PCSpec { m: self.config.pc_m, ..PCSpec::new(Variant::Random, d) },
        }
    }

    fn build(&self, kind: ModelKind, cell: &Cell, ds: &crate::data::Dataset, seed: u64) -> Result<Model> {
        let inputs = BuildInputs {
            explanations: Some(&self.task.explanations),
            pc: Some(self.pc_spec(cell)),
            head_hidden: self.config.train.head_hidden,
        };
        build_model(kind, &self.backbone, ds, inputs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn execute(&self, cell: &Cell, seed: u64) -> Result<(Metrics, Option<f64>)> {
        let ds = match cell.sweep {
            Sweep::DataFraction => subsample(&self.task.dataset, cell.value.unwrap_or(1.0), seed)?,
            _ => self.task.dataset.clone(),
        };
        let mut model = self.build(cell.kind, cell, &ds, seed)?;
        let cfg = TrainConfig { seed, regime: cell.regime, ..self.config.train.clone() };
        let history = train(&mut model, &ds, &cfg)?;
        let eval_split = if ds.test.is_empty() { &ds.val } else { &ds.test };
        let metrics = evaluate(&model, eval_split, ds.nil_label, cfg.eval_batch)?;
        let time_ratio = if self.config.time_batches > 0 {
            let baseline = self.build(ModelKind::NoExp, cell, &ds, seed)?;
            let t = measure_time(&model, &baseline, &ds.val, cfg.batch_size, self.config.time_batches, 1)?;
            Some(t.ratio)
        } else {
            None
        };
        let dir = self.run_dir().join("runs").join(cell.sweep.name()).join(run_name(cell, seed));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("history.json"), serde_json::to_string_pretty(&history)?)?;
        if self.config.checkpoints {
            checkpoint::save(&model.store, dir.join("checkpoint.json"))?;
        }
        Ok((metrics, time_ratio))
    }

    /// Trains and evaluates one cell; failures become a result with an error status.
    pub fn run(&self, cell: &Cell, seed: u64) -> RunResult {
        let t0 = Instant::now();
        let outcome = self.execute(cell, seed);
        let seconds = t0.elapsed().as_secs_f64();
        let (status, error, metrics, time_ratio) = match outcome {
            Ok((m, t)) => (RunStatus::Ok, None, Some(m), t),
            Err(e) => (RunStatus::Failed, Some(e.to_string()), None, None),
        };
        RunResult { config_hash: self.hash.clone(), cell: *cell, seed, status, error, metrics, time_ratio, seconds }
    }

    /// Runs every cell for every seed on a pool of `jobs` threads. Results come
    /// back in grid order whatever the scheduling.
    pub fn run_grid(&self, cells: &[Cell], jobs: usize) -> Result<Vec<RunResult>> {
        let work: Vec<(Cell, u64)> =
            cells.iter().flat_map(|c| self.config.seeds.iter().map(move |&s| (*c, s))).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(|| work.par_iter().map(|(c, s)| self.run(c, *s)).collect()))
    }
}

fn run_name(cell: &Cell, seed: u64) -> String {
    let kind = cell.kind.to_string().replace(':', "_");
    match cell.value {
        Some(v) => format!("{kind}__{}__{v}__s{seed}", cell.regime),
        None => format!("{kind}__{}__s{seed}", cell.regime),
    }
}

pub const RESULTS_PREFIX: &str = "results-";

/// Writes `results-<sweep>.jsonl` into `dir`, replacing any earlier file.
pub fn write_results(dir: &Path, sweep: Sweep, results: &[RunResult]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{RESULTS_PREFIX}{}.jsonl", sweep.name()));
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    for r in results {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(path)
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })
        })
        .collect()
}
