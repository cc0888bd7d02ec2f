use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_corpus, generate_task, load_jsonl, Dataset, TaskSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::explanations::ExplanationSet;
use crate::perturbed_context::Variant;
use crate::training::{ModelKind, PretrainConfig, Regime, TrainConfig};
use crate::vocab::TokenId;

/// Where the labelled data and its explanation list come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum TaskSource {
    /// The synthetic task, with its gold explanations.
    Generate(TaskSpec),
    /// A directory in the layout of [`crate::data::save_jsonl`] and one explanation per line.
    Jsonl { dir: PathBuf, explanations: PathBuf },
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Generate(TaskSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSetup {
    /// Sentences in the masked-LM corpus; 0 skips pretraining.
    pub corpus: usize,
    pub corpus_seed: u64,
    #[serde(flatten)]
    pub config: PretrainConfig,
}

impl Default for PretrainSetup {
    fn default() -> Self {
        PretrainSetup { corpus: 20_000, corpus_seed: 99, config: PretrainConfig { epochs: 5, ..Default::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub n_batches: usize,
    pub warmup: usize,
    /// Sentence lengths of the timing task when the task is generated.
    pub sentence_len: (usize, usize),
    /// Explanation counts timed for ExpGold.
    pub exp_n: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch_size: 32, n_batches: 5, warmup: 2, sentence_len: (32, 48), exp_n: vec![1, 2, 4, 8, 16] }
    }
}

/// One JSON file describing a whole experiment. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    /// Kinds trained by `train` and the data-fraction sweep.
    pub kinds: Vec<ModelKind>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub corruption: Vec<f64>,
    pub fractions: Vec<f64>,
    pub context_sizes: Vec<usize>,
    /// `seed` and `regime` are set per run.
    pub train: TrainConfig,
    /// `vocab_size` is taken from the task.
    pub encoder: EncoderConfig,
    pub pretrain: PretrainSetup,
    /// Slot count of every perturbed context.
    pub pc_m: usize,
    /// Forward batches timed against NoExp after each run; 0 skips timing.
    pub time_batches: usize,
    pub checkpoints: bool,
    pub bench: BenchConfig,
    /// Output root; not part of the config hash.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSource::default(),
            kinds: vec![ModelKind::NoExp, ModelKind::ExpGold, ModelKind::PC(Variant::Random)],
            regimes: vec![Regime::FineTune, Regime::FrozenLM],
            seeds: (0..5).collect(),
            corruption: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            fractions: vec![0.05, 0.1, 0.25, 0.5, 1.0],
            context_sizes: vec![2, 4, 8, 16, 32],
            train: TrainConfig::default(),
            encoder: EncoderConfig::desk(0),
            pretrain: PretrainSetup::default(),
            pc_m: 4,
            time_batches: 3,
            checkpoints: true,
            bench: BenchConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

fn short_hash(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.kinds.is_empty() || self.regimes.is_empty() || self.seeds.is_empty() {
            return bad("kinds, regimes and seeds must be nonempty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.corruption.is_empty() || self.corruption.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("corruption fractions must be a nonempty list in [0, 1]");
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("data fractions must be a nonempty list in (0, 1]");
        }
        if self.context_sizes.is_empty() || self.pc_m == 0 {
            return bad("context sizes must be nonempty and pc_m positive");
        }
        let b = &self.bench;
        if b.batch_size == 0 || b.n_batches == 0 || b.exp_n.is_empty() || b.exp_n.contains(&0) {
            return bad("bench needs a batch size, batches and positive explanation counts");
        }
        self.train.validate()
    }

    /// Hex digest of everything that affects results (the output root excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        short_hash(&v)
    }

    /// Key of the pretrained encoder: task, encoder shape and pretraining only.
    pub fn backbone_hash(&self) -> String {
        short_hash(&serde_json::json!({ "task": self.task, "encoder": self.encoder, "pretrain": self.pretrain }))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.hash())
    }

    pub fn backbone_dir(&self) -> PathBuf {
        self.out.join("backbones").join(self.backbone_hash())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig { vocab_size, ..self.encoder.clone() }
    }
}

/// A dataset with the explanation list its models use.
#[derive(Clone, Debug)]
pub struct Task {
    pub dataset: Dataset,
    pub explanations: ExplanationSet,
}

pub fn load_task(source: &TaskSource) -> Result<Task> {
    let (dataset, explanations) = match source {
        TaskSource::Generate(spec) => generate_task(spec)?,
        TaskSource::Jsonl { dir, explanations } => {
            let mut ds = load_jsonl(dir)?;
            let set = ExplanationSet::load(explanations, &mut ds.vocab)?;
            (ds, set)
        }
    };
    dataset.validate()?;
    Ok(Task { dataset, explanations })
}

/// Unlabelled sentences for masked-LM pretraining: fresh synthetic text for a
/// generated task, the training sentences for a loaded one.
pub fn pretraining_corpus(source: &TaskSource, task: &Task, setup: &PretrainSetup) -> Result<Vec<Vec<TokenId>>> {
    match source {
        TaskSource::Generate(spec) => generate_corpus(spec, setup.corpus, setup.corpus_seed),
        TaskSource::Jsonl { .. } => {
            Ok(task.dataset.train.iter().cycle().take(setup.corpus).map(|x| x.tokens.clone()).collect())
        }
    }
}
