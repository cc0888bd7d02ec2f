//! Synthetic relation-extraction tasks, JSONL corpora and stratified subsampling.
//!
//! A generated sentence places two entity mentions among distractor words.
//! For a non-nil relation exactly one of that relation's trigger words sits
//! between the entities; nil sentences contain no trigger at all. Distractors
//! lean towards a per-sentence topic (the relation, or a random one for nil),
//! which gives masked-LM pretraining co-occurrence structure to learn. The gold
//! explanation for trigger `t` reads `{o1} <glue> {o2} <glue> <glue> t`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explanations::{ExpToken, Explanation, ExplanationSet};
use crate::vocab::{TokenId, Vocab, NUM_SPECIAL};

pub const NIL_LABEL: &str = "nil";
const NIL_ALIASES: [&str; 4] = ["nil", "no_relation", "NA", "none"];
const GLUE_WORDS: usize = 6;

/// Half-open token range `[start, end)`.
pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub span1: Span,
    pub span2: Span,
    pub label: usize,
}

impl Example {
    pub fn entity1(&self) -> &[TokenId] {
        &self.tokens[self.span1.0..self.span1.1]
    }

    pub fn entity2(&self) -> &[TokenId] {
        &self.tokens[self.span2.0..self.span2.1]
    }

    pub fn validate(&self, n_labels: usize) -> Result<()> {
        let n = self.tokens.len();
        for (s, e) in [self.span1, self.span2] {
            if s >= e || e > n {
                return Err(Error::Validation(format!("span [{s}, {e}) out of range for {n} tokens")));
            }
        }
        let (a, b) = (self.span1, self.span2);
        if a.0 < b.1 && b.0 < a.1 {
            return Err(Error::Validation(format!("entity spans {a:?} and {b:?} overlap")));
        }
        if self.label >= n_labels {
            return Err(Error::Validation(format!("label {} >= {n_labels}", self.label)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Parameters of the synthetic task. Relation 0 is nil.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    /// Relation count including nil.
    pub n_relations: usize,
    /// Total vocabulary size including special tokens.
    pub vocab_size: usize,
    pub triggers_per_relation: usize,
    pub entity_words: usize,
    /// Topic words per non-nil relation.
    #[serde(default = "default_topic_words")]
    pub topic_words: usize,
    /// Chance that a distractor slot takes a word of the sentence's topic.
    #[serde(default = "default_topic_rate")]
    pub topic_rate: f64,
    /// Inclusive sentence-length range.
    pub sentence_len: (usize, usize),
    /// Inclusive entity-mention length range.
    pub entity_len: (usize, usize),
    pub nil_fraction: f64,
    pub counts: SplitCounts,
    pub seed: u64,
}

fn default_topic_words() -> usize {
    6
}

fn default_topic_rate() -> f64 {
    0.5
}

impl Default for TaskSpec {
    /// 8 relations (7 + nil), 2000/500/500 examples, vocab 200, lengths 8–16.
    fn default() -> Self {
        TaskSpec {
            n_relations: 8,
            vocab_size: 200,
            triggers_per_relation: 2,
            entity_words: 40,
            topic_words: default_topic_words(),
            topic_rate: default_topic_rate(),
            sentence_len: (8, 16),
            entity_len: (1, 2),
            nil_fraction: 0.3,
            counts: SplitCounts { train: 2000, val: 500, test: 500 },
            seed: 17,
        }
    }
}

/// Word pools derived from a [`TaskSpec`].
#[derive(Clone, Debug)]
pub struct TaskVocab {
    pub vocab: Vocab,
    pub entities: Vec<TokenId>,
    /// `triggers[r]` for relation `r`; empty for nil.
    pub triggers: Vec<Vec<TokenId>>,
    /// `topics[r]` for relation `r`; empty for nil.
    pub topics: Vec<Vec<TokenId>>,
    pub distractors: Vec<TokenId>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations < 2 {
            return Err(Error::contract("a task needs nil plus at least one relation"));
        }
        let (lo, hi) = self.sentence_len;
        let (elo, ehi) = self.entity_len;
        if lo > hi || elo == 0 || elo > ehi || 2 * ehi + 2 > lo {
            return Err(Error::contract(format!(
                "sentence length {lo}..={hi} cannot hold two entities of length up to {ehi} and a trigger"
            )));
        }
        if !(0.0..1.0).contains(&self.nil_fraction) {
            return Err(Error::contract("nil_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.topic_rate) {
            return Err(Error::contract("topic_rate must lie in [0, 1]"));
        }
        if self.triggers_per_relation == 0 || self.entity_words == 0 {
            return Err(Error::contract("need at least one trigger per relation and one entity word"));
        }
        let regular = self.vocab_size.saturating_sub(NUM_SPECIAL);
        let reserved = self.entity_words + (self.n_relations - 1) * (self.triggers_per_relation + self.topic_words);
        if reserved + GLUE_WORDS + 1 > regular {
            return Err(Error::contract(format!(
                "entity, trigger and topic words ({reserved}) exhaust the {regular}-word vocabulary"
            )));
        }
        Ok(())
    }

    pub fn task_vocab(&self) -> Result<TaskVocab> {
        self.validate()?;
        let mut vocab = Vocab::new();
        let entities = (0..self.entity_words).map(|i| vocab.intern(&format!("ent{i}"))).collect();
        let mut triggers = vec![Vec::new()];
        for r in 1..self.n_relations {
            triggers.push((0..self.triggers_per_relation).map(|k| vocab.intern(&format!("rel{r}_{k}"))).collect());
        }
        let mut topics = vec![Vec::new()];
        for r in 1..self.n_relations {
            topics.push((0..self.topic_words).map(|k| vocab.intern(&format!("top{r}_{k}"))).collect());
        }
        let n_dist = self.vocab_size - vocab.len();
        let distractors = (0..n_dist).map(|i| vocab.intern(&format!("w{i}"))).collect();
        Ok(TaskVocab { vocab, entities, triggers, topics, distractors })
    }

    pub fn label_names(&self) -> Vec<String> {
        std::iter::once(NIL_LABEL.to_string()).chain((1..self.n_relations).map(|r| format!("rel{r}"))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Vocab,
    pub labels: Vec<String>,
    pub nil_label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    /// Words eligible as random replacements: the regular vocabulary.
    pub fn corruption_vocab(&self) -> Vec<TokenId> {
        self.vocab.regular_ids()
    }

    pub fn validate(&self) -> Result<()> {
        for ex in self.train.iter().chain(&self.val).chain(&self.test) {
            ex.validate(self.labels.len())?;
            if let Some(t) = ex.tokens.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(Error::Validation(format!("token id {t} outside the vocabulary")));
            }
        }
        Ok(())
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, pool: &[T]) -> T {
    pool[rng.random_range(0..pool.len())]
}

fn sample_label(spec: &TaskSpec, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < spec.nil_fraction {
        0
    } else {
        rng.random_range(1..spec.n_relations)
    }
}

fn sentence(spec: &TaskSpec, tv: &TaskVocab, label: usize, rng: &mut impl Rng) -> Example {
    let len = rng.random_range(spec.sentence_len.0..=spec.sentence_len.1);
    let e1_len = rng.random_range(spec.entity_len.0..=spec.entity_len.1);
    let e2_len = rng.random_range(spec.entity_len.0..=spec.entity_len.1);
    let free = len - e1_len - e2_len;
    // Gap between the mentions holds the trigger (if any) plus up to two distractors.
    let gap = rng.random_range(1..=free.min(3));
    let outside = free - gap;
    let prefix = rng.random_range(0..=outside);

    // Nil sentences still talk about some topic, so topic words alone never reveal the label.
    let topic = if label != 0 { label } else { rng.random_range(1..spec.n_relations) };
    let topic_pool = &tv.topics[topic];
    let mut tokens = Vec::with_capacity(len);
    let distract = |rng: &mut dyn rand::RngCore| {
        if !topic_pool.is_empty() && rng.random::<f64>() < spec.topic_rate {
            topic_pool[rng.random_range(0..topic_pool.len())]
        } else {
            tv.distractors[rng.random_range(0..tv.distractors.len())]
        }
    };
    for _ in 0..prefix {
        tokens.push(distract(rng));
    }
    let s1 = tokens.len();
    for _ in 0..e1_len {
        tokens.push(pick(rng, &tv.entities));
    }
    let span1 = (s1, tokens.len());
    let trigger_at = rng.random_range(0..gap);
    for k in 0..gap {
        if label != 0 && k == trigger_at {
            tokens.push(pick(rng, &tv.triggers[label]));
        } else {
            tokens.push(distract(rng));
        }
    }
    let s2 = tokens.len();
    for _ in 0..e2_len {
        tokens.push(pick(rng, &tv.entities));
    }
    let span2 = (s2, tokens.len());
    while tokens.len() < len {
        tokens.push(distract(rng));
    }
    Example { tokens, span1, span2, label }
}

/// Generates the dataset and its gold explanations. Deterministic in `spec.seed`.
pub fn generate_task(spec: &TaskSpec) -> Result<(Dataset, ExplanationSet)> {
    let tv = spec.task_vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let label = sample_label(spec, rng);
            let ex = sentence(spec, &tv, label, rng);
            if seen.insert(ex.clone()) {
                out.push(ex);
            }
        }
        out
    };
    let train = draw(spec.counts.train, &mut rng);
    let val = draw(spec.counts.val, &mut rng);
    let test = draw(spec.counts.test, &mut rng);

    let glue: Vec<TokenId> = tv.distractors[..GLUE_WORDS].to_vec();
    let mut explanations = Vec::new();
    for trig in tv.triggers.iter().flatten() {
        let (a, b, c) = (pick(&mut rng, &glue), pick(&mut rng, &glue), pick(&mut rng, &glue));
        explanations.push(Explanation::new(vec![
            ExpToken::O1,
            ExpToken::Word(a),
            ExpToken::O2,
            ExpToken::Word(b),
            ExpToken::Word(c),
            ExpToken::Word(*trig),
        ])?);
    }
    let ds = Dataset { train, val, test, vocab: tv.vocab, labels: spec.label_names(), nil_label: Some(0) };
    Ok((ds, ExplanationSet::new(explanations)))
}

/// Unlabeled sentences from the task distribution, e.g. for masked-LM pretraining.
pub fn generate_corpus(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    let tv = spec.task_vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let label = sample_label(spec, &mut rng);
            sentence(spec, &tv, label, &mut rng).tokens
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct JsonExample {
    tokens: Vec<String>,
    e1: [usize; 2],
    e2: [usize; 2],
    label: String,
}

const SPLIT_FILES: [(Split, &str); 3] = [(Split::Train, "train.jsonl"), (Split::Val, "val.jsonl"), (Split::Test, "test.jsonl")];

/// Writes `train/val/test.jsonl` plus `labels.txt` and `vocab.txt` into `dir`.
pub fn save_jsonl(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (split, name) in SPLIT_FILES {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
        for ex in ds.split(split) {
            let je = JsonExample {
                tokens: ex.tokens.iter().map(|&t| ds.vocab.word(t).to_string()).collect(),
                e1: [ex.span1.0, ex.span1.1],
                e2: [ex.span2.0, ex.span2.1],
                label: ds.labels[ex.label].clone(),
            };
            serde_json::to_writer(&mut f, &je)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    fs::write(dir.join("labels.txt"), ds.labels.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    fs::write(dir.join("vocab.txt"), ds.vocab.words().iter().map(|w| format!("{w}\n")).collect::<String>())?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

/// Loads a directory written by [`save_jsonl`] or supplied by the user.
///
/// `labels.txt` and `vocab.txt` are optional; without them labels are sorted
/// with any nil alias first and the vocabulary follows first appearance.
pub fn load_jsonl(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut raw: BTreeMap<&str, Vec<(usize, JsonExample)>> = BTreeMap::new();
    for (_, name) in SPLIT_FILES {
        let path = dir.join(name);
        let mut rows = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let je: JsonExample = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { path: path.clone(), line: i + 1, msg: e.to_string() })?;
                rows.push((i + 1, je));
            }
        }
        raw.insert(name, rows);
    }

    let labels: Vec<String> = if dir.join("labels.txt").exists() {
        read_lines(&dir.join("labels.txt"))?.into_iter().filter(|l| !l.is_empty()).collect()
    } else {
        let mut set: Vec<String> = raw.values().flatten().map(|(_, j)| j.label.clone()).collect();
        set.sort();
        set.dedup();
        if let Some(pos) = set.iter().position(|l| NIL_ALIASES.contains(&l.as_str())) {
            let nil = set.remove(pos);
            set.insert(0, nil);
        }
        set
    };
    let nil_label = labels.iter().position(|l| NIL_ALIASES.contains(&l.as_str()));

    let mut vocab = if dir.join("vocab.txt").exists() {
        Vocab::from_words(read_lines(&dir.join("vocab.txt"))?)
            .ok_or_else(|| Error::Validation("vocab.txt must begin with the special tokens".into()))?
    } else {
        Vocab::new()
    };

    let mut splits: Vec<Vec<Example>> = Vec::new();
    for (_, name) in SPLIT_FILES {
        let path = dir.join(name);
        let mut out = Vec::new();
        for (line, je) in raw.remove(name).unwrap_or_default() {
            let label = labels.iter().position(|l| *l == je.label).ok_or_else(|| Error::Parse {
                path: path.clone(),
                line,
                msg: format!("unknown label {:?}", je.label),
            })?;
            let ex = Example {
                tokens: je.tokens.iter().map(|w| vocab.intern(w)).collect(),
                span1: (je.e1[0], je.e1[1]),
                span2: (je.e2[0], je.e2[1]),
                label,
            };
            ex.validate(labels.len())
                .map_err(|e| Error::Validation(format!("{}:{line}: {e}", path.display())))?;
            out.push(ex);
        }
        splits.push(out);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset { train, val, test, vocab, labels, nil_label })
}

/// Label-stratified subsample of the training split; validation and test are untouched.
///
/// Each class keeps `round(fraction · count)` examples (halves up), in original order.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in ds.train.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (label, mut idx) in by_class {
        let k = ((fraction * idx.len() as f64) + 0.5).floor() as usize;
        if k == 0 {
            return Err(Error::Validation(format!(
                "fraction {fraction} leaves class {:?} empty",
                ds.labels.get(label).map(String::as_str).unwrap_or("?")
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(Dataset { train: keep.into_iter().map(|i| ds.train[i].clone()).collect(), ..ds.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> TaskSpec {
        TaskSpec { counts: SplitCounts { train: 300, val: 50, test: 50 }, ..TaskSpec::default() }
    }

    #[test]
    fn positives_contain_their_trigger_between_entities() {
        let spec = TaskSpec { n_relations: 2, triggers_per_relation: 1, ..tiny_spec() };
        let (ds, gold) = generate_task(&spec).unwrap();
        let trig = ds.vocab.id("rel1_0").unwrap();
        assert_eq!(gold.len(), 1);
        for ex in ds.train.iter().chain(&ds.val) {
            ex.validate(2).unwrap();
            let between = &ex.tokens[ex.span1.1..ex.span2.0];
            if ex.label == 1 {
                assert!(between.contains(&trig));
            } else {
                assert!(!ex.tokens.contains(&trig));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_disjoint() {
        let (a, ea) = generate_task(&tiny_spec()).unwrap();
        let (b, eb) = generate_task(&tiny_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ea, eb);
        let train: HashSet<_> = a.train.iter().collect();
        assert!(a.val.iter().chain(&a.test).all(|e| !train.contains(e)));
    }

    #[test]
    fn default_task_has_fourteen_gold_explanations() {
        let (ds, gold) = generate_task(&TaskSpec::default()).unwrap();
        assert_eq!(gold.len(), 14);
        assert_eq!(ds.vocab.len(), 200);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (2000, 500, 500));
        for e in gold.iter() {
            assert_eq!(e.word_count(), 4);
        }
    }

    #[test]
    fn exhausted_vocab_is_rejected() {
        let spec = TaskSpec { vocab_size: 60, ..TaskSpec::default() };
        assert!(matches!(generate_task(&spec), Err(Error::Contract(_))));
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let (ds, _) = generate_task(&tiny_spec()).unwrap();
        assert_eq!(subsample(&ds, 1.0, 4).unwrap(), ds);
    }

    #[test]
    fn subsample_is_stratified_and_deterministic() {
        let (ds, _) = generate_task(&tiny_spec()).unwrap();
        let a = subsample(&ds, 0.5, 4).unwrap();
        assert_eq!(a, subsample(&ds, 0.5, 4).unwrap());
        assert_eq!(a.val, ds.val);
        for label in 0..ds.n_labels() {
            let full = ds.train.iter().filter(|e| e.label == label).count();
            let half = a.train.iter().filter(|e| e.label == label).count();
            assert_eq!(half, ((full as f64 * 0.5) + 0.5).floor() as usize);
        }
    }

    #[test]
    fn subsample_rejects_emptied_class_and_bad_fraction() {
        let (ds, _) = generate_task(&tiny_spec()).unwrap();
        assert!(matches!(subsample(&ds, 0.001, 1), Err(Error::Validation(_))));
        assert!(matches!(subsample(&ds, 0.0, 1), Err(Error::Validation(_))));
    }
}
