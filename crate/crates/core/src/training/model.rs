use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::encoder::{pack_pair, pack_single, Encoder, EncoderConfig, OverrideTable, PackedInput, TOKEN_EMBEDDING};
use crate::error::{Error, Result};
use crate::explanations::{corrupt_set, substitute, substitute_tracked, CorruptedSet, CorruptionSpec, ExplanationSet};
use crate::numerics::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::perturbed_context::{init_pc, install_context, PCSpec, PerturbedContext, Variant};
use crate::vocab::TokenId;

/// Which features feed the classifier head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelKind {
    NoExp,
    ExpGold,
    ExpCorrupted(f64),
    ExpCorruptedTunable(f64),
    PC(Variant),
    Mixture,
    MultiPC(usize),
}

impl ModelKind {
    pub fn needs_explanations(self) -> bool {
        matches!(
            self,
            ModelKind::ExpGold | ModelKind::ExpCorrupted(_) | ModelKind::ExpCorruptedTunable(_) | ModelKind::Mixture
        )
    }

    pub fn uses_pc(self) -> bool {
        matches!(self, ModelKind::PC(_) | ModelKind::Mixture | ModelKind::MultiPC(_))
    }

    pub fn corruption(self) -> Option<f64> {
        match self {
            ModelKind::ExpCorrupted(p) | ModelKind::ExpCorruptedTunable(p) => Some(p),
            _ => None,
        }
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Random => "random",
        Variant::FixedRandom => "fixed-random",
        Variant::Conditional => "conditional",
        Variant::FactorizedRandom => "factorized-random",
        Variant::FactorizedConditional => "factorized-conditional",
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::NoExp => write!(f, "no-exp"),
            ModelKind::ExpGold => write!(f, "exp-gold"),
            ModelKind::ExpCorrupted(p) => write!(f, "exp-corrupted:{p}"),
            ModelKind::ExpCorruptedTunable(p) => write!(f, "exp-corrupted-tunable:{p}"),
            ModelKind::PC(v) => write!(f, "pc:{}", variant_name(*v)),
            ModelKind::Mixture => write!(f, "mixture"),
            ModelKind::MultiPC(n) => write!(f, "multi-pc:{n}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `exp-corrupted:0.5` or `pc:factorized-random`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown model kind {s:?}"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let fraction = |a: Option<&str>| -> Result<f64> {
            let p: f64 = a.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("corruption fraction {p} outside [0, 1]")));
            }
            Ok(p)
        };
        Ok(match (head, arg) {
            ("no-exp", None) => ModelKind::NoExp,
            ("exp-gold", None) => ModelKind::ExpGold,
            ("exp-corrupted", a) => ModelKind::ExpCorrupted(fraction(a)?),
            ("exp-corrupted-tunable", a) => ModelKind::ExpCorruptedTunable(fraction(a)?),
            ("pc", Some(v)) => ModelKind::PC(
                Variant::ALL.into_iter().find(|&x| variant_name(x) == v || x.short_name() == v).ok_or_else(bad)?,
            ),
            ("mixture", None) => ModelKind::Mixture,
            ("multi-pc", Some(n)) => ModelKind::MultiPC(n.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        })
    }
}

impl Serialize for ModelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FineTune,
    #[serde(rename = "frozen-lm")]
    FrozenLM,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::FineTune => "fine-tune",
            Regime::FrozenLM => "frozen-lm",
        })
    }
}

/// Encoder weights plus how many masked-LM steps produced them.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: Encoder,
    pub params: ParamStore,
    pub pretrain_steps: usize,
}

impl Backbone {
    pub fn fresh(config: EncoderConfig, rng: &mut impl Rng) -> Result<Backbone> {
        let mut params = ParamStore::new();
        let encoder = Encoder::init(config, &mut params, rng)?;
        Ok(Backbone { encoder, params, pretrain_steps: 0 })
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrain_steps > 0
    }

    /// Writes `encoder.json` (config and step count) and `checkpoint.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let meta = BackboneMeta { config: self.encoder.config.clone(), pretrain_steps: self.pretrain_steps };
        std::fs::write(dir.join("encoder.json"), serde_json::to_string_pretty(&meta)?)?;
        checkpoint::save(&self.params, dir.join("checkpoint.json"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Backbone> {
        let dir = dir.as_ref();
        let meta: BackboneMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("encoder.json"))?)?;
        let params = checkpoint::load(dir.join("checkpoint.json"))?;
        let encoder = Encoder::attach(meta.config, &params)?;
        Ok(Backbone { encoder, params, pretrain_steps: meta.pretrain_steps })
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    config: EncoderConfig,
    pretrain_steps: usize,
}

/// Optional inputs for [`build_model`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BuildInputs<'a> {
    /// The annotated explanation list for `Exp*` kinds and `Mixture`.
    pub explanations: Option<&'a ExplanationSet>,
    /// Context settings for `PC`, `Mixture` and `MultiPC`; the variant of a
    /// `PC(v)` kind wins over the one given here.
    pub pc: Option<PCSpec>,
    pub head_hidden: usize,
}

pub const HEAD_PREFIX: &str = "head/";
pub const CORRUPT_PREFIX: &str = "corrupt/tok/";
const NORM_SHIFT: &str = "norm/shift";
const NORM_SCALE: &str = "norm/scale";
/// Sequences per encoder call. Bounding the call keeps its activations
/// cache-sized, so cost stays linear in the number of sequences.
pub const ENCODE_CHUNK: usize = 64;

/// An encoder, optional explanation or context machinery, and an MLP head.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub encoder: Encoder,
    pub store: ParamStore,
    /// Explanations actually paired with each sentence (gold or corrupted).
    pub explanations: Option<ExplanationSet>,
    pub corruption: Option<CorruptedSet>,
    pub pcs: Vec<PerturbedContext>,
    pub n_labels: usize,
    pub head_hidden: usize,
    pub encoder_pretrained: bool,
    fixed: BTreeSet<String>,
    corrupt_tokens: Vec<TokenId>,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Assembles a model of `kind` on a copy of the backbone's encoder weights.
///
/// The same `rng` state gives the same head initialization for every kind, so
/// `ExpCorrupted(0)` and `ExpGold` start bitwise identical.
pub fn build_model(
    kind: ModelKind,
    backbone: &Backbone,
    dataset: &Dataset,
    inputs: BuildInputs<'_>,
    rng: &mut impl Rng,
) -> Result<Model> {
    let encoder = backbone.encoder.clone();
    let d = encoder.d();
    let corruption_seed: u64 = rng.random();
    let mut store = backbone.params.subset("enc/");
    for p in store.iter_mut() {
        p.trainable = true;
    }
    if inputs.head_hidden == 0 {
        return Err(Error::Config("head hidden size must be positive".into()));
    }
    if dataset.n_labels() < 2 {
        return Err(Error::Config("a classifier needs at least two labels".into()));
    }

    let gold = if kind.needs_explanations() {
        let set = inputs
            .explanations
            .ok_or_else(|| Error::Config(format!("model kind {kind} needs an explanation list")))?;
        if set.is_empty() {
            return Err(Error::Config(format!("model kind {kind} needs a nonempty explanation list")));
        }
        Some(set.clone())
    } else {
        None
    };

    let mut corruption = None;
    let mut corrupt_tokens = Vec::new();
    let explanations = match kind.corruption() {
        Some(p) => {
            let c = corrupt_set(gold.as_ref().expect("checked"), &CorruptionSpec::new(p, corruption_seed)?, &dataset.corruption_vocab())?;
            if matches!(kind, ModelKind::ExpCorruptedTunable(_)) {
                corrupt_tokens = c.replacement_tokens();
                let table = store.tensor(TOKEN_EMBEDDING)?.clone();
                for &t in &corrupt_tokens {
                    store.insert(format!("{CORRUPT_PREFIX}{t}"), Tensor::matrix(1, d, table.row(t).to_vec())?, true)?;
                }
            }
            let set = c.set.clone();
            corruption = Some(c);
            Some(set)
        }
        None => gold,
    };

    let mut pcs = Vec::new();
    if kind.uses_pc() {
        let mut spec = inputs.pc.unwrap_or_else(|| PCSpec::new(Variant::Random, d));
        match kind {
            ModelKind::PC(v) => {
                spec.variant = v;
                spec.n_contexts = 1;
            }
            ModelKind::Mixture => spec.n_contexts = 1,
            ModelKind::MultiPC(n) => spec.n_contexts = n,
            _ => unreachable!(),
        }
        spec.validate(d)?;
        let table = store.tensor(TOKEN_EMBEDDING)?.clone();
        for c in 0..spec.n_contexts {
            pcs.push(init_pc(PCSpec { n_contexts: 1, ..spec }, c, &table, &mut store, rng)?);
        }
    }
    let fixed: BTreeSet<String> = store.iter().filter(|p| !p.trainable).map(|p| p.id.clone()).collect();

    let mut model = Model {
        kind,
        encoder,
        store,
        explanations,
        corruption,
        pcs,
        n_labels: dataset.n_labels(),
        head_hidden: inputs.head_hidden,
        encoder_pretrained: backbone.is_pretrained(),
        fixed,
        corrupt_tokens,
    };
    let (f, h, l) = (model.feature_dim(), model.head_hidden, model.n_labels);
    model.store.insert(NORM_SHIFT, Tensor::zeros(&[f]), false)?;
    model.store.insert(NORM_SCALE, Tensor::vector(vec![1.0; f]), false)?;
    model.fixed.extend([NORM_SHIFT.to_string(), NORM_SCALE.to_string()]);
    model.store.insert("head/w1", gaussian(&[f, h], 1.0 / (f as f64).sqrt(), rng), true)?;
    model.store.insert("head/b1", Tensor::zeros(&[h]), true)?;
    model.store.insert("head/w2", gaussian(&[h, l], 1.0 / (h as f64).sqrt(), rng), true)?;
    model.store.insert("head/b2", Tensor::zeros(&[l]), true)?;
    Ok(model)
}

impl Model {
    /// Encoded sequences per example.
    pub fn sequences_per_example(&self) -> usize {
        let n = self.explanations.as_ref().map_or(0, ExplanationSet::len);
        match self.kind {
            ModelKind::NoExp | ModelKind::PC(_) => 1,
            ModelKind::ExpGold | ModelKind::ExpCorrupted(_) | ModelKind::ExpCorruptedTunable(_) => n,
            ModelKind::Mixture => n + 1,
            ModelKind::MultiPC(k) => k,
        }
    }

    /// Width of the classifier input.
    pub fn feature_dim(&self) -> usize {
        self.sequences_per_example() * self.encoder.d()
    }

    pub fn head_ids(&self) -> Vec<String> {
        self.ids_with_prefix(HEAD_PREFIX)
    }

    fn ids_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.store.ids().filter(|id| id.starts_with(prefix)).map(str::to_string).collect()
    }

    /// Parameter ids updated by training under `regime`.
    ///
    /// Fine-tuning trains everything except fixed-random contexts. The frozen
    /// regime trains the head, the non-fixed context parameters, and the
    /// embeddings of corrupted replacement words for the tunable kind.
    pub fn trainable_set(&self, regime: Regime) -> BTreeSet<String> {
        let all = self.store.ids().filter(|id| !self.fixed.contains(*id)).map(str::to_string);
        match regime {
            Regime::FineTune => all.collect(),
            Regime::FrozenLM => all
                .filter(|id| {
                    id.starts_with(HEAD_PREFIX) || id.starts_with("pc/") || id.starts_with(CORRUPT_PREFIX)
                })
                .collect(),
        }
    }

    pub fn apply_regime(&mut self, regime: Regime) -> Result<()> {
        if regime == Regime::FrozenLM && !self.encoder_pretrained {
            return Err(Error::Config("the frozen regime needs a pretrained encoder".into()));
        }
        let set = self.trainable_set(regime);
        self.store.restrict_trainable(set.iter().map(String::as_str))
    }

    /// True when nothing upstream of the head is trainable, so features are constants.
    pub fn features_frozen(&self) -> bool {
        self.store.iter().all(|p| !p.trainable || p.id.starts_with(HEAD_PREFIX))
    }

    fn explanation_inputs(&self, xs: &[&Example], table: &mut OverrideTable, g: &mut Graph<'_>) -> Result<Vec<Vec<PackedInput>>> {
        let set = self.explanations.as_ref().expect("explanations present");
        let max_len = self.encoder.config.max_len;
        if !matches!(self.kind, ModelKind::ExpCorruptedTunable(_)) || self.corrupt_tokens.is_empty() {
            return xs
                .iter()
                .enumerate()
                .map(|(b, x)| {
                    set.iter()
                        .map(|e| pack_pair(&x.tokens, &substitute(e, x.entity1(), x.entity2()), max_len))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|err| err.for_example(b))
                })
                .collect();
        }
        let corruption = self.corruption.as_ref().expect("tunable kind keeps its corruption");
        let rows: Vec<Var> = self
            .corrupt_tokens
            .iter()
            .map(|t| g.param(&format!("{CORRUPT_PREFIX}{t}")))
            .collect::<Result<_>>()?;
        let src = g.concat_rows(&rows)?;
        let base = table.push(g, src);
        let row_of = |t: TokenId| base + self.corrupt_tokens.binary_search(&t).expect("replacement token registered");
        xs.iter()
            .enumerate()
            .map(|(b, x)| {
                set.iter()
                    .zip(&corruption.replaced)
                    .map(|(e, replaced)| {
                        let tracked = substitute_tracked(e, x.entity1(), x.entity2());
                        let ctx: Vec<TokenId> = tracked.iter().map(|&(t, _)| t).collect();
                        let mut inp = pack_pair(&x.tokens, &ctx, max_len).map_err(|err| err.for_example(b))?;
                        let start = inp.ctx_start.expect("pair");
                        for (j, &(t, orig)) in tracked.iter().enumerate() {
                            if orig.is_some_and(|o| replaced.binary_search(&o).is_ok()) {
                                inp.overrides.push((start + j, row_of(t)));
                            }
                        }
                        Ok(inp)
                    })
                    .collect()
            })
            .collect()
    }

    /// Classifier input for a batch: a `B x feature_dim` node.
    pub fn features(&self, g: &mut Graph<'_>, xs: &[&Example]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("features of an empty batch"));
        }
        let max_len = self.encoder.config.max_len;
        let mut table = OverrideTable::new();
        let mut x_pool = None;
        let per_example: Vec<Vec<PackedInput>> = match self.kind {
            ModelKind::NoExp => xs
                .iter()
                .enumerate()
                .map(|(b, x)| pack_single(&x.tokens, max_len).map(|p| vec![p]).map_err(|e| e.for_example(b)))
                .collect::<Result<_>>()?,
            ModelKind::ExpGold | ModelKind::ExpCorrupted(_) | ModelKind::ExpCorruptedTunable(_) => {
                self.explanation_inputs(xs, &mut table, g)?
            }
            ModelKind::PC(_) | ModelKind::MultiPC(_) => {
                let mut per: Vec<Vec<PackedInput>> = vec![Vec::new(); xs.len()];
                for pc in &self.pcs {
                    for (b, inp) in install_context(g, &self.encoder, xs, pc, &mut x_pool, &mut table)?.into_iter().enumerate() {
                        per[b].push(inp);
                    }
                }
                per
            }
            ModelKind::Mixture => {
                let mut per = self.explanation_inputs(xs, &mut table, g)?;
                let pc_inputs = install_context(g, &self.encoder, xs, &self.pcs[0], &mut x_pool, &mut table)?;
                for (b, inp) in pc_inputs.into_iter().enumerate() {
                    per[b].push(inp);
                }
                per
            }
        };
        let k = self.sequences_per_example();
        let inputs: Vec<PackedInput> = per_example.into_iter().flatten().collect();
        debug_assert_eq!(inputs.len(), k * xs.len());
        let t = table.build(g)?;
        let pooled = inputs.chunks(ENCODE_CHUNK).map(|c| Ok(self.encoder.encode(g, c, t)?.pooled)).collect::<Result<Vec<_>>>()?;
        let pooled = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled)? };
        g.reshape(pooled, &[xs.len(), k * self.encoder.d()])
    }

    /// Sets the fixed per-feature standardization in front of the head to the
    /// column mean and standard deviation of `features`.
    pub fn standardize_features(&mut self, features: &Tensor) -> Result<()> {
        let (r, c) = (features.rows(), features.cols());
        if r == 0 || c != self.feature_dim() {
            return Err(Error::contract(format!("standardizing {r}x{c} features for width {}", self.feature_dim())));
        }
        let mut mean = vec![0.0; c];
        for row in features.data().chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / r as f64);
        }
        let mut var = vec![0.0; c];
        for row in features.data().chunks_exact(c) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m) / r as f64);
        }
        let shift = Tensor::vector(mean.iter().map(|m| -m).collect());
        let scale = Tensor::vector(var.iter().map(|v| 1.0 / (v + 1e-12).sqrt()).collect());
        self.store.get_mut(NORM_SHIFT).expect("built with a head").tensor = shift;
        self.store.get_mut(NORM_SCALE).expect("built with a head").tensor = scale;
        Ok(())
    }

    /// `B x n_labels` logits from classifier inputs.
    pub fn head(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let shift = g.param(NORM_SHIFT)?;
        let scale = g.param(NORM_SCALE)?;
        let features = g.add_row(features, shift)?;
        let features = g.mul_row(features, scale)?;
        let w1 = g.param("head/w1")?;
        let b1 = g.param("head/b1")?;
        let w2 = g.param("head/w2")?;
        let b2 = g.param("head/b2")?;
        let h = g.matmul(features, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    pub fn logits(&self, g: &mut Graph<'_>, xs: &[&Example]) -> Result<Var> {
        let f = self.features(g, xs)?;
        self.head(g, f)
    }

    /// Classifier inputs computed without a tape, as plain rows.
    pub fn feature_rows(&self, xs: &[Example], batch_size: usize) -> Result<Tensor> {
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(xs.len() * dim);
        for chunk in xs.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut g = Graph::new(&self.store);
            let f = self.features(&mut g, &refs)?;
            data.extend_from_slice(g.value(f).data());
        }
        Tensor::matrix(xs.len(), dim, data)
    }

    /// Ids of the replacement words that own a tunable embedding.
    pub fn corrupt_tokens(&self) -> &[TokenId] {
        &self.corrupt_tokens
    }
}
