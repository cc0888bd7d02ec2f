use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::training::metrics::{argmax_rows, score, Metrics};
use crate::training::model::{Model, Regime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    pub head_hidden: usize,
    /// Batch size for evaluation and feature caching.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_eval_batch() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            regime: Regime::FineTune,
            head_hidden: 64,
            eval_batch: default_eval_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.head_hidden == 0 || self.eval_batch == 0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub val: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Loss of the first minibatch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    /// Features were computed once because nothing before the head trains.
    pub cached_features: bool,
}

impl History {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Where the classifier input comes from during one training run.
enum Inputs<'a> {
    Live(&'a [Example]),
    Cached(Tensor),
}

impl Inputs<'_> {
    fn len(&self) -> usize {
        match self {
            Inputs::Live(xs) => xs.len(),
            Inputs::Cached(t) => t.rows(),
        }
    }
}

fn batch_logits(
    model: &Model,
    g: &mut Graph<'_>,
    inputs: &Inputs<'_>,
    idx: &[usize],
) -> Result<crate::numerics::Var> {
    match inputs {
        Inputs::Live(xs) => {
            let refs: Vec<&Example> = idx.iter().map(|&i| &xs[i]).collect();
            model.logits(g, &refs)
        }
        Inputs::Cached(t) => {
            let cols = t.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            let f = g.constant(Tensor::matrix(idx.len(), cols, data)?);
            model.head(g, f)
        }
    }
}

fn predict_inputs(model: &Model, inputs: &Inputs<'_>, batch: usize) -> Result<Vec<usize>> {
    let n = inputs.len();
    let mut pred = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(batch.max(1)) {
        let mut g = Graph::new(&model.store);
        let l = batch_logits(model, &mut g, inputs, idx)?;
        pred.extend(argmax_rows(g.value(l).data(), model.n_labels));
    }
    Ok(pred)
}

/// Argmax labels for `xs`.
pub fn predict(model: &Model, xs: &[Example], batch: usize) -> Result<Vec<usize>> {
    predict_inputs(model, &Inputs::Live(xs), batch)
}

pub fn evaluate(model: &Model, xs: &[Example], nil: Option<usize>, batch: usize) -> Result<Metrics> {
    if xs.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let gold: Vec<usize> = xs.iter().map(|x| x.label).collect();
    score(&gold, &predict(model, xs, batch)?, nil)
}

/// Minibatch Adam on cross-entropy. Applies the regime's freezing policy first;
/// the batch order depends only on `cfg.seed`.
///
/// In the frozen regime the head input is standardized with the column
/// statistics of the initial training features. Frozen encoder outputs share a
/// large common component, and without this the head barely moves in a few
/// epochs.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Validation("training needs nonempty train and val splits".into()));
    }
    model.apply_regime(cfg.regime)?;
    let cached = model.features_frozen();
    let train_features = if cached || cfg.regime == Regime::FrozenLM {
        Some(model.feature_rows(&ds.train, cfg.eval_batch)?)
    } else {
        None
    };
    if cfg.regime == Regime::FrozenLM {
        model.standardize_features(train_features.as_ref().expect("computed"))?;
    }
    let (train_in, val_in) = if cached {
        (
            Inputs::Cached(train_features.expect("computed")),
            Inputs::Cached(model.feature_rows(&ds.val, cfg.eval_batch)?),
        )
    } else {
        (Inputs::Live(&ds.train), Inputs::Live(&ds.val))
    };
    let labels: Vec<usize> = ds.train.iter().map(|x| x.label).collect();
    let val_gold: Vec<usize> = ds.val.iter().map(|x| x.label).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut history = History { cached_features: cached, ..Default::default() };
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::new(&model.store);
                let logits = batch_logits(model, &mut g, &train_in, idx)?;
                let loss = g.cross_entropy(logits, &targets)?;
                let value = g.value(loss).item().expect("scalar");
                if !value.is_finite() {
                    return Err(Error::Numerical {
                        node: Some(loss.index()),
                        msg: format!("loss {value} at epoch {epoch} step {step}"),
                    });
                }
                (value, g.backward(loss)?)
            };
            if history.step_losses.is_empty() {
                history.initial_loss = loss;
            }
            history.step_losses.push(loss);
            sum += loss;
            batches += 1;
            adam_step(&mut model.store, &grads, &mut state, &adam)?;
        }
        let pred = predict_inputs(model, &val_in, cfg.eval_batch)?;
        let val = score(&val_gold, &pred, ds.nil_label)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            val,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}
