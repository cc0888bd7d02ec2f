use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{pack_single, PackedInput};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph};
use crate::training::metrics::argmax_rows;
use crate::training::model::Backbone;
use crate::vocab::{TokenId, MASK, NUM_SPECIAL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 2, batch_size: 32, lr: 1e-3, mask_prob: 0.15, seed: 0 }
    }
}

/// Sentences packed for the masked-LM objective.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub inputs: Vec<PackedInput>,
    /// `(sequence, position)` of every selected token.
    pub selected: Vec<(usize, usize)>,
    pub targets: Vec<TokenId>,
}

/// Selects each word with probability `prob` (at least one per sentence) and
/// rewrites the selection 80/10/10 as `[MASK]` / random word / unchanged.
pub fn mask_batch(sentences: &[&[TokenId]], vocab_size: usize, prob: f64, max_len: usize, rng: &mut impl Rng) -> Result<MaskedBatch> {
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::contract("masked-LM needs regular vocabulary words"));
    }
    let mut out = MaskedBatch { inputs: Vec::new(), selected: Vec::new(), targets: Vec::new() };
    for (b, s) in sentences.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::contract("masked-LM sentence is empty"));
        }
        let mut inp = pack_single(s, max_len).map_err(|e| e.for_example(b))?;
        let mut picks: Vec<usize> = (0..s.len()).filter(|_| rng.random::<f64>() < prob).collect();
        if picks.is_empty() {
            picks.push(rng.random_range(0..s.len()));
        }
        for i in picks {
            let pos = i + 1;
            let r: f64 = rng.random();
            if r < 0.8 {
                inp.token_ids[pos] = MASK;
            } else if r < 0.9 {
                inp.token_ids[pos] = rng.random_range(NUM_SPECIAL..vocab_size);
            }
            out.selected.push((b, pos));
            out.targets.push(s[i]);
        }
        out.inputs.push(inp);
    }
    Ok(out)
}

fn batch_loss(bb: &Backbone, g: &mut Graph<'_>, batch: &MaskedBatch) -> Result<(crate::numerics::Var, crate::numerics::Var)> {
    let out = bb.encoder.encode(g, &batch.inputs, None)?;
    let rows: Vec<usize> = batch.selected.iter().map(|&(b, p)| out.offsets[b] + p).collect();
    let h = g.gather_rows(out.hidden, &rows)?;
    let logits = bb.encoder.mlm_logits(g, h)?;
    let loss = g.cross_entropy(logits, &batch.targets)?;
    Ok((loss, logits))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
}

/// Masked-LM training of the encoder and MLM head on `corpus`.
pub fn mlm_pretrain(bb: &mut Backbone, corpus: &[Vec<TokenId>], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(Error::Config(format!("invalid pretraining config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let (vocab, max_len) = (bb.encoder.config.vocab_size, bb.encoder.config.max_len);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let sents: Vec<&[TokenId]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            let batch = mask_batch(&sents, vocab, cfg.mask_prob, max_len, &mut rng)?;
            let grads = {
                let mut g = Graph::new(&bb.params);
                let (loss, _) = batch_loss(bb, &mut g, &batch)?;
                report.losses.push(g.value(loss).item().expect("scalar"));
                g.backward(loss)?
            };
            adam_step(&mut bb.params, &grads, &mut state, &adam)?;
            report.steps += 1;
        }
    }
    bb.pretrain_steps += report.steps;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmEval {
    pub loss: f64,
    /// Fraction of selected tokens whose top-1 prediction is the original word.
    pub top1: f64,
}

/// Held-out masked-LM loss and recovery with masking fixed by `seed`.
pub fn mlm_evaluate(bb: &Backbone, corpus: &[Vec<TokenId>], batch_size: usize, seed: u64) -> Result<MlmEval> {
    if corpus.is_empty() {
        return Err(Error::Validation("empty evaluation corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, max_len) = (bb.encoder.config.vocab_size, bb.encoder.config.max_len);
    let (mut loss_sum, mut hits, mut total) = (0.0, 0usize, 0usize);
    for chunk in corpus.chunks(batch_size.max(1)) {
        let sents: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = mask_batch(&sents, vocab, 0.15, max_len, &mut rng)?;
        let mut g = Graph::new(&bb.params);
        let (loss, logits) = batch_loss(bb, &mut g, &batch)?;
        let n = batch.targets.len();
        loss_sum += g.value(loss).item().expect("scalar") * n as f64;
        let pred = argmax_rows(g.value(logits).data(), vocab);
        hits += pred.iter().zip(&batch.targets).filter(|(p, t)| p == t).count();
        total += n;
    }
    Ok(MlmEval { loss: loss_sum / total as f64, top1: hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::vocab::{CLS, SEP};

    #[test]
    fn masking_keeps_layout_and_records_originals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<TokenId> = (10..22).collect();
        let batch = mask_batch(&[&s, &s[..3]], 40, 0.15, 32, &mut rng).unwrap();
        assert_eq!(batch.inputs.len(), 2);
        for &(b, p) in &batch.selected {
            assert!(p >= 1 && p < batch.inputs[b].len() - 1);
        }
        assert!(batch.selected.iter().any(|&(b, _)| b == 1));
        assert_eq!(batch.inputs[0].token_ids[0], CLS);
        assert_eq!(*batch.inputs[0].token_ids.last().unwrap(), SEP);
        for (&(b, p), &t) in batch.selected.iter().zip(&batch.targets) {
            let src = if b == 0 { &s[..] } else { &s[..3] };
            assert_eq!(src[p - 1], t);
        }
    }

    #[test]
    fn masking_proportions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<TokenId> = (10..30).collect();
        let sents: Vec<&[TokenId]> = (0..2000).map(|_| s.as_slice()).collect();
        let batch = mask_batch(&sents, 50, 0.15, 32, &mut rng).unwrap();
        let n = batch.targets.len() as f64;
        assert!((n / 40_000.0 - 0.15).abs() < 0.01);
        let masked = batch.selected.iter().filter(|&&(b, p)| batch.inputs[b].token_ids[p] == MASK).count() as f64;
        assert!((masked / n - 0.8).abs() < 0.02);
    }

    #[test]
    fn zero_epochs_leave_weights_alone() {
        let cfg = EncoderConfig { d: 8, n_heads: 2, d_ff: 16, n_layers: 1, ..EncoderConfig::desk(30) };
        let mut bb = Backbone::fresh(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = bb.params.digest("");
        let corpus = vec![vec![7, 8, 9]];
        let r = mlm_pretrain(&mut bb, &corpus, &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(bb.params.digest(""), before);
        assert!(!bb.is_pretrained());
    }
}
