//! Micro BERT-style encoder over `[CLS] s [SEP] context [SEP]` pairs.
//!
//! Post-layer-norm transformer blocks, learned token/segment/position
//! embeddings and a tanh pooler on the `[CLS]` state. Any position of the
//! context segment may take its token embedding from an external graph node
//! (an *override*), which is how perturbed-context slots and tunable corrupted
//! tokens enter the encoder while staying differentiable.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::vocab::{TokenId, CLS, SEP};

pub const TOKEN_EMBEDDING: &str = "enc/tok_emb";
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default = "two")]
    pub n_segments: usize,
    /// Reuse the token-embedding table as the MLM output projection.
    #[serde(default)]
    pub tie_mlm_weights: bool,
}

fn two() -> usize {
    2
}

impl EncoderConfig {
    /// Desk-scale defaults: d=64, two layers of four heads, d_ff=128, max_len=64.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            n_segments: 2,
            tie_mlm_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!("d={} must be a positive multiple of n_heads={}", self.d, self.n_heads)));
        }
        if self.vocab_size <= SEP || self.max_len < 4 || self.d_ff == 0 || self.n_segments != 2 {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// One encoder input sequence.
///
/// Layout is `[CLS] s [SEP]` optionally followed by `context [SEP]`; segment 0
/// covers the first part and segment 1 the context. Each override
/// `(position, row)` replaces the token embedding at `position` with row `row`
/// of the override table passed to [`Encoder::encode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<usize>,
    pub ctx_start: Option<usize>,
    pub overrides: Vec<(usize, usize)>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Positions of the context tokens, excluding the trailing `[SEP]`.
    pub fn ctx_span(&self) -> Option<std::ops::Range<usize>> {
        self.ctx_start.map(|s| s..self.len() - 1)
    }
}

/// Packs `[CLS] s [SEP] ctx [SEP]`.
pub fn pack_pair(s: &[TokenId], ctx: &[TokenId], max_len: usize) -> Result<PackedInput> {
    if ctx.is_empty() {
        return Err(Error::contract("pack_pair with an empty context"));
    }
    let len = s.len() + ctx.len() + 3;
    if len > max_len {
        return Err(Error::Length { len, max: max_len, example: None });
    }
    let mut token_ids = Vec::with_capacity(len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(s);
    token_ids.push(SEP);
    let ctx_start = token_ids.len();
    token_ids.extend_from_slice(ctx);
    token_ids.push(SEP);
    let mut segment_ids = vec![0; ctx_start];
    segment_ids.resize(len, 1);
    Ok(PackedInput { token_ids, segment_ids, ctx_start: Some(ctx_start), overrides: Vec::new() })
}

/// Packs `[CLS] s [SEP]` with no context segment.
pub fn pack_single(s: &[TokenId], max_len: usize) -> Result<PackedInput> {
    let len = s.len() + 2;
    if len > max_len {
        return Err(Error::Length { len, max: max_len, example: None });
    }
    let mut token_ids = Vec::with_capacity(len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(s);
    token_ids.push(SEP);
    Ok(PackedInput { token_ids, segment_ids: vec![0; len], ctx_start: None, overrides: Vec::new() })
}

/// Graph nodes produced by one batched encode.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// All sequences stacked row-wise, `Σ len x d`.
    pub hidden: Var,
    /// One tanh-pooled `[CLS]` row per sequence, `B x d`.
    pub pooled: Var,
    /// Row offset of each sequence inside `hidden`.
    pub offsets: Vec<usize>,
}

/// Collects override sources and hands out their row offsets.
#[derive(Default)]
pub struct OverrideTable {
    parts: Vec<Var>,
    rows: usize,
}

impl OverrideTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends all rows of `source`, returning the row index of its first row.
    pub fn push(&mut self, g: &Graph<'_>, source: Var) -> usize {
        let off = self.rows;
        self.rows += g.value(source).rows();
        self.parts.push(source);
        off
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn build(&self, g: &mut Graph<'_>) -> Result<Option<Var>> {
        match self.parts.len() {
            0 => Ok(None),
            1 => Ok(Some(self.parts[0])),
            _ => g.concat_rows(&self.parts).map(Some),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

fn filled(shape: &[usize], v: f64) -> Tensor {
    Tensor::new(shape.to_vec(), vec![v; shape.iter().product()]).expect("sized")
}

impl Encoder {
    /// Inserts freshly initialized encoder and MLM-head parameters into `store`.
    pub fn init(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Encoder> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d, config.d_ff);
        let mut put = |id: String, t: Tensor| store.insert(id, t, true).map(|_| ());
        put(TOKEN_EMBEDDING.into(), normal_tensor(&[v, d], INIT_STD, rng))?;
        put("enc/seg_emb".into(), normal_tensor(&[config.n_segments, d], INIT_STD, rng))?;
        put("enc/pos_emb".into(), normal_tensor(&[config.max_len, d], INIT_STD, rng))?;
        put("enc/emb_ln/g".into(), filled(&[d], 1.0))?;
        put("enc/emb_ln/b".into(), filled(&[d], 0.0))?;
        for l in 0..config.n_layers {
            let p = format!("enc/layer{l}");
            put(format!("{p}/qkv/w"), normal_tensor(&[d, 3 * d], INIT_STD, rng))?;
            put(format!("{p}/qkv/b"), filled(&[3 * d], 0.0))?;
            put(format!("{p}/attn_out/w"), normal_tensor(&[d, d], INIT_STD, rng))?;
            put(format!("{p}/attn_out/b"), filled(&[d], 0.0))?;
            put(format!("{p}/ln1/g"), filled(&[d], 1.0))?;
            put(format!("{p}/ln1/b"), filled(&[d], 0.0))?;
            put(format!("{p}/ff1/w"), normal_tensor(&[d, f], INIT_STD, rng))?;
            put(format!("{p}/ff1/b"), filled(&[f], 0.0))?;
            put(format!("{p}/ff2/w"), normal_tensor(&[f, d], INIT_STD, rng))?;
            put(format!("{p}/ff2/b"), filled(&[d], 0.0))?;
            put(format!("{p}/ln2/g"), filled(&[d], 1.0))?;
            put(format!("{p}/ln2/b"), filled(&[d], 0.0))?;
        }
        put("enc/pool/w".into(), normal_tensor(&[d, d], INIT_STD, rng))?;
        put("enc/pool/b".into(), filled(&[d], 0.0))?;
        put("mlm/transform/w".into(), normal_tensor(&[d, d], INIT_STD, rng))?;
        put("mlm/transform/b".into(), filled(&[d], 0.0))?;
        put("mlm/ln/g".into(), filled(&[d], 1.0))?;
        put("mlm/ln/b".into(), filled(&[d], 0.0))?;
        if !config.tie_mlm_weights {
            put("mlm/out/w".into(), normal_tensor(&[d, v], INIT_STD, rng))?;
        }
        put("mlm/out/b".into(), filled(&[v], 0.0))?;
        Ok(Encoder { config })
    }

    /// Wraps parameters already present in `store` (e.g. loaded from a checkpoint).
    pub fn attach(config: EncoderConfig, store: &ParamStore) -> Result<Encoder> {
        config.validate()?;
        let emb = store.tensor(TOKEN_EMBEDDING)?;
        if emb.shape() != [config.vocab_size, config.d] {
            return Err(Error::Config(format!(
                "token embedding shape {:?} does not match config ({}, {})",
                emb.shape(),
                config.vocab_size,
                config.d
            )));
        }
        for l in 0..config.n_layers {
            store.tensor(&format!("enc/layer{l}/qkv/w"))?;
        }
        Ok(Encoder { config })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}/w"))?;
        let b = g.param(&format!("{prefix}/b"))?;
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
        let gain = g.param(&format!("{prefix}/g"))?;
        let bias = g.param(&format!("{prefix}/b"))?;
        g.layer_norm(x, gain, bias)
    }

    /// Encodes a batch of packed sequences.
    ///
    /// Override rows index into `override_table`; at those positions the
    /// token-embedding term is replaced by the table row, while segment and
    /// position embeddings are still added.
    pub fn encode(&self, g: &mut Graph<'_>, inputs: &[PackedInput], override_table: Option<Var>) -> Result<EncoderOutput> {
        if inputs.is_empty() {
            return Err(Error::contract("encode of an empty batch"));
        }
        let cfg = &self.config;
        let table_rows = override_table.map(|t| g.value(t).rows()).unwrap_or(0);
        let total: usize = inputs.iter().map(PackedInput::len).sum();
        let mut ids = Vec::with_capacity(total);
        let mut segs = Vec::with_capacity(total);
        let mut pos = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut segments = Vec::with_capacity(inputs.len());
        for (b, inp) in inputs.iter().enumerate() {
            let n = inp.len();
            if n == 0 || n > cfg.max_len {
                return Err(Error::Length { len: n, max: cfg.max_len, example: Some(b.to_string()) });
            }
            if inp.segment_ids.len() != n {
                return Err(Error::contract("token and segment id lengths differ"));
            }
            let off = ids.len();
            offsets.push(off);
            segments.push((off, n));
            for (&t, &s) in inp.token_ids.iter().zip(&inp.segment_ids) {
                if t >= cfg.vocab_size {
                    return Err(Error::contract(format!("token id {t} >= vocab_size {}", cfg.vocab_size)));
                }
                if s >= cfg.n_segments {
                    return Err(Error::contract(format!("segment id {s} out of range")));
                }
                ids.push(t);
                segs.push(s);
            }
            pos.extend(0..n);
            let span = inp.ctx_span();
            for &(p, row) in &inp.overrides {
                if !span.as_ref().is_some_and(|r| r.contains(&p)) {
                    return Err(Error::contract(format!("override position {p} outside the context span")));
                }
                if row >= table_rows {
                    return Err(Error::contract(format!("override row {row} but table has {table_rows} rows")));
                }
                ids[off + p] = cfg.vocab_size + row;
            }
        }

        let tok_emb = g.param(TOKEN_EMBEDDING)?;
        let tok_src = match override_table {
            Some(t) => g.concat_rows(&[tok_emb, t])?,
            None => tok_emb,
        };
        let tok = g.gather_rows(tok_src, &ids)?;
        let seg_emb = g.param("enc/seg_emb")?;
        let seg = g.gather_rows(seg_emb, &segs)?;
        let pos_emb = g.param("enc/pos_emb")?;
        let posv = g.gather_rows(pos_emb, &pos)?;
        let x = g.add(tok, seg)?;
        let x = g.add(x, posv)?;
        let mut x = self.norm(g, x, "enc/emb_ln")?;

        for l in 0..cfg.n_layers {
            let p = format!("enc/layer{l}");
            let qkv = self.linear(g, x, &format!("{p}/qkv"))?;
            let att = g.attention(qkv, &segments, cfg.n_heads)?;
            let att = self.linear(g, att, &format!("{p}/attn_out"))?;
            let res = g.add(x, att)?;
            let h = self.norm(g, res, &format!("{p}/ln1"))?;
            let ff = self.linear(g, h, &format!("{p}/ff1"))?;
            let ff = g.gelu(ff);
            let ff = self.linear(g, ff, &format!("{p}/ff2"))?;
            let res = g.add(h, ff)?;
            x = self.norm(g, res, &format!("{p}/ln2"))?;
        }

        let cls = g.gather_rows(x, &offsets)?;
        let pooled = self.linear(g, cls, "enc/pool")?;
        let pooled = g.tanh(pooled);
        Ok(EncoderOutput { hidden: x, pooled, offsets })
    }

    /// Per-row vocabulary logits for the masked-LM objective.
    pub fn mlm_logits(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let h = self.linear(g, hidden, "mlm/transform")?;
        let h = g.gelu(h);
        let h = self.norm(g, h, "mlm/ln")?;
        let w = if self.config.tie_mlm_weights {
            let emb = g.param(TOKEN_EMBEDDING)?;
            g.transpose(emb)
        } else {
            g.param("mlm/out/w")?
        };
        let b = g.param("mlm/out/b")?;
        let logits = g.matmul(h, w)?;
        g.add_row(logits, b)
    }

    /// Ids of the parameters used by [`Encoder::encode`] (not the MLM head).
    pub fn param_ids(&self, store: &ParamStore) -> Vec<String> {
        store.ids().filter(|id| id.starts_with("enc/")).map(str::to_string).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { vocab_size: 30, d: 8, n_layers: 1, n_heads: 2, d_ff: 12, max_len: 16, n_segments: 2, tie_mlm_weights: false };
        let enc = Encoder::init(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (enc, store)
    }

    #[test]
    fn pack_pair_layout() {
        let p = pack_pair(&[10, 11, 12], &[20, 21], 64).unwrap();
        assert_eq!(p.token_ids, vec![CLS, 10, 11, 12, SEP, 20, 21, SEP]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(p.ctx_span(), Some(5..7));
    }

    #[test]
    fn pack_pair_rejects_empty_context_and_overflow() {
        assert!(matches!(pack_pair(&[10], &[], 64), Err(Error::Contract(_))));
        let err = pack_pair(&[10; 10], &[11; 5], 16).unwrap_err();
        assert!(matches!(err, Error::Length { len: 18, max: 16, .. }));
        assert!(err.for_example("train#3").to_string().contains("train#3"));
    }

    #[test]
    fn output_shapes() {
        let (enc, store) = small();
        let mut g = Graph::new(&store);
        let a = pack_pair(&[7, 8, 9], &[10, 11], 16).unwrap();
        let b = pack_single(&[7, 8], 16).unwrap();
        let out = enc.encode(&mut g, &[a, b], None).unwrap();
        assert_eq!(g.value(out.hidden).shape(), &[12, 8]);
        assert_eq!(g.value(out.pooled).shape(), &[2, 8]);
        assert_eq!(out.offsets, vec![0, 8]);
        let logits = enc.mlm_logits(&mut g, out.hidden).unwrap();
        assert_eq!(g.value(logits).shape(), &[12, 30]);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let (enc, store) = small();
        let mut g = Graph::new(&store);
        let a = pack_pair(&[7, 99], &[10], 16).unwrap();
        assert!(matches!(enc.encode(&mut g, &[a], None), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_override_is_bitwise_equal() {
        let (enc, store) = small();
        let plain = pack_pair(&[7, 8, 9], &[10, 11, 12], 16).unwrap();
        let mut g = Graph::new(&store);
        let base = enc.encode(&mut g, &[plain.clone()], None).unwrap();
        let base_h = g.value(base.hidden).clone();
        let base_p = g.value(base.pooled).clone();

        for p in plain.ctx_span().unwrap() {
            let mut g = Graph::new(&store);
            let emb = g.param(TOKEN_EMBEDDING).unwrap();
            let row = g.gather_rows(emb, &[plain.token_ids[p]]).unwrap();
            let mut inp = plain.clone();
            inp.overrides.push((p, 0));
            let out = enc.encode(&mut g, &[inp], Some(row)).unwrap();
            assert!(g.value(out.hidden).bit_eq(&base_h));
            assert!(g.value(out.pooled).bit_eq(&base_p));
        }
    }

    #[test]
    fn override_outside_context_is_rejected() {
        let (enc, store) = small();
        let mut g = Graph::new(&store);
        let t = g.constant(Tensor::zeros(&[1, 8]));
        let mut inp = pack_pair(&[7, 8], &[10], 16).unwrap();
        inp.overrides.push((1, 0));
        assert!(matches!(enc.encode(&mut g, &[inp], Some(t)), Err(Error::Contract(_))));
    }

    #[test]
    fn shuffling_the_sentence_changes_pooled_output() {
        let (enc, store) = small();
        let mut g = Graph::new(&store);
        let a = pack_pair(&[7, 8, 9, 13], &[10], 16).unwrap();
        let b = pack_pair(&[9, 13, 7, 8], &[10], 16).unwrap();
        let out = enc.encode(&mut g, &[a, b], None).unwrap();
        let p = g.value(out.pooled);
        assert_ne!(p.row(0), p.row(1));
    }

    #[test]
    fn tied_and_untied_heads_differ() {
        let (enc, store) = small();
        let tied = Encoder { config: EncoderConfig { tie_mlm_weights: true, ..enc.config.clone() } };
        let inp = pack_single(&[7, 8, 9], 16).unwrap();
        let mut g = Graph::new(&store);
        let out = enc.encode(&mut g, &[inp], None).unwrap();
        let a = enc.mlm_logits(&mut g, out.hidden).unwrap();
        let b = tied.mlm_logits(&mut g, out.hidden).unwrap();
        assert_eq!(g.value(a).shape(), g.value(b).shape());
        assert_ne!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn batch_rows_match_single_encodes() {
        let (enc, store) = small();
        let a = pack_pair(&[7, 8, 9], &[10, 11], 16).unwrap();
        let b = pack_pair(&[12, 13], &[14], 16).unwrap();
        let mut g = Graph::new(&store);
        let both = enc.encode(&mut g, &[a.clone(), b.clone()], None).unwrap();
        let pb = g.value(both.pooled).clone();
        for (i, inp) in [a, b].into_iter().enumerate() {
            let mut g = Graph::new(&store);
            let one = enc.encode(&mut g, &[inp], None).unwrap();
            for (x, y) in g.value(one.pooled).data().iter().zip(pb.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
