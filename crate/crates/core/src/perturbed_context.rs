//! Perturbed contexts: `o1 [V]_1 … [V]_m o2` templates whose slot embeddings
//! come from learned parameters instead of the vocabulary.
//!
//! | variant                 | slot `i` embedding            | parameters                |
//! |-------------------------|-------------------------------|---------------------------|
//! | `Random`, `FixedRandom` | `M_i`                         | `M: m x d`                |
//! | `FactorizedRandom`      | `W_fr · MF_i`                 | `MF: m x l`, `W_fr: d x l`|
//! | `Conditional`           | `F_i(x_pool)`                 | `m` MLPs `d → d → d`      |
//! | `FactorizedConditional` | `W_fc2 · (W_fc1 · F_i(x_pool))`| MLPs, `W_fc1: l x d`, `W_fc2: d x l` |
//!
//! Graph code uses row vectors, so `W · v` appears as `v · Wᵀ`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::encoder::{pack_pair, pack_single, Encoder, OverrideTable, PackedInput};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::vocab::SLOT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Random,
    FixedRandom,
    Conditional,
    FactorizedRandom,
    FactorizedConditional,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Random,
        Variant::FixedRandom,
        Variant::Conditional,
        Variant::FactorizedRandom,
        Variant::FactorizedConditional,
    ];

    pub fn is_conditional(self) -> bool {
        matches!(self, Variant::Conditional | Variant::FactorizedConditional)
    }

    pub fn is_factorized(self) -> bool {
        matches!(self, Variant::FactorizedRandom | Variant::FactorizedConditional)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Random => "R",
            Variant::FixedRandom => "FixedR",
            Variant::Conditional => "C",
            Variant::FactorizedRandom => "FR",
            Variant::FactorizedConditional => "FC",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PCSpec {
    pub variant: Variant,
    /// Slots per context.
    pub m: usize,
    /// Factorization size; only used by factorized variants.
    pub l: usize,
    pub n_contexts: usize,
}

impl PCSpec {
    /// `m = 4`, `l = min(32, d − 1)`, one context.
    pub fn new(variant: Variant, d: usize) -> Self {
        PCSpec { variant, m: 4, l: 32.min(d.saturating_sub(1)).max(1), n_contexts: 1 }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("perturbed context needs m >= 1".into()));
        }
        if self.n_contexts == 0 {
            return Err(Error::Config("n_contexts must be at least 1".into()));
        }
        if self.variant.is_factorized() && !(self.l >= 1 && self.l < d) {
            return Err(Error::Config(format!("factorization size l={} must satisfy 1 <= l < d={d}", self.l)));
        }
        Ok(())
    }
}

/// Number of values held by the context parameters of `spec` (all contexts).
pub fn param_count(spec: &PCSpec, d: usize) -> usize {
    let (m, l) = (spec.m, spec.l);
    let mlps = m * (2 * d * d + 2 * d);
    let per = match spec.variant {
        Variant::Random | Variant::FixedRandom => m * d,
        Variant::FactorizedRandom => m * l + d * l,
        Variant::Conditional => mlps,
        Variant::FactorizedConditional => mlps + l * d + d * l,
    };
    per * spec.n_contexts
}

/// Handle to one initialized context; its parameters live under `pc/<index>/`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbedContext {
    pub spec: PCSpec,
    pub index: usize,
}

impl PerturbedContext {
    pub fn prefix(&self) -> String {
        format!("pc/{}/", self.index)
    }

    fn id(&self, name: &str) -> String {
        format!("pc/{}/{name}", self.index)
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<String> {
        let p = self.prefix();
        store.ids().filter(|id| id.starts_with(&p)).map(str::to_string).collect()
    }

    /// Context tokens for one example and the slot positions inside them.
    pub fn context_tokens(&self, x: &Example) -> (Vec<usize>, Vec<usize>) {
        let o1 = x.entity1();
        let mut ctx = o1.to_vec();
        let slots: Vec<usize> = (o1.len()..o1.len() + self.spec.m).collect();
        ctx.extend(std::iter::repeat_n(SLOT, self.spec.m));
        ctx.extend_from_slice(x.entity2());
        (ctx, slots)
    }
}

/// Scalar mean and population standard deviation over every entry of `table`.
pub fn embedding_stats(table: &Tensor) -> Result<(f64, f64)> {
    let n = table.numel();
    if n == 0 {
        return Err(Error::contract("embedding table is empty"));
    }
    let mean = table.data().iter().sum::<f64>() / n as f64;
    let var = table.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

/// Draws context parameters i.i.d. from `N(μ, σ)` with `(μ, σ)` taken from the
/// token-embedding table, and inserts them into `store`.
///
/// Projection matrices of the factorized variants use the same draw rescaled
/// to unit RMS and then by `1/√fan_in`, which keeps projected rows on the
/// scale of a token embedding.
pub fn init_pc(
    spec: PCSpec,
    index: usize,
    embedding_table: &Tensor,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<PerturbedContext> {
    let d = embedding_table.cols();
    spec.validate(d)?;
    let (mu, sigma) = embedding_stats(embedding_table)?;
    let rms = (mu * mu + sigma * sigma).sqrt();
    let dist = Normal::new(mu, sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut draw = |shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) * scale).collect()).expect("sized")
    };
    let proj = |fan_in: usize| if rms > 0.0 { 1.0 / (rms * (fan_in as f64).sqrt()) } else { 0.0 };

    let pc = PerturbedContext { spec, index };
    let trainable = spec.variant != Variant::FixedRandom;
    let (m, l) = (spec.m, spec.l);
    let mut params: Vec<(String, Tensor)> = Vec::new();
    match spec.variant {
        Variant::Random | Variant::FixedRandom => params.push((pc.id("M"), draw(&[m, d], 1.0))),
        Variant::FactorizedRandom => {
            params.push((pc.id("MF"), draw(&[m, l], 1.0)));
            params.push((pc.id("W_fr"), draw(&[d, l], proj(l))));
        }
        Variant::Conditional | Variant::FactorizedConditional => {
            for i in 0..m {
                params.push((pc.id(&format!("F{i}/w1")), draw(&[d, d], 1.0)));
                params.push((pc.id(&format!("F{i}/b1")), draw(&[d], 1.0)));
                params.push((pc.id(&format!("F{i}/w2")), draw(&[d, d], 1.0)));
                params.push((pc.id(&format!("F{i}/b2")), draw(&[d], 1.0)));
            }
            if spec.variant == Variant::FactorizedConditional {
                params.push((pc.id("W_fc1"), draw(&[l, d], proj(d))));
                params.push((pc.id("W_fc2"), draw(&[d, l], proj(l))));
            }
        }
    }
    for (id, t) in params {
        store.insert(id, t, trainable)?;
    }
    Ok(pc)
}

/// Slot embeddings as graph rows.
///
/// Sample-independent variants return `m x d` (row `i` is slot `i`).
/// Conditional variants need `x_pool` (`B x d`) and return `(m·B) x d` with
/// slot `i` of example `b` at row `i·B + b`.
pub fn context_embeddings(g: &mut Graph<'_>, pc: &PerturbedContext, x_pool: Option<Var>) -> Result<Var> {
    match pc.spec.variant {
        Variant::Random | Variant::FixedRandom => g.param(&pc.id("M")),
        Variant::FactorizedRandom => {
            let mf = g.param(&pc.id("MF"))?;
            let w = g.param(&pc.id("W_fr"))?;
            let wt = g.transpose(w);
            g.matmul(mf, wt)
        }
        Variant::Conditional | Variant::FactorizedConditional => {
            let xp = x_pool.ok_or_else(|| Error::contract("conditional perturbed context needs x_pool"))?;
            let mut rows = Vec::with_capacity(pc.spec.m);
            for i in 0..pc.spec.m {
                let w1 = g.param(&pc.id(&format!("F{i}/w1")))?;
                let b1 = g.param(&pc.id(&format!("F{i}/b1")))?;
                let w2 = g.param(&pc.id(&format!("F{i}/w2")))?;
                let b2 = g.param(&pc.id(&format!("F{i}/b2")))?;
                let h = g.matmul(xp, w1)?;
                let h = g.add_row(h, b1)?;
                let h = g.gelu(h);
                let h = g.matmul(h, w2)?;
                let mut f = g.add_row(h, b2)?;
                if pc.spec.variant == Variant::FactorizedConditional {
                    let w_fc1 = g.param(&pc.id("W_fc1"))?;
                    let w_fc2 = g.param(&pc.id("W_fc2"))?;
                    let t1 = g.transpose(w_fc1);
                    let t2 = g.transpose(w_fc2);
                    let low = g.matmul(f, t1)?;
                    f = g.matmul(low, t2)?;
                }
                rows.push(f);
            }
            g.concat_rows(&rows)
        }
    }
}

/// Pooled encoding of each sentence packed alone; the `x_pool` of conditional variants.
pub fn sentence_pool(g: &mut Graph<'_>, enc: &Encoder, xs: &[&Example]) -> Result<Var> {
    let inputs = xs
        .iter()
        .enumerate()
        .map(|(b, x)| pack_single(&x.tokens, enc.config.max_len).map_err(|e| e.for_example(b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(enc.encode(g, &inputs, None)?.pooled)
}

/// Packs `(s, e_v)` for every example and registers the slot embeddings in
/// `table`. `x_pool` is computed on demand for conditional variants and reused.
pub fn install_context(
    g: &mut Graph<'_>,
    enc: &Encoder,
    xs: &[&Example],
    pc: &PerturbedContext,
    x_pool: &mut Option<Var>,
    table: &mut OverrideTable,
) -> Result<Vec<PackedInput>> {
    if pc.spec.variant.is_conditional() && x_pool.is_none() {
        *x_pool = Some(sentence_pool(g, enc, xs)?);
    }
    let rows = context_embeddings(g, pc, *x_pool)?;
    let base = table.push(g, rows);
    let batch = xs.len();
    let conditional = pc.spec.variant.is_conditional();
    xs.iter()
        .enumerate()
        .map(|(b, x)| {
            let (ctx, slots) = pc.context_tokens(x);
            let mut inp = pack_pair(&x.tokens, &ctx, enc.config.max_len).map_err(|e| e.for_example(b))?;
            let start = inp.ctx_start.expect("pair");
            for (i, s) in slots.into_iter().enumerate() {
                let row = if conditional { base + i * batch + b } else { base + i };
                inp.overrides.push((start + s, row));
            }
            Ok(inp)
        })
        .collect()
}

/// Pooled `[CLS]` of `(s, e_v)`: a `B x d` node.
pub fn pc_features(g: &mut Graph<'_>, enc: &Encoder, xs: &[&Example], pc: &PerturbedContext) -> Result<Var> {
    multi_pc_features(g, enc, xs, std::slice::from_ref(pc))
}

/// Per-context pooled features concatenated in list order: `B x n·d`.
pub fn multi_pc_features(g: &mut Graph<'_>, enc: &Encoder, xs: &[&Example], pcs: &[PerturbedContext]) -> Result<Var> {
    if pcs.is_empty() {
        return Err(Error::contract("no perturbed contexts given"));
    }
    let mut table = OverrideTable::new();
    let mut x_pool = None;
    let mut per_ctx = Vec::with_capacity(pcs.len());
    for pc in pcs {
        per_ctx.push(install_context(g, enc, xs, pc, &mut x_pool, &mut table)?);
    }
    let mut inputs = Vec::with_capacity(xs.len() * pcs.len());
    for b in 0..xs.len() {
        for c in &per_ctx {
            inputs.push(c[b].clone());
        }
    }
    let t = table.build(g)?;
    let out = enc.encode(g, &inputs, t)?;
    g.reshape(out.pooled, &[xs.len(), pcs.len() * enc.d()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.1, 0.5).unwrap();
        Tensor::matrix(rows, d, (0..rows * d).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn param_counts() {
        let mut s = PCSpec::new(Variant::Random, 64);
        assert_eq!(param_count(&s, 64), 256);
        s.variant = Variant::FixedRandom;
        assert_eq!(param_count(&s, 64), 256);
        let fr = PCSpec { variant: Variant::FactorizedRandom, m: 4, l: 8, n_contexts: 1 };
        assert_eq!(param_count(&fr, 64), 32 + 512);
        let multi = PCSpec { n_contexts: 5, ..PCSpec::new(Variant::Random, 64) };
        assert_eq!(param_count(&multi, 64), 5 * 4 * 64);
    }

    #[test]
    fn param_count_matches_initialized_store() {
        let t = table(20, 16, 1);
        for v in Variant::ALL {
            let spec = PCSpec { variant: v, m: 3, l: 5, n_contexts: 1 };
            let mut store = ParamStore::new();
            init_pc(spec, 0, &t, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(store.num_values(), param_count(&spec, 16), "{v:?}");
            let trainable: usize = store.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum();
            if v == Variant::FixedRandom {
                assert_eq!(trainable, 0);
            } else {
                assert_eq!(trainable, store.num_values());
            }
        }
    }

    #[test]
    fn validation_rejects_bad_sizes() {
        let spec = PCSpec { variant: Variant::FactorizedRandom, m: 4, l: 64, n_contexts: 1 };
        assert!(spec.validate(64).is_err());
        assert!(PCSpec { m: 0, ..PCSpec::new(Variant::Random, 64) }.validate(64).is_err());
        assert!(PCSpec { n_contexts: 0, ..PCSpec::new(Variant::Random, 64) }.validate(64).is_err());
        assert_eq!(PCSpec::new(Variant::FactorizedRandom, 16).l, 15);
    }

    #[test]
    fn zero_table_gives_zero_params() {
        let t = Tensor::zeros(&[10, 8]);
        for v in Variant::ALL {
            let spec = PCSpec { variant: v, m: 2, l: 3, n_contexts: 1 };
            let mut store = ParamStore::new();
            init_pc(spec, 0, &t, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert!(store.iter().all(|p| p.tensor.data().iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn init_statistics_track_the_table() {
        let t = table(50, 40, 3);
        let (mu, sigma) = embedding_stats(&t).unwrap();
        let spec = PCSpec { variant: Variant::Random, m: 250, l: 1, n_contexts: 1 };
        let mut store = ParamStore::new();
        init_pc(spec, 0, &t, &mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let m = store.tensor("pc/0/M").unwrap();
        assert_eq!(m.numel(), 10_000);
        let (m_mu, m_sigma) = embedding_stats(m).unwrap();
        assert!((m_mu - mu).abs() < 0.05 * mu.abs(), "{m_mu} vs {mu}");
        assert!((m_sigma - sigma).abs() < 0.05 * sigma, "{m_sigma} vs {sigma}");
    }

    #[test]
    fn init_is_deterministic_and_rejects_empty_table() {
        let t = table(10, 8, 4);
        let spec = PCSpec::new(Variant::FactorizedConditional, 8);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        init_pc(spec, 0, &t, &mut a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        init_pc(spec, 0, &t, &mut b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.digest(""), b.digest(""));
        let empty = Tensor::zeros(&[0, 8]);
        let err = init_pc(spec, 0, &empty, &mut ParamStore::new(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn random_rows_are_m_exactly() {
        let t = table(10, 64, 4);
        let mut store = ParamStore::new();
        let pc = init_pc(PCSpec::new(Variant::Random, 64), 0, &t, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new(&store);
        let rows = context_embeddings(&mut g, &pc, None).unwrap();
        assert!(g.value(rows).bit_eq(store.tensor("pc/0/M").unwrap()));
    }

    #[test]
    fn conditional_rows_depend_on_input_only() {
        let t = table(10, 8, 4);
        let mut store = ParamStore::new();
        let pc =
            init_pc(PCSpec::new(Variant::Conditional, 8), 0, &t, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new(&store);
        assert!(context_embeddings(&mut g, &pc, None).is_err());
        let xp = g.constant(
            Tensor::matrix(3, 8, (0..24).map(|i| ((i % 8) as f64 * 0.3 - 1.0) * if i < 16 { 1.0 } else { 0.5 }).collect())
                .unwrap(),
        );
        let rows = context_embeddings(&mut g, &pc, Some(xp)).unwrap();
        let v = g.value(rows);
        assert_eq!(v.shape(), &[12, 8]);
        for i in 0..4 {
            assert_eq!(v.row(i * 3), v.row(i * 3 + 1), "identical x_pool rows");
            assert_ne!(v.row(i * 3), v.row(i * 3 + 2), "distinct x_pool rows");
        }
    }
}
