//! The five perturbed-context variants on a random encoder: parameter counts,
//! what trains, the shape of the slot embeddings and of the pooled features,
//! and the rank limit of the factorized variant.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relctx::data::{generate_task, TaskSpec};
use relctx::encoder::{Encoder, EncoderConfig};
use relctx::numerics::{Graph, ParamStore};
use relctx::perturbed_context::{context_embeddings, init_pc, param_count, pc_features, sentence_pool, PCSpec, Variant};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let (ds, _) = generate_task(&TaskSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let enc = Encoder::init(EncoderConfig::desk(ds.vocab.len()), &mut store, &mut rng)?;
    let d = enc.d();
    let table = store.tensor("enc/tok_emb")?.clone();
    let xs: Vec<_> = ds.train.iter().take(3).collect();

    println!("{:<24} {:>8} {:>10} {:>12} {:>10}", "variant", "params", "trainable", "slot rows", "features");
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let spec = PCSpec { l: 8, ..PCSpec::new(v, d) };
        let pc = init_pc(spec, i, &table, &mut store, &mut rng)?;
        let trainable = pc.param_ids(&store).iter().all(|id| store.get(id).is_some_and(|p| p.trainable));
        let mut g = Graph::new(&store);
        let pool = if v.is_conditional() { Some(sentence_pool(&mut g, &enc, &xs)?) } else { None };
        let rows = context_embeddings(&mut g, &pc, pool)?;
        let f = pc_features(&mut g, &enc, &xs, &pc)?;
        println!(
            "{:<24} {:>8} {:>10} {:>12} {:>10}",
            format!("{v:?} ({})", v.short_name()),
            param_count(&spec, d),
            trainable,
            format!("{:?}", g.value(rows).shape()),
            format!("{:?}", g.value(f).shape()),
        );
    }

    // m = 8 slots through an l = 2 bottleneck span at most two directions.
    let spec = PCSpec { m: 8, l: 2, ..PCSpec::new(Variant::FactorizedRandom, d) };
    let pc = init_pc(spec, 99, &table, &mut store, &mut rng)?;
    let mut g = Graph::new(&store);
    let rows = context_embeddings(&mut g, &pc, None)?;
    let t = g.value(rows);
    let sv = DMatrix::from_row_slice(t.rows(), t.cols(), t.data()).singular_values();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    println!("\nFactorizedRandom m=8 l=2 singular values:");
    println!("{}", sv.iter().map(|s| format!("{s:.2e}")).collect::<Vec<_>>().join(" "));
    Ok(())
}
