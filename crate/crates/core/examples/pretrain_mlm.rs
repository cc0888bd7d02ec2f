//! Masked-LM pretraining of the micro encoder on synthetic text, with
//! held-out loss and top-1 recovery before and after.
//!
//! cargo run --release --example pretrain_mlm -- [sentences] [epochs] [save_dir]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relctx::data::{generate_corpus, TaskSpec};
use relctx::encoder::EncoderConfig;
use relctx::training::{mlm_evaluate, mlm_pretrain, Backbone, PretrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(4000, |s| s.parse().expect("sentence count"));
    let epochs: usize = args.next().map_or(2, |s| s.parse().expect("epoch count"));
    let save = args.next();

    let spec = TaskSpec::default();
    let vocab = spec.task_vocab()?.vocab;
    let corpus = generate_corpus(&spec, n, 99)?;
    let held_out = generate_corpus(&spec, 500, 98)?;
    let mut bb = Backbone::fresh(EncoderConfig::desk(vocab.len()), &mut ChaCha8Rng::seed_from_u64(0))?;

    let before = mlm_evaluate(&bb, &held_out, 64, 5)?;
    println!("before: loss {:.3}, top-1 {:.3} (chance {:.3})", before.loss, before.top1, 1.0 / vocab.len() as f64);
    let t0 = std::time::Instant::now();
    let rep = mlm_pretrain(&mut bb, &corpus, &PretrainConfig { epochs, ..Default::default() })?;
    let after = mlm_evaluate(&bb, &held_out, 64, 5)?;
    println!("{} steps in {:.1}s", rep.steps, t0.elapsed().as_secs_f64());
    for (i, chunk) in rep.losses.chunks(rep.losses.len().div_ceil(8).max(1)).enumerate() {
        println!("  steps {:>5}+: mean loss {:.3}", i * chunk.len(), chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    println!("after:  loss {:.3}, top-1 {:.3}", after.loss, after.top1);
    if let Some(dir) = save {
        bb.save(&dir)?;
        println!("saved to {dir}");
    }
    Ok(())
}
