//! Train one model kind in one regime on the synthetic task and evaluate it.
//!
//! cargo run --release --example train_relation -- [kind] [regime] [epochs]
//!
//! kind: no-exp | exp-gold | exp-corrupted:P | exp-corrupted-tunable:P | pc:VARIANT | mixture | multi-pc:N
//! regime: fine-tune | frozen-lm (the frozen regime pretrains the encoder first)

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relctx::data::{generate_corpus, generate_task, TaskSpec};
use relctx::encoder::EncoderConfig;
use relctx::training::{
    build_model, evaluate, mlm_pretrain, train, Backbone, BuildInputs, ModelKind, PretrainConfig, Regime, TrainConfig,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ModelKind = args.next().as_deref().unwrap_or("pc:random").parse()?;
    let regime = match args.next().as_deref().unwrap_or("fine-tune") {
        "frozen-lm" => Regime::FrozenLM,
        _ => Regime::FineTune,
    };
    let epochs: usize = args.next().map_or(5, |s| s.parse().expect("epoch count"));

    let spec = TaskSpec::default();
    let (ds, gold) = generate_task(&spec)?;
    let mut bb = Backbone::fresh(EncoderConfig::desk(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0))?;
    if regime == Regime::FrozenLM {
        let corpus = generate_corpus(&spec, 20_000, 99)?;
        println!("pretraining the encoder on {} sentences...", corpus.len());
        mlm_pretrain(&mut bb, &corpus, &PretrainConfig { epochs: 5, ..Default::default() })?;
    }

    let inputs = BuildInputs { explanations: Some(&gold), pc: None, head_hidden: 64 };
    let mut model = build_model(kind, &bb, &ds, inputs, &mut ChaCha8Rng::seed_from_u64(1))?;
    let cfg = TrainConfig { epochs, regime, seed: 1, ..Default::default() };
    println!("{kind} / {regime}: {} sequences per example, feature size {}", model.sequences_per_example(), model.feature_dim());
    let history = train(&mut model, &ds, &cfg)?;
    for e in &history.epochs {
        println!(
            "epoch {}: train loss {:.4}  val F1 {:.3}  acc {:.3}  ({:.1}s)",
            e.epoch + 1,
            e.train_loss,
            e.val.f1,
            e.val.accuracy,
            e.seconds
        );
    }
    let test = evaluate(&model, &ds.test, ds.nil_label, 64)?;
    println!("test: P {:.3} R {:.3} F1 {:.3} acc {:.3}", test.precision, test.recall, test.f1, test.accuracy);
    Ok(())
}
