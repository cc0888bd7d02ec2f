//! End-to-end training behaviour on small synthetic tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relctx::data::{generate_corpus, generate_task, Dataset, SplitCounts, TaskSpec};
use relctx::encoder::EncoderConfig;
use relctx::explanations::ExplanationSet;
use relctx::numerics::Tensor;
use relctx::perturbed_context::Variant;
use relctx::training::{
    build_model, mlm_evaluate, mlm_pretrain, train, Backbone, BuildInputs, Model, ModelKind, PretrainConfig,
    Regime, TrainConfig,
};
use relctx::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn small_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig { d: 16, n_layers: 1, n_heads: 2, d_ff: 32, ..EncoderConfig::desk(vocab) }
}

fn small_task() -> (TaskSpec, Dataset, ExplanationSet) {
    let spec = TaskSpec { counts: SplitCounts { train: 240, val: 60, test: 60 }, ..Default::default() };
    let (ds, gold) = generate_task(&spec).unwrap();
    (spec, ds, gold)
}

fn model(kind: ModelKind, bb: &Backbone, ds: &Dataset, gold: &ExplanationSet, seed: u64) -> Model {
    let inputs = BuildInputs { explanations: Some(gold), pc: None, head_hidden: 16 };
    build_model(kind, bb, ds, inputs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn pretraining_lowers_held_out_loss_and_beats_chance() {
    let (spec, ds, _) = small_task();
    let corpus = generate_corpus(&spec, 3000, 99).unwrap();
    let held = generate_corpus(&spec, 300, 98).unwrap();
    let mut bb = Backbone::fresh(small_encoder(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = mlm_evaluate(&bb, &held, 64, 1).unwrap();
    let rep = mlm_pretrain(&mut bb, &corpus, &PretrainConfig { epochs: 2, ..Default::default() }).unwrap();
    let after = mlm_evaluate(&bb, &held, 64, 1).unwrap();
    println!("held-out MLM loss {:.3} -> {:.3}, top-1 {:.3} -> {:.3}", before.loss, after.loss, before.top1, after.top1);
    assert!(bb.is_pretrained() && bb.pretrain_steps == rep.steps);
    assert!(after.loss < before.loss);
    assert!(after.top1 > 1.0 / ds.vocab.len() as f64);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (_, ds, gold) = small_task();
    let bb = Backbone::fresh(small_encoder(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut m = model(ModelKind::PC(Variant::Random), &bb, &ds, &gold, 1);
    let before = m.store.digest("");
    let h = train(&mut m, &ds, &TrainConfig { lr: 0.0, epochs: 3, head_hidden: 16, ..Default::default() }).unwrap();
    assert_eq!(m.store.digest(""), before);
    assert!(h.epochs.windows(2).all(|w| w[0].val == w[1].val));
}

#[test]
fn identical_config_and_seed_reproduce_bitwise() {
    let (_, ds, gold) = small_task();
    let bb = Backbone::fresh(small_encoder(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = TrainConfig { lr: 1e-3, epochs: 2, seed: 4, head_hidden: 16, ..Default::default() };
    let run = || {
        let mut m = model(ModelKind::ExpCorrupted(0.5), &bb, &ds, &gold, 4);
        let h = train(&mut m, &ds, &cfg).unwrap();
        (h.step_losses, h.epochs.iter().map(|e| e.val).collect::<Vec<_>>(), m.store.digest(""))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn every_kind_lowers_its_training_loss() {
    let (_, ds, gold) = small_task();
    let gold = gold.cycled(3);
    let bb = Backbone::fresh(small_encoder(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let kinds = [
        ModelKind::NoExp,
        ModelKind::ExpGold,
        ModelKind::ExpCorrupted(0.5),
        ModelKind::ExpCorruptedTunable(1.0),
        ModelKind::PC(Variant::Random),
        ModelKind::PC(Variant::FixedRandom),
        ModelKind::PC(Variant::Conditional),
        ModelKind::PC(Variant::FactorizedRandom),
        ModelKind::PC(Variant::FactorizedConditional),
        ModelKind::Mixture,
        ModelKind::MultiPC(2),
    ];
    for kind in kinds {
        let mut m = model(kind, &bb, &ds, &gold, 2);
        let h = train(&mut m, &ds, &TrainConfig { lr: 1e-3, epochs: 2, head_hidden: 16, ..Default::default() }).unwrap();
        let last = h.final_loss().unwrap();
        assert!(last < h.initial_loss, "{kind}: {} -> {last}", h.initial_loss);
    }
}

#[test]
fn frozen_training_leaves_the_encoder_bitwise_untouched() {
    let (_, ds, gold) = small_task();
    let mut bb = Backbone::fresh(small_encoder(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    bb.pretrain_steps = 1;
    let mut m = model(ModelKind::ExpCorruptedTunable(1.0), &bb, &ds, &gold.cycled(2), 3);
    let enc = m.store.digest("enc/");
    let head = m.store.digest("head/");
    let tok = m.store.digest("corrupt/tok/");
    let cfg = TrainConfig { lr: 1e-3, epochs: 1, regime: Regime::FrozenLM, head_hidden: 16, ..Default::default() };
    train(&mut m, &ds, &cfg).unwrap();
    assert_eq!(m.store.digest("enc/"), enc);
    assert_ne!(m.store.digest("head/"), head);
    assert_ne!(m.store.digest("corrupt/tok/"), tok);
}

#[test]
fn nan_loss_aborts_with_a_numerical_error() {
    let (_, ds, gold) = small_task();
    let bb = Backbone::fresh(small_encoder(ds.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut m = model(ModelKind::NoExp, &bb, &ds, &gold, 0);
    let p = m.store.get_mut("head/b2").unwrap();
    p.tensor = Tensor::vector(vec![f64::NAN; p.tensor.numel()]);
    let err = train(&mut m, &ds, &TrainConfig { head_hidden: 16, ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::Numerical { .. }), "{err}");
}
