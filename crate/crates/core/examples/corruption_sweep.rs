//! A small corruption sweep through the harness, followed by a report.
//! The same grid at full size is `relctx sweep-corruption`.
//!
//! cargo run --release --example corruption_sweep -- [out_dir]

use relctx::data::{SplitCounts, TaskSpec};
use relctx::harness::{report, run_sweep, ExperimentConfig, PretrainSetup, RunContext, Sweep, TaskSource};
use relctx::training::{PretrainConfig, Regime, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/corruption_sweep".into());
    let cfg = ExperimentConfig {
        task: TaskSource::Generate(TaskSpec { counts: SplitCounts { train: 600, val: 200, test: 200 }, ..Default::default() }),
        regimes: vec![Regime::FineTune],
        seeds: vec![0, 1],
        corruption: vec![0.0, 0.5, 1.0],
        train: TrainConfig { epochs: 3, ..Default::default() },
        pretrain: PretrainSetup { corpus: 2000, config: PretrainConfig { epochs: 1, ..Default::default() }, ..Default::default() },
        checkpoints: false,
        out: out.into(),
        ..Default::default()
    };
    let ctx = RunContext::new(cfg)?;
    let outcome = run_sweep(&ctx, Sweep::Corruption, 1)?;
    for f in &outcome.summary.flags {
        println!("{:<36} {:?}  {}", f.name, f.pass, f.detail);
    }
    let rep = report(&ctx.config.out)?;
    print!("\n{}", rep.markdown);
    Ok(())
}
