//! Forward cost of NoExp, ExpGold(n), PC(Random) and Mixture relative to NoExp.
//! ExpGold encodes one pair per explanation; a perturbed context encodes one.
//!
//! cargo run --release --example timing_bench

use relctx::harness::{bench, ExperimentConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let cfg = ExperimentConfig { out: "target/timing_bench".into(), ..Default::default() };
    let r = bench(&cfg)?;
    println!("{:<16} {:>14} {:>8}", "model", "ms per batch", "vs NoExp");
    for row in &r.rows {
        println!("{:<16} {:>14.3} {:>8.2}", row.model, row.seconds * 1e3, row.ratio);
    }
    for f in &r.flags {
        println!("{}: {} ({:?})", f.name, f.detail, f.pass);
    }
    Ok(())
}
