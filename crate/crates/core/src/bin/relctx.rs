use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relctx::data::save_jsonl;
use relctx::harness::{self, ExperimentConfig, RunContext, Sweep, SweepOutcome, TaskSource};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "relctx", version, about = "Relation extraction with explanations and perturbed contexts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list (task seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task as JSONL plus its gold explanations.
    GenData,
    /// Masked-LM pretraining of the encoder into the backbone cache.
    Pretrain,
    /// Train every configured kind and regime.
    Train,
    /// Explanation corruption sweep with NoExp and ExpGold anchors.
    SweepCorruption,
    /// Training-data fraction sweep.
    SweepDatafrac,
    /// Perturbed-context size sweep.
    SweepSize,
    /// Forward-cost timing table.
    Bench,
    /// Aggregate every result under a directory (default: the output root).
    Report { dir: Option<PathBuf> },
}

fn load_config(c: &Common) -> relctx::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn print_sweep(o: &SweepOutcome, dir: &std::path::Path) {
    let s = &o.summary;
    println!("{}: {}/{} runs completed -> {}", s.sweep, s.completed, s.requested, dir.display());
    for c in &s.cells {
        let f1 = c.f1_mean.map(|m| harness::format_pm(m, c.f1_std)).unwrap_or_else(|| "-".into());
        let v = c.value.map(|v| format!(" {}={v}", s.sweep.axis())).unwrap_or_default();
        println!("  {} {}{v}: F1 {f1}", c.kind, c.regime);
    }
    for r in o.results.iter().filter(|r| !r.is_ok()) {
        println!("  failed {} {} seed {}: {}", r.cell.kind, r.cell.regime, r.seed, r.error.as_deref().unwrap_or(""));
    }
    for f in &s.flags {
        let mark = match f.pass {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "info",
        };
        println!("  [{mark}] {}: {}", f.name, f.detail);
    }
}

fn run(cli: Cli) -> relctx::Result<bool> {
    let mut cfg = load_config(&cli.common)?;
    let sweep = match cli.command {
        Command::GenData => {
            if let (Some(seed), TaskSource::Generate(spec)) = (cli.common.seed, &mut cfg.task) {
                spec.seed = seed;
            }
            let task = harness::load_task(&cfg.task)?;
            save_jsonl(&task.dataset, &cfg.out)?;
            task.explanations.save(cfg.out.join("explanations.txt"), &task.dataset.vocab)?;
            println!(
                "{} train / {} val / {} test examples, {} explanations -> {}",
                task.dataset.train.len(),
                task.dataset.val.len(),
                task.dataset.test.len(),
                task.explanations.len(),
                cfg.out.display()
            );
            return Ok(true);
        }
        Command::Pretrain => {
            if let Some(seed) = cli.common.seed {
                cfg.pretrain.config.seed = seed;
            }
            let task = harness::load_task(&cfg.task)?;
            let bb = harness::obtain_backbone(&cfg, &task)?;
            println!("{} pretraining steps -> {}", bb.pretrain_steps, cfg.backbone_dir().display());
            return Ok(true);
        }
        Command::Bench => {
            let r = harness::bench(&cfg)?;
            for row in &r.rows {
                println!("{:<18} {:.5} s/batch  x{:.2}", row.model, row.seconds, row.ratio);
            }
            for f in &r.flags {
                println!("[{}] {}: {}", if f.pass == Some(true) { "pass" } else { "fail" }, f.name, f.detail);
            }
            return Ok(true);
        }
        Command::Report { dir } => {
            let r = harness::report(dir.unwrap_or(cfg.out))?;
            print!("{}", r.markdown);
            return Ok(true);
        }
        Command::Train => Sweep::Train,
        Command::SweepCorruption => Sweep::Corruption,
        Command::SweepDatafrac => Sweep::DataFraction,
        Command::SweepSize => Sweep::ContextSize,
    };
    if let Some(seed) = cli.common.seed {
        cfg.seeds = vec![seed];
    }
    let ctx = RunContext::new(cfg)?;
    let outcome = harness::run_sweep(&ctx, sweep, cli.common.jobs)?;
    print_sweep(&outcome, &ctx.run_dir());
    Ok(outcome.all_completed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
