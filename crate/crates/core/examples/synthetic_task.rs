//! Generate the default synthetic task, show a few sentences with their
//! relations and the gold explanations, and write it out as JSONL.
//!
//! cargo run --release --example synthetic_task -- [out_dir]

use relctx::data::{generate_task, load_jsonl, save_jsonl, TaskSpec};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synthetic_task".into());
    let spec = TaskSpec::default();
    let (ds, gold) = generate_task(&spec)?;

    println!("{} labels, vocabulary of {}", ds.n_labels(), ds.vocab.len());
    println!("train/val/test = {}/{}/{}\n", ds.train.len(), ds.val.len(), ds.test.len());
    for x in ds.train.iter().take(6) {
        let words: Vec<String> = x
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let w = ds.vocab.word(t);
                let in_entity = (x.span1.0..x.span1.1).contains(&i) || (x.span2.0..x.span2.1).contains(&i);
                if in_entity { format!("[{w}]") } else { w.to_string() }
            })
            .collect();
        println!("{:>6}  {}", ds.labels[x.label], words.join(" "));
    }

    println!("\ngold explanations:");
    print!("{}", gold.to_text(&ds.vocab));

    save_jsonl(&ds, &out)?;
    gold.save(std::path::Path::new(&out).join("explanations.txt"), &ds.vocab)?;
    let back = load_jsonl(&out)?;
    assert_eq!(back.train, ds.train);
    println!("\nwrote {out}");
    Ok(())
}
