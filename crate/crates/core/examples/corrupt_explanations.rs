//! Random word corruption of explanations: exactly round(p·k) of the k words
//! change, placeholders never do, and the seed fixes the outcome.

use relctx::explanations::{corrupt_set, replacement_count, substitute, CorruptionSpec, Explanation, ExplanationSet};
use relctx::vocab::Vocab;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> relctx::Result<()> {
    let mut vocab = Vocab::new();
    let set = ExplanationSet::new(vec![
        Explanation::parse("{o1} and {o2} went on a honeymoon", &mut vocab)?,
        Explanation::parse("{o1} is the wife of {o2}", &mut vocab)?,
    ]);
    for w in ["frog", "table", "green", "quickly", "river", "seven", "under", "paper"] {
        vocab.intern(w);
    }
    let pool = vocab.regular_ids();
    let (o1, o2) = (vocab.intern("Robert"), vocab.intern("Julie"));

    for p in [0.0, 0.25, 0.5, 1.0] {
        let c = corrupt_set(&set, &CorruptionSpec::new(p, 7)?, &pool)?;
        println!("p = {p}");
        for (e, replaced) in c.set.iter().zip(&c.replaced) {
            let k = e.word_count();
            println!(
                "  {:<44} {} of {k} words replaced (round(p·k) = {})",
                vocab.decode(&substitute(e, &[o1], &[o2])),
                replaced.len(),
                replacement_count(p, k)
            );
        }
    }

    let again = corrupt_set(&set, &CorruptionSpec::new(0.5, 7)?, &pool)?;
    let other = corrupt_set(&set, &CorruptionSpec::new(0.5, 8)?, &pool)?;
    println!("\nseed 7 twice equal: {}", again == corrupt_set(&set, &CorruptionSpec::new(0.5, 7)?, &pool)?);
    println!("seed 7 vs seed 8 equal: {}", again == other);
    Ok(())
}
