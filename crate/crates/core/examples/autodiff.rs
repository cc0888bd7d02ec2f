//! Build a small two-layer network on the tape, backpropagate, and compare
//! every gradient against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relctx::numerics::{finite_difference_grad, max_relative_error, Graph, ParamStore, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, 0.5).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect()).unwrap()
}

fn main() -> relctx::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("w1", randn(6, 8, &mut rng), true)?;
    store.insert("b1", Tensor::zeros(&[8]), true)?;
    store.insert("w2", randn(8, 3, &mut rng), true)?;
    let x = randn(4, 6, &mut rng);
    let targets = [0, 2, 1, 2];

    let loss_of = |s: &ParamStore| -> relctx::Result<f64> {
        let mut g = Graph::new(s);
        let xv = g.constant(x.clone());
        let (w1, b1, w2) = (g.param("w1")?, g.param("b1")?, g.param("w2")?);
        let h = g.matmul(xv, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let logits = g.matmul(h, w2)?;
        let loss = g.cross_entropy(logits, &targets)?;
        Ok(g.value(loss).item().unwrap())
    };

    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let (w1, b1, w2) = (g.param("w1")?, g.param("b1")?, g.param("w2")?);
    let h = g.matmul(xv, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2)?;
    let loss = g.cross_entropy(logits, &targets)?;
    println!("loss {:.6} over {} tape nodes", g.value(loss).item().unwrap(), g.len());
    let analytic = g.backward(loss)?;

    let numeric = finite_difference_grad(loss_of, &store, 1e-3)?;
    for (id, grad) in &analytic {
        println!("{id:>3}: |grad| {:.4e}", grad.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    println!("max relative error vs finite differences: {:.2e}", max_relative_error(&analytic, &numeric));
    Ok(())
}
