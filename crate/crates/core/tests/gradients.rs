//! Analytic gradients of every graph primitive against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relctx::numerics::{finite_difference_grad, max_relative_error, Graph, ParamStore, Tensor, Var};
use relctx::Result;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap()
}

fn store(params: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, (id, shape)) in params.iter().enumerate() {
        s.insert(*id, randn(shape, 100 + i as u64), true).unwrap();
    }
    s
}

/// Reduces `out` to a scalar through fixed pseudo-random weights so that no
/// gradient is symmetric by accident.
fn probe(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let t = g.value(out);
    if t.numel() == 1 {
        return Ok(out);
    }
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
    let w = g.constant(Tensor::new(t.shape().to_vec(), w)?);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn check<F>(params: &[(&str, &[usize])], build: F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let s = store(params);
    let objective = |st: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(st);
        let out = build(&mut g)?;
        let r = probe(&mut g, out)?;
        Ok(g.value(r).item().unwrap())
    };
    let mut g = Graph::new(&s);
    let out = build(&mut g).unwrap();
    let r = probe(&mut g, out).unwrap();
    let analytic = g.backward(r).unwrap();
    let numeric = finite_difference_grad(objective, &s, EPS).unwrap();
    assert_eq!(analytic.len(), params.len(), "every parameter receives a gradient");
    max_relative_error(&analytic, &numeric)
}

macro_rules! grad_test {
    ($name:ident, [$(($id:expr, $shape:expr)),*], |$g:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check(&[$(($id, &$shape)),*], |$g: &mut Graph<'_>| $body);
            assert!(err < TOL, "relative error {err:e}");
        }
    };
}

grad_test!(matmul, [("a", [3, 4]), ("b", [4, 5])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.matmul(a, b)
});

grad_test!(matmul_shared_operand, [("a", [4, 4])], |g| {
    let a = g.param("a")?;
    g.matmul(a, a)
});

grad_test!(add, [("a", [3, 4]), ("b", [3, 4])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.add(a, b)
});

grad_test!(add_row, [("a", [3, 4]), ("b", [4])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.add_row(a, b)
});

grad_test!(mul_row, [("a", [3, 4]), ("w", [4])], |g| {
    let (a, w) = (g.param("a")?, g.param("w")?);
    g.mul_row(a, w)
});

grad_test!(mul, [("a", [3, 4]), ("b", [3, 4])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.mul(a, b)
});

grad_test!(scale_and_sum, [("a", [3, 4])], |g| {
    let a = g.param("a")?;
    let s = g.scale(a, -2.5);
    let m = g.mul(s, a)?;
    Ok(g.sum(m))
});

grad_test!(dot, [("a", [6]), ("b", [6])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.dot(a, b)
});

grad_test!(transpose, [("a", [3, 5])], |g| {
    let a = g.param("a")?;
    Ok(g.transpose(a))
});

grad_test!(reshape, [("a", [3, 4])], |g| {
    let a = g.param("a")?;
    let r = g.reshape(a, &[2, 6])?;
    let t = g.tanh(r);
    Ok(t)
});

grad_test!(gelu, [("a", [4, 5])], |g| {
    let a = g.param("a")?;
    Ok(g.gelu(a))
});

grad_test!(tanh, [("a", [4, 5])], |g| {
    let a = g.param("a")?;
    Ok(g.tanh(a))
});

grad_test!(softmax, [("a", [3, 6])], |g| {
    let a = g.param("a")?;
    Ok(g.softmax(a))
});

grad_test!(layer_norm, [("x", [4, 8]), ("gain", [8]), ("bias", [8])], |g| {
    let (x, gn, b) = (g.param("x")?, g.param("gain")?, g.param("bias")?);
    g.layer_norm(x, gn, b)
});

grad_test!(gather_rows_with_repeats, [("a", [5, 3])], |g| {
    let a = g.param("a")?;
    g.gather_rows(a, &[4, 0, 4, 2, 4])
});

grad_test!(concat_rows, [("a", [2, 3]), ("b", [3, 3])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.concat_rows(&[a, b, a])
});

grad_test!(concat_cols, [("a", [3, 2]), ("b", [3, 4])], |g| {
    let (a, b) = (g.param("a")?, g.param("b")?);
    g.concat_cols(&[b, a])
});

grad_test!(mean_rows, [("a", [4, 3])], |g| {
    let a = g.param("a")?;
    Ok(g.mean_rows(a))
});

grad_test!(cross_entropy, [("a", [5, 4])], |g| {
    let a = g.param("a")?;
    g.cross_entropy(a, &[0, 3, 1, 1, 2])
});

grad_test!(attention_ragged_segments, [("qkv", [9, 12])], |g| {
    let qkv = g.param("qkv")?;
    g.attention(qkv, &[(0, 4), (4, 1), (5, 4)], 2)
});

grad_test!(attention_single_head, [("qkv", [5, 9])], |g| {
    let qkv = g.param("qkv")?;
    g.attention(qkv, &[(0, 5)], 1)
});

grad_test!(two_layer_composite, [("x", [3, 4]), ("w1", [4, 6]), ("b1", [6]), ("w2", [6, 3])], |g| {
    let (x, w1, b1, w2) = (g.param("x")?, g.param("w1")?, g.param("b1")?, g.param("w2")?);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    g.cross_entropy(o, &[2, 0, 1])
});

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut s = store(&[("a", &[2, 2]), ("b", &[2, 2])]);
    s.set_trainable("b", false).unwrap();
    let mut g = Graph::new(&s);
    let (a, b) = (g.param("a").unwrap(), g.param("b").unwrap());
    let m = g.matmul(a, b).unwrap();
    let l = g.sum(m);
    let grads = g.backward(l).unwrap();
    assert!(grads.contains_key("a") && !grads.contains_key("b"));
}

#[test]
fn attention_rejects_non_contiguous_segments() {
    let s = store(&[("qkv", &[4, 6])]);
    let mut g = Graph::new(&s);
    let qkv = g.param("qkv").unwrap();
    assert!(g.attention(qkv, &[(0, 2), (3, 1)], 1).is_err());
    assert!(g.attention(qkv, &[(0, 4)], 4).is_err());
}

#[test]
fn backward_needs_a_scalar() {
    let s = store(&[("a", &[2, 2])]);
    let mut g = Graph::new(&s);
    let a = g.param("a").unwrap();
    assert!(g.backward(a).is_err());
}
