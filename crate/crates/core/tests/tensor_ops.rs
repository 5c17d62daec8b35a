use esc_core::tensor::{kernels, AttnMask, AttnSpec, Graph, RngState, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut RngState::new(seed).rng())
}

/// Central finite differences of `f` with respect to every entry of every
/// input, compared with the tape's gradients.
fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.leaf(v.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let h = 1e-5;
    for (n, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap().data().to_vec();
        for i in 0..inputs[n].len() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            assert!(
                rel < 1e-4,
                "input {n} entry {i}: analytic {a} numeric {numeric} rel {rel}"
            );
        }
    }
}

/// Weighted sum with fixed, irregular weights so every output entry matters.
fn probe(g: &mut Graph, x: Var) -> Var {
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = g.leaf(Tensor::new(shape, w).unwrap());
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
    let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for (x, y) in g.value(c).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn identity_matmul_is_exact() {
    let a = random(&[4, 4], 9);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new();
    let (e, av) = (g.leaf(eye), g.leaf(a.clone()));
    let c = g.matmul(e, av).unwrap();
    assert_eq!(g.value(c), &a);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.softmax(x, 0).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (got, v) in g.value(s).data().iter().zip([1.0f64, 2.0, 3.0]) {
        assert!((got - v.exp() / denom).abs() < 1e-12);
    }
    let expected = [0.09003, 0.24473, 0.66524];
    for (got, e) in g.value(s).data().iter().zip(expected) {
        assert!((got - e).abs() < 1e-5);
    }

    let x = g.leaf(t(&[2], &[1000.0, 1000.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn softmax_along_middle_axis() {
    let x = random(&[2, 3, 2], 4);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let s = g.softmax(v, 1).unwrap();
    let out = g.value(s).data();
    for o in 0..2 {
        for i in 0..2 {
            let idx = |a: usize| (o * 3 + a) * 2 + i;
            let total: f64 = (0..3).map(|a| out[idx(a)]).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let denom: f64 = (0..3).map(|a| x.data()[idx(a)].exp()).sum();
            assert!((out[idx(0)] - x.data()[idx(0)].exp() / denom).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.leaf(Tensor::filled(&[3], 1.0));
    let bias = g.leaf(Tensor::zeros(&[3]));
    let x = g.leaf(t(&[1, 3], &[2.0, 2.0, 2.0]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let gain = g.leaf(Tensor::filled(&[2], 1.0));
    let bias = g.leaf(Tensor::zeros(&[2]));
    let x = g.leaf(t(&[1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let out = g.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);

    let gain = g.leaf(Tensor::filled(&[16], 1.0));
    let bias = g.leaf(Tensor::zeros(&[16]));
    let x = g.leaf(random(&[1, 16], 5));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let out = g.value(y).data();
    let mean = out.iter().sum::<f64>() / 16.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn gelu_examples() {
    assert_eq!(kernels::gelu(0.0), 0.0);
    assert!((kernels::gelu(10.0) - 10.0).abs() < 1e-12);
    // scalar evaluation of 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3))) at x=1
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let expected = 0.5 * (1.0 + (c * 1.044715f64).tanh());
    assert!((kernels::gelu(1.0) - expected).abs() < 1e-15);
    assert!((kernels::gelu(1.0) - 0.841_192).abs() < 1e-6);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 4]));
    let l = g.cross_entropy(x, &[2], usize::MAX, 0.0).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let x = g.leaf(t(&[1, 3], &[0.0, 800.0, 0.0]));
    let l = g.cross_entropy(x, &[1], usize::MAX, 0.0).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let logits = random(&[2, 3], 11);
    let x = g.leaf(logits.clone());
    let l = g.cross_entropy(x, &[2, 0], usize::MAX, 0.0).unwrap();
    let oracle = |row: &[f64], t: usize| {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[t].exp() / denom).ln()
    };
    let expected = (oracle(logits.row(0), 2) + oracle(logits.row(1), 0)) / 2.0;
    assert!((g.value(l).item() - expected).abs() < 1e-12);

    // pad rows are excluded from the mean
    let l = g.cross_entropy(x, &[2, 0], 0, 0.0).unwrap();
    assert!((g.value(l).item() - oracle(logits.row(0), 2)).abs() < 1e-12);

    assert!(g.cross_entropy(x, &[3, 0], usize::MAX, 0.0).is_err());
}

#[test]
fn backward_examples() {
    let w = random(&[2, 3], 3);
    let mut g = Graph::new();
    let v = g.param(0, &w);
    let s = g.sum(v);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&x| x == 1.0));

    let mut g = Graph::new();
    let v = g.param(0, &w);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gr, x) in g.grad(v).unwrap().data().iter().zip(w.data()) {
        assert_eq!(*gr, 2.0 * x);
    }

    let mut g = Graph::new();
    let v = g.leaf(w.clone());
    assert!(g.backward(v).is_err());
}

#[test]
fn backward_populates_every_node() {
    let mut g = Graph::new();
    let a = g.leaf(random(&[2, 2], 1));
    let unused = g.leaf(random(&[3], 2));
    let s = g.sum(a);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gradients_of_elementwise_ops() {
    let a = random(&[2, 3], 21);
    let b = random(&[2, 3], 22);
    grad_check(&[a.clone(), b.clone()], |g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let y = g.sub(x, v[1]).unwrap();
        let z = g.mul(y, v[1]).unwrap();
        let z = g.scale(z, 0.7);
        probe(g, z)
    });
    grad_check(&[a.clone()], |g, v| {
        let x = g.gelu(v[0]);
        let y = g.sigmoid(x);
        probe(g, y)
    });
    grad_check(&[a, random(&[3], 23)], |g, v| {
        let x = g.add_bias(v[0], v[1]).unwrap();
        probe(g, x)
    });
}

#[test]
fn gradients_of_matmul_softmax_layer_norm() {
    grad_check(&[random(&[3, 4], 31), random(&[4, 2], 32)], |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        probe(g, c)
    });
    grad_check(&[random(&[2, 3, 2], 33)], |g, v| {
        let s = g.softmax(v[0], 1).unwrap();
        probe(g, s)
    });
    grad_check(
        &[random(&[3, 5], 34), random(&[5], 35), random(&[5], 36)],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            probe(g, y)
        },
    );
}

#[test]
fn gradients_of_indexing_ops() {
    grad_check(&[random(&[5, 3], 41)], |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        let r = g.gather_rows(e, &[3, 3, 1]).unwrap();
        probe(g, r)
    });
    grad_check(&[random(&[2, 3], 42), random(&[2, 2], 43)], |g, v| {
        let c = g.concat_cols(v[0], v[1]).unwrap();
        probe(g, c)
    });
    grad_check(&[random(&[3, 4], 44)], |g, v| {
        g.cross_entropy(v[0], &[1, 0, 3], 0, 0.1).unwrap()
    });
}

#[test]
fn gradients_of_masked_attention() {
    let spec = AttnSpec {
        batch: 2,
        tq: 3,
        tk: 3,
        heads: 2,
        dk: 2,
        dv: 3,
        scale: 0.5f64.sqrt(),
        mask: AttnMask {
            key_lens: Some(vec![3, 2]),
            causal: true,
            dense: None,
        },
    };
    grad_check(
        &[
            random(&[6, 4], 51),
            random(&[6, 4], 52),
            random(&[6, 6], 53),
        ],
        move |g, v| {
            let o = g.attention(v[0], v[1], v[2], spec.clone()).unwrap();
            probe(g, o)
        },
    );
}

#[test]
fn attention_rejects_bad_mask() {
    let mut g = Graph::new();
    let q = g.leaf(Tensor::zeros(&[2, 2]));
    let spec = AttnSpec {
        batch: 1,
        tq: 2,
        tk: 2,
        heads: 1,
        dk: 2,
        dv: 2,
        scale: 1.0,
        mask: AttnMask {
            dense: Some(vec![true; 3]),
            ..AttnMask::default()
        },
    };
    assert!(g.attention(q, q, q, spec).is_err());
}

#[test]
fn forward_ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.leaf(random(&[4, 6], 61));
        let b = g.leaf(random(&[6, 6], 62));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let gl = g.gelu(s);
        g.value(gl).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_is_identity_without_rng_and_seeded_with_it() {
    let x = random(&[4, 4], 70);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    assert_eq!(g.dropout(v, 0.5), v);

    let run = || {
        let mut g = Graph::new().with_dropout_rng(RngState::new(3).rng());
        let v = g.leaf(x.clone());
        let d = g.dropout(v, 0.5);
        g.value(d).clone()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.data().iter().any(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..6, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut x = random(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 10.0 + shift);
        let mut g = Graph::new();
        let v = g.leaf(x);
        let s = g.softmax(v, 1).unwrap();
        let out = g.value(s);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
