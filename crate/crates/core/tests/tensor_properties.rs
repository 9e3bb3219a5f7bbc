use macaron_core::tensor::{
    finite_diff_grad, relative_error, softmax_rows, uniform, Blocks, Graph, Mask, Matrix, RngState,
    Var,
};
use proptest::prelude::*;

fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
    uniform(rows, cols, -1.0, 1.0, &mut RngState::new(seed))
}

/// Reverse-mode gradient of `Σ f(x) ⊙ W` against central differences.
fn check(x: &Matrix, seed: u64, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let out_shape = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let o = f(&mut g, v);
        g.value(o).shape()
    };
    let w = rand(out_shape.0, out_shape.1, seed ^ 0x5eed);
    let loss = |g: &mut Graph, v: Var| {
        let o = f(g, v);
        let wv = g.constant(w.clone());
        let p = g.mul(o, wv).unwrap();
        g.sum(p)
    };
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let l = loss(&mut g, v);
    let analytic = g.backward(l).unwrap().wrt(v);
    let numeric = finite_diff_grad(
        |m| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let l = loss(&mut g, v);
            g.value(l).get(0, 0)
        },
        x,
        1e-5,
    );
    relative_error(&analytic, &numeric)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = rand(rows, cols, seed).scale(10.0);
        let s = softmax_rows(&x);
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift));
        prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_is_associative(n in 1usize..7, k in 1usize..7, m in 1usize..7, p in 1usize..7, seed in any::<u64>()) {
        let a = rand(n, k, seed);
        let b = rand(k, m, seed.wrapping_add(1));
        let c = rand(m, p, seed.wrapping_add(2));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.max_abs().max(1.0);
        prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-10);
    }

    #[test]
    fn elementwise_gradients(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let x = rand(rows, cols, seed);
        prop_assert!(check(&x, seed, |g, v| g.tanh(v)) < 1e-5);
        prop_assert!(check(&x, seed, |g, v| g.mul(v, v).unwrap()) < 1e-5);
        prop_assert!(check(&x, seed, |g, v| g.scale(v, -2.5)) < 1e-5);
        prop_assert!(check(&x, seed, |g, v| g.softmax_rows(v)) < 1e-5);
        prop_assert!(check(&x, seed, |g, v| g.add(v, v).unwrap()) < 1e-5);
    }

    #[test]
    fn product_gradients(n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let x = rand(n, k, seed);
        let b = rand(k, m, seed.wrapping_add(7));
        let bt = rand(m, k, seed.wrapping_add(8));
        let row = rand(1, k, seed.wrapping_add(9));
        let errors = [
            check(&x, seed, |g, v| { let c = g.constant(b.clone()); g.matmul(v, c).unwrap() }),
            check(&b, seed, |g, v| { let c = g.constant(x.clone()); g.matmul(c, v).unwrap() }),
            check(&x, seed, |g, v| { let c = g.constant(bt.clone()); g.matmul_bt(v, c).unwrap() }),
            check(&x, seed, |g, v| { let c = g.constant(row.clone()); g.add_row(v, c).unwrap() }),
            check(&row, seed, |g, v| { let c = g.constant(x.clone()); g.add_row(c, v).unwrap() }),
        ];
        for e in errors {
            prop_assert!(e < 1e-5, "relative error {}", e);
        }
    }

    #[test]
    fn normalization_and_attention_gradients(n in 2usize..5, seed in any::<u64>()) {
        let x = rand(2 * n, 4, seed);
        let gain = rand(1, 4, seed.wrapping_add(3));
        let bias = rand(1, 4, seed.wrapping_add(4));
        let norm_err = check(&x, seed, |g, v| {
            let (a, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
            g.layer_norm(v, a, b).unwrap()
        });
        prop_assert!(norm_err < 1e-5, "layer norm error {}", norm_err);
        let blocks = Blocks { q_len: n, kv_len: n };
        for mask in [Mask::None, Mask::Causal] {
            let err = check(&x, seed, |g, v| {
                let s = g.scale(v, 0.7);
                g.attention(v, s, v, blocks, &mask, 0.5).unwrap()
            });
            prop_assert!(err < 1e-5, "attention error {}", err);
        }
    }

    #[test]
    fn seeded_draws_repeat(seed in any::<u64>()) {
        let a = rand(3, 4, seed);
        let b = rand(3, 4, seed);
        prop_assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
