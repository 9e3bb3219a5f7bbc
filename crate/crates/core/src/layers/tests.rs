use super::*;
use crate::tensor::{uniform, Graph, Mask, Matrix, RngState};

fn rand(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    uniform(rows, cols, -1.0, 1.0, rng)
}

/// Attention written with explicit loops and no shared helpers.
fn loop_attention(q: &Matrix, k: &Matrix, v: &Matrix, d_model: usize) -> Matrix {
    let (n, m) = (q.rows(), k.rows());
    let mut out = Matrix::zeros(n, v.cols());
    for i in 0..n {
        let mut s = vec![0.0; m];
        for j in 0..m {
            for c in 0..q.cols() {
                s[j] += q.get(i, c) * k.get(j, c);
            }
            s[j] /= (d_model as f64).sqrt();
        }
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|e| (e - mx).exp()).sum();
        for j in 0..m {
            let a = (s[j] - mx).exp() / z;
            for c in 0..v.cols() {
                out.set(i, c, out.get(i, c) + a * v.get(j, c));
            }
        }
    }
    out
}

fn cfg(d: usize, h: usize) -> LayerConfig {
    LayerConfig::new(d, h)
}

#[test]
fn single_key_attention_returns_value_row() {
    let q = Matrix::from_rows(&[[0.3, -1.0]]).unwrap();
    let v = Matrix::from_rows(&[[2.0, 5.0]]).unwrap();
    let (out, w) = scaled_dot_attention(&q, &q, &v, &Mask::None, 2).unwrap();
    assert_eq!(w.weights, Matrix::scalar(1.0));
    assert_eq!(out, v);
}

#[test]
fn identical_keys_average_values() {
    let mut rng = RngState::new(1);
    let q = rand(3, 2, &mut rng);
    let k = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]).unwrap();
    let v = Matrix::from_rows(&[[1.0, 0.0], [2.0, 3.0], [6.0, -3.0]]).unwrap();
    let (out, w) = scaled_dot_attention(&q, &k, &v, &Mask::None, 2).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((w.weights.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((out.get(i, 0) - 3.0).abs() < 1e-14);
        assert!(out.get(i, 1).abs() < 1e-14);
    }
}

#[test]
fn dense_oracle_agreement() {
    let mut rng = RngState::new(2);
    let (q, k, v) = (
        rand(5, 4, &mut rng),
        rand(5, 4, &mut rng),
        rand(5, 4, &mut rng),
    );
    let (out, w) = scaled_dot_attention(&q, &k, &v, &Mask::None, 4).unwrap();
    assert!(out.max_abs_diff(&loop_attention(&q, &k, &v, 4)).unwrap() < 1e-12);
    let dense = crate::tensor::softmax_rows(&q.matmul_bt(&k).unwrap().scale(0.5))
        .matmul(&v)
        .unwrap();
    assert!(out.max_abs_diff(&dense).unwrap() < 1e-12);
    for i in 0..5 {
        assert!((w.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mask_shape_mismatch_is_dimension_error() {
    let m = Matrix::zeros(3, 2);
    let mask = Mask::explicit(2, 2, vec![true; 4]).unwrap();
    assert!(matches!(
        scaled_dot_attention(&m, &m, &m, &mask, 2),
        Err(crate::Error::Dimension { .. })
    ));
}

#[test]
fn one_head_is_projected_attention() {
    let mut rng = RngState::new(3);
    let p = AttentionParams::init(4, 1, &mut rng);
    let x = rand(3, 4, &mut rng);
    let q = x.matmul(&p.query[0]).unwrap();
    let k = x.matmul(&p.key[0]).unwrap();
    let v = x.matmul(&p.value[0]).unwrap();
    let (head, _) = scaled_dot_attention(&q, &k, &v, &Mask::None, 4).unwrap();
    let expect = head.matmul(&p.output).unwrap();
    assert_eq!(
        multi_head_attention(&x, &p, None, &Mask::None).unwrap(),
        expect
    );
}

#[test]
fn zero_output_projection_absorbs() {
    let mut rng = RngState::new(4);
    let mut p = AttentionParams::init(4, 2, &mut rng);
    p.output = Matrix::zeros(4, 4);
    let x = rand(3, 4, &mut rng);
    assert_eq!(
        multi_head_attention(&x, &p, None, &Mask::None).unwrap(),
        Matrix::zeros(3, 4)
    );
}

#[test]
fn multi_head_matches_loop_oracle() {
    let mut rng = RngState::new(5);
    let p = AttentionParams::init(4, 2, &mut rng);
    let x = rand(3, 4, &mut rng);
    let mem = rand(4, 4, &mut rng);
    for kv in [None, Some(&mem)] {
        let src = kv.unwrap_or(&x);
        let heads: Vec<Matrix> = (0..2)
            .map(|h| {
                loop_attention(
                    &x.matmul(&p.query[h]).unwrap(),
                    &src.matmul(&p.key[h]).unwrap(),
                    &src.matmul(&p.value[h]).unwrap(),
                    4,
                )
            })
            .collect();
        let expect = Matrix::concat_cols(&heads.iter().collect::<Vec<_>>())
            .unwrap()
            .matmul(&p.output)
            .unwrap();
        let got = multi_head_attention(&x, &p, kv, &Mask::None).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }
}

fn scalar_ffn(activation: Activation) -> FfnParams {
    FfnParams {
        w1: Matrix::scalar(1.0),
        b1: Matrix::scalar(0.0),
        w2: Matrix::scalar(1.0),
        b2: Matrix::scalar(0.0),
        activation,
    }
}

#[test]
fn relu_ffn_gates() {
    let p = scalar_ffn(Activation::Relu);
    assert_eq!(
        ffn_forward(&Matrix::scalar(-3.0), &p).unwrap(),
        Matrix::scalar(0.0)
    );
    assert_eq!(
        ffn_forward(&Matrix::scalar(2.0), &p).unwrap(),
        Matrix::scalar(2.0)
    );
}

#[test]
fn ffn_commutes_with_row_concatenation() {
    let mut rng = RngState::new(6);
    let p = FfnParams::init(4, 8, Activation::Relu, &mut rng);
    let (a, b) = (rand(2, 4, &mut rng), rand(3, 4, &mut rng));
    let joint = ffn_forward(&Matrix::vstack(&[&a, &b]).unwrap(), &p).unwrap();
    let split =
        Matrix::vstack(&[&ffn_forward(&a, &p).unwrap(), &ffn_forward(&b, &p).unwrap()]).unwrap();
    assert_eq!(joint, split);
}

#[test]
fn zero_layers_are_identity() {
    let mut rng = RngState::new(7);
    let x = rand(4, 4, &mut rng);
    let mem = rand(3, 4, &mut rng);
    for kind in [
        LayerKind::Transformer,
        LayerKind::Macaron,
        LayerKind::MacaronDecoder,
        LayerKind::TransformerDecoder,
    ] {
        let p = LayerParams::zeros(kind, &cfg(4, 2)).unwrap();
        let out = layer_forward(&x, &p, kind.is_decoder().then_some(&mem)).unwrap();
        assert_eq!(out, x, "{kind}");
    }
}

#[test]
fn transformer_with_zero_ffn_is_attention_residual() {
    let mut rng = RngState::new(8);
    let mut p = LayerParams::init(LayerKind::Transformer, &cfg(4, 2), &mut rng).unwrap();
    p.ffn = FfnParams::zeros(4, 16, Activation::Relu);
    let x = rand(3, 4, &mut rng);
    let expect = x
        .add(&multi_head_attention(&x, &p.self_attention, None, &Mask::None).unwrap())
        .unwrap();
    assert_eq!(transformer_layer_forward(&x, &p).unwrap(), expect);
}

#[test]
fn macaron_with_tied_linear_ffn() {
    let mut rng = RngState::new(9);
    let mut c = cfg(4, 1);
    c.activation = Activation::Identity;
    let mut p = LayerParams::init(LayerKind::Macaron, &c, &mut rng).unwrap();
    p.self_attention = AttentionParams::zeros(4, 1);
    p.ffn.b1 = rand(1, 8, &mut rng);
    p.ffn.b2 = rand(1, 4, &mut rng);
    p.ffn_up = Some(p.ffn.clone());
    let x = rand(3, 4, &mut rng);
    let f = |m: &Matrix| ffn_forward(m, &p.ffn).unwrap();
    let x_half = x.add(&f(&x).scale(0.5)).unwrap();
    let expect = x_half.add(&f(&x_half).scale(0.5)).unwrap();
    let got = macaron_layer_forward(&x, &p).unwrap();
    assert!(got.max_abs_diff(&expect).unwrap() < 1e-15);
}

#[test]
fn wrong_kind_is_contract_error() {
    let t = LayerParams::zeros(LayerKind::Transformer, &cfg(4, 1)).unwrap();
    let m = LayerParams::zeros(LayerKind::Macaron, &cfg(4, 1)).unwrap();
    let x = Matrix::zeros(2, 4);
    assert!(matches!(
        macaron_layer_forward(&x, &t),
        Err(crate::Error::Contract(_))
    ));
    assert!(matches!(
        transformer_layer_forward(&x, &m),
        Err(crate::Error::Contract(_))
    ));
    assert!(matches!(
        macaron_decoder_layer_forward(&x, &m, Some(&x)),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn decoder_needs_encoder_output() {
    let p = LayerParams::zeros(LayerKind::MacaronDecoder, &cfg(4, 1)).unwrap();
    assert!(matches!(
        macaron_decoder_layer_forward(&Matrix::zeros(2, 4), &p, None),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn decoder_is_causal() {
    let mut rng = RngState::new(10);
    let mut p = LayerParams::init(LayerKind::MacaronDecoder, &cfg(4, 2), &mut rng).unwrap();
    p.ffn = FfnParams::zeros(4, 8, Activation::Relu);
    p.ffn_up = Some(FfnParams::zeros(4, 8, Activation::Relu));
    let x = rand(5, 4, &mut rng);
    let mem = rand(3, 4, &mut rng);
    let base = macaron_decoder_layer_forward(&x, &p, Some(&mem)).unwrap();
    for i in 0..5 {
        let mut y = x.clone();
        for r in i + 1..5 {
            for c in 0..4 {
                y.set(r, c, y.get(r, c) + 0.7);
            }
        }
        let out = macaron_decoder_layer_forward(&y, &p, Some(&mem)).unwrap();
        for r in 0..=i {
            assert_eq!(out.row(r), base.row(r), "row {r} leaked from rows > {i}");
        }
    }
}

#[test]
fn decoder_without_cross_attention_is_causal_macaron() {
    let mut rng = RngState::new(11);
    let mut dec = LayerParams::init(LayerKind::MacaronDecoder, &cfg(4, 2), &mut rng).unwrap();
    dec.cross_attention = Some(AttentionParams::zeros(4, 2));
    let enc = LayerParams {
        kind: LayerKind::Macaron,
        cross_attention: None,
        ..dec.clone()
    };
    let x = rand(4, 4, &mut rng);
    let mem = rand(2, 4, &mut rng);
    let got = macaron_decoder_layer_forward(&x, &dec, Some(&mem)).unwrap();

    let mut g = Graph::new();
    let pv = enc.map(|m| g.constant(m.clone()));
    let xv = g.constant(x.clone());
    let ctx = LayerContext {
        seq_len: 4,
        self_mask: Mask::Causal,
        memory: None,
    };
    let out = layer_on_graph(&mut g, &pv, xv, &ctx).unwrap();
    assert_eq!(&got, g.value(out));
}

#[test]
fn half_step_is_not_foldable() {
    let mut rng = RngState::new(12);
    let p = LayerParams::init(LayerKind::Macaron, &cfg(4, 1), &mut rng).unwrap();
    let mut doubled = p.clone();
    doubled.ffn.w2 = doubled.ffn.w2.scale(2.0);
    doubled.ffn.b2 = rand(1, 4, &mut rng);
    let mut base = p.clone();
    base.ffn.b2 = doubled.ffn.b2.clone();
    doubled.ffn.b2 = doubled.ffn.b2.scale(2.0);
    let x = rand(3, 4, &mut rng);
    let a = macaron_layer_forward(&x, &base).unwrap();
    let b = macaron_layer_forward(&x, &doubled).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
}

#[test]
fn layers_do_not_mix_batched_sequences() {
    let mut rng = RngState::new(13);
    let p = LayerParams::init(LayerKind::MacaronDecoder, &cfg(4, 2), &mut rng).unwrap();
    let (x1, x2) = (rand(3, 4, &mut rng), rand(3, 4, &mut rng));
    let (m1, m2) = (rand(2, 4, &mut rng), rand(2, 4, &mut rng));
    let mut g = Graph::new();
    let pv = p.map(|m| g.constant(m.clone()));
    let xv = g.constant(Matrix::vstack(&[&x1, &x2]).unwrap());
    let mv = g.constant(Matrix::vstack(&[&m1, &m2]).unwrap());
    let ctx = LayerContext::for_kind(
        p.kind,
        3,
        Some(Memory {
            value: mv,
            seq_len: 2,
        }),
    );
    let out = layer_on_graph(&mut g, &pv, xv, &ctx).unwrap();
    let expect = Matrix::vstack(&[
        &layer_forward(&x1, &p, Some(&m1)).unwrap(),
        &layer_forward(&x2, &p, Some(&m2)).unwrap(),
    ])
    .unwrap();
    assert!(g.value(out).max_abs_diff(&expect).unwrap() < 1e-14);
}

#[test]
fn positions_are_bounded_and_distinct() {
    let pe = sinusoidal_positions(10_000, 8).unwrap();
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let mut rows: Vec<Vec<u64>> = (0..pe.rows())
        .map(|r| pe.row(r).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), 10_000);
}

#[test]
fn causal_head_weights_are_lower_triangular() {
    let mut rng = RngState::new(14);
    let p = AttentionParams::init(4, 2, &mut rng);
    let x = rand(5, 4, &mut rng);
    for w in head_weights(&x, &p, None, &Mask::Causal).unwrap() {
        for i in 0..5 {
            assert!((w.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in i + 1..5 {
                assert_eq!(w.weights.get(i, j), 0.0);
                assert_eq!(w.scores.get(i, j), f64::NEG_INFINITY);
            }
        }
    }
}
