//! Forward passes of attention, FFN and whole layers.
//!
//! Everything is built on the taped [`Graph`]; the plain-matrix entry points
//! record constants only, so both paths perform identical arithmetic.

use crate::error::{Error, Result};
use crate::layers::params::{
    Activation, AttentionParams, FfnParams, LayerKind, LayerParams, Sublayer,
};
use crate::tensor::attention::attention_forward;
use crate::tensor::{Blocks, Graph, Mask, Matrix, Var};

/// Score scale `1/√d_model` used by every attention sub-layer.
pub fn attention_scale(d_model: usize) -> f64 {
    1.0 / (d_model as f64).sqrt()
}

/// Pre-softmax scores and attention weights of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// Masked entries are `-inf`.
    pub scores: Matrix,
    /// Row-stochastic; masked entries are exactly zero.
    pub weights: Matrix,
}

/// `softmax(Q Kᵀ/√d_model + mask) · V` for a single sequence.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Mask,
    d_model: usize,
) -> Result<(Matrix, AttentionWeights)> {
    let mut fwd = attention_forward(
        q,
        k,
        v,
        Blocks::single(q, k),
        mask,
        attention_scale(d_model),
    )?;
    let weights = AttentionWeights {
        scores: fwd.scores.remove(0),
        weights: fwd.probs.remove(0),
    };
    Ok((fwd.output, weights))
}

/// Multi-head attention on the tape. `x` holds query rows, `kv` key/value rows,
/// both stacked in blocks described by `blocks`.
pub fn attention_on_graph(
    g: &mut Graph,
    x: Var,
    kv: Var,
    p: &AttentionParams<Var>,
    blocks: Blocks,
    mask: &Mask,
) -> Result<Var> {
    let heads = p.heads();
    if heads == 0 || p.key.len() != heads || p.value.len() != heads {
        return Err(Error::contract(
            "attention needs equal, non-zero head counts",
        ));
    }
    let scale = attention_scale(g.value(x).cols());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.matmul(x, p.query[h])?;
        let k = g.matmul(kv, p.key[h])?;
        let v = g.matmul(kv, p.value[h])?;
        outs.push(g.attention(q, k, v, blocks, mask, scale)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    g.matmul(cat, p.output)
}

/// `σ(x W₁ + b₁) W₂ + b₂`, row by row.
pub fn ffn_on_graph(g: &mut Graph, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = match p.activation {
        Activation::Relu => g.relu(h),
        Activation::Identity => h,
    };
    let o = g.matmul(h, p.w2)?;
    g.add_row(o, p.b2)
}

/// Encoder output consumed by encoder-decoder attention.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub value: Var,
    /// Rows per sequence in `value`.
    pub seq_len: usize,
}

/// Sequence layout of a layer input.
#[derive(Clone, Debug)]
pub struct LayerContext {
    /// Rows per sequence; the input stacks `rows / seq_len` sequences.
    pub seq_len: usize,
    pub self_mask: Mask,
    pub memory: Option<Memory>,
}

impl LayerContext {
    /// Unmasked self-attention for encoders, causal for decoders.
    pub fn for_kind(kind: LayerKind, seq_len: usize, memory: Option<Memory>) -> Self {
        Self {
            seq_len,
            self_mask: if kind.is_decoder() {
                Mask::Causal
            } else {
                Mask::None
            },
            memory,
        }
    }
}

/// Output of one sub-layer before its residual addition (and before the `½`
/// of a Macaron FFN).
pub fn sublayer_on_graph(
    g: &mut Graph,
    p: &LayerParams<Var>,
    index: usize,
    x: Var,
    ctx: &LayerContext,
) -> Result<Var> {
    let sub = *p
        .kind
        .sublayers()
        .get(index)
        .ok_or_else(|| Error::contract(format!("{} has no sub-layer {index}", p.kind)))?;
    let input = match p.norms.get(index) {
        Some(n) => g.layer_norm(x, n.gain, n.bias)?,
        None => x,
    };
    let self_blocks = Blocks {
        q_len: ctx.seq_len,
        kv_len: ctx.seq_len,
    };
    match sub {
        Sublayer::SelfAttention => attention_on_graph(
            g,
            input,
            input,
            &p.self_attention,
            self_blocks,
            &ctx.self_mask,
        ),
        Sublayer::CrossAttention => {
            let mem = ctx.memory.ok_or_else(|| {
                Error::contract(format!("{} layer needs the encoder output", p.kind))
            })?;
            let cross = p
                .cross_attention
                .as_ref()
                .ok_or_else(|| Error::contract("missing encoder-decoder attention parameters"))?;
            let blocks = Blocks {
                q_len: ctx.seq_len,
                kv_len: mem.seq_len,
            };
            attention_on_graph(g, input, mem.value, cross, blocks, &Mask::None)
        }
        Sublayer::Ffn | Sublayer::FfnDown => ffn_on_graph(g, input, &p.ffn),
        Sublayer::FfnUp => {
            let up = p
                .ffn_up
                .as_ref()
                .ok_or_else(|| Error::contract("missing second FFN parameters"))?;
            ffn_on_graph(g, input, up)
        }
    }
}

/// Residual weight of a sub-layer: `½` for the Macaron FFNs, else `1`.
pub fn residual_weight(sub: Sublayer) -> f64 {
    match sub {
        Sublayer::FfnDown | Sublayer::FfnUp => 0.5,
        _ => 1.0,
    }
}

/// One full layer: `x ← x + w·sublayer(x)` for each sub-layer in order.
pub fn layer_on_graph(
    g: &mut Graph,
    p: &LayerParams<Var>,
    x: Var,
    ctx: &LayerContext,
) -> Result<Var> {
    let rows = g.value(x).rows();
    if ctx.seq_len == 0 || !rows.is_multiple_of(ctx.seq_len) {
        return Err(Error::contract(format!(
            "{rows} rows do not split into sequences of {}",
            ctx.seq_len
        )));
    }
    let mut h = x;
    for (i, &sub) in p.kind.sublayers().iter().enumerate() {
        let delta = sublayer_on_graph(g, p, i, h, ctx)?;
        let w = residual_weight(sub);
        let delta = if w == 1.0 { delta } else { g.scale(delta, w) };
        h = g.add(h, delta)?;
    }
    Ok(h)
}

/// Plain-matrix evaluation helper: records `params` as constants.
struct ConstGraph {
    g: Graph,
    p: LayerParams<Var>,
}

impl ConstGraph {
    fn new(params: &LayerParams) -> Result<Self> {
        params.check_structure()?;
        let mut g = Graph::new();
        let p = params.map(|m| g.constant(m.clone()));
        Ok(Self { g, p })
    }

    fn context(&mut self, x: &Matrix, memory: Option<&Matrix>) -> LayerContext {
        let memory = memory.map(|m| Memory {
            value: self.g.constant(m.clone()),
            seq_len: m.rows(),
        });
        LayerContext::for_kind(self.p.kind, x.rows(), memory)
    }
}

/// Multi-head attention of a single sequence. `kv` defaults to `x`.
pub fn multi_head_attention(
    x: &Matrix,
    params: &AttentionParams,
    kv: Option<&Matrix>,
    mask: &Mask,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let p = params.map(&mut |m| g.constant(m.clone()));
    let xv = g.constant(x.clone());
    let kvv = match kv {
        Some(m) => g.constant(m.clone()),
        None => xv,
    };
    let blocks = Blocks::single(x, kv.unwrap_or(x));
    let out = attention_on_graph(&mut g, xv, kvv, &p, blocks, mask)?;
    Ok(g.value(out).clone())
}

/// Attention weights of every head for a single sequence.
pub fn head_weights(
    x: &Matrix,
    params: &AttentionParams,
    kv: Option<&Matrix>,
    mask: &Mask,
) -> Result<Vec<AttentionWeights>> {
    let kv = kv.unwrap_or(x);
    (0..params.heads())
        .map(|h| {
            let q = x.matmul(&params.query[h])?;
            let k = kv.matmul(&params.key[h])?;
            let v = kv.matmul(&params.value[h])?;
            scaled_dot_attention(&q, &k, &v, mask, x.cols()).map(|(_, w)| w)
        })
        .collect()
}

pub fn ffn_forward(x: &Matrix, params: &FfnParams) -> Result<Matrix> {
    let mut g = Graph::new();
    let p = params.map(&mut |m| g.constant(m.clone()));
    let xv = g.constant(x.clone());
    let out = ffn_on_graph(&mut g, xv, &p)?;
    Ok(g.value(out).clone())
}

/// One sub-layer's output on a single sequence, before residual and `½`.
pub fn sublayer_output(
    params: &LayerParams,
    index: usize,
    x: &Matrix,
    memory: Option<&Matrix>,
) -> Result<Matrix> {
    let mut cg = ConstGraph::new(params)?;
    let ctx = cg.context(x, memory);
    let xv = cg.g.constant(x.clone());
    let out = sublayer_on_graph(&mut cg.g, &cg.p, index, xv, &ctx)?;
    Ok(cg.g.value(out).clone())
}

/// Any layer kind on a single sequence. Decoder kinds apply a causal
/// self-attention mask and require `memory`.
pub fn layer_forward(x: &Matrix, params: &LayerParams, memory: Option<&Matrix>) -> Result<Matrix> {
    if params.kind.is_decoder() && memory.is_none() {
        return Err(Error::contract(format!(
            "{} layer needs the encoder output",
            params.kind
        )));
    }
    let mut cg = ConstGraph::new(params)?;
    let ctx = cg.context(x, memory);
    let xv = cg.g.constant(x.clone());
    let out = layer_on_graph(&mut cg.g, &cg.p, xv, &ctx)?;
    Ok(cg.g.value(out).clone())
}

fn expect_kind(params: &LayerParams, kind: LayerKind) -> Result<()> {
    if params.kind == kind {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "expected {kind} parameters, got {}",
            params.kind
        )))
    }
}

/// `x̃ = x + MHA(x)`, `out = x̃ + FFN(x̃)`.
pub fn transformer_layer_forward(x: &Matrix, params: &LayerParams) -> Result<Matrix> {
    expect_kind(params, LayerKind::Transformer)?;
    layer_forward(x, params, None)
}

/// `x̃ = x + ½FFN_down(x)`, `x̂ = x̃ + MHA(x̃)`, `out = x̂ + ½FFN_up(x̂)`.
pub fn macaron_layer_forward(x: &Matrix, params: &LayerParams) -> Result<Matrix> {
    expect_kind(params, LayerKind::Macaron)?;
    layer_forward(x, params, None)
}

/// Half FFN, causal self-attention, encoder-decoder attention, half FFN.
pub fn macaron_decoder_layer_forward(
    x: &Matrix,
    params: &LayerParams,
    encoder_output: Option<&Matrix>,
) -> Result<Matrix> {
    expect_kind(params, LayerKind::MacaronDecoder)?;
    layer_forward(x, params, encoder_output)
}
