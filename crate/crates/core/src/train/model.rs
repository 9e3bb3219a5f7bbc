//! Token models: shared embedding, sinusoidal positions, a stack of layers.
//!
//! Copy uses an encoder with a per-position classifier; reverse adds a decoder
//! with causal self-attention and encoder-decoder attention. Logits are
//! `h · Eᵀ` with the input embedding `E`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    layer_on_graph, sinusoidal_positions, LayerConfig, LayerContext, LayerKind, LayerParams, Memory,
};
use crate::tensor::{Graph, Matrix, RngState, Var};
use crate::train::task::BOS;

/// Standard deviation of the embedding initialization. Small enough that the
/// untrained model starts near uniform predictions.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    Macaron,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::Transformer, Arch::Macaron];

    pub fn label(self) -> &'static str {
        match self {
            Arch::Transformer => "transformer",
            Arch::Macaron => "macaron",
        }
    }

    pub fn encoder_kind(self) -> LayerKind {
        match self {
            Arch::Transformer => LayerKind::Transformer,
            Arch::Macaron => LayerKind::Macaron,
        }
    }

    pub fn decoder_kind(self) -> LayerKind {
        match self {
            Arch::Transformer => LayerKind::TransformerDecoder,
            Arch::Macaron => LayerKind::MacaronDecoder,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Arch::Transformer),
            "macaron" => Ok(Arch::Macaron),
            _ => Err(Error::config(format!(
                "unknown architecture '{s}' (expected transformer or macaron)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Layers in the encoder, and in the decoder when present.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Inner FFN width per layer. A Macaron layer splits it evenly across its
    /// two FFNs, so both architectures always have equal weight counts.
    /// Defaults to `4 · d_model`.
    pub d_ff: Option<usize>,
    pub decoder: bool,
    pub layer_norm: bool,
}

impl ModelConfig {
    /// `L = 2`, `d_model = 32`, `H = 4`.
    pub fn small(arch: Arch, decoder: bool) -> Self {
        Self {
            arch,
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: None,
            decoder,
            layer_norm: false,
        }
    }

    pub fn with_arch(&self, arch: Arch) -> Self {
        Self {
            arch,
            ..self.clone()
        }
    }

    /// Per-layer shape, with the FFN width resolved for this architecture.
    pub fn layer_config(&self) -> LayerConfig {
        let mut cfg = LayerConfig::new(self.d_model, self.heads);
        cfg.layer_norm = self.layer_norm;
        cfg.d_ff = self.d_ff.map(|w| match self.arch {
            Arch::Transformer => w,
            Arch::Macaron => w / 2,
        });
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("a model needs at least one layer"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!(
                "sinusoidal positions need an even d_model, got {}",
                self.d_model
            )));
        }
        if let Some(w) = self.d_ff {
            if w < 2 || w % 2 != 0 {
                return Err(Error::config(format!(
                    "d_ff must be even and at least 2 so it splits across two FFNs, got {w}"
                )));
            }
        }
        self.layer_config().validate()
    }
}

/// Every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Matrix> {
    /// `V x d_model`, shared by input lookup and output logits.
    pub embedding: T,
    pub encoder: Vec<LayerParams<T>>,
    pub decoder: Vec<LayerParams<T>>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: f(&self.embedding),
            encoder: self.encoder.iter().map(|p| p.map(&mut f)).collect(),
            decoder: self.decoder.iter().map(|p| p.map(&mut f)).collect(),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (prefix, stack) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (l, p) in stack.iter().enumerate() {
                out.extend(
                    p.tensors()
                        .into_iter()
                        .map(|(n, m)| (format!("{prefix}.{l}.{n}"), m)),
                );
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (prefix, stack) in [("enc", &mut self.encoder), ("dec", &mut self.decoder)] {
            for (l, p) in stack.iter_mut().enumerate() {
                out.extend(
                    p.tensors_mut()
                        .into_iter()
                        .map(|(n, m)| (format!("{prefix}.{l}.{n}"), m)),
                );
            }
        }
        out
    }
}

/// Scalar parameter counts of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelCount {
    pub embedding: usize,
    /// Attention projections and FFN weight matrices.
    pub weights: usize,
    pub biases: usize,
    pub norm: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: usize,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: &ModelConfig, vocab: usize, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        if vocab < 3 {
            return Err(Error::config(format!("vocabulary too small: {vocab}")));
        }
        let embedding = Matrix::from_fn(vocab, config.d_model, |_, _| {
            EMBEDDING_INIT_STD * rng.normal()
        });
        let lc = config.layer_config();
        let encoder = (0..config.layers)
            .map(|_| LayerParams::init(config.arch.encoder_kind(), &lc, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = if config.decoder {
            (0..config.layers)
                .map(|_| LayerParams::init(config.arch.decoder_kind(), &lc, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config: config.clone(),
            vocab,
            params: ModelParams {
                embedding,
                encoder,
                decoder,
            },
        })
    }

    pub fn param_count(&self) -> ModelCount {
        let embedding = self.params.embedding.data().len();
        let (mut weights, mut biases, mut norm) = (0, 0, 0);
        for p in self.params.encoder.iter().chain(&self.params.decoder) {
            let c = p.param_count();
            weights += c.weights;
            biases += c.biases;
            norm += c.norm;
        }
        ModelCount {
            embedding,
            weights,
            biases,
            norm,
            total: embedding + weights + biases + norm,
        }
    }
}

/// Sinusoidal table tiled over `batch` stacked sequences.
fn tiled_positions(batch: usize, len: usize, d_model: usize) -> Result<Matrix> {
    let pe = sinusoidal_positions(len, d_model)?;
    let copies: Vec<&Matrix> = std::iter::repeat_n(&pe, batch).collect();
    Matrix::vstack(&copies)
}

fn embed(
    g: &mut Graph,
    embedding: Var,
    tokens: &[Vec<usize>],
    len: usize,
    d_model: usize,
) -> Result<Var> {
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    if flat.len() != tokens.len() * len {
        return Err(Error::contract(
            "all sequences in a batch need the same length",
        ));
    }
    let x = g.gather(embedding, &flat)?;
    let pe = g.constant(tiled_positions(tokens.len(), len, d_model)?);
    g.add(x, pe)
}

/// `[BOS, y₀, …, y_{n-2}]`.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(target.iter().take(target.len().saturating_sub(1)).copied())
        .collect()
}

/// Encoder output `(batch · n) x d_model` for a batch of equal-length sources.
pub fn encode_on_graph(
    g: &mut Graph,
    model: &Model,
    vars: &ModelParams<Var>,
    source: &[Vec<usize>],
) -> Result<Var> {
    let n = source.first().map_or(0, Vec::len);
    if source.is_empty() || n == 0 {
        return Err(Error::contract("empty batch"));
    }
    let mut h = embed(g, vars.embedding, source, n, model.config.d_model)?;
    let ctx = LayerContext::for_kind(model.config.arch.encoder_kind(), n, None);
    for p in &vars.encoder {
        h = layer_on_graph(g, p, h, &ctx)?;
    }
    Ok(h)
}

/// Decoder logits under teacher forcing, given the encoder output.
pub fn decode_on_graph(
    g: &mut Graph,
    model: &Model,
    vars: &ModelParams<Var>,
    memory: Memory,
    decoder_input: &[Vec<usize>],
) -> Result<Var> {
    let m = decoder_input.first().map_or(0, Vec::len);
    if g.value(memory.value).rows() != decoder_input.len() * memory.seq_len || m == 0 {
        return Err(Error::contract("source and decoder batches differ in size"));
    }
    let mut y = embed(g, vars.embedding, decoder_input, m, model.config.d_model)?;
    let ctx = LayerContext::for_kind(model.config.arch.decoder_kind(), m, Some(memory));
    for p in &vars.decoder {
        y = layer_on_graph(g, p, y, &ctx)?;
    }
    g.matmul_bt(y, vars.embedding)
}

/// Logits `(batch · n) x V` for a batch of equal-length sequences.
///
/// Encoder-only models classify each source position; encoder-decoder models
/// score `decoder_input` under teacher forcing.
pub fn logits_on_graph(
    g: &mut Graph,
    model: &Model,
    vars: &ModelParams<Var>,
    source: &[Vec<usize>],
    decoder_input: Option<&[Vec<usize>]>,
) -> Result<Var> {
    let h = encode_on_graph(g, model, vars, source)?;
    if !model.config.decoder {
        return g.matmul_bt(h, vars.embedding);
    }
    let dec_in = decoder_input
        .ok_or_else(|| Error::contract("encoder-decoder model needs decoder input"))?;
    let memory = Memory {
        value: h,
        seq_len: source[0].len(),
    };
    decode_on_graph(g, model, vars, memory, dec_in)
}

/// Logits without recording gradients.
pub fn logits(
    model: &Model,
    source: &[Vec<usize>],
    decoder_input: Option<&[Vec<usize>]>,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let vars = model.params.map(|m| g.constant(m.clone()));
    let out = logits_on_graph(&mut g, model, &vars, source, decoder_input)?;
    Ok(g.value(out).clone())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Row-wise argmax of a logit matrix.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

/// Autoregressive argmax decoding of `len` tokens for a batch of sources.
pub fn greedy_decode_batch(
    model: &Model,
    sources: &[Vec<usize>],
    len: usize,
) -> Result<Vec<Vec<usize>>> {
    if !model.config.decoder {
        return Err(Error::contract(
            "greedy decoding needs an encoder-decoder model",
        ));
    }
    if len == 0 {
        return Ok(vec![Vec::new(); sources.len()]);
    }
    let mut g = Graph::new();
    let vars = model.params.map(|m| g.constant(m.clone()));
    let encoded = encode_on_graph(&mut g, model, &vars, sources)?;
    let memory = Memory {
        value: encoded,
        seq_len: sources[0].len(),
    };
    let mut out = vec![Vec::with_capacity(len); sources.len()];
    let mut dec_in: Vec<Vec<usize>> = vec![vec![BOS; len]; sources.len()];
    for i in 0..len {
        let logits = decode_on_graph(&mut g, model, &vars, memory, &dec_in)?;
        let l = g.value(logits);
        for (b, seq) in out.iter_mut().enumerate() {
            let tok = argmax(l.row(b * len + i));
            seq.push(tok);
            if i + 1 < len {
                dec_in[b][i + 1] = tok;
            }
        }
    }
    Ok(out)
}

/// Greedy decoding of one source sequence to its own length.
pub fn greedy_decode(model: &Model, source: &[usize]) -> Result<Vec<usize>> {
    let mut out = greedy_decode_batch(model, &[source.to_vec()], source.len())?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Arch, decoder: bool) -> Model {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ..ModelConfig::small(arch, decoder)
        };
        Model::init(&cfg, 7, &mut RngState::new(4)).unwrap()
    }

    #[test]
    fn parity_across_architectures() {
        for decoder in [false, true] {
            let cfg = ModelConfig::small(Arch::Transformer, decoder);
            let t = Model::init(&cfg, 16, &mut RngState::new(0))
                .unwrap()
                .param_count();
            let m = Model::init(&cfg.with_arch(Arch::Macaron), 16, &mut RngState::new(0))
                .unwrap()
                .param_count();
            assert_eq!(t.weights, m.weights);
            let layers = cfg.layers * if decoder { 2 } else { 1 };
            assert_eq!(m.total - t.total, layers * cfg.d_model);
        }
    }

    #[test]
    fn d_ff_override_keeps_parity() {
        let mut cfg = ModelConfig::small(Arch::Transformer, false);
        cfg.d_ff = Some(48);
        let t = Model::init(&cfg, 16, &mut RngState::new(0)).unwrap();
        let m = Model::init(&cfg.with_arch(Arch::Macaron), 16, &mut RngState::new(0)).unwrap();
        assert_eq!(t.params.encoder[0].ffn.d_ff(), 48);
        assert_eq!(m.params.encoder[0].ffn.d_ff(), 24);
        assert_eq!(t.param_count().weights, m.param_count().weights);
        cfg.d_ff = Some(7);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logit_shapes() {
        let src = vec![vec![2, 3, 4], vec![5, 6, 2]];
        let enc = small(Arch::Macaron, false);
        assert_eq!(logits(&enc, &src, None).unwrap().shape(), (6, 7));
        let dec = small(Arch::Transformer, true);
        let dec_in: Vec<Vec<usize>> = src.iter().map(|s| shift_right(s)).collect();
        assert_eq!(logits(&dec, &src, Some(&dec_in)).unwrap().shape(), (6, 7));
        assert!(logits(&dec, &src, None).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let model = small(Arch::Macaron, true);
        let a = vec![2, 3, 4, 5];
        let b = vec![6, 2, 2, 3];
        let both = logits(
            &model,
            &[a.clone(), b.clone()],
            Some(&[shift_right(&a), shift_right(&b)]),
        )
        .unwrap();
        let alone = logits(&model, std::slice::from_ref(&a), Some(&[shift_right(&a)])).unwrap();
        assert!(both.slice_rows(0, 4).max_abs_diff(&alone).unwrap() < 1e-14);
    }

    #[test]
    fn untrained_decode_is_deterministic_and_in_vocab() {
        let model = small(Arch::Macaron, true);
        let src = [3, 4, 5, 6, 2];
        let out = greedy_decode(&model, &src).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|&t| t < 7));
        assert_eq!(out, greedy_decode(&model, &src).unwrap());
        assert!(greedy_decode(&small(Arch::Macaron, false), &src).is_err());
    }

    #[test]
    fn shift() {
        assert_eq!(shift_right(&[5, 7, 3]), vec![BOS, 5, 7]);
    }
}
