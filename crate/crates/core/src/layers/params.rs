//! Trainable parameters of attention, FFN and full layers, generic over storage.
//!
//! `T = Matrix` holds values; `T = Var` holds handles on a [`Graph`](crate::tensor::Graph).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{glorot_init, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Per-head projections `W_k^Q, W_k^K` (`d_model x d_K`), `W_k^V` (`d_model x d_V`)
/// and the output projection `W^O` (`H·d_V x d_model`). No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Matrix> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub output: T,
}

/// `FFN(h) = σ(h W₁ + b₁) W₂ + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = Matrix> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Self-attention then FFN, full-step residuals.
    Transformer,
    /// Self-attention (causal), encoder-decoder attention, FFN.
    TransformerDecoder,
    /// Half-step FFN, self-attention, half-step FFN.
    Macaron,
    /// Half-step FFN, causal self-attention, encoder-decoder attention, half-step FFN.
    MacaronDecoder,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Transformer => "transformer",
            LayerKind::TransformerDecoder => "transformer-decoder",
            LayerKind::Macaron => "macaron",
            LayerKind::MacaronDecoder => "macaron-decoder",
        }
    }

    pub fn is_macaron(self) -> bool {
        matches!(self, LayerKind::Macaron | LayerKind::MacaronDecoder)
    }

    pub fn is_decoder(self) -> bool {
        matches!(
            self,
            LayerKind::TransformerDecoder | LayerKind::MacaronDecoder
        )
    }

    /// Inner FFN width used when none is given: `4·d_model` for one FFN,
    /// `2·d_model` for each of the two Macaron FFNs.
    pub fn default_d_ff(self, d_model: usize) -> usize {
        if self.is_macaron() {
            2 * d_model
        } else {
            4 * d_model
        }
    }

    /// Sub-layers in evaluation order.
    pub fn sublayers(self) -> &'static [Sublayer] {
        use Sublayer::*;
        match self {
            LayerKind::Transformer => &[SelfAttention, Ffn],
            LayerKind::TransformerDecoder => &[SelfAttention, CrossAttention, Ffn],
            LayerKind::Macaron => &[FfnDown, SelfAttention, FfnUp],
            LayerKind::MacaronDecoder => &[FfnDown, SelfAttention, CrossAttention, FfnUp],
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            LayerKind::Transformer,
            LayerKind::TransformerDecoder,
            LayerKind::Macaron,
            LayerKind::MacaronDecoder,
        ]
        .into_iter()
        .find(|k| k.label() == s)
        .ok_or_else(|| Error::config(format!("unknown layer kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    SelfAttention,
    CrossAttention,
    Ffn,
    FfnDown,
    FfnUp,
}

impl Sublayer {
    pub fn label(self) -> &'static str {
        match self {
            Sublayer::SelfAttention => "self_attn",
            Sublayer::CrossAttention => "cross_attn",
            Sublayer::Ffn => "ffn",
            Sublayer::FfnDown => "ffn_down",
            Sublayer::FfnUp => "ffn_up",
        }
    }
}

/// Shape options for building a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Overrides [`LayerKind::default_d_ff`].
    pub d_ff: Option<usize>,
    pub activation: Activation,
    /// Pre-sublayer layer normalization; off unless requested.
    pub layer_norm: bool,
}

impl LayerConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            d_ff: None,
            activation: Activation::Relu,
            layer_norm: false,
        }
    }

    pub fn d_ff_for(&self, kind: LayerKind) -> usize {
        self.d_ff.unwrap_or_else(|| kind.default_d_ff(self.d_model))
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_ff == Some(0) {
            return Err(Error::config("d_ff must be at least 1"));
        }
        Ok(())
    }
}

/// Every trainable matrix of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Matrix> {
    pub kind: LayerKind,
    pub self_attention: AttentionParams<T>,
    /// Encoder-decoder attention; decoder kinds only.
    pub cross_attention: Option<AttentionParams<T>>,
    /// The FFN of a Transformer layer, or the first (down) FFN of a Macaron layer.
    pub ffn: FfnParams<T>,
    /// The second (up) FFN; Macaron kinds only.
    pub ffn_up: Option<FfnParams<T>>,
    /// One entry per sub-layer when layer normalization is on, else empty.
    pub norms: Vec<NormParams<T>>,
}

impl<T> AttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            query: self.query.iter().map(&mut *f).collect(),
            key: self.key.iter().map(&mut *f).collect(),
            value: self.value.iter().map(&mut *f).collect(),
            output: f(&self.output),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (k, m) in self.query.iter().enumerate() {
            out.push((format!("{prefix}.q.{k}"), m));
        }
        for (k, m) in self.key.iter().enumerate() {
            out.push((format!("{prefix}.k.{k}"), m));
        }
        for (k, m) in self.value.iter().enumerate() {
            out.push((format!("{prefix}.v.{k}"), m));
        }
        out.push((format!("{prefix}.o"), &self.output));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        for (k, m) in self.query.iter_mut().enumerate() {
            out.push((format!("{prefix}.q.{k}"), m));
        }
        for (k, m) in self.key.iter_mut().enumerate() {
            out.push((format!("{prefix}.k.{k}"), m));
        }
        for (k, m) in self.value.iter_mut().enumerate() {
            out.push((format!("{prefix}.v.{k}"), m));
        }
        out.push((format!("{prefix}.o"), &mut self.output));
    }
}

impl<T> FfnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            activation: self.activation,
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
    }
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            kind: self.kind,
            self_attention: self.self_attention.map(&mut f),
            cross_attention: self.cross_attention.as_ref().map(|a| a.map(&mut f)),
            ffn: self.ffn.map(&mut f),
            ffn_up: self.ffn_up.as_ref().map(|p| p.map(&mut f)),
            norms: self.norms.iter().map(|n| n.map(&mut f)).collect(),
        }
    }

    fn ffn_prefix(&self) -> &'static str {
        if self.kind.is_macaron() {
            "ffn_down"
        } else {
            "ffn"
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.self_attention.named("self_attn", &mut out);
        if let Some(c) = &self.cross_attention {
            c.named("cross_attn", &mut out);
        }
        self.ffn.named(self.ffn_prefix(), &mut out);
        if let Some(f) = &self.ffn_up {
            f.named("ffn_up", &mut out);
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("norm.{i}.gain"), &n.gain));
            out.push((format!("norm.{i}.bias"), &n.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut T)> {
        let prefix = self.ffn_prefix();
        let mut out = Vec::new();
        self.self_attention.named_mut("self_attn", &mut out);
        if let Some(c) = &mut self.cross_attention {
            c.named_mut("cross_attn", &mut out);
        }
        self.ffn.named_mut(prefix, &mut out);
        if let Some(f) = &mut self.ffn_up {
            f.named_mut("ffn_up", &mut out);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            out.push((format!("norm.{i}.gain"), &mut n.gain));
            out.push((format!("norm.{i}.bias"), &mut n.bias));
        }
        out
    }
}

impl AttentionParams<Matrix> {
    pub fn init(d_model: usize, heads: usize, rng: &mut RngState) -> Self {
        let dk = d_model / heads;
        let proj = |rng: &mut RngState| -> Vec<Matrix> {
            (0..heads).map(|_| glorot_init(d_model, dk, rng)).collect()
        };
        let query = proj(rng);
        let key = proj(rng);
        let value = proj(rng);
        let output = glorot_init(heads * dk, d_model, rng);
        Self {
            query,
            key,
            value,
            output,
        }
    }

    pub fn zeros(d_model: usize, heads: usize) -> Self {
        let dk = d_model / heads;
        let z = || {
            (0..heads)
                .map(|_| Matrix::zeros(d_model, dk))
                .collect::<Vec<_>>()
        };
        Self {
            query: z(),
            key: z(),
            value: z(),
            output: Matrix::zeros(heads * dk, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.output.cols()
    }
}

impl FfnParams<Matrix> {
    pub fn init(d_model: usize, d_ff: usize, activation: Activation, rng: &mut RngState) -> Self {
        Self {
            w1: glorot_init(d_model, d_ff, rng),
            b1: Matrix::zeros(1, d_ff),
            w2: glorot_init(d_ff, d_model, rng),
            b2: Matrix::zeros(1, d_model),
            activation,
        }
    }

    pub fn zeros(d_model: usize, d_ff: usize, activation: Activation) -> Self {
        Self {
            w1: Matrix::zeros(d_model, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, d_model),
            b2: Matrix::zeros(1, d_model),
            activation,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }
}

impl NormParams<Matrix> {
    pub fn identity(d_model: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d_model, 1.0),
            bias: Matrix::zeros(1, d_model),
        }
    }
}

impl LayerParams<Matrix> {
    /// Glorot-initialized weights, zero biases, unit norm gains.
    pub fn init(kind: LayerKind, cfg: &LayerConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let (d, h, d_ff) = (cfg.d_model, cfg.heads, cfg.d_ff_for(kind));
        let self_attention = AttentionParams::init(d, h, rng);
        let cross_attention = kind.is_decoder().then(|| AttentionParams::init(d, h, rng));
        let ffn = FfnParams::init(d, d_ff, cfg.activation, rng);
        let ffn_up = kind
            .is_macaron()
            .then(|| FfnParams::init(d, d_ff, cfg.activation, rng));
        Ok(Self {
            kind,
            self_attention,
            cross_attention,
            ffn,
            ffn_up,
            norms: Self::norms_for(kind, cfg),
        })
    }

    /// All weights and biases zero: every kind reduces to the identity map.
    pub fn zeros(kind: LayerKind, cfg: &LayerConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h, d_ff) = (cfg.d_model, cfg.heads, cfg.d_ff_for(kind));
        Ok(Self {
            kind,
            self_attention: AttentionParams::zeros(d, h),
            cross_attention: kind.is_decoder().then(|| AttentionParams::zeros(d, h)),
            ffn: FfnParams::zeros(d, d_ff, cfg.activation),
            ffn_up: kind
                .is_macaron()
                .then(|| FfnParams::zeros(d, d_ff, cfg.activation)),
            norms: Self::norms_for(kind, cfg),
        })
    }

    fn norms_for(kind: LayerKind, cfg: &LayerConfig) -> Vec<NormParams> {
        if cfg.layer_norm {
            kind.sublayers()
                .iter()
                .map(|_| NormParams::identity(cfg.d_model))
                .collect()
        } else {
            Vec::new()
        }
    }

    pub fn d_model(&self) -> usize {
        self.self_attention.d_model()
    }

    pub fn heads(&self) -> usize {
        self.self_attention.heads()
    }

    /// The shape options this layer was built from.
    pub fn config(&self) -> LayerConfig {
        LayerConfig {
            d_model: self.d_model(),
            heads: self.heads(),
            d_ff: Some(self.ffn.d_ff()),
            activation: self.ffn.activation,
            layer_norm: !self.norms.is_empty(),
        }
    }

    /// Checks that the optional parts present match `kind`.
    pub fn check_structure(&self) -> Result<()> {
        let ok = self.cross_attention.is_some() == self.kind.is_decoder()
            && self.ffn_up.is_some() == self.kind.is_macaron()
            && (self.norms.is_empty() || self.norms.len() == self.kind.sublayers().len());
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "parameter structure does not match layer kind {}",
                self.kind
            )))
        }
    }

    /// Exact count of scalar parameters, by sub-layer.
    pub fn param_count(&self) -> ParamCount {
        let attn = |a: &AttentionParams| -> usize {
            a.query
                .iter()
                .chain(&a.key)
                .chain(&a.value)
                .chain(std::iter::once(&a.output))
                .map(|m| m.data().len())
                .sum()
        };
        let ffn_weights = |f: &FfnParams| f.w1.data().len() + f.w2.data().len();
        let ffn_biases = |f: &FfnParams| f.b1.data().len() + f.b2.data().len();
        let ffns: Vec<&FfnParams> = std::iter::once(&self.ffn)
            .chain(self.ffn_up.as_ref())
            .collect();

        let attention = attn(&self.self_attention);
        let cross_attention = self.cross_attention.as_ref().map_or(0, attn);
        let ffn_w: usize = ffns.iter().map(|f| ffn_weights(f)).sum();
        let ffn_b: usize = ffns.iter().map(|f| ffn_biases(f)).sum();
        let norm: usize = self
            .norms
            .iter()
            .map(|n| n.gain.data().len() + n.bias.data().len())
            .sum();
        ParamCount {
            attention,
            cross_attention,
            ffn: ffn_w + ffn_b,
            norm,
            weights: attention + cross_attention + ffn_w,
            biases: ffn_b,
            total: attention + cross_attention + ffn_w + ffn_b + norm,
        }
    }
}

/// Scalar parameter counts of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub attention: usize,
    pub cross_attention: usize,
    /// All FFN sub-layers, weights and biases.
    pub ffn: usize,
    pub norm: usize,
    /// Entries of weight matrices (attention projections, `W₁`, `W₂`).
    pub weights: usize,
    /// FFN bias entries.
    pub biases: usize,
    pub total: usize,
}
