//! Multi-head attention, position-wise FFN, Transformer and Macaron layers.
//!
//! Attention scores are scaled by `1/√d_model`; `d_K = d_V = d_model / H`.
//! Only the FFNs carry biases. The Macaron `½` is applied to the FFN output at
//! the residual junction, never folded into the weights.

pub mod container;
pub mod forward;
pub mod gradcheck;
pub mod params;
pub mod positions;

pub use container::{read_layer, read_tensors, write_layer, write_tensors};
pub use forward::{
    attention_on_graph, attention_scale, ffn_forward, ffn_on_graph, head_weights, layer_forward,
    layer_on_graph, macaron_decoder_layer_forward, macaron_layer_forward, multi_head_attention,
    residual_weight, scaled_dot_attention, sublayer_on_graph, sublayer_output,
    transformer_layer_forward, AttentionWeights, LayerContext, Memory,
};
pub use gradcheck::{layer_gradcheck, GradcheckReport, TensorCheck, GRADCHECK_TOLERANCE};
pub use params::{
    Activation, AttentionParams, FfnParams, LayerConfig, LayerKind, LayerParams, NormParams,
    ParamCount, Sublayer,
};
pub use positions::sinusoidal_positions;

#[cfg(test)]
mod tests;
