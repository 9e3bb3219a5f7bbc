//! Layers as split vector fields.
//!
//! Self-attention becomes the coupled field `F*` and the FFN the position-wise
//! field `G*`, each defined as the sub-layer output divided by `γ`. Layer `l`
//! occupies the time slot `[t₀ + γl, t₀ + γ(l+1))`; inside a Macaron slot the
//! offset `γ/2` selects the up FFN instead of the down FFN.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{layer_forward, LayerKind, LayerParams, Sublayer};
use crate::ode::{integrate, step, ParticleState, Scheme, SchemeConfig, SplitSystem, SubstepMode};
use crate::tensor::{uniform, Matrix, RngState};

/// A stack of encoder layers of one kind read as a time-dependent split system.
#[derive(Clone, Debug)]
pub struct LayerFields {
    layers: Vec<LayerParams>,
    kind: LayerKind,
    t0: f64,
    gamma: f64,
}

impl LayerFields {
    /// Fields of `layers` with layer `l` at `t₀ + γl`.
    pub fn new(layers: Vec<LayerParams>, t0: f64, gamma: f64) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::contract("a layer stack needs at least one layer"))?;
        let (kind, d) = (first.kind, first.d_model());
        if !matches!(kind, LayerKind::Transformer | LayerKind::Macaron) {
            return Err(Error::contract(format!(
                "only transformer and macaron layers map to split fields, got {kind}"
            )));
        }
        for (l, p) in layers.iter().enumerate() {
            p.check_structure()?;
            if p.kind != kind || p.d_model() != d {
                return Err(Error::contract(format!(
                    "layer {l} is {} with d_model {}, expected {kind} with d_model {d}",
                    p.kind,
                    p.d_model()
                )));
            }
        }
        if !(gamma > 0.0) {
            return Err(Error::config(format!(
                "step size must be positive, got {gamma}"
            )));
        }
        Ok(Self {
            layers,
            kind,
            t0,
            gamma,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// The splitting scheme whose Euler-substep form this architecture realizes.
    pub fn scheme_config(&self) -> SchemeConfig {
        let scheme = match self.kind {
            LayerKind::Macaron => Scheme::StrangMarchuk,
            _ => Scheme::LieTrotter,
        };
        SchemeConfig::new(scheme, SubstepMode::Euler, self.gamma)
    }

    /// Layer index and whether `t` lies in the second half of its slot.
    fn locate(&self, t: f64) -> Result<(usize, bool)> {
        let u = (t - self.t0) / self.gamma;
        let l = (u + 1e-9).floor();
        if !(l >= 0.0) || l as usize >= self.layers.len() {
            return Err(Error::contract(format!(
                "time {t} lies outside the {} layer slots",
                self.layers.len()
            )));
        }
        Ok((l as usize, u - l > 0.25))
    }

    fn field(&self, sub: Sublayer, layer: usize, x: &Matrix) -> Result<Matrix> {
        let p = &self.layers[layer];
        let index = p
            .kind
            .sublayers()
            .iter()
            .position(|s| *s == sub)
            .expect("sub-layer of an encoder kind");
        let out = crate::layers::sublayer_output(p, index, x, None)?;
        Ok(if self.gamma == 1.0 {
            out
        } else {
            out.scale(1.0 / self.gamma)
        })
    }
}

impl SplitSystem for LayerFields {
    fn name(&self) -> &str {
        self.kind.label()
    }

    fn diffusion(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let (l, _) = self.locate(t)?;
        self.field(Sublayer::SelfAttention, l, x)
    }

    fn convection(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let (l, second_half) = self.locate(t)?;
        let sub = match (self.kind, second_half) {
            (LayerKind::Macaron, false) => Sublayer::FfnDown,
            (LayerKind::Macaron, true) => Sublayer::FfnUp,
            _ => Sublayer::Ffn,
        };
        self.field(sub, l, x)
    }
}

/// `F*` = self-attention, `G*` = FFN, `γ = 1`, layer at `t = 0`.
pub fn wrap_transformer_as_fields(params: &LayerParams) -> Result<LayerFields> {
    expect_kind(params, LayerKind::Transformer)?;
    LayerFields::new(vec![params.clone()], 0.0, 1.0)
}

/// `F*` = self-attention, `G*(·, 0)` = down FFN, `G*(·, ½)` = up FFN, `γ = 1`.
pub fn wrap_macaron_as_fields(params: &LayerParams) -> Result<LayerFields> {
    expect_kind(params, LayerKind::Macaron)?;
    LayerFields::new(vec![params.clone()], 0.0, 1.0)
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

/// `x₀ … x_L` from stepping the wrapped fields of each layer in turn at `γ = 1`.
pub fn stack_as_trajectory(stack: &[LayerParams], x0: &Matrix) -> Result<Vec<Matrix>> {
    let fields = LayerFields::new(stack.to_vec(), 0.0, 1.0)?;
    if x0.cols() != fields.layers[0].d_model() {
        return Err(Error::contract(format!(
            "state width {} does not match d_model {}",
            x0.cols(),
            fields.layers[0].d_model()
        )));
    }
    let traj = integrate(
        &fields,
        &ParticleState::at_zero(x0.clone())?,
        &fields.scheme_config(),
        stack.len(),
    )?;
    Ok(traj.into_iter().map(|s| s.positions).collect())
}

/// Sequential layer forward passes `x₀ … x_L`.
pub fn sequential_forward(stack: &[LayerParams], x0: &Matrix) -> Result<Vec<Matrix>> {
    let mut out = vec![x0.clone()];
    for p in stack {
        let next = layer_forward(out.last().expect("non-empty"), p, None)?;
        out.push(next);
    }
    Ok(out)
}

/// Outcome of one stepper-versus-layer comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub architecture: LayerKind,
    pub d_model: usize,
    pub n: usize,
    pub heads: usize,
    pub seed: u64,
    pub max_abs_diff: f64,
}

/// Largest allowed stepper/layer gap.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= EQUIVALENCE_TOLERANCE
    }
}

/// Shape of a random comparison instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceShape {
    pub d_model: usize,
    pub n: usize,
    pub heads: usize,
}

/// Cycles through `d_model ∈ {4, 8}`, `n ∈ {1, 2, 5}`, `H ∈ {1, 2}` by seed.
pub fn grid_shape(seed: u64) -> InstanceShape {
    let i = (seed % 12) as usize;
    InstanceShape {
        d_model: [4, 8][i % 2],
        n: [1, 2, 5][(i / 2) % 3],
        heads: [1, 2][i / 6],
    }
}

/// Random layer (nonzero biases) and input for a seed.
pub fn random_instance(
    kind: LayerKind,
    shape: InstanceShape,
    seed: u64,
) -> Result<(LayerParams, Matrix)> {
    let mut rng = RngState::new(seed);
    let cfg = crate::layers::LayerConfig::new(shape.d_model, shape.heads);
    let mut params = LayerParams::init(kind, &cfg, &mut rng)?;
    for (name, m) in params.tensors_mut() {
        if name.ends_with(".b1") || name.ends_with(".b2") {
            *m = uniform(m.rows(), m.cols(), -0.5, 0.5, &mut rng);
        }
    }
    let x = uniform(shape.n, shape.d_model, -1.0, 1.0, &mut rng);
    Ok((params, x))
}

/// Compares one splitting step of the wrapped fields with the layer forward pass.
/// `perturb` adds that amount to the first FFN output bias of the layer path only.
pub fn equivalence_check(
    kind: LayerKind,
    shape: InstanceShape,
    seed: u64,
    perturb: Option<f64>,
) -> Result<EquivalenceReport> {
    let (params, x) = random_instance(kind, shape, seed)?;
    let fields = match kind {
        LayerKind::Transformer => wrap_transformer_as_fields(&params)?,
        LayerKind::Macaron => wrap_macaron_as_fields(&params)?,
        other => {
            return Err(Error::contract(format!(
                "no split-field reading of {other}"
            )));
        }
    };
    let stepped = step(
        &fields,
        &ParticleState::at_zero(x.clone())?,
        &fields.scheme_config(),
    )?
    .positions;
    let mut layer_params = params;
    if let Some(delta) = perturb {
        layer_params.ffn.b2.data_mut()[0] += delta;
    }
    let direct = layer_forward(&x, &layer_params, None)?;
    Ok(EquivalenceReport {
        architecture: kind,
        d_model: shape.d_model,
        n: shape.n,
        heads: shape.heads,
        seed,
        max_abs_diff: stepped.max_abs_diff(&direct)?,
    })
}
