//! Multi-particle systems `dx_i/dt = F(x_i, [x_1..x_n], t) + G(x_i, t)`.
//!
//! States are `n x d` matrices, one particle per row. `F` (diffusion) may
//! couple rows; `G` (convection) must act on each row independently.

use std::fmt;

use crate::error::{Error, Result};
use crate::ode::expm::expm;
use crate::tensor::{softmax_rows, Matrix};

/// Particle positions at a point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub positions: Matrix,
    pub time: f64,
}

impl ParticleState {
    pub fn new(positions: Matrix, time: f64) -> Result<Self> {
        if positions.rows() == 0 || positions.cols() == 0 {
            return Err(Error::contract("a particle state needs n >= 1 and d >= 1"));
        }
        if let Some(row) = positions.first_non_finite_row() {
            return Err(Error::NonFinite {
                row,
                context: "initial state",
            });
        }
        Ok(Self { positions, time })
    }

    pub fn at_zero(positions: Matrix) -> Result<Self> {
        Self::new(positions, 0.0)
    }

    pub fn particles(&self) -> usize {
        self.positions.rows()
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }
}

/// A pair of vector fields: coupled diffusion `F` and position-wise convection `G`.
pub trait SplitSystem {
    fn name(&self) -> &str;

    /// `F(x, t)`; row `i` may depend on every row of `x`.
    fn diffusion(&self, x: &Matrix, t: f64) -> Result<Matrix>;

    /// `G(x, t)` applied to each row.
    fn convection(&self, x: &Matrix, t: f64) -> Result<Matrix>;

    /// Exact flow of `F` from time `t` over `dt`, when known.
    fn diffusion_flow(&self, _x: &Matrix, _t: f64, _dt: f64) -> Option<Result<Matrix>> {
        None
    }

    /// Exact flow of `G` from time `t` over `dt`, when known.
    fn convection_flow(&self, _x: &Matrix, _t: f64, _dt: f64) -> Option<Result<Matrix>> {
        None
    }

    fn has_exact_flows(&self) -> bool {
        false
    }

    /// `(A, B)` when `F(x) = x A` and `G(x) = x B` with constant matrices.
    fn linear_generators(&self) -> Option<(Matrix, Matrix)> {
        None
    }
}

/// Max-norm gap between `G` on the stacked state and `G` row by row.
pub fn position_wise_gap(system: &dyn SplitSystem, x: &Matrix, t: f64) -> Result<f64> {
    let stacked = system.convection(x, t)?;
    let rows: Vec<Matrix> = (0..x.rows())
        .map(|i| system.convection(&x.row_matrix(i), t))
        .collect::<Result<_>>()?;
    let refs: Vec<&Matrix> = rows.iter().collect();
    stacked.max_abs_diff(&Matrix::vstack(&refs)?)
}

/// `F(x) = x A`, `G(x) = x B`, with exact flows `x · exp(A t)` and `x · exp(B t)`.
#[derive(Clone, Debug)]
pub struct LinearSplit {
    name: String,
    a: Matrix,
    b: Matrix,
}

impl LinearSplit {
    pub fn new(name: impl Into<String>, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != a.cols() || a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "LinearSplit::new",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(Self {
            name: name.into(),
            a,
            b,
        })
    }

    fn apply(&self, m: &Matrix, x: &Matrix) -> Result<Matrix> {
        x.matmul(m)
    }

    fn flow(&self, m: &Matrix, x: &Matrix, dt: f64) -> Result<Matrix> {
        x.matmul(&expm(&m.scale(dt))?)
    }
}

impl SplitSystem for LinearSplit {
    fn name(&self) -> &str {
        &self.name
    }

    fn diffusion(&self, x: &Matrix, _t: f64) -> Result<Matrix> {
        self.apply(&self.a, x)
    }

    fn convection(&self, x: &Matrix, _t: f64) -> Result<Matrix> {
        self.apply(&self.b, x)
    }

    fn diffusion_flow(&self, x: &Matrix, _t: f64, dt: f64) -> Option<Result<Matrix>> {
        Some(self.flow(&self.a, x, dt))
    }

    fn convection_flow(&self, x: &Matrix, _t: f64, dt: f64) -> Option<Result<Matrix>> {
        Some(self.flow(&self.b, x, dt))
    }

    fn has_exact_flows(&self) -> bool {
        true
    }

    fn linear_generators(&self) -> Option<(Matrix, Matrix)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// Softmax-weighted attraction between particles (diffusion) plus the cubic
/// drift `x - x³` applied entrywise (convection).
///
/// `F_i(X) = Σ_j softmax_j(β x_i·x_j) (x_j - x_i)`. Only `G` has a closed-form flow,
/// so exact substeps are unavailable for this system.
#[derive(Clone, Debug)]
pub struct AttractionDrift {
    pub sharpness: f64,
}

impl Default for AttractionDrift {
    fn default() -> Self {
        Self { sharpness: 1.0 }
    }
}

impl AttractionDrift {
    /// Closed-form flow of `x' = x - x³`: `x e^t / sqrt(1 - x² + x² e^{2t})`.
    pub fn drift_flow(x: &Matrix, dt: f64) -> Matrix {
        let e2 = (2.0 * dt).exp();
        x.map(|v| v * dt.exp() / (1.0 - v * v + v * v * e2).sqrt())
    }
}

impl SplitSystem for AttractionDrift {
    fn name(&self) -> &str {
        "nonlinear"
    }

    fn diffusion(&self, x: &Matrix, _t: f64) -> Result<Matrix> {
        let weights = softmax_rows(&x.matmul_bt(x)?.scale(self.sharpness));
        // Σ_j w_ij (x_j - x_i) = (W x)_i - x_i since rows of W sum to one.
        weights.matmul(x)?.sub(x)
    }

    fn convection(&self, x: &Matrix, _t: f64) -> Result<Matrix> {
        Ok(x.map(|v| v - v * v * v))
    }

    fn convection_flow(&self, x: &Matrix, _t: f64, dt: f64) -> Option<Result<Matrix>> {
        Some(Ok(Self::drift_flow(x, dt)))
    }
}

/// `-F` and `-G`: stepping this system forward runs the original backwards.
pub struct TimeReversed<'a>(pub &'a dyn SplitSystem);

impl SplitSystem for TimeReversed<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn diffusion(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        Ok(self.0.diffusion(x, -t)?.scale(-1.0))
    }

    fn convection(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        Ok(self.0.convection(x, -t)?.scale(-1.0))
    }

    fn diffusion_flow(&self, x: &Matrix, t: f64, dt: f64) -> Option<Result<Matrix>> {
        self.0.diffusion_flow(x, -t, -dt)
    }

    fn convection_flow(&self, x: &Matrix, t: f64, dt: f64) -> Option<Result<Matrix>> {
        self.0.convection_flow(x, -t, -dt)
    }

    fn has_exact_flows(&self) -> bool {
        self.0.has_exact_flows()
    }

    fn linear_generators(&self) -> Option<(Matrix, Matrix)> {
        self.0
            .linear_generators()
            .map(|(a, b)| (a.scale(-1.0), b.scale(-1.0)))
    }
}

type Field = Box<dyn Fn(&Matrix, f64) -> Result<Matrix>>;
type Flow = Box<dyn Fn(&Matrix, f64, f64) -> Result<Matrix>>;

/// A system assembled from closures, for ad-hoc and time-dependent fields.
pub struct FnSystem {
    name: String,
    diffusion: Field,
    convection: Field,
    flows: Option<(Flow, Flow)>,
}

impl FnSystem {
    pub fn new(
        name: impl Into<String>,
        diffusion: impl Fn(&Matrix, f64) -> Result<Matrix> + 'static,
        convection: impl Fn(&Matrix, f64) -> Result<Matrix> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            diffusion: Box::new(diffusion),
            convection: Box::new(convection),
            flows: None,
        }
    }

    pub fn with_flows(
        mut self,
        diffusion_flow: impl Fn(&Matrix, f64, f64) -> Result<Matrix> + 'static,
        convection_flow: impl Fn(&Matrix, f64, f64) -> Result<Matrix> + 'static,
    ) -> Self {
        self.flows = Some((Box::new(diffusion_flow), Box::new(convection_flow)));
        self
    }
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSystem")
            .field("name", &self.name)
            .finish()
    }
}

impl SplitSystem for FnSystem {
    fn name(&self) -> &str {
        &self.name
    }

    fn diffusion(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        (self.diffusion)(x, t)
    }

    fn convection(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        (self.convection)(x, t)
    }

    fn diffusion_flow(&self, x: &Matrix, t: f64, dt: f64) -> Option<Result<Matrix>> {
        self.flows.as_ref().map(|(f, _)| f(x, t, dt))
    }

    fn convection_flow(&self, x: &Matrix, t: f64, dt: f64) -> Option<Result<Matrix>> {
        self.flows.as_ref().map(|(_, g)| g(x, t, dt))
    }

    fn has_exact_flows(&self) -> bool {
        self.flows.is_some()
    }
}

/// The test systems used by the order studies and the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShippedSystem {
    /// `F(x) = x`, `G(x) = 2x` on one scalar particle.
    Scalar,
    /// Two commuting upper-triangular Toeplitz generators.
    Commuting,
    /// `A = [[0,1],[0,0]]`, `B = [[0,0],[1,0]]`.
    NonCommuting,
    /// Four particles in the plane under [`AttractionDrift`].
    Nonlinear,
}

impl ShippedSystem {
    pub const ALL: [ShippedSystem; 4] = [
        ShippedSystem::Scalar,
        ShippedSystem::Commuting,
        ShippedSystem::NonCommuting,
        ShippedSystem::Nonlinear,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ShippedSystem::Scalar => "scalar",
            ShippedSystem::Commuting => "commuting",
            ShippedSystem::NonCommuting => "noncommuting",
            ShippedSystem::Nonlinear => "nonlinear",
        }
    }

    pub fn build(self) -> Box<dyn SplitSystem> {
        let m = |rows: [[f64; 2]; 2]| Matrix::from_rows(&rows).expect("2x2");
        match self {
            ShippedSystem::Scalar => Box::new(
                LinearSplit::new("scalar", Matrix::scalar(1.0), Matrix::scalar(2.0)).expect("1x1"),
            ),
            ShippedSystem::Commuting => Box::new(
                LinearSplit::new(
                    "commuting",
                    m([[0.5, 1.0], [0.0, 0.5]]),
                    m([[-1.0, 2.0], [0.0, -1.0]]),
                )
                .expect("2x2"),
            ),
            ShippedSystem::NonCommuting => Box::new(
                LinearSplit::new(
                    "noncommuting",
                    m([[0.0, 1.0], [0.0, 0.0]]),
                    m([[0.0, 0.0], [1.0, 0.0]]),
                )
                .expect("2x2"),
            ),
            ShippedSystem::Nonlinear => Box::new(AttractionDrift::default()),
        }
    }

    /// Default start state at `t = 0`.
    pub fn initial_state(self) -> ParticleState {
        let positions = match self {
            ShippedSystem::Scalar => Matrix::scalar(1.0),
            ShippedSystem::Commuting | ShippedSystem::NonCommuting => {
                Matrix::from_rows(&[[1.0, 0.5], [-0.3, 0.8]]).expect("2x2")
            }
            ShippedSystem::Nonlinear => {
                Matrix::from_rows(&[[0.9, -0.2], [-0.4, 0.7], [0.3, 0.3], [-0.8, -0.6]])
                    .expect("4x2")
            }
        };
        ParticleState::at_zero(positions).expect("finite")
    }
}

impl std::str::FromStr for ShippedSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShippedSystem::ALL
            .into_iter()
            .find(|sys| sys.label() == s)
            .ok_or_else(|| Error::config(format!("unknown system '{s}'")))
    }
}
