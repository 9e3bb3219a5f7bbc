//! One-step integrators: Euler, Lie-Trotter and Strang-Marchuk splitting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::expm::expm;
use crate::ode::system::{ParticleState, SplitSystem};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Plain Euler on the summed field `F + G`.
    Euler,
    /// `F` for a full step, then `G` for a full step.
    LieTrotter,
    /// Half step of `G`, full step of `F`, half step of `G`.
    StrangMarchuk,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::LieTrotter => "lt",
            Scheme::StrangMarchuk => "sm",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "lt" | "lie-trotter" => Ok(Scheme::LieTrotter),
            "sm" | "strang-marchuk" => Ok(Scheme::StrangMarchuk),
            _ => Err(Error::config(format!("unknown scheme '{s}'"))),
        }
    }
}

/// How each split sub-problem is advanced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubstepMode {
    Euler,
    Exact,
}

impl SubstepMode {
    pub fn label(self) -> &'static str {
        match self {
            SubstepMode::Euler => "euler",
            SubstepMode::Exact => "exact",
        }
    }
}

impl fmt::Display for SubstepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SubstepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SubstepMode::Euler),
            "exact" => Ok(SubstepMode::Exact),
            _ => Err(Error::config(format!("unknown substep mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub substeps: SubstepMode,
    pub gamma: f64,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, substeps: SubstepMode, gamma: f64) -> Self {
        Self {
            scheme,
            substeps,
            gamma,
        }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }

    fn validate(&self, system: &dyn SplitSystem) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::config(format!(
                "step size must be positive, got {}",
                self.gamma
            )));
        }
        if self.substeps == SubstepMode::Exact && !system.has_exact_flows() {
            return Err(Error::config(format!(
                "system '{}' has no exact sub-flows",
                system.name()
            )));
        }
        Ok(())
    }
}

fn check_finite(m: Matrix, context: &'static str) -> Result<Matrix> {
    match m.first_non_finite_row() {
        Some(row) => Err(Error::NonFinite { row, context }),
        None => Ok(m),
    }
}

/// `x + γ f(x, t)` without a time stamp.
fn euler_update(
    f: impl Fn(&Matrix, f64) -> Result<Matrix>,
    x: &Matrix,
    t: f64,
    gamma: f64,
) -> Result<Matrix> {
    let v = check_finite(f(x, t)?, "vector field")?;
    x.add(&v.scale(gamma))
}

/// `x_{l+1} = x_l + γ f(x_l, t_l)`.
pub fn euler_step(
    field: impl Fn(&Matrix, f64) -> Result<Matrix>,
    state: &ParticleState,
    gamma: f64,
) -> Result<ParticleState> {
    if !(gamma > 0.0) {
        return Err(Error::config(format!(
            "step size must be positive, got {gamma}"
        )));
    }
    Ok(ParticleState {
        positions: euler_update(field, &state.positions, state.time, gamma)?,
        time: state.time + gamma,
    })
}

fn flow_or_err(flow: Option<Result<Matrix>>, which: &str) -> Result<Matrix> {
    let m = flow.ok_or_else(|| Error::config(format!("missing exact {which} flow")))??;
    check_finite(m, "exact sub-flow")
}

/// Lie-Trotter: `x̃ = x + γF(x, t)`, then `x̃ + γG(x̃, t)`; with exact substeps `S_G^γ ∘ S_F^γ`.
pub fn lie_trotter_step(
    system: &dyn SplitSystem,
    state: &ParticleState,
    config: &SchemeConfig,
) -> Result<ParticleState> {
    config.validate(system)?;
    let (x, t, gamma) = (&state.positions, state.time, config.gamma);
    let positions = match config.substeps {
        SubstepMode::Euler => {
            let tilde = euler_update(|x, t| system.diffusion(x, t), x, t, gamma)?;
            euler_update(|x, t| system.convection(x, t), &tilde, t, gamma)?
        }
        SubstepMode::Exact => {
            let tilde = flow_or_err(system.diffusion_flow(x, t, gamma), "diffusion")?;
            flow_or_err(system.convection_flow(&tilde, t, gamma), "convection")?
        }
    };
    Ok(ParticleState {
        positions,
        time: t + gamma,
    })
}

/// Strang-Marchuk: half step of `G` at `t`, full step of `F`, half step of `G`
/// evaluated at `t + γ/2`; with exact substeps `S_G^{γ/2} ∘ S_F^γ ∘ S_G^{γ/2}`.
pub fn strang_marchuk_step(
    system: &dyn SplitSystem,
    state: &ParticleState,
    config: &SchemeConfig,
) -> Result<ParticleState> {
    config.validate(system)?;
    let (x, t, gamma) = (&state.positions, state.time, config.gamma);
    let half = gamma / 2.0;
    let positions = match config.substeps {
        SubstepMode::Euler => {
            let tilde = euler_update(|x, t| system.convection(x, t), x, t, half)?;
            let hat = euler_update(|x, t| system.diffusion(x, t), &tilde, t, gamma)?;
            euler_update(|x, t| system.convection(x, t), &hat, t + half, half)?
        }
        SubstepMode::Exact => {
            let tilde = flow_or_err(system.convection_flow(x, t, half), "convection")?;
            let hat = flow_or_err(system.diffusion_flow(&tilde, t, gamma), "diffusion")?;
            flow_or_err(system.convection_flow(&hat, t + half, half), "convection")?
        }
    };
    Ok(ParticleState {
        positions,
        time: t + gamma,
    })
}

/// Sum `F + G` as a single field.
pub fn summed_field(system: &dyn SplitSystem, x: &Matrix, t: f64) -> Result<Matrix> {
    system.diffusion(x, t)?.add(&system.convection(x, t)?)
}

/// One step of whichever scheme `config` names.
pub fn step(
    system: &dyn SplitSystem,
    state: &ParticleState,
    config: &SchemeConfig,
) -> Result<ParticleState> {
    match config.scheme {
        Scheme::Euler => match config.substeps {
            SubstepMode::Euler => {
                euler_step(|x, t| summed_field(system, x, t), state, config.gamma)
            }
            SubstepMode::Exact => reference_solution(system, state, config.gamma),
        },
        Scheme::LieTrotter => lie_trotter_step(system, state, config),
        Scheme::StrangMarchuk => strang_marchuk_step(system, state, config),
    }
}

/// Inner substeps of the fourth-order reference integrator.
pub const REFERENCE_SUBSTEPS: usize = 1000;

/// High-accuracy flow of `F + G` over `gamma`.
///
/// Linear systems use `x · exp((A + B) γ)`; everything else takes
/// [`REFERENCE_SUBSTEPS`] classical Runge-Kutta steps of the summed field.
pub fn reference_solution(
    system: &dyn SplitSystem,
    state: &ParticleState,
    gamma: f64,
) -> Result<ParticleState> {
    if !(gamma > 0.0) {
        return Err(Error::config(format!(
            "step size must be positive, got {gamma}"
        )));
    }
    let positions = match system.linear_generators() {
        Some((a, b)) => state.positions.matmul(&expm(&a.add(&b)?.scale(gamma))?)?,
        None => rk4(
            system,
            &state.positions,
            state.time,
            gamma,
            REFERENCE_SUBSTEPS,
        )?,
    };
    Ok(ParticleState {
        positions: check_finite(positions, "reference solution")?,
        time: state.time + gamma,
    })
}

fn rk4(system: &dyn SplitSystem, x: &Matrix, t0: f64, span: f64, steps: usize) -> Result<Matrix> {
    let h = span / steps as f64;
    let mut x = x.clone();
    for s in 0..steps {
        let t = t0 + h * s as f64;
        let k1 = summed_field(system, &x, t)?;
        let mut y = x.clone();
        y.axpy(h / 2.0, &k1)?;
        let k2 = summed_field(system, &y, t + h / 2.0)?;
        let mut y = x.clone();
        y.axpy(h / 2.0, &k2)?;
        let k3 = summed_field(system, &y, t + h / 2.0)?;
        let mut y = x.clone();
        y.axpy(h, &k3)?;
        let k4 = summed_field(system, &y, t + h)?;
        x.axpy(h / 6.0, &k1)?;
        x.axpy(h / 3.0, &k2)?;
        x.axpy(h / 3.0, &k3)?;
        x.axpy(h / 6.0, &k4)?;
    }
    Ok(x)
}

/// `steps` repeated scheme steps; returns `x_0 … x_L` with `t_l = t_0 + γ l`.
pub fn integrate(
    system: &dyn SplitSystem,
    state: &ParticleState,
    config: &SchemeConfig,
    steps: usize,
) -> Result<Vec<ParticleState>> {
    if steps == 0 {
        return Err(Error::config("integrate needs at least one step"));
    }
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(state.clone());
    for l in 0..steps {
        let mut next = step(system, &traj[l], config)?;
        next.time = state.time + config.gamma * (l + 1) as f64;
        traj.push(next);
    }
    Ok(traj)
}
