//! Local truncation error measurements and log-log order fits.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ode::scheme::{
    lie_trotter_step, reference_solution, step, Scheme, SchemeConfig, SubstepMode,
};
use crate::ode::system::{ParticleState, SplitSystem};
use crate::tensor::Matrix;

/// Samples at or below `ROUNDING_FLOOR_FACTOR · ε · ‖solution‖∞` are excluded from fits.
pub const ROUNDING_FLOOR_FACTOR: f64 = 1e3;

const MIN_FIT_SAMPLES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSample {
    pub gamma: f64,
    pub scheme_output: ParticleState,
    pub reference: ParticleState,
    /// `‖scheme_output − reference‖∞`.
    pub abs_error: f64,
}

impl ErrorSample {
    pub fn new(gamma: f64, scheme_output: ParticleState, reference: ParticleState) -> Result<Self> {
        let abs_error = scheme_output.positions.max_abs_diff(&reference.positions)?;
        Ok(Self {
            gamma,
            scheme_output,
            reference,
            abs_error,
        })
    }

    pub fn rounding_floor(&self) -> f64 {
        ROUNDING_FLOOR_FACTOR * f64::EPSILON * self.reference.positions.max_abs()
    }

    pub fn usable(&self) -> bool {
        self.abs_error > self.rounding_floor()
    }
}

/// Least-squares fit of `ln(error) = intercept + slope · ln(γ)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderEstimate {
    /// `(gamma, abs_error)` for every sample, usable or not.
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
    /// Natural log of the error constant.
    pub intercept: f64,
    pub r2: f64,
    /// Number of samples above the rounding floor that entered the fit.
    pub used: usize,
}

/// Fits a power law to `(gamma, error)` pairs; `usable` marks the pairs that enter the fit.
pub fn fit_power_law(samples: &[(f64, f64)], usable: &[bool]) -> Result<OrderEstimate> {
    for &(g, e) in samples {
        if !(g > 0.0) || !(e >= 0.0) {
            return Err(Error::contract(format!(
                "order samples need gamma > 0 and error >= 0, got ({g}, {e})"
            )));
        }
    }
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .zip(usable)
        .filter(|(&(_, e), &u)| u && e > 0.0)
        .map(|(&(g, e), _)| (g.ln(), e.ln()))
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData {
            usable: pts.len(),
            total: samples.len(),
            required: MIN_FIT_SAMPLES,
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract(
            "order fit needs at least two distinct step sizes",
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(OrderEstimate {
        samples: samples.to_vec(),
        slope,
        intercept,
        r2,
        used: pts.len(),
    })
}

/// Fits the samples, using only those above the rounding floor.
pub fn fit_order(samples: &[ErrorSample]) -> Result<OrderEstimate> {
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.gamma, s.abs_error)).collect();
    let usable: Vec<bool> = samples.iter().map(ErrorSample::usable).collect();
    fit_power_law(&pairs, &usable)
}

/// `points` step sizes spaced geometrically from `max` down to `min`.
pub fn gamma_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if !(min > 0.0) || !(max > min) || points < 2 {
        return Err(Error::config(format!(
            "gamma grid needs 0 < min < max and >= 2 points, got [{min}, {max}] x {points}"
        )));
    }
    let (lmin, lmax) = (min.ln(), max.ln());
    Ok((0..points)
        .map(|i| match i {
            0 => max,
            i if i == points - 1 => min,
            i => (lmax + (lmin - lmax) * i as f64 / (points - 1) as f64).exp(),
        })
        .collect())
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 4 {
        return Err(Error::config(format!(
            "order study needs at least 4 step sizes, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::config("step sizes must be positive and finite"));
    }
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(0.0, f64::max);
    // 1e-9 slack so a grid built from 1e-3..1e-1 counts as two decades.
    if (hi / lo).log10() < 2.0 - 1e-9 {
        return Err(Error::config(format!(
            "step sizes must span two decades, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// One scheme step versus [`reference_solution`] for every `γ` in `grid`.
pub fn measure_local_errors(
    system: &dyn SplitSystem,
    state: &ParticleState,
    config: &SchemeConfig,
    grid: &[f64],
) -> Result<Vec<ErrorSample>> {
    validate_grid(grid)?;
    grid.iter()
        .map(|&gamma| {
            let out = step(system, state, &config.with_gamma(gamma))?;
            let reference = reference_solution(system, state, gamma)?;
            ErrorSample::new(gamma, out, reference)
        })
        .collect()
}

/// Measures local errors over `grid` and fits their order.
pub fn order_study(
    system: &dyn SplitSystem,
    state: &ParticleState,
    config: &SchemeConfig,
    grid: &[f64],
) -> Result<OrderEstimate> {
    fit_order(&measure_local_errors(system, state, config, grid)?)
}

/// Jacobian-vector product `f'(x) v` by central differences with a step of
/// max-norm `1e-6 · (1 + ‖x‖∞)` along `v`.
fn jvp(f: impl Fn(&Matrix) -> Result<Matrix>, x: &Matrix, v: &Matrix) -> Result<Matrix> {
    let vnorm = v.max_abs();
    if vnorm == 0.0 {
        return Ok(Matrix::zeros(x.rows(), x.cols()));
    }
    let h = 1e-6 * (1.0 + x.max_abs());
    let eps = h / vnorm;
    let mut plus = x.clone();
    plus.axpy(eps, v)?;
    let mut minus = x.clone();
    minus.axpy(-eps, v)?;
    Ok(f(&plus)?.sub(&f(&minus)?)?.scale(1.0 / (2.0 * eps)))
}

/// `½ (F'(x) G(x) − G'(x) F(x))`, the `γ²` coefficient of the Lie-Trotter local error.
pub fn leading_error_commutator(system: &dyn SplitSystem, state: &ParticleState) -> Result<Matrix> {
    let (x, t) = (&state.positions, state.time);
    let f = system.diffusion(x, t)?;
    let g = system.convection(x, t)?;
    let fg = jvp(|y| system.diffusion(y, t), x, &g)?;
    let gf = jvp(|y| system.convection(y, t), x, &f)?;
    Ok(fg.sub(&gf)?.scale(0.5))
}

/// Residual of the Lie-Trotter local error after removing `γ² · commutator`.
#[derive(Clone, Debug)]
pub struct ResidualSample {
    pub gamma: f64,
    pub lt_error: f64,
    pub residual: f64,
    pub floor: f64,
}

pub fn measure_leading_term_residuals(
    system: &dyn SplitSystem,
    state: &ParticleState,
    grid: &[f64],
) -> Result<Vec<ResidualSample>> {
    validate_grid(grid)?;
    if !system.has_exact_flows() {
        return Err(Error::config(format!(
            "leading-term study needs exact sub-flows; '{}' has none",
            system.name()
        )));
    }
    let lead = leading_error_commutator(system, state)?;
    grid.iter()
        .map(|&gamma| {
            let cfg = SchemeConfig::new(Scheme::LieTrotter, SubstepMode::Exact, gamma);
            let lt = lie_trotter_step(system, state, &cfg)?;
            let reference = reference_solution(system, state, gamma)?;
            let err = reference.positions.sub(&lt.positions)?;
            let residual = err.sub(&lead.scale(gamma * gamma))?.max_abs();
            Ok(ResidualSample {
                gamma,
                lt_error: err.max_abs(),
                residual,
                floor: ROUNDING_FLOOR_FACTOR * f64::EPSILON * reference.positions.max_abs(),
            })
        })
        .collect()
}

/// Order of `‖(S_{F+G}^γ − LT^γ)(x) − γ² · commutator(x)‖∞`; third order when
/// the commutator is the correct leading term.
pub fn leading_term_residual_study(
    system: &dyn SplitSystem,
    state: &ParticleState,
    grid: &[f64],
) -> Result<OrderEstimate> {
    let samples = measure_leading_term_residuals(system, state, grid)?;
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.gamma, s.residual)).collect();
    let usable: Vec<bool> = samples.iter().map(|s| s.residual > s.floor).collect();
    fit_power_law(&pairs, &usable)
}

pub const CSV_HEADER: &str = "gamma,abs_error,scheme,substep_mode,system";

/// Writes samples as `gamma,abs_error,scheme,substep_mode,system` with 17 significant digits.
pub fn write_csv(
    mut out: impl Write,
    samples: &[ErrorSample],
    config: &SchemeConfig,
    system: &str,
) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for s in samples {
        writeln!(
            out,
            "{:.16e},{:.16e},{},{},{}",
            s.gamma,
            s.abs_error,
            config.scheme.label(),
            config.substeps.label(),
            system
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::system::{FnSystem, LinearSplit, ShippedSystem};

    fn all_usable(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn planted_square_law() {
        let s: Vec<(f64, f64)> = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
            .iter()
            .map(|&g| (g, g * g))
            .collect();
        let fit = fit_power_law(&s, &all_usable(5)).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_cubic_law() {
        let s: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&g| (g, 3.0 * g * g * g))
            .collect();
        let fit = fit_power_law(&s, &all_usable(4)).unwrap();
        assert!((fit.slope - 3.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn too_few_usable_samples() {
        let s = [(0.1, 1.0), (0.01, 0.1), (0.001, 0.01), (0.0001, 0.001)];
        let err = fit_power_law(&s, &[true, true, false, false]).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientData {
                usable: 2,
                total: 4,
                ..
            }
        ));
    }

    #[test]
    fn grid_validation() {
        let sys = ShippedSystem::Scalar.build();
        let x = ShippedSystem::Scalar.initial_state();
        let cfg = SchemeConfig::new(Scheme::LieTrotter, SubstepMode::Exact, 1.0);
        assert!(order_study(sys.as_ref(), &x, &cfg, &[0.1, 0.05, 0.02]).is_err());
        assert!(order_study(sys.as_ref(), &x, &cfg, &[0.1, 0.05, 0.02, 0.01]).is_err());
        let g = gamma_grid(1e-3, 1e-1, 8).unwrap();
        assert_eq!(g.len(), 8);
        assert!(validate_grid(&g).is_ok());
    }

    #[test]
    fn commutator_vanishes_for_commuting_fields() {
        let sys = ShippedSystem::Commuting.build();
        let c = leading_error_commutator(sys.as_ref(), &ShippedSystem::Commuting.initial_state())
            .unwrap();
        assert!(c.max_abs() < 1e-8, "{}", c.max_abs());
        let sys = ShippedSystem::Scalar.build();
        let c =
            leading_error_commutator(sys.as_ref(), &ShippedSystem::Scalar.initial_state()).unwrap();
        assert!(c.max_abs() < 1e-8);
    }

    #[test]
    fn commutator_matches_linear_formula() {
        // For F = xA, G = xB: ½ x (BA − AB).
        let sys = ShippedSystem::NonCommuting.build();
        let x = ShippedSystem::NonCommuting.initial_state();
        let (a, b) = sys.linear_generators().unwrap();
        let exact = x
            .positions
            .matmul(&b.matmul(&a).unwrap().sub(&a.matmul(&b).unwrap()).unwrap())
            .unwrap()
            .scale(0.5);
        let c = leading_error_commutator(sys.as_ref(), &x).unwrap();
        assert!(c.max_abs_diff(&exact).unwrap() < 1e-8);
    }

    #[test]
    fn commutator_is_the_error_limit() {
        // Richardson extrapolation of err(γ)/γ² towards γ = 0.
        let sys = ShippedSystem::NonCommuting.build();
        let x = ShippedSystem::NonCommuting.initial_state();
        let scaled = |gamma: f64| {
            let cfg = SchemeConfig::new(Scheme::LieTrotter, SubstepMode::Exact, gamma);
            let lt = lie_trotter_step(sys.as_ref(), &x, &cfg).unwrap();
            let r = reference_solution(sys.as_ref(), &x, gamma).unwrap();
            r.positions
                .sub(&lt.positions)
                .unwrap()
                .scale(1.0 / (gamma * gamma))
        };
        let (e1, e2) = (scaled(2e-3), scaled(1e-3));
        // err/γ² = C + D γ + O(γ²): 2·e(γ/2) − e(γ) removes D.
        let extrapolated = e2.scale(2.0).sub(&e1).unwrap();
        let c = leading_error_commutator(sys.as_ref(), &x).unwrap();
        assert!(extrapolated.max_abs_diff(&c).unwrap() < 1e-5);
    }

    #[test]
    fn lie_trotter_exact_is_second_order() {
        let sys = ShippedSystem::NonCommuting.build();
        let x = ShippedSystem::NonCommuting.initial_state();
        let cfg = SchemeConfig::new(Scheme::LieTrotter, SubstepMode::Exact, 1.0);
        let fit = order_study(sys.as_ref(), &x, &cfg, &gamma_grid(1e-3, 1e-1, 8).unwrap()).unwrap();
        assert!((1.8..=2.2).contains(&fit.slope), "{fit:?}");
    }

    #[test]
    fn strang_exact_is_third_order() {
        let sys = ShippedSystem::NonCommuting.build();
        let x = ShippedSystem::NonCommuting.initial_state();
        let cfg = SchemeConfig::new(Scheme::StrangMarchuk, SubstepMode::Exact, 1.0);
        let fit = order_study(sys.as_ref(), &x, &cfg, &gamma_grid(1e-3, 1e-1, 8).unwrap()).unwrap();
        assert!((2.7..=3.3).contains(&fit.slope), "{fit:?}");
    }

    #[test]
    fn commuting_lie_trotter_is_exact_to_rounding() {
        let sys = ShippedSystem::Commuting.build();
        let x = ShippedSystem::Commuting.initial_state();
        let cfg = SchemeConfig::new(Scheme::LieTrotter, SubstepMode::Exact, 1.0);
        let samples =
            measure_local_errors(sys.as_ref(), &x, &cfg, &gamma_grid(1e-3, 1e-1, 8).unwrap())
                .unwrap();
        match fit_order(&samples) {
            Ok(fit) => assert!(fit.slope >= 2.9, "{fit:?}"),
            Err(Error::InsufficientData { .. }) => {
                assert!(samples.iter().all(|s| !s.usable()));
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn euler_substeps_are_consistent() {
        for sys in [ShippedSystem::NonCommuting, ShippedSystem::Nonlinear] {
            let s = sys.build();
            let x = sys.initial_state();
            for scheme in [Scheme::LieTrotter, Scheme::StrangMarchuk] {
                let cfg = SchemeConfig::new(scheme, SubstepMode::Euler, 1.0);
                let fit =
                    order_study(s.as_ref(), &x, &cfg, &gamma_grid(1e-3, 1e-1, 6).unwrap()).unwrap();
                assert!(fit.slope >= 1.8, "{} {scheme}: {fit:?}", sys.label());
            }
        }
    }

    #[test]
    fn residual_is_third_order() {
        let sys = ShippedSystem::NonCommuting.build();
        let x = ShippedSystem::NonCommuting.initial_state();
        let fit =
            leading_term_residual_study(sys.as_ref(), &x, &gamma_grid(1e-3, 1e-1, 8).unwrap())
                .unwrap();
        assert!(fit.slope >= 2.7, "{fit:?}");
    }

    #[test]
    fn planted_cubic_residual() {
        // Exact flows whose composition misses the true flow by exactly γ³ in every entry:
        // F = 0 with the identity flow, G = 1 with a flow that overshoots by dt³.
        let sys = FnSystem::new(
            "planted",
            |x, _| Ok(Matrix::zeros(x.rows(), x.cols())),
            |x, _| Ok(Matrix::filled(x.rows(), x.cols(), 1.0)),
        )
        .with_flows(
            |x, _, _| Ok(x.clone()),
            |x, _, dt| Ok(x.map(|v| v + dt - dt * dt * dt)),
        );
        let x = ParticleState::at_zero(Matrix::scalar(0.0)).unwrap();
        let fit =
            leading_term_residual_study(&sys, &x, &gamma_grid(1e-2, 1.0, 6).unwrap()).unwrap();
        assert!((fit.slope - 3.0).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn residual_equals_error_when_commutator_vanishes() {
        let sys = LinearSplit::new("c", Matrix::scalar(0.7), Matrix::scalar(-0.2)).unwrap();
        let x = ParticleState::at_zero(Matrix::scalar(1.3)).unwrap();
        let rs =
            measure_leading_term_residuals(&sys, &x, &gamma_grid(1e-3, 1e-1, 5).unwrap()).unwrap();
        for r in rs {
            assert!((r.residual - r.lt_error).abs() <= 1e-8 * r.gamma * r.gamma);
        }
    }

    #[test]
    fn csv_layout() {
        let sys = ShippedSystem::NonCommuting.build();
        let x = ShippedSystem::NonCommuting.initial_state();
        let cfg = SchemeConfig::new(Scheme::LieTrotter, SubstepMode::Exact, 1.0);
        let samples =
            measure_local_errors(sys.as_ref(), &x, &cfg, &gamma_grid(1e-3, 1e-1, 4).unwrap())
                .unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &samples, &cfg, "noncommuting").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(
            lines[1].starts_with("1.0000000000000001e-1,"),
            "{}",
            lines[1]
        );
        assert!(lines[1].ends_with(",lt,exact,noncommuting"));
        let back: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, samples[1].abs_error);
    }
}
