//! Long-time behaviour: the leading power of H′ in t, the two asymptotic
//! branches of the integrated bound, catalog closed forms, and log–log fits.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bound::{solve_constrained_alpha, solve_min_beta, BoundTrajectory, SolverOptions};
use crate::channel::{ChannelSnapshot, ModelKind, NoiseKind, ParametricChannel, SymbolicOperator, Term};
use crate::error::{Error, Result};
use crate::operator::{op_norm, OperatorMatrix};
use crate::quadrature::{integrate_cumulative, QuadratureOptions};
use crate::span::Regime;

/// H′(ω,t) = tⁿ H₀(t) + remainder, with H₀ bounded and the remainder of lower order in t.
#[derive(Clone, Debug)]
pub struct AsymptoticForm {
    pub omega: f64,
    pub n: u32,
    pub h0: SymbolicOperator,
    pub remainder: SymbolicOperator,
}

impl AsymptoticForm {
    /// Power of t bounding the remainder; −1 when H′ is exactly tⁿ H₀.
    pub fn remainder_order(&self) -> i64 {
        self.n as i64 - 1
    }

    pub fn h0(&self, t: f64) -> OperatorMatrix {
        self.h0.evaluate(self.omega, t)
    }

    /// tⁿ H₀(t).
    pub fn leading(&self, t: f64) -> OperatorMatrix {
        self.h0(t) * t.powi(self.n as i32)
    }
}

fn drop_vanishing(op: &SymbolicOperator, omega: f64) -> Vec<Term> {
    op.terms.iter().filter(|t| !(omega == 0.0 && t.omega_power > 0)).cloned().collect()
}

/// Extracts the leading power of t in the symbolic ∂_ω H at `omega`.
pub fn leading_expansion(channel: &ParametricChannel, omega: f64) -> Result<AsymptoticForm> {
    let h_prime = channel
        .symbolic_hamiltonian_deriv()
        .ok_or_else(|| Error::Unsupported("leading expansion needs a channel built from symbolic terms".into()))?;
    let terms = drop_vanishing(&h_prime.simplified(), omega);
    let mut powers: Vec<u32> = terms.iter().map(|t| t.t_power).collect();
    powers.sort_unstable();
    powers.dedup();
    // sample a few signal periods (or a unit window when ω = 0) at incommensurate times
    let span = if omega != 0.0 { 8.0 * PI / omega.abs() } else { 8.0 };
    let samples: Vec<f64> = (1..=97).map(|k| span * (k as f64 * 0.618_033_988_75).fract()).collect();
    for &p in powers.iter().rev() {
        let group: Vec<Term> = terms.iter().filter(|t| t.t_power == p).map(|t| Term { t_power: 0, ..t.clone() }).collect();
        let h0 = SymbolicOperator { dim: h_prime.dim, terms: group };
        let norms: Vec<f64> = samples.iter().map(|&t| op_norm(&h0.evaluate(omega, t))).collect();
        if norms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Unsupported(format!("leading coefficient of t^{p} is not bounded")));
        }
        let scale = terms.iter().map(|t| t.op.max_abs() * t.coeff.norm()).fold(0.0, f64::max);
        if norms.iter().all(|&v| v <= 1e-13 * scale) {
            continue;
        }
        let remainder = SymbolicOperator { dim: h_prime.dim, terms: terms.iter().filter(|t| t.t_power < p).cloned().collect() };
        return Ok(AsymptoticForm { omega, n: p, h0, remainder });
    }
    Err(Error::Unsupported("∂_ω H vanishes identically; no leading power".into()))
}

/// Snapshot whose H′ is replaced by tⁿ H₀(t) and whose jump derivatives are zero.
fn leading_snapshot(channel: &ParametricChannel, form: &AsymptoticForm, t: f64) -> Result<ChannelSnapshot> {
    let snap = channel.evaluate(form.omega, t)?;
    let zero = OperatorMatrix::zeros(snap.dim());
    Ok(ChannelSnapshot {
        h_prime: form.leading(t),
        jump_primes: vec![zero; snap.jump_count()],
        ..snap
    })
}

/// Per-time integrand of a branch: 4 min‖α₀‖ subject to β₀ = 0 (DHLS) or min‖β₀‖ (DHNLS).
pub fn branch_integrand(channel: &ParametricChannel, form: &AsymptoticForm, t: f64, regime: Regime, opts: &SolverOptions) -> Result<f64> {
    let snap = leading_snapshot(channel, form, t)?;
    match regime {
        Regime::Dhls => Ok(solve_constrained_alpha(&snap, opts)?.value),
        Regime::Dhnls => Ok(solve_min_beta(&snap, false, opts, None)?.u),
        Regime::Mixed => Err(Error::InvalidConfig("the asymptotic branches need a DHLS or DHNLS regime".into())),
    }
}

/// The asymptotic form of the integrated bound at time `t_final`:
/// ∫₀ᵀ 4 min‖α₀‖ dt (DHLS) or 4 [∫₀ᵀ min‖β₀‖ dt]² (DHNLS).
///
/// A DHLS request on a channel where β₀ = 0 is infeasible fails with the
/// offending time.
pub fn branch_integral(channel: &ParametricChannel, omega: f64, t_final: f64, regime: Regime) -> Result<f64> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidConfig(format!("final time must be finite and non-negative, got {t_final}")));
    }
    Ok(branch_trajectory(channel, omega, &[t_final], regime)?[0])
}

/// [`branch_integral`] at each of the sorted `times`.
pub fn branch_trajectory(channel: &ParametricChannel, omega: f64, times: &[f64], regime: Regime) -> Result<Vec<f64>> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig("sample times must be finite".into()));
    }
    let form = leading_expansion(channel, omega)?;
    let opts = SolverOptions::default();
    let t_final = times.last().copied().unwrap_or(0.0);
    let breaks = channel.breakpoints(omega, 0.0, t_final);
    let quad = QuadratureOptions { rel_tol: 1e-6, abs_tol: 1e-12, max_depth: 40 };
    let mut f = |t: f64| branch_integrand(channel, &form, t, regime, &opts);
    let running = integrate_cumulative(&mut f, 0.0, times, &breaks, &quad)?;
    Ok(running
        .into_iter()
        .map(|q| match regime {
            Regime::Dhnls => 4.0 * q * q,
            _ => q,
        })
        .collect())
}

/// Large-T closed forms of the catalog bounds. They do not depend on ω ≠ 0.
pub fn closed_form_reference(model: ModelKind, noise: NoiseKind, b: f64, omega: f64, epsilon: f64, t: f64) -> Result<f64> {
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::InvalidConfig(format!("closed forms need a finite non-zero ω, got {omega}")));
    }
    let b2 = b * b;
    match (model, noise) {
        (ModelKind::Ac | ModelKind::Rf, NoiseKind::DephasingX) => Ok(4.0 * b2 * t.powi(4) / (PI * PI)),
        (ModelKind::Ac | ModelKind::Rf, NoiseKind::SpontaneousEmission) if b2 == 0.0 => Ok(0.0),
        (ModelKind::Ac | ModelKind::Rf, NoiseKind::SpontaneousEmission) if !(epsilon > 0.0) => {
            Err(Error::InvalidConfig(format!("spontaneous-emission closed form needs ε > 0, got {epsilon}")))
        }
        (ModelKind::Ac, NoiseKind::SpontaneousEmission) => Ok(8.0 * b2 * t.powi(3) / (3.0 * epsilon)),
        (ModelKind::Rf, NoiseKind::SpontaneousEmission) => Ok(2.0 * b2 * (8.0 + 3.0 * PI) * t.powi(3) / (3.0 * PI * epsilon)),
        _ => Err(Error::Unsupported(format!("no closed form for {model:?} with {}", noise.name()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
    pub points: usize,
}

/// The last decade [T_max/10, T_max].
pub fn tail_window(t_max: f64) -> (f64, f64) {
    (t_max / 10.0, t_max)
}

/// Least-squares slope of log y against log t over the points with t in `window` and y > 0.
pub fn fit_power_law(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<ScalingFit> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidConfig(format!("fit window must satisfy 0 < lo < hi, got ({lo}, {hi})")));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, y)| **t >= lo * (1.0 - 1e-12) && **t <= hi * (1.0 + 1e-12) && **y > 0.0)
        .map(|(t, y)| (t.ln(), y.ln()))
        .collect();
    let n = pts.len();
    if n < 20 {
        return Err(Error::InvalidConfig(format!("fit window ({lo}, {hi}) holds {n} usable points, need at least 20")));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let ssr: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let stderr = (ssr / (nf - 2.0) / sxx).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    Ok(ScalingFit { exponent: slope, stderr, window, r_squared, points: n })
}

pub fn fit_exponent(trajectory: &BoundTrajectory, window: (f64, f64)) -> Result<ScalingFit> {
    let (t0, t1) = match (trajectory.points.first(), trajectory.points.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(Error::InvalidConfig("empty trajectory".into())),
    };
    if window.0 < t0 || window.1 > t1 * (1.0 + 1e-12) {
        return Err(Error::InvalidConfig(format!("fit window {window:?} outside trajectory range [{t0}, {t1}]")));
    }
    fit_power_law(&trajectory.times(), &trajectory.q_values(), window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_channel, ModelConfig, Trig};
    use crate::operator::pauli;
    use std::sync::Arc;

    fn catalog(model: ModelKind, noise: NoiseKind) -> ParametricChannel {
        build_channel(&ModelConfig::catalog(model, 1.0, 1.0, &[(noise, 0.1)])).unwrap()
    }

    #[test]
    fn ac_leading_power_is_one() {
        let c = catalog(ModelKind::Ac, NoiseKind::DephasingX);
        let f = leading_expansion(&c, 1.0).unwrap();
        assert_eq!(f.n, 1);
        assert_eq!(f.remainder_order(), 0);
        for t in [0.3f64, 1.7, 5.0] {
            let expected = pauli::z() * t.cos();
            assert!(op_norm(&(f.h0(t) - &expected)) < 1e-14);
        }
    }

    #[test]
    fn rf_leading_power_is_one() {
        let c = catalog(ModelKind::Rf, NoiseKind::SpontaneousEmission);
        let f = leading_expansion(&c, 1.0).unwrap();
        assert_eq!(f.n, 1);
        for t in [0.3f64, 1.7, 5.0] {
            let expected = pauli::x() * (-t.sin()) + pauli::z() * t.cos();
            assert!(op_norm(&(f.h0(t) - &expected)) < 1e-14);
        }
    }

    #[test]
    fn static_hamiltonian_has_power_zero() {
        let h = SymbolicOperator::new(2, vec![Term { omega_power: 1, ..Term::new(0.5, Trig::One, 0.0, pauli::z()) }]).unwrap();
        let c = ParametricChannel::symbolic("static", h, vec![]).unwrap();
        let f = leading_expansion(&c, 2.0).unwrap();
        assert_eq!(f.n, 0);
        assert!(op_norm(&(f.h0(3.0) - pauli::z() * 0.5)) < 1e-15);
        assert!(f.remainder.terms.is_empty());
    }

    #[test]
    fn mixed_powers_keep_the_highest() {
        // H = ω σ_y + sin(ωt) σ_z: H′ = σ_y + t cos(ωt) σ_z, leading t, remainder σ_y
        let h = SymbolicOperator::new(
            2,
            vec![Term { omega_power: 1, ..Term::new(1.0, Trig::One, 0.0, pauli::y()) }, Term::new(1.0, Trig::Sin, 1.0, pauli::z())],
        )
        .unwrap();
        let c = ParametricChannel::symbolic("mixed", h, vec![]).unwrap();
        let f = leading_expansion(&c, 1.3).unwrap();
        assert_eq!(f.n, 1);
        // remainder is O(t^0) on a log grid
        for k in 0..12 {
            let t = 10f64.powf(k as f64 / 2.0);
            let full = c.evaluate(1.3, t).unwrap().h_prime;
            let r = op_norm(&(full - f.leading(t)));
            assert!(r <= 1.0 + 1e-9 * t, "t={t} r={r}");
        }
    }

    #[test]
    fn closure_channels_are_rejected() {
        let z = |_: f64, _: f64| pauli::z();
        let c = ParametricChannel::from_functions("f", 2, Arc::new(z), Arc::new(z), vec![], vec![]).unwrap();
        assert!(matches!(leading_expansion(&c, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn parameter_free_hamiltonian_is_rejected() {
        let h = SymbolicOperator::constant(pauli::z());
        let c = ParametricChannel::symbolic("flat", h, vec![]).unwrap();
        assert!(leading_expansion(&c, 1.0).is_err());
    }

    #[test]
    fn closed_forms() {
        let v = closed_form_reference(ModelKind::Ac, NoiseKind::DephasingX, 1.0, 1.0, 0.1, 10.0).unwrap();
        assert!((v - 4052.847345693511).abs() < 1e-9);
        let v = closed_form_reference(ModelKind::Ac, NoiseKind::SpontaneousEmission, 1.0, 1.0, 0.1, 10.0).unwrap();
        assert!((v - 26666.666666666668).abs() < 1e-8);
        let v = closed_form_reference(ModelKind::Rf, NoiseKind::SpontaneousEmission, 1.0, 1.0, 0.1, 1.0).unwrap();
        assert!((v - 36.977).abs() < 1e-3);
        assert_eq!(closed_form_reference(ModelKind::Ac, NoiseKind::DephasingX, 0.0, 1.0, 0.1, 7.0).unwrap(), 0.0);
        assert!(closed_form_reference(ModelKind::Ac, NoiseKind::DephasingZ, 1.0, 1.0, 0.1, 7.0).is_err());
        assert!(closed_form_reference(ModelKind::Ac, NoiseKind::SpontaneousEmission, 1.0, 1.0, 0.0, 7.0).is_err());
    }

    #[test]
    fn dhnls_branch_matches_exact_integral() {
        // min‖β₀‖ = t|cos t|; ∫₀^{Nπ} t|cos t| dt = N²π exactly
        let n = 6.0;
        for model in [ModelKind::Ac, ModelKind::Rf] {
            let c = catalog(model, NoiseKind::DephasingX);
            let v = branch_integral(&c, 1.0, n * PI, Regime::Dhnls).unwrap();
            let exact = 4.0 * (n * n * PI).powi(2);
            assert!((v / exact - 1.0).abs() < 2e-6, "{model:?}: {v} vs {exact}");
        }
    }

    #[test]
    fn ac_dhls_branch_matches_exact_integral() {
        // 4 min‖α₀‖ = 16 t² cos²t / ε; ∫₀^{Nπ} t² cos²t dt = T³/6 + T/4
        let c = catalog(ModelKind::Ac, NoiseKind::SpontaneousEmission);
        let t = 5.0 * PI;
        let v = branch_integral(&c, 1.0, t, Regime::Dhls).unwrap();
        let exact = 16.0 / 0.1 * (t.powi(3) / 6.0 + t / 4.0);
        assert!((v / exact - 1.0).abs() < 2e-6, "{v} vs {exact}");
    }

    #[test]
    fn rf_dhls_branch_approaches_closed_form() {
        let c = catalog(ModelKind::Rf, NoiseKind::SpontaneousEmission);
        let t = 30.0 * PI;
        let v = branch_integral(&c, 1.0, t, Regime::Dhls).unwrap();
        let reference = closed_form_reference(ModelKind::Rf, NoiseKind::SpontaneousEmission, 1.0, 1.0, 0.1, t).unwrap();
        assert!((v / reference - 1.0).abs() < 0.02, "{}", v / reference);
    }

    #[test]
    fn dhls_branch_on_dhnls_channel_fails() {
        let c = catalog(ModelKind::Ac, NoiseKind::DephasingX);
        assert!(matches!(branch_integral(&c, 1.0, 3.0, Regime::Dhls), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn fit_recovers_power_law() {
        let times: Vec<f64> = (1..=200).map(|k| k as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 3.0 * t * t).collect();
        let fit = fit_power_law(&times, &values, tail_window(200.0)).unwrap();
        assert!((fit.exponent - 2.0).abs() < 1e-12);
        assert!(fit.stderr < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_needs_twenty_points() {
        let times: Vec<f64> = (1..=15).map(|k| k as f64).collect();
        assert!(fit_power_law(&times, &times, (1.0, 15.0)).is_err());
    }
}
