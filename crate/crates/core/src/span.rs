//! Lindblad span membership and DHLS / DHNLS classification.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSnapshot, ParametricChannel};
use crate::error::{Error, Result};
use crate::operator::{decompose_hermitian, project_complement, real_span_orthonormalize, HermitianBasis, OperatorMatrix, I};

pub const DEFAULT_SPAN_TOL: f64 = 1e-8;

/// Fraction of post-transient grid points allowed to disagree with a verdict.
pub const EXCEPTION_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "DHLS")]
    Dhls,
    #[serde(rename = "DHNLS")]
    Dhnls,
    #[serde(rename = "mixed")]
    Mixed,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Dhls => "DHLS",
            Regime::Dhnls => "DHNLS",
            Regime::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug)]
pub struct SpanPoint {
    pub t: f64,
    pub in_span: bool,
    pub residual_norm: f64,
    pub h_prime_norm: f64,
    pub basis_len: usize,
}

#[derive(Clone, Debug)]
pub struct SpanReport {
    pub points: Vec<SpanPoint>,
    pub transient_cutoff: f64,
    pub in_span_fraction: f64,
    pub overall_regime: Regime,
}

/// Real generators I, L_j^H, iL_j^AH, (L_j†L_k)^H, i(L_j†L_k)^AH.
pub fn span_generators(jumps: &[OperatorMatrix], dim: usize) -> Vec<OperatorMatrix> {
    let mut gens = vec![OperatorMatrix::identity(dim)];
    let mut push = |x: &OperatorMatrix| {
        let (h, ah) = decompose_hermitian(x);
        gens.push(h);
        gens.push(ah.scale(I));
    };
    for l in jumps {
        push(l);
    }
    for lj in jumps {
        let ljd = lj.dagger();
        for lk in jumps {
            push(&(&ljd * lk));
        }
    }
    gens
}

pub fn span_basis_of(snapshot: &ChannelSnapshot, tol: f64) -> Result<HermitianBasis> {
    real_span_orthonormalize(&span_generators(&snapshot.jumps, snapshot.dim()), tol)
}

pub fn lindblad_span_basis(channel: &ParametricChannel, omega: f64, t: f64, tol: f64) -> Result<HermitianBasis> {
    span_basis_of(&channel.evaluate(omega, t)?, tol)
}

/// Membership of `x` in the span with the relative tolerance rule; x = 0 counts as inside.
pub fn membership(x: &OperatorMatrix, basis: &HermitianBasis, tol: f64) -> Result<(bool, f64)> {
    let residual = project_complement(x, basis)?.hs_norm();
    let norm = x.hs_norm();
    Ok((norm == 0.0 || residual <= tol * norm, residual))
}

pub fn h_prime_in_span(channel: &ParametricChannel, omega: f64, t: f64, tol: f64) -> Result<(bool, f64)> {
    let snap = channel.evaluate(omega, t)?;
    membership(&snap.h_prime, &span_basis_of(&snap, tol)?, tol)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    H,
    HPrime,
}

pub fn h_perp_of(snapshot: &ChannelSnapshot, which: Which, tol: f64) -> Result<OperatorMatrix> {
    let basis = span_basis_of(snapshot, tol)?;
    let x = match which {
        Which::H => &snapshot.h,
        Which::HPrime => &snapshot.h_prime,
    };
    project_complement(x, &basis)
}

pub fn h_perp(channel: &ParametricChannel, omega: f64, t: f64, which: Which) -> Result<OperatorMatrix> {
    h_perp_of(&channel.evaluate(omega, t)?, which, DEFAULT_SPAN_TOL)
}

pub fn default_transient_cutoff(omega: f64) -> f64 {
    4.0 * PI / omega.abs()
}

/// Classifies a channel on a time grid.
///
/// Points past `transient_cutoff` where H′ vanishes, or whose verdict differs
/// from both neighbours, are skipped. The verdict
/// is DHLS when at most a fraction [`EXCEPTION_FRACTION`] of the remaining
/// points lie outside the span, DHNLS when at most that fraction lies inside,
/// and mixed when both sets are larger.
pub fn classify(channel: &ParametricChannel, omega: f64, t_grid: &[f64], transient_cutoff: f64, tol: f64) -> Result<SpanReport> {
    if t_grid.is_empty() {
        return Err(Error::InvalidConfig("classification grid is empty".into()));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("classification grid must be sorted".into()));
    }
    let points = t_grid
        .par_iter()
        .map(|&t| {
            let snap = channel.evaluate(omega, t)?;
            let basis = span_basis_of(&snap, tol)?;
            let (in_span, residual_norm) = membership(&snap.h_prime, &basis, tol)?;
            Ok(SpanPoint { t, in_span, residual_norm, h_prime_norm: snap.h_prime.hs_norm(), basis_len: basis.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = points.iter().map(|p| p.h_prime_norm).fold(0.0, f64::max);
    // a verdict that differs from both grid neighbours marks an isolated zero, not a set of positive measure
    let isolated = |k: usize| {
        k > 0 && k + 1 < points.len() && points[k - 1].in_span != points[k].in_span && points[k + 1].in_span != points[k].in_span
    };
    let counted: Vec<&SpanPoint> = points
        .iter()
        .enumerate()
        .filter(|(k, p)| p.t > transient_cutoff && p.h_prime_norm > 1e-14 * scale && !isolated(*k))
        .map(|(_, p)| p)
        .collect();
    if counted.is_empty() {
        let past = points.iter().any(|p| p.t > transient_cutoff);
        if !past {
            return Err(Error::InvalidConfig(format!(
                "no grid points beyond the transient cutoff {transient_cutoff}"
            )));
        }
        // H′ vanishes identically after the transient
        return Ok(SpanReport { points, transient_cutoff, in_span_fraction: 1.0, overall_regime: Regime::Dhls });
    }
    let inside = counted.iter().filter(|p| p.in_span).count() as f64 / counted.len() as f64;
    let overall_regime = if 1.0 - inside <= EXCEPTION_FRACTION {
        Regime::Dhls
    } else if inside <= EXCEPTION_FRACTION {
        Regime::Dhnls
    } else {
        Regime::Mixed
    };
    Ok(SpanReport { points, transient_cutoff, in_span_fraction: inside, overall_regime })
}

/// Uniform grid of `n` points on [0, t_max].
pub fn uniform_grid(t_max: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![t_max];
    }
    (0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect()
}
