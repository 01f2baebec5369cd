//! Direct density-matrix simulation of the GKSL equation with controls,
//! co-propagation of ∂_ωρ, and the SLD quantum Fisher information.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSnapshot, ParametricChannel};
use crate::error::{Error, Result};
use crate::operator::{eigh, eigvalsh, unitarity_defect, OperatorMatrix, C64};
use crate::quadrature::{integrate, QuadratureOptions};

/// Trace error above which propagation aborts.
pub const TRACE_ABORT: f64 = 1e-6;
/// Most negative eigenvalue of ρ tolerated before propagation aborts.
pub const POSITIVITY_ABORT: f64 = -1e-6;
/// Eigenvalue-pair cutoff in the SLD sum.
pub const QFI_CUTOFF: f64 = 1e-12;

pub type ControlFn = Arc<dyn Fn(f64) -> OperatorMatrix + Send + Sync>;

/// Instantaneous unitary kicks plus an optional continuous control Hamiltonian.
///
/// A kick at time τ acts on the state reached at τ, before evolution continues.
#[derive(Clone, Default)]
pub struct ControlSchedule {
    pub kicks: Vec<(f64, OperatorMatrix)>,
    pub hamiltonian: Option<ControlFn>,
}

impl fmt::Debug for ControlSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSchedule")
            .field("kicks", &self.kicks.len())
            .field("hamiltonian", &self.hamiltonian.is_some())
            .finish()
    }
}

impl ControlSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for w in self.kicks.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(Error::InvalidConfig(format!("control times not sorted ({} after {})", w[1].0, w[0].0)));
            }
        }
        for (t, u) in &self.kicks {
            if u.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: u.dim() });
            }
            let defect = unitarity_defect(u);
            if defect > 1e-10 {
                return Err(Error::InvalidConfig(format!("control at t={t} is not unitary (defect {defect:.3e})")));
            }
        }
        Ok(())
    }

    fn hamiltonian_at(&self, t: f64) -> Option<OperatorMatrix> {
        self.hamiltonian.as_ref().map(|h| h(t).hermitize())
    }
}

/// ρ_ω(t) together with ∂_ωρ_ω(t).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityState {
    pub rho: OperatorMatrix,
    pub drho: OperatorMatrix,
    pub t: f64,
}

impl DensityState {
    /// Validated start state at t = 0 with ∂_ωρ = 0.
    pub fn new(rho: OperatorMatrix) -> Result<Self> {
        let defect = rho.hermiticity_defect();
        if defect > 1e-10 {
            return Err(Error::NotHermitian { deviation: defect });
        }
        let tr = rho.trace().re;
        if (tr - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidConfig(format!("initial state has trace {tr}")));
        }
        let min = eigvalsh(&rho)[0];
        if min < -1e-10 {
            return Err(Error::InvalidConfig(format!("initial state has negative eigenvalue {min:.3e}")));
        }
        let d = rho.dim();
        Ok(Self { rho: rho.hermitize(), drho: OperatorMatrix::zeros(d), t: 0.0 })
    }

    /// |ψ⟩⟨ψ| for a normalized copy of ψ.
    pub fn pure(psi: &DVector<C64>) -> Result<Self> {
        let norm = psi.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidConfig("zero state vector".into()));
        }
        let v = psi / C64::new(norm, 0.0);
        Self::new(OperatorMatrix::outer(&v, &v))
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    pub fn trace_error(&self) -> f64 {
        (self.rho.trace() - C64::new(1.0, 0.0)).norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        eigvalsh(&self.rho)[0]
    }

    fn kick(&mut self, u: &OperatorMatrix) {
        self.rho = u.sandwich(&self.rho).hermitize();
        self.drho = u.sandwich(&self.drho).hermitize();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationOptions {
    /// Largest step; segments between stops are split into equal steps no longer than this.
    pub dt: f64,
    pub with_derivative: bool,
    /// Rescale ρ to unit trace (and ∂_ωρ to zero trace) after every step.
    pub renormalize: bool,
}

impl PropagationOptions {
    pub fn new(dt: f64) -> Self {
        Self { dt, with_derivative: true, renormalize: true }
    }
}

/// Worst values seen along a propagation; trace errors are measured before renormalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub max_trace_error: f64,
    pub min_eigenvalue: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self { steps: 0, max_trace_error: 0.0, min_eigenvalue: f64::INFINITY }
    }
}

fn lindblad(snap: &ChannelSnapshot, h: &OperatorMatrix, rho: &OperatorMatrix) -> OperatorMatrix {
    let i = C64::new(0.0, 1.0);
    let mut out = h.commutator(rho) * (-i);
    for l in &snap.jumps {
        let ll = l.dagger() * l;
        out += &l.sandwich(rho);
        out -= &(ll.anticommutator(rho) * 0.5);
    }
    out
}

/// ∂_ω of the generator applied to ρ, from H′ and L′.
fn lindblad_derivative(snap: &ChannelSnapshot, rho: &OperatorMatrix) -> OperatorMatrix {
    let i = C64::new(0.0, 1.0);
    let mut out = snap.h_prime.commutator(rho) * (-i);
    for (l, lp) in snap.jumps.iter().zip(&snap.jump_primes) {
        if lp.max_abs() == 0.0 {
            continue;
        }
        let ld = l.dagger();
        let lpd = lp.dagger();
        out += &(lp * rho * &ld);
        out += &(l * rho * &lpd);
        let sym = &lpd * l + &ld * lp;
        out -= &(sym.anticommutator(rho) * 0.5);
    }
    out
}

/// Fixed-step RK4 integrator of the GKSL equation for one channel and control schedule.
pub struct Propagator<'a> {
    pub channel: &'a ParametricChannel,
    pub omega: f64,
    pub controls: &'a ControlSchedule,
    pub opts: PropagationOptions,
}

impl<'a> Propagator<'a> {
    pub fn new(channel: &'a ParametricChannel, omega: f64, controls: &'a ControlSchedule, opts: PropagationOptions) -> Result<Self> {
        if !(opts.dt > 0.0) || !opts.dt.is_finite() {
            return Err(Error::InvalidConfig(format!("time step must be positive, got {}", opts.dt)));
        }
        controls.validate(channel.dim)?;
        Ok(Self { channel, omega, controls, opts })
    }

    fn rates(&self, t: f64, rho: &OperatorMatrix, drho: &OperatorMatrix) -> Result<(OperatorMatrix, OperatorMatrix)> {
        let snap = self.channel.evaluate(self.omega, t)?;
        let h = match self.controls.hamiltonian_at(t) {
            Some(hc) => &snap.h + &hc,
            None => snap.h.clone(),
        };
        let r = lindblad(&snap, &h, rho);
        let dr = if self.opts.with_derivative {
            lindblad(&snap, &h, drho) + lindblad_derivative(&snap, rho)
        } else {
            OperatorMatrix::zeros(rho.dim())
        };
        Ok((r, dr))
    }

    /// One classical RK4 step of length `h`, without checks.
    pub fn rk4_step(&self, state: &mut DensityState, h: f64) -> Result<()> {
        let t = state.t;
        let (r, d) = (&state.rho, &state.drho);
        let (k1, m1) = self.rates(t, r, d)?;
        let (k2, m2) = self.rates(t + 0.5 * h, &(r + &k1 * (0.5 * h)), &(d + &m1 * (0.5 * h)))?;
        let (k3, m3) = self.rates(t + 0.5 * h, &(r + &k2 * (0.5 * h)), &(d + &m2 * (0.5 * h)))?;
        let (k4, m4) = self.rates(t + h, &(r + &k3 * h), &(d + &m3 * h))?;
        let w = h / 6.0;
        state.rho = (r + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w).hermitize();
        state.drho = (d + (m1 + m2 * 2.0 + m3 * 2.0 + m4) * w).hermitize();
        state.t = t + h;
        Ok(())
    }

    fn check(&self, state: &mut DensityState, diag: &mut Diagnostics) -> Result<()> {
        let trace_error = state.trace_error();
        let min = state.min_eigenvalue();
        diag.max_trace_error = diag.max_trace_error.max(trace_error);
        diag.min_eigenvalue = diag.min_eigenvalue.min(min);
        if !(trace_error <= TRACE_ABORT) {
            return Err(Error::StateCheck { t: state.t, message: format!("trace drifted by {trace_error:.3e}; reduce the time step") });
        }
        if !(min >= POSITIVITY_ABORT) {
            return Err(Error::StateCheck { t: state.t, message: format!("eigenvalue {min:.3e} below zero; reduce the time step") });
        }
        if self.opts.renormalize {
            let tr = state.rho.trace().re;
            state.rho = state.rho.scale_real(1.0 / tr);
            let d = state.dim();
            let shift = state.drho.trace().re / d as f64;
            state.drho -= &(OperatorMatrix::identity(d) * shift);
        }
        Ok(())
    }

    /// Evolves `state` to `t_final`, landing exactly on kick times and on
    /// `samples`, where `on_sample` is called (after any kick at that time).
    pub fn run(
        &self,
        mut state: DensityState,
        t_final: f64,
        samples: &[f64],
        on_sample: &mut dyn FnMut(&DensityState, &Diagnostics),
    ) -> Result<(DensityState, Diagnostics)> {
        if !(t_final >= state.t) || !t_final.is_finite() {
            return Err(Error::InvalidConfig(format!("final time {t_final} before start {}", state.t)));
        }
        if state.dim() != self.channel.dim {
            return Err(Error::DimensionMismatch { expected: self.channel.dim, found: state.dim() });
        }
        let mut stops: Vec<f64> = samples.iter().copied().filter(|&s| s >= state.t && s <= t_final).collect();
        stops.extend(self.controls.kicks.iter().map(|k| k.0).filter(|&s| s >= state.t && s <= t_final));
        stops.push(t_final);
        stops.sort_by(f64::total_cmp);
        stops.dedup();
        let t_start = state.t;
        let mut kicks = self.controls.kicks.iter().filter(|k| k.0 >= t_start).peekable();
        let mut diag = Diagnostics::default();
        for stop in stops {
            let span = stop - state.t;
            if span > 0.0 {
                let n = ((span / self.opts.dt) - 1e-9).ceil().max(1.0) as usize;
                let h = span / n as f64;
                let t0 = state.t;
                for k in 0..n {
                    self.rk4_step(&mut state, h)?;
                    state.t = if k + 1 == n { stop } else { t0 + (k + 1) as f64 * h };
                    diag.steps += 1;
                    self.check(&mut state, &mut diag)?;
                }
            }
            while let Some((_, u)) = kicks.next_if(|k| k.0 <= stop) {
                state.kick(u);
            }
            if samples.contains(&stop) {
                on_sample(&state, &diag);
            }
        }
        Ok((state, diag))
    }
}

/// ρ(T) from ρ(0) = `rho0`; ∂_ωρ is not tracked.
pub fn propagate(
    channel: &ParametricChannel,
    omega: f64,
    rho0: &OperatorMatrix,
    controls: &ControlSchedule,
    t_final: f64,
    dt: f64,
) -> Result<DensityState> {
    let opts = PropagationOptions { with_derivative: false, ..PropagationOptions::new(dt) };
    let p = Propagator::new(channel, omega, controls, opts)?;
    Ok(p.run(DensityState::new(rho0.clone())?, t_final, &[], &mut |_, _| {})?.0)
}

/// ρ(T) and ∂_ωρ(T) from ρ(0) = `rho0`, ∂_ωρ(0) = 0.
pub fn propagate_with_derivative(
    channel: &ParametricChannel,
    omega: f64,
    rho0: &OperatorMatrix,
    controls: &ControlSchedule,
    t_final: f64,
    dt: f64,
) -> Result<DensityState> {
    let p = Propagator::new(channel, omega, controls, PropagationOptions::new(dt))?;
    Ok(p.run(DensityState::new(rho0.clone())?, t_final, &[], &mut |_, _| {})?.0)
}

/// SLD quantum Fisher information of (ρ, ∂_ωρ), dropping eigenvalue pairs with λ_j + λ_k ≤ `cutoff`.
pub fn qfi_with_cutoff(rho: &OperatorMatrix, drho: &OperatorMatrix, cutoff: f64) -> f64 {
    let (lam, v) = eigh(rho);
    let d = OperatorMatrix::new(v.adjoint() * drho.matrix() * &v).expect("square by construction");
    let mut q = 0.0;
    for j in 0..lam.len() {
        for k in 0..lam.len() {
            let s = lam[j] + lam[k];
            if s > cutoff {
                q += 2.0 * d.get(j, k).norm_sqr() / s;
            }
        }
    }
    q
}

pub fn qfi_of_state(state: &DensityState) -> f64 {
    qfi_with_cutoff(&state.rho, &state.drho, QFI_CUTOFF)
}

/// One row of the `oracle` output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSample {
    pub t: f64,
    pub qfi: f64,
    pub trace_err: f64,
    pub min_eig: f64,
}

/// QFI of the simulated protocol at each of `sample_times`.
pub fn oracle_trajectory(
    channel: &ParametricChannel,
    omega: f64,
    rho0: &OperatorMatrix,
    controls: &ControlSchedule,
    dt: f64,
    sample_times: &[f64],
) -> Result<Vec<OracleSample>> {
    let t_final = sample_times.iter().copied().fold(0.0, f64::max);
    let p = Propagator::new(channel, omega, controls, PropagationOptions::new(dt))?;
    let start = DensityState::new(rho0.clone())?;
    let mut out = Vec::with_capacity(sample_times.len());
    if sample_times.contains(&0.0) {
        out.push(OracleSample { t: 0.0, qfi: 0.0, trace_err: start.trace_error(), min_eig: start.min_eigenvalue() });
    }
    p.run(start, t_final, sample_times, &mut |s, _| {
        if s.t > 0.0 {
            out.push(OracleSample { t: s.t, qfi: qfi_of_state(s), trace_err: s.trace_error(), min_eig: s.min_eigenvalue() });
        }
    })?;
    Ok(out)
}

/// Noiseless optimally controlled QFI, [∫₀ᵀ (λ_max(H′) − λ_min(H′)) dt]².
pub fn coherent_optimal_qfi(channel: &ParametricChannel, omega: f64, t_final: f64) -> Result<f64> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidConfig(format!("final time must be finite and non-negative, got {t_final}")));
    }
    let mut gap = |t: f64| -> Result<f64> {
        let snap = channel.evaluate(omega, t)?;
        let ev = eigvalsh(&snap.h_prime);
        Ok(ev[ev.len() - 1] - ev[0])
    };
    let opts = QuadratureOptions { rel_tol: 1e-11, abs_tol: 1e-14, max_depth: 50 };
    let q = integrate(&mut gap, 0.0, t_final, &channel.breakpoints(omega, 0.0, t_final), &opts)?;
    Ok(q.value * q.value)
}
