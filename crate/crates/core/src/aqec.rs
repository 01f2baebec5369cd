//! Approximate error correction for noise that hides the signal (DHLS):
//! ε-perturbed codes in probe ⊗ ancilla ⊗ register, recoveries that pair
//! orthonormal bases of the two register branches, and the logical
//! signal-to-dephasing ratio.
//!
//! Code vectors are |c_b⟩ = vec(A_b) ⊗ |b⟩ with vec(A)[i·d + j] = A_ij, so an
//! operator X on the probe acts as vec(A) ↦ vec(XA). For small ε the logical
//! dephasing rate is quadratic in ε and the signal linear, so the ratio has a
//! finite limit that is maximized over (C, D) by a Rayleigh quotient.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::channel::{ChannelSnapshot, ParametricChannel};
use crate::dynamics::{ControlSchedule, DensityState, PropagationOptions, Propagator};
use crate::error::{Error, Result};
use crate::operator::{eigh, OperatorMatrix, C64, ONE, ZERO};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::qec::{code_update_unitary, complete_basis, lift, qec_step, CodeSpace, RecoveryMap};
use crate::quadrature::{integrate_cumulative, QuadratureOptions};

/// Tolerance for the constraints on C and D.
pub const CONSTRAINT_TOL: f64 = 1e-10;

/// Population transfer or off-axis rotation rate above which a tomography
/// estimate is flagged as not of pure-dephasing form.
/// Weight of the maximally mixed state in every designed reduced probe state
/// C C†. Pure probe states make both the signal and the logical dephasing
/// vanish, so the design stays this far inside the state space.
pub const MIXEDNESS_FLOOR: f64 = 0.05;
pub const DEPHASING_FORM_TOL: f64 = 1e-6;

/// ε-family code A_0 = √(1−ε²)C + εD, A_1 = √(1−ε²)C − εD.
#[derive(Clone, Debug, PartialEq)]
pub struct AqecCode {
    pub c: OperatorMatrix,
    pub d: OperatorMatrix,
    pub epsilon: f64,
    pub code: CodeSpace,
}

fn vec_of(a: &DMatrix<C64>) -> DVector<C64> {
    let d = a.nrows();
    DVector::from_fn(d * d, |k, _| a[(k / d, k % d)])
}

fn tr_inner(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

fn register(v: &DVector<C64>, b: usize) -> DVector<C64> {
    let mut e = DVector::from_element(2, ZERO);
    e[b] = ONE;
    v.kronecker(&e)
}

impl AqecCode {
    pub fn new(c: &OperatorMatrix, d: &OperatorMatrix, epsilon: f64) -> Result<Self> {
        if c.dim() != d.dim() {
            return Err(Error::DimensionMismatch { expected: c.dim(), found: d.dim() });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidConfig(format!("code parameter epsilon must lie in [0, 1), got {epsilon}")));
        }
        let (cm, dm) = (c.matrix(), d.matrix());
        let norm_c = (tr_inner(cm, cm).re - 1.0).abs();
        let norm_d = (tr_inner(dm, dm).re - 1.0).abs();
        let overlap = tr_inner(cm, dm).norm();
        if norm_c > CONSTRAINT_TOL || norm_d > CONSTRAINT_TOL || overlap > CONSTRAINT_TOL {
            return Err(Error::InvalidConfig(format!(
                "need Tr C†C = Tr D†D = 1 and Tr C†D = 0 (deviations {norm_c:.3e}, {norm_d:.3e}, {overlap:.3e})"
            )));
        }
        let s = (1.0 - epsilon * epsilon).sqrt();
        let branch = |sign: f64| {
            let a = cm * C64::new(s, 0.0) + dm * C64::new(sign * epsilon, 0.0);
            let v = vec_of(&a);
            let n = v.norm();
            v / C64::new(n, 0.0)
        };
        let code = CodeSpace::new(register(&branch(1.0), 0), register(&branch(-1.0), 1))?;
        Ok(Self { c: c.clone(), d: d.clone(), epsilon, code })
    }

    pub fn probe_dim(&self) -> usize {
        self.c.dim()
    }

    /// vec(A_b), the probe ⊗ ancilla part of |c_b⟩.
    pub fn branch(&self, b: usize) -> DVector<C64> {
        let v = self.code.vector(b);
        DVector::from_fn(v.len() / 2, |k, _| v[2 * k + b])
    }

    /// A_b as a d×d matrix.
    pub fn amplitude(&self, b: usize) -> DMatrix<C64> {
        let d = self.probe_dim();
        let v = self.branch(b);
        DMatrix::from_fn(d, d, |i, j| v[i * d + j])
    }

    /// Kraus operators |c_0⟩⟨R_m, 0| + |c_1⟩⟨W R_m, 1| over the standard basis R_m.
    pub fn paired_recovery(&self, w: &DMatrix<C64>) -> Result<RecoveryMap> {
        let n = self.branch(0).len();
        if w.nrows() != n || w.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: w.nrows() });
        }
        let defect = (w.adjoint() * w - DMatrix::<C64>::identity(n, n)).norm();
        if defect > 1e-10 {
            return Err(Error::InvalidConfig(format!("pairing is not unitary (defect {defect:.3e})")));
        }
        let kraus = (0..n)
            .map(|m| {
                let mut r = DVector::from_element(n, ZERO);
                r[m] = ONE;
                let q = w * &r;
                OperatorMatrix::outer(self.code.c0(), &register(&r, 0)) + OperatorMatrix::outer(self.code.c1(), &register(&q, 1))
            })
            .collect();
        RecoveryMap::new(kraus)
    }

    /// Pairing R_m ↦ Q_m between Gram–Schmidt completions of vec(A_0) and vec(A_1).
    pub fn completion_pairing(&self) -> DMatrix<C64> {
        let n = self.branch(0).len();
        let r = complete_basis(&[self.branch(0)], n);
        let q = complete_basis(&[self.branch(1)], n);
        let mut w = DMatrix::<C64>::zeros(n, n);
        for (a, b) in r.iter().zip(&q) {
            w += b * a.adjoint();
        }
        w
    }

    /// e_jb = vec((L_j − l_jb)A_b) with l_jb = Tr(A_b†L_jA_b).
    fn error_vectors(&self, jumps: &[OperatorMatrix]) -> Vec<[(C64, DVector<C64>); 2]> {
        let a = [self.amplitude(0), self.amplitude(1)];
        jumps
            .iter()
            .map(|l| {
                let lm = l.matrix();
                let mk = |b: usize| {
                    let la = lm * &a[b];
                    let lb = tr_inner(&a[b], &la);
                    (lb, vec_of(&(la - &a[b] * lb)))
                };
                [mk(0), mk(1)]
            })
            .collect()
    }

    /// Pairing unitary maximizing Re Σ_j ⟨e_j1|W|e_j0⟩ (polar factor of Σ_j |e_j1⟩⟨e_j0|),
    /// which minimizes the logical dephasing within the paired-basis recovery class.
    pub fn optimal_pairing(&self, jumps: &[OperatorMatrix]) -> DMatrix<C64> {
        let n = self.branch(0).len();
        let mut m = DMatrix::<C64>::zeros(n, n);
        for [(_, e0), (_, e1)] in self.error_vectors(jumps) {
            m += e1 * e0.adjoint();
        }
        let svd = m.svd(true, true);
        match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => u * vt,
            _ => DMatrix::identity(n, n),
        }
    }

    /// Effective logical generator for infinitely fast correction with pairing `w`.
    pub fn logical_rates(&self, snap: &ChannelSnapshot, w: &DMatrix<C64>) -> LogicalRates {
        let a = [self.amplitude(0), self.amplitude(1)];
        let expect = |x: &OperatorMatrix, b: usize| tr_inner(&a[b], &(x.matrix() * &a[b])).re;
        let mut rate = C64::new(0.0, -(expect(&snap.h, 0) - expect(&snap.h, 1)));
        for [(l0, e0), (l1, e1)] in self.error_vectors(&snap.jumps) {
            let n0 = l0.norm_sqr() + e0.norm_squared();
            let n1 = l1.norm_sqr() + e1.norm_squared();
            let g = e1.dotc(&(w * &e0));
            rate += l0 * l1.conj() + g - C64::new(0.5 * (n0 + n1), 0.0);
        }
        LogicalRates {
            signal_coefficient: -0.5 * rate.im,
            signal_derivative: expect(&snap.h_prime, 0) - expect(&snap.h_prime, 1),
            dephasing_rate: (-0.5 * rate.re).max(0.0),
        }
    }
}

/// Code and recovery of the ε-family, the recovery pairing Gram–Schmidt completions of both branches.
pub fn build_aqec_code(c: &OperatorMatrix, d: &OperatorMatrix, epsilon: f64) -> Result<(CodeSpace, RecoveryMap)> {
    let code = AqecCode::new(c, d, epsilon)?;
    let rec = code.paired_recovery(&code.completion_pairing())?;
    Ok((code.code, rec))
}

/// Closed-form logical rates (dt → 0 limit of the correction cycle).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogicalRates {
    /// Half the logical phase rate; equals ½Tr(Hσ_{z,L}) when the noise adds no phase.
    pub signal_coefficient: f64,
    /// Tr(H′σ_{z,L}).
    pub signal_derivative: f64,
    pub dephasing_rate: f64,
}

/// Result of one-step logical process tomography.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicalChannelEstimate {
    pub signal_coefficient: f64,
    pub dephasing_rate: f64,
    pub extraction_dt: f64,
    /// Rate of population transfer between |c_0⟩ and |c_1⟩.
    pub population_transfer: f64,
    /// Rate at which the |+i⟩ coherence departs from the |+⟩ coherence.
    pub rotation_deviation: f64,
    pub warnings: Vec<String>,
}

struct Tomography {
    coherence: C64,
    transfer: f64,
    rotation: f64,
}

fn tomography_step(
    prop: &Propagator<'_>,
    code: &CodeSpace,
    recovery: &RecoveryMap,
    t: f64,
    h: f64,
) -> Result<Tomography> {
    let half = C64::new(0.5, 0.0);
    let inputs = [
        OperatorMatrix::diagonal(&[1.0, 0.0]),
        OperatorMatrix::diagonal(&[0.0, 1.0]),
        OperatorMatrix::from_fn(2, |_, _| half),
        OperatorMatrix::from_row_slice(2, &[half, C64::new(0.0, -0.5), C64::new(0.0, 0.5), half]),
    ];
    let outputs = inputs
        .par_iter()
        .map(|rho_l| -> Result<OperatorMatrix> {
            let mut state = DensityState::new(code.embed(rho_l)?)?;
            state.t = t;
            prop.rk4_step(&mut state, h)?;
            let out = qec_step(&state.rho, code, recovery)?;
            Ok(code.restrict(&out))
        })
        .collect::<Result<Vec<_>>>()?;
    let coherence = outputs[2].get(0, 1) / half;
    let rotated = outputs[3].get(0, 1) / C64::new(0.0, -0.5);
    Ok(Tomography {
        coherence,
        transfer: (outputs[0].get(1, 1).re.abs() + outputs[1].get(0, 0).re.abs()) / h,
        rotation: (rotated - coherence).norm() / h,
    })
}

/// Logical process tomography of one correction cycle (evolve for dt, then
/// Π(·)Π + 𝓡(Π_⊥·Π_⊥)) at time t, on the inputs |0⟩, |1⟩, |+⟩, |+i⟩. Signal
/// and dephasing rate come from the |+⟩ coherence c: ε_L = −ln(|c(dt)|/|c(0)|)/(2dt),
/// each Richardson-extrapolated from dt, dt/2 and dt/4.
pub fn aqec_logical_channel(
    channel: &ParametricChannel,
    omega: f64,
    code: &CodeSpace,
    recovery: &RecoveryMap,
    t: f64,
    dt: f64,
) -> Result<LogicalChannelEstimate> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let n = code.ambient_dim();
    if n % channel.dim != 0 {
        return Err(Error::DimensionMismatch { expected: channel.dim, found: n });
    }
    let extended = if n == channel.dim { channel.clone() } else { channel.with_ancilla(n / channel.dim) };
    let controls = ControlSchedule::none();
    let opts = PropagationOptions { dt, with_derivative: false, renormalize: false };
    let prop = Propagator::new(&extended, omega, &controls, opts)?;
    let fit = |h: f64| -> Result<(f64, f64, Tomography)> {
        let tomo = tomography_step(&prop, code, recovery, t, h)?;
        let decay = -tomo.coherence.norm().ln() / (2.0 * h);
        let phase = -tomo.coherence.arg() / (2.0 * h);
        Ok((decay, phase, tomo))
    };
    let (d1, p1, t1) = fit(dt)?;
    let (d2, p2, t2) = fit(0.5 * dt)?;
    let (d4, p4, t4) = fit(0.25 * dt)?;
    let mut rate = (8.0 * d4 - 6.0 * d2 + d1) / 3.0;
    let signal = (8.0 * p4 - 6.0 * p2 + p1) / 3.0;
    let population_transfer = t1.transfer.max(t2.transfer).max(t4.transfer);
    let rotation_deviation = t1.rotation.max(t2.rotation).max(t4.rotation);
    let mut warnings = Vec::new();
    if population_transfer > DEPHASING_FORM_TOL {
        warnings.push(format!("population transfer rate {population_transfer:.3e} at t={t}"));
    }
    if rotation_deviation > DEPHASING_FORM_TOL {
        warnings.push(format!("off-axis rotation rate {rotation_deviation:.3e} at t={t}"));
    }
    if rate < 0.0 {
        if rate < -1e-8 {
            warnings.push(format!("negative dephasing rate {rate:.3e} clipped at t={t}"));
        }
        rate = 0.0;
    }
    Ok(LogicalChannelEstimate {
        signal_coefficient: signal,
        dephasing_rate: rate,
        extraction_dt: dt,
        population_transfer,
        rotation_deviation,
        warnings,
    })
}

/// Unitary moving the logical axis from one code to the next (same construction as the QEC code update).
pub fn align_logical_axis(from: &CodeSpace, to: &CodeSpace) -> Result<OperatorMatrix> {
    code_update_unitary(from, to)
}

/// Code pair (C, D) for one snapshot with its logical signal-to-dephasing ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct AqecDesign {
    pub c: OperatorMatrix,
    pub d: OperatorMatrix,
    pub epsilon: f64,
    /// Tr(H′σ_{z,L})²/(4ε_L) of the closed-form rates at `epsilon` (0 when `epsilon` is 0).
    pub integrand: f64,
    /// ε → 0 limit of the same ratio for this C.
    pub limit_integrand: f64,
}

/// Real basis of d×d complex matrices: E_p and iE_p for each entry p.
fn matrix_basis(d: usize) -> Vec<DMatrix<C64>> {
    let mut out = Vec::with_capacity(2 * d * d);
    for p in 0..d * d {
        for unit in [ONE, C64::new(0.0, 1.0)] {
            let mut m = DMatrix::<C64>::zeros(d, d);
            m[(p / d, p % d)] = unit;
            out.push(m);
        }
    }
    out
}

fn hermitian_basis(n: usize) -> Vec<DMatrix<C64>> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(n * n);
    for k in 0..n {
        for l in k..n {
            let mut m = DMatrix::<C64>::zeros(n, n);
            if k == l {
                m[(k, k)] = ONE;
                out.push(m);
            } else {
                m[(k, l)] = C64::new(r, 0.0);
                m[(l, k)] = C64::new(r, 0.0);
                out.push(m.clone());
                m[(k, l)] = C64::new(0.0, -r);
                m[(l, k)] = C64::new(0.0, r);
                out.push(m);
            }
        }
    }
    out
}

fn push_real(out: &mut Vec<f64>, v: &DVector<C64>) {
    for z in v.iter() {
        out.push(z.re);
        out.push(z.im);
    }
}

/// Orthonormal basis of the column space of real columns.
fn column_basis(cols: &[Vec<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let scale = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
    for c in cols {
        let mut v = DVector::from_column_slice(c);
        for _ in 0..2 {
            for b in &basis {
                let p = b.dot(&v);
                v -= b * p;
            }
        }
        let n = v.norm();
        if n > tol * scale.max(1e-300) {
            basis.push(v / n);
        }
    }
    basis
}

/// Small-ε limit of 8(Re Tr D†H′C)²/Γ₂(D), maximized over D ⊥ C.
///
/// Γ₂ε² is the leading logical dephasing: 2Σ_j|x_j|² from the splitting of
/// ⟨L_j⟩ between branches, with x_j = Tr(C†L_jD) + Tr(D†L_jC), plus the part of
/// the branch-odd error vectors v_j = vec((L_j − ⟨L_j⟩)D − x_jC) inside
/// span{u_j = vec((L_j − ⟨L_j⟩)C)} that no Hermitian rotation iG u_j absorbs.
/// Returns None when a signal direction costs no dephasing.
fn rayleigh(c: &DMatrix<C64>, h_prime: &DMatrix<C64>, jumps: &[DMatrix<C64>]) -> Option<(f64, DMatrix<C64>)> {
    let d = c.nrows();
    let n = d * d;
    let basis = matrix_basis(d);
    let vc = vec_of(c);
    let mean: Vec<C64> = jumps.iter().map(|l| tr_inner(c, &(l * c))).collect();
    let centered: Vec<DMatrix<C64>> =
        jumps.iter().zip(&mean).map(|(l, m)| l - DMatrix::<C64>::identity(d, d) * *m).collect();
    let u: Vec<DVector<C64>> = centered.iter().map(|l| vec_of(&(l * c))).collect();
    let mut span: Vec<DVector<C64>> = Vec::new();
    let u_scale = u.iter().map(|x| x.norm()).fold(0.0, f64::max);
    for x in &u {
        let mut v = x.clone();
        for _ in 0..2 {
            for b in &span {
                let p = b.dotc(&v);
                v -= b * p;
            }
        }
        let nv = v.norm();
        if nv > 1e-10 * u_scale.max(1e-300) {
            span.push(v / C64::new(nv, 0.0));
        }
    }
    let project = |v: &DVector<C64>| {
        let mut out = DVector::from_element(n, ZERO);
        for b in &span {
            out += b * b.dotc(v);
        }
        out
    };
    let absorbed: Vec<Vec<f64>> = hermitian_basis(n)
        .iter()
        .map(|g| {
            let mut col = Vec::with_capacity(2 * n * jumps.len());
            for x in &u {
                push_real(&mut col, &project(&(g * x * C64::new(0.0, 1.0))));
            }
            col
        })
        .collect();
    let absorbed = column_basis(&absorbed, 1e-10);

    let nb = basis.len();
    let mut b = DVector::<f64>::zeros(nb);
    let mut constraint = DMatrix::<f64>::zeros(2, nb);
    let mut x1 = DMatrix::<f64>::zeros(2 * jumps.len(), nb);
    let mut resid = Vec::with_capacity(nb);
    for (k, e) in basis.iter().enumerate() {
        b[k] = tr_inner(e, &(h_prime * c)).re;
        let ov = tr_inner(c, e);
        constraint[(0, k)] = ov.re;
        constraint[(1, k)] = ov.im;
        let mut w = Vec::with_capacity(2 * n * jumps.len());
        for (j, (l, lc)) in jumps.iter().zip(&centered).enumerate() {
            let x = tr_inner(c, &(l * e)) + tr_inner(e, &(l * c));
            x1[(2 * j, k)] = x.re;
            x1[(2 * j + 1, k)] = x.im;
            push_real(&mut w, &project(&(vec_of(&(lc * e)) - &vc * x)));
        }
        let mut r = DVector::from_vec(w);
        for q in &absorbed {
            let p = q.dot(&r);
            r -= q * p;
        }
        resid.push(r);
    }
    let mut gram = x1.transpose() * &x1 * 2.0;
    for i in 0..nb {
        for j in 0..nb {
            gram[(i, j)] += 2.0 * resid[i].dot(&resid[j]);
        }
    }
    let ktk = SymmetricEigen::new(constraint.transpose() * &constraint);
    let kscale = ktk.eigenvalues.iter().copied().fold(0.0, f64::max);
    let null: Vec<DVector<f64>> = (0..nb)
        .filter(|&k| ktk.eigenvalues[k] <= 1e-12 * kscale.max(1e-300))
        .map(|k| ktk.eigenvectors.column(k).into_owned())
        .collect();
    let m = null.len();
    let nmat = DMatrix::from_columns(&null);
    let gz = nmat.transpose() * &gram * &nmat;
    let bz = nmat.transpose() * &b;
    let eig = SymmetricEigen::new(gz);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let bnorm = bz.norm();
    let mut value = 0.0;
    let mut xz = DVector::<f64>::zeros(m);
    for k in 0..m {
        let q = eig.eigenvectors.column(k);
        let proj = q.dot(&bz);
        let lam = eig.eigenvalues[k];
        if lam <= 1e-10 * top.max(1e-300) {
            if proj.abs() > 1e-8 * bnorm.max(1e-300) && bnorm > 0.0 {
                return None;
            }
            continue;
        }
        value += proj * proj / lam;
        xz += q * (proj / lam);
    }
    let x = if xz.norm() > 0.0 { &nmat * xz } else { nmat.column(0).into_owned() };
    let mut dm = DMatrix::<C64>::zeros(d, d);
    for (k, e) in basis.iter().enumerate() {
        dm += e * C64::new(x[k], 0.0);
    }
    let norm = tr_inner(&dm, &dm).re.sqrt();
    Some((8.0 * value, dm / C64::new(norm, 0.0)))
}

fn c_from_params(x: &[f64], d: usize) -> DMatrix<C64> {
    let mut t = DMatrix::<C64>::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        t[(i, i)] = C64::new(x[k], 0.0);
        k += 1;
        for j in 0..i {
            t[(i, j)] = C64::new(x[k], x[k + 1]);
            k += 2;
        }
    }
    let tt = &t * t.adjoint();
    let norm = tt.trace().re.max(1e-300);
    let rho = tt.map(|z| z * (1.0 - MIXEDNESS_FLOOR) / norm)
        + DMatrix::<C64>::identity(d, d) * C64::new(MIXEDNESS_FLOOR / d as f64, 0.0);
    let (vals, vecs) = eigh(&OperatorMatrix::from_fn(d, |i, j| rho[(i, j)]));
    let sqrt = DMatrix::from_diagonal(&DVector::from_iterator(d, vals.iter().map(|v| C64::new(v.max(0.0).sqrt(), 0.0))));
    &vecs * sqrt * vecs.adjoint()
}

fn closed_form_ratio(c: &OperatorMatrix, d: &OperatorMatrix, epsilon: f64, snap: &ChannelSnapshot) -> Result<f64> {
    let code = AqecCode::new(c, d, epsilon)?;
    let r = code.logical_rates(snap, &code.optimal_pairing(&snap.jumps));
    Ok(if r.dephasing_rate > 0.0 { r.signal_derivative.powi(2) / (4.0 * r.dephasing_rate) } else { 0.0 })
}

/// Code pair for one snapshot: C = T/‖T‖ with T lower triangular, searched by
/// Nelder–Mead from the maximally entangled C; D from the small-ε Rayleigh
/// quotient. With `epsilon` > 0 the search maximizes the closed-form ratio at
/// that ε, otherwise the ε → 0 limit. Optima typically sit at the boundary
/// (pure reduced probe state), which the search approaches to relative
/// accuracy of about 1e-6.
pub fn design_aqec_code(snap: &ChannelSnapshot, epsilon: f64) -> Result<AqecDesign> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("code parameter epsilon must lie in [0, 1), got {epsilon}")));
    }
    let d = snap.dim();
    let scale = snap.h_prime.hs_norm();
    if !(scale > 0.0) {
        return Err(Error::Unsupported(format!("H' vanishes at t={}; no signal to protect", snap.t)));
    }
    let normalized = snap.with_h_prime(snap.h_prime.scale_real(1.0 / scale));
    let hn = normalized.h_prime.matrix().clone();
    let jumps: Vec<DMatrix<C64>> = snap.jumps.iter().map(|l| l.matrix().clone()).collect();
    let mut x0 = Vec::with_capacity(d * d);
    for i in 0..d {
        x0.push(1.0);
        x0.extend(std::iter::repeat(0.0).take(2 * i));
    }
    let mut objective = |x: &[f64]| -> f64 {
        let c = c_from_params(x, d);
        let Some((limit, dm)) = rayleigh(&c, &hn, &jumps) else {
            return f64::INFINITY;
        };
        if epsilon == 0.0 {
            return -limit;
        }
        match (OperatorMatrix::new(c), OperatorMatrix::new(dm)) {
            (Ok(c), Ok(dm)) => closed_form_ratio(&c, &dm, epsilon, &normalized).map_or(f64::INFINITY, |v| -v),
            _ => f64::INFINITY,
        }
    };
    let opts = NelderMeadOptions { max_evals: 3000, f_tol: 1e-6, x_tol: 1e-6 };
    let best = nelder_mead(&mut objective, &x0, &vec![0.3; x0.len()], &opts);
    let c = c_from_params(&best.x, d);
    let (limit, dm) = rayleigh(&c, &hn, &jumps).ok_or_else(|| {
        Error::Unsupported(format!(
            "noise does not limit the signal at t={} (H' outside the Lindblad span); use exact error correction",
            snap.t
        ))
    })?;
    let (c, dm) = (OperatorMatrix::new(c)?, OperatorMatrix::new(dm)?);
    let integrand = if epsilon > 0.0 { closed_form_ratio(&c, &dm, epsilon, &normalized)? * scale * scale } else { 0.0 };
    Ok(AqecDesign { c, d: dm, epsilon, integrand, limit_integrand: limit * scale * scale })
}

/// How the (C, D) pair is chosen along the time axis.
#[derive(Clone, Debug, PartialEq)]
pub enum AqecPath {
    /// `design_aqec_code` at each instant.
    Optimal,
    Fixed { c: OperatorMatrix, d: OperatorMatrix },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AqecOptions {
    /// Tomography step; Richardson uses it and its half and quarter.
    pub tomography_dt: f64,
    pub rel_tol: f64,
}

impl Default for AqecOptions {
    fn default() -> Self {
        Self { tomography_dt: 1e-3, rel_tol: 1e-5 }
    }
}

/// Integral and per-node diagnostics of the logical signal-to-dephasing ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AqecQfi {
    pub value: f64,
    pub evals: usize,
    pub warnings: Vec<String>,
}

/// ∫₀ᵀ f(t) dt for an integrand returning (Tr(H′σ_{z,L}), ε_L): f = F′²/(4ε_L),
/// taken as 0 where F′ = 0.
pub fn integrate_signal_ratio(
    rates: &mut dyn FnMut(f64) -> Result<(f64, f64)>,
    t_final: f64,
    breaks: &[f64],
    rel_tol: f64,
) -> Result<f64> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidConfig(format!("final time must be finite and non-negative, got {t_final}")));
    }
    Ok(integrate_signal_ratio_at(rates, &[t_final], breaks, rel_tol)?[0])
}

fn integrate_signal_ratio_at(
    rates: &mut dyn FnMut(f64) -> Result<(f64, f64)>,
    times: &[f64],
    breaks: &[f64],
    rel_tol: f64,
) -> Result<Vec<f64>> {
    let mut f = |t: f64| -> Result<f64> {
        let (fp, eps_l) = rates(t)?;
        if fp == 0.0 {
            return Ok(0.0);
        }
        if !(eps_l > 0.0) {
            return Err(Error::Correction(format!("logical dephasing rate {eps_l:.3e} at t={t} with nonzero signal")));
        }
        Ok(fp * fp / (4.0 * eps_l))
    };
    let opts = QuadratureOptions { rel_tol, abs_tol: 1e-12, max_depth: 40 };
    integrate_cumulative(&mut f, 0.0, times, breaks, &opts)
}

fn design_key(snap: &ChannelSnapshot) -> String {
    let scale = snap.h_prime.hs_norm().max(1e-300);
    let mut key = String::new();
    let mut push = |m: &OperatorMatrix, s: f64| {
        for z in m.matrix().iter() {
            key.push_str(&format!("{:.9},{:.9};", z.re / s, z.im / s));
        }
    };
    push(&snap.h_prime, scale);
    for l in &snap.jumps {
        push(l, 1.0);
    }
    key
}

/// Logical signal, extracted dephasing rate and running QFI at one sample time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AqecSample {
    pub t: f64,
    pub signal: f64,
    pub eps_l: f64,
    pub qfi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AqecTrajectory {
    pub samples: Vec<AqecSample>,
    pub evals: usize,
    pub warnings: Vec<String>,
}

/// ∫₀ᵀ Tr(H′σ_{z,L})²/(4ε_L) dt for the ε_code family along `path`, with ε_L from
/// tomography of the correction cycle under the optimal pairing recovery.
pub fn aqec_qfi(
    channel: &ParametricChannel,
    omega: f64,
    t_final: f64,
    path: &AqecPath,
    epsilon_code: f64,
    opts: &AqecOptions,
) -> Result<AqecQfi> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(Error::InvalidConfig(format!("final time must be finite and non-negative, got {t_final}")));
    }
    let run = aqec_trajectory(channel, omega, &[t_final], path, epsilon_code, opts)?;
    Ok(AqecQfi { value: run.samples[0].qfi, evals: run.evals, warnings: run.warnings })
}

/// [`aqec_qfi`] at each of the sorted `times`, with the signal and ε_L there.
pub fn aqec_trajectory(
    channel: &ParametricChannel,
    omega: f64,
    times: &[f64],
    path: &AqecPath,
    epsilon_code: f64,
    opts: &AqecOptions,
) -> Result<AqecTrajectory> {
    if !(epsilon_code > 0.0 && epsilon_code < 1.0) {
        return Err(Error::InvalidConfig(format!("code parameter epsilon must lie in (0, 1), got {epsilon_code}")));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig("sample times must be finite".into()));
    }
    let d = channel.dim;
    let mut designs: HashMap<String, (OperatorMatrix, OperatorMatrix)> = HashMap::new();
    let mut warnings = Vec::new();
    let mut evals = 0;
    let mut rates = |t: f64| -> Result<(f64, f64)> {
        evals += 1;
        let snap = channel.evaluate(omega, t)?;
        let (c, dm) = match path {
            AqecPath::Fixed { c, d } => (c.clone(), d.clone()),
            AqecPath::Optimal => {
                if snap.h_prime.hs_norm() <= 1e-14 {
                    return Ok((0.0, 0.0));
                }
                let key = design_key(&snap);
                if let Some(found) = designs.get(&key) {
                    found.clone()
                } else {
                    let design = design_aqec_code(&snap, epsilon_code)?;
                    designs.insert(key, (design.c.clone(), design.d.clone()));
                    (design.c, design.d)
                }
            }
        };
        let code = AqecCode::new(&c, &dm, epsilon_code)?;
        let rec = code.paired_recovery(&code.optimal_pairing(&snap.jumps))?;
        let fp = code.code.z_expectation(&lift(&snap.h_prime, 2 * d * d)?);
        let est = aqec_logical_channel(channel, omega, &code.code, &rec, t, opts.tomography_dt)?;
        if warnings.len() < 16 {
            warnings.extend(est.warnings);
        }
        Ok((fp, est.dephasing_rate))
    };
    let t_final = times.last().copied().unwrap_or(0.0);
    let breaks = channel.breakpoints(omega, 0.0, t_final);
    let running = integrate_signal_ratio_at(&mut rates, times, &breaks, opts.rel_tol)?;
    let mut samples = Vec::with_capacity(times.len());
    for (&t, qfi) in times.iter().zip(running) {
        let (signal, eps_l) = rates(t)?;
        samples.push(AqecSample { t, signal, eps_l, qfi });
    }
    Ok(AqecTrajectory { samples, evals, warnings })
}

/// Value at x = 0 of the polynomial through (x_k, y_k) (Neville), for
/// extrapolation in ε_code² when x_k = ε_k².
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidConfig("extrapolation needs equally many abscissae and values".into()));
    }
    let mut p = ys.to_vec();
    let n = xs.len();
    for m in 1..n {
        for i in 0..n - m {
            let (a, b) = (xs[i], xs[i + m]);
            if a == b {
                return Err(Error::InvalidConfig("extrapolation abscissae must be distinct".into()));
            }
            p[i] = (b * p[i] - a * p[i + 1]) / (b - a);
        }
    }
    Ok(p[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::branch_integral;
    use crate::bound::{solve_constrained_alpha, SolverOptions};
    use crate::channel::{build_channel, ModelConfig, ModelKind, NoiseKind, SymbolicOperator};
    use crate::operator::pauli;
    use crate::span::Regime;
    use std::f64::consts::PI;

    fn ac_emission(eps: f64) -> ParametricChannel {
        build_channel(&ModelConfig::catalog(ModelKind::Ac, 1.0, 1.0, &[(NoiseKind::SpontaneousEmission, eps)])).unwrap()
    }

    fn bell_c() -> OperatorMatrix {
        OperatorMatrix::identity(2).scale_real(std::f64::consts::FRAC_1_SQRT_2)
    }

    fn z_d() -> OperatorMatrix {
        pauli::z().scale_real(std::f64::consts::FRAC_1_SQRT_2)
    }

    #[test]
    fn code_construction() {
        let (code, rec) = build_aqec_code(&bell_c(), &z_d(), 0.0).unwrap();
        let (a, b) = (code.c0(), code.c1());
        for k in 0..4 {
            assert!((a[2 * k] - b[2 * k + 1]).norm() < 1e-15);
        }
        assert!(rec.completeness_defect(&code.pi_perp()) < 1e-10);
        for &eps in &[0.05, 0.3, 0.9] {
            let (code, rec) = build_aqec_code(&bell_c(), &z_d(), eps).unwrap();
            assert!(code.c0().dotc(code.c1()).norm() < 1e-15);
            assert!(rec.completeness_defect(&code.pi_perp()) < 1e-10);
            let ac = AqecCode::new(&bell_c(), &z_d(), eps).unwrap();
            let w = ac.optimal_pairing(&[pauli::minus()]);
            assert!(ac.paired_recovery(&w).unwrap().completeness_defect(&code.pi_perp()) < 1e-10);
        }
        assert!(build_aqec_code(&bell_c(), &bell_c(), 0.1).is_err());
        assert!(build_aqec_code(&bell_c(), &z_d(), 1.0).is_err());
        assert!(build_aqec_code(&bell_c().scale_real(2.0), &z_d(), 0.1).is_err());
    }

    #[test]
    fn synthetic_dephasing_rate() {
        // register-labelled code {|0,0,0⟩, |1,0,1⟩} under σ_z dephasing √γ: pure
        // logical dephasing at rate γ with no error-space component
        let gamma: f64 = 0.37;
        let h = SymbolicOperator::zero(2);
        let ch = ParametricChannel::symbolic("synthetic", h, vec![SymbolicOperator::constant(pauli::z() * gamma.sqrt())]).unwrap();
        let code = CodeSpace::from_basis_states(8, 0, 5).unwrap();
        let rec = crate::qec::kl_recovery(&code, &[]).unwrap();
        for &dt in &[1e-2, 1e-3] {
            let est = aqec_logical_channel(&ch, 1.0, &code, &rec, 0.3, dt).unwrap();
            assert!((est.dephasing_rate - gamma).abs() < 10.0 * dt * dt, "{} {}", est.dephasing_rate, dt);
            assert!(est.signal_coefficient.abs() < 1e-12);
            assert!(est.warnings.is_empty(), "{:?}", est.warnings);
        }
    }

    #[test]
    fn noiseless_signal() {
        let ch = build_channel(&ModelConfig::catalog(ModelKind::Ac, 1.0, 1.0, &[])).unwrap();
        let ac = AqecCode::new(&bell_c(), &z_d(), 0.2).unwrap();
        let rec = ac.paired_recovery(&ac.completion_pairing()).unwrap();
        let t = 0.9;
        let est = aqec_logical_channel(&ch, 1.0, &ac.code, &rec, t, 1e-3).unwrap();
        assert!(est.dephasing_rate.abs() < 1e-8);
        let h = lift(&ch.evaluate(1.0, t).unwrap().h, 8).unwrap();
        let want = 0.5 * ac.code.z_expectation(&h);
        assert!(want.abs() > 0.1);
        // Richardson leaves an O(dt²) bias from the time dependence of H
        assert!((est.signal_coefficient - want).abs() < 1e-6, "{} {}", est.signal_coefficient, want);
    }

    #[test]
    fn tomography_matches_closed_form() {
        let ch = ac_emission(0.1);
        let snap = ch.evaluate(1.0, 0.7).unwrap();
        let design = design_aqec_code(&snap, 0.0).unwrap();
        for &eps in &[0.2, 0.05] {
            let ac = AqecCode::new(&design.c, &design.d, eps).unwrap();
            for w in [ac.optimal_pairing(&snap.jumps), ac.completion_pairing()] {
                let rec = ac.paired_recovery(&w).unwrap();
                let rates = ac.logical_rates(&snap, &w);
                let est = aqec_logical_channel(&ch, 1.0, &ac.code, &rec, 0.7, 1e-3).unwrap();
                assert!(
                    (est.dephasing_rate - rates.dephasing_rate).abs() < 1e-6 * rates.dephasing_rate.max(1e-3),
                    "{eps}: {} vs {}",
                    est.dephasing_rate,
                    rates.dephasing_rate
                );
                assert!((est.signal_coefficient - rates.signal_coefficient).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn optimal_pairing_beats_completion() {
        let snap = ac_emission(0.1).evaluate(1.0, 0.7).unwrap();
        let design = design_aqec_code(&snap, 0.0).unwrap();
        let ac = AqecCode::new(&design.c, &design.d, 0.1).unwrap();
        let best = ac.logical_rates(&snap, &ac.optimal_pairing(&snap.jumps)).dephasing_rate;
        let gs = ac.logical_rates(&snap, &ac.completion_pairing()).dephasing_rate;
        assert!(best <= gs + 1e-15);
        // random unitaries never do better
        let mut seed = 0.123_f64;
        for _ in 0..20 {
            let h = DMatrix::<C64>::from_fn(4, 4, |_, _| {
                seed = (seed * 9.7 + 0.31).fract();
                C64::new(seed - 0.5, (seed * 3.3).fract() - 0.5)
            });
            let herm = (&h + h.adjoint()) * C64::new(0.5, 0.0);
            let u = (herm * C64::new(0.0, 1.0)).exp();
            assert!(ac.logical_rates(&snap, &u).dephasing_rate >= best - 1e-14);
        }
    }

    #[test]
    fn small_epsilon_limit_matches_rayleigh() {
        let snap = ac_emission(0.1).evaluate(1.0, 0.7).unwrap();
        let design = design_aqec_code(&snap, 0.0).unwrap();
        let mut prev = 0.0;
        for &eps in &[1e-2, 1e-3, 1e-4] {
            let ac = AqecCode::new(&design.c, &design.d, eps).unwrap();
            let r = ac.logical_rates(&snap, &ac.optimal_pairing(&snap.jumps));
            let ratio = r.signal_derivative.powi(2) / (4.0 * r.dephasing_rate);
            assert!(ratio >= prev * (1.0 - 1e-9));
            prev = ratio;
        }
        assert!((prev / design.limit_integrand - 1.0).abs() < 1e-6, "{prev} vs {}", design.limit_integrand);
    }

    #[test]
    fn design_matches_constrained_sdp() {
        for (noise, eps, t) in [
            (NoiseKind::SpontaneousEmission, 0.1, 0.7),
            (NoiseKind::SpontaneousEmission, 0.3, 2.1),
            (NoiseKind::DephasingZ, 0.2, 0.4),
        ] {
            let ch = build_channel(&ModelConfig::catalog(ModelKind::Ac, 1.0, 1.0, &[(noise, eps)])).unwrap();
            let snap = ch.evaluate(1.0, t).unwrap();
            let design = design_aqec_code(&snap, 0.0).unwrap();
            let sdp = solve_constrained_alpha(&snap, &SolverOptions::default()).unwrap();
            let ratio = design.limit_integrand / sdp.value;
            assert!(ratio > 1.0 - MIXEDNESS_FLOOR && ratio < 1.0 + 1e-6, "{noise:?}: {} vs {}", design.limit_integrand, sdp.value);
            let finite = design_aqec_code(&snap, 0.1).unwrap();
            assert!(finite.integrand <= finite.limit_integrand * (1.0 + 1e-9));
            assert!(finite.integrand <= sdp.value * (1.0 + 1e-6));
        }
        let rf = build_channel(&ModelConfig::catalog(ModelKind::Rf, 1.0, 1.0, &[(NoiseKind::SpontaneousEmission, 0.1)])).unwrap();
        let snap = rf.evaluate(1.0, 1.3).unwrap();
        let design = design_aqec_code(&snap, 0.0).unwrap();
        let sdp = solve_constrained_alpha(&snap, &SolverOptions::default()).unwrap();
        let ratio = design.limit_integrand / sdp.value;
        assert!(ratio > 1.0 - MIXEDNESS_FLOOR && ratio < 1.0 + 1e-6, "{} vs {}", design.limit_integrand, sdp.value);
    }

    #[test]
    fn design_rejects_dhnls_and_zero_signal() {
        let ch = build_channel(&ModelConfig::catalog(ModelKind::Ac, 1.0, 1.0, &[(NoiseKind::DephasingX, 0.1)])).unwrap();
        assert!(matches!(design_aqec_code(&ch.evaluate(1.0, 0.7).unwrap(), 0.0), Err(Error::Unsupported(_))));
        let snap = ac_emission(0.1).evaluate(1.0, 0.0).unwrap();
        assert!(design_aqec_code(&snap, 0.0).is_err());
    }

    #[test]
    fn signal_ratio_formula() {
        let (fp, eps_l, t) = (0.8, 0.05, 7.0);
        let q = integrate_signal_ratio(&mut |_| Ok((fp, eps_l)), t, &[], 1e-10).unwrap();
        assert!((q - fp * fp * t / (4.0 * eps_l)).abs() < 1e-9);
        let q = integrate_signal_ratio(&mut |_| Ok((fp, 1e12)), t, &[], 1e-10).unwrap();
        assert!(q < 1e-11);
        assert!(integrate_signal_ratio(&mut |_| Ok((fp, 0.0)), t, &[], 1e-10).is_err());
        assert_eq!(integrate_signal_ratio(&mut |_| Ok((0.0, 0.0)), t, &[], 1e-10).unwrap(), 0.0);
    }

    #[test]
    fn extrapolation() {
        // y = 3 − 2x + x² through three points
        let xs = [0.04, 0.01, 0.0025];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x + x * x).collect();
        assert!((extrapolate_to_zero(&xs, &ys).unwrap() - 3.0).abs() < 1e-12);
        assert!(extrapolate_to_zero(&[0.1, 0.1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn alignment_keeps_dephasing_axis() {
        // code rotated by a probe unitary between t and t+dt; aligned tomography
        // must again show pure dephasing along the fixed logical axis
        let ch = ac_emission(0.1);
        let snap = ch.evaluate(1.0, 0.7).unwrap();
        let design = design_aqec_code(&snap, 0.0).unwrap();
        let a = AqecCode::new(&design.c, &design.d, 0.1).unwrap();
        let theta: f64 = 0.01;
        let u = OperatorMatrix::from_fn(2, |i, j| match (i, j) {
            (0, 0) | (1, 1) => C64::new(theta.cos(), 0.0),
            (0, 1) => C64::new(0.0, -theta.sin()),
            _ => C64::new(0.0, -theta.sin()),
        });
        let moved_c = &u * &design.c;
        let moved_d = &u * &design.d;
        let b = AqecCode::new(&moved_c, &moved_d, 0.1).unwrap();
        let v = align_logical_axis(&a.code, &b.code).unwrap();
        assert!(crate::operator::unitarity_defect(&v) < 1e-10);
        for k in 0..2 {
            assert!((v.apply(a.code.vector(k)) - b.code.vector(k)).norm() < 1e-12);
        }
        let rho = a.code.embed(&OperatorMatrix::from_real_rows(2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let aligned = v.sandwich(&rho);
        let logical = b.code.restrict(&aligned);
        assert!((logical.get(0, 1) - C64::new(0.5, 0.0)).norm() < 1e-12);
        let w = b.optimal_pairing(&snap.jumps);
        let rec = b.paired_recovery(&w).unwrap();
        let est = aqec_logical_channel(&ch, 1.0, &b.code, &rec, 0.7, 1e-3).unwrap();
        assert!(est.population_transfer < 1e-9 && est.rotation_deviation < 1e-9);
    }

    #[test]
    fn aqec_trend_toward_branch() {
        let ch = ac_emission(0.1);
        let t = 2.0 * PI;
        let opts = AqecOptions::default();
        let eps = [0.2, 0.1, 0.05];
        let q: Vec<f64> = eps.iter().map(|&e| aqec_qfi(&ch, 1.0, t, &AqecPath::Optimal, e, &opts).unwrap().value).collect();
        assert!(q[0] < q[1] && q[1] < q[2], "{q:?}");
        let branch = branch_integral(&ch, 1.0, t, Regime::Dhls).unwrap();
        let xs: Vec<f64> = eps.iter().map(|e| e * e).collect();
        let extrapolated = extrapolate_to_zero(&xs, &q).unwrap();
        assert!(extrapolated / branch > 0.9, "{} / {branch}", extrapolated);
        assert!(extrapolated / branch < 1.0 + 1e-3, "{} / {branch}", extrapolated);
    }
}
