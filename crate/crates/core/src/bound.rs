//! Instantaneous growth bound on the QFI and its integration in time.
//!
//! For a snapshot of the channel and dual variables (κ, η, γ) with κ real,
//! η ∈ ℂ^J and γ Hermitian J×J,
//!
//! ```text
//! M_j = η_j I + Σ_k γ_jk L_k + i L′_j,          α = Σ_j M_j† M_j,
//! B   = H′ − (i/2) Σ_j (L′_j† L_j − L_j† L′_j) + κ I
//!       + Σ_j (η_j L_j† + η_j* L_j) + Σ_jk γ_jk L_j† L_k,
//! ```
//!
//! and dQ/dt ≤ 4 min (‖α‖ + ‖B‖ √Q). The minimization is a small LMI
//! program solved with [`crate::sdp`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSnapshot, ParametricChannel};
use crate::error::{Error, Result};
use crate::operator::{op_norm, spectral_half_gap, OperatorMatrix, C64, I, ONE};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::sdp::{affine_solution_set, solve_lmi, BarrierOptions, LmiBlock, LmiProblem, SolveStatus};
use crate::span::Regime;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Absolute duality gap on the normalized objective (H′ scaled to unit norm).
    pub gap: f64,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { gap: 1e-8, max_newton: 400 }
    }
}

/// Dual variables (κ, η, γ).
#[derive(Clone, Debug, PartialEq)]
pub struct DualVariables {
    pub kappa: f64,
    pub eta: Vec<C64>,
    pub gamma: DMatrix<C64>,
}

impl DualVariables {
    pub fn zeros(jumps: usize) -> Self {
        Self { kappa: 0.0, eta: vec![C64::new(0.0, 0.0); jumps], gamma: DMatrix::zeros(jumps, jumps) }
    }

    pub fn jump_count(&self) -> usize {
        self.eta.len()
    }

    /// Number of real parameters: κ, Re η, Im η, diagonal of γ, then (Re, Im) of γ_jk for j < k.
    pub fn n_reals(jumps: usize) -> usize {
        1 + 2 * jumps + jumps * jumps
    }

    pub fn to_reals(&self) -> Vec<f64> {
        let j = self.jump_count();
        let mut out = Vec::with_capacity(Self::n_reals(j));
        out.push(self.kappa);
        out.extend(self.eta.iter().map(|z| z.re));
        out.extend(self.eta.iter().map(|z| z.im));
        out.extend((0..j).map(|a| self.gamma[(a, a)].re));
        for a in 0..j {
            for b in a + 1..j {
                out.push(self.gamma[(a, b)].re);
                out.push(self.gamma[(a, b)].im);
            }
        }
        out
    }

    pub fn from_reals(jumps: usize, x: &[f64]) -> Self {
        let j = jumps;
        let eta = (0..j).map(|a| C64::new(x[1 + a], x[1 + j + a])).collect();
        let mut gamma = DMatrix::zeros(j, j);
        for a in 0..j {
            gamma[(a, a)] = C64::new(x[1 + 2 * j + a], 0.0);
        }
        let mut k = 1 + 3 * j;
        for a in 0..j {
            for b in a + 1..j {
                gamma[(a, b)] = C64::new(x[k], x[k + 1]);
                gamma[(b, a)] = C64::new(x[k], -x[k + 1]);
                k += 2;
            }
        }
        Self { kappa: x[0], eta, gamma }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            kappa: self.kappa * c,
            eta: self.eta.iter().map(|z| z * c).collect(),
            gamma: &self.gamma * C64::new(c, 0.0),
        }
    }

    pub fn gamma_hermiticity_defect(&self) -> f64 {
        (&self.gamma - self.gamma.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn check_dims(snap: &ChannelSnapshot, vars: &DualVariables) -> Result<()> {
    if vars.jump_count() != snap.jump_count() || vars.gamma.nrows() != snap.jump_count() {
        return Err(Error::DimensionMismatch { expected: snap.jump_count(), found: vars.jump_count() });
    }
    Ok(())
}

/// The blocks M_j = η_j I + Σ_k γ_jk L_k + i L′_j.
pub fn assemble_m(snap: &ChannelSnapshot, vars: &DualVariables) -> Result<Vec<OperatorMatrix>> {
    check_dims(snap, vars)?;
    let d = snap.dim();
    Ok((0..snap.jump_count())
        .map(|j| {
            let mut m = OperatorMatrix::identity(d).scale(vars.eta[j]) + snap.jump_primes[j].scale(I);
            for (k, lk) in snap.jumps.iter().enumerate() {
                m += &lk.scale(vars.gamma[(j, k)]);
            }
            m
        })
        .collect())
}

/// α = Σ_j M_j† M_j.
pub fn assemble_alpha(snap: &ChannelSnapshot, vars: &DualVariables) -> Result<OperatorMatrix> {
    let mut alpha = OperatorMatrix::zeros(snap.dim());
    for m in assemble_m(snap, vars)? {
        alpha += &(m.dagger() * &m);
    }
    Ok(alpha)
}

/// B = −iβ, Hermitian for Hermitian γ.
pub fn assemble_b(snap: &ChannelSnapshot, vars: &DualVariables) -> Result<OperatorMatrix> {
    check_dims(snap, vars)?;
    let d = snap.dim();
    let mut b = snap.h_prime.clone() + OperatorMatrix::identity(d).scale_real(vars.kappa);
    for (j, (lj, lpj)) in snap.jumps.iter().zip(&snap.jump_primes).enumerate() {
        let x = lpj.dagger() * lj - lj.dagger() * lpj;
        b -= &x.scale(C64::new(0.0, 0.5));
        b += &(lj.dagger().scale(vars.eta[j]) + lj.scale(vars.eta[j].conj()));
        for (k, lk) in snap.jumps.iter().enumerate() {
            b += &(lj.dagger() * lk).scale(vars.gamma[(j, k)]);
        }
    }
    let defect = b.hermiticity_defect();
    if defect > 1e-10 * b.hs_norm().max(1.0) {
        return Err(Error::NotHermitian { deviation: defect });
    }
    Ok(b.hermitize())
}

/// 4(‖α‖ + ‖β‖√Q) at the given variables.
pub fn objective_at(snap: &ChannelSnapshot, vars: &DualVariables, q: f64) -> Result<f64> {
    let s = op_norm(&assemble_alpha(snap, vars)?);
    let u = op_norm(&assemble_b(snap, vars)?);
    Ok(4.0 * (s + u * q.max(0.0).sqrt()))
}

/// M and B as affine functions of the real dual parameters.
struct LinearForms {
    d: usize,
    jumps: usize,
    m0: Vec<DMatrix<C64>>,
    dm: Vec<Vec<(usize, DMatrix<C64>)>>,
    b0: DMatrix<C64>,
    db: Vec<DMatrix<C64>>,
}

impl LinearForms {
    fn new(snap: &ChannelSnapshot) -> Self {
        let d = snap.dim();
        let nj = snap.jump_count();
        let id = DMatrix::<C64>::identity(d, d);
        let ls: Vec<&DMatrix<C64>> = snap.jumps.iter().map(|l| l.matrix()).collect();
        let lds: Vec<DMatrix<C64>> = ls.iter().map(|l| l.adjoint()).collect();
        let m0 = snap.jump_primes.iter().map(|lp| lp.matrix() * I).collect();
        let mut b0 = snap.h_prime.matrix().clone();
        for (l, lp) in ls.iter().zip(&snap.jump_primes) {
            let lp = lp.matrix();
            b0 -= (lp.adjoint() * *l - l.adjoint() * lp) * C64::new(0.0, 0.5);
        }
        let n = DualVariables::n_reals(nj);
        let mut dm = vec![Vec::new(); n];
        let mut db = vec![DMatrix::zeros(d, d); n];
        db[0] = id.clone();
        for j in 0..nj {
            dm[1 + j] = vec![(j, id.clone())];
            db[1 + j] = &lds[j] + ls[j];
            dm[1 + nj + j] = vec![(j, &id * I)];
            db[1 + nj + j] = (&lds[j] - ls[j]) * I;
            dm[1 + 2 * nj + j] = vec![(j, ls[j].clone())];
            db[1 + 2 * nj + j] = &lds[j] * ls[j];
        }
        let mut k = 1 + 3 * nj;
        for a in 0..nj {
            for b in a + 1..nj {
                let ab = &lds[a] * ls[b];
                let ba = &lds[b] * ls[a];
                dm[k] = vec![(a, ls[b].clone()), (b, ls[a].clone())];
                db[k] = &ab + &ba;
                dm[k + 1] = vec![(a, ls[b] * I), (b, ls[a] * (-I))];
                db[k + 1] = (ab - ba) * I;
                k += 2;
            }
        }
        Self { d, jumps: nj, m0, dm, b0, db }
    }

    fn n_duals(&self) -> usize {
        self.db.len()
    }

    /// [[s I, M†], [M, I]] ⪰ 0, i.e. ‖α‖ ≤ s.
    fn alpha_block(&self, s_index: usize) -> LmiBlock {
        let (d, nj) = (self.d, self.jumps);
        let size = d * (nj + 1);
        let embed = |blocks: &[(usize, DMatrix<C64>)]| {
            let mut f = DMatrix::zeros(size, size);
            for (j, m) in blocks {
                let r = d * (j + 1);
                f.view_mut((r, 0), (d, d)).copy_from(m);
                f.view_mut((0, r), (d, d)).copy_from(&m.adjoint());
            }
            f
        };
        let m0: Vec<(usize, DMatrix<C64>)> = self.m0.iter().cloned().enumerate().collect();
        let mut f0 = embed(&m0);
        for k in d..size {
            f0[(k, k)] = ONE;
        }
        let mut block = LmiBlock::new(f0);
        for (v, blocks) in self.dm.iter().enumerate() {
            if !blocks.is_empty() {
                block.add_term(v, embed(blocks));
            }
        }
        let mut fs = DMatrix::zeros(size, size);
        for k in 0..d {
            fs[(k, k)] = ONE;
        }
        block.add_term(s_index, fs);
        block
    }

    /// u I − sign·B ⪰ 0.
    fn beta_block(&self, u_index: usize, sign: f64) -> LmiBlock {
        let c = C64::new(-sign, 0.0);
        let mut block = LmiBlock::new(&self.b0 * c);
        for (v, m) in self.db.iter().enumerate() {
            block.add_term(v, m * c);
        }
        block.add_term(u_index, DMatrix::identity(self.d, self.d));
        block
    }

    fn m_value(&self, x: &[f64]) -> Vec<DMatrix<C64>> {
        let mut m = self.m0.clone();
        for (v, blocks) in self.dm.iter().enumerate() {
            for (j, c) in blocks {
                m[*j] += c * C64::new(x[v], 0.0);
            }
        }
        m
    }

    fn b_value(&self, x: &[f64]) -> DMatrix<C64> {
        let mut b = self.b0.clone();
        for (v, c) in self.db.iter().enumerate() {
            b += c * C64::new(x[v], 0.0);
        }
        b
    }

    /// Real equations for B(x) = 0.
    fn beta_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        complex_equations(std::slice::from_ref(&self.b0), |v| vec![(0, self.db[v].clone())], self.n_duals())
    }

    /// Real equations for M_j(x) = 0 for every j.
    fn alpha_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        complex_equations(&self.m0, |v| self.dm[v].clone(), self.n_duals())
    }
}

/// Rows Re/Im of every entry of Σ_v x_v C_v = −C_0, where C is a list of blocks.
fn complex_equations(
    constant: &[DMatrix<C64>],
    coeff: impl Fn(usize) -> Vec<(usize, DMatrix<C64>)>,
    n: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let entries: usize = constant.iter().map(|c| c.len()).sum();
    let offsets: Vec<usize> = constant
        .iter()
        .scan(0, |acc, c| {
            let o = *acc;
            *acc += c.len();
            Some(o)
        })
        .collect();
    let mut a = DMatrix::zeros(2 * entries, n);
    let mut b = DVector::zeros(2 * entries);
    for (blk, c) in constant.iter().enumerate() {
        for (e, z) in c.iter().enumerate() {
            let r = 2 * (offsets[blk] + e);
            b[r] = -z.re;
            b[r + 1] = -z.im;
        }
    }
    for v in 0..n {
        for (blk, m) in coeff(v) {
            for (e, z) in m.iter().enumerate() {
                let r = 2 * (offsets[blk] + e);
                a[(r, v)] += z.re;
                a[(r + 1, v)] += z.im;
            }
        }
    }
    (a, b)
}

fn dense_norm(m: &DMatrix<C64>) -> f64 {
    op_norm(&OperatorMatrix::new(m.clone()).expect("square"))
}

fn alpha_norm(blocks: &[DMatrix<C64>]) -> f64 {
    if blocks.is_empty() {
        return 0.0;
    }
    let d = blocks[0].nrows();
    let mut a = DMatrix::<C64>::zeros(d, d);
    for m in blocks {
        a += m.adjoint() * m;
    }
    dense_norm(&a)
}

/// Only the ratio of the weights matters: the larger is set to 1 and a
/// weight below 1e-12 of it is dropped, since the barrier cannot resolve it.
fn balanced_weights(w_s: f64, w_u: f64) -> (f64, f64) {
    let w_max = w_s.max(w_u);
    if !(w_max > 0.0) {
        return (w_s, w_u);
    }
    let clip = |w: f64| if w / w_max < 1e-12 { 0.0 } else { w / w_max };
    (clip(w_s), clip(w_u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Equality {
    None,
    BetaZero,
    AlphaZero,
}

struct ProgramResult {
    duals: Vec<f64>,
    status: SolveStatus,
    newton_steps: usize,
}

/// Minimizes w_s·‖α‖ + w_u·‖B‖ (dropping the terms with zero weight) under
/// an optional equality constraint, in normalized units.
fn solve_program(
    forms: &LinearForms,
    w_s: f64,
    w_u: f64,
    equality: Equality,
    warm: &[f64],
    gap: f64,
    max_newton: usize,
    t: f64,
) -> Result<ProgramResult> {
    let nd = forms.n_duals();
    let (w_s, w_u) = balanced_weights(w_s, w_u);
    let use_alpha = w_s > 0.0 && forms.jumps > 0;
    let use_beta = w_u > 0.0;
    let s_idx = nd;
    let u_idx = nd + use_alpha as usize;
    let n = u_idx + use_beta as usize;
    let mut cost = vec![0.0; n];
    let mut blocks = Vec::new();
    if use_alpha {
        cost[s_idx] = w_s;
        blocks.push(forms.alpha_block(s_idx));
    }
    if use_beta {
        cost[u_idx] = w_u;
        blocks.push(forms.beta_block(u_idx, 1.0));
        blocks.push(forms.beta_block(u_idx, -1.0));
    }
    let problem = LmiProblem { cost, blocks };
    let slack_start = |duals: &[f64]| {
        let mut x = duals.to_vec();
        if use_alpha {
            x.push(1.1 * alpha_norm(&forms.m_value(duals)) + 0.1);
        }
        if use_beta {
            x.push(1.1 * dense_norm(&forms.b_value(duals)) + 0.1);
        }
        x
    };
    let opts = BarrierOptions { gap, max_newton, ..Default::default() };
    match equality {
        Equality::None => {
            let x0 = slack_start(warm);
            let sol = solve_lmi(&problem, &x0, &opts);
            if sol.status == SolveStatus::Infeasible {
                return Err(Error::Solver { t, message: "starting point not strictly feasible".into() });
            }
            Ok(ProgramResult { duals: sol.x[..nd].to_vec(), status: sol.status, newton_steps: sol.newton_steps })
        }
        Equality::BetaZero | Equality::AlphaZero => {
            let (a, b) = if equality == Equality::BetaZero { forms.beta_equations() } else { forms.alpha_equations() };
            let set = affine_solution_set(&a, &b, 1e-10);
            let scale = b.norm().max(1.0);
            if set.residual > 1e-7 * scale {
                return Err(Error::Infeasible { t, residual: set.residual });
            }
            let k = set.null_basis.ncols();
            let slack = n - nd;
            let mut xp = DVector::zeros(n);
            xp.rows_mut(0, nd).copy_from(&set.particular);
            let mut null = DMatrix::zeros(n, k + slack);
            null.view_mut((0, 0), (nd, k)).copy_from(&set.null_basis);
            for i in 0..slack {
                null[(nd + i, k + i)] = 1.0;
            }
            let (reduced, _) = problem.restrict(&xp, &null);
            let warm_v = DVector::from_column_slice(warm);
            let z_d = set.null_basis.transpose() * (&warm_v - &set.particular);
            let duals0: Vec<f64> = (&set.particular + &set.null_basis * &z_d).iter().copied().collect();
            let x0 = slack_start(&duals0);
            let mut z0: Vec<f64> = z_d.iter().copied().collect();
            z0.extend_from_slice(&x0[nd..]);
            if reduced.n_vars() == 0 {
                return Ok(ProgramResult { duals: duals0, status: SolveStatus::Optimal, newton_steps: 0 });
            }
            let sol = solve_lmi(&reduced, &z0, &opts);
            if sol.status == SolveStatus::Infeasible {
                return Err(Error::Solver { t, message: "starting point not strictly feasible".into() });
            }
            let z = DVector::from_column_slice(&sol.x);
            let x = &xp + &null * z;
            Ok(ProgramResult { duals: x.rows(0, nd).iter().copied().collect(), status: sol.status, newton_steps: sol.newton_steps })
        }
    }
}

/// Scale used to normalize a snapshot: the largest of ‖H′‖ and ‖L′_j‖.
fn normalization(snap: &ChannelSnapshot) -> f64 {
    let mut s = op_norm(&snap.h_prime);
    for lp in &snap.jump_primes {
        s = s.max(op_norm(lp));
    }
    s
}

fn normalized(snap: &ChannelSnapshot, sigma: f64) -> ChannelSnapshot {
    ChannelSnapshot {
        h_prime: snap.h_prime.scale_real(1.0 / sigma),
        jump_primes: snap.jump_primes.iter().map(|l| l.scale_real(1.0 / sigma)).collect(),
        ..snap.clone()
    }
}

/// Solution of one instantaneous minimization.
#[derive(Clone, Debug)]
pub struct RhsSolution {
    /// 4(s + u√Q): the bound on dQ/dt (or 4‖α‖ for the β = 0 problem).
    pub value: f64,
    /// ‖α‖ at the returned variables.
    pub s: f64,
    /// ‖β‖ at the returned variables.
    pub u: f64,
    pub vars: DualVariables,
    pub status: SolveStatus,
    pub newton_steps: usize,
}

fn finish(snap: &ChannelSnapshot, vars: DualVariables, q: f64, status: SolveStatus, newton_steps: usize) -> Result<RhsSolution> {
    let s = op_norm(&assemble_alpha(snap, &vars)?);
    let u = op_norm(&assemble_b(snap, &vars)?);
    Ok(RhsSolution { value: 4.0 * (s + u * q.sqrt()), s, u, vars, status, newton_steps })
}

fn warm_reals(snap: &ChannelSnapshot, warm: Option<&DualVariables>, sigma: f64) -> Vec<f64> {
    match warm {
        Some(w) if w.jump_count() == snap.jump_count() => w.scaled(1.0 / sigma).to_reals(),
        _ => DualVariables::zeros(snap.jump_count()).to_reals(),
    }
}

/// Sets κ to the value minimizing ‖B‖ for the other variables fixed.
fn center_kappa(snap: &ChannelSnapshot, vars: &mut DualVariables) -> Result<()> {
    vars.kappa = 0.0;
    let ev = crate::operator::eigvalsh(&assemble_b(snap, vars)?);
    vars.kappa = -0.5 * (ev[0] + ev[ev.len() - 1]);
    Ok(())
}

/// min over (κ, η, γ) of 4(‖α‖ + ‖β‖√Q).
pub fn solve_rhs_sdp(snap: &ChannelSnapshot, q: f64, opts: &SolverOptions, warm: Option<&DualVariables>) -> Result<RhsSolution> {
    if !(q >= 0.0) {
        return Err(Error::InvalidConfig(format!("Q must be non-negative, got {q}")));
    }
    let nj = snap.jump_count();
    let sigma = normalization(snap);
    if sigma == 0.0 {
        return finish(snap, DualVariables::zeros(nj), q, SolveStatus::Optimal, 0);
    }
    let norm = normalized(snap, sigma);
    let forms = LinearForms::new(&norm);
    let sqrt_q = q.sqrt() / sigma;
    let warm = warm_reals(snap, warm, sigma);
    let result = solve_program(&forms, 1.0, sqrt_q, Equality::None, &warm, opts.gap, opts.max_newton, snap.t)?;
    let mut vars = DualVariables::from_reals(nj, &result.duals).scaled(sigma);
    if balanced_weights(1.0, sqrt_q).1 == 0.0 || nj == 0 {
        center_kappa(snap, &mut vars)?;
    }
    finish(snap, vars, q, result.status, result.newton_steps)
}

/// min 4‖α‖ subject to β = 0. Fails with [`Error::Infeasible`] when H′ is outside the span.
pub fn solve_constrained_alpha(snap: &ChannelSnapshot, opts: &SolverOptions) -> Result<RhsSolution> {
    let nj = snap.jump_count();
    let sigma = normalization(snap);
    if sigma == 0.0 {
        return finish(snap, DualVariables::zeros(nj), 0.0, SolveStatus::Optimal, 0);
    }
    let forms = LinearForms::new(&normalized(snap, sigma));
    let warm = DualVariables::zeros(nj).to_reals();
    let result = solve_program(&forms, 1.0, 0.0, Equality::BetaZero, &warm, opts.gap, opts.max_newton, snap.t)?;
    let vars = DualVariables::from_reals(nj, &result.duals).scaled(sigma);
    finish(snap, vars, 0.0, result.status, result.newton_steps)
}

/// Minimum of ‖β‖ over the dual variables.
#[derive(Clone, Debug)]
pub struct BetaSolution {
    pub u: f64,
    pub vars: DualVariables,
    pub status: SolveStatus,
}

/// min ‖β‖, optionally restricted to α = 0 (every M_j = 0).
pub fn solve_min_beta(snap: &ChannelSnapshot, alpha_zero: bool, opts: &SolverOptions, warm: Option<&DualVariables>) -> Result<BetaSolution> {
    let nj = snap.jump_count();
    let sigma = normalization(snap);
    if sigma == 0.0 {
        return Ok(BetaSolution { u: 0.0, vars: DualVariables::zeros(nj), status: SolveStatus::Optimal });
    }
    let forms = LinearForms::new(&normalized(snap, sigma));
    let warm = warm_reals(snap, warm, sigma);
    let equality = if alpha_zero && nj > 0 { Equality::AlphaZero } else { Equality::None };
    let result = solve_program(&forms, 0.0, 1.0, equality, &warm, opts.gap, opts.max_newton, snap.t)?;
    let vars = DualVariables::from_reals(nj, &result.duals).scaled(sigma);
    let u = op_norm(&assemble_b(snap, &vars)?);
    Ok(BetaSolution { u, vars, status: result.status })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub seed: u64,
    pub restarts: usize,
    /// Points per axis of the coarse grid (used when there are at most 3 parameters).
    pub grid: usize,
    pub max_evals: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { seed: 7, restarts: 6, grid: 7, max_evals: 3000 }
    }
}

/// Direct minimization of 4(‖α‖ + ‖β‖√Q): κ is eliminated through the
/// spectral half-gap of B, the rest is searched with a coarse grid and
/// Nelder–Mead restarts. Any returned value is attained, so it upper-bounds
/// the true minimum.
pub fn grid_oracle_rhs(snap: &ChannelSnapshot, q: f64, opts: &OracleOptions) -> Result<f64> {
    let nj = snap.jump_count();
    if nj > 2 {
        return Err(Error::Unsupported(format!("grid oracle supports at most 2 jump operators, got {nj}")));
    }
    let sq = q.max(0.0).sqrt();
    let eval = |p: &[f64]| -> f64 {
        let mut x = vec![0.0];
        x.extend_from_slice(p);
        let vars = DualVariables::from_reals(nj, &x);
        let (Ok(a), Ok(b)) = (assemble_alpha(snap, &vars), assemble_b(snap, &vars)) else {
            return f64::INFINITY;
        };
        4.0 * (op_norm(&a) + spectral_half_gap(&b) * sq)
    };
    let n = DualVariables::n_reals(nj) - 1;
    let h = normalization(snap).max(1e-300);
    let lnorm: Vec<f64> = snap.jumps.iter().map(|l| op_norm(l).max(1e-12)).collect();
    let mut scales = Vec::with_capacity(n);
    for _ in 0..2 {
        scales.extend(lnorm.iter().map(|l| h / l));
    }
    scales.extend(lnorm.iter().map(|l| h / (l * l)));
    for a in 0..nj {
        for b in a + 1..nj {
            let s = h / (lnorm[a] * lnorm[b]);
            scales.push(s);
            scales.push(s);
        }
    }
    let mut best = eval(&vec![0.0; n]);
    if n == 0 {
        return Ok(best);
    }
    let mut f = |p: &[f64]| eval(p);
    let nm_opts = NelderMeadOptions { max_evals: opts.max_evals, f_tol: 1e-13 * best.max(1e-300), x_tol: 1e-12 };
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n]];
    if n <= 3 && opts.grid >= 2 {
        let g = opts.grid;
        let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
        for idx in 0..g.pow(n as u32) {
            let mut r = idx;
            let p: Vec<f64> = (0..n)
                .map(|i| {
                    let k = r % g;
                    r /= g;
                    scales[i] * (-2.0 + 4.0 * k as f64 / (g - 1) as f64)
                })
                .collect();
            pts.push((f(&p), p));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        starts.extend(pts.into_iter().take(3).map(|(_, p)| p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        starts.push((0..n).map(|i| scales[i] * rng.random_range(-2.0..2.0)).collect());
    }
    for start in starts {
        let steps: Vec<f64> = scales.iter().map(|s| 0.5 * s).collect();
        let m = nelder_mead(&mut f, &start, &steps, &nm_opts);
        best = best.min(m.value);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    /// Base step; defaults to a fiftieth of the signal period.
    pub dt: Option<f64>,
    /// Below this Q the rate of √Q is taken from the α = 0 problem.
    pub q_switch: f64,
    pub max_halvings: u32,
    /// Relative change of the rate across a step that triggers halving.
    pub rhs_jump: f64,
    pub solver: SolverOptions,
    /// Times the integrator must land on exactly.
    pub checkpoints: Vec<f64>,
    /// Use [`grid_oracle_rhs`] when the interior-point solver runs out of iterations.
    pub oracle_fallback: bool,
    /// Seed of the fallback's restarts.
    pub oracle_seed: u64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            dt: None,
            q_switch: 1e-12,
            max_halvings: 4,
            rhs_jump: 0.2,
            solver: SolverOptions::default(),
            checkpoints: Vec::new(),
            oracle_fallback: true,
            oracle_seed: OracleOptions::default().seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub t: f64,
    pub q: f64,
    /// dQ/dt bound at (t, q).
    pub rhs: f64,
    pub s: f64,
    pub u: f64,
    pub status: SolveStatus,
    pub fallback: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BoundTrajectory {
    pub points: Vec<BoundPoint>,
    pub regime: Option<Regime>,
}

impl BoundTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn q_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.q).collect()
    }

    pub fn rhs_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rhs).collect()
    }

    pub fn final_q(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.q)
    }

    /// Q at time t, linearly interpolated between recorded points.
    pub fn q_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        match pts.binary_search_by(|p| p.t.total_cmp(&t)) {
            Ok(k) => pts[k].q,
            Err(0) => pts.first().map_or(0.0, |p| p.q),
            Err(k) if k >= pts.len() => pts[pts.len() - 1].q,
            Err(k) => {
                let (a, b) = (&pts[k - 1], &pts[k]);
                a.q + (b.q - a.q) * (t - a.t) / (b.t - a.t)
            }
        }
    }

    pub fn fallback_count(&self) -> usize {
        self.points.iter().filter(|p| p.fallback).count()
    }
}

#[derive(Clone, Debug)]
struct RateEval {
    /// dR/dt with R = √Q.
    rate: f64,
    s: f64,
    u: f64,
    status: SolveStatus,
    fallback: bool,
    vars: DualVariables,
}

struct Integrator<'a> {
    channel: &'a ParametricChannel,
    omega: f64,
    opts: &'a IntegrationOptions,
    warm: Option<DualVariables>,
}

impl Integrator<'_> {
    fn rate(&mut self, t: f64, r: f64) -> Result<RateEval> {
        let snap = self.channel.evaluate(self.omega, t)?;
        let r_switch = self.opts.q_switch.sqrt();
        if r < r_switch {
            match solve_min_beta(&snap, true, &self.opts.solver, self.warm.as_ref()) {
                Ok(b) => {
                    return Ok(RateEval { rate: 2.0 * b.u, s: 0.0, u: b.u, status: b.status, fallback: false, vars: b.vars });
                }
                Err(Error::Infeasible { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        // gap scaled with √Q′ keeps the error of s/R at the level of the requested gap
        let sigma = normalization(&snap).max(f64::MIN_POSITIVE);
        let q = r * r;
        let gap = self.opts.solver.gap * (r / sigma).min(1.0).max(1e-6);
        let solver = SolverOptions { gap, ..self.opts.solver };
        let sol = solve_rhs_sdp(&snap, q, &solver, self.warm.as_ref())?;
        let denom = 2.0 * r.max(r_switch);
        if sol.status == SolveStatus::MaxIter && self.opts.oracle_fallback {
            let oracle = grid_oracle_rhs(&snap, q, &OracleOptions { seed: self.opts.oracle_seed, ..OracleOptions::default() })?;
            let value = oracle.min(sol.value);
            return Ok(RateEval { rate: value / denom, s: sol.s, u: sol.u, status: sol.status, fallback: true, vars: sol.vars });
        }
        if sol.status == SolveStatus::MaxIter {
            return Err(Error::Solver { t, message: "interior-point iteration limit reached".into() });
        }
        Ok(RateEval { rate: sol.value / denom, s: sol.s, u: sol.u, status: sol.status, fallback: false, vars: sol.vars })
    }

    fn eval(&mut self, t: f64, r: f64) -> Result<RateEval> {
        let e = self.rate(t, r)?;
        self.warm = Some(e.vars.clone());
        Ok(e)
    }

    /// One RK4 step from (t, r) with rate k1, halving while the rate jumps.
    fn step(&mut self, t: f64, r: f64, h: f64, k1: &RateEval, depth: u32, out: &mut Vec<(f64, f64, RateEval)>) -> Result<()> {
        let k2 = self.eval(t + 0.5 * h, r + 0.5 * h * k1.rate)?;
        let k3 = self.eval(t + 0.5 * h, r + 0.5 * h * k2.rate)?;
        let k4 = self.eval(t + h, r + h * k3.rate)?;
        let scale = k1.rate.abs().max(k4.rate.abs());
        if depth < self.opts.max_halvings && (k4.rate - k1.rate).abs() > self.opts.rhs_jump * scale {
            self.step(t, r, 0.5 * h, k1, depth + 1, out)?;
            let &(tm, rm, ref km) = out.last().expect("half step recorded");
            let km = km.clone();
            return self.step(tm, rm, t + h - tm, &km, depth + 1, out);
        }
        let r_new = (r + h / 6.0 * (k1.rate + 2.0 * k2.rate + 2.0 * k3.rate + k4.rate)).max(r);
        let t_new = t + h;
        let k_new = self.eval(t_new, r_new)?;
        out.push((t_new, r_new, k_new));
        Ok(())
    }
}

fn point(t: f64, r: f64, e: &RateEval) -> BoundPoint {
    BoundPoint { t, q: r * r, rhs: 2.0 * r * e.rate, s: e.s, u: e.u, status: e.status, fallback: e.fallback }
}

/// Integrates dQ/dt = min 4(‖α‖ + ‖β‖√Q) from Q(0) = 0 to `t_final`.
///
/// The state is R = √Q, which removes the non-Lipschitz origin; the ODE is
/// the same. Steps are RK4 of the base size, cut at the kinks of the channel
/// and at requested checkpoints, and halved when the rate jumps across a step.
pub fn integrate_bound(channel: &ParametricChannel, omega: f64, t_final: f64, opts: &IntegrationOptions) -> Result<BoundTrajectory> {
    if !(t_final > 0.0) {
        return Err(Error::InvalidConfig(format!("final time must be positive, got {t_final}")));
    }
    let dt = opts.dt.unwrap_or(if omega != 0.0 { 2.0 * PI / omega.abs() / 50.0 } else { t_final / 2000.0 });
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let mut stops = channel.breakpoints(omega, 0.0, t_final);
    stops.extend(opts.checkpoints.iter().copied().filter(|&c| c > 0.0 && c < t_final));
    stops.push(t_final);
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let mut integ = Integrator { channel, omega, opts, warm: None };
    let mut t = 0.0;
    let mut r = 0.0;
    let mut k = integ.eval(t, r)?;
    let mut traj = BoundTrajectory { points: vec![point(t, r, &k)], regime: None };
    let mut next_stop = 0;
    while t < t_final {
        while stops[next_stop] <= t {
            next_stop += 1;
        }
        let target = stops[next_stop];
        // avoid slivers: stretch the step to the stop when it is close
        let h = if target - t <= 1.5 * dt { target - t } else { dt };
        let mut out = Vec::new();
        integ.step(t, r, h, &k, 0, &mut out)?;
        for (ts, rs, ks) in &out {
            traj.points.push(point(*ts, *rs, ks));
        }
        let (tn, rn, kn) = out.pop().expect("step produced a point");
        t = if (target - tn).abs() <= 1e-12 * target.max(1.0) { target } else { tn };
        r = rn;
        k = kn;
        if let Some(last) = traj.points.last_mut() {
            last.t = t;
        }
    }
    Ok(traj)
}
