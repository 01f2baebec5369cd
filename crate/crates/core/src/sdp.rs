//! Small dense linear-matrix-inequality programs.
//!
//! Solves `min cᵀx` subject to `F_b(x) = F_b0 + Σ_i x_i F_bi ⪰ 0` for a few
//! Hermitian blocks. The caller supplies a strictly feasible starting point.
//! [`solve_lmi`] is a primal-dual interior-point method (HKM direction with a
//! Mehrotra predictor-corrector); [`solve_lmi_barrier`] is a slower primal
//! log-barrier method kept as an independent cross-check.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::operator::C64;

#[derive(Clone, Debug)]
pub struct LmiBlock {
    pub f0: DMatrix<C64>,
    /// Coefficient matrices by variable index; at most one entry per variable.
    pub terms: Vec<(usize, DMatrix<C64>)>,
}

impl LmiBlock {
    pub fn new(f0: DMatrix<C64>) -> Self {
        Self { f0, terms: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    /// Adds `coeff` to the matrix of variable `var`, merging repeated indices.
    pub fn add_term(&mut self, var: usize, coeff: DMatrix<C64>) {
        if coeff.iter().all(|z| z.norm() == 0.0) {
            return;
        }
        if let Some((_, m)) = self.terms.iter_mut().find(|(v, _)| *v == var) {
            *m += coeff;
        } else {
            self.terms.push((var, coeff));
        }
    }

    pub fn value(&self, x: &[f64]) -> DMatrix<C64> {
        let mut f = self.f0.clone();
        for (i, fi) in &self.terms {
            f += fi * C64::new(x[*i], 0.0);
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct LmiProblem {
    pub cost: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
}

impl LmiProblem {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn barrier_degree(&self) -> usize {
        self.blocks.iter().map(LmiBlock::size).sum()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Whether every block is positive definite at `x`.
    pub fn strictly_feasible(&self, x: &[f64]) -> bool {
        self.blocks.iter().all(|b| pd_cholesky(b.value(x)).is_some())
    }

    /// The problem in reduced variables z with x = x_p + N z. Returns the
    /// reduced problem and the constant objective offset cᵀx_p.
    pub fn restrict(&self, x_p: &DVector<f64>, null: &DMatrix<f64>) -> (LmiProblem, f64) {
        let k = null.ncols();
        let cost = (0..k).map(|j| (0..self.n_vars()).map(|i| self.cost[i] * null[(i, j)]).sum()).collect();
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut out = LmiBlock::new(b.value(x_p.as_slice()));
                for j in 0..k {
                    let mut m = DMatrix::zeros(b.size(), b.size());
                    for (i, fi) in &b.terms {
                        let w = null[(*i, j)];
                        if w != 0.0 {
                            m += fi * C64::new(w, 0.0);
                        }
                    }
                    out.add_term(j, m);
                }
                out
            })
            .collect();
        (LmiProblem { cost, blocks }, self.objective(x_p.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl SolveStatus {
    pub fn label(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BarrierOptions {
    /// Absolute duality-gap target on the objective.
    pub gap: f64,
    /// Cap on the total number of Newton steps (interior-point iterations).
    pub max_newton: usize,
    /// Barrier method only: factor by which the weight grows between centerings.
    pub mu: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { gap: 1e-8, max_newton: 400, mu: 30.0 }
    }
}

#[derive(Clone, Debug)]
pub struct LmiSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub newton_steps: usize,
    pub status: SolveStatus,
}

/// Cholesky factor of a Hermitian matrix, `None` unless it is positive definite.
///
/// The complex factorization in nalgebra takes complex square roots of
/// negative pivots instead of failing, so the pivots are checked here.
pub fn pd_cholesky(mut m: DMatrix<C64>) -> Option<Cholesky<C64, nalgebra::Dyn>> {
    for k in 0..m.nrows() {
        m[(k, k)].im = 0.0;
    }
    let chol = Cholesky::new(m)?;
    let l = chol.l_dirty();
    (0..l.nrows())
        .all(|k| l[(k, k)].re > 0.0 && l[(k, k)].re.is_finite() && l[(k, k)].im.abs() <= 1e-10 * l[(k, k)].re)
        .then_some(chol)
}

struct Local {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn barrier_value(problem: &LmiProblem, x: &[f64], weight: f64) -> Option<f64> {
    let mut v = weight * problem.objective(x);
    for b in &problem.blocks {
        let chol = pd_cholesky(b.value(x))?;
        let l = chol.l_dirty();
        for k in 0..b.size() {
            v -= 2.0 * l[(k, k)].re.ln();
        }
    }
    v.is_finite().then_some(v)
}

fn local_model(problem: &LmiProblem, x: &[f64], weight: f64) -> Option<Local> {
    let n = problem.n_vars();
    let mut grad = DVector::from_iterator(n, problem.cost.iter().map(|c| weight * c));
    let mut hess = DMatrix::zeros(n, n);
    let mut value = weight * problem.objective(x);
    for b in &problem.blocks {
        let chol = pd_cholesky(b.value(x))?;
        {
            let l = chol.l_dirty();
            for k in 0..b.size() {
                value -= 2.0 * l[(k, k)].re.ln();
            }
        }
        let ws: Vec<(usize, DMatrix<C64>)> = b.terms.iter().map(|(i, fi)| (*i, chol.solve(fi))).collect();
        for (a, (i, wi)) in ws.iter().enumerate() {
            grad[*i] -= wi.trace().re;
            for (j, wj) in ws.iter().skip(a) {
                // Re tr(W_i W_j) without forming the product
                let mut s = 0.0;
                for p in 0..b.size() {
                    for q in 0..b.size() {
                        let (u, v) = (wi[(p, q)], wj[(q, p)]);
                        s += u.re * v.re - u.im * v.im;
                    }
                }
                hess[(*i, *j)] += s;
                if i != j {
                    hess[(*j, *i)] += s;
                }
            }
        }
    }
    value.is_finite().then_some(Local { value, grad, hess })
}

fn newton_direction(local: &Local) -> DVector<f64> {
    let n = local.grad.len();
    let scale = (0..n).map(|i| local.hess[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut reg = 1e-14 * scale;
    for _ in 0..8 {
        let mut h = local.hess.clone();
        for i in 0..n {
            h[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(h) {
            return -c.solve(&local.grad);
        }
        reg *= 100.0;
    }
    -&local.grad / scale
}

/// Runs the barrier method from a strictly feasible `x0`.
///
/// Returns status `Infeasible` when `x0` is not strictly feasible and
/// `MaxIter` when the Newton budget runs out first.
pub fn solve_lmi_barrier(problem: &LmiProblem, x0: &[f64], opts: &BarrierOptions) -> LmiSolution {
    let m = problem.barrier_degree() as f64;
    let mut x = x0.to_vec();
    if !problem.strictly_feasible(&x) {
        return LmiSolution { objective: problem.objective(&x), x, gap: f64::INFINITY, newton_steps: 0, status: SolveStatus::Infeasible };
    }
    if problem.n_vars() == 0 || m == 0.0 {
        return LmiSolution { objective: problem.objective(&x), x, gap: 0.0, newton_steps: 0, status: SolveStatus::Optimal };
    }
    let mut weight = m / problem.objective(&x).abs().max(1.0).max(opts.gap);
    let mut steps = 0;
    loop {
        // loose centering on the way, tight on the last one
        let last = m / weight <= opts.gap;
        let tol = if last { 1e-10 } else { 1e-4 };
        loop {
            let Some(local) = local_model(problem, &x, weight) else {
                break;
            };
            let dx = newton_direction(&local);
            let slope = local.grad.dot(&dx);
            if -slope / 2.0 <= tol {
                break;
            }
            if steps >= opts.max_newton {
                return LmiSolution {
                    objective: problem.objective(&x),
                    x,
                    gap: m / weight,
                    newton_steps: steps,
                    status: SolveStatus::MaxIter,
                };
            }
            steps += 1;
            let mut step = 1.0;
            let mut progress = None;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + step * d).collect();
                if let Some(v) = barrier_value(problem, &trial, weight) {
                    if v <= local.value + 0.25 * step * slope {
                        x = trial;
                        progress = Some(local.value - v);
                        break;
                    }
                }
                step *= 0.5;
            }
            // stop once the decrease is lost in the rounding of the barrier value
            match progress {
                Some(dv) if dv > 1e-14 * local.value.abs().max(1.0) => {}
                _ => break,
            }
        }
        let gap = m / weight;
        if gap <= opts.gap {
            return LmiSolution { objective: problem.objective(&x), x, gap, newton_steps: steps, status: SolveStatus::Optimal };
        }
        weight *= opts.mu;
    }
}

/// Hermitian part of a square matrix.
fn herm(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Re tr(A B) without forming the product.
fn re_trace_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            let (u, v) = (a[(p, q)], b[(q, p)]);
            s += u.re * v.re - u.im * v.im;
        }
    }
    s
}

/// Largest α ≤ `cap` keeping `LL† + α D` positive semidefinite, given the Cholesky factor of `LL†`.
fn max_step(chol: &Cholesky<C64, nalgebra::Dyn>, d: &DMatrix<C64>, cap: f64) -> f64 {
    let l = chol.l();
    let Some(y) = l.solve_lower_triangular(d) else {
        return 0.0;
    };
    let Some(w) = l.solve_lower_triangular(&y.adjoint()) else {
        return 0.0;
    };
    let lam = herm(&w).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    if lam < 0.0 {
        cap.min(-1.0 / lam)
    } else {
        cap
    }
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = rhs.len();
    let scale = (0..n).map(|i| m[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut reg = 1e-15 * scale;
    for _ in 0..8 {
        let mut h = m.clone();
        for i in 0..n {
            h[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(h) {
            return c.solve(rhs);
        }
        reg *= 100.0;
    }
    m.clone().lu().solve(rhs).unwrap_or_else(|| rhs / scale)
}

struct BlockState {
    z_chol: Cholesky<C64, nalgebra::Dyn>,
    z_inv: DMatrix<C64>,
    x: DMatrix<C64>,
}

/// Runs the primal-dual interior-point method from a strictly feasible `x0`.
///
/// The primal iterate stays feasible; the dual `X_b ⪰ 0` starts at the
/// identity and its equality residual `c_i − Σ_b tr(F_bi X_b)` is driven to
/// zero alongside the complementarity `Σ_b tr(F_b(x) X_b)`. The reported gap
/// bounds `cᵀx` minus the dual objective.
pub fn solve_lmi(problem: &LmiProblem, x0: &[f64], opts: &BarrierOptions) -> LmiSolution {
    let n = problem.n_vars();
    let m = problem.barrier_degree() as f64;
    let mut x = x0.to_vec();
    if !problem.strictly_feasible(&x) {
        return LmiSolution { objective: problem.objective(&x), x, gap: f64::INFINITY, newton_steps: 0, status: SolveStatus::Infeasible };
    }
    if n == 0 || m == 0.0 {
        return LmiSolution { objective: problem.objective(&x), x, gap: 0.0, newton_steps: 0, status: SolveStatus::Optimal };
    }
    let c = DVector::from_column_slice(&problem.cost);
    let c_scale = c.amax().max(1.0);
    let mut duals: Vec<DMatrix<C64>> = problem.blocks.iter().map(|b| DMatrix::identity(b.size(), b.size())).collect();
    let mut gap = f64::INFINITY;
    let mut best_gap = f64::INFINITY;
    let mut stalled = 0;
    for iter in 0..=opts.max_newton {
        let mut states = Vec::with_capacity(problem.blocks.len());
        for (b, xb) in problem.blocks.iter().zip(&duals) {
            let Some(z_chol) = pd_cholesky(b.value(&x)) else {
                // rounding pushed the slack onto the boundary; keep the last iterate
                return LmiSolution { objective: problem.objective(&x), x, gap, newton_steps: iter, status: SolveStatus::MaxIter };
            };
            let z_inv = z_chol.inverse();
            states.push(BlockState { z_chol, z_inv, x: xb.clone() });
        }
        let mut residual = c.clone();
        let mut comp = 0.0;
        for (b, st) in problem.blocks.iter().zip(&states) {
            for (i, fi) in &b.terms {
                residual[*i] -= re_trace_product(fi, &st.x);
            }
            comp += re_trace_product(&b.value(&x), &st.x);
        }
        gap = comp + residual.dot(&DVector::from_column_slice(&x)).abs();
        if comp <= opts.gap && residual.amax() <= 1e-8 * c_scale {
            return LmiSolution { objective: problem.objective(&x), x, gap, newton_steps: iter, status: SolveStatus::Optimal };
        }
        if iter == opts.max_newton {
            break;
        }
        // rounding in the Schur complement eventually stops all progress
        if gap < best_gap * 0.999 {
            best_gap = gap;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 6 {
                return LmiSolution { objective: problem.objective(&x), x, gap, newton_steps: iter, status: SolveStatus::MaxIter };
            }
        }
        let mu = comp / m;
        // Schur complement M_ij = Re tr(F_i Z⁻¹ F_j X) and g_i = Re tr(F_i Z⁻¹)
        let mut schur = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (b, st) in problem.blocks.iter().zip(&states) {
            let gs: Vec<DMatrix<C64>> = b.terms.iter().map(|(_, fj)| &st.z_inv * fj * &st.x).collect();
            for (a, (i, fi)) in b.terms.iter().enumerate() {
                g[*i] += re_trace_product(fi, &st.z_inv);
                for (j, gj) in b.terms.iter().map(|t| t.0).zip(&gs).skip(a) {
                    let v = re_trace_product(fi, gj);
                    schur[(*i, j)] += v;
                    if *i != j {
                        schur[(j, *i)] += v;
                    }
                }
            }
        }
        let schur = (&schur + schur.transpose()) * 0.5;
        let direction = |rhs: &DVector<f64>, extra: &[DMatrix<C64>], target: f64| {
            let dx = solve_spd(&schur, rhs);
            let mut dz = Vec::with_capacity(states.len());
            let mut dxm = Vec::with_capacity(states.len());
            for ((b, st), e) in problem.blocks.iter().zip(&states).zip(extra) {
                let mut d = DMatrix::zeros(b.size(), b.size());
                for (i, fi) in &b.terms {
                    d += fi * C64::new(dx[*i], 0.0);
                }
                let raw = &st.z_inv * C64::new(target, 0.0) - &st.x - &st.z_inv * &d * &st.x - e;
                dxm.push(herm(&raw));
                dz.push(d);
            }
            (dx, dz, dxm)
        };
        let steps = |dz: &[DMatrix<C64>], dxm: &[DMatrix<C64>]| {
            let mut ap = 1.0f64;
            let mut ad = 1.0f64;
            for ((st, d), e) in states.iter().zip(dz).zip(dxm) {
                ap = max_step(&st.z_chol, d, ap / 0.95) * 0.95;
                let Some(xc) = pd_cholesky(st.x.clone()) else {
                    ad = 0.0;
                    continue;
                };
                ad = max_step(&xc, e, ad / 0.95) * 0.95;
            }
            (ap.min(1.0), ad.min(1.0))
        };
        // predictor
        let zeros: Vec<DMatrix<C64>> = states.iter().map(|st| DMatrix::zeros(st.x.nrows(), st.x.nrows())).collect();
        let (_, dz_a, dx_a) = direction(&(-&c), &zeros, 0.0);
        let (ap, ad) = steps(&dz_a, &dx_a);
        let mut comp_aff = 0.0;
        for (((b, st), d), e) in problem.blocks.iter().zip(&states).zip(&dz_a).zip(&dx_a) {
            let zn = b.value(&x) + d * C64::new(ap, 0.0);
            let xn = &st.x + e * C64::new(ad, 0.0);
            comp_aff += re_trace_product(&zn, &xn);
        }
        let sigma = (comp_aff.max(0.0) / comp).powi(3).min(1.0);
        // corrector
        let mut rhs = &g * (sigma * mu) - &c;
        let mut second = Vec::with_capacity(states.len());
        for (((b, st), d), e) in problem.blocks.iter().zip(&states).zip(&dz_a).zip(&dx_a) {
            let w = &st.z_inv * d * e;
            for (i, fi) in &b.terms {
                rhs[*i] -= re_trace_product(fi, &w);
            }
            second.push(w);
        }
        let (dx, dz, dxm) = direction(&rhs, &second, sigma * mu);
        let (ap, ad) = steps(&dz, &dxm);
        for (v, d) in x.iter_mut().zip(dx.iter()) {
            *v += ap * d;
        }
        for (xb, e) in duals.iter_mut().zip(&dxm) {
            *xb += e * C64::new(ad, 0.0);
            *xb = herm(xb);
        }
    }
    LmiSolution { objective: problem.objective(&x), x, gap, newton_steps: opts.max_newton, status: SolveStatus::MaxIter }
}

/// Solution set of the real linear system A x = b.
#[derive(Clone, Debug)]
pub struct AffineSet {
    pub particular: DVector<f64>,
    pub null_basis: DMatrix<f64>,
    pub residual: f64,
}

/// Least-norm solution and null-space basis of A x = b from the spectrum of AᵀA.
pub fn affine_solution_set(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> AffineSet {
    let n = a.ncols();
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    let eig = SymmetricEigen::new(ata);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let threshold = rel_tol * rel_tol * top;
    let mut particular = DVector::zeros(n);
    let mut null_cols = Vec::new();
    for k in 0..n {
        let v = eig.eigenvectors.column(k);
        let lam = eig.eigenvalues[k];
        if lam > threshold && lam > 0.0 {
            particular += v * (v.dot(&atb) / lam);
        } else {
            null_cols.push(v.into_owned());
        }
    }
    let residual = (a * &particular - b).norm();
    let null_basis = if null_cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&null_cols) };
    AffineSet { particular, null_basis, residual }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn real(m: &[f64], k: usize) -> DMatrix<C64> {
        DMatrix::from_row_slice(k, k, &m.iter().map(|&v| C64::new(v, 0.0)).collect::<Vec<_>>())
    }

    #[test]
    fn scalar_lp() {
        // min x s.t. x − 2 ≥ 0
        let mut b = LmiBlock::new(real(&[-2.0], 1));
        b.add_term(0, real(&[1.0], 1));
        let p = LmiProblem { cost: vec![1.0], blocks: vec![b] };
        let sol = solve_lmi(&p, &[5.0], &BarrierOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal, "{sol:?}");
        assert!((sol.objective - 2.0).abs() <= 1e-8, "{sol:?}");
    }

    #[test]
    fn largest_eigenvalue() {
        // min u s.t. uI − A ⪰ 0, with A Hermitian: optimum λ_max(A)
        let a = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(0.0, 2.0), C64::new(0.0, -2.0), C64::new(-3.0, 0.0)]);
        let mut b = LmiBlock::new(-a);
        b.add_term(0, DMatrix::identity(2, 2));
        let p = LmiProblem { cost: vec![1.0], blocks: vec![b] };
        let sol = solve_lmi(&p, &[10.0], &BarrierOptions::default());
        let expected = -1.0 + 8f64.sqrt();
        assert!((sol.objective - expected).abs() <= 1e-8, "{}", sol.objective);
    }

    #[test]
    fn schur_norm_bound() {
        // min s s.t. [[s, m],[m, 1]] ⪰ 0 → s = m²
        let mut b = LmiBlock::new(real(&[0.0, 3.0, 3.0, 1.0], 2));
        b.add_term(0, real(&[1.0, 0.0, 0.0, 0.0], 2));
        let p = LmiProblem { cost: vec![1.0], blocks: vec![b] };
        let sol = solve_lmi(&p, &[100.0], &BarrierOptions::default());
        assert!((sol.objective - 9.0).abs() <= 1e-8);
    }

    #[test]
    fn infeasible_start_reported() {
        let mut b = LmiBlock::new(real(&[-2.0], 1));
        b.add_term(0, real(&[1.0], 1));
        let p = LmiProblem { cost: vec![1.0], blocks: vec![b] };
        assert_eq!(solve_lmi(&p, &[1.0], &BarrierOptions::default()).status, SolveStatus::Infeasible);
    }

    #[test]
    fn restriction_solves_equality_constrained_problem() {
        // min x0 + x1 s.t. x0 ≥ 1, x1 ≥ 1, x0 − x1 = 3 → x = (4, 1)
        let mut b0 = LmiBlock::new(real(&[-1.0], 1));
        b0.add_term(0, real(&[1.0], 1));
        let mut b1 = LmiBlock::new(real(&[-1.0], 1));
        b1.add_term(1, real(&[1.0], 1));
        let p = LmiProblem { cost: vec![1.0, 1.0], blocks: vec![b0, b1] };
        let set = affine_solution_set(&DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), &DVector::from_vec(vec![3.0]), 1e-10);
        assert!(set.residual < 1e-12);
        assert_eq!(set.null_basis.ncols(), 1);
        let (reduced, offset) = p.restrict(&set.particular, &set.null_basis);
        // any z large enough along the null direction is feasible; find one
        let z0 = [10.0 * set.null_basis[(0, 0)].signum()];
        let sol = solve_lmi(&reduced, &z0, &BarrierOptions::default());
        assert!((sol.objective + offset - 5.0).abs() < 1e-7, "{}", sol.objective + offset);
    }

    #[test]
    fn inconsistent_system_has_residual() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let set = affine_solution_set(&a, &DVector::from_vec(vec![1.0, -1.0]), 1e-10);
        assert!((set.residual - 2f64.sqrt()).abs() < 1e-12);
    }

    fn complex(v: &[f64], k: usize) -> DMatrix<C64> {
        DMatrix::from_fn(k, k, |i, j| C64::new(v[2 * (i * k + j)], v[2 * (i * k + j) + 1]))
    }

    /// min s + w·u over (y0, y1, s, u): sI ⪰ M(y)†M(y) via a Schur block, uI ± B(y) ⪰ 0.
    fn norm_program(v: &[f64], w: f64) -> (LmiProblem, Vec<f64>) {
        let k = 2;
        let m: Vec<DMatrix<C64>> = (0..3).map(|r| complex(&v[8 * r..8 * r + 8], k)).collect();
        let bh: Vec<DMatrix<C64>> = (3..6).map(|r| herm(&complex(&v[8 * r..8 * r + 8], k))).collect();
        let embed = |mat: &DMatrix<C64>| {
            let mut big = DMatrix::zeros(2 * k, 2 * k);
            big.view_mut((k, 0), (k, k)).copy_from(mat);
            big.view_mut((0, k), (k, k)).copy_from(&mat.adjoint());
            big
        };
        let mut f0 = embed(&m[0]);
        f0.view_mut((k, k), (k, k)).fill_with_identity();
        let mut schur = LmiBlock::new(f0);
        schur.add_term(0, embed(&m[1]));
        schur.add_term(1, embed(&m[2]));
        let mut s_coeff = DMatrix::zeros(2 * k, 2 * k);
        s_coeff.view_mut((0, 0), (k, k)).fill_with_identity();
        schur.add_term(2, s_coeff);
        let mut blocks = vec![schur];
        for sign in [1.0, -1.0] {
            let sg = C64::new(-sign, 0.0);
            let mut b = LmiBlock::new(&bh[0] * sg);
            b.add_term(0, &bh[1] * sg);
            b.add_term(1, &bh[2] * sg);
            b.add_term(3, DMatrix::identity(k, k));
            blocks.push(b);
        }
        let p = LmiProblem { cost: vec![0.0, 0.0, 1.0, w], blocks };
        let big: f64 = v.iter().map(|x| x.abs()).sum::<f64>() + 1.0;
        (p, vec![0.0, 0.0, big * big, big])
    }

    #[test]
    fn primal_dual_matches_barrier() {
        let v: Vec<f64> = (0..48).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        let (p, x0) = norm_program(&v, 0.7);
        let a = solve_lmi(&p, &x0, &BarrierOptions::default());
        let b = solve_lmi_barrier(&p, &x0, &BarrierOptions::default());
        assert_eq!(a.status, SolveStatus::Optimal, "{a:?}");
        assert_eq!(b.status, SolveStatus::Optimal, "{b:?}");
        assert!((a.objective - b.objective).abs() <= 2e-8, "{} vs {}", a.objective, b.objective);
        assert!(a.newton_steps < b.newton_steps);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn primal_dual_agrees_with_barrier_on_norm_programs(v in prop::collection::vec(-2.0f64..2.0, 48), w in 0.05f64..5.0) {
            let (p, x0) = norm_program(&v, w);
            let a = solve_lmi(&p, &x0, &BarrierOptions::default());
            let b = solve_lmi_barrier(&p, &x0, &BarrierOptions::default());
            prop_assert_eq!(a.status, SolveStatus::Optimal);
            prop_assert_eq!(b.status, SolveStatus::Optimal);
            prop_assert!((a.objective - b.objective).abs() <= 2e-8 * a.objective.abs().max(1.0), "{} vs {}", a.objective, b.objective);
        }

        #[test]
        fn eigenvalue_program_matches_spectrum(v in prop::collection::vec(-3.0f64..3.0, 9)) {
            // random 3×3 real symmetric A: min u with uI ⪰ A equals λ_max
            let a = DMatrix::from_fn(3, 3, |i, j| {
                let (p, q) = if i <= j { (i, j) } else { (j, i) };
                v[p * 3 + q]
            });
            let lmax = SymmetricEigen::new(a.clone()).eigenvalues.max();
            let mut b = LmiBlock::new(a.map(|x| C64::new(-x, 0.0)));
            b.add_term(0, DMatrix::identity(3, 3));
            let p = LmiProblem { cost: vec![1.0], blocks: vec![b] };
            let sol = solve_lmi(&p, &[lmax.abs() + 10.0], &BarrierOptions::default());
            prop_assert_eq!(sol.status, SolveStatus::Optimal);
            prop_assert!(sol.objective >= lmax - 1e-12);
            prop_assert!(sol.objective - lmax <= 1e-8);
        }
    }
}
