//! Dense complex operator algebra.
//!
//! [`OperatorMatrix`] is the carrier for Hamiltonians, jump operators,
//! density matrices and the auxiliary matrices of the bound. Everything here
//! is small (d ≤ 16) and dense, so decompositions go straight through
//! `nalgebra`'s Hermitian eigensolver.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Square complex matrix.
#[derive(Clone, PartialEq)]
pub struct OperatorMatrix(DMatrix<C64>);

impl fmt::Debug for OperatorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OperatorMatrix{}", self.0)
    }
}

impl OperatorMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        Ok(Self(m))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    /// Row-major construction. Panics if `entries.len() != dim * dim`.
    pub fn from_row_slice(dim: usize, entries: &[C64]) -> Self {
        Self(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn from_real_rows(dim: usize, entries: &[f64]) -> Self {
        let c: Vec<C64> = entries.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::from_row_slice(dim, &c)
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Self(DMatrix::from_fn(dim, dim, f))
    }

    /// |a⟩⟨b|
    pub fn outer(a: &DVector<C64>, b: &DVector<C64>) -> Self {
        Self(a * b.adjoint())
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let d = values.len();
        Self::from_fn(d, |i, j| if i == j { C64::new(values[i], 0.0) } else { ZERO })
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.0[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: C64) {
        self.0[(i, j)] = value;
    }

    pub fn dagger(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn scale(&self, c: C64) -> Self {
        Self(&self.0 * c)
    }

    pub fn scale_real(&self, c: f64) -> Self {
        Self(self.0.map(|z| z * c))
    }

    pub fn apply(&self, v: &DVector<C64>) -> DVector<C64> {
        &self.0 * v
    }

    /// Hilbert–Schmidt (Frobenius) norm.
    pub fn hs_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// ‖X − X†‖ in Hilbert–Schmidt norm.
    pub fn hermiticity_defect(&self) -> f64 {
        (&self.0 - self.0.adjoint()).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() <= tol
    }

    /// (X + X†)/2, used to clean round-off from nominally Hermitian results.
    pub fn hermitize(&self) -> Self {
        Self((&self.0 + self.0.adjoint()) * C64::new(0.5, 0.0))
    }

    pub fn commutator(&self, other: &Self) -> Self {
        Self(&self.0 * &other.0 - &other.0 * &self.0)
    }

    pub fn anticommutator(&self, other: &Self) -> Self {
        Self(&self.0 * &other.0 + &other.0 * &self.0)
    }

    /// X ρ X†
    pub fn sandwich(&self, rho: &Self) -> Self {
        Self(&self.0 * &rho.0 * self.0.adjoint())
    }

    /// ⟨a|X|b⟩
    pub fn braket(&self, a: &DVector<C64>, b: &DVector<C64>) -> C64 {
        a.dotc(&(&self.0 * b))
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }
}

macro_rules! binop {
    ($tr:ident, $f:ident, $op:tt) => {
        impl $tr<&OperatorMatrix> for &OperatorMatrix {
            type Output = OperatorMatrix;
            fn $f(self, rhs: &OperatorMatrix) -> OperatorMatrix {
                OperatorMatrix(&self.0 $op &rhs.0)
            }
        }
        impl $tr<OperatorMatrix> for OperatorMatrix {
            type Output = OperatorMatrix;
            fn $f(self, rhs: OperatorMatrix) -> OperatorMatrix {
                OperatorMatrix(self.0 $op rhs.0)
            }
        }
        impl $tr<&OperatorMatrix> for OperatorMatrix {
            type Output = OperatorMatrix;
            fn $f(self, rhs: &OperatorMatrix) -> OperatorMatrix {
                OperatorMatrix(self.0 $op &rhs.0)
            }
        }
        impl $tr<OperatorMatrix> for &OperatorMatrix {
            type Output = OperatorMatrix;
            fn $f(self, rhs: OperatorMatrix) -> OperatorMatrix {
                OperatorMatrix(&self.0 $op rhs.0)
            }
        }
    };
}

binop!(Add, add, +);
binop!(Sub, sub, -);
binop!(Mul, mul, *);

impl Mul<C64> for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: C64) -> OperatorMatrix {
        OperatorMatrix(&self.0 * rhs)
    }
}

impl Mul<C64> for OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: C64) -> OperatorMatrix {
        OperatorMatrix(self.0 * rhs)
    }
}

impl Mul<f64> for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: f64) -> OperatorMatrix {
        self.scale_real(rhs)
    }
}

impl Mul<f64> for OperatorMatrix {
    type Output = OperatorMatrix;
    fn mul(self, rhs: f64) -> OperatorMatrix {
        self.scale_real(rhs)
    }
}

impl Neg for OperatorMatrix {
    type Output = OperatorMatrix;
    fn neg(self) -> OperatorMatrix {
        OperatorMatrix(-self.0)
    }
}

impl Neg for &OperatorMatrix {
    type Output = OperatorMatrix;
    fn neg(self) -> OperatorMatrix {
        OperatorMatrix(-&self.0)
    }
}

impl AddAssign<&OperatorMatrix> for OperatorMatrix {
    fn add_assign(&mut self, rhs: &OperatorMatrix) {
        self.0 += &rhs.0;
    }
}

impl SubAssign<&OperatorMatrix> for OperatorMatrix {
    fn sub_assign(&mut self, rhs: &OperatorMatrix) {
        self.0 -= &rhs.0;
    }
}

/// Single-qubit Pauli operators and ladder operators.
///
/// Basis ordering is (|0⟩, |1⟩) with σ_z|0⟩ = |0⟩; σ₋ = (σ_x − iσ_y)/2 maps
/// |0⟩ to |1⟩.
pub mod pauli {
    use super::*;

    pub fn id() -> OperatorMatrix {
        OperatorMatrix::identity(2)
    }

    pub fn x() -> OperatorMatrix {
        OperatorMatrix::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0])
    }

    pub fn y() -> OperatorMatrix {
        OperatorMatrix::from_row_slice(2, &[ZERO, -I, I, ZERO])
    }

    pub fn z() -> OperatorMatrix {
        OperatorMatrix::from_real_rows(2, &[1.0, 0.0, 0.0, -1.0])
    }

    pub fn minus() -> OperatorMatrix {
        OperatorMatrix::from_real_rows(2, &[0.0, 0.0, 1.0, 0.0])
    }

    pub fn plus() -> OperatorMatrix {
        OperatorMatrix::from_real_rows(2, &[0.0, 1.0, 0.0, 0.0])
    }

    pub fn by_name(name: &str) -> Option<OperatorMatrix> {
        match name {
            "I" | "i" | "id" => Some(id()),
            "X" | "x" => Some(x()),
            "Y" | "y" => Some(y()),
            "Z" | "z" => Some(z()),
            "minus" | "sm" => Some(minus()),
            "plus" | "sp" => Some(plus()),
            _ => None,
        }
    }
}

/// Splits X into its Hermitian part (X+X†)/2 and anti-Hermitian part (X−X†)/2.
pub fn decompose_hermitian(x: &OperatorMatrix) -> (OperatorMatrix, OperatorMatrix) {
    let xd = x.dagger();
    let h = (x + &xd).scale_real(0.5);
    let ah = (x - &xd).scale_real(0.5);
    (h, ah)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(x: &OperatorMatrix) -> (Vec<f64>, DMatrix<C64>) {
    let eig = SymmetricEigen::new(x.hermitize().into_matrix());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(x.dim(), x.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

pub fn eigvalsh(x: &OperatorMatrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(x.hermitize().into_matrix());
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Largest singular value, via the spectrum of X†X.
pub fn op_norm(x: &OperatorMatrix) -> f64 {
    let gram = x.dagger() * x;
    let top = eigvalsh(&gram).last().copied().unwrap_or(0.0);
    top.max(0.0).sqrt()
}

/// (λ_max − λ_min)/2 of a Hermitian matrix, which equals min over real κ of ‖X + κI‖.
pub fn spectral_half_gap(x: &OperatorMatrix) -> f64 {
    let ev = eigvalsh(x);
    0.5 * (ev[ev.len() - 1] - ev[0])
}

/// Tr(X†Y).
pub fn hs_inner(x: &OperatorMatrix, y: &OperatorMatrix) -> Result<C64> {
    x.check_same_dim(y)?;
    Ok(x.0.iter().zip(y.0.iter()).map(|(a, b)| a.conj() * b).sum())
}

fn re_inner(x: &OperatorMatrix, y: &OperatorMatrix) -> f64 {
    x.0.iter().zip(y.0.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
}

pub fn kron(a: &OperatorMatrix, b: &OperatorMatrix) -> OperatorMatrix {
    OperatorMatrix(a.0.kronecker(&b.0))
}

/// ½‖ρ − σ‖₁ for Hermitian arguments.
pub fn trace_distance(rho: &OperatorMatrix, sigma: &OperatorMatrix) -> f64 {
    0.5 * eigvalsh(&(rho - sigma)).iter().map(|v| v.abs()).sum::<f64>()
}

/// ‖U†U − I‖ in Hilbert–Schmidt norm.
pub fn unitarity_defect(u: &OperatorMatrix) -> f64 {
    (u.dagger() * u - OperatorMatrix::identity(u.dim())).hs_norm()
}

/// Orthonormal basis of a real subspace of Hermitian matrices.
#[derive(Clone, Debug)]
pub struct HermitianBasis {
    pub dim: usize,
    pub elements: Vec<OperatorMatrix>,
    pub tolerance: f64,
}

impl HermitianBasis {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.elements.iter().enumerate() {
            for (j, b) in self.elements.iter().enumerate() {
                let g = hs_inner(a, b).expect("basis elements share a dimension");
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - C64::new(target, 0.0)).norm());
            }
        }
        worst
    }
}

/// Gram–Schmidt over the real vector space of Hermitian matrices with inner
/// product Re Tr(X†Y).
///
/// A candidate is dropped when its residual after projection is below
/// `tol` times the largest generator norm, so the output length is the
/// numerical rank of the generator set.
pub fn real_span_orthonormalize(generators: &[OperatorMatrix], tol: f64) -> Result<HermitianBasis> {
    let Some(first) = generators.first() else {
        return Ok(HermitianBasis { dim: 0, elements: Vec::new(), tolerance: tol });
    };
    let dim = first.dim();
    let scale = generators.iter().map(|g| g.hs_norm()).fold(0.0, f64::max);
    let mut elements: Vec<OperatorMatrix> = Vec::new();
    for g in generators {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: g.dim() });
        }
        let defect = g.hermiticity_defect();
        if defect > tol * scale.max(1.0) {
            return Err(Error::NotHermitian { deviation: defect });
        }
        let mut v = g.hermitize();
        // two passes of modified Gram–Schmidt keep the basis orthogonal to round-off
        for _ in 0..2 {
            for e in &elements {
                let c = re_inner(e, &v);
                v -= &e.scale_real(c);
            }
        }
        let n = v.hs_norm();
        if scale > 0.0 && n >= tol * scale {
            elements.push(v.scale_real(1.0 / n));
        }
    }
    Ok(HermitianBasis { dim, elements, tolerance: tol })
}

/// Removes the components of a Hermitian X along the basis: X − Σ Re Tr(e_i†X) e_i.
pub fn project_complement(x: &OperatorMatrix, basis: &HermitianBasis) -> Result<OperatorMatrix> {
    if !basis.is_empty() && basis.dim != x.dim() {
        return Err(Error::DimensionMismatch { expected: basis.dim, found: x.dim() });
    }
    let mut out = x.clone();
    for e in &basis.elements {
        let c = re_inner(e, &out);
        out -= &e.scale_real(c);
    }
    Ok(out)
}
