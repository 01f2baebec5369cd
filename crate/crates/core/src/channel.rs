//! Parametric time-dependent GKSL channels.
//!
//! A channel is a Hamiltonian H(ω,t) plus jump operators L_j(ω,t), each with
//! its ω-derivative. Catalog and configured models are built from a small
//! symbolic grammar, sums of `c·ω^r·t^p·trig(qωt)·P`, so the derivatives are
//! exact. Arbitrary models can also be supplied as closures.

use std::f64::consts::PI;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{kron, pauli, OperatorMatrix, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    One,
    Sin,
    Cos,
}

impl Trig {
    fn eval(self, x: f64) -> f64 {
        match self {
            Trig::One => 1.0,
            Trig::Sin => x.sin(),
            Trig::Cos => x.cos(),
        }
    }
}

/// One summand `coeff · ω^omega_power · t^t_power · trig(freq·ω·t) · op`.
#[derive(Clone, Debug)]
pub struct Term {
    pub coeff: C64,
    pub omega_power: u32,
    pub t_power: u32,
    pub trig: Trig,
    pub freq: f64,
    pub op: OperatorMatrix,
}

impl Term {
    pub fn new(coeff: f64, trig: Trig, freq: f64, op: OperatorMatrix) -> Self {
        Self { coeff: C64::new(coeff, 0.0), omega_power: 0, t_power: 0, trig, freq, op }
    }

    pub fn scalar(&self, omega: f64, t: f64) -> C64 {
        self.coeff
            * omega.powi(self.omega_power as i32)
            * t.powi(self.t_power as i32)
            * self.trig.eval(self.freq * omega * t)
    }

    fn same_shape(&self, other: &Term) -> bool {
        self.omega_power == other.omega_power
            && self.t_power == other.t_power
            && self.trig == other.trig
            && (self.trig == Trig::One || self.freq == other.freq)
    }

    fn derivative(&self) -> Vec<Term> {
        let mut out = Vec::new();
        if self.omega_power > 0 {
            out.push(Term {
                coeff: self.coeff * self.omega_power as f64,
                omega_power: self.omega_power - 1,
                ..self.clone()
            });
        }
        let (trig, sign) = match self.trig {
            Trig::One => return out,
            Trig::Sin => (Trig::Cos, 1.0),
            Trig::Cos => (Trig::Sin, -1.0),
        };
        if self.freq != 0.0 {
            out.push(Term {
                coeff: self.coeff * (sign * self.freq),
                t_power: self.t_power + 1,
                trig,
                ..self.clone()
            });
        }
        out
    }
}

/// Finite sum of [`Term`]s acting on a fixed dimension.
#[derive(Clone, Debug)]
pub struct SymbolicOperator {
    pub dim: usize,
    pub terms: Vec<Term>,
}

impl SymbolicOperator {
    pub fn new(dim: usize, terms: Vec<Term>) -> Result<Self> {
        for term in &terms {
            if term.op.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: term.op.dim() });
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    pub fn constant(op: OperatorMatrix) -> Self {
        Self { dim: op.dim(), terms: vec![Term::new(1.0, Trig::One, 0.0, op)] }
    }

    pub fn evaluate(&self, omega: f64, t: f64) -> OperatorMatrix {
        let mut out = OperatorMatrix::zeros(self.dim);
        for term in &self.terms {
            out += &(&term.op * term.scalar(omega, t));
        }
        out
    }

    /// ∂/∂ω, with like terms merged and vanishing ones dropped.
    pub fn derivative(&self) -> SymbolicOperator {
        let terms = self.terms.iter().flat_map(Term::derivative).collect();
        SymbolicOperator { dim: self.dim, terms }.simplified()
    }

    pub fn simplified(&self) -> SymbolicOperator {
        let mut merged: Vec<Term> = Vec::new();
        for term in &self.terms {
            let folded = term.op.scale(term.coeff);
            if let Some(existing) = merged.iter_mut().find(|m| m.same_shape(term)) {
                existing.op += &folded;
            } else {
                merged.push(Term { coeff: C64::new(1.0, 0.0), op: folded, ..term.clone() });
            }
        }
        merged.retain(|t| t.op.max_abs() > 0.0 && !(t.trig == Trig::Sin && t.freq == 0.0));
        SymbolicOperator { dim: self.dim, terms: merged }
    }

    pub fn is_zero(&self) -> bool {
        self.simplified().terms.is_empty()
    }

    pub fn with_ancilla(&self, ancilla_dim: usize) -> SymbolicOperator {
        let id = OperatorMatrix::identity(ancilla_dim);
        SymbolicOperator {
            dim: self.dim * ancilla_dim,
            terms: self.terms.iter().map(|t| Term { op: kron(&t.op, &id), ..t.clone() }).collect(),
        }
    }

    /// Zeros of the trigonometric factors in (t0, t1), sorted.
    pub fn trig_zeros(&self, omega: f64, t0: f64, t1: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for term in &self.terms {
            if term.trig == Trig::One || term.freq == 0.0 || omega == 0.0 {
                continue;
            }
            let rate = (term.freq * omega).abs();
            let offset = if term.trig == Trig::Cos { 0.5 } else { 0.0 };
            let m0 = (t0 * rate / PI - offset).floor() as i64;
            let mut m = m0.max(0);
            loop {
                let z = (m as f64 + offset) * PI / rate;
                if z >= t1 {
                    break;
                }
                if z > t0 {
                    out.push(z);
                }
                m += 1;
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        out
    }
}

pub type OperatorFn = Arc<dyn Fn(f64, f64) -> OperatorMatrix + Send + Sync>;

/// Where an operator-valued function of (ω, t) comes from.
#[derive(Clone)]
pub enum OperatorSource {
    Symbolic(SymbolicOperator),
    Function(OperatorFn),
}

impl fmt::Debug for OperatorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorSource::Symbolic(s) => write!(f, "Symbolic({} terms)", s.terms.len()),
            OperatorSource::Function(_) => write!(f, "Function"),
        }
    }
}

impl OperatorSource {
    fn evaluate(&self, omega: f64, t: f64) -> std::result::Result<OperatorMatrix, String> {
        match self {
            OperatorSource::Symbolic(s) => Ok(s.evaluate(omega, t)),
            OperatorSource::Function(f) => catch_unwind(AssertUnwindSafe(|| f(omega, t))).map_err(|p| {
                p.downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "evaluator panicked".to_string())
            }),
        }
    }

    fn with_ancilla(&self, ancilla_dim: usize) -> OperatorSource {
        match self {
            OperatorSource::Symbolic(s) => OperatorSource::Symbolic(s.with_ancilla(ancilla_dim)),
            OperatorSource::Function(f) => {
                let f = f.clone();
                let id = OperatorMatrix::identity(ancilla_dim);
                OperatorSource::Function(Arc::new(move |w, t| kron(&f(w, t), &id)))
            }
        }
    }
}

/// All channel matrices materialized at one (ω, t).
#[derive(Clone, Debug)]
pub struct ChannelSnapshot {
    pub omega: f64,
    pub t: f64,
    pub h: OperatorMatrix,
    pub h_prime: OperatorMatrix,
    pub jumps: Vec<OperatorMatrix>,
    pub jump_primes: Vec<OperatorMatrix>,
}

impl ChannelSnapshot {
    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn jump_count(&self) -> usize {
        self.jumps.len()
    }

    pub fn has_parameter_dependent_noise(&self) -> bool {
        self.jump_primes.iter().any(|l| l.max_abs() > 0.0)
    }

    /// Same snapshot with H′ replaced, used for the asymptotic problems.
    pub fn with_h_prime(&self, h_prime: OperatorMatrix) -> Self {
        Self { h_prime, ..self.clone() }
    }
}

/// Time-dependent Markovian channel with analytic ω-derivatives.
#[derive(Clone, Debug)]
pub struct ParametricChannel {
    pub dim: usize,
    pub label: String,
    hamiltonian: OperatorSource,
    hamiltonian_deriv: OperatorSource,
    jumps: Vec<OperatorSource>,
    jump_derivs: Vec<OperatorSource>,
}

impl ParametricChannel {
    /// Channel from symbolic Hamiltonian and jump operators; derivatives are generated.
    pub fn symbolic(label: impl Into<String>, hamiltonian: SymbolicOperator, jumps: Vec<SymbolicOperator>) -> Result<Self> {
        let dim = hamiltonian.dim;
        for j in &jumps {
            if j.dim != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: j.dim });
            }
        }
        let hamiltonian_deriv = OperatorSource::Symbolic(hamiltonian.derivative());
        let jump_derivs = jumps.iter().map(|j| OperatorSource::Symbolic(j.derivative())).collect();
        Ok(Self {
            dim,
            label: label.into(),
            hamiltonian: OperatorSource::Symbolic(hamiltonian),
            hamiltonian_deriv,
            jumps: jumps.into_iter().map(OperatorSource::Symbolic).collect(),
            jump_derivs,
        })
    }

    /// Channel from explicit evaluators. `jump_derivs` must match `jumps` in length.
    pub fn from_functions(
        label: impl Into<String>,
        dim: usize,
        hamiltonian: OperatorFn,
        hamiltonian_deriv: OperatorFn,
        jumps: Vec<OperatorFn>,
        jump_derivs: Vec<OperatorFn>,
    ) -> Result<Self> {
        if jumps.len() != jump_derivs.len() {
            return Err(Error::InvalidConfig(format!(
                "{} jump operators but {} derivatives",
                jumps.len(),
                jump_derivs.len()
            )));
        }
        Ok(Self {
            dim,
            label: label.into(),
            hamiltonian: OperatorSource::Function(hamiltonian),
            hamiltonian_deriv: OperatorSource::Function(hamiltonian_deriv),
            jumps: jumps.into_iter().map(OperatorSource::Function).collect(),
            jump_derivs: jump_derivs.into_iter().map(OperatorSource::Function).collect(),
        })
    }

    pub fn jump_count(&self) -> usize {
        self.jumps.len()
    }

    /// The symbolic form of ∂_ω H, if the channel was built from the grammar.
    pub fn symbolic_hamiltonian_deriv(&self) -> Option<&SymbolicOperator> {
        match &self.hamiltonian_deriv {
            OperatorSource::Symbolic(s) => Some(s),
            OperatorSource::Function(_) => None,
        }
    }

    pub fn symbolic_hamiltonian(&self) -> Option<&SymbolicOperator> {
        match &self.hamiltonian {
            OperatorSource::Symbolic(s) => Some(s),
            OperatorSource::Function(_) => None,
        }
    }

    pub fn evaluate(&self, omega: f64, t: f64) -> Result<ChannelSnapshot> {
        if !(t >= 0.0) {
            return Err(Error::Evaluation { omega, t, message: "time must be non-negative".into() });
        }
        let eval = |src: &OperatorSource| -> Result<OperatorMatrix> {
            let m = src.evaluate(omega, t).map_err(|message| Error::Evaluation { omega, t, message })?;
            if m.dim() != self.dim {
                return Err(Error::Evaluation {
                    omega,
                    t,
                    message: format!("evaluator returned dimension {} (expected {})", m.dim(), self.dim),
                });
            }
            if !m.is_finite() {
                return Err(Error::Evaluation { omega, t, message: "non-finite matrix entries".into() });
            }
            Ok(m)
        };
        let h = eval(&self.hamiltonian)?;
        let scale = h.hs_norm().max(1.0);
        let defect = h.hermiticity_defect();
        if defect > 1e-10 * scale {
            return Err(Error::Evaluation { omega, t, message: format!("Hamiltonian not Hermitian ({defect:.3e})") });
        }
        let h_prime = eval(&self.hamiltonian_deriv)?.hermitize();
        let jumps = self.jumps.iter().map(eval).collect::<Result<Vec<_>>>()?;
        let jump_primes = self.jump_derivs.iter().map(eval).collect::<Result<Vec<_>>>()?;
        Ok(ChannelSnapshot { omega, t, h: h.hermitize(), h_prime, jumps, jump_primes })
    }

    /// The same channel acting on probe ⊗ ancilla, with the ancilla noiseless.
    pub fn with_ancilla(&self, ancilla_dim: usize) -> ParametricChannel {
        ParametricChannel {
            dim: self.dim * ancilla_dim,
            label: format!("{}+ancilla{}", self.label, ancilla_dim),
            hamiltonian: self.hamiltonian.with_ancilla(ancilla_dim),
            hamiltonian_deriv: self.hamiltonian_deriv.with_ancilla(ancilla_dim),
            jumps: self.jumps.iter().map(|j| j.with_ancilla(ancilla_dim)).collect(),
            jump_derivs: self.jump_derivs.iter().map(|j| j.with_ancilla(ancilla_dim)).collect(),
        }
    }

    /// Same Hamiltonian, jump operators dropped.
    pub fn noiseless(&self) -> ParametricChannel {
        ParametricChannel { jumps: Vec::new(), jump_derivs: Vec::new(), label: format!("{}-noiseless", self.label), ..self.clone() }
    }

    /// Times in (t0, t1) where the spectrum of H′ may have kinks: zeros of
    /// the trigonometric factors of a symbolic H′. Empty for closure channels.
    pub fn breakpoints(&self, omega: f64, t0: f64, t1: f64) -> Vec<f64> {
        match &self.hamiltonian_deriv {
            OperatorSource::Symbolic(s) => s.trig_zeros(omega, t0, t1),
            OperatorSource::Function(_) => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "AC")]
    Ac,
    #[serde(rename = "RF")]
    Rf,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    DephasingX,
    DephasingZ,
    SpontaneousEmission,
    Custom,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::DephasingX => "dephasing_x",
            NoiseKind::DephasingZ => "dephasing_z",
            NoiseKind::SpontaneousEmission => "spontaneous_emission",
            NoiseKind::Custom => "custom",
        }
    }
}

/// Operator given by Pauli name or explicit row tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OpSpec {
    Named(String),
    Real(Vec<Vec<f64>>),
    Complex { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl OpSpec {
    pub fn to_matrix(&self) -> Result<OperatorMatrix> {
        match self {
            OpSpec::Named(name) => {
                pauli::by_name(name).ok_or_else(|| Error::InvalidConfig(format!("unknown operator name '{name}'")))
            }
            OpSpec::Real(rows) => table(rows, None),
            OpSpec::Complex { re, im } => table(re, Some(im)),
        }
    }
}

fn table(re: &[Vec<f64>], im: Option<&Vec<Vec<f64>>>) -> Result<OperatorMatrix> {
    let d = re.len();
    if d == 0 || re.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidConfig("operator table must be a non-empty square list of rows".into()));
    }
    if let Some(im) = im {
        if im.len() != d || im.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidConfig("imaginary table shape differs from real table".into()));
        }
    }
    Ok(OperatorMatrix::from_fn(d, |i, j| C64::new(re[i][j], im.map_or(0.0, |m| m[i][j]))))
}

fn non_negative_rate<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
    let v = f64::deserialize(de)?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(serde::de::Error::custom(format!("noise epsilon must be finite and >= 0, got {v}")));
    }
    Ok(v)
}

fn default_trig() -> Trig {
    Trig::One
}

fn default_freq() -> f64 {
    1.0
}

/// One Hamiltonian summand of a custom model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub coeff: f64,
    #[serde(default)]
    pub omega_power: u32,
    #[serde(default)]
    pub t_power: u32,
    #[serde(default = "default_trig")]
    pub trig: Trig,
    #[serde(default = "default_freq")]
    pub freq: f64,
    pub op: OpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(deserialize_with = "non_negative_rate")]
    pub epsilon: f64,
    /// Jump operator shape for `custom` noise; the jump is √ε·op.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<OpSpec>,
}

/// Declarative model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    #[serde(rename = "B", default)]
    pub b: f64,
    pub omega: f64,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<TermSpec>,
}

impl ModelConfig {
    pub fn catalog(model: ModelKind, b: f64, omega: f64, noise: &[(NoiseKind, f64)]) -> Self {
        Self {
            model,
            b,
            omega,
            noise: noise.iter().map(|&(kind, epsilon)| NoiseSpec { kind, epsilon, op: None }).collect(),
            terms: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() {
            return Err(Error::InvalidConfig("B must be a finite real number".into()));
        }
        if !self.omega.is_finite() {
            return Err(Error::InvalidConfig("omega must be a finite real number".into()));
        }
        for n in &self.noise {
            if !(n.epsilon >= 0.0) || !n.epsilon.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "noise '{}' has epsilon {} (must be >= 0)",
                    n.kind.name(),
                    n.epsilon
                )));
            }
            if n.kind == NoiseKind::Custom && n.op.is_none() {
                return Err(Error::InvalidConfig("custom noise requires an 'op' table".into()));
            }
        }
        if self.model == ModelKind::Custom && self.terms.is_empty() {
            return Err(Error::InvalidConfig("custom model requires at least one term".into()));
        }
        Ok(())
    }
}

/// Builds the channel for a model description.
pub fn build_channel(config: &ModelConfig) -> Result<ParametricChannel> {
    config.validate()?;
    let b = config.b;
    let (hamiltonian, label) = match config.model {
        ModelKind::Ac => (SymbolicOperator::new(2, vec![Term::new(b, Trig::Sin, 1.0, pauli::z())])?, "AC".to_string()),
        ModelKind::Rf => (
            SymbolicOperator::new(
                2,
                vec![Term::new(b, Trig::Cos, 1.0, pauli::x()), Term::new(b, Trig::Sin, 1.0, pauli::z())],
            )?,
            "RF".to_string(),
        ),
        ModelKind::Custom => {
            let terms = config
                .terms
                .iter()
                .map(|spec| {
                    Ok(Term {
                        coeff: C64::new(spec.coeff, 0.0),
                        omega_power: spec.omega_power,
                        t_power: spec.t_power,
                        trig: spec.trig,
                        freq: spec.freq,
                        op: spec.op.to_matrix()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dim = terms[0].op.dim();
            for t in &terms {
                if !t.op.is_hermitian(1e-12) {
                    return Err(Error::InvalidConfig("custom Hamiltonian terms must be Hermitian".into()));
                }
            }
            (SymbolicOperator::new(dim, terms)?, "custom".to_string())
        }
    };
    let dim = hamiltonian.dim;
    let mut jumps = Vec::new();
    let mut label = label;
    for n in &config.noise {
        let shape = match n.kind {
            NoiseKind::DephasingX => pauli::x(),
            NoiseKind::DephasingZ => pauli::z(),
            NoiseKind::SpontaneousEmission => pauli::minus(),
            NoiseKind::Custom => n.op.as_ref().expect("validated").to_matrix()?,
        };
        if shape.dim() != dim {
            return Err(Error::InvalidConfig(format!(
                "noise '{}' acts on dimension {} but the model has dimension {}",
                n.kind.name(),
                shape.dim(),
                dim
            )));
        }
        jumps.push(SymbolicOperator::constant(shape.scale_real(n.epsilon.sqrt())));
        label.push('+');
        label.push_str(n.kind.name());
    }
    ParametricChannel::symbolic(label, hamiltonian, jumps)
}
