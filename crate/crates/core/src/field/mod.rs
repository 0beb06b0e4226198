//! Time-dependent velocity fields `v(t, x)` and their derivative surface.
//!
//! Every field kind answers the same questions: the velocity, its exact
//! divergence, the spatial gradient of the divergence, Jacobian-transpose
//! products, and parameter gradients of `v . a` and of the divergence.
//! Affine and analytic mixture-score fields share the contract with the
//! neural network so downstream code can be checked against closed forms.

mod mlp;

pub use mlp::Mlp;
pub(crate) use mlp::Tape;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::targets::GaussianMixture;

/// Default hidden widths for the network.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
/// Default output-layer scale, small so the initial map is close to the identity.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// Gradient with respect to a field's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub values: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `v(t, x) = A x + b`, parameters stored as `[A (row-major), b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    dim: usize,
    params: Vec<f64>,
}

impl Affine {
    pub fn new(dim: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("field dimension must be >= 1".into()));
        }
        check_dim(dim * dim, a.len())?;
        check_dim(dim, b.len())?;
        let mut params = a.to_vec();
        params.extend_from_slice(b);
        Ok(Self { dim, params })
    }

    fn a(&self) -> &[f64] {
        &self.params[..self.dim * self.dim]
    }

    fn b(&self) -> &[f64] {
        &self.params[self.dim * self.dim..]
    }
}

/// Serializable description of a field's architecture (parameters excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Mlp { dim: usize, hidden: Vec<usize>, activation: String },
    Affine { dim: usize },
    ScoreWrapped { inner: Box<ArchDescriptor> },
}

impl ArchDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            ArchDescriptor::Mlp { dim, .. } | ArchDescriptor::Affine { dim } => *dim,
            ArchDescriptor::ScoreWrapped { inner } => inner.dim(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ArchDescriptor::Mlp { dim, hidden, .. } => mlp::param_count(*dim, hidden),
            ArchDescriptor::Affine { dim } => dim * dim + dim,
            ArchDescriptor::ScoreWrapped { inner } => inner.n_params(),
        }
    }
}

/// A velocity (or score) field.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    Mlp(Mlp),
    Affine(Affine),
    /// Exact score `grad log rho_t` of an OU-evolved Gaussian mixture; no parameters.
    MixtureScore(GaussianMixture),
    /// Probability-flow velocity `-x - s(t, x)` of the OU process built from a score field `s`.
    ScoreWrapped(Box<VelocityField>),
}

impl VelocityField {
    pub fn mlp(dim: usize, hidden: &[usize], seed: u64, scale: f64) -> Result<Self> {
        Ok(Self::Mlp(Mlp::init(dim, hidden, seed, scale)?))
    }

    /// Network with default widths and init scale.
    pub fn init_params(dim: usize, seed: u64) -> Result<Self> {
        Self::mlp(dim, &DEFAULT_HIDDEN, seed, DEFAULT_INIT_SCALE)
    }

    pub fn affine(dim: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        Ok(Self::Affine(Affine::new(dim, a, b)?))
    }

    /// The zero field `v = 0` (affine with `A = 0`, `b = 0`).
    pub fn zero(dim: usize) -> Result<Self> {
        Self::affine(dim, &vec![0.0; dim * dim], &vec![0.0; dim])
    }

    /// `v = c x` in `dim` dimensions.
    pub fn scalar_linear(dim: usize, c: f64) -> Result<Self> {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = c;
        }
        Self::affine(dim, &a, &vec![0.0; dim])
    }

    pub fn mixture_score(mixture: GaussianMixture) -> Self {
        Self::MixtureScore(mixture)
    }

    /// Wraps a score field as its probability-flow velocity.
    pub fn score_to_velocity(score: VelocityField) -> Self {
        Self::ScoreWrapped(Box::new(score))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Mlp(m) => m.dim(),
            Self::Affine(a) => a.dim,
            Self::MixtureScore(m) => m.dim(),
            Self::ScoreWrapped(inner) => inner.dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Mlp(_) => "mlp",
            Self::Affine(_) => "affine",
            Self::MixtureScore(_) => "mixture_score",
            Self::ScoreWrapped(_) => "score_wrapped",
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Mlp(m) => m.params(),
            Self::Affine(a) => &a.params,
            Self::MixtureScore(_) => &[],
            Self::ScoreWrapped(inner) => inner.params(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }

    /// Same architecture with a new parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        check_dim(self.n_params(), params.len())?;
        Ok(match self {
            Self::Mlp(m) => Self::Mlp(Mlp::from_params(m.dim(), m.hidden(), params)?),
            Self::Affine(a) => Self::Affine(Affine { dim: a.dim, params }),
            Self::MixtureScore(m) => Self::MixtureScore(m.clone()),
            Self::ScoreWrapped(inner) => Self::ScoreWrapped(Box::new(inner.with_params(params)?)),
        })
    }

    pub fn descriptor(&self) -> Result<ArchDescriptor> {
        match self {
            Self::Mlp(m) => Ok(ArchDescriptor::Mlp {
                dim: m.dim(),
                hidden: m.hidden().to_vec(),
                activation: "tanh".into(),
            }),
            Self::Affine(a) => Ok(ArchDescriptor::Affine { dim: a.dim }),
            Self::MixtureScore(_) => {
                Err(Error::Unsupported("analytic mixture scores have no stored form".into()))
            }
            Self::ScoreWrapped(inner) => {
                Ok(ArchDescriptor::ScoreWrapped { inner: Box::new(inner.descriptor()?) })
            }
        }
    }

    pub fn from_descriptor(desc: &ArchDescriptor, params: Vec<f64>) -> Result<Self> {
        match desc {
            ArchDescriptor::Mlp { dim, hidden, activation } => {
                if activation != "tanh" {
                    return Err(Error::Unsupported(format!("activation '{activation}'")));
                }
                Ok(Self::Mlp(Mlp::from_params(*dim, hidden, params)?))
            }
            ArchDescriptor::Affine { dim } => {
                check_dim(dim * dim + dim, params.len())?;
                let (a, b) = params.split_at(dim * dim);
                Self::affine(*dim, a, b)
            }
            ArchDescriptor::ScoreWrapped { inner } => {
                Ok(Self::score_to_velocity(Self::from_descriptor(inner, params)?))
            }
        }
    }

    fn check_input(&self, t: f64, x: &[f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        if !t.is_finite() {
            return Err(Error::NonFinite("time".into()));
        }
        check_finite("field input", x)
    }

    pub fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(t, x)?;
        Ok(self.velocity_unchecked(t, x))
    }

    pub fn divergence(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_input(t, x)?;
        Ok(self.velocity_and_divergence_unchecked(t, x).1)
    }

    pub fn velocity_and_divergence(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(t, x)?;
        Ok(self.velocity_and_divergence_unchecked(t, x))
    }

    /// `grad_x (div v)(t, x)`.
    pub fn grad_divergence(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(t, x)?;
        Ok(self.grad_divergence_unchecked(t, x))
    }

    /// `[grad_x v]^T g`.
    pub fn jac_transpose_apply(&self, t: f64, x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_input(t, x)?;
        check_dim(self.dim(), g.len())?;
        Ok(self.vjp(t, x, g, 0.0, None))
    }

    /// Full Jacobian, row-major: `out[i * d + k] = dv_i / dx_k`.
    pub fn jacobian(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(t, x)?;
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        if let Self::Mlp(m) = self {
            let tape = m.forward(t, x);
            for i in 0..d {
                for k in 0..d {
                    out[i * d + k] = tape.jac[k * d + i];
                }
            }
            return Ok(out);
        }
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = 1.0;
            let row = self.vjp(t, x, &e, 0.0, None);
            out[i * d..(i + 1) * d].copy_from_slice(&row);
            e[i] = 0.0;
        }
        Ok(out)
    }

    /// `d/dtheta (v(t, x) . a)`.
    pub fn param_grad_velocity_dot(&self, t: f64, x: &[f64], a: &[f64]) -> Result<ParamGrad> {
        self.check_input(t, x)?;
        check_dim(self.dim(), a.len())?;
        let mut g = ParamGrad::zeros(self.n_params());
        self.vjp(t, x, a, 0.0, Some(&mut g.values));
        Ok(g)
    }

    /// `d/dtheta (div v)(t, x)`.
    pub fn param_grad_divergence(&self, t: f64, x: &[f64]) -> Result<ParamGrad> {
        self.check_input(t, x)?;
        let mut g = ParamGrad::zeros(self.n_params());
        self.vjp(t, x, &vec![0.0; self.dim()], 1.0, Some(&mut g.values));
        Ok(g)
    }

    /// Reverse-mode product for the scalar `vbar . v + cbar * div v` at `(t, x)`.
    ///
    /// Adds its parameter gradient into `param_out` when provided and returns
    /// its x-gradient `J^T vbar + cbar * grad(div v)`.
    pub fn vjp(
        &self,
        t: f64,
        x: &[f64],
        vbar: &[f64],
        cbar: f64,
        param_out: Option<&mut [f64]>,
    ) -> Vec<f64> {
        match self {
            Self::Mlp(m) => {
                let tape = m.forward(t, x);
                m.reverse(&tape, vbar, cbar, param_out)
            }
            Self::Affine(af) => {
                let d = af.dim;
                let a = af.a();
                if let Some(g) = param_out {
                    for i in 0..d {
                        for k in 0..d {
                            g[i * d + k] += vbar[i] * x[k];
                        }
                        g[i * d + i] += cbar;
                        g[d * d + i] += vbar[i];
                    }
                }
                (0..d).map(|k| (0..d).map(|i| a[i * d + k] * vbar[i]).sum()).collect()
            }
            Self::MixtureScore(mix) => {
                let d = mix.dim();
                let sd = mix.score_derivatives(t, x);
                // the Hessian is symmetric
                (0..d)
                    .map(|k| {
                        (0..d).map(|i| sd.hessian[i * d + k] * vbar[i]).sum::<f64>()
                            + cbar * sd.grad_divergence[k]
                    })
                    .collect()
            }
            Self::ScoreWrapped(inner) => {
                let nv: Vec<f64> = vbar.iter().map(|v| -v).collect();
                let mut out = inner.vjp(t, x, &nv, -cbar, param_out);
                for (o, v) in out.iter_mut().zip(vbar) {
                    *o -= v;
                }
                out
            }
        }
    }

    /// Velocity and divergence, keeping the forward tape when there is one to reuse.
    pub(crate) fn eval_taped(&self, t: f64, x: &[f64]) -> (Vec<f64>, f64, Option<Tape>) {
        match self {
            Self::Mlp(m) => {
                let tape = m.forward(t, x);
                (tape.v.clone(), tape.div, Some(tape))
            }
            _ => {
                let (v, c) = self.velocity_and_divergence_unchecked(t, x);
                (v, c, None)
            }
        }
    }

    /// `vjp` reusing a tape recorded at the same `(t, x)` by `eval_taped`.
    pub(crate) fn vjp_taped(
        &self,
        tape: Option<&Tape>,
        t: f64,
        x: &[f64],
        vbar: &[f64],
        cbar: f64,
        param_out: Option<&mut [f64]>,
    ) -> Vec<f64> {
        match (self, tape) {
            (Self::Mlp(m), Some(tp)) => m.reverse(tp, vbar, cbar, param_out),
            _ => self.vjp(t, x, vbar, cbar, param_out),
        }
    }

    pub(crate) fn velocity_unchecked(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Mlp(m) => m.velocity(t, x),
            Self::Affine(af) => {
                let d = af.dim;
                let a = af.a();
                (0..d)
                    .map(|i| af.b()[i] + (0..d).map(|k| a[i * d + k] * x[k]).sum::<f64>())
                    .collect()
            }
            Self::MixtureScore(mix) => mix.score_unchecked(t, x),
            Self::ScoreWrapped(inner) => {
                let s = inner.velocity_unchecked(t, x);
                x.iter().zip(&s).map(|(xi, si)| -xi - si).collect()
            }
        }
    }

    pub(crate) fn velocity_and_divergence_unchecked(&self, t: f64, x: &[f64]) -> (Vec<f64>, f64) {
        match self {
            Self::Mlp(m) => {
                let tape = m.forward(t, x);
                (tape.v, tape.div)
            }
            Self::Affine(af) => {
                let d = af.dim;
                let tr = (0..d).map(|i| af.a()[i * d + i]).sum();
                (self.velocity_unchecked(t, x), tr)
            }
            Self::MixtureScore(mix) => {
                let sd = mix.score_derivatives(t, x);
                (sd.score, sd.divergence)
            }
            Self::ScoreWrapped(inner) => {
                let (s, div) = inner.velocity_and_divergence_unchecked(t, x);
                let v = x.iter().zip(&s).map(|(xi, si)| -xi - si).collect();
                (v, -(x.len() as f64) - div)
            }
        }
    }

    pub(crate) fn grad_divergence_unchecked(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Mlp(m) => m.grad_divergence(t, x),
            Self::Affine(af) => vec![0.0; af.dim],
            Self::MixtureScore(mix) => mix.score_derivatives(t, x).grad_divergence,
            Self::ScoreWrapped(inner) => {
                inner.grad_divergence_unchecked(t, x).into_iter().map(|v| -v).collect()
            }
        }
    }
}
