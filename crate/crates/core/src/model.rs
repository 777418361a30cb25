//! Feature maps `Φ` and the shared predictor `w_all`.
//!
//! Both feature maps are odd functions of `x` (no biases), which keeps the
//! sign-folded population quadrature exact.

use crate::autodiff::{AdError, Array, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    /// `Φ(x) = W x` with `W` of shape `k×d`. The 2-d analysis uses `W = [a, b]`.
    Linear { weight: Array },
    /// `Φ(x) = V tanh(U x)` with `U` of shape `h×d` and `V` of shape `k×h`.
    Mlp { hidden: Array, out: Array },
}

impl FeatureMap {
    pub fn linear(weight: Array) -> Self {
        FeatureMap::Linear { weight }
    }

    /// `Φ(z_c, z_e) = a·z_c + b·z_e`.
    pub fn pair(a: f64, b: f64) -> Self {
        FeatureMap::Linear { weight: Array::matrix(1, 2, vec![a, b]).expect("finite pair") }
    }

    pub fn mlp(hidden: Array, out: Array) -> Self {
        FeatureMap::Mlp { hidden, out }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            FeatureMap::Linear { weight } => weight.cols(),
            FeatureMap::Mlp { hidden, .. } => hidden.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FeatureMap::Linear { weight } => weight.rows(),
            FeatureMap::Mlp { out, .. } => out.rows(),
        }
    }

    /// The `(a, b)` pair of a 1×2 linear map.
    pub fn as_pair(&self) -> Option<(f64, f64)> {
        match self {
            FeatureMap::Linear { weight } if weight.shape() == [1, 2] => Some((weight.data()[0], weight.data()[1])),
            _ => None,
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        match self {
            FeatureMap::Linear { .. } => vec!["phi.weight"],
            FeatureMap::Mlp { .. } => vec!["phi.hidden", "phi.out"],
        }
    }

    pub fn params(&self) -> Vec<&Array> {
        match self {
            FeatureMap::Linear { weight } => vec![weight],
            FeatureMap::Mlp { hidden, out } => vec![hidden, out],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        match self {
            FeatureMap::Linear { weight } => vec![weight],
            FeatureMap::Mlp { hidden, out } => vec![hidden, out],
        }
    }

    /// Records `Φ(x)` (shape `n×k`) on the tape.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AdError> {
        match self {
            FeatureMap::Linear { .. } => x.matmul(params[0].t()?),
            FeatureMap::Mlp { .. } => x.matmul(params[0].t()?)?.tanh()?.matmul(params[1].t()?),
        }
    }

    /// Evaluates `Φ(x)` without recording a graph.
    pub fn apply(&self, x: &Array) -> Array {
        match self {
            FeatureMap::Linear { weight } => x.matmul(&weight.transpose()),
            FeatureMap::Mlp { hidden, out } => x.matmul(&hidden.transpose()).map(f64::tanh).matmul(&out.transpose()),
        }
    }
}

/// `(Φ, w_all)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub phi: FeatureMap,
    /// Shape `[k]` (binary) or `[k, K]`.
    pub w_all: Array,
}

/// Tape handles for a model's parameters.
#[derive(Clone, Debug)]
pub struct ModelVars<'t> {
    pub phi: Vec<Var<'t>>,
    pub w_all: Var<'t>,
}

impl<'t> ModelVars<'t> {
    /// Feature-map parameters followed by `w_all`.
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut v = self.phi.clone();
        v.push(self.w_all);
        v
    }
}

impl Model {
    pub fn new(phi: FeatureMap, w_all: Array) -> Self {
        Self { phi, w_all }
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars { phi: self.phi.params().into_iter().map(|p| tape.var(p.clone())).collect(), w_all: tape.var(self.w_all.clone()) }
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut n = self.phi.names();
        n.push("w_all");
        n
    }

    /// Feature-map parameters followed by `w_all`.
    pub fn params(&self) -> Vec<&Array> {
        let mut p = self.phi.params();
        p.push(&self.w_all);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.phi.params_mut();
        p.push(&mut self.w_all);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data().iter().all(|v| v.is_finite()))
    }
}
