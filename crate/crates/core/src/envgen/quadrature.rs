//! Gauss–Hermite populations: deterministic weighted point sets standing in for
//! unlimited-sample expectations.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{EnvData, EnvError, GaussianEnvSpec, Labels};
use crate::autodiff::Array;

const MAX_POINTS: usize = 1 << 20;

/// Nodes and weights of the `n`-point rule for `E_{x~N(0,1)}[f(x)]`
/// (probabilists' Hermite), via the Golub–Welsch eigenproblem.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

/// One Gaussian block: all rule points of `N(mean, diag(sd²))` times `mass`.
fn push_block(mean: &[f64], sd: &[f64], nodes: &[f64], weights: &[f64], mass: f64, x: &mut Vec<f64>, w: &mut Vec<f64>) {
    let d = mean.len();
    let k = nodes.len();
    let total = k.pow(d as u32);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let mut weight = mass;
        for j in 0..d {
            x.push(mean[j] + sd[j] * nodes[idx[j]]);
            weight *= weights[idx[j]];
        }
        w.push(weight);
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < k {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// Product-rule population for one environment. With label prior 1/2 the two
/// classes are folded into a single `y = +1` block.
pub fn population_environment(spec: &GaussianEnvSpec, nodes: usize) -> Result<EnvData, EnvError> {
    spec.validate()?;
    let d = spec.dim();
    let per_block = nodes.checked_pow(d as u32).filter(|&p| p <= MAX_POINTS).ok_or(EnvError::Invalid {
        field: "nodes",
        reason: format!("{nodes}^{d} quadrature points exceed the limit of {MAX_POINTS}"),
    })?;
    let (gx, gw) = gauss_hermite(nodes);
    let sd: Vec<f64> = std::iter::repeat_n(spec.sigma_c, spec.d_c()).chain(std::iter::repeat_n(spec.sigma_e, spec.d_e())).collect();
    let mut components: Vec<(&[f64], f64)> = vec![(&spec.mu_e, spec.bias_degree)];
    if spec.bias_degree < 1.0 {
        let each = (1.0 - spec.bias_degree) / spec.decoy_means.len() as f64;
        components.extend(spec.decoy_means.iter().map(|m| (m.as_slice(), each)));
    }
    let fold = spec.label_prior == 0.5;
    let labels: Vec<(f64, f64)> = if fold { vec![(1.0, 1.0)] } else { vec![(1.0, spec.label_prior), (-1.0, 1.0 - spec.label_prior)] };
    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    for &(label, prior) in &labels {
        for &(mu_e, mass) in &components {
            if mass == 0.0 {
                continue;
            }
            let mean: Vec<f64> = spec.mu_c.iter().chain(mu_e).map(|m| label * m).collect();
            push_block(&mean, &sd, &gx, &gw, prior * mass, &mut x, &mut w);
            y.extend(std::iter::repeat_n(label, per_block));
        }
    }
    let n = y.len();
    let features = Array::matrix(n, d, x).map_err(|e| EnvError::Invalid { field: "features", reason: e.to_string() })?;
    Ok(EnvData { features, labels: Labels::Binary(y), weights: w, sign_folded: fold })
}
