//! Diagonal Gaussian representations: projection from base features,
//! batch-level uncertainty estimates, and reparameterized sampling.
//!
//! Variances (not standard deviations) are stored; sampling takes the
//! square root. Row vectors throughout: a batch of `n` embeddings is an
//! `[n, D]` tensor, and linear maps are applied as `x · W`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// Lower bound added to every variance.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("uncertainty estimate needs at least one embedding")]
    EmptyBatch,
    #[error("mean and variance have different dimensions ({mu} vs {var})")]
    DimMismatch { mu: usize, var: usize },
    #[error("variance component {index} is {value}, below the floor")]
    BadVariance { index: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self, GaussianError> {
        if mu.len() != var.len() {
            return Err(GaussianError::DimMismatch {
                mu: mu.len(),
                var: var.len(),
            });
        }
        if let Some((index, &value)) = var
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < VAR_FLOOR)
        {
            return Err(GaussianError::BadVariance { index, value });
        }
        Ok(Self { mu, var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    /// `½ Σ (var + μ² − 1 − ln var)`, the divergence from the standard normal.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.var)
            .map(|(m, v)| v + m * m - 1.0 - v.ln())
            .sum::<f64>()
    }
}

/// Per-dimension batch spread of means and of standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyEstimate {
    pub sigma_mu: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
    pub batch: usize,
}

impl UncertaintyEstimate {
    /// All-zero estimate; sampling then reduces to the plain
    /// reparameterization `μ + ε·√var`.
    pub fn zeros(dim: usize) -> Self {
        Self {
            sigma_mu: vec![0.0; dim],
            sigma_sigma: vec![0.0; dim],
            batch: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma_mu.len()
    }
}

/// `μ = f·W_mu`, `var = softplus(f·W_sigma) + floor` for every row of `features`.
pub fn project(tape: &mut Tape, features: Var, w_mu: Var, w_sigma: Var) -> Result<(Var, Var), TensorError> {
    let mu = tape.matmul(features, w_mu)?;
    let raw = tape.matmul(features, w_sigma)?;
    let sp = tape.softplus(raw)?;
    let var = tape.add_scalar(sp, VAR_FLOOR)?;
    Ok((mu, var))
}

/// Projects a single feature vector with column-convention weights
/// (`μ = W_mu·f`), given as row-major `D×D` matrices.
pub fn project_to_gaussian(f: &[f64], w_mu: &Tensor, w_sigma: &Tensor) -> Result<GaussianEmbedding, GaussianError> {
    if let Some((index, &value)) = f.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(TensorError::NonFinite { input: 0, index, value }.into());
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(f.to_vec()));
    let wm = tape.constant(transpose(w_mu)?);
    let ws = tape.constant(transpose(w_sigma)?);
    let (mu, var) = project(&mut tape, x, wm, ws)?;
    GaussianEmbedding::new(tape.value(mu).data().to_vec(), tape.value(var).data().to_vec())
}

pub(crate) fn transpose(t: &Tensor) -> Result<Tensor, TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::Rank {
            op: "transpose",
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data)
}

/// Population standard deviation, per dimension, of the rows of `mu` and of
/// `sqrt(var)`. Plain values: no gradient flows through the estimate.
pub fn estimate_uncertainty_rows(mu: &Tensor, var: &Tensor) -> Result<UncertaintyEstimate, GaussianError> {
    let (b, d) = mu.require_rank2("estimate_uncertainty")?;
    if var.shape() != mu.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "estimate_uncertainty",
            lhs: mu.shape().to_vec(),
            rhs: var.shape().to_vec(),
        }
        .into());
    }
    if b == 0 {
        return Err(GaussianError::EmptyBatch);
    }
    let spread = |get: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        (0..d)
            .map(|j| {
                // shifted by the first row so constant batches give exactly 0
                let x0 = get(0, j);
                let mean = (0..b).map(|i| get(i, j) - x0).sum::<f64>() / b as f64;
                let v = (0..b).map(|i| (get(i, j) - x0 - mean).powi(2)).sum::<f64>() / b as f64;
                v.sqrt()
            })
            .collect()
    };
    Ok(UncertaintyEstimate {
        sigma_mu: spread(&|i, j| mu.get(i, j)),
        sigma_sigma: spread(&|i, j| var.get(i, j).sqrt()),
        batch: b,
    })
}

pub fn estimate_uncertainty(batch: &[GaussianEmbedding]) -> Result<UncertaintyEstimate, GaussianError> {
    let first = batch.first().ok_or(GaussianError::EmptyBatch)?;
    let d = first.dim();
    let rows = |f: fn(&GaussianEmbedding) -> &Vec<f64>| -> Result<Tensor, GaussianError> {
        let mut data = Vec::with_capacity(batch.len() * d);
        for g in batch {
            if g.dim() != d {
                return Err(GaussianError::DimMismatch { mu: d, var: g.dim() });
            }
            data.extend_from_slice(f(g));
        }
        Ok(Tensor::new(vec![batch.len(), d], data)?)
    };
    estimate_uncertainty_rows(&rows(|g| &g.mu)?, &rows(|g| &g.var)?)
}

/// The three standard-normal draws behind one batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub eps_mu: Tensor,
    pub eps_sigma: Tensor,
    pub eps_z: Tensor,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize| -> Tensor {
            let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![rows, dim], data).expect("shape matches length")
        };
        let eps_mu = normal(rows * dim);
        let eps_sigma = normal(rows * dim);
        let eps_z = normal(rows * dim);
        Self {
            eps_mu,
            eps_sigma,
            eps_z,
        }
    }
}

fn offset(eps: &Tensor, sigma: &[f64]) -> Tensor {
    let d = sigma.len();
    let mut out = eps.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x *= sigma[i % d];
    }
    out
}

/// `z = μ + ε_μ⊙Σ_μ + ε_z⊙max(√var + ε_σ⊙Σ_σ, 0)` for every row, recorded
/// on the tape so gradients reach `mu` and `var`.
pub fn sample_on_tape(
    tape: &mut Tape,
    mu: Var,
    var: Var,
    u: &UncertaintyEstimate,
    noise: &Noise,
) -> Result<Var, TensorError> {
    let shape = tape.value(mu).shape().to_vec();
    for eps in [&noise.eps_mu, &noise.eps_sigma, &noise.eps_z] {
        if eps.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "sample",
                lhs: shape.clone(),
                rhs: eps.shape().to_vec(),
            });
        }
    }
    if shape.len() != 2 || shape[1] != u.dim() {
        return Err(TensorError::ShapeMismatch {
            op: "sample",
            lhs: shape,
            rhs: vec![1, u.dim()],
        });
    }
    let beta_off = tape.constant(offset(&noise.eps_mu, &u.sigma_mu));
    let gamma_off = tape.constant(offset(&noise.eps_sigma, &u.sigma_sigma));
    let eps_z = tape.constant(noise.eps_z.clone());
    let beta = tape.add(mu, beta_off)?;
    let std = tape.sqrt(var)?;
    let shifted = tape.add(std, gamma_off)?;
    let gamma = tape.clamp_min(shifted, 0.0)?;
    let spread = tape.hadamard(eps_z, gamma)?;
    tape.add(beta, spread)
}

/// One reparameterized draw of a single embedding.
pub fn sample_embedding<R: Rng + ?Sized>(
    g: &GaussianEmbedding,
    u: &UncertaintyEstimate,
    rng: &mut R,
) -> Result<Vec<f64>, GaussianError> {
    let noise = Noise::draw(1, g.dim(), rng);
    sample_with_noise(g, u, &noise)
}

/// Deterministic draw from explicit noise, without a tape.
pub fn sample_with_noise(g: &GaussianEmbedding, u: &UncertaintyEstimate, noise: &Noise) -> Result<Vec<f64>, GaussianError> {
    if u.dim() != g.dim() || noise.eps_z.numel() != g.dim() {
        return Err(GaussianError::DimMismatch {
            mu: g.dim(),
            var: u.dim(),
        });
    }
    Ok((0..g.dim())
        .map(|j| {
            let beta = g.mu[j] + noise.eps_mu.data()[j] * u.sigma_mu[j];
            let gamma = (g.var[j].sqrt() + noise.eps_sigma.data()[j] * u.sigma_sigma[j]).max(0.0);
            beta + noise.eps_z.data()[j] * gamma
        })
        .collect())
}
