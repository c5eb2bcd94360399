//! The customer and agent latent spaces: posteriors, the conditional agent
//! prior, reparameterized sampling, and closed-form Gaussian KL.
//!
//! Variances are carried as log-variances throughout, so the projections
//! that produce "Σ" emit log-variance.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::seqmodel::{check_dim, Linear, ParamBuilder};
use crate::tensor::{Matrix, Scalar};

/// Diagonal Gaussian as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T> {
    pub mean: Vec<T>,
    pub log_variance: Vec<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], log_variance: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<T> {
        self.log_variance.iter().map(|lv| lv.exp()).collect()
    }

    /// Log density of `z`.
    pub fn log_density(&self, z: &[T]) -> T {
        let two_pi = T::from_f64_lossy(std::f64::consts::TAU);
        let half = T::from_f64_lossy(0.5);
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(z)
            .map(|((&m, &lv), &x)| -half * (two_pi.ln() + lv + (x - m) * (x - m) / lv.exp()))
            .sum()
    }
}

/// Diagonal Gaussian living in a graph (each a 1 × dim node).
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_variance: Var,
}

impl GaussianVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> GaussianParams<T> {
        GaussianParams {
            mean: g.value(self.mean).data().to_vec(),
            log_variance: g.value(self.log_variance).data().to_vec(),
        }
    }

    pub fn constant<T: Scalar>(g: &mut Graph<T>, p: &GaussianParams<T>) -> Self {
        Self {
            mean: g.constant(Matrix::row_vector(p.mean.clone())),
            log_variance: g.constant(Matrix::row_vector(p.log_variance.clone())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentConfig {
    pub latent_dim: usize,
    pub prior_hidden: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { latent_dim: 300, prior_hidden: 600 }
    }
}

/// Two independent affine maps to mean and log-variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianProjection {
    pub mean: Linear,
    pub log_variance: Linear,
}

impl GaussianProjection {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, input_dim: usize, latent_dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                mean: Linear::build(pb, "mean", input_dim, latent_dim, true)?,
                log_variance: Linear::build(pb, "log_variance", input_dim, latent_dim, true)?,
            })
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.input_dim
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<GaussianVars> {
        Ok(GaussianVars { mean: self.mean.forward(g, x)?, log_variance: self.log_variance.forward(g, x)? })
    }
}

/// `q(z_x | x)` from the customer utterance embedding.
pub fn posterior_customer<T: Scalar>(g: &mut Graph<T>, proj: &GaussianProjection, e_x: Var) -> Result<GaussianVars> {
    check_dim("customer posterior input", proj.input_dim(), g.shape(e_x).1)?;
    proj.apply(g, e_x)
}

/// `q(z_y | y, z_x)` from `[e_y; z_x]`.
pub fn posterior_agent<T: Scalar>(
    g: &mut Graph<T>,
    proj: &GaussianProjection,
    e_y: Var,
    z_x: Var,
) -> Result<GaussianVars> {
    let d = g.shape(e_y).1 + g.shape(z_x).1;
    check_dim("agent posterior input", proj.input_dim(), d)?;
    let joined = g.concat_cols(&[e_y, z_x]);
    proj.apply(g, joined)
}

/// Conditional prior `p(z_y | z_x)`: two one-hidden-layer tanh MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorMlp {
    pub mean_hidden: Linear,
    pub mean_out: Linear,
    pub log_variance_hidden: Linear,
    pub log_variance_out: Linear,
}

impl PriorMlp {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<T>, cfg: LatentConfig) -> Result<Self> {
        let LatentConfig { latent_dim, prior_hidden } = cfg;
        pb.scoped("agent_prior", |pb| {
            Ok(Self {
                mean_hidden: Linear::build(pb, "mean/hidden", latent_dim, prior_hidden, true)?,
                mean_out: Linear::build(pb, "mean/out", prior_hidden, latent_dim, true)?,
                log_variance_hidden: Linear::build(pb, "log_variance/hidden", latent_dim, prior_hidden, true)?,
                log_variance_out: Linear::build(pb, "log_variance/out", prior_hidden, latent_dim, true)?,
            })
        })
    }
}

pub fn prior_agent<T: Scalar>(g: &mut Graph<T>, mlp: &PriorMlp, z_x: Var) -> Result<GaussianVars> {
    check_dim("agent prior input", mlp.mean_hidden.input_dim, g.shape(z_x).1)?;
    let hm = mlp.mean_hidden.forward(g, z_x)?;
    let hm = g.tanh(hm);
    let mean = mlp.mean_out.forward(g, hm)?;
    let hv = mlp.log_variance_hidden.forward(g, z_x)?;
    let hv = g.tanh(hv);
    let log_variance = mlp.log_variance_out.forward(g, hv)?;
    Ok(GaussianVars { mean, log_variance })
}

/// `z = mean + exp(log_variance / 2) ⊙ noise`
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, q: &GaussianVars, noise: &[T]) -> Result<Var> {
    check_dim("reparameterization noise", g.shape(q.mean).1, noise.len())?;
    let half = g.scale(q.log_variance, T::from_f64_lossy(0.5));
    let std = g.exp(half);
    let eps = g.constant(Matrix::row_vector(noise.to_vec()));
    let scaled = g.mul(std, eps);
    Ok(g.add(q.mean, scaled))
}

pub fn reparameterize_values<T: Scalar>(q: &GaussianParams<T>, noise: &[T]) -> Vec<T> {
    let half = T::from_f64_lossy(0.5);
    q.mean.iter().zip(&q.log_variance).zip(noise).map(|((&m, &lv), &n)| m + (half * lv).exp() * n).collect()
}

/// `KL(q ‖ p)` in nats for diagonal Gaussians, summed over dimensions.
pub fn kl_divergence<T: Scalar>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> T {
    assert_eq!(q.dim(), p.dim(), "KL between Gaussians of different dimension");
    let half = T::from_f64_lossy(0.5);
    let mut total = T::zero();
    for i in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_variance[i], p.mean[i], p.log_variance[i]);
        let d = mq - mp;
        total = total + half * (lp - lq + (lq.exp() + d * d) / lp.exp() - T::one());
    }
    total
}

/// Graph form of [`kl_divergence`], returning a 1×1 node.
pub fn kl_divergence_var<T: Scalar>(g: &mut Graph<T>, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    check_dim("KL dimension", g.shape(q.mean).1, g.shape(p.mean).1)?;
    let var_q = g.exp(q.log_variance);
    let diff = g.sub(q.mean, p.mean);
    let sq = g.mul(diff, diff);
    let num = g.add(var_q, sq);
    let var_p = g.exp(p.log_variance);
    let ratio = g.div(num, var_p);
    let log_ratio = g.sub(p.log_variance, q.log_variance);
    let inner = g.add(log_ratio, ratio);
    let inner = g.shift(inner, -T::one());
    let total = g.sum(inner);
    Ok(g.scale(total, T::from_f64_lossy(0.5)))
}

/// `KL(q ‖ N(0, I))`
pub fn kl_standard_normal_var<T: Scalar>(g: &mut Graph<T>, q: &GaussianVars) -> Result<Var> {
    let d = g.shape(q.mean).1;
    let p = GaussianVars::constant(g, &GaussianParams::standard(d));
    kl_divergence_var(g, q, &p)
}
