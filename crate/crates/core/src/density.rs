//! Cluster-conditional densities `p(x; θ)` for 2-D points.
//!
//! Two heads are provided. The Gaussian head reads `θ = (μ₁, μ₂, log σ₁², log σ₂²)`.
//! The flow head reads a context vector `θ` and evaluates a masked
//! autoregressive flow: each MADE block maps `x` to
//! `u = (x − μ(x_<, θ)) · exp(−log σ(x_<, θ))`, dimension order is reversed
//! between blocks, and `log p(x) = log 𝒩(u; 0, I) − Σ log σ`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::set_blocks::{glorot, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Dimension of the data points.
pub const POINT_DIM: usize = 2;

/// Diagonal Gaussian parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianTheta<T> {
    pub mu: [T; 2],
    pub log_var: [T; 2],
}

impl<T: Scalar> GaussianTheta<T> {
    /// Reads `(μ₁, μ₂, log σ₁², log σ₂²)`.
    pub fn from_slice(v: &[T]) -> Result<Self> {
        match v {
            [m1, m2, l1, l2] => Ok(Self { mu: [*m1, *m2], log_var: [*l1, *l2] }),
            _ => Err(Error::Shape { op: "gaussian theta", lhs: vec![v.len()], rhs: vec![4] }),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        vec![self.mu[0], self.mu[1], self.log_var[0], self.log_var[1]]
    }
}

/// `Σ_d −½ log(2π σ_d²) − (x_d − μ_d)² / (2σ_d²)`.
pub fn gaussian_log_density<T: Scalar>(x: [T; 2], theta: &GaussianTheta<T>) -> T {
    let half = T::lit(0.5);
    let log_two_pi = T::lit((2.0 * PI).ln());
    (0..2)
        .map(|d| {
            let diff = x[d] - theta.mu[d];
            -half * (log_two_pi + theta.log_var[d] + diff * diff * (-theta.log_var[d]).exp())
        })
        .sum()
}

/// Graph version of [`gaussian_log_density`]: `x: [B, n, 2]`, `theta: [B, 4]` → `[B, n]`.
pub fn gaussian_log_density_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var, theta: Var) -> Result<Var> {
    let b = g.shape(theta)[0];
    let theta = g.reshape(theta, vec![b, 1, 2 * POINT_DIM])?;
    let mu = g.slice(theta, 2, 0, POINT_DIM)?;
    let log_var = g.slice(theta, 2, POINT_DIM, POINT_DIM)?;
    let diff = g.sub(x, mu)?;
    let sq = g.square(diff);
    let neg_lv = g.neg(log_var);
    let precision = g.exp(neg_lv);
    let quad = g.mul(sq, precision)?;
    let t = g.add(quad, log_var)?;
    let t = g.add_scalar(t, T::lit((2.0 * PI).ln()));
    let s = g.sum_axis(t, 2)?;
    Ok(g.scale(s, T::lit(-0.5)))
}

/// Standard-normal log density of `u: [B, n, d]`, summed over the last axis.
fn standard_normal_log_density<T: Scalar>(g: &mut Graph<'_, T>, u: Var) -> Result<Var> {
    let d = g.shape(u)[2];
    let sq = g.square(u);
    let s = g.sum_axis(sq, 2)?;
    let s = g.scale(s, T::lit(-0.5));
    Ok(g.add_scalar(s, T::lit(-0.5 * d as f64 * (2.0 * PI).ln())))
}

/// One MADE block with additive context injection into the hidden layer.
///
/// Hidden unit `j` has degree `j mod D`. Degree-0 units see only the context,
/// so the first coordinate's shift and scale are functions of `θ` alone.
#[derive(Clone, Debug)]
pub struct MadeBlock {
    pub input: ParamId,
    pub context: ParamId,
    pub hidden_bias: ParamId,
    pub output: Linear,
    pub dim: usize,
    pub hidden: usize,
    input_mask: Vec<bool>,
    output_mask: Vec<bool>,
}

impl MadeBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        context: usize,
        rng: &mut R,
    ) -> Self {
        let degree = |j: usize| j % dim;
        let input_mask: Vec<bool> = (0..dim * hidden).map(|k| k / hidden < degree(k % hidden)).collect();
        let output_mask: Vec<bool> = (0..hidden * 2 * dim).map(|k| degree(k / (2 * dim)) <= (k % (2 * dim)) % dim).collect();
        let masked = |mut w: Tensor<T>, mask: &[bool]| {
            for (v, &keep) in w.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = T::zero();
                }
            }
            w
        };
        let input = store.add(format!("{name}.input"), masked(glorot(dim, hidden, rng), &input_mask));
        let context = store.add(format!("{name}.context"), glorot(context, hidden, rng));
        let hidden_bias = store.add(format!("{name}.hidden_bias"), Tensor::zeros(vec![hidden]));
        let output = Linear::new(store, &format!("{name}.output"), hidden, 2 * dim, rng);
        let w = masked(store.get(output.weight).clone(), &output_mask);
        *store.get_mut(output.weight) = w;
        Self { input, context, hidden_bias, output, dim, hidden, input_mask, output_mask }
    }

    fn mask_tensor<T: Scalar>(mask: &[bool], rows: usize, cols: usize) -> Tensor<T> {
        Tensor::new(vec![rows, cols], mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()).expect("mask shape")
    }

    /// Returns `(μ, log σ)`, each `[B, n, D]`. `context` is `[B, 1, C]`.
    pub fn shift_and_log_scale<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, context: Var) -> Result<(Var, Var)> {
        let w_in = g.param(self.input);
        let m_in = g.constant(Self::mask_tensor(&self.input_mask, self.dim, self.hidden));
        let w_in = g.mul(w_in, m_in)?;
        let w_ctx = g.param(self.context);
        let bias = g.param(self.hidden_bias);
        let hx = g.linear(x, w_in, None)?;
        let hc = g.linear(context, w_ctx, Some(bias))?;
        let h = g.add(hx, hc)?;
        let h = g.relu(h);
        let w_out = g.param(self.output.weight);
        let m_out = g.constant(Self::mask_tensor(&self.output_mask, self.hidden, 2 * self.dim));
        let w_out = g.mul(w_out, m_out)?;
        let b_out = g.param(self.output.bias);
        let out = g.linear(h, w_out, Some(b_out))?;
        let mu = g.slice(out, 2, 0, self.dim)?;
        let log_scale = g.slice(out, 2, self.dim, self.dim)?;
        Ok((mu, log_scale))
    }

    /// `u = (x − μ) · exp(−log σ)` together with `log σ`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, context: Var) -> Result<(Var, Var)> {
        let (mu, log_scale) = self.shift_and_log_scale(g, x, context)?;
        let diff = g.sub(x, mu)?;
        let neg = g.neg(log_scale);
        let inv = g.exp(neg);
        let u = g.mul(diff, inv)?;
        Ok((u, log_scale))
    }
}

/// A stack of MADE blocks with dimension reversal between consecutive blocks.
#[derive(Clone, Debug)]
pub struct MafStack {
    pub blocks: Vec<MadeBlock>,
    pub context: usize,
}

impl MafStack {
    pub const DEFAULT_BLOCKS: usize = 4;
    pub const DEFAULT_HIDDEN: usize = 128;
    pub const DEFAULT_CONTEXT: usize = 128;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        blocks: usize,
        hidden: usize,
        context: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..blocks).map(|i| MadeBlock::new(store, &format!("{name}.{i}"), POINT_DIM, hidden, context, rng)).collect();
        Self { blocks, context }
    }

    fn reverse<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let d = g.shape(x)[2];
        let cols = (0..d).rev().map(|c| g.slice(x, 2, c, 1)).collect::<Result<Vec<_>>>()?;
        g.concat(&cols, 2)
    }

    /// `x: [B, n, 2]`, `context: [B, C]` → log densities `[B, n]`.
    pub fn log_density<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, context: Var) -> Result<Var> {
        let s = g.shape(context).to_vec();
        if s.len() != 2 || s[1] != self.context {
            return Err(Error::Shape { op: "maf context", lhs: s, rhs: vec![self.context] });
        }
        let context = g.reshape(context, vec![s[0], 1, self.context])?;
        let mut u = x;
        let mut log_scales = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                u = Self::reverse(g, u)?;
            }
            let (next, log_scale) = block.forward(g, u, context)?;
            u = next;
            let total = g.sum_axis(log_scale, 2)?;
            log_scales.push(total);
        }
        let mut log_p = standard_normal_log_density(g, u)?;
        for ls in log_scales {
            log_p = g.sub(log_p, ls)?;
        }
        Ok(log_p)
    }
}

/// Log density of a single point under a flow, evaluated without gradients.
pub fn maf_log_density<T: Scalar>(stack: &MafStack, store: &ParamStore<T>, x: [T; 2], context: &[T]) -> Result<T> {
    let mut g = Graph::inference(store);
    let xv = g.constant(Tensor::new(vec![1, 1, 2], x.to_vec())?);
    let cv = g.constant(Tensor::new(vec![1, context.len()], context.to_vec())?);
    let lp = stack.log_density(&mut g, xv, cv)?;
    Ok(g.value(lp).data()[0])
}

/// Which cluster density a filtering model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Gaussian,
    Maf,
    None,
}

impl DensityKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "maf" => Ok(Self::Maf),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown density '{other}' (expected gaussian, maf or none)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Maf => "maf",
            Self::None => "none",
        }
    }
}

/// A density head with its parameters registered in a store.
#[derive(Clone, Debug)]
pub enum Density {
    Gaussian,
    Maf(MafStack),
}

impl Density {
    /// Builds the head for `kind`; `None` for density-free models.
    pub fn build<T: Scalar, R: Rng + ?Sized>(kind: DensityKind, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Option<Self> {
        match kind {
            DensityKind::Gaussian => Some(Self::Gaussian),
            DensityKind::Maf => Some(Self::Maf(MafStack::new(
                store,
                name,
                MafStack::DEFAULT_BLOCKS,
                MafStack::DEFAULT_HIDDEN,
                MafStack::DEFAULT_CONTEXT,
                rng,
            ))),
            DensityKind::None => None,
        }
    }

    pub fn kind(&self) -> DensityKind {
        match self {
            Self::Gaussian => DensityKind::Gaussian,
            Self::Maf(_) => DensityKind::Maf,
        }
    }

    /// Width of the `θ` vector this head reads.
    pub fn theta_width(&self) -> usize {
        match self {
            Self::Gaussian => 2 * POINT_DIM,
            Self::Maf(stack) => stack.context,
        }
    }

    /// `x: [B, n, 2]`, `theta: [B, w]` → `[B, n]`.
    pub fn log_density<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, theta: Var) -> Result<Var> {
        match self {
            Self::Gaussian => gaussian_log_density_graph(g, x, theta),
            Self::Maf(stack) => stack.log_density(g, x, theta),
        }
    }
}
