//! Attention building blocks over sets.
//!
//! Sets are `[B, n, d]` tensors whose rows are elements. Every block that
//! attends *over* a set accepts a live mask for that set; masked rows get
//! zero attention weight and therefore never influence live outputs.
//! Rows of the query side are processed independently, which is what makes
//! MAB/SAB/ISAB permutation-equivariant and PMA permutation-invariant.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// A batch of equally sized point sets with a per-point live mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch<T> {
    values: Tensor<T>,
    live: Vec<bool>,
}

impl<T: Scalar> SetBatch<T> {
    pub fn new(values: Tensor<T>, live: Vec<bool>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || live.len() != s[0] * s[1] {
            return Err(Error::Shape { op: "set batch", lhs: s.to_vec(), rhs: vec![live.len()] });
        }
        Ok(Self { values, live })
    }

    /// Every point live.
    pub fn dense(values: Tensor<T>) -> Result<Self> {
        let n = values.shape().iter().take(2).product();
        Self::new(values, vec![true; n])
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn live(&self) -> &[bool] {
        &self.live
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn live_counts(&self) -> Vec<usize> {
        let n = self.len();
        (0..self.batch()).map(|b| self.live[b * n..(b + 1) * n].iter().filter(|&&l| l).count()).collect()
    }

    /// `None` when every point is live, so attention can skip masking.
    pub fn mask(&self) -> Option<&[bool]> {
        if self.live.iter().all(|&l| l) {
            None
        } else {
            Some(&self.live)
        }
    }

    /// Fails unless every set has at least one live point.
    pub fn require_live(&self) -> Result<()> {
        match self.live_counts().iter().position(|&c| c == 0) {
            Some(b) => Err(contract(format!("set {b} has no live points"))),
            None => Ok(()),
        }
    }
}

/// Glorot-uniform `[din, dout]` matrix.
pub(crate) fn glorot<T: Scalar, R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (din + dout) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Tensor::from_fn(vec![din, dout], |_| T::lit(dist.sample(rng)))
}

/// `N(0, 1) * 0.02` initialisation for seeds and inducing points.
pub(crate) fn small_normal<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| T::lit(0.02 * dist.sample(rng)))
}

/// Affine map applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(din, dout, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dout]));
        Self { weight, bias, din, dout }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

/// Row-wise feed-forward layer: affine, ReLU, affine.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), din, hidden, rng),
            output: Linear::new(store, &format!("{name}.1"), hidden, dout, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiheadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiheadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Rows of `x` attend over rows of `y`; `y_live` masks keys of `y`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var, y_live: Option<&[bool]>) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, y)?;
        let v = self.value.forward(g, y)?;
        let a = g.attention(q, k, v, self.heads, y_live)?;
        self.output.forward(g, a)
    }
}

/// Multihead attention block: `H = X + rFF(MHA(X, Y))`, output `H + rFF(H)`.
/// There is no layer normalisation.
#[derive(Clone, Debug)]
pub struct Mab {
    pub attention: MultiheadAttention,
    pub ff_attention: FeedForward,
    pub ff_output: FeedForward,
}

impl Mab {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            attention: MultiheadAttention::new(store, &format!("{name}.mha"), dim, heads, rng),
            ff_attention: FeedForward::new(store, &format!("{name}.ff_attn"), dim, dim, dim, rng),
            ff_output: FeedForward::new(store, &format!("{name}.ff_out"), dim, dim, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var, y_live: Option<&[bool]>) -> Result<Var> {
        let a = self.attention.forward(g, x, y, y_live)?;
        let f = self.ff_attention.forward(g, a)?;
        let h = g.add(x, f)?;
        let f = self.ff_output.forward(g, h)?;
        g.add(h, f)
    }
}

/// Self-attention block, `MAB(X, X)`.
#[derive(Clone, Debug)]
pub struct Sab {
    pub mab: Mab,
}

impl Sab {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self { mab: Mab::new(store, name, dim, heads, rng) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, live: Option<&[bool]>) -> Result<Var> {
        self.mab.forward(g, x, x, live)
    }
}

/// Induced set attention block, `MAB(X, MAB(I, X))` with trainable inducing points `I`.
#[derive(Clone, Debug)]
pub struct Isab {
    pub inducing: ParamId,
    pub num_inducing: usize,
    pub dim: usize,
    pub summarize: Mab,
    pub broadcast: Mab,
}

impl Isab {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        num_inducing: usize,
        rng: &mut R,
    ) -> Self {
        assert!(num_inducing >= 1, "ISAB needs at least one inducing point");
        let inducing = store.add(format!("{name}.inducing"), small_normal(vec![1, num_inducing, dim], rng));
        Self {
            inducing,
            num_inducing,
            dim,
            summarize: Mab::new(store, &format!("{name}.mab0"), dim, heads, rng),
            broadcast: Mab::new(store, &format!("{name}.mab1"), dim, heads, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, live: Option<&[bool]>) -> Result<Var> {
        let batch = g.shape(x)[0];
        let points = g.param(self.inducing);
        let points = g.expand(points, vec![batch, self.num_inducing, self.dim])?;
        let h = self.summarize.forward(g, points, x, live)?;
        self.broadcast.forward(g, x, h, None)
    }
}

/// `L` ISABs applied in sequence.
#[derive(Clone, Debug)]
pub struct IsabStack {
    pub layers: Vec<Isab>,
}

impl IsabStack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        num_inducing: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth).map(|i| Isab::new(store, &format!("{name}.{i}"), dim, heads, num_inducing, rng)).collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var, live: Option<&[bool]>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, live)?;
        }
        Ok(x)
    }
}

/// Pooling by multihead attention, `MAB(S, X)` with `k` trainable seeds `S`.
#[derive(Clone, Debug)]
pub struct Pma {
    pub seeds: ParamId,
    pub num_seeds: usize,
    pub dim: usize,
    pub mab: Mab,
}

impl Pma {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        num_seeds: usize,
        rng: &mut R,
    ) -> Self {
        assert!(num_seeds >= 1, "PMA needs at least one seed");
        let seeds = store.add(format!("{name}.seeds"), small_normal(vec![1, num_seeds, dim], rng));
        Self { seeds, num_seeds, dim, mab: Mab::new(store, &format!("{name}.mab"), dim, heads, rng) }
    }

    /// `[B, n, d] -> [B, k, d]`. Every set needs at least one live point.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, live: Option<&[bool]>) -> Result<Var> {
        let batch = g.shape(x)[0];
        let seeds = g.param(self.seeds);
        let seeds = g.expand(seeds, vec![batch, self.num_seeds, self.dim])?;
        self.mab.forward(g, seeds, x, live)
    }
}
