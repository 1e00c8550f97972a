//! Filtering networks: one forward pass extracts one cluster.
//!
//! Minimum-loss filtering (MLF) lets the network pick whichever cluster is
//! easiest and trains against the best-matching true cluster. Anchored
//! filtering (AF) conditions on an anchor point and must return the cluster
//! containing it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{Density, DensityKind, POINT_DIM};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::set_blocks::{FeedForward, IsabStack, Linear, Mab, Pma, SetBatch};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Added to the loss of cluster ids that do not occur in a set so they never win the minimum.
const ABSENT_CLUSTER_PENALTY: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Mlf,
    Af,
}

/// How the summed BCE is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BceScale {
    /// Divide by the number of live points.
    #[default]
    Mean,
    /// Plain sum over live points.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub density: DensityKind,
    pub dim: usize,
    pub heads: usize,
    pub inducing: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    #[serde(default)]
    pub bce_scale: BceScale,
}

impl FilterConfig {
    pub fn new(kind: FilterKind, density: DensityKind) -> Self {
        Self { kind, density, dim: 128, heads: 4, inducing: 32, encoder_depth: 4, decoder_depth: 2, bce_scale: BceScale::Mean }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.inducing == 0 {
            return Err(Error::Config("at least one inducing point is required".into()));
        }
        Ok(())
    }
}

/// Points with per-point cluster ids (`0..k`); masked points carry `None`.
#[derive(Clone, Debug)]
pub struct LabeledSet<T> {
    pub points: SetBatch<T>,
    pub labels: Vec<Option<usize>>,
    pub clusters: Vec<usize>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn new(points: SetBatch<T>, labels: Vec<Option<usize>>, clusters: Vec<usize>) -> Result<Self> {
        let (b, n) = (points.batch(), points.len());
        if labels.len() != b * n || clusters.len() != b {
            return Err(Error::Shape { op: "labeled set", lhs: vec![b, n], rhs: vec![labels.len(), clusters.len()] });
        }
        for (s, &k) in clusters.iter().enumerate() {
            let mut seen = vec![false; k];
            for i in 0..n {
                let at = s * n + i;
                match (points.live()[at], labels[at]) {
                    (true, Some(j)) if j < k => seen[j] = true,
                    (false, None) => {}
                    _ => return Err(contract(format!("set {s} point {i}: label does not match liveness or exceeds k"))),
                }
            }
            if let Some(j) = seen.iter().position(|&s| !s) {
                return Err(contract(format!("set {s} has no points in cluster {j}")));
            }
        }
        Ok(Self { points, labels, clusters })
    }

    pub fn max_clusters(&self) -> usize {
        self.clusters.iter().copied().max().unwrap_or(0)
    }

    /// Member count of every cluster, `[B, k_max]` row-major.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let (n, k) = (self.points.len(), self.max_clusters());
        let mut sizes = vec![0; self.points.batch() * k];
        for (at, l) in self.labels.iter().enumerate() {
            if let Some(j) = l {
                sizes[(at / n) * k + j] += 1;
            }
        }
        sizes
    }
}

/// Tape handles produced by a filtering forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FilterVars {
    /// `[B, w]`; absent for density-free models.
    pub theta: Option<Var>,
    /// Pre-sigmoid membership logits `[B, n]`.
    pub logits: Var,
}

/// Plain-value result of a filtering pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput<T> {
    pub theta: Option<Tensor<T>>,
    pub memberships: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FilterModel {
    pub config: FilterConfig,
    pub embed: Linear,
    pub encoder: IsabStack,
    pub anchor: Option<Mab>,
    pub pool: Pma,
    pub theta_head: Option<FeedForward>,
    pub mask_mab: Mab,
    pub mask_decoder: IsabStack,
    pub mask_head: FeedForward,
    pub density: Option<Density>,
}

impl FilterModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: FilterConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let FilterConfig { dim, heads, inducing, .. } = config;
        let embed = Linear::new(store, "embed", POINT_DIM, dim, rng);
        let encoder = IsabStack::new(store, "encoder", config.encoder_depth, dim, heads, inducing, rng);
        let anchor = (config.kind == FilterKind::Af).then(|| Mab::new(store, "anchor", dim, heads, rng));
        let pool = Pma::new(store, "pool", dim, heads, 1, rng);
        let density = Density::build(config.density, store, "density", rng);
        let theta_head = density.as_ref().map(|d| FeedForward::new(store, "theta", dim, dim, d.theta_width(), rng));
        let mask_mab = Mab::new(store, "mask_mab", dim, heads, rng);
        let mask_decoder = IsabStack::new(store, "mask_decoder", config.decoder_depth, dim, heads, inducing, rng);
        let mask_head = FeedForward::new(store, "mask_head", dim, dim, 1, rng);
        Ok(Self { config, embed, encoder, anchor, pool, theta_head, mask_mab, mask_decoder, mask_head, density })
    }

    pub fn kind(&self) -> FilterKind {
        self.config.kind
    }

    /// Runs the network. `anchors` is required for AF models and must index live points.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &SetBatch<T>, anchors: Option<&[usize]>) -> Result<FilterVars> {
        x.require_live()?;
        if x.width() != POINT_DIM {
            return Err(Error::Shape { op: "filter input", lhs: x.values().shape().to_vec(), rhs: vec![POINT_DIM] });
        }
        let (batch, n) = (x.batch(), x.len());
        let live = x.mask();
        let input = g.constant(x.values().clone());
        let h = self.embed.forward(g, input)?;
        let mut h = self.encoder.forward(g, h, live)?;
        match (&self.anchor, anchors) {
            (Some(mab), Some(a)) => {
                if a.len() != batch {
                    return Err(Error::Shape { op: "anchors", lhs: vec![batch], rhs: vec![a.len()] });
                }
                for (b, &i) in a.iter().enumerate() {
                    if i >= n || !x.live()[b * n + i] {
                        return Err(contract(format!("anchor {i} of set {b} is not a live point")));
                    }
                }
                let ha = g.gather_rows(h, a)?;
                h = mab.forward(g, h, ha, None)?;
            }
            (Some(_), None) => return Err(contract("anchored filtering needs an anchor per set")),
            (None, Some(_)) => return Err(contract("minimum-loss filtering takes no anchors")),
            (None, None) => {}
        }
        let h_theta = self.pool.forward(g, h, live)?;
        let theta = match &self.theta_head {
            Some(head) => {
                let t = head.forward(g, h_theta)?;
                let w = g.shape(t)[2];
                Some(g.reshape(t, vec![batch, w])?)
            }
            None => None,
        };
        let hm = self.mask_mab.forward(g, h, h_theta, None)?;
        let hm = self.mask_decoder.forward(g, hm, live)?;
        let logits = self.mask_head.forward(g, hm)?;
        let logits = g.reshape(logits, vec![batch, n])?;
        Ok(FilterVars { theta, logits })
    }

    /// Forward pass without gradients, returning plain values.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &SetBatch<T>, anchors: Option<&[usize]>) -> Result<FilterOutput<T>> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, x, anchors)?;
        let m = g.sigmoid(out.logits);
        Ok(FilterOutput { theta: out.theta.map(|t| g.value(t).clone()), memberships: g.value(m).clone() })
    }

    /// Minimum-loss objective on a forward pass of this model.
    pub fn mlf_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, out: FilterVars, data: &LabeledSet<T>) -> Result<Var> {
        mlf_loss(g, out, data, self.density.as_ref(), self.config.bce_scale)
    }

    /// Anchored objective on a forward pass of this model.
    pub fn af_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, out: FilterVars, data: &LabeledSet<T>, anchors: &[usize]) -> Result<Var> {
        af_loss(g, out, data, anchors, self.density.as_ref(), self.config.bce_scale)
    }
}

fn check_logits<T: Scalar>(g: &Graph<'_, T>, out: &FilterVars, data: &LabeledSet<T>) -> Result<()> {
    let s = g.shape(out.logits);
    if s != [data.points.batch(), data.points.len()] {
        return Err(Error::Shape { op: "filter loss", lhs: s.to_vec(), rhs: vec![data.points.batch(), data.points.len()] });
    }
    Ok(())
}

fn bce_divisors<T: Scalar>(data: &LabeledSet<T>, scale: BceScale) -> Tensor<T> {
    let counts = data.points.live_counts();
    Tensor::from_fn(vec![counts.len(), 1], |b| match scale {
        BceScale::Mean => T::one() / T::lit(counts[b] as f64),
        BceScale::Sum => T::one(),
    })
}

fn cluster_log_density<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &FilterVars,
    data: &LabeledSet<T>,
    density: Option<&Density>,
) -> Result<Option<Var>> {
    match (density, out.theta) {
        (Some(d), Some(theta)) => {
            let x = g.constant(data.points.values().clone());
            Ok(Some(d.log_density(g, x, theta)?))
        }
        (None, _) => Ok(None),
        (Some(_), None) => Err(contract("density term requested but the forward pass produced no θ")),
    }
}

/// `min_j [ scaled Σ BCE(𝔪ᵢ, 1{yᵢ = j}) − mean_{yᵢ = j} log p(xᵢ; θ) ]`, averaged over the batch.
///
/// BCE is evaluated from logits as `softplus(z) − t·z`. Per-cluster sums use
/// segment sums so relabeling clusters only permutes the candidates.
pub fn mlf_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: FilterVars,
    data: &LabeledSet<T>,
    density: Option<&Density>,
    scale: BceScale,
) -> Result<Var> {
    check_logits(g, &out, data)?;
    let (batch, k) = (data.points.batch(), data.max_clusters());
    let live: Vec<Option<usize>> = data.points.live().iter().map(|&l| l.then_some(0)).collect();
    let sp = g.softplus(out.logits);
    let sp_total = g.segment_sum(sp, &live, 1)?;
    let z_by_cluster = g.segment_sum(out.logits, &data.labels, k)?;
    let bce = g.sub(sp_total, z_by_cluster)?;
    let divisor = g.constant(bce_divisors(data, scale));
    let mut per_cluster = g.mul(bce, divisor)?;

    let sizes = data.cluster_sizes();
    if let Some(lp) = cluster_log_density(g, &out, data, density)? {
        let lp_by_cluster = g.segment_sum(lp, &data.labels, k)?;
        let inv = Tensor::from_fn(vec![batch, k], |i| if sizes[i] > 0 { -T::one() / T::lit(sizes[i] as f64) } else { T::zero() });
        let inv = g.constant(inv);
        let nll = g.mul(lp_by_cluster, inv)?;
        per_cluster = g.add(per_cluster, nll)?;
    }
    let penalty = Tensor::from_fn(vec![batch, k], |i| if sizes[i] > 0 { T::zero() } else { T::lit(ABSENT_CLUSTER_PENALTY) });
    let penalty = g.constant(penalty);
    let per_cluster = g.add(per_cluster, penalty)?;
    let best = g.min_axis(per_cluster, 1)?;
    Ok(g.mean(best))
}

/// `scaled Σ BCE(𝔪ᵢ, 1{yᵢ = y_a}) − mean_{yᵢ = y_a} log p(xᵢ; θ)`, averaged over the batch.
pub fn af_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: FilterVars,
    data: &LabeledSet<T>,
    anchors: &[usize],
    density: Option<&Density>,
    scale: BceScale,
) -> Result<Var> {
    check_logits(g, &out, data)?;
    let (batch, n) = (data.points.batch(), data.points.len());
    if anchors.len() != batch {
        return Err(Error::Shape { op: "anchors", lhs: vec![batch], rhs: vec![anchors.len()] });
    }
    let mut target = vec![T::zero(); batch * n];
    let mut live = vec![T::zero(); batch * n];
    let mut members = vec![0usize; batch];
    for b in 0..batch {
        let ja = data.labels[b * n + anchors[b]].ok_or_else(|| contract(format!("anchor of set {b} is not live")))?;
        for i in 0..n {
            let at = b * n + i;
            if data.points.live()[at] {
                live[at] = T::one();
            }
            if data.labels[at] == Some(ja) {
                target[at] = T::one();
                members[b] += 1;
            }
        }
    }
    let target = g.constant(Tensor::new(vec![batch, n], target)?);
    let live = g.constant(Tensor::new(vec![batch, n], live)?);
    let sp = g.softplus(out.logits);
    let tz = g.mul(target, out.logits)?;
    let bce = g.sub(sp, tz)?;
    let bce = g.mul(bce, live)?;
    let bce = g.sum_axis(bce, 1)?;
    let divisor = bce_divisors(data, scale).reshape(vec![batch])?;
    let divisor = g.constant(divisor);
    let mut per_set = g.mul(bce, divisor)?;
    if let Some(lp) = cluster_log_density(g, &out, data, density)? {
        let lp = g.mul(lp, target)?;
        let lp = g.sum_axis(lp, 1)?;
        let inv = Tensor::from_fn(vec![batch], |b| -T::one() / T::lit(members[b] as f64));
        let inv = g.constant(inv);
        let nll = g.mul(lp, inv)?;
        per_set = g.add(per_set, nll)?;
    }
    Ok(g.mean(per_set))
}

#[cfg(test)]
mod tests;
