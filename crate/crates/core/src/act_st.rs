//! Set Transformer with an adaptive-computation-time decoder.
//!
//! The seeds of the pooling layer are grown recursively,
//! `s_j = PMA₁([s₁, …, s_{j−1}])`, so the network can emit any number of
//! mixture components. After `k` steps the decoded rows give a halting value
//! `v_k` (from the first feature column) and per-component
//! `(logit π, μ, log σ²)` (from the remaining columns). Iteration stops once
//! `s_k = 1 − Π_{j≤k} v_j` exceeds one half.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::POINT_DIM;
use crate::error::{contract, Error, Result};
use crate::filtering::LabeledSet;
use crate::scalar::Scalar;
use crate::set_blocks::{small_normal, FeedForward, IsabStack, Linear, Mab, Pma, Sab, SetBatch};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Values per emitted component: logit π, μ₁, μ₂, log σ₁², log σ₂².
pub const COMPONENT_WIDTH: usize = 1 + 2 * POINT_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActConfig {
    pub dim: usize,
    pub heads: usize,
    pub inducing: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub k_max: usize,
}

impl Default for ActConfig {
    fn default() -> Self {
        Self { dim: 128, heads: 4, inducing: 32, encoder_depth: 4, decoder_depth: 2, k_max: 4 }
    }
}

impl ActConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} must be a multiple of heads {} and at least 2", self.dim, self.heads)));
        }
        if self.inducing == 0 || self.k_max == 0 {
            return Err(Error::Config("inducing points and k_max must be positive".into()));
        }
        Ok(())
    }
}

/// `1 − Π_{j≤k} v_j` for every prefix.
pub fn stop_scores<T: Scalar>(halting: &[T]) -> Vec<T> {
    let mut prod = T::one();
    halting
        .iter()
        .map(|&v| {
            prod *= v;
            T::one() - prod
        })
        .collect()
}

/// First step (1-based) whose stop score exceeds one half, else `halting.len()`.
pub fn halting_step<T: Scalar>(halting: &[T]) -> usize {
    let half = T::lit(0.5);
    stop_scores(halting).iter().position(|&s| s > half).map_or(halting.len(), |i| i + 1)
}

/// Decoded quantities after `k` steps.
#[derive(Clone, Copy, Debug)]
pub struct ActStep {
    /// Pre-sigmoid halting value `[B]`.
    pub halting_logit: Var,
    /// `[B, k, COMPONENT_WIDTH]`.
    pub components: Var,
}

/// A fitted mixture for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ActPrediction {
    pub k: usize,
    pub halting: Vec<f64>,
    pub log_pi: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub log_vars: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

impl ActPrediction {
    /// Posterior component probabilities of `x`.
    pub fn responsibilities(&self, x: [f64; 2]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.k).map(|j| self.log_pi[j] + component_log_density(x, self.means[j], self.log_vars[j])).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        logs.iter().map(|l| (l - max).exp() / total).collect()
    }

    /// `log Σ_j π_j 𝒩(x; μ_j, σ_j²)`.
    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let logs: Vec<f64> = (0..self.k).map(|j| self.log_pi[j] + component_log_density(x, self.means[j], self.log_vars[j])).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }
}

fn component_log_density(x: [f64; 2], mu: [f64; 2], log_var: [f64; 2]) -> f64 {
    (0..2).map(|d| -0.5 * ((2.0 * PI).ln() + log_var[d] + (x[d] - mu[d]).powi(2) * (-log_var[d]).exp())).sum()
}

#[derive(Clone, Debug)]
pub struct ActStModel {
    pub config: ActConfig,
    pub embed: Linear,
    pub encoder: IsabStack,
    pub first_seed: ParamId,
    pub seed_recursion: Pma,
    pub pool: Mab,
    pub decoder: Vec<Sab>,
    pub halting_head: FeedForward,
    pub component_head: FeedForward,
}

impl ActStModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: ActConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ActConfig { dim, heads, inducing, .. } = config;
        let embed = Linear::new(store, "embed", POINT_DIM, dim, rng);
        let encoder = IsabStack::new(store, "encoder", config.encoder_depth, dim, heads, inducing, rng);
        let first_seed = store.add("apma.first_seed", small_normal(vec![1, 1, dim], rng));
        let seed_recursion = Pma::new(store, "apma.recursion", dim, heads, 1, rng);
        let pool = Mab::new(store, "apma.mab", dim, heads, rng);
        let decoder = (0..config.decoder_depth).map(|i| Sab::new(store, &format!("decoder.{i}"), dim, heads, rng)).collect();
        let halting_head = FeedForward::new(store, "halting", 1, dim, 1, rng);
        let component_head = FeedForward::new(store, "components", dim - 1, dim, COMPONENT_WIDTH, rng);
        Ok(Self { config, embed, encoder, first_seed, seed_recursion, pool, decoder, halting_head, component_head })
    }

    /// Seeds `[1, k, d]` built by the recursion.
    pub fn seeds<T: Scalar>(&self, g: &mut Graph<'_, T>, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(contract("the adaptive pooling needs k ≥ 1"));
        }
        let mut seeds = g.param(self.first_seed);
        for _ in 1..k {
            let next = self.seed_recursion.forward(g, seeds, None)?;
            seeds = g.concat(&[seeds, next], 1)?;
        }
        Ok(seeds)
    }

    /// `MAB([s₁, …, s_k], H)`: `[B, k, d]`.
    pub fn apma<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, live: Option<&[bool]>, k: usize) -> Result<Var> {
        let batch = g.shape(h)[0];
        let seeds = self.seeds(g, k)?;
        let seeds = g.expand(seeds, vec![batch, k, self.config.dim])?;
        self.pool.forward(g, seeds, h, live)
    }

    /// Encoded input `[B, n, d]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &SetBatch<T>) -> Result<Var> {
        x.require_live()?;
        if x.width() != POINT_DIM {
            return Err(Error::Shape { op: "act-st input", lhs: x.values().shape().to_vec(), rhs: vec![POINT_DIM] });
        }
        let input = g.constant(x.values().clone());
        let h = self.embed.forward(g, input)?;
        self.encoder.forward(g, h, x.mask())
    }

    /// Decodes step `k` from the pooled rows `pooled: [B, ≥k, d]`.
    pub fn decode_step<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: Var, k: usize) -> Result<ActStep> {
        let batch = g.shape(pooled)[0];
        let dim = self.config.dim;
        let mut h = g.slice(pooled, 1, 0, k)?;
        for sab in &self.decoder {
            h = sab.forward(g, h, None)?;
        }
        let first = g.slice(h, 2, 0, 1)?;
        let halting = self.halting_head.forward(g, first)?;
        let halting = g.reshape(halting, vec![batch, k])?;
        let halting_logit = g.mean_axis(halting, 1)?;
        let rest = g.slice(h, 2, 1, dim - 1)?;
        let components = self.component_head.forward(g, rest)?;
        Ok(ActStep { halting_logit, components })
    }

    /// Runs steps `1..=k_max`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &SetBatch<T>, k_max: usize) -> Result<Vec<ActStep>> {
        let h = self.encode(g, x)?;
        let pooled = self.apma(g, h, x.mask(), k_max)?;
        (1..=k_max).map(|k| self.decode_step(g, pooled, k)).collect()
    }

    /// Mean negative mixture log-likelihood using `k_true` components, plus
    /// the halting BCE `Σ_k BCE(v_k, 1{k < k_true})`, averaged over the batch.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, steps: &[ActStep], data: &LabeledSet<T>) -> Result<Var> {
        let batch = data.points.batch();
        let k_max = steps.len();
        if let Some(b) = data.clusters.iter().position(|&k| k == 0 || k > k_max) {
            return Err(contract(format!("set {b} has {} clusters but {k_max} steps were run", data.clusters[b])));
        }
        let x = g.constant(data.points.values().clone());
        let mut per_k = Vec::with_capacity(k_max);
        for step in steps {
            let nll = mixture_nll(g, x, step.components, data.points.live())?;
            per_k.push(g.reshape(nll, vec![batch, 1])?);
        }
        let per_k = g.concat(&per_k, 1)?;
        let idx: Vec<usize> = data.clusters.iter().map(|&k| k - 1).collect();
        let nll = g.select_last(per_k, &idx)?;

        let logits: Vec<Var> = steps.iter().map(|s| g.reshape(s.halting_logit, vec![batch, 1])).collect::<Result<_>>()?;
        let logits = g.concat(&logits, 1)?;
        let targets = Tensor::from_fn(vec![batch, k_max], |i| if i % k_max + 1 < data.clusters[i / k_max] { T::one() } else { T::zero() });
        let targets = g.constant(targets);
        let sp = g.softplus(logits);
        let tz = g.mul(targets, logits)?;
        let bce = g.sub(sp, tz)?;
        let bce = g.sum_axis(bce, 1)?;
        let total = g.add(nll, bce)?;
        Ok(g.mean(total))
    }

    /// Emits components until the stop score exceeds one half or `k_max` is reached,
    /// then assigns each live point to its most probable component.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x: &SetBatch<T>, k_max: usize) -> Result<Vec<ActPrediction>> {
        if k_max == 0 {
            return Err(contract("k_max must be at least 1"));
        }
        let mut g = Graph::inference(store);
        let steps = self.forward(&mut g, x, k_max)?;
        let batch = x.batch();
        let logits: Vec<Vec<f64>> = steps.iter().map(|s| g.value(s.halting_logit).to_f64_vec()).collect();
        let halting: Vec<Vec<f64>> = (0..batch).map(|b| logits.iter().map(|l| 1.0 / (1.0 + (-l[b]).exp())).collect()).collect();
        let n = x.len();
        let points = x.values().to_f64_vec();
        let mut out = Vec::with_capacity(batch);
        for (b, halt) in halting.into_iter().enumerate() {
            let k = halting_step(&halt);
            let comps = g.value(steps[k - 1].components).to_f64_vec();
            let row = |j: usize| &comps[(b * k + j) * COMPONENT_WIDTH..(b * k + j + 1) * COMPONENT_WIDTH];
            let logits: Vec<f64> = (0..k).map(|j| row(j)[0]).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let mut pred = ActPrediction {
                k,
                halting: halt,
                log_pi: logits.iter().map(|l| l - lse).collect(),
                means: (0..k).map(|j| [row(j)[1], row(j)[2]]).collect(),
                log_vars: (0..k).map(|j| [row(j)[3], row(j)[4]]).collect(),
                labels: Vec::new(),
            };
            pred.labels = (0..n)
                .filter(|&i| x.live()[b * n + i])
                .map(|i| {
                    let r = pred.responsibilities([points[(b * n + i) * 2], points[(b * n + i) * 2 + 1]]);
                    r.iter().enumerate().fold(0, |best, (j, &p)| if p > r[best] { j } else { best })
                })
                .collect();
            out.push(pred);
        }
        Ok(out)
    }
}

/// Mean over live points of `−log Σ_j π_j 𝒩(x; μ_j, σ_j²)`: `x: [B, n, 2]`, `components: [B, k, 5]` → `[B]`.
pub fn mixture_nll<T: Scalar>(g: &mut Graph<'_, T>, x: Var, components: Var, live: &[bool]) -> Result<Var> {
    let (batch, n) = (g.shape(x)[0], g.shape(x)[1]);
    let k = g.shape(components)[1];
    let logits = g.slice(components, 2, 0, 1)?;
    let logits = g.reshape(logits, vec![batch, 1, k])?;
    let log_pi = g.log_softmax(logits, 2)?;
    let mu = g.slice(components, 2, 1, POINT_DIM)?;
    let mu = g.reshape(mu, vec![batch, 1, k, POINT_DIM])?;
    let log_var = g.slice(components, 2, 1 + POINT_DIM, POINT_DIM)?;
    let log_var = g.reshape(log_var, vec![batch, 1, k, POINT_DIM])?;
    let xs = g.reshape(x, vec![batch, n, 1, POINT_DIM])?;
    let diff = g.sub(xs, mu)?;
    let sq = g.square(diff);
    let neg = g.neg(log_var);
    let precision = g.exp(neg);
    let quad = g.mul(sq, precision)?;
    let t = g.add(quad, log_var)?;
    let t = g.add_scalar(t, T::lit((2.0 * PI).ln()));
    let t = g.sum_axis(t, 3)?;
    let comp = g.scale(t, T::lit(-0.5));
    let joint = g.add(comp, log_pi)?;
    let ll = g.logsumexp(joint, 2)?;
    let counts: Vec<usize> = (0..batch).map(|b| live[b * n..(b + 1) * n].iter().filter(|&&l| l).count()).collect();
    let weights = Tensor::from_fn(vec![batch, n], |i| if live[i] { -T::one() / T::lit(counts[i / n] as f64) } else { T::zero() });
    let weights = g.constant(weights);
    let ll = g.mul(ll, weights)?;
    g.sum_axis(ll, 1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::tensor::gradcheck::check_param_gradients;

    fn tiny() -> ActConfig {
        ActConfig { dim: 4, heads: 2, inducing: 2, encoder_depth: 1, decoder_depth: 1, k_max: 3 }
    }

    fn build<T: Scalar>(config: ActConfig, seed: u64) -> (ParamStore<T>, ActStModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = ActStModel::new(config, &mut store, &mut rng).unwrap();
        (store, model)
    }

    fn points<T: Scalar>(batch: usize, n: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 2.0).unwrap();
        Tensor::from_fn(vec![batch, n, 2], |_| T::lit(d.sample(&mut rng)))
    }

    #[test]
    fn stop_scores_edge_cases() {
        assert_eq!(stop_scores(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(halting_step(&[1.0, 1.0, 1.0]), 3);
        assert_eq!(stop_scores(&[0.0, 0.7])[0], 1.0);
        assert_eq!(halting_step(&[0.0, 0.7]), 1);
        assert_eq!(halting_step(&[0.9, 0.8, 0.5, 0.9]), 3);
    }

    proptest! {
        #[test]
        fn stop_scores_are_monotone(v in prop::collection::vec(0.0f64..=1.0, 1..12)) {
            let s = stop_scores(&v);
            for w in s.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let k = halting_step(&v);
            prop_assert!(k >= 1 && k <= v.len());
        }
    }

    #[test]
    fn first_seed_pooling_equals_plain_pma() {
        let (store, model) = build::<f64>(ActConfig { k_max: 1, ..tiny() }, 1);
        let x = points::<f64>(2, 5, 2);
        let mut g = Graph::inference(&store);
        let h = g.constant(x.clone().reshape(vec![2, 5, 2]).unwrap());
        let h = model.embed.forward(&mut g, h).unwrap();
        let a = model.apma(&mut g, h, None, 1).unwrap();
        let seed = g.param(model.first_seed);
        let seed = g.expand(seed, vec![2, 1, 4]).unwrap();
        let b = model.pool.forward(&mut g, seed, h, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(model.apma(&mut g, h, None, 0).is_err());
    }

    #[test]
    fn pooling_rows_are_prefix_stable_and_permutation_invariant() {
        let (store, model) = build::<f32>(tiny(), 3);
        let x = points::<f32>(1, 6, 4);
        let perm = [5, 3, 1, 0, 2, 4];
        let px = Tensor::from_fn(vec![1, 6, 2], |i| x.data()[perm[i / 2] * 2 + i % 2]);
        let pool = |x: &Tensor<f32>, k: usize| {
            let mut g = Graph::inference(&store);
            let h = model.encode(&mut g, &SetBatch::dense(x.clone()).unwrap()).unwrap();
            let p = model.apma(&mut g, h, None, k).unwrap();
            g.value(p).clone()
        };
        let (a3, a2) = (pool(&x, 3), pool(&x, 2));
        assert_eq!(a3.shape(), &[1, 3, 4]);
        assert_eq!(&a3.data()[..8], a2.data());
        assert!(a3.max_abs_diff(&pool(&px, 3)) <= 1e-5);
    }

    #[test]
    fn single_component_nll_matches_gaussian_oracle() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = Tensor::new(vec![1, 4, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let comps = Tensor::new(vec![1, 1, 5], vec![3.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (xv, cv) = (g.constant(x), g.constant(comps));
        let nll = mixture_nll(&mut g, xv, cv, &[true; 4]).unwrap();
        assert!((g.value(nll).item() - ((2.0 * PI).ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn mixture_nll_invariant_to_component_order() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = points::<f64>(1, 5, 5);
        let comps = Tensor::from_fn(vec![1, 3, 5], |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
        let order = [2, 0, 1];
        let swapped = Tensor::from_fn(vec![1, 3, 5], |i| comps.data()[order[i / 5] * 5 + i % 5]);
        let live = [true, true, false, true, true];
        let xv = g.constant(x);
        let (a, b) = (g.constant(comps), g.constant(swapped));
        let na = mixture_nll(&mut g, xv, a, &live).unwrap();
        let nb = mixture_nll(&mut g, xv, b, &live).unwrap();
        assert!((g.value(na).item() - g.value(nb).item()).abs() < 1e-12);
    }

    #[test]
    fn perfect_halting_costs_nothing() {
        let (store, model) = build::<f64>(tiny(), 6);
        let x = SetBatch::dense(points(1, 4, 7)).unwrap();
        let data = LabeledSet::new(x, vec![Some(0), Some(1), Some(0), Some(1)], vec![2]).unwrap();
        let mut g = Graph::inference(&store);
        let comps = g.constant(Tensor::from_fn(vec![1, 2, 5], |_| 0.0));
        let halting = [60.0, -60.0, -60.0];
        let steps: Vec<ActStep> = halting
            .iter()
            .map(|&h| ActStep { halting_logit: g.constant(Tensor::new(vec![1], vec![h]).unwrap()), components: comps })
            .collect();
        let loss = model.loss(&mut g, &steps, &data).unwrap();
        let xv = g.constant(data.points.values().clone());
        let nll = mixture_nll(&mut g, xv, comps, data.points.live()).unwrap();
        assert!((g.value(loss).item() - g.value(nll).item()).abs() < 1e-20);
    }

    #[test]
    fn predictions_are_well_formed() {
        let (store, model) = build::<f32>(ActConfig { k_max: 4, ..tiny() }, 8);
        let x = SetBatch::new(points(2, 6, 9), vec![true; 5].into_iter().chain([false]).chain([true; 6]).collect()).unwrap();
        let preds = model.predict(&store, &x, 4).unwrap();
        assert_eq!(preds[0].labels.len(), 5);
        assert_eq!(preds[1].labels.len(), 6);
        for p in &preds {
            assert!((1..=4).contains(&p.k));
            assert!(p.labels.iter().all(|&l| l < p.k));
            let r = p.responsibilities([0.3, -0.7]);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_gradients_pass_check() {
        let (store, model) = build::<f64>(tiny(), 10);
        let x = SetBatch::new(points(2, 4, 11), vec![true, true, true, false, true, true, true, true]).unwrap();
        let labels = vec![Some(0), Some(1), Some(0), None, Some(0), Some(1), Some(2), Some(2)];
        let data = LabeledSet::new(x, labels, vec![2, 3]).unwrap();
        let check = check_param_gradients(&store, 1e-5, |g| {
            let steps = model.forward(g, &data.points, 3)?;
            model.loss(g, &steps, &data)
        })
        .unwrap();
        assert!(check.max_error() < 1e-4, "{:?}", check.relative_errors);
    }

    #[test]
    fn loss_rejects_more_clusters_than_steps() {
        let (store, model) = build::<f64>(tiny(), 12);
        let x = SetBatch::dense(points(1, 3, 13)).unwrap();
        let data = LabeledSet::new(x, vec![Some(0), Some(1), Some(2)], vec![3]).unwrap();
        let mut g = Graph::inference(&store);
        let steps = model.forward(&mut g, &data.points, 2).unwrap();
        assert!(matches!(model.loss(&mut g, &steps, &data), Err(Error::Contract(_))));
    }
}
