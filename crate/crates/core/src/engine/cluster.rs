use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::Model;
use crate::datagen::dataset_rng;
use crate::error::{contract, Error, Result};
use crate::filtering::{FilterKind, FilterModel};
use crate::scalar::Scalar;
use crate::set_blocks::SetBatch;
use crate::tensor::{ParamStore, Tensor};

/// How extracted points leave the set between iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Removal {
    /// Keep every point and give extracted ones zero attention weight.
    Mask,
    /// Physically drop extracted points before the next pass.
    #[default]
    Delete,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterOptions {
    /// Points with membership strictly above this join the extracted cluster.
    pub threshold: f64,
    pub max_iters: usize,
    /// Seeds the anchor draws of anchored filtering.
    pub seed: u64,
    pub removal: Removal,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self { threshold: 0.5, max_iters: 50, seed: 0, removal: Removal::Delete }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    /// Cluster id per point, contiguous `0..k` in extraction order.
    pub labels: Vec<usize>,
    pub k: usize,
    /// θ of each extracted cluster, when the model has a density head.
    pub thetas: Vec<Option<Vec<f64>>>,
    /// Filtering passes run.
    pub iterations: usize,
    /// Set when `max_iters` ran out and the leftover points were lumped into one final cluster.
    pub exhausted: bool,
}

/// Clusters a dataset by repeated filtering until every point is assigned.
///
/// Each pass extracts the points whose membership exceeds the threshold. If
/// none does, the single most probable point is taken so every pass makes
/// progress. Anchored models draw their anchor uniformly from the live points.
pub fn iterative_filtering<T: Scalar>(
    model: &FilterModel,
    store: &ParamStore<T>,
    points: &[[f64; 2]],
    options: &ClusterOptions,
) -> Result<ClusteringResult> {
    let n = points.len();
    if n == 0 {
        return Err(contract("cannot cluster an empty dataset"));
    }
    if !(0.0..1.0).contains(&options.threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1), got {}", options.threshold)));
    }
    if options.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let anchored = model.kind() == FilterKind::Af;
    let mut rng = dataset_rng(options.seed, 0);
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut thetas = Vec::new();
    let mut iterations = 0;

    while !remaining.is_empty() && iterations < options.max_iters {
        let anchor = anchored.then(|| rng.random_range(0..remaining.len()));
        let (memberships, theta) = match options.removal {
            Removal::Delete => {
                let x = set_of(points, &remaining)?;
                let out = model.infer(store, &x, anchor.as_ref().map(std::slice::from_ref))?;
                (out.memberships.to_f64_vec(), out.theta)
            }
            Removal::Mask => {
                let mut live = vec![false; n];
                remaining.iter().for_each(|&i| live[i] = true);
                let x = SetBatch::new(full_tensor(points), live)?;
                let anchor = anchor.map(|r| remaining[r]);
                let out = model.infer(store, &x, anchor.as_ref().map(std::slice::from_ref))?;
                let m = out.memberships.to_f64_vec();
                (remaining.iter().map(|&i| m[i]).collect(), out.theta)
            }
        };
        if memberships.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric(format!("non-finite membership in filtering pass {}", iterations + 1)));
        }
        let mut selected: Vec<bool> = memberships.iter().map(|&m| m > options.threshold).collect();
        if !selected.iter().any(|&s| s) {
            let best = memberships.iter().enumerate().fold(0, |b, (i, &m)| if m > memberships[b] { i } else { b });
            selected[best] = true;
        }
        let id = thetas.len();
        thetas.push(theta.map(|t| t.to_f64_vec()));
        remaining = remaining
            .into_iter()
            .zip(selected)
            .filter_map(|(i, s)| {
                if s {
                    labels[i] = Some(id);
                    None
                } else {
                    Some(i)
                }
            })
            .collect();
        iterations += 1;
    }

    let exhausted = !remaining.is_empty();
    if exhausted {
        let id = thetas.len();
        thetas.push(None);
        remaining.iter().for_each(|&i| labels[i] = Some(id));
    }
    let labels: Vec<usize> = labels.into_iter().map(|l| l.expect("every point assigned")).collect();
    Ok(ClusteringResult { labels, k: thetas.len(), thetas, iterations, exhausted })
}

/// Clusters with whichever model the checkpoint holds. ACT-ST checkpoints
/// emit up to `max_iters` components and assign each point to its most
/// probable one.
pub fn cluster_points(ckpt: &Checkpoint, points: &[[f64; 2]], options: &ClusterOptions) -> Result<ClusteringResult> {
    match &ckpt.model {
        Model::Filter(m) => iterative_filtering(m, &ckpt.store, points, options),
        Model::ActSt(m) => {
            if points.is_empty() {
                return Err(contract("cannot cluster an empty dataset"));
            }
            let x = SetBatch::dense(full_tensor(points))?;
            let pred = m.predict(&ckpt.store, &x, options.max_iters)?.remove(0);
            let (labels, k) = compact_labels(&pred.labels);
            Ok(ClusteringResult { labels, k, thetas: vec![None; k], iterations: 1, exhausted: false })
        }
    }
}

/// Renumbers labels to `0..k` in order of first appearance.
pub(crate) fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn full_tensor<T: Scalar>(points: &[[f64; 2]]) -> Tensor<T> {
    Tensor::from_fn(vec![1, points.len(), 2], |i| T::lit(points[i / 2][i % 2]))
}

fn set_of<T: Scalar>(points: &[[f64; 2]], rows: &[usize]) -> Result<SetBatch<T>> {
    SetBatch::dense(Tensor::from_fn(vec![1, rows.len(), 2], |i| T::lit(points[rows[i / 2]][i % 2])))
}
