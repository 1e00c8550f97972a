use std::collections::BTreeMap;
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::cluster::{compact_labels, iterative_filtering, ClusterOptions};
use super::Model;
use crate::datagen::{DataKind, Generator};
use crate::error::{contract, Error, Result};
use crate::evaluation::{ari, k_mae, nmi, MetricsReport};
use crate::filtering::FilterModel;
use crate::scalar::Scalar;
use crate::set_blocks::SetBatch;
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub kind: DataKind,
    pub n_max: usize,
    pub k_max: usize,
    pub num_datasets: usize,
    pub seed: u64,
    pub cluster: ClusterOptions,
}

impl EvalOptions {
    pub fn new(kind: DataKind, n_max: usize, k_max: usize, num_datasets: usize, seed: u64) -> Self {
        Self { kind, n_max, k_max, num_datasets, seed, cluster: ClusterOptions::default() }
    }
}

/// `log p(xᵢ; θ_j)` for every point under every cluster that has a θ.
pub fn cluster_log_densities<T: Scalar>(
    model: &FilterModel,
    store: &ParamStore<T>,
    points: &[[f64; 2]],
    thetas: &[Option<Vec<f64>>],
) -> Result<Vec<Option<Vec<f64>>>> {
    let Some(density) = &model.density else {
        return Ok(vec![None; thetas.len()]);
    };
    let n = points.len();
    let x = Tensor::from_fn(vec![1, n, 2], |i| T::lit(points[i / 2][i % 2]));
    thetas
        .iter()
        .map(|theta| {
            let Some(theta) = theta else { return Ok(None) };
            if theta.len() != density.theta_width() {
                return Err(Error::Shape { op: "cluster density", lhs: vec![theta.len()], rhs: vec![density.theta_width()] });
            }
            let mut g = Graph::inference(store);
            let xv = g.constant(x.clone());
            let tv = g.constant(Tensor::from_f64(vec![1, theta.len()], theta)?);
            let lp = density.log_density(&mut g, xv, tv)?;
            Ok(Some(g.value(lp).to_f64_vec()))
        })
        .collect()
}

/// Mean per-point log-likelihood of the mixture over discovered clusters with
/// weights `n_j / n`. Clusters without θ are left out and the weights renormalised.
fn empirical_mixture_ll(labels: &[usize], log_densities: &[Option<Vec<f64>>]) -> Option<f64> {
    let mut sizes = vec![0usize; log_densities.len()];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let covered: usize = sizes.iter().zip(log_densities).filter(|(_, d)| d.is_some()).map(|(s, _)| s).sum();
    if covered == 0 {
        return None;
    }
    let terms: Vec<(f64, &Vec<f64>)> = sizes
        .iter()
        .zip(log_densities)
        .filter_map(|(&s, d)| d.as_ref().filter(|_| s > 0).map(|d| ((s as f64 / covered as f64).ln(), d)))
        .collect();
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| {
            let max = terms.iter().map(|(lp, d)| lp + d[i]).fold(f64::NEG_INFINITY, f64::max);
            max + terms.iter().map(|(lp, d)| (lp + d[i] - max).exp()).sum::<f64>().ln()
        })
        .sum();
    Some(total / n as f64)
}

/// Clusters `num_datasets` freshly generated datasets and aggregates metrics.
///
/// Time per dataset is wall-clock for clustering alone; data generation and
/// likelihood scoring are excluded.
pub fn evaluate(ckpt: &Checkpoint, options: &EvalOptions) -> Result<MetricsReport> {
    ckpt.ensure_data_kind(options.kind)?;
    if options.num_datasets == 0 {
        return Err(contract("evaluation needs at least one dataset"));
    }
    let generator = Generator::new(options.kind, options.n_max, options.k_max)?;
    let (mut aris, mut nmis, mut lls) = (Vec::new(), Vec::new(), Vec::new());
    let (mut k_true, mut k_pred) = (Vec::new(), Vec::new());
    let mut seconds = 0.0;
    let mut exhausted = 0;

    for i in 0..options.num_datasets {
        let data = generator.dataset(options.seed, i as u64);
        let cluster = ClusterOptions { seed: options.seed.wrapping_add(i as u64), ..options.cluster };
        let (labels, k, ll) = match &ckpt.model {
            Model::Filter(m) => {
                let start = Instant::now();
                let result = iterative_filtering(m, &ckpt.store, &data.points, &cluster)?;
                seconds += start.elapsed().as_secs_f64();
                exhausted += usize::from(result.exhausted);
                let lds = cluster_log_densities(m, &ckpt.store, &data.points, &result.thetas)?;
                let ll = empirical_mixture_ll(&result.labels, &lds);
                (result.labels, result.k, ll)
            }
            Model::ActSt(m) => {
                let x = SetBatch::dense(Tensor::<f32>::from_fn(vec![1, data.len(), 2], |j| data.points[j / 2][j % 2] as f32))?;
                let start = Instant::now();
                let pred = m.predict(&ckpt.store, &x, cluster.max_iters)?.remove(0);
                seconds += start.elapsed().as_secs_f64();
                let ll = data.points.iter().map(|&p| pred.log_density(p)).sum::<f64>() / data.len() as f64;
                let (labels, k) = compact_labels(&pred.labels);
                (labels, k, Some(ll))
            }
        };
        if ll.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite log-likelihood on evaluation dataset {i}")));
        }
        aris.push(ari(&data.labels, &labels)?);
        nmis.push(nmi(&data.labels, &labels)?);
        k_true.push(data.k);
        k_pred.push(k);
        lls.extend(ll);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n = options.num_datasets;
    let mut config: BTreeMap<String, String> = ckpt.config.describe().into_iter().map(|(k, v)| (format!("train.{k}"), v)).collect();
    config.insert("train.steps_completed".into(), ckpt.steps_completed.to_string());
    config.insert("eval.kind".into(), options.kind.as_str().into());
    config.insert("eval.n_max".into(), options.n_max.to_string());
    config.insert("eval.k_max".into(), options.k_max.to_string());
    config.insert("eval.seed".into(), options.seed.to_string());
    config.insert("eval.threshold".into(), options.cluster.threshold.to_string());
    config.insert("eval.max_iters".into(), options.cluster.max_iters.to_string());
    config.insert("eval.exhausted_datasets".into(), exhausted.to_string());
    Ok(MetricsReport {
        ll: (lls.len() == n).then(|| mean(&lls)),
        ari: mean(&aris),
        nmi: mean(&nmis),
        k_mae: k_mae(&k_true, &k_pred)?,
        time_per_dataset_seconds: seconds / n as f64,
        n_datasets: n,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_mixture_matches_hand_computation() {
        let labels = [0, 0, 1];
        let lds = vec![Some(vec![-1.0, -2.0, -5.0]), Some(vec![-4.0, -3.0, -0.5])];
        let expected = [
            ((2.0f64 / 3.0).ln() - 1.0).exp() + ((1.0f64 / 3.0).ln() - 4.0).exp(),
            ((2.0f64 / 3.0).ln() - 2.0).exp() + ((1.0f64 / 3.0).ln() - 3.0).exp(),
            ((2.0f64 / 3.0).ln() - 5.0).exp() + ((1.0f64 / 3.0).ln() - 0.5).exp(),
        ]
        .iter()
        .map(|p| p.ln())
        .sum::<f64>()
            / 3.0;
        assert!((empirical_mixture_ll(&labels, &lds).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn clusters_without_theta_are_renormalised_away() {
        let lds = vec![Some(vec![-1.0, -2.0, -3.0]), None];
        let ll = empirical_mixture_ll(&[0, 0, 1], &lds).unwrap();
        assert!((ll - (-2.0)).abs() < 1e-12);
        assert_eq!(empirical_mixture_ll(&[0, 0], &[None]), None);
    }
}
