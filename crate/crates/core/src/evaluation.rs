//! Clustering metrics and a diagonal-covariance EM reference fit.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::MogParams;
use crate::error::{contract, Result};

/// Relabels to `0..k` in order of first appearance; returns the number of groups.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

struct Contingency {
    n: usize,
    table: Vec<usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(contract(format!("partition lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (a, ka) = compact(a);
    let (b, kb) = compact(b);
    let mut table = vec![0; ka * kb];
    let (mut rows, mut cols) = (vec![0; ka], vec![0; kb]);
    for (&i, &j) in a.iter().zip(&b) {
        table[i * kb + j] += 1;
        rows[i] += 1;
        cols[j] += 1;
    }
    Ok(Contingency { n: a.len(), table, rows, cols })
}

fn pairs(c: usize) -> f64 {
    (c * c.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index (Hubert–Arabie). Identical trivial partitions score 1.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = contingency(truth, pred)?;
    if c.n < 2 {
        return Err(contract("the adjusted Rand index needs at least two points"));
    }
    let index: f64 = c.table.iter().map(|&x| pairs(x)).sum();
    let sum_a: f64 = c.rows.iter().map(|&x| pairs(x)).sum();
    let sum_b: f64 = c.cols.iter().map(|&x| pairs(x)).sum();
    let expected = sum_a * sum_b / pairs(c.n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

/// Mutual information normalised by the arithmetic mean of the two entropies.
/// Identical partitions score 1, including the single-cluster case.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = contingency(truth, pred)?;
    if c.n == 0 {
        return Err(contract("NMI of empty partitions"));
    }
    if c.rows.len() == 1 && c.cols.len() == 1 {
        return Ok(1.0);
    }
    let n = c.n as f64;
    let kb = c.cols.len();
    let mut mi = 0.0;
    for (cell, &x) in c.table.iter().enumerate() {
        if x > 0 {
            let (r, col) = (c.rows[cell / kb] as f64, c.cols[cell % kb] as f64);
            mi += (x as f64 / n) * ((x as f64 * n) / (r * col)).ln();
        }
    }
    let denom = 0.5 * (entropy(&c.rows, n) + entropy(&c.cols, n));
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Mean absolute error between true and estimated cluster counts.
pub fn k_mae(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(contract(format!("k lists must be equal-length and nonempty: {} vs {}", truth.len(), pred.len())));
    }
    let total: usize = truth.iter().zip(pred).map(|(&t, &p)| t.abs_diff(p)).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// Result of [`em_mog_fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmFit {
    pub params: MogParams,
    /// `n × k` posterior probabilities, row-major.
    pub responsibilities: Vec<f64>,
    pub labels: Vec<usize>,
    /// Mean per-point log-likelihood after every iteration.
    pub ll_trace: Vec<f64>,
}

pub const EM_VARIANCE_FLOOR: f64 = 1e-6;
pub const EM_TOLERANCE: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 500;

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// k-means++ seeding: first centre uniform, later ones proportional to squared distance.
fn kmeans_pp<R: Rng>(x: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut centres = vec![x[rng.random_range(0..x.len())]];
    let mut d2: Vec<f64> = x.iter().map(|&p| sq_dist(p, centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter().position(|&d| {
                u -= d;
                u < 0.0
            })
            .unwrap_or(x.len() - 1)
        } else {
            rng.random_range(0..x.len())
        };
        centres.push(x[next]);
        for (d, &p) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(p, x[next]));
        }
    }
    centres
}

/// Diagonal-covariance EM for a `k`-component 2-D Gaussian mixture.
///
/// Runs until the mean log-likelihood improves by less than `1e-6` or 500
/// iterations. Variances are floored at `1e-6`.
pub fn em_mog_fit(x: &[[f64; 2]], k: usize, seed: u64) -> Result<EmFit> {
    if k == 0 || x.len() < k {
        return Err(contract(format!("EM needs 1 ≤ k ≤ n, got k = {k}, n = {}", x.len())));
    }
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = kmeans_pp(x, k, &mut rng);
    let mut pi = vec![1.0 / k as f64; k];
    let global_var: [f64; 2] = std::array::from_fn(|d| {
        let m = x.iter().map(|p| p[d]).sum::<f64>() / n as f64;
        (x.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / n as f64).max(EM_VARIANCE_FLOOR)
    });
    let mut vars = vec![global_var; k];
    let mut resp = vec![0.0; n * k];
    let mut ll_trace = Vec::new();
    for _ in 0..EM_MAX_ITERS {
        let mut ll = 0.0;
        for (i, p) in x.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for j in 0..k {
                row[j] = pi[j].ln()
                    + (0..2).map(|d| -0.5 * ((2.0 * PI * vars[j][d]).ln() + (p[d] - means[j][d]).powi(2) / vars[j][d])).sum::<f64>();
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|l| *l = (*l - lse).exp());
            ll += lse;
        }
        let ll = ll / n as f64;
        let done = ll_trace.last().is_some_and(|&prev: &f64| ll - prev < EM_TOLERANCE);
        ll_trace.push(ll);
        if done {
            break;
        }
        for j in 0..k {
            let nj: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nj <= 0.0 {
                continue;
            }
            pi[j] = nj / n as f64;
            for d in 0..2 {
                means[j][d] = (0..n).map(|i| resp[i * k + j] * x[i][d]).sum::<f64>() / nj;
                let v = (0..n).map(|i| resp[i * k + j] * (x[i][d] - means[j][d]).powi(2)).sum::<f64>() / nj;
                vars[j][d] = v.max(EM_VARIANCE_FLOOR);
            }
        }
    }
    let labels = (0..n)
        .map(|i| {
            let row = &resp[i * k..(i + 1) * k];
            (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let sigmas = vars.iter().map(|v| [v[0].sqrt(), v[1].sqrt()]).collect();
    Ok(EmFit { params: MogParams { pi, means, sigmas }, responsibilities: resp, labels, ll_trace })
}

/// Aggregate metrics over an evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean per-point log-likelihood; absent for density-free models.
    pub ll: Option<f64>,
    pub ari: f64,
    pub nmi: f64,
    pub k_mae: f64,
    pub time_per_dataset_seconds: f64,
    pub n_datasets: usize,
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    /// One `key=value` per line; configuration keys are prefixed with `config.`.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        match self.ll {
            Some(ll) => out.push_str(&format!("ll={ll}\n")),
            None => out.push_str("ll=none\n"),
        }
        out.push_str(&format!("ari={}\nnmi={}\nk_mae={}\n", self.ari, self.nmi, self.k_mae));
        out.push_str(&format!("time_per_dataset_seconds={}\nn_datasets={}\n", self.time_per_dataset_seconds, self.n_datasets));
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::datagen::{DataKind, Generator, Truth};

    /// Every set partition of `n` points as restricted-growth strings.
    pub(crate) fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        fn grow(prefix: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            for l in 0..=max + 1 {
                prefix.push(l);
                grow(prefix, n, max.max(l), out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        if n > 0 {
            grow(&mut vec![0], n, 0, &mut out);
        }
        out
    }

    /// Pair-counting ARI straight from the definition.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
                both += (sa && sb) as u8 as f64;
                in_a += sa as u8 as f64;
                in_b += sb as u8 as f64;
                total += 1.0;
            }
        }
        let expected = in_a * in_b / total;
        let max = 0.5 * (in_a + in_b);
        if max == expected {
            1.0
        } else {
            (both - expected) / (max - expected)
        }
    }

    /// Entropies and mutual information as per-point averages of log cell ratios.
    fn nmi_by_points(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let size = |p: &[usize], i: usize| p.iter().filter(|&&l| l == p[i]).count() as f64;
        let joint = |i: usize| (0..a.len()).filter(|&j| a[j] == a[i] && b[j] == b[i]).count() as f64;
        let (mut ha, mut hb, mut mi) = (0.0, 0.0, 0.0);
        for i in 0..a.len() {
            ha -= (size(a, i) / n).ln() / n;
            hb -= (size(b, i) / n).ln() / n;
            mi += (n * joint(i) / (size(a, i) * size(b, i))).ln() / n;
        }
        if ha == 0.0 && hb == 0.0 {
            return 1.0;
        }
        mi / (0.5 * (ha + hb))
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 1, 2, 2, 1], &[3, 3, 3, 3, 3]).unwrap(), 0.0);
        assert!(matches!(ari(&[0, 1], &[0]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 2], &[1, 1, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[4, 4, 4], &[1, 1, 1]).unwrap(), 1.0);
        assert!(nmi(&[], &[]).is_err());
    }

    #[test]
    fn k_mae_examples() {
        assert_eq!(k_mae(&[2, 3], &[2, 3]).unwrap(), 0.0);
        assert_eq!(k_mae(&[4, 4], &[3, 6]).unwrap(), 1.5);
        assert!(k_mae(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn metrics_match_brute_force_on_all_partitions_of_six_points() {
        let parts = all_partitions(6);
        assert_eq!(parts.len(), 203);
        for a in &parts {
            for b in &parts {
                assert!((ari(a, b).unwrap() - ari_by_pairs(a, b)).abs() < 1e-10);
                assert!((nmi(a, b).unwrap() - nmi_by_points(a, b)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nmi_matches_brute_force_on_random_twenty_point_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..20).map(|_| rng.random_range(0..5)).collect();
            assert!((nmi(&a, &b).unwrap() - nmi_by_points(&a, &b)).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_relabel_invariant(
            a in prop::collection::vec(0usize..4, 2..30),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..3)).collect();
            let relabel: Vec<usize> = b.iter().map(|&l| 10 + (l * 7) % 3 * 5).collect();
            prop_assert_eq!(ari(&a, &b).unwrap().to_bits(), ari(&a, &relabel).unwrap().to_bits());
            prop_assert_eq!(nmi(&a, &b).unwrap().to_bits(), nmi(&a, &relabel).unwrap().to_bits());
            prop_assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
            let r = ari(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            let m = nmi(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn em_single_component_is_sample_statistics() {
        let x = [[0.0, 1.0], [2.0, 3.0], [4.0, -1.0], [1.0, 1.0]];
        let fit = em_mog_fit(&x, 1, 0).unwrap();
        let mean = [7.0 / 4.0, 1.0];
        let var = [x.iter().map(|p| (p[0] - mean[0]).powi(2)).sum::<f64>() / 4.0, x.iter().map(|p| (p[1] - mean[1]).powi(2)).sum::<f64>() / 4.0];
        for d in 0..2 {
            assert!((fit.params.means[0][d] - mean[d]).abs() < 1e-12);
            assert!((fit.params.sigmas[0][d].powi(2) - var[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn em_log_likelihood_never_decreases_and_is_deterministic() {
        let g = Generator::new(DataKind::Mog, 500, 4).unwrap();
        for s in 0..5 {
            let d = g.dataset(1, s);
            let fit = em_mog_fit(&d.points, d.k, 9).unwrap();
            for w in fit.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{:?}", fit.ll_trace);
            }
            assert_eq!(fit, em_mog_fit(&d.points, d.k, 9).unwrap());
            for row in fit.responsibilities.chunks(d.k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn em_recovers_well_separated_clusters() {
        let g = Generator::new(DataKind::Mog, 1000, 4).unwrap();
        let mut checked = 0;
        for s in 0..200 {
            let d = g.dataset(4, s);
            let Truth::Mog(t) = &d.truth else { unreachable!() };
            let separated = (0..d.k).all(|i| (0..i).all(|j| sq_dist(t.means[i], t.means[j]).sqrt() > 3.0));
            if !separated || d.k < 2 {
                continue;
            }
            let best = (0..5).map(|seed| em_mog_fit(&d.points, d.k, seed).unwrap()).max_by(|a, b| a.ll_trace.last().partial_cmp(&b.ll_trace.last()).unwrap()).unwrap();
            assert!(ari(&d.labels, &best.labels).unwrap() >= 0.99, "dataset {s}");
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn em_rejects_bad_k() {
        assert!(em_mog_fit(&[[0.0, 0.0]], 2, 0).is_err());
        assert!(em_mog_fit(&[[0.0, 0.0]], 0, 0).is_err());
    }

    #[test]
    fn report_formats() {
        let mut config = BTreeMap::new();
        config.insert("model".to_string(), "mlf".to_string());
        let r = MetricsReport { ll: Some(-0.7), ari: 0.98, nmi: 0.97, k_mae: 0.1, time_per_dataset_seconds: 0.01, n_datasets: 10, config };
        let kv = r.to_key_value();
        assert!(kv.lines().all(|l| l.split_once('=').is_some()));
        assert!(kv.contains("ari=0.98\n") && kv.contains("config.model=mlf\n"));
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
