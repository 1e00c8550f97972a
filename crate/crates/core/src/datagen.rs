//! Seeded synthetic clustering benchmarks.
//!
//! Every dataset is a pure function of `(n_max, k_max, seed, stream)`: the
//! generator is a ChaCha8 stream keyed by `seed` with the stream id selecting
//! the dataset, so datasets can be produced in any order or in parallel.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::LabeledSet;
use crate::scalar::Scalar;
use crate::set_blocks::SetBatch;
use crate::tensor::Tensor;

/// Dirichlet concentration of the mixing weights.
pub const DIRICHLET_ALPHA: f64 = 1.0;
/// Component means are drawn from `𝒩(0, MEAN_VARIANCE · I)`.
pub const MEAN_VARIANCE: f64 = 9.0;
/// Location of `log σ`.
pub const LOG_SIGMA_MEAN: f64 = -1.386_294_361_119_890_6; // ln 0.25
/// Variance of `log σ`.
pub const LOG_SIGMA_VARIANCE: f64 = 0.01;
/// Variance of the warp axes `a` and `b`.
pub const WARP_AXIS_VARIANCE: f64 = std::f64::consts::SQRT_2;
/// Smallest dataset size as a fraction of `n_max`.
pub const MIN_SIZE_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mog,
    Warped,
}

impl DataKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mog" => Ok(Self::Mog),
            "warped" => Ok(Self::Warped),
            other => Err(Error::Config(format!("unknown data kind '{other}' (expected mog or warped)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mog => "mog",
            Self::Warped => "warped",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MogParams {
    pub pi: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub sigmas: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpParams {
    pub pi: Vec<f64>,
    /// Per-cluster 1-D source of the unscaled angle `r̃`.
    pub radial_means: Vec<f64>,
    pub radial_sigmas: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub rotations: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

impl WarpParams {
    /// Warped point of cluster `j` at angle `r`, before rotation and offset.
    pub fn shape(&self, j: usize, r: f64) -> [f64; 2] {
        let (a, b) = (self.a[j], self.b[j]);
        let norm = (a * a + b * b).sqrt();
        [a * r.cos() + 0.1 * b * r.cos() / norm, b * r.sin() + 0.1 * a * r.sin() / norm]
    }

    /// Rotation by the cluster's angle.
    pub fn rotate(&self, j: usize, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotations[j].sin_cos();
        [c * p[0] - s * p[1], s * p[0] + c * p[1]]
    }

    pub fn place(&self, j: usize, r: f64) -> [f64; 2] {
        let [x, y] = self.rotate(j, self.shape(j, r));
        [x + self.offsets[j][0], y + self.offsets[j][1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Truth {
    Mog(MogParams),
    Warped(WarpParams),
}

/// One generated dataset with 0-based labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub k: usize,
    pub truth: Truth,
    /// Label draws rejected because some cluster was empty.
    pub resamples: usize,
}

impl GeneratedDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Generator for one benchmark family at a given scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Generator {
    pub kind: DataKind,
    pub n_max: usize,
    pub k_max: usize,
}

/// The random stream for dataset `stream` under `seed`.
pub fn dataset_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Generator {
    pub fn new(kind: DataKind, n_max: usize, k_max: usize) -> Result<Self> {
        if n_max < 4 || k_max < 1 {
            return Err(Error::Config(format!("need n_max ≥ 4 and k_max ≥ 1, got ({n_max}, {k_max})")));
        }
        Ok(Self { kind, n_max, k_max })
    }

    pub fn min_size(&self) -> usize {
        (MIN_SIZE_FRACTION * self.n_max as f64).ceil() as usize
    }

    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min_size()..=self.n_max)
    }

    /// Dataset number `stream` under `seed`.
    pub fn dataset(&self, seed: u64, stream: u64) -> GeneratedDataset {
        let mut rng = dataset_rng(seed, stream);
        let n = self.sample_size(&mut rng);
        self.dataset_with_size(n, &mut rng)
    }

    /// A dataset of exactly `n` points.
    pub fn dataset_with_size<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> GeneratedDataset {
        let k = 1 + Binomial::new((self.k_max - 1) as u64, 0.5).expect("valid binomial").sample(rng) as usize;
        let k = k.min(n);
        let (pi, labels, resamples) = draw_labels(n, k, rng);
        match self.kind {
            DataKind::Mog => {
                let (means, sigmas) = draw_components::<2, _>(k, rng);
                let noise = Normal::new(0.0, 1.0).expect("unit normal");
                let points = labels
                    .iter()
                    .map(|&j| [means[j][0] + sigmas[j][0] * noise.sample(rng), means[j][1] + sigmas[j][1] * noise.sample(rng)])
                    .collect();
                GeneratedDataset { points, labels, k, truth: Truth::Mog(MogParams { pi, means, sigmas }), resamples }
            }
            DataKind::Warped => {
                let (radial_means, radial_sigmas) = draw_components::<1, _>(k, rng);
                let axis = Normal::new(0.0, WARP_AXIS_VARIANCE.sqrt()).expect("axis normal");
                let a: Vec<f64> = (0..k).map(|_| axis.sample(rng)).collect();
                let b: Vec<f64> = (0..k).map(|_| axis.sample(rng)).collect();
                let rotations = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                let centre = (k as f64).min(4.0);
                let unit = Normal::new(0.0, 1.0).expect("unit normal");
                let offsets = (0..k).map(|_| [centre + unit.sample(rng), centre + unit.sample(rng)]).collect();
                let params = WarpParams {
                    pi,
                    radial_means: radial_means.iter().map(|m| m[0]).collect(),
                    radial_sigmas: radial_sigmas.iter().map(|s| s[0]).collect(),
                    a,
                    b,
                    rotations,
                    offsets,
                };
                let points = labels
                    .iter()
                    .map(|&j| {
                        let r = 0.8 * PI * (params.radial_means[j] + params.radial_sigmas[j] * unit.sample(rng));
                        params.place(j, r)
                    })
                    .collect();
                GeneratedDataset { points, labels, k, truth: Truth::Warped(params), resamples }
            }
        }
    }

    /// `size` datasets sharing one `n`, for training step `step`.
    pub fn training_batch(&self, seed: u64, step: u64, size: usize) -> Vec<GeneratedDataset> {
        let mut rng = dataset_rng(seed, step);
        let n = self.sample_size(&mut rng);
        (0..size).map(|_| self.dataset_with_size(n, &mut rng)).collect()
    }
}

fn draw_labels<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>, usize) {
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma");
    let mut resamples = 0;
    loop {
        let raw: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|g| g / total).collect();
        let labels: Vec<usize> = (0..n).map(|_| categorical(&pi, rng)).collect();
        let mut seen = vec![false; k];
        labels.iter().for_each(|&j| seen[j] = true);
        if seen.iter().all(|&s| s) {
            return (pi, labels, resamples);
        }
        resamples += 1;
    }
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            return j;
        }
    }
    p.len() - 1
}

/// Means `𝒩(0, 9I)` and per-dimension `σ ~ logNormal(log 0.25, 0.01)`.
fn draw_components<const D: usize, R: Rng + ?Sized>(k: usize, rng: &mut R) -> (Vec<[f64; D]>, Vec<[f64; D]>) {
    let mean = Normal::new(0.0, MEAN_VARIANCE.sqrt()).expect("mean normal");
    let log_sigma = Normal::new(LOG_SIGMA_MEAN, LOG_SIGMA_VARIANCE.sqrt()).expect("log-sigma normal");
    let means = (0..k).map(|_| std::array::from_fn(|_| mean.sample(rng))).collect();
    let sigmas = (0..k).map(|_| std::array::from_fn(|_| log_sigma.sample(rng).exp())).collect();
    (means, sigmas)
}

/// Mean over points of `log Σ_j π_j 𝒩(x; μ_j, diag σ_j²)`.
pub fn oracle_ll(points: &[[f64; 2]], truth: &MogParams) -> f64 {
    let total: f64 = points.iter().map(|&x| mixture_log_density(x, truth)).sum();
    total / points.len() as f64
}

pub fn mixture_log_density(x: [f64; 2], truth: &MogParams) -> f64 {
    let logs: Vec<f64> = (0..truth.pi.len())
        .map(|j| {
            let comp: f64 = (0..2)
                .map(|d| {
                    let s = truth.sigmas[j][d];
                    let z = (x[d] - truth.means[j][d]) / s;
                    -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * z * z
                })
                .sum();
            truth.pi[j].ln() + comp
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Packs equally sized datasets into a labeled training batch.
pub fn to_labeled_set<T: Scalar>(datasets: &[GeneratedDataset]) -> Result<LabeledSet<T>> {
    let n = datasets.first().map_or(0, |d| d.len());
    if let Some(d) = datasets.iter().find(|d| d.len() != n) {
        return Err(Error::Shape { op: "training batch", lhs: vec![n], rhs: vec![d.len()] });
    }
    let values = datasets.iter().flat_map(|d| d.points.iter().flat_map(|p| [T::lit(p[0]), T::lit(p[1])])).collect();
    let values = Tensor::new(vec![datasets.len(), n, 2], values)?;
    let labels = datasets.iter().flat_map(|d| d.labels.iter().map(|&l| Some(l))).collect();
    let clusters = datasets.iter().map(|d| d.k).collect();
    LabeledSet::new(SetBatch::dense(values)?, labels, clusters)
}

/// A dataset read from or written to the delimited-text format.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub set_id: u64,
    pub points: Vec<[f64; 2]>,
    /// 0-based labels when known.
    pub labels: Option<Vec<usize>>,
}

pub const CSV_HEADER: &str = "set_id,x1,x2,label";

/// Writes `set_id,x1,x2,label` rows; labels are written 1-based, blank when unknown.
pub fn write_csv<W: Write>(out: &mut W, sets: &[PointSet]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for s in sets {
        for (i, p) in s.points.iter().enumerate() {
            match &s.labels {
                Some(l) => writeln!(out, "{},{},{},{}", s.set_id, p[0], p[1], l[i] + 1)?,
                None => writeln!(out, "{},{},{},", s.set_id, p[0], p[1])?,
            }
        }
    }
    Ok(())
}

/// Reads the format written by [`write_csv`]. Rows are grouped by `set_id` in order of first appearance.
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<PointSet>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != CSV_HEADER {
        return Err(Error::Format(format!("expected header '{CSV_HEADER}', found '{header}'")));
    }
    let mut sets: Vec<PointSet> = Vec::new();
    let mut labelled: Vec<Vec<Option<usize>>> = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", row + 2));
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let set_id: u64 = fields[0].parse().map_err(|_| bad("bad set_id"))?;
        let x1: f64 = fields[1].parse().map_err(|_| bad("bad x1"))?;
        let x2: f64 = fields[2].parse().map_err(|_| bad("bad x2"))?;
        if !x1.is_finite() || !x2.is_finite() {
            return Err(bad("non-finite coordinate"));
        }
        let label = match fields[3] {
            "" => None,
            s => match s.parse::<usize>() {
                Ok(l) if l >= 1 => Some(l - 1),
                _ => return Err(bad("labels are positive integers")),
            },
        };
        let at = match sets.iter().position(|s| s.set_id == set_id) {
            Some(at) => at,
            None => {
                sets.push(PointSet { set_id, points: Vec::new(), labels: None });
                labelled.push(Vec::new());
                sets.len() - 1
            }
        };
        sets[at].points.push([x1, x2]);
        labelled[at].push(label);
    }
    for (s, l) in sets.iter_mut().zip(labelled) {
        s.labels = match (l.iter().all(Option::is_some), l.iter().all(Option::is_none)) {
            (true, _) => Some(l.into_iter().flatten().collect()),
            (_, true) => None,
            _ => return Err(Error::Format(format!("set {} mixes labelled and unlabelled rows", s.set_id))),
        };
    }
    Ok(sets)
}
