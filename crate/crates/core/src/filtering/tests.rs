use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::tensor::gradcheck::check_param_gradients;

fn tiny(kind: FilterKind, density: DensityKind) -> FilterConfig {
    FilterConfig { dim: 8, heads: 2, inducing: 3, encoder_depth: 1, decoder_depth: 1, ..FilterConfig::new(kind, density) }
}

fn build<T: Scalar>(config: FilterConfig, seed: u64) -> (ParamStore<T>, FilterModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = FilterModel::new(config, &mut store, &mut rng).unwrap();
    (store, model)
}

fn points<T: Scalar>(batch: usize, n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 2.0).unwrap();
    Tensor::from_fn(vec![batch, n, 2], |_| T::lit(d.sample(&mut rng)))
}

fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize], width: usize) -> Tensor<T> {
    let n = perm.len();
    Tensor::from_fn(x.shape().to_vec(), |idx| {
        let (b, rest) = (idx / (n * width), idx % (n * width));
        x.data()[(b * n + perm[rest / width]) * width + rest % width]
    })
}

const PERM: [usize; 6] = [4, 2, 0, 5, 1, 3];

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[test]
fn forward_shapes_and_range() {
    for (kind, density, width) in [(FilterKind::Mlf, DensityKind::Gaussian, Some(4)), (FilterKind::Mlf, DensityKind::None, None)] {
        let (store, model) = build::<f32>(tiny(kind, density), 1);
        let x = SetBatch::dense(points(3, 5, 2)).unwrap();
        let out = model.infer(&store, &x, None).unwrap();
        assert_eq!(out.memberships.shape(), &[3, 5]);
        assert!(out.memberships.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert_eq!(out.theta.map(|t| t.shape()[1]), width);
    }
}

#[test]
fn mlf_forward_is_permutation_equivariant() {
    let (store, model) = build::<f32>(tiny(FilterKind::Mlf, DensityKind::Gaussian), 3);
    let x = points::<f32>(2, 6, 4);
    let live = vec![true, true, false, true, true, true, true, false, true, true, true, true];
    let plive: Vec<bool> = (0..12).map(|i| live[(i / 6) * 6 + PERM[i % 6]]).collect();
    let a = model.infer(&store, &SetBatch::new(x.clone(), live.clone()).unwrap(), None).unwrap();
    let b = model.infer(&store, &SetBatch::new(permute(&x, &PERM, 2), plive).unwrap(), None).unwrap();
    assert!(a.theta.unwrap().max_abs_diff(&b.theta.unwrap()) <= 1e-5);
    let expected = permute(&a.memberships.reshape(vec![2, 6, 1]).unwrap(), &PERM, 1).reshape(vec![2, 6]).unwrap();
    for i in 0..12 {
        if live[(i / 6) * 6 + PERM[i % 6]] {
            assert!((expected.data()[i] - b.memberships.data()[i]).abs() <= 1e-5);
        }
    }
}

#[test]
fn af_forward_is_permutation_equivariant_with_remapped_anchor() {
    let (store, model) = build::<f32>(tiny(FilterKind::Af, DensityKind::Gaussian), 5);
    let x = points::<f32>(2, 6, 6);
    let anchors = [1, 4];
    let inv = inverse(&PERM);
    let moved = [inv[1], inv[4]];
    let a = model.infer(&store, &SetBatch::dense(x.clone()).unwrap(), Some(&anchors)).unwrap();
    let b = model.infer(&store, &SetBatch::dense(permute(&x, &PERM, 2)).unwrap(), Some(&moved)).unwrap();
    assert!(a.theta.unwrap().max_abs_diff(&b.theta.unwrap()) <= 1e-5);
    let expected = permute(&a.memberships.reshape(vec![2, 6, 1]).unwrap(), &PERM, 1).reshape(vec![2, 6]).unwrap();
    assert!(expected.max_abs_diff(&b.memberships) <= 1e-5);
}

#[test]
fn duplicated_rows_get_equal_memberships() {
    let (store, model) = build::<f32>(tiny(FilterKind::Mlf, DensityKind::None), 7);
    let mut x = points::<f32>(1, 5, 8);
    let row: Vec<f32> = x.data()[2..4].to_vec();
    x.data_mut()[8..10].copy_from_slice(&row);
    let out = model.infer(&store, &SetBatch::dense(x).unwrap(), None).unwrap();
    assert!((out.memberships.data()[1] - out.memberships.data()[4]).abs() <= 1e-5);
}

#[test]
fn forward_rejects_empty_sets_and_bad_anchors() {
    let (store, mlf) = build::<f32>(tiny(FilterKind::Mlf, DensityKind::Gaussian), 9);
    let x = SetBatch::new(points(2, 3, 10), vec![true, true, true, false, false, false]).unwrap();
    assert!(matches!(mlf.infer(&store, &x, None), Err(Error::Contract(_))));
    assert!(matches!(mlf.infer(&store, &SetBatch::dense(points(1, 3, 10)).unwrap(), Some(&[0])), Err(Error::Contract(_))));

    let (store, af) = build::<f32>(tiny(FilterKind::Af, DensityKind::Gaussian), 11);
    let x = SetBatch::new(points(1, 3, 12), vec![true, false, true]).unwrap();
    assert!(matches!(af.infer(&store, &x, Some(&[1])), Err(Error::Contract(_))));
    assert!(matches!(af.infer(&store, &x, None), Err(Error::Contract(_))));
    assert!(af.infer(&store, &x, Some(&[2])).is_ok());
}

/// Scalar reimplementation of the per-cluster inner term.
fn inner_term(logits: &[f64], lp: Option<&[f64]>, labels: &[Option<usize>], j: usize, scale: BceScale) -> f64 {
    let live = labels.iter().filter(|l| l.is_some()).count() as f64;
    let mut bce = 0.0;
    let (mut ll, mut members) = (0.0, 0.0);
    for (i, l) in labels.iter().enumerate() {
        let Some(y) = l else { continue };
        let m = 1.0 / (1.0 + (-logits[i]).exp());
        let t = if *y == j { 1.0 } else { 0.0 };
        bce -= t * m.ln() + (1.0 - t) * (1.0 - m).ln();
        if *y == j {
            members += 1.0;
            ll += lp.map_or(0.0, |p| p[i]);
        }
    }
    let bce = if scale == BceScale::Mean { bce / live } else { bce };
    bce - ll / members
}

struct Case {
    data: LabeledSet<f64>,
    logits: Tensor<f64>,
    theta: Tensor<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    let (batch, n) = (2, 7);
    let live = vec![true, true, true, true, false, true, true, true, true, true, true, true, true, false];
    let labels: Vec<Option<usize>> =
        vec![Some(0), Some(1), Some(2), Some(1), None, Some(0), Some(2), Some(1), Some(0), Some(0), Some(1), Some(0), Some(1), None];
    let x = SetBatch::new(points(batch, n, seed + 1), live).unwrap();
    let data = LabeledSet::new(x, labels, vec![3, 2]).unwrap();
    let logits = Tensor::from_fn(vec![batch, n], |_| d.sample(&mut rng));
    let theta = Tensor::from_fn(vec![batch, 4], |_| 0.5 * d.sample(&mut rng));
    Case { data, logits, theta }
}

fn eval_mlf(c: &Case, density: bool, scale: BceScale) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let out = FilterVars { theta: Some(g.constant(c.theta.clone())), logits: g.constant(c.logits.clone()) };
    let loss = mlf_loss(&mut g, out, &c.data, density.then_some(&Density::Gaussian), scale).unwrap();
    g.value(loss).item()
}

fn eval_af(c: &Case, anchors: &[usize], density: bool, scale: BceScale) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let out = FilterVars { theta: Some(g.constant(c.theta.clone())), logits: g.constant(c.logits.clone()) };
    let loss = af_loss(&mut g, out, &c.data, anchors, density.then_some(&Density::Gaussian), scale).unwrap();
    g.value(loss).item()
}

fn gaussian_lp(c: &Case, b: usize) -> Vec<f64> {
    let th = crate::density::GaussianTheta::from_slice(&c.theta.data()[b * 4..b * 4 + 4]).unwrap();
    let x = c.data.points.values().data();
    let n = c.data.points.len();
    (0..n).map(|i| crate::density::gaussian_log_density([x[(b * n + i) * 2], x[(b * n + i) * 2 + 1]], &th)).collect()
}

#[test]
fn losses_match_scalar_oracle() {
    let c = case(20);
    let n = c.data.points.len();
    for density in [false, true] {
        for scale in [BceScale::Mean, BceScale::Sum] {
            let mut mlf = 0.0;
            let mut af = 0.0;
            let anchors = [2, 3];
            for b in 0..2 {
                let lp = gaussian_lp(&c, b);
                let lp = density.then_some(lp.as_slice());
                let logits = &c.logits.data()[b * n..(b + 1) * n];
                let labels = &c.data.labels[b * n..(b + 1) * n];
                let terms: Vec<f64> = (0..c.data.clusters[b]).map(|j| inner_term(logits, lp, labels, j, scale)).collect();
                mlf += terms.iter().copied().fold(f64::INFINITY, f64::min) / 2.0;
                af += terms[labels[anchors[b]].unwrap()] / 2.0;
            }
            assert!((eval_mlf(&c, density, scale) - mlf).abs() < 1e-10);
            assert!((eval_af(&c, &anchors, density, scale) - af).abs() < 1e-10);
        }
    }
}

#[test]
fn mlf_loss_is_exactly_label_permutation_invariant() {
    let c = case(21);
    let base = eval_mlf(&c, true, BceScale::Mean);
    let n = c.data.points.len();
    for perm in [[1, 2, 0], [2, 1, 0], [0, 2, 1]] {
        // The second set has two clusters; swap them.
        let labels = c.data.labels.iter().enumerate().map(|(at, l)| l.map(|j| if at < n { perm[j] } else { 1 - j })).collect();
        let data = LabeledSet::new(c.data.points.clone(), labels, c.data.clusters.clone()).unwrap();
        let moved = Case { data, logits: c.logits.clone(), theta: c.theta.clone() };
        assert_eq!(eval_mlf(&moved, true, BceScale::Mean).to_bits(), base.to_bits());
    }
}

#[test]
fn af_loss_ignores_labels_outside_the_anchor_cluster() {
    let c = case(22);
    let anchors = [1, 0];
    let base = eval_af(&c, &anchors, true, BceScale::Mean);
    let n = c.data.points.len();
    // Swap clusters 0 and 2 in the first set; the anchor sits in cluster 1.
    let labels = c
        .data
        .labels
        .iter()
        .enumerate()
        .map(|(at, l)| l.map(|j| if at < n && j != 1 { 2 - j } else { j }))
        .collect();
    let data = LabeledSet::new(c.data.points.clone(), labels, c.data.clusters.clone()).unwrap();
    let moved = Case { data, logits: c.logits.clone(), theta: c.theta.clone() };
    assert_eq!(eval_af(&moved, &anchors, true, BceScale::Mean).to_bits(), base.to_bits());
}

#[test]
fn perfect_indicator_memberships_cost_nothing() {
    let mut c = case(23);
    let n = c.data.points.len();
    for at in 0..2 * n {
        c.logits.data_mut()[at] = if c.data.labels[at] == Some(0) { 60.0 } else { -60.0 };
    }
    assert!(eval_mlf(&c, false, BceScale::Sum) < 1e-20);
    assert!(eval_af(&c, &[0, 1], false, BceScale::Sum) < 1e-20);
}

#[test]
fn single_cluster_at_mle_costs_the_mle_nll() {
    let x = Tensor::new(vec![1, 4, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
    let data = LabeledSet::new(SetBatch::dense(x).unwrap(), vec![Some(0); 4], vec![1]).unwrap();
    // Mean (1, 1), variance (1, 1).
    let c = Case { data, logits: Tensor::full(vec![1, 4], 60.0), theta: Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap() };
    let expected = (2.0 * std::f64::consts::PI).ln() + 1.0;
    assert!((eval_mlf(&c, true, BceScale::Mean) - expected).abs() < 1e-12);
    assert!((eval_af(&c, &[3], true, BceScale::Mean) - expected).abs() < 1e-12);
}

#[test]
fn labeled_set_rejects_inconsistent_labels() {
    let x = SetBatch::new(points::<f64>(1, 3, 30), vec![true, true, false]).unwrap();
    assert!(LabeledSet::new(x.clone(), vec![Some(0), Some(1), None], vec![2]).is_ok());
    assert!(LabeledSet::new(x.clone(), vec![Some(0), Some(0), None], vec![2]).is_err());
    assert!(LabeledSet::new(x.clone(), vec![Some(0), None, None], vec![1]).is_err());
    assert!(LabeledSet::new(x, vec![Some(0), Some(1), Some(0)], vec![2]).is_err());
}

fn tiny_data() -> LabeledSet<f64> {
    let x = points::<f64>(1, 6, 40);
    let labels = vec![Some(0), Some(1), Some(1), Some(0), Some(1), Some(0)];
    LabeledSet::new(SetBatch::dense(x).unwrap(), labels, vec![2]).unwrap()
}

#[test]
fn mlf_gradients_pass_check() {
    for density in [DensityKind::Gaussian, DensityKind::None] {
        let config = FilterConfig { dim: 4, heads: 2, inducing: 2, encoder_depth: 1, decoder_depth: 1, ..FilterConfig::new(FilterKind::Mlf, density) };
        let (store, model) = build::<f64>(config, 41);
        let data = tiny_data();
        let check = check_param_gradients(&store, 1e-5, |g| {
            let out = model.forward(g, &data.points, None)?;
            model.mlf_loss(g, out, &data)
        })
        .unwrap();
        assert!(check.max_error() < 1e-4, "{density:?} {:?}", check.relative_errors);
    }
}

#[test]
fn af_gradients_pass_check() {
    let config = FilterConfig { dim: 4, heads: 2, inducing: 2, encoder_depth: 1, decoder_depth: 1, ..FilterConfig::new(FilterKind::Af, DensityKind::Gaussian) };
    let (store, model) = build::<f64>(config, 42);
    let data = tiny_data();
    let check = check_param_gradients(&store, 1e-5, |g| {
        let out = model.forward(g, &data.points, Some(&[4]))?;
        model.af_loss(g, out, &data, &[4])
    })
    .unwrap();
    assert!(check.max_error() < 1e-4, "{:?}", check.relative_errors);
}

proptest! {
    #[test]
    fn density_free_losses_are_non_negative(seed in 0u64..1000, logits in prop::collection::vec(-30.0f64..30.0, 14)) {
        let mut c = case(seed);
        c.logits = Tensor::new(vec![2, 7], logits).unwrap();
        prop_assert!(eval_mlf(&c, false, BceScale::Mean) >= 0.0);
        prop_assert!(eval_af(&c, &[0, 0], false, BceScale::Sum) >= 0.0);
    }
}
