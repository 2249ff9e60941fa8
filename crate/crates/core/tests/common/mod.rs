#![allow(dead_code)]

use mode_core::alpa::grad::{Objective, ObjectiveSpec};
use mode_core::rng::{self, Rng};
use mode_core::{alpa_loss, pool2x2, supcon_loss, AlpaBatch, EncoderParams, FeatureMap, MapShape, ProjectionHeads};
use rand::Rng as _;

pub fn gaussian(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::standard_normal(r)).collect()
}

pub fn random_map(r: &mut Rng, h: usize, w: usize, e: usize, label: i32) -> FeatureMap<f64> {
    FeatureMap::new(MapShape::new(h, w, e).unwrap(), gaussian(r, h * w * e), label).unwrap()
}

pub fn random_batch(r: &mut Rng, labels: &[i32], h: usize, w: usize, e: usize) -> AlpaBatch<f64> {
    AlpaBatch::new(labels.iter().map(|&y| random_map(r, h, w, e, y)).collect()).unwrap()
}

/// Encoder and heads with every entry (biases included) drawn at random.
pub fn random_params(r: &mut Rng, raw: usize, dim: usize, head: usize) -> (EncoderParams<f64>, ProjectionHeads<f64>) {
    let mut enc = EncoderParams::init(raw, dim, r);
    let mut heads = ProjectionHeads::init(dim, head, r);
    for t in enc.tensors_mut() {
        t.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
    }
    for t in heads.tensors_mut() {
        t.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
    }
    (enc, heads)
}

/// Objective computed through the public forward functions only.
pub fn forward_objective(
    batch: &AlpaBatch<f64>,
    enc: &EncoderParams<f64>,
    heads: &ProjectionHeads<f64>,
    spec: &ObjectiveSpec<f64>,
) -> f64 {
    let views = batch
        .views()
        .iter()
        .map(|v| {
            let l = enc.apply(v).unwrap();
            if spec.prepool {
                pool2x2(&l).unwrap()
            } else {
                l
            }
        })
        .collect();
    let b = AlpaBatch::new(views).unwrap();
    let local = || alpa_loss(&b, heads, spec.tau).unwrap().value;
    let base = || supcon_loss(&b, &heads.w_v, spec.tau).unwrap().value;
    match spec.objective {
        Objective::Finetune => local(),
        Objective::Base => base(),
        Objective::Train { lambda } => base() + lambda * local(),
    }
}

/// Central-difference gradient in the same tensor order as `Gradients::tensors`.
pub fn numeric_gradient(
    batch: &AlpaBatch<f64>,
    enc: &EncoderParams<f64>,
    heads: &ProjectionHeads<f64>,
    spec: &ObjectiveSpec<f64>,
) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = enc
        .tensors()
        .iter()
        .map(|t| t.len())
        .chain(heads.tensors().iter().map(|t| t.len()))
        .collect();
    let mut out = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for c in 0..n {
            let eval = |sign: f64| {
                let (mut e2, mut h2) = (enc.clone(), heads.clone());
                let slot: &mut f64 = if t < 2 {
                    &mut e2.tensors_mut()[t][c]
                } else {
                    &mut h2.tensors_mut()[t - 2][c]
                };
                let step = 1e-5 * (1.0 + slot.abs());
                *slot += sign * step;
                (forward_objective(batch, &e2, &h2, spec), step)
            };
            let (plus, step) = eval(1.0);
            let (minus, _) = eval(-1.0);
            g.push((plus - minus) / (2.0 * step));
        }
        out.push(g);
    }
    out
}

/// Largest violation of `|a - n| <= max(1e-6, 1e-4 |n|)`, as a ratio (<= 1 passes).
pub fn worst_violation(analytic: &[&[f64]], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (x, y) in a.iter().zip(n) {
            let tol = 1e-6f64.max(1e-4 * y.abs());
            worst = worst.max((x - y).abs() / tol);
        }
    }
    worst
}

pub fn spec(objective: Objective<f64>, prepool: bool) -> ObjectiveSpec<f64> {
    ObjectiveSpec {
        objective,
        tau: 0.1,
        prepool,
    }
}
