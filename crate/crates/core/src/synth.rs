//! Seeded synthetic feature maps with quadrant-local class signal and
//! shared background clutter.
//!
//! Every ID example places `signal_quadrant_strength * mu_y` (plus position
//! noise) at each position of one randomly chosen `H/2 x W/2` quadrant. All
//! other positions hold `clutter_strength * (p + xi)` for a clutter
//! prototype `p` drawn per position from a class-independent pool, plus
//! position noise. The global mean is therefore clutter dominated while one
//! region is class discriminative. OOD examples use held-out directions.

use rand::Rng as _;

use crate::error::{contract, Result};
use crate::features::{FeatureDataset, FeatureMap, MapShape, NO_LABEL};
use crate::rng::{self, standard_normal, streams, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    /// Training examples per ID class.
    pub per_class: usize,
    /// ID test examples per ID class.
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub signal_quadrant_strength: f64,
    pub clutter_strength: f64,
    /// Std of the isotropic noise added to every position.
    pub position_noise: f64,
    pub clutter_prototypes: usize,
    pub ood_classes: usize,
    /// OOD test examples per held-out class.
    pub ood_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 50,
            test_per_class: 50,
            height: 4,
            width: 4,
            channels: 8,
            signal_quadrant_strength: 3.0,
            clutter_strength: 2.0,
            position_noise: 0.3,
            clutter_prototypes: 4,
            ood_classes: 1,
            ood_per_class: 200,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits<T> {
    pub train: FeatureDataset<T>,
    pub id_test: FeatureDataset<T>,
    pub ood_test: FeatureDataset<T>,
}

struct Layout {
    directions: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
}

/// Unit directions, Gram-Schmidt orthogonalized while the count fits in `dim`.
fn directions(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

fn example<T: Scalar>(
    spec: &SynthSpec,
    layout: &Layout,
    direction: &[f64],
    label: i32,
    rng: &mut Rng,
) -> Result<FeatureMap<T>> {
    let shape = MapShape::new(spec.height, spec.width, spec.channels)?;
    let (qh, qw) = (spec.height / 2, spec.width / 2);
    let quadrant = rng.random_range(0..4usize);
    let (q_row, q_col) = (quadrant / 2, quadrant % 2);
    let mut values = Vec::with_capacity(shape.len());
    for r in 0..spec.height {
        for c in 0..spec.width {
            let in_signal = r / qh == q_row && c / qw == q_col;
            if in_signal {
                for &d in direction {
                    let v = spec.signal_quadrant_strength * d + spec.position_noise * standard_normal(rng);
                    values.push(T::lit(v as f32 as f64));
                }
            } else {
                let p = &layout.prototypes[rng.random_range(0..layout.prototypes.len())];
                for &pd in p {
                    let v = spec.clutter_strength * (pd + standard_normal(rng))
                        + spec.position_noise * standard_normal(rng);
                    values.push(T::lit(v as f32 as f64));
                }
            }
        }
    }
    FeatureMap::new(shape, values, label)
}

/// Generates train / ID-test / OOD-test splits. Values are rounded to `f32`
/// so a save/load cycle reproduces the dataset exactly.
pub fn gen_synthetic<T: Scalar>(spec: &SynthSpec) -> Result<SynthSplits<T>> {
    contract!(
        spec.height.is_multiple_of(2) && spec.width.is_multiple_of(2) && spec.height >= 2 && spec.width >= 2,
        "synthetic grid must have even H and W, got {}x{}",
        spec.height,
        spec.width
    );
    contract!(spec.classes >= 2, "need at least 2 ID classes, got {}", spec.classes);
    contract!(spec.channels >= 1, "channels must be positive");
    contract!(spec.clutter_prototypes >= 1, "need at least one clutter prototype");

    let mut layout_rng = rng::stream(spec.seed, streams::SYNTH_LAYOUT);
    let directions = directions(spec.classes + spec.ood_classes, spec.channels, &mut layout_rng);
    let prototypes = (0..spec.clutter_prototypes)
        .map(|_| (0..spec.channels).map(|_| standard_normal(&mut layout_rng)).collect())
        .collect();
    let layout = Layout {
        directions,
        prototypes,
    };
    let shape = MapShape::new(spec.height, spec.width, spec.channels)?;

    let id_split = |stream: u64, per_class: usize, split: &str| -> Result<FeatureDataset<T>> {
        let mut r = rng::stream(spec.seed, stream);
        let mut maps = Vec::with_capacity(spec.classes * per_class);
        for class in 0..spec.classes {
            for _ in 0..per_class {
                maps.push(example(spec, &layout, &layout.directions[class], class as i32, &mut r)?);
            }
        }
        Ok(tag(FeatureDataset::new(shape, maps, spec.classes as u32)?, spec, split))
    };
    let train = id_split(streams::SYNTH_TRAIN, spec.per_class, "train")?;
    let id_test = id_split(streams::SYNTH_ID_TEST, spec.test_per_class, "id_test")?;

    let mut r = rng::stream(spec.seed, streams::SYNTH_OOD_TEST);
    let mut maps = Vec::with_capacity(spec.ood_classes * spec.ood_per_class);
    for o in 0..spec.ood_classes {
        let dir = &layout.directions[spec.classes + o];
        for _ in 0..spec.ood_per_class {
            maps.push(example(spec, &layout, dir, NO_LABEL, &mut r)?);
        }
    }
    let ood_test = tag(FeatureDataset::new(shape, maps, spec.classes as u32)?, spec, "ood_test");
    Ok(SynthSplits {
        train,
        id_test,
        ood_test,
    })
}

fn tag<T: Scalar>(ds: FeatureDataset<T>, spec: &SynthSpec, split: &str) -> FeatureDataset<T> {
    ds.with_metadata("source", "synthetic")
        .with_metadata("split", split)
        .with_metadata("seed", spec.seed.to_string())
        .with_metadata("signal_quadrant_strength", spec.signal_quadrant_strength.to_string())
        .with_metadata("clutter_strength", spec.clutter_strength.to_string())
        .with_metadata("position_noise", spec.position_noise.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::global_pool;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            per_class: 5,
            test_per_class: 3,
            ood_per_class: 4,
            ..SynthSpec::default()
        };
        let a = gen_synthetic::<f64>(&spec).unwrap();
        let b = gen_synthetic::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic::<f64>(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_sizes_and_labels() {
        let spec = SynthSpec {
            per_class: 3,
            test_per_class: 2,
            ood_per_class: 5,
            ood_classes: 2,
            ..SynthSpec::default()
        };
        let s = gen_synthetic::<f32>(&spec).unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.id_test.len(), 8);
        assert_eq!(s.ood_test.len(), 10);
        assert!(s.train.is_labeled());
        assert!(s.ood_test.labels().iter().all(|&l| l == NO_LABEL));
    }

    #[test]
    fn odd_grid_and_single_class_rejected() {
        let odd = SynthSpec {
            height: 3,
            ..SynthSpec::default()
        };
        assert!(gen_synthetic::<f64>(&odd).is_err());
        let one = SynthSpec {
            classes: 1,
            ..SynthSpec::default()
        };
        assert!(gen_synthetic::<f64>(&one).is_err());
    }

    #[test]
    fn signal_lives_in_one_quadrant() {
        let spec = SynthSpec {
            clutter_strength: 0.0,
            position_noise: 0.0,
            per_class: 4,
            test_per_class: 1,
            ood_per_class: 1,
            ..SynthSpec::default()
        };
        let s = gen_synthetic::<f64>(&spec).unwrap();
        for m in s.train.maps() {
            let nonzero = m.positions().filter(|p| p.iter().any(|v| *v != 0.0)).count();
            assert_eq!(nonzero, 4);
            let g = global_pool(m);
            let n: f64 = g.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 3.0 / 4.0).abs() < 1e-5);
        }
    }
}
