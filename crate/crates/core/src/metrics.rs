//! Detection metrics. Scores are distances: OOD is the positive class and
//! larger scores are more OOD.

use std::fmt;

use crate::error::{contract, Result};
use crate::features::{global_pool, FeatureDataset};
use crate::knn::normalize;
use crate::scalar::{dot, Scalar};
use crate::trainer::EncoderParams;

fn check_scores<T: Scalar>(id: &[T], ood: &[T]) -> Result<()> {
    contract!(!id.is_empty() && !ood.is_empty(), "metrics need both ID and OOD scores");
    contract!(
        id.iter().chain(ood).all(|s| s.is_finite()),
        "metrics need finite scores"
    );
    Ok(())
}

/// Fraction of OOD scores accepted as ID by the threshold that keeps the
/// target fraction of ID scores.
pub fn fpr_at_tpr<T: Scalar>(id: &[T], ood: &[T], tpr_target: f64) -> Result<f64> {
    check_scores(id, ood)?;
    let eps = crate::detector::select_threshold(id, tpr_target)?;
    let accepted = ood.iter().filter(|&&s| s < eps).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counted one half. Computed exactly from integer counts.
pub fn auroc<T: Scalar>(id: &[T], ood: &[T]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut ids = id.to_vec();
    ids.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    // Twice the Mann-Whitney statistic, so ties stay integral.
    let mut twice: u128 = 0;
    for &o in ood {
        let below = ids.partition_point(|&s| s < o);
        let not_above = ids.partition_point(|&s| s <= o);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC over descending thresholds, one point per distinct score plus (0,0).
/// `tpr` is the fraction of OOD flagged, `fpr` the fraction of ID flagged.
pub fn roc_curve<T: Scalar>(id: &[T], ood: &[T]) -> Result<Vec<RocPoint>> {
    check_scores(id, ood)?;
    let mut all: Vec<(T, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_id,
            tpr: tp as f64 / n_ood,
        });
    }
    Ok(points)
}

pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Nearest-centroid accuracy of normalized global vectors; ties go to the
/// lowest class.
pub fn id_accuracy<T: Scalar>(
    test: &FeatureDataset<T>,
    train: &FeatureDataset<T>,
    encoder: &EncoderParams<T>,
) -> Result<f64> {
    contract!(test.is_labeled() && train.is_labeled(), "accuracy needs labeled data");
    contract!(!test.is_empty(), "accuracy needs test examples");
    let classes = train.class_count() as usize;
    let dim = encoder.out_dim();
    let mut sums = vec![vec![T::zero(); dim]; classes];
    let mut seen = vec![false; classes];
    for m in train.maps() {
        let g = normalize(&global_pool(&encoder.apply(m)?).values)?;
        let c = m.label() as usize;
        seen[c] = true;
        for (s, v) in sums[c].iter_mut().zip(g) {
            *s = *s + v;
        }
    }
    let centroids: Vec<Option<Vec<T>>> = sums
        .into_iter()
        .zip(seen)
        .map(|(s, ok)| if ok { normalize(&s).ok() } else { None })
        .collect();
    let mut correct = 0usize;
    for m in test.maps() {
        let g = normalize(&global_pool(&encoder.apply(m)?).values)?;
        let mut best: Option<(usize, T)> = None;
        for (c, cen) in centroids.iter().enumerate() {
            if let Some(cen) = cen {
                let s = dot(&g, cen);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
        }
        if best.map(|(c, _)| c as i32) == Some(m.label()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub id_acc: Option<f64>,
    pub epsilon: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl EvalReport {
    pub fn from_scores<T: Scalar>(id: &[T], ood: &[T], id_acc: Option<f64>) -> Result<Self> {
        Ok(EvalReport {
            fpr95: fpr_at_tpr(id, ood, crate::detector::DEFAULT_TPR)?,
            auroc: auroc(id, ood)?,
            id_acc,
            epsilon: crate::detector::select_threshold(id, crate::detector::DEFAULT_TPR)?.as_f64(),
            n_id: id.len(),
            n_ood: ood.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "fpr95,auroc,id_acc,epsilon,n_id,n_ood";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.fpr95,
            self.auroc,
            self.id_acc.map(|a| a.to_string()).unwrap_or_default(),
            self.epsilon,
            self.n_id,
            self.n_ood
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fpr95={:.6}", self.fpr95)?;
        writeln!(f, "auroc={:.6}", self.auroc)?;
        match self.id_acc {
            Some(a) => writeln!(f, "id_acc={a:.6}")?,
            None => writeln!(f, "id_acc=")?,
        }
        writeln!(f, "epsilon={}", self.epsilon)?;
        writeln!(f, "n_id={}", self.n_id)?;
        write!(f, "n_ood={}", self.n_ood)
    }
}
