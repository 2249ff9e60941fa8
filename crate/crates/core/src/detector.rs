//! Multi-scale extraction, bank fitting, cross-scale scoring and
//! threshold decisions.
//!
//! Scores are distances: small means in-distribution. An example is ID iff
//! its score is strictly below the threshold.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::features::{global_pool, mean_of_positions, FeatureDataset, FeatureMap, MapShape};
use crate::knn::{build_bank, rk_query, subsample_bank, Provenance, RepresentationBank, ScaleTag};
use crate::scalar::Scalar;
use crate::trainer::EncoderParams;

/// Default number of neighbors.
pub const DEFAULT_K: usize = 50;
pub const DEFAULT_TPR: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ScaleMode {
    GlobalOnly,
    LocalOnly,
    LocalPlusPlus,
    #[default]
    GlobalPlusLocalPlusPlus,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::GlobalOnly => "global",
            ScaleMode::LocalOnly => "local",
            ScaleMode::LocalPlusPlus => "local++",
            ScaleMode::GlobalPlusLocalPlusPlus => "global+local++",
        }
    }

    fn needs_even_grid(self) -> bool {
        matches!(self, ScaleMode::LocalPlusPlus | ScaleMode::GlobalPlusLocalPlusPlus)
    }

    /// Number of vectors extracted from one map of the given shape.
    pub fn cardinality(self, shape: MapShape) -> usize {
        match self {
            ScaleMode::GlobalOnly => 1,
            ScaleMode::LocalOnly => shape.positions(),
            ScaleMode::LocalPlusPlus => shape.positions() / 4 + 1,
            ScaleMode::GlobalPlusLocalPlusPlus => shape.positions() / 4 + 2,
        }
    }
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" | "global-only" => Ok(ScaleMode::GlobalOnly),
            "local" | "local-only" => Ok(ScaleMode::LocalOnly),
            "local++" => Ok(ScaleMode::LocalPlusPlus),
            "global+local++" | "mode" => Ok(ScaleMode::GlobalPlusLocalPlusPlus),
            other => Err(Error::Contract(format!(
                "unknown scale mode {other:?} (global, local, local++, global+local++)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleSet<T> {
    pub vectors: Vec<Vec<T>>,
    pub tags: Vec<ScaleTag>,
    pub shape: MapShape,
}

impl<T> MultiScaleSet<T> {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Extracts the vectors of `mode`, unnormalized.
///
/// Local++ is the stride-2 `2x2` average pool of the grid followed by the
/// full-map average; for a `4x4` map that is `4 + 1` vectors.
pub fn extract_multiscale<T: Scalar>(map: &FeatureMap<T>, mode: ScaleMode) -> Result<MultiScaleSet<T>> {
    if mode.needs_even_grid() {
        contract!(
            map.shape().is_even_grid(),
            "local++ extraction needs an even grid, got {}x{}",
            map.height(),
            map.width()
        );
    }
    let mut vectors = Vec::with_capacity(mode.cardinality(map.shape()));
    let mut tags = Vec::with_capacity(vectors.capacity());
    let mut push = |v: Vec<T>, t: ScaleTag| {
        vectors.push(v);
        tags.push(t);
    };
    let local_pp = |push: &mut dyn FnMut(Vec<T>, ScaleTag)| {
        for r in 0..map.height() / 2 {
            for c in 0..map.width() / 2 {
                push(mean_of_positions(map, 2 * r..2 * r + 2, 2 * c..2 * c + 2), ScaleTag::LocalPlusPlus);
            }
        }
        push(global_pool(map).values, ScaleTag::LocalPlusPlus);
    };
    match mode {
        ScaleMode::GlobalOnly => push(global_pool(map).values, ScaleTag::Global),
        ScaleMode::LocalOnly => map.positions().for_each(|p| push(p.to_vec(), ScaleTag::Local)),
        ScaleMode::LocalPlusPlus => local_pp(&mut push),
        ScaleMode::GlobalPlusLocalPlusPlus => {
            push(global_pool(map).values, ScaleTag::Global);
            local_pp(&mut push);
        }
    }
    Ok(MultiScaleSet {
        vectors,
        tags,
        shape: map.shape(),
    })
}

/// Encodes, extracts and pools every (alpha%-sampled) training example into one bank.
pub fn fit_bank<T: Scalar>(
    train: &FeatureDataset<T>,
    encoder: &EncoderParams<T>,
    mode: ScaleMode,
    alpha: f64,
    seed: u64,
) -> Result<RepresentationBank<T>> {
    contract!(train.is_labeled(), "bank fitting needs labeled training data");
    let mut vectors = Vec::new();
    let mut provenance = Vec::new();
    for (id, map) in train.maps().iter().enumerate() {
        let set = extract_multiscale(&encoder.apply(map)?, mode)?;
        let example_id = u32::try_from(id).map_err(|_| Error::Contract("too many training examples".into()))?;
        for (v, tag) in set.vectors.into_iter().zip(set.tags) {
            vectors.push(v);
            provenance.push(Provenance { example_id, scale: tag });
        }
    }
    let bank = build_bank(&vectors, provenance)?;
    subsample_bank(&bank, &train.labels(), alpha, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scored<T> {
    pub example_id: usize,
    /// Minimum k-th neighbor distance over the extracted vectors.
    pub score: T,
    pub per_scale_rk: Vec<(ScaleTag, T)>,
    /// Index of the minimizing vector (first one on ties).
    pub winner: usize,
}

impl<T: Scalar> Scored<T> {
    pub fn winner_scale(&self) -> ScaleTag {
        self.per_scale_rk[self.winner].0
    }
}

/// Cross-scale score: `min_m r_k(m)` over the multi-scale set of `test_map`.
pub fn csd_score<T: Scalar>(
    test_map: &FeatureMap<T>,
    example_id: usize,
    encoder: &EncoderParams<T>,
    bank: &RepresentationBank<T>,
    k: usize,
    mode: ScaleMode,
) -> Result<Scored<T>> {
    let set = extract_multiscale(&encoder.apply(test_map)?, mode)?;
    let mut per_scale_rk: Vec<(ScaleTag, T)> = Vec::with_capacity(set.len());
    let mut winner = 0usize;
    for (i, (v, tag)) in set.vectors.iter().zip(&set.tags).enumerate() {
        let r = rk_query(bank, v, k)?.r_k;
        if i > 0 && r < per_scale_rk[winner].1 {
            winner = i;
        }
        per_scale_rk.push((*tag, r));
    }
    Ok(Scored {
        example_id,
        score: per_scale_rk[winner].1,
        per_scale_rk,
        winner,
    })
}

/// Baseline k-NN score of the global vector against a global-only bank.
pub fn knn_score_global<T: Scalar>(
    test_map: &FeatureMap<T>,
    example_id: usize,
    encoder: &EncoderParams<T>,
    bank_global_only: &RepresentationBank<T>,
    k: usize,
) -> Result<Scored<T>> {
    contract!(
        bank_global_only.provenance().iter().all(|p| p.scale == ScaleTag::Global),
        "baseline k-NN needs a global-only bank"
    );
    csd_score(test_map, example_id, encoder, bank_global_only, k, ScaleMode::GlobalOnly)
}

/// Scores every map of `dataset`; example ids are dataset indices.
pub fn score_dataset<T: Scalar>(
    dataset: &FeatureDataset<T>,
    encoder: &EncoderParams<T>,
    bank: &RepresentationBank<T>,
    k: usize,
    mode: ScaleMode,
) -> Result<Vec<Scored<T>>> {
    dataset
        .maps()
        .par_iter()
        .enumerate()
        .map(|(i, m)| csd_score(m, i, encoder, bank, k, mode))
        .collect()
}

/// Threshold admitting the `ceil(tpr * n)` smallest ID scores under the
/// strict rule `score < eps`: the midpoint between the admitted order
/// statistic and the next distinct score, or that statistic plus `1e-9`
/// when it is the maximum.
pub fn select_threshold<T: Scalar>(id_scores: &[T], tpr_target: f64) -> Result<T> {
    contract!(!id_scores.is_empty(), "threshold selection needs ID scores");
    contract!(tpr_target > 0.0 && tpr_target < 1.0, "TPR target must lie in (0, 1)");
    contract!(id_scores.iter().all(|s| s.is_finite()), "ID scores must be finite");
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let rank = ((tpr_target * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let admitted = sorted[rank - 1];
    match sorted[rank..].iter().find(|&&s| s > admitted) {
        Some(&next) => {
            let mid = admitted + (next - admitted) / T::lit(2.0);
            // Guard against midpoints that round onto an endpoint.
            if mid > admitted && mid <= next {
                Ok(mid)
            } else {
                Ok(next)
            }
        }
        None => Ok(admitted + T::lit(1e-9)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Id,
    Ood,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Id => "ID",
            Verdict::Ood => "OOD",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision<T> {
    pub verdict: Verdict,
    pub threshold: T,
}

pub fn decide_score<T: Scalar>(score: T, eps: T) -> Decision<T> {
    Decision {
        verdict: if score < eps { Verdict::Id } else { Verdict::Ood },
        threshold: eps,
    }
}

pub fn decide<T: Scalar>(scored: &Scored<T>, eps: T) -> Decision<T> {
    decide_score(scored.score, eps)
}

/// One line of the scores CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub example_id: usize,
    pub dataset_tag: String,
    pub score: f64,
    pub winner_scale: ScaleTag,
    pub verdict: Verdict,
}

pub const SCORES_HEADER: &str = "example_id,dataset_tag,score,winner_scale,verdict";

pub fn score_rows<T: Scalar>(scored: &[Scored<T>], dataset_tag: &str, eps: T) -> Vec<ScoreRow> {
    scored
        .iter()
        .map(|s| ScoreRow {
            example_id: s.example_id,
            dataset_tag: dataset_tag.to_string(),
            score: s.score.as_f64(),
            winner_scale: s.winner_scale(),
            verdict: decide(s, eps).verdict,
        })
        .collect()
}

pub fn write_scores_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{SCORES_HEADER}").expect("write to Vec");
    for r in rows {
        writeln!(
            buf,
            "{},{},{:?},{},{}",
            r.example_id,
            r.dataset_tag,
            r.score,
            r.winner_scale,
            r.verdict.as_str()
        )
        .expect("write to Vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        return Err(bad(1, "missing or unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 2, "expected 5 columns"));
        }
        let verdict = match f[4] {
            "ID" => Verdict::Id,
            "OOD" => Verdict::Ood,
            _ => return Err(bad(i + 2, "verdict must be ID or OOD")),
        };
        rows.push(ScoreRow {
            example_id: f[0].parse().map_err(|_| bad(i + 2, "bad example_id"))?,
            dataset_tag: f[1].to_string(),
            score: f[2].parse().map_err(|_| bad(i + 2, "bad score"))?,
            winner_scale: f[3].parse().map_err(|_| bad(i + 2, "bad winner_scale"))?,
            verdict,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_map(h: usize, w: usize, e: usize, seed: u64) -> FeatureMap<f64> {
        let mut r = rng::seeded(seed);
        let vals = (0..h * w * e).map(|_| rng::standard_normal(&mut r)).collect();
        FeatureMap::new(MapShape::new(h, w, e).unwrap(), vals, 0).unwrap()
    }

    #[test]
    fn cardinalities() {
        let m = random_map(4, 4, 3, 1);
        for (mode, n) in [
            (ScaleMode::GlobalOnly, 1),
            (ScaleMode::LocalOnly, 16),
            (ScaleMode::LocalPlusPlus, 5),
            (ScaleMode::GlobalPlusLocalPlusPlus, 6),
        ] {
            let set = extract_multiscale(&m, mode).unwrap();
            assert_eq!(set.len(), n);
            assert_eq!(mode.cardinality(m.shape()), n);
        }
        let odd = random_map(3, 4, 2, 2);
        assert!(extract_multiscale(&odd, ScaleMode::LocalOnly).is_ok());
        assert!(extract_multiscale(&odd, ScaleMode::LocalPlusPlus).is_err());
    }

    #[test]
    fn quadrant_means_match_direct_average() {
        let m = random_map(4, 4, 3, 5);
        let set = extract_multiscale(&m, ScaleMode::GlobalPlusLocalPlusPlus).unwrap();
        assert_eq!(set.tags[0], ScaleTag::Global);
        assert!(set.tags[1..].iter().all(|t| *t == ScaleTag::LocalPlusPlus));
        for q in 0..4 {
            let (r0, c0) = (2 * (q / 2), 2 * (q % 2));
            for ch in 0..3 {
                let s = m.at(r0, c0)[ch] + m.at(r0, c0 + 1)[ch] + m.at(r0 + 1, c0)[ch] + m.at(r0 + 1, c0 + 1)[ch];
                assert!((set.vectors[1 + q][ch] - s / 4.0).abs() < 1e-12);
            }
        }
        assert_eq!(set.vectors[0], set.vectors[5]);
    }

    #[test]
    fn constant_map_extracts_constant_vectors() {
        let v = [1.5, -0.5];
        let vals: Vec<f64> = (0..16).flat_map(|_| v).collect();
        let m = FeatureMap::new(MapShape::new(4, 4, 2).unwrap(), vals, 0).unwrap();
        for mode in [ScaleMode::LocalOnly, ScaleMode::GlobalPlusLocalPlusPlus] {
            for x in extract_multiscale(&m, mode).unwrap().vectors {
                assert_eq!(x, v.to_vec());
            }
        }
    }

    #[test]
    fn threshold_order_statistic() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let eps = select_threshold(&scores, 0.95).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s < eps).count(), 95);
        assert_eq!(eps, 95.5);
        let same = vec![2.0f64; 10];
        let eps = select_threshold(&same, 0.95).unwrap();
        assert!(eps > 2.0);
        assert!(select_threshold::<f64>(&[], 0.95).is_err());
        assert!(select_threshold(&same, 1.0).is_err());
    }

    #[test]
    fn decision_is_strict() {
        assert_eq!(decide_score(0.1, 0.5).verdict, Verdict::Id);
        assert_eq!(decide_score(0.5, 0.5).verdict, Verdict::Ood);
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![
            ScoreRow {
                example_id: 0,
                dataset_tag: "id".into(),
                score: 0.123456789012345,
                winner_scale: ScaleTag::LocalPlusPlus,
                verdict: Verdict::Id,
            },
            ScoreRow {
                example_id: 1,
                dataset_tag: "ood".into(),
                score: 1.0,
                winner_scale: ScaleTag::Global,
                verdict: Verdict::Ood,
            },
        ];
        write_scores_csv(&rows, &p).unwrap();
        assert_eq!(read_scores_csv(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("example_id,dataset_tag,score,winner_scale,verdict\n0,id,"));
    }
}
