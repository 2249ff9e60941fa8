//! Exact flat nearest-neighbor index over L2-normalized representations.
//!
//! `.bnk` layout: magic `"MODEBNK1"`, u32 version, u32 n, u32 E, n x E f32 LE
//! rows, then per row (u32 example id, u8 scale tag).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::codec::{read_file, Reader, Writer};
use crate::error::{contract, Error, Result};
use crate::rng::{self, streams};
use crate::scalar::{dot, Scalar};

pub const BNK_MAGIC: &[u8; 8] = b"MODEBNK1";
pub const BNK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ScaleTag {
    Global = 0,
    Local = 1,
    LocalPlusPlus = 2,
}

impl ScaleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleTag::Global => "global",
            ScaleTag::Local => "local",
            ScaleTag::LocalPlusPlus => "local++",
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ScaleTag::Global),
            1 => Some(ScaleTag::Local),
            2 => Some(ScaleTag::LocalPlusPlus),
            _ => None,
        }
    }
}

impl std::fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScaleTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ScaleTag::Global),
            "local" => Ok(ScaleTag::Local),
            "local++" => Ok(ScaleTag::LocalPlusPlus),
            other => Err(Error::Validation(format!("unknown scale tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub example_id: u32,
    pub scale: ScaleTag,
}

/// Row-major pool of unit vectors with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBank<T> {
    dim: usize,
    rows: Vec<T>,
    provenance: Vec<Provenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborResult<T> {
    /// Distance to the k-th nearest row.
    pub r_k: T,
    /// Row ids of the k nearest rows, nearest first.
    pub neighbor_ids: Vec<usize>,
    pub distances: Vec<T>,
}

/// Returns `v / |v|`; a zero or non-finite norm is an error.
pub fn normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = dot(v, v).sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::Normalization(format!("vector has norm {n}")));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn build_bank<T: Scalar>(vectors: &[Vec<T>], provenance: Vec<Provenance>) -> Result<RepresentationBank<T>> {
    contract!(
        vectors.len() == provenance.len(),
        "{} vectors but {} provenance entries",
        vectors.len(),
        provenance.len()
    );
    let dim = vectors.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(vectors.len() * dim);
    for (i, v) in vectors.iter().enumerate() {
        contract!(v.len() == dim, "vector {i} has dimension {}, expected {dim}", v.len());
        let unit = normalize(v).map_err(|e| Error::Normalization(format!("bank input {i}: {e}")))?;
        rows.extend(unit);
    }
    Ok(RepresentationBank { dim, rows, provenance })
}

impl<T: Scalar> RepresentationBank<T> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut rows = Vec::new();
        let mut provenance = Vec::new();
        for i in 0..self.len() {
            if keep(i) {
                rows.extend_from_slice(self.row(i));
                provenance.push(self.provenance[i]);
            }
        }
        Self {
            dim: self.dim,
            rows,
            provenance,
        }
    }

    /// Rows whose scale tag is in `scales`, order preserved.
    pub fn filter_scales(&self, scales: &[ScaleTag]) -> Self {
        self.select(|i| scales.contains(&self.provenance[i].scale))
    }
}

#[inline]
fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| {
            let d = x - y;
            acc + d * d
        })
        .sqrt()
}

fn by_distance_then_id<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact k nearest rows of the normalized `query`; ties go to the lower row id.
pub fn rk_query<T: Scalar>(bank: &RepresentationBank<T>, query: &[T], k: usize) -> Result<NeighborResult<T>> {
    contract!(k >= 1, "k must be at least 1");
    contract!(k <= bank.len(), "k = {k} exceeds bank size {}", bank.len());
    contract!(
        query.len() == bank.dim(),
        "query dimension {} != bank dimension {}",
        query.len(),
        bank.dim()
    );
    let q = normalize(query)?;
    let mut dists: Vec<(T, usize)> = (0..bank.len()).map(|i| (distance(&q, bank.row(i)), i)).collect();
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, by_distance_then_id);
        dists.truncate(k);
    }
    dists.sort_unstable_by(by_distance_then_id);
    Ok(NeighborResult {
        r_k: dists[k - 1].0,
        neighbor_ids: dists.iter().map(|d| d.1).collect(),
        distances: dists.into_iter().map(|d| d.0).collect(),
    })
}

/// Parallel over queries; identical to calling [`rk_query`] for each.
pub fn rk_query_batch<T: Scalar>(
    bank: &RepresentationBank<T>,
    queries: &[Vec<T>],
    k: usize,
) -> Result<Vec<NeighborResult<T>>> {
    queries.par_iter().map(|q| rk_query(bank, q, k)).collect()
}

/// Keeps `ceil(alpha% * count)` source examples per class, with every scale
/// entry of a kept example. `labels[example_id]` gives the class. Kept sets
/// for a fixed seed are nested as `alpha` grows.
pub fn subsample_bank<T: Scalar>(
    bank: &RepresentationBank<T>,
    labels: &[i32],
    alpha: f64,
    seed: u64,
) -> Result<RepresentationBank<T>> {
    contract!(alpha > 0.0 && alpha <= 100.0, "alpha must lie in (0, 100], got {alpha}");
    if alpha == 100.0 {
        return Ok(bank.clone());
    }
    let mut by_class: BTreeMap<i32, Vec<u32>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for p in bank.provenance() {
        let label = *labels.get(p.example_id as usize).ok_or_else(|| {
            Error::Contract(format!("no label for example {}", p.example_id))
        })?;
        if seen.insert(p.example_id) {
            by_class.entry(label).or_default().push(p.example_id);
        }
    }
    let mut rng = rng::stream(seed, streams::SUBSAMPLE);
    let mut keep = BTreeSet::new();
    for ids in by_class.values_mut() {
        ids.shuffle(&mut rng);
        let quota = ((alpha / 100.0) * ids.len() as f64 - 1e-9).ceil().max(1.0) as usize;
        keep.extend(ids.iter().take(quota).copied());
    }
    Ok(bank.select(|i| keep.contains(&bank.provenance[i].example_id)))
}

pub fn save_bank<T: Scalar>(bank: &RepresentationBank<T>, path: &Path) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(BNK_MAGIC);
    w.u32(BNK_VERSION);
    w.len_u32(bank.len(), path, "row count")?;
    w.len_u32(bank.dim(), path, "dimension")?;
    bank.rows.iter().for_each(|v| w.f32(v.as_f32()));
    for p in bank.provenance() {
        w.u32(p.example_id);
        w.u8(p.scale as u8);
    }
    w.finish(path)
}

/// Loads a bank; rows are re-checked for unit norm (within 1e-6).
pub fn load_bank<T: Scalar>(path: &Path) -> Result<RepresentationBank<T>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(BNK_MAGIC)?;
    r.version(BNK_VERSION)?;
    let n = r.u32("row count")? as usize;
    let dim = r.u32("dimension")? as usize;
    let raw = r.f32s(n * dim, "rows")?;
    let mut provenance = Vec::with_capacity(n);
    for _ in 0..n {
        let example_id = r.u32("example id")?;
        let tag = r.u8("scale tag")?;
        let scale = ScaleTag::from_u8(tag).ok_or_else(|| r.format_err(format!("unknown scale tag {tag}")))?;
        provenance.push(Provenance { example_id, scale });
    }
    r.finish()?;
    let rows: Vec<T> = raw.into_iter().map(|x| T::lit(x as f64)).collect();
    if dim > 0 {
        for (i, row) in rows.chunks_exact(dim).enumerate() {
            let norm = dot(row, row).sqrt().as_f64();
            if !((norm - 1.0).abs() <= 1e-6) {
                return Err(Error::Validation(format!(
                    "{}: row {i} has norm {norm}, expected 1",
                    path.display()
                )));
            }
        }
    }
    Ok(RepresentationBank { dim, rows, provenance })
}
