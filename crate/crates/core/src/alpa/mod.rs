//! Attention-aligned local contrastive objective.
//!
//! Each view's local representation `L` (`HW x E`) is mapped by three affine
//! heads to keys, queries and values. For a pair `(i, j)` the values of `i`
//! are re-expressed at `j`'s positions with `softmax(Q_j K_iᵀ / sqrt(e)) V_i`,
//! every value row is L2-normalized, and the pair similarity averages the
//! position-wise cosines in both directions. The loss has the same index
//! structure as the supervised contrastive loss on pooled globals.

pub mod grad;

use rand::Rng as _;

use crate::error::{contract, Error, Result};
use crate::features::{global_pool, FeatureMap};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::scalar::{dot, all_finite, Scalar};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Default attention head width.
pub const DEFAULT_HEAD_DIM: usize = 80;

/// Key/query/value heads, each an affine map `E -> e`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<T> {
    pub w_k: Matrix<T>,
    pub b_k: Vec<T>,
    pub w_q: Matrix<T>,
    pub b_q: Vec<T>,
    pub w_v: Matrix<T>,
    pub b_v: Vec<T>,
}

impl<T: Scalar> ProjectionHeads<T> {
    /// Heads with zero biases.
    pub fn new(w_k: Matrix<T>, w_q: Matrix<T>, w_v: Matrix<T>) -> Result<Self> {
        let e = w_k.cols();
        Self::with_biases(w_k, vec![T::zero(); e], w_q, vec![T::zero(); e], w_v, vec![T::zero(); e])
    }

    pub fn with_biases(
        w_k: Matrix<T>,
        b_k: Vec<T>,
        w_q: Matrix<T>,
        b_q: Vec<T>,
        w_v: Matrix<T>,
        b_v: Vec<T>,
    ) -> Result<Self> {
        let (in_dim, e) = (w_k.rows(), w_k.cols());
        contract!(e > 0 && in_dim > 0, "head dimensions must be positive");
        for (name, w) in [("W_q", &w_q), ("W_v", &w_v)] {
            contract!(
                w.rows() == in_dim && w.cols() == e,
                "{name} is {}x{}, W_k is {in_dim}x{e}",
                w.rows(),
                w.cols()
            );
        }
        for (name, b) in [("b_k", &b_k), ("b_q", &b_q), ("b_v", &b_v)] {
            contract!(b.len() == e, "{name} has length {}, expected {e}", b.len());
        }
        let heads = Self {
            w_k,
            b_k,
            w_q,
            b_q,
            w_v,
            b_v,
        };
        if !heads.tensors().iter().all(|t| all_finite(t)) {
            return Err(Error::Validation("projection heads contain non-finite entries".into()));
        }
        Ok(heads)
    }

    /// Identity heads (`e = E`), zero biases.
    pub fn identity(dim: usize) -> Self {
        let id = Matrix::identity(dim);
        Self::new(id.clone(), id.clone(), id).expect("identity heads are valid")
    }

    /// Weights uniform in `[-1/sqrt(E), 1/sqrt(E)]`, zero biases.
    pub fn init(in_dim: usize, head_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || Matrix::from_fn(in_dim, head_dim, |_, _| T::lit(rng.random_range(-bound..=bound)));
        let (w_k, w_q, w_v) = (draw(), draw(), draw());
        Self::new(w_k, w_q, w_v).expect("initialized heads are valid")
    }

    pub fn zeros_like(&self) -> Self {
        let (d, e) = (self.in_dim(), self.head_dim());
        Self {
            w_k: Matrix::zeros(d, e),
            b_k: vec![T::zero(); e],
            w_q: Matrix::zeros(d, e),
            b_q: vec![T::zero(); e],
            w_v: Matrix::zeros(d, e),
            b_v: vec![T::zero(); e],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.w_k.rows()
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.w_k.cols()
    }

    /// Tensors in persistence order `W_k, b_k, W_q, b_q, W_v, b_v`.
    pub fn tensors(&self) -> [&[T]; 6] {
        [
            self.w_k.as_slice(),
            &self.b_k,
            self.w_q.as_slice(),
            &self.b_q,
            self.w_v.as_slice(),
            &self.b_v,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w_k.as_mut_slice(),
            &mut self.b_k,
            self.w_q.as_mut_slice(),
            &mut self.b_q,
            self.w_v.as_mut_slice(),
            &mut self.b_v,
        ]
    }
}

/// Keys, queries and values of one example, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedTriple<T> {
    pub keys: Matrix<T>,
    pub queries: Matrix<T>,
    pub values: Matrix<T>,
}

fn affine<T: Scalar>(rows: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Matrix<T> {
    let mut out = rows.matmul(w);
    out.add_row_vector(b);
    out
}

pub(crate) fn project_rows<T: Scalar>(heads: &ProjectionHeads<T>, rows: &Matrix<T>) -> ProjectedTriple<T> {
    ProjectedTriple {
        keys: affine(rows, &heads.w_k, &heads.b_k),
        queries: affine(rows, &heads.w_q, &heads.b_q),
        values: affine(rows, &heads.w_v, &heads.b_v),
    }
}

pub fn project<T: Scalar>(heads: &ProjectionHeads<T>, map: &FeatureMap<T>) -> Result<ProjectedTriple<T>> {
    contract!(
        map.channels() == heads.in_dim(),
        "map has {} channels, heads expect {}",
        map.channels(),
        heads.in_dim()
    );
    Ok(project_rows(heads, &map.to_rows()))
}

/// Numerically stable in-place row softmax.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// `softmax(Q_j K_iᵀ / sqrt(e))`, shape `HW_j x HW_i`.
pub fn attention_weights<T: Scalar>(queries_j: &Matrix<T>, keys_i: &Matrix<T>, head_dim: usize) -> Result<Matrix<T>> {
    contract!(head_dim > 0, "head dimension must be positive");
    contract!(
        queries_j.cols() == keys_i.cols(),
        "query width {} != key width {}",
        queries_j.cols(),
        keys_i.cols()
    );
    let mut logits = queries_j.matmul_t(keys_i);
    logits.scale(T::one() / T::count(head_dim).sqrt());
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Values of `i` aligned to the positions of `j`: `V_{i|j} = a_ij V_i`.
pub fn cross_attention_align<T: Scalar>(
    keys_i: &Matrix<T>,
    queries_j: &Matrix<T>,
    values_i: &Matrix<T>,
    head_dim: usize,
) -> Result<Matrix<T>> {
    contract!(
        keys_i.rows() == values_i.rows(),
        "keys have {} rows, values {}",
        keys_i.rows(),
        values_i.rows()
    );
    let a = attention_weights(queries_j, keys_i, head_dim)?;
    Ok(a.matmul(values_i))
}

/// L2-normalizes every row; a zero row is an error.
pub fn normalize_rows<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = dot(row, row).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::Normalization(format!("{what} row {r} has norm {n}")));
        }
        row.iter_mut().for_each(|x| *x = *x / n);
    }
    Ok(out)
}

/// Aligned local similarity of two projected examples, in `[-2, 2]`.
pub fn aligned_similarity<T: Scalar>(
    ti: &ProjectedTriple<T>,
    tj: &ProjectedTriple<T>,
    head_dim: usize,
) -> Result<T> {
    contract!(
        ti.values.rows() == tj.values.rows(),
        "pair has {} and {} positions",
        ti.values.rows(),
        tj.values.rows()
    );
    let v_i_given_j = cross_attention_align(&ti.keys, &tj.queries, &ti.values, head_dim)?;
    let v_j_given_i = cross_attention_align(&tj.keys, &ti.queries, &tj.values, head_dim)?;
    let vi = normalize_rows(&ti.values, "V_i")?;
    let vj = normalize_rows(&tj.values, "V_j")?;
    let vij = normalize_rows(&v_i_given_j, "V_i|j")?;
    let vji = normalize_rows(&v_j_given_i, "V_j|i")?;
    let positions = vi.rows();
    let mut total = T::zero();
    for l in 0..positions {
        total = total + dot(vi.row(l), vji.row(l)) + dot(vj.row(l), vij.row(l));
    }
    Ok(total / T::count(positions))
}

pub fn pairwise_sim<T: Scalar>(
    map_i: &FeatureMap<T>,
    map_j: &FeatureMap<T>,
    heads: &ProjectionHeads<T>,
) -> Result<T> {
    contract!(map_i.shape() == map_j.shape(), "pairwise_sim needs equal map shapes");
    let ti = project(heads, map_i)?;
    let tj = project(heads, map_j)?;
    aligned_similarity(&ti, &tj, heads.head_dim())
}

/// `2N` labeled views; every label occurs an even number (at least 2) of times.
#[derive(Clone, Debug, PartialEq)]
pub struct AlpaBatch<T> {
    views: Vec<FeatureMap<T>>,
}

impl<T: Scalar> AlpaBatch<T> {
    pub fn new(views: Vec<FeatureMap<T>>) -> Result<Self> {
        contract!(
            !views.is_empty() && views.len().is_multiple_of(2),
            "batch must hold 2N views, got {}",
            views.len()
        );
        let shape = views[0].shape();
        contract!(
            views.iter().all(|v| v.shape() == shape),
            "all views in a batch must share one shape"
        );
        let labels: Vec<i32> = views.iter().map(FeatureMap::label).collect();
        positive_counts(&labels)?;
        Ok(Self { views })
    }

    pub fn views(&self) -> &[FeatureMap<T>] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Number of original instances `N`.
    pub fn pairs(&self) -> usize {
        self.views.len() / 2
    }

    pub fn labels(&self) -> Vec<i32> {
        self.views.iter().map(FeatureMap::label).collect()
    }
}

/// For each anchor, the number of positives `2 N_y - 1`.
pub(crate) fn positive_counts(labels: &[i32]) -> Result<Vec<usize>> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    for (&l, &c) in &counts {
        contract!(
            c >= 2 && c % 2 == 0,
            "label {l} has {c} views; every instance contributes two views"
        );
    }
    Ok(labels.iter().map(|l| counts[l] - 1).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    /// `l_ij` for positive pairs (zero elsewhere) when requested.
    pub per_pair_terms: Option<Matrix<T>>,
}

fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    let s: T = xs.map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Contrastive loss from a full similarity matrix:
/// `sum_i 1/(2N_{y_i}-1) sum_{j != i, y_j = y_i} -log softmax_{t != i}(sim_it / tau)_j`.
pub fn contrastive_from_similarity<T: Scalar>(
    sims: &Matrix<T>,
    labels: &[i32],
    tau: T,
    keep_terms: bool,
) -> Result<LossValue<T>> {
    let n = labels.len();
    contract!(tau > T::zero(), "temperature must be positive");
    contract!(sims.rows() == n && sims.cols() == n, "similarity matrix must be {n}x{n}");
    let positives = positive_counts(labels)?;
    let mut terms = keep_terms.then(|| Matrix::zeros(n, n));
    let mut total = T::zero();
    for i in 0..n {
        let logits = (0..n).filter(move |&t| t != i).map(|t| sims[(i, t)] / tau);
        let lse = log_sum_exp(logits);
        let weight = T::one() / T::count(positives[i]);
        for j in 0..n {
            if j == i || labels[j] != labels[i] {
                continue;
            }
            let l_ij = lse - sims[(i, j)] / tau;
            total = total + weight * l_ij;
            if let Some(t) = terms.as_mut() {
                t[(i, j)] = l_ij;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {total}")));
    }
    Ok(LossValue {
        value: total,
        per_pair_terms: terms,
    })
}

/// Symmetric matrix of aligned similarities (diagonal left at zero, unused).
pub fn alpa_similarities<T: Scalar>(batch: &AlpaBatch<T>, heads: &ProjectionHeads<T>) -> Result<Matrix<T>> {
    let triples = batch
        .views()
        .iter()
        .map(|v| project(heads, v))
        .collect::<Result<Vec<_>>>()?;
    similarity_matrix(&triples, heads.head_dim())
}

pub(crate) fn similarity_matrix<T: Scalar>(triples: &[ProjectedTriple<T>], head_dim: usize) -> Result<Matrix<T>> {
    let n = triples.len();
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = aligned_similarity(&triples[i], &triples[j], head_dim)?;
            sims[(i, j)] = s;
            sims[(j, i)] = s;
        }
    }
    Ok(sims)
}

pub fn alpa_loss<T: Scalar>(batch: &AlpaBatch<T>, heads: &ProjectionHeads<T>, tau: T) -> Result<LossValue<T>> {
    alpa_loss_with_terms(batch, heads, tau, false)
}

pub fn alpa_loss_with_terms<T: Scalar>(
    batch: &AlpaBatch<T>,
    heads: &ProjectionHeads<T>,
    tau: T,
    keep_terms: bool,
) -> Result<LossValue<T>> {
    let sims = alpa_similarities(batch, heads)?;
    contrastive_from_similarity(&sims, &batch.labels(), tau, keep_terms)
}

/// Cosine similarity matrix of `h(g_i)` for pooled globals `g_i`.
pub fn global_similarities<T: Scalar>(batch: &AlpaBatch<T>, head_h: &Matrix<T>) -> Result<Matrix<T>> {
    let globals = batch
        .views()
        .iter()
        .map(|v| {
            contract!(
                v.channels() == head_h.rows(),
                "map has {} channels, projection head expects {}",
                v.channels(),
                head_h.rows()
            );
            Ok(global_pool(v).values)
        })
        .collect::<Result<Vec<_>>>()?;
    let z = normalize_rows(&Matrix::from_rows(&globals)?.matmul(head_h), "projected global")?;
    Ok(z.matmul_t(&z))
}

/// Supervised contrastive loss on projected, normalized global representations.
pub fn supcon_loss<T: Scalar>(batch: &AlpaBatch<T>, head_h: &Matrix<T>, tau: T) -> Result<LossValue<T>> {
    let sims = global_similarities(batch, head_h)?;
    contrastive_from_similarity(&sims, &batch.labels(), tau, false)
}

/// How the local objective enters the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// `L_base + lambda * L_alpa`.
    Train,
    /// `L_alpa` alone.
    Finetune,
}

pub fn combined_loss<T: Scalar>(
    mode: LossMode,
    base: Option<&LossValue<T>>,
    alpa: &LossValue<T>,
    lambda: T,
) -> Result<T> {
    contract!(lambda >= T::zero(), "lambda must be non-negative");
    match mode {
        LossMode::Finetune => Ok(alpa.value),
        LossMode::Train => {
            let base = base.ok_or_else(|| Error::Contract("train mode requires a base loss".into()))?;
            if lambda == T::zero() {
                Ok(base.value)
            } else {
                Ok(base.value + lambda * alpa.value)
            }
        }
    }
}
