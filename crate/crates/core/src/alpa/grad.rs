//! Exact reverse-mode gradients of the local and global contrastive losses
//! with respect to the per-position encoder and the projection heads.
//!
//! The forward graph per batch is
//! `X -> L = X W_enc + b_enc -> [2x2 pool] -> K, Q, V -> pair similarities -> loss`
//! plus, for the base objective, `L -> mean -> g W_v -> normalize -> cosine`.
//! The backward pass runs in two sweeps: the first evaluates every pair
//! similarity and the loss, the second re-runs each pair and accumulates
//! its contribution. Pair order is fixed, so results are deterministic.

use crate::alpa::{
    contrastive_from_similarity, normalize_rows, positive_counts, project_rows, similarity_matrix,
    softmax_rows, AlpaBatch, ProjectedTriple, ProjectionHeads,
};
use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Scalar};
use crate::trainer::EncoderParams;

/// Gradient tensors, shaped like the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub encoder: EncoderParams<T>,
    pub heads: ProjectionHeads<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(encoder: &EncoderParams<T>, heads: &ProjectionHeads<T>) -> Self {
        Self {
            encoder: encoder.zeros_like(),
            heads: heads.zeros_like(),
        }
    }

    /// All tensors in persistence order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors().to_vec();
        v.extend(self.heads.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.encoder.tensors_mut().into_iter().collect();
        v.extend(self.heads.tensors_mut());
        v
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    fn add_scaled(&mut self, other: &Gradients<T>, s: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + s * y);
        }
    }

    fn check_finite(&self) -> Result<()> {
        const NAMES: [&str; 8] = ["W_enc", "b_enc", "W_k", "b_k", "W_q", "b_q", "W_v", "b_v"];
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            if let Some(bad) = t.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name} contains {bad}")));
            }
        }
        Ok(())
    }
}

/// Which terms make up the optimized objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective<T> {
    /// Local objective alone.
    Finetune,
    /// Global supervised contrastive base plus `lambda` times the local objective.
    Train { lambda: T },
    /// Global supervised contrastive base alone.
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec<T> {
    pub objective: Objective<T>,
    pub tau: T,
    /// Average-pool `L` by `2x2` before the heads (reduces `HW` by 4).
    pub prepool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGrad<T> {
    pub loss: T,
    /// Local term, when it was evaluated.
    pub alpa: Option<T>,
    /// Global base term, when it was evaluated.
    pub base: Option<T>,
    pub grads: Gradients<T>,
}

/// Gradient of the local objective alone (finetune mode, no pre-pooling).
pub fn grad_alpa<T: Scalar>(
    batch: &AlpaBatch<T>,
    heads: &ProjectionHeads<T>,
    encoder: &EncoderParams<T>,
    tau: T,
) -> Result<LossAndGrad<T>> {
    objective_with_grad(
        batch,
        encoder,
        heads,
        &ObjectiveSpec {
            objective: Objective::Finetune,
            tau,
            prepool: false,
        },
    )
}

struct Encoded<T> {
    /// Raw position rows per view.
    inputs: Vec<Matrix<T>>,
    /// Encoded position rows per view.
    locals: Vec<Matrix<T>>,
    height: usize,
    width: usize,
}

fn encode<T: Scalar>(batch: &AlpaBatch<T>, encoder: &EncoderParams<T>) -> Result<Encoded<T>> {
    let shape = batch.views()[0].shape();
    contract!(
        shape.channels == encoder.in_dim(),
        "views have {} channels, encoder expects {}",
        shape.channels,
        encoder.in_dim()
    );
    let inputs: Vec<Matrix<T>> = batch.views().iter().map(|v| v.to_rows()).collect();
    let locals = inputs.iter().map(|x| encoder.apply_rows(x)).collect();
    Ok(Encoded {
        inputs,
        locals,
        height: shape.height,
        width: shape.width,
    })
}

pub(crate) fn pool_rows<T: Scalar>(rows: &Matrix<T>, height: usize, width: usize) -> Matrix<T> {
    let (ph, pw) = (height / 2, width / 2);
    let quarter = T::lit(0.25);
    Matrix::from_fn(ph * pw, rows.cols(), |p, c| {
        let (r, q) = (2 * (p / pw), 2 * (p % pw));
        let idx = |dr: usize, dc: usize| (r + dr) * width + q + dc;
        (rows[(idx(0, 0), c)] + rows[(idx(0, 1), c)] + rows[(idx(1, 0), c)] + rows[(idx(1, 1), c)]) * quarter
    })
}

fn unpool_rows<T: Scalar>(grad: &Matrix<T>, height: usize, width: usize) -> Matrix<T> {
    let pw = width / 2;
    let quarter = T::lit(0.25);
    Matrix::from_fn(height * width, grad.cols(), |idx, c| {
        let (r, q) = (idx / width, idx % width);
        grad[((r / 2) * pw + q / 2, c)] * quarter
    })
}

/// `dL/dsim_it` for the contrastive loss; not symmetrized.
fn contrastive_backward<T: Scalar>(sims: &Matrix<T>, labels: &[i32], tau: T) -> Result<Matrix<T>> {
    let n = labels.len();
    let positives = positive_counts(labels)?;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        let max = (0..n)
            .filter(|&t| t != i)
            .map(|t| sims[(i, t)] / tau)
            .fold(T::neg_infinity(), T::max);
        let denom: T = (0..n)
            .filter(|&t| t != i)
            .map(|t| (sims[(i, t)] / tau - max).exp())
            .sum();
        let weight = T::one() / T::count(positives[i]);
        for t in 0..n {
            if t == i {
                continue;
            }
            let p = (sims[(i, t)] / tau - max).exp() / denom;
            let pos = if labels[t] == labels[i] { weight } else { T::zero() };
            d[(i, t)] = (p - pos) / tau;
        }
    }
    Ok(d)
}

/// Backward of row-wise L2 normalization: `dx = (dy - y (y . dy)) / |x|`.
fn normalize_backward<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = dot(x.row(r), x.row(r)).sqrt();
        let proj = dot(y.row(r), dy.row(r));
        for ((o, &yy), &g) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
            *o = (g - yy * proj) / n;
        }
    }
    dx
}

/// Backward of row-wise softmax: `ds = a * (da - rowsum(da * a))`.
fn softmax_backward<T: Scalar>(a: &Matrix<T>, da: &Matrix<T>) -> Matrix<T> {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let inner = dot(a.row(r), da.row(r));
        for ((o, &aa), &g) in ds.row_mut(r).iter_mut().zip(a.row(r)).zip(da.row(r)) {
            *o = aa * (g - inner);
        }
    }
    ds
}

struct TripleGrad<T> {
    keys: Matrix<T>,
    queries: Matrix<T>,
    values: Matrix<T>,
}

impl<T: Scalar> TripleGrad<T> {
    fn zeros(rows: usize, e: usize) -> Self {
        Self {
            keys: Matrix::zeros(rows, e),
            queries: Matrix::zeros(rows, e),
            values: Matrix::zeros(rows, e),
        }
    }
}

/// One direction of alignment: `U = softmax(Q_dst K_srcᵀ / sqrt(e)) V_src`.
/// Given `dU`, accumulates into the source keys/values and destination queries.
fn align_backward<T: Scalar>(
    src: &ProjectedTriple<T>,
    dst: &ProjectedTriple<T>,
    attn: &Matrix<T>,
    d_aligned: &Matrix<T>,
    inv_sqrt_e: T,
    g_src: &mut TripleGrad<T>,
    g_dst_queries: &mut Matrix<T>,
) {
    let d_attn = d_aligned.matmul_t(&src.values);
    g_src.values.add_assign(&attn.t_matmul(d_aligned));
    let mut d_logits = softmax_backward(attn, &d_attn);
    d_logits.scale(inv_sqrt_e);
    g_dst_queries.add_assign(&d_logits.matmul(&src.keys));
    g_src.keys.add_assign(&d_logits.t_matmul(&dst.queries));
}

fn attention<T: Scalar>(queries: &Matrix<T>, keys: &Matrix<T>, inv_sqrt_e: T) -> Matrix<T> {
    let mut logits = queries.matmul_t(keys);
    logits.scale(inv_sqrt_e);
    softmax_rows(&mut logits);
    logits
}

/// Accumulates `coeff * d sim(i, j)` into the per-view triple gradients.
fn pair_backward<T: Scalar>(
    ti: &ProjectedTriple<T>,
    tj: &ProjectedTriple<T>,
    coeff: T,
    head_dim: usize,
    gi: &mut TripleGrad<T>,
    gj: &mut TripleGrad<T>,
) -> Result<()> {
    let inv_sqrt_e = T::one() / T::count(head_dim).sqrt();
    let a_ij = attention(&tj.queries, &ti.keys, inv_sqrt_e);
    let a_ji = attention(&ti.queries, &tj.keys, inv_sqrt_e);
    let u_ij = a_ij.matmul(&ti.values);
    let u_ji = a_ji.matmul(&tj.values);
    let n_i = normalize_rows(&ti.values, "V_i")?;
    let n_j = normalize_rows(&tj.values, "V_j")?;
    let m_ij = normalize_rows(&u_ij, "V_i|j")?;
    let m_ji = normalize_rows(&u_ji, "V_j|i")?;

    let s = coeff / T::count(n_i.rows());
    let scaled = |m: &Matrix<T>| {
        let mut m = m.clone();
        m.scale(s);
        m
    };
    // sim = s * sum_l [ n_i . m_ji + n_j . m_ij ]
    gi.values.add_assign(&normalize_backward(&ti.values, &n_i, &scaled(&m_ji)));
    gj.values.add_assign(&normalize_backward(&tj.values, &n_j, &scaled(&m_ij)));
    let d_u_ji = normalize_backward(&u_ji, &m_ji, &scaled(&n_i));
    let d_u_ij = normalize_backward(&u_ij, &m_ij, &scaled(&n_j));

    align_backward(ti, tj, &a_ij, &d_u_ij, inv_sqrt_e, gi, &mut gj.queries);
    align_backward(tj, ti, &a_ji, &d_u_ji, inv_sqrt_e, gj, &mut gi.queries);
    Ok(())
}

/// Local objective value and gradient with respect to the encoded rows.
fn alpa_part<T: Scalar>(
    enc: &Encoded<T>,
    heads: &ProjectionHeads<T>,
    labels: &[i32],
    spec: &ObjectiveSpec<T>,
    grads: &mut Gradients<T>,
    d_locals: &mut [Matrix<T>],
    weight: T,
) -> Result<T> {
    let head_dim = heads.head_dim();
    let rows: Vec<Matrix<T>> = if spec.prepool {
        contract!(
            enc.height.is_multiple_of(2) && enc.width.is_multiple_of(2),
            "pre-pooling needs an even grid, got {}x{}",
            enc.height,
            enc.width
        );
        enc.locals.iter().map(|l| pool_rows(l, enc.height, enc.width)).collect()
    } else {
        enc.locals.clone()
    };
    let triples: Vec<ProjectedTriple<T>> = rows.iter().map(|r| project_rows(heads, r)).collect();
    let sims = similarity_matrix(&triples, head_dim)?;
    let loss = contrastive_from_similarity(&sims, labels, spec.tau, false)?.value;
    let d_sims = contrastive_backward(&sims, labels, spec.tau)?;

    let n = triples.len();
    let positions = rows[0].rows();
    let mut tg: Vec<TripleGrad<T>> = (0..n).map(|_| TripleGrad::zeros(positions, head_dim)).collect();
    for i in 0..n {
        for j in i + 1..n {
            let coeff = weight * (d_sims[(i, j)] + d_sims[(j, i)]);
            let (lo, hi) = tg.split_at_mut(j);
            pair_backward(&triples[i], &triples[j], coeff, head_dim, &mut lo[i], &mut hi[0])?;
        }
    }

    let h = &mut grads.heads;
    for (v, g) in tg.iter().enumerate() {
        let r = &rows[v];
        h.w_k.add_assign(&r.t_matmul(&g.keys));
        h.w_q.add_assign(&r.t_matmul(&g.queries));
        h.w_v.add_assign(&r.t_matmul(&g.values));
        for (b, s) in [(&mut h.b_k, g.keys.col_sums()), (&mut h.b_q, g.queries.col_sums()), (&mut h.b_v, g.values.col_sums())] {
            b.iter_mut().zip(s).for_each(|(x, y)| *x = *x + y);
        }
        let mut d_rows = g.keys.matmul_t(&heads.w_k);
        d_rows.add_assign(&g.queries.matmul_t(&heads.w_q));
        d_rows.add_assign(&g.values.matmul_t(&heads.w_v));
        let d_local = if spec.prepool {
            unpool_rows(&d_rows, enc.height, enc.width)
        } else {
            d_rows
        };
        d_locals[v].add_assign(&d_local);
    }
    Ok(loss)
}

/// Global base objective: supervised contrastive loss on `normalize(mean(L) W_v)`.
fn base_part<T: Scalar>(
    enc: &Encoded<T>,
    heads: &ProjectionHeads<T>,
    labels: &[i32],
    tau: T,
    grads: &mut Gradients<T>,
    d_locals: &mut [Matrix<T>],
) -> Result<T> {
    let globals: Vec<Vec<T>> = enc
        .locals
        .iter()
        .map(|l| {
            let inv = T::one() / T::count(l.rows());
            l.col_sums().into_iter().map(|s| s * inv).collect()
        })
        .collect();
    let g = Matrix::from_rows(&globals)?;
    let z = g.matmul(&heads.w_v);
    let zn = normalize_rows(&z, "projected global")?;
    let sims = zn.matmul_t(&zn);
    let loss = contrastive_from_similarity(&sims, labels, tau, false)?.value;
    let d_sims = contrastive_backward(&sims, labels, tau)?;
    // sims = zn znᵀ (diagonal unused) -> d zn_i = sum_t (d_it + d_ti) zn_t
    let n = labels.len();
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for t in 0..n {
            if i != t {
                sym[(i, t)] = d_sims[(i, t)] + d_sims[(t, i)];
            }
        }
    }
    let d_zn = sym.matmul(&zn);
    let d_z = normalize_backward(&z, &zn, &d_zn);
    grads.heads.w_v.add_assign(&g.t_matmul(&d_z));
    let d_g = d_z.matmul_t(&heads.w_v);
    for (v, d_local) in d_locals.iter_mut().enumerate() {
        let inv = T::one() / T::count(d_local.rows());
        for r in 0..d_local.rows() {
            for (x, &y) in d_local.row_mut(r).iter_mut().zip(d_g.row(v)) {
                *x = *x + y * inv;
            }
        }
    }
    Ok(loss)
}

/// Loss and exact gradient of the configured objective.
pub fn objective_with_grad<T: Scalar>(
    batch: &AlpaBatch<T>,
    encoder: &EncoderParams<T>,
    heads: &ProjectionHeads<T>,
    spec: &ObjectiveSpec<T>,
) -> Result<LossAndGrad<T>> {
    contract!(spec.tau > T::zero(), "temperature must be positive");
    contract!(
        encoder.out_dim() == heads.in_dim(),
        "encoder emits {} channels, heads expect {}",
        encoder.out_dim(),
        heads.in_dim()
    );
    let enc = encode(batch, encoder)?;
    let labels = batch.labels();
    let mut grads = Gradients::zeros_like(encoder, heads);
    let mut d_locals: Vec<Matrix<T>> = enc
        .locals
        .iter()
        .map(|l| Matrix::zeros(l.rows(), l.cols()))
        .collect();

    let (loss, alpa, base) = match spec.objective {
        Objective::Finetune => {
            let a = alpa_part(&enc, heads, &labels, spec, &mut grads, &mut d_locals, T::one())?;
            (a, Some(a), None)
        }
        Objective::Base => {
            let b = base_part(&enc, heads, &labels, spec.tau, &mut grads, &mut d_locals)?;
            (b, None, Some(b))
        }
        Objective::Train { lambda } => {
            contract!(lambda >= T::zero(), "lambda must be non-negative");
            let b = base_part(&enc, heads, &labels, spec.tau, &mut grads, &mut d_locals)?;
            if lambda == T::zero() {
                // Regularizer off: skip the local term entirely so the result
                // is bit-identical to the base objective.
                (b, None, Some(b))
            } else {
                let a = alpa_part(&enc, heads, &labels, spec, &mut grads, &mut d_locals, lambda)?;
                (b + lambda * a, Some(a), Some(b))
            }
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("objective is {loss}")));
    }

    for (x, d) in enc.inputs.iter().zip(&d_locals) {
        grads.encoder.weight.add_assign(&x.t_matmul(d));
        grads
            .encoder
            .bias
            .iter_mut()
            .zip(d.col_sums())
            .for_each(|(b, s)| *b = *b + s);
    }
    grads.check_finite()?;
    Ok(LossAndGrad {
        loss,
        alpa,
        base,
        grads,
    })
}

/// `a + weight * b`.
pub fn weighted_sum<T: Scalar>(a: &Gradients<T>, b: &Gradients<T>, weight: T) -> Gradients<T> {
    let mut out = a.clone();
    out.add_scaled(b, weight);
    out
}
