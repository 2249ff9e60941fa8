//! Desk-scale optimizer: a shared per-position affine encoder plus the
//! projection heads, trained with SGD (momentum, weight decay) under a
//! cosine learning-rate schedule.
//!
//! `.mdl` layout: magic `"MODEMDL1"`, u32 version, u32 `E_raw`, `E`, `e`, then
//! row-major f32 LE tensors `W_enc, b_enc, W_k, b_k, W_q, b_q, W_v, b_v`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::alpa::grad::{objective_with_grad, Gradients, Objective, ObjectiveSpec};
use crate::alpa::{AlpaBatch, ProjectionHeads, DEFAULT_HEAD_DIM, DEFAULT_TAU};
use crate::codec::{read_file, Reader, Writer};
use crate::error::{contract, Error, Result};
use crate::features::{FeatureDataset, FeatureMap};
use crate::linalg::Matrix;
use crate::rng::{self, standard_normal, streams, Rng};
use crate::scalar::{all_finite, Scalar};

pub const MDL_MAGIC: &[u8; 8] = b"MODEMDL1";
pub const MDL_VERSION: u32 = 1;

/// Affine map applied independently at every position (a 1x1 convolution).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// `E_raw x E`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        contract!(
            bias.len() == weight.cols(),
            "encoder bias has length {}, weight has {} columns",
            bias.len(),
            weight.cols()
        );
        if !weight.is_finite() || !all_finite(&bias) {
            return Err(Error::Validation("encoder contains non-finite entries".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: vec![T::zero(); dim],
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Matrix::from_fn(in_dim, out_dim, |_, _| T::lit(rng.random_range(-bound..=bound))),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.in_dim(), self.out_dim()),
            bias: vec![T::zero(); self.out_dim()],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn tensors(&self) -> [&[T]; 2] {
        [self.weight.as_slice(), &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }

    pub fn apply_rows(&self, rows: &Matrix<T>) -> Matrix<T> {
        let mut out = rows.matmul(&self.weight);
        out.add_row_vector(&self.bias);
        out
    }

    /// Encodes every position of `map`.
    pub fn apply(&self, map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        contract!(
            map.channels() == self.in_dim(),
            "map has {} channels, encoder expects {}",
            map.channels(),
            self.in_dim()
        );
        let shape = crate::features::MapShape::new(map.height(), map.width(), self.out_dim())?;
        FeatureMap::from_rows(shape, &self.apply_rows(&map.to_rows()), map.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Global supervised contrastive base regularized by the local objective.
    AlpaTrain,
    /// Finetune a pretrained model with the local objective alone.
    AlpaFinetune,
    /// Global supervised contrastive base alone.
    SupCon,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "mode-t" | "train" => Ok(TrainMode::AlpaTrain),
            "f" | "mode-f" | "finetune" => Ok(TrainMode::AlpaFinetune),
            "supcon" | "base" => Ok(TrainMode::SupCon),
            other => Err(Error::Contract(format!("unknown training mode {other:?} (T, F or supcon)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::AlpaTrain => "T",
            TrainMode::AlpaFinetune => "F",
            TrainMode::SupCon => "supcon",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub mode: TrainMode,
    pub lambda: T,
    /// Initial learning rate; decays to 0 with a cosine schedule over all steps.
    pub eta: T,
    pub momentum: T,
    pub weight_decay: T,
    pub epochs: usize,
    /// Instances per batch (`N`); each contributes two views.
    pub batch_n: usize,
    pub tau: T,
    /// View noise std as a fraction of the dataset's per-channel std.
    pub view_noise: T,
    pub shift_views: bool,
    pub prepool: bool,
    /// Head width `e` used when no initial model is supplied.
    pub head_dim: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            mode: TrainMode::AlpaFinetune,
            lambda: T::one(),
            eta: T::lit(0.1),
            momentum: T::lit(0.9),
            weight_decay: T::lit(1e-4),
            epochs: 30,
            batch_n: 8,
            tau: T::lit(DEFAULT_TAU),
            view_noise: T::lit(0.05),
            shift_views: true,
            prepool: false,
            head_dim: DEFAULT_HEAD_DIM,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel<T> {
    pub encoder: EncoderParams<T>,
    pub heads: ProjectionHeads<T>,
    pub loss_history: Vec<T>,
}

impl<T: Scalar> TrainedModel<T> {
    /// Random encoder and heads (fan-in uniform), zero biases.
    pub fn fresh(raw_dim: usize, dim: usize, head_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, streams::INIT);
        let encoder = EncoderParams::init(raw_dim, dim, &mut r);
        let heads = ProjectionHeads::init(dim, head_dim, &mut r);
        Self {
            encoder,
            heads,
            loss_history: Vec::new(),
        }
    }

    /// Identity encoder with freshly initialized heads: the starting point for
    /// finetuning features produced by an external backbone.
    pub fn identity_pretrained(dim: usize, head_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, streams::INIT);
        Self {
            encoder: EncoderParams::identity(dim),
            heads: ProjectionHeads::init(dim, head_dim, &mut r),
            loss_history: Vec::new(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.encoder.in_dim(), self.encoder.out_dim(), self.heads.head_dim())
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors().to_vec();
        v.extend(self.heads.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.encoder.tensors_mut().into_iter().collect();
        v.extend(self.heads.tensors_mut());
        v
    }
}

pub fn save_model<T: Scalar>(model: &TrainedModel<T>, path: &Path) -> Result<()> {
    let (raw, dim, e) = model.dims();
    let mut w = Writer::default();
    w.bytes(MDL_MAGIC);
    w.u32(MDL_VERSION);
    w.len_u32(raw, path, "E_raw")?;
    w.len_u32(dim, path, "E")?;
    w.len_u32(e, path, "e")?;
    for t in model.tensors() {
        t.iter().for_each(|v| w.f32(v.as_f32()));
    }
    w.finish(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<TrainedModel<T>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(MDL_MAGIC)?;
    r.version(MDL_VERSION)?;
    let raw = r.u32("E_raw")? as usize;
    let dim = r.u32("E")? as usize;
    let e = r.u32("e")? as usize;
    if raw == 0 || dim == 0 || e == 0 {
        return Err(r.format_err(format!("invalid dimensions ({raw}, {dim}, {e})")));
    }
    let mut read = |len: usize, what: &str| -> Result<Vec<T>> {
        let v = r.f32s(len, what)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("{}: {what} has non-finite entries", path.display())));
        }
        Ok(v.into_iter().map(|x| T::lit(x as f64)).collect())
    };
    let w_enc = Matrix::new(raw, dim, read(raw * dim, "W_enc")?)?;
    let b_enc = read(dim, "b_enc")?;
    let w_k = Matrix::new(dim, e, read(dim * e, "W_k")?)?;
    let b_k = read(e, "b_k")?;
    let w_q = Matrix::new(dim, e, read(dim * e, "W_q")?)?;
    let b_q = read(e, "b_q")?;
    let w_v = Matrix::new(dim, e, read(dim * e, "W_v")?)?;
    let b_v = read(e, "b_v")?;
    r.finish()?;
    Ok(TrainedModel {
        encoder: EncoderParams::new(w_enc, b_enc)?,
        heads: ProjectionHeads::with_biases(w_k, b_k, w_q, b_q, w_v, b_v)?,
        loss_history: Vec::new(),
    })
}

/// Two stochastic views: independent Gaussian noise (std `sigma` per value)
/// and, when `shift` is set, an independent cyclic grid shift of 0 or 1 per axis.
pub fn make_views<T: Scalar>(
    instance: &FeatureMap<T>,
    sigma: T,
    shift: bool,
    rng: &mut Rng,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    contract!(sigma >= T::zero(), "view noise must be non-negative");
    let mut view = || -> Result<FeatureMap<T>> {
        let (h, w, e) = (instance.height(), instance.width(), instance.channels());
        let (dr, dc) = if shift {
            (rng.random_range(0..2usize), rng.random_range(0..2usize))
        } else {
            (0, 0)
        };
        let mut values = Vec::with_capacity(instance.values().len());
        for r in 0..h {
            for c in 0..w {
                let src = instance.at((r + dr) % h, (c + dc) % w);
                debug_assert_eq!(src.len(), e);
                for &v in src {
                    let noise = if sigma > T::zero() {
                        sigma * T::lit(standard_normal(rng))
                    } else {
                        T::zero()
                    };
                    values.push(v + noise);
                }
            }
        }
        FeatureMap::new(instance.shape(), values, instance.label())
    };
    let a = view()?;
    let b = view()?;
    Ok((a, b))
}

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn for_model(model: &TrainedModel<T>) -> Self {
        Self {
            velocity: model.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }
}

/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - eta * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    eta: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    contract!(
        params.len() == grads.len() && params.len() == velocity.len(),
        "sgd shapes differ: params {}, grads {}, velocity {}",
        params.len(),
        grads.len(),
        velocity.len()
    );
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p = *p - eta * *v;
    }
    Ok(())
}

fn apply_sgd<T: Scalar>(
    model: &mut TrainedModel<T>,
    grads: &Gradients<T>,
    state: &mut SgdState<T>,
    cfg: &TrainConfig<T>,
    eta: T,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    contract!(
        grad_tensors.len() == state.velocity.len(),
        "velocity state does not mirror the parameters"
    );
    for ((p, g), v) in model
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.velocity.iter_mut())
    {
        sgd_step(p, g, v, eta, cfg.momentum, cfg.weight_decay)?;
    }
    Ok(())
}

/// `eta * (1 + cos(pi * step / total)) / 2`, reaching 0 at `step = total`.
pub fn cosine_lr<T: Scalar>(eta: T, step: usize, total: usize) -> T {
    if total == 0 {
        return eta;
    }
    let frac = step as f64 / total as f64;
    eta * T::lit(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Root mean square over channels of the per-channel standard deviation.
fn channel_std<T: Scalar>(dataset: &FeatureDataset<T>) -> T {
    let e = dataset.shape().channels;
    let mut sum = vec![0.0f64; e];
    let mut sq = vec![0.0f64; e];
    let mut n = 0usize;
    for m in dataset.maps() {
        for p in m.positions() {
            for (c, &v) in p.iter().enumerate() {
                sum[c] += v.as_f64();
                sq[c] += v.as_f64() * v.as_f64();
            }
            n += 1;
        }
    }
    if n == 0 {
        return T::zero();
    }
    let nf = n as f64;
    let mean_var = (0..e)
        .map(|c| (sq[c] / nf - (sum[c] / nf).powi(2)).max(0.0))
        .sum::<f64>()
        / e as f64;
    T::lit(mean_var.sqrt())
}

/// Runs `cfg.epochs` of shuffled mini-batch SGD on the configured objective.
pub fn train<T: Scalar>(
    dataset: &FeatureDataset<T>,
    cfg: &TrainConfig<T>,
    init: Option<TrainedModel<T>>,
) -> Result<TrainedModel<T>> {
    contract!(cfg.eta > T::zero(), "learning rate must be positive");
    contract!(cfg.lambda >= T::zero(), "lambda must be non-negative");
    contract!(cfg.batch_n >= 2, "batch size N must be at least 2");
    contract!(dataset.is_labeled(), "training data must be labeled");
    let raw_dim = dataset.shape().channels;
    let mut model = match init {
        Some(m) => m,
        None => {
            contract!(
                cfg.mode != TrainMode::AlpaFinetune,
                "finetune mode requires an initial (pretrained) model"
            );
            TrainedModel::fresh(raw_dim, raw_dim, cfg.head_dim, cfg.seed)
        }
    };
    contract!(
        model.encoder.in_dim() == raw_dim,
        "model expects {} input channels, dataset has {raw_dim}",
        model.encoder.in_dim()
    );
    model.loss_history.clear();
    if cfg.epochs == 0 {
        return Ok(model);
    }

    let objective = match cfg.mode {
        TrainMode::AlpaFinetune => Objective::Finetune,
        TrainMode::AlpaTrain => Objective::Train { lambda: cfg.lambda },
        TrainMode::SupCon => Objective::Base,
    };
    let spec = ObjectiveSpec {
        objective,
        tau: cfg.tau,
        prepool: cfg.prepool,
    };
    let sigma = cfg.view_noise * channel_std(dataset);
    let mut rng = rng::stream(cfg.seed, streams::TRAIN_LOOP);
    let mut state = SgdState::for_model(&model);
    let n = dataset.len();
    let full = n / cfg.batch_n;
    let batches_per_epoch = full + usize::from(n % cfg.batch_n >= 2);
    contract!(batches_per_epoch > 0, "dataset of {n} examples yields no batch of at least 2");
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_n).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * chunk.len());
            for &idx in chunk {
                let (a, v) = make_views(&dataset.maps()[idx], sigma, cfg.shift_views, &mut rng)?;
                views.push(a);
                views.push(v);
            }
            let batch = AlpaBatch::new(views)?;
            let out = objective_with_grad(&batch, &model.encoder, &model.heads, &spec)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch} batch {b}: loss is {}", out.loss)));
            }
            let eta = cosine_lr(cfg.eta, step, total_steps);
            apply_sgd(&mut model, &out.grads, &mut state, cfg, eta)?;
            step += 1;
            epoch_loss += out.loss.as_f64();
            batches += 1;
        }
        model.loss_history.push(T::lit(epoch_loss / batches as f64));
    }
    if !model.tensors().iter().all(|t| all_finite(t)) {
        return Err(Error::Numeric("parameters became non-finite during training".into()));
    }
    Ok(model)
}
