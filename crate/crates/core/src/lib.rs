//! Cross-attention contrastive training and multi-scale k-NN
//! out-of-distribution detection over spatial feature maps.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*F64` / `*F32` aliases below fix the type.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod scalar;
mod error;
pub mod linalg;
pub mod rng;
pub(crate) mod codec;
pub mod features;
pub mod synth;
pub mod alpa;
pub mod trainer;
pub mod knn;
pub mod detector;
pub mod metrics;
pub mod pipeline;

pub use alpa::grad::{grad_alpa, objective_with_grad, Gradients, LossAndGrad, Objective, ObjectiveSpec};
pub use alpa::{
    aligned_similarity, alpa_loss, attention_weights, combined_loss, cross_attention_align, supcon_loss, AlpaBatch,
    LossMode, LossValue, ProjectedTriple, ProjectionHeads,
};
pub use detector::{
    csd_score, decide, extract_multiscale, fit_bank, knn_score_global, score_dataset, select_threshold, Decision,
    MultiScaleSet, ScaleMode, Scored, Verdict,
};
pub use error::{Error, Result};
pub use features::{
    global_pool, load_features, pool2x2, save_features, FeatureDataset, FeatureMap, GlobalVector, MapShape, NO_LABEL,
};
pub use knn::{
    build_bank, load_bank, rk_query, rk_query_batch, save_bank, subsample_bank, NeighborResult, Provenance,
    RepresentationBank, ScaleTag,
};
pub use linalg::Matrix;
pub use metrics::{auroc, fpr_at_tpr, id_accuracy, EvalReport};
pub use scalar::Scalar;
pub use synth::{gen_synthetic, SynthSpec, SynthSplits};
pub use trainer::{load_model, save_model, train, EncoderParams, TrainConfig, TrainMode, TrainedModel};

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type FeatureMapF64 = FeatureMap<f64>;
pub type FeatureMapF32 = FeatureMap<f32>;
pub type FeatureDatasetF64 = FeatureDataset<f64>;
pub type FeatureDatasetF32 = FeatureDataset<f32>;
pub type BankF64 = RepresentationBank<f64>;
pub type BankF32 = RepresentationBank<f32>;
pub type ModelF64 = TrainedModel<f64>;
pub type ModelF32 = TrainedModel<f32>;
pub type TrainConfigF64 = TrainConfig<f64>;
pub type TrainConfigF32 = TrainConfig<f32>;
