//! File-to-file stages: gen, train, fit, score, eval and bench. All run in
//! `f64`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::detector::{
    fit_bank, read_scores_csv, score_dataset, score_rows, select_threshold, write_scores_csv, ScaleMode, ScoreRow,
};
use crate::error::{contract, Error, Result};
use crate::features::{load_features, save_features, FeatureDataset};
use crate::knn::{load_bank, save_bank, RepresentationBank};
use crate::metrics::{id_accuracy, roc_curve, EvalReport};
use crate::synth::{gen_synthetic, SynthSpec};
use crate::trainer::{load_model, save_model, train, EncoderParams, TrainConfig, TrainMode, TrainedModel};

pub const ID_TAG: &str = "id";
pub const OOD_TAG: &str = "ood";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenOutputs {
    pub train: PathBuf,
    pub id_test: PathBuf,
    pub ood_test: PathBuf,
}

impl GenOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.fmb"),
            id_test: dir.join("id_test.fmb"),
            ood_test: dir.join("ood_test.fmb"),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the three synthetic splits.
pub fn run_gen(spec: &SynthSpec, out: &GenOutputs) -> Result<()> {
    let splits = gen_synthetic::<f64>(spec)?;
    for (d, p) in [(&splits.train, &out.train), (&splits.id_test, &out.id_test), (&splits.ood_test, &out.ood_test)] {
        ensure_parent(p)?;
        save_features(d, p)?;
    }
    Ok(())
}

/// Trains from `init` (a model file) or from scratch; finetuning without an
/// init starts from an identity encoder. Writes the model and a per-epoch
/// loss CSV.
pub fn run_train(
    train_path: &Path,
    cfg: &TrainConfig<f64>,
    init: Option<&Path>,
    model_out: &Path,
    loss_out: &Path,
) -> Result<TrainedModel<f64>> {
    let data = load_features::<f64>(train_path)?;
    let init = match init {
        Some(p) => Some(load_model::<f64>(p)?),
        None if cfg.mode == TrainMode::AlpaFinetune => Some(TrainedModel::identity_pretrained(
            data.shape().channels,
            cfg.head_dim,
            cfg.seed,
        )),
        None => None,
    };
    let model = train(&data, cfg, init)?;
    ensure_parent(model_out)?;
    save_model(&model, model_out)?;
    write_text(loss_out, &loss_csv(&model.loss_history))?;
    Ok(model)
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{},{l:?}", i + 1).expect("write to String");
    }
    s
}

/// Encoder from a model file, or the identity when no model is given.
pub fn load_encoder(model: Option<&Path>, channels: usize) -> Result<EncoderParams<f64>> {
    match model {
        Some(p) => {
            let m = load_model::<f64>(p)?;
            contract!(
                m.encoder.in_dim() == channels,
                "model expects {} input channels, data has {channels}",
                m.encoder.in_dim()
            );
            Ok(m.encoder)
        }
        None => Ok(EncoderParams::identity(channels)),
    }
}

pub fn run_fit(
    train_path: &Path,
    model: Option<&Path>,
    mode: ScaleMode,
    alpha: f64,
    seed: u64,
    bank_out: &Path,
) -> Result<RepresentationBank<f64>> {
    let data = load_features::<f64>(train_path)?;
    let encoder = load_encoder(model, data.shape().channels)?;
    let bank = fit_bank(&data, &encoder, mode, alpha, seed)?;
    ensure_parent(bank_out)?;
    save_bank(&bank, bank_out)?;
    Ok(bank)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreOutputs {
    pub rows: Vec<ScoreRow>,
    pub epsilon: f64,
}

/// Scores the ID test set (which also fixes the threshold) and, when given,
/// an OOD set; writes one CSV with ID rows first.
#[allow(clippy::too_many_arguments)]
pub fn run_score(
    id_path: &Path,
    ood_path: Option<&Path>,
    model: Option<&Path>,
    bank_path: &Path,
    k: usize,
    mode: ScaleMode,
    tpr: f64,
    scores_out: &Path,
) -> Result<ScoreOutputs> {
    let id = load_features::<f64>(id_path)?;
    let bank = load_bank::<f64>(bank_path)?;
    let encoder = load_encoder(model, id.shape().channels)?;
    contract!(
        encoder.out_dim() == bank.dim(),
        "bank holds {}-dim vectors, encoder emits {}",
        bank.dim(),
        encoder.out_dim()
    );
    let id_scored = score_dataset(&id, &encoder, &bank, k, mode)?;
    let eps = select_threshold(&id_scored.iter().map(|s| s.score).collect::<Vec<_>>(), tpr)?;
    let mut rows = score_rows(&id_scored, ID_TAG, eps);
    if let Some(p) = ood_path {
        let ood = load_features::<f64>(p)?;
        contract!(ood.shape() == id.shape(), "OOD and ID maps differ in shape");
        rows.extend(score_rows(&score_dataset(&ood, &encoder, &bank, k, mode)?, OOD_TAG, eps));
    }
    ensure_parent(scores_out)?;
    write_scores_csv(&rows, scores_out)?;
    Ok(ScoreOutputs { rows, epsilon: eps })
}

/// Accuracy inputs for the report: train and ID test features plus model.
#[derive(Clone, Debug)]
pub struct AccuracyInputs<'a> {
    pub train: &'a Path,
    pub id_test: &'a Path,
    pub model: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct EvalOutputs {
    /// key=value report.
    pub report: PathBuf,
    /// Header plus one report row.
    pub csv: PathBuf,
    /// ROC points, OOD as the positive class.
    pub roc: PathBuf,
}

impl EvalOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            report: dir.join("report.txt"),
            csv: dir.join("report.csv"),
            roc: dir.join("roc.csv"),
        }
    }
}

pub fn run_eval(scores: &Path, accuracy: Option<AccuracyInputs<'_>>, out: &EvalOutputs) -> Result<EvalReport> {
    let rows = read_scores_csv(scores)?;
    let pick = |tag: &str| rows.iter().filter(|r| r.dataset_tag == tag).map(|r| r.score).collect::<Vec<_>>();
    let (id, ood) = (pick(ID_TAG), pick(OOD_TAG));
    let id_acc = match accuracy {
        Some(a) => {
            let train: FeatureDataset<f64> = load_features(a.train)?;
            let test = load_features(a.id_test)?;
            let enc = load_encoder(a.model, train.shape().channels)?;
            Some(id_accuracy(&test, &train, &enc)?)
        }
        None => None,
    };
    let report = EvalReport::from_scores(&id, &ood, id_acc)?;
    write_text(&out.report, &format!("{report}\n"))?;
    write_text(&out.csv, &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    let mut roc = String::from("fpr,tpr\n");
    for p in roc_curve(&id, &ood)? {
        writeln!(roc, "{},{}", p.fpr, p.tpr).expect("write to String");
    }
    write_text(&out.roc, &roc)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub alpha: f64,
    pub k: usize,
    pub bank_rows: usize,
    pub ms_per_image: f64,
}

/// Subsampling ratios and the k used with each.
pub const BENCH_GRID: [(f64, usize); 4] = [(5.0, 10), (10.0, 20), (50.0, 30), (100.0, 50)];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOutputs {
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

/// Times CSD scoring for each (α, k) of [`BENCH_GRID`] plus the global-only
/// baseline at full α. A k larger than its bank is clamped to the bank size.
pub fn run_bench(
    train_path: &Path,
    query_path: &Path,
    model: Option<&Path>,
    mode: ScaleMode,
    seed: u64,
    bench_out: &Path,
) -> Result<BenchOutputs> {
    let train_data = load_features::<f64>(train_path)?;
    let queries = load_features::<f64>(query_path)?;
    contract!(!queries.is_empty(), "bench needs query examples");
    let encoder = load_encoder(model, train_data.shape().channels)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut time = |method: &str, bank: &RepresentationBank<f64>, alpha: f64, k: usize, mode| -> Result<()> {
        let start = Instant::now();
        score_dataset(&queries, &encoder, bank, k, mode)?;
        rows.push(BenchRow {
            method: method.to_string(),
            alpha,
            k,
            bank_rows: bank.len(),
            ms_per_image: start.elapsed().as_secs_f64() * 1e3 / queries.len() as f64,
        });
        Ok(())
    };
    for &(alpha, k) in &BENCH_GRID {
        let bank = fit_bank(&train_data, &encoder, mode, alpha, seed)?;
        if k > bank.len() {
            warnings.push(format!("alpha={alpha}: k={k} clamped to bank size {}", bank.len()));
        }
        time("csd", &bank, alpha, k.min(bank.len()), mode)?;
    }
    let global = fit_bank(&train_data, &encoder, ScaleMode::GlobalOnly, 100.0, seed)?;
    let k = BENCH_GRID[BENCH_GRID.len() - 1].1.min(global.len());
    time("knn", &global, 100.0, k, ScaleMode::GlobalOnly)?;

    let lat: Vec<f64> = rows.iter().filter(|r| r.method == "csd").map(|r| r.ms_per_image).collect();
    if lat.windows(2).any(|w| w[1] < w[0]) {
        warnings.push("csd latency is not non-decreasing in alpha".to_string());
    }
    let mut csv = String::from("method,alpha,k,bank_rows,ms_per_image\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{:.6}", r.method, r.alpha, r.k, r.bank_rows, r.ms_per_image).expect("write to String");
    }
    write_text(bench_out, &csv)?;
    Ok(BenchOutputs { rows, warnings })
}
