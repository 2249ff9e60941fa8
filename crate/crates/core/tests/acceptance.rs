//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use mode_core::alpa::grad::{objective_with_grad, Objective};
use mode_core::detector::{decide_score, Verdict};
use mode_core::knn::{build_bank, rk_query, subsample_bank, Provenance, ScaleTag};
use mode_core::metrics::{roc_curve, trapezoid_auc};
use mode_core::pipeline::{self, AccuracyInputs, EvalOutputs, GenOutputs};
use mode_core::{
    alpa_loss, attention_weights, auroc, csd_score, cross_attention_align, fit_bank, fpr_at_tpr, gen_synthetic,
    knn_score_global, rng, select_threshold, supcon_loss, train, AlpaBatch, EncoderParams, FeatureDataset, Matrix,
    ScaleMode, SynthSpec, TrainConfig, TrainMode, TrainedModel,
};
use rand::Rng as _;

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut res = f();
        let took = start.elapsed();
        if res.is_ok() && took > budget {
            res = Err(format!("took {took:.2?}, budget {budget:?}"));
        }
        match res {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {name}: {detail} [{took:.2?}]");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn attention_correctness() -> Outcome {
    let mut r = rng::seeded(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let hw = r.random_range(1..=16usize);
        let e = r.random_range(1..=8usize);
        let q = Matrix::new(hw, e, gaussian(&mut r, hw * e)).unwrap();
        let k = Matrix::new(hw, e, gaussian(&mut r, hw * e)).unwrap();
        let a = attention_weights(&q, &k, e).map_err(|x| x.to_string())?;
        for row in a.row_iter() {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst < 1e-9, || format!("row sum off by {worst:e}"))?;
    for _ in 0..100 {
        let e = r.random_range(1..=8usize);
        let row = |r: &mut _| Matrix::new(1, e, gaussian(r, e)).unwrap();
        let (k, q, v) = (row(&mut r), row(&mut r), row(&mut r));
        let aligned = cross_attention_align(&k, &q, &v, e).unwrap();
        ensure(aligned == v, || "HW = 1 alignment changed the values".into())?;
    }
    Ok(format!("1000 instances, max |row sum - 1| = {worst:.1e}; HW = 1 exact"))
}

fn gradient_fidelity() -> Outcome {
    let cases = [
        (Objective::Finetune, false),
        (Objective::Train { lambda: 1.0 }, false),
        (Objective::Finetune, true),
        (Objective::Train { lambda: 0.5 }, true),
    ];
    let label_sets: [&[i32]; 2] = [&[0, 0, 1, 1], &[0, 0, 0, 0]];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (objective, prepool) in cases {
        let s = spec(objective, prepool);
        for seed in 0..20u64 {
            let mut r = rng::seeded(5000 + seed);
            let batch = random_batch(&mut r, label_sets[seed as usize % 2], 2, 2, 3);
            let (enc, heads) = random_params(&mut r, 3, 3, 2);
            let got = objective_with_grad(&batch, &enc, &heads, &s).map_err(|e| e.to_string())?;
            let v = worst_violation(&got.grads.tensors(), &numeric_gradient(&batch, &enc, &heads, &s));
            ensure(v <= 1.0, || format!("seed {seed} {objective:?} prepool={prepool}: ratio {v:.3}"))?;
            worst = worst.max(v);
            checked += 1;
        }
    }
    Ok(format!("{checked} instances (MODE-F, MODE-T, with/without prepool), worst error/tolerance {worst:.3}"))
}

fn degenerate_losses() -> Outcome {
    let mut r = rng::seeded(9);
    let m = random_map(&mut r, 4, 4, 3, 0);
    let batch = AlpaBatch::new(vec![m.clone(), m.clone(), m.clone(), m]).unwrap();
    let (_, heads) = random_params(&mut r, 3, 3, 4);
    let expect = 4.0 * 3f64.ln();
    let la = alpa_loss(&batch, &heads, 0.1).unwrap().value;
    let ls = supcon_loss(&batch, &heads.w_v, 0.1).unwrap().value;
    ensure((la - expect).abs() < 1e-9, || format!("L_alpa = {la}, want {expect}"))?;
    ensure((ls - expect).abs() < 1e-9, || format!("L_supcon = {ls}, want {expect}"))?;

    let data = gen_synthetic::<f64>(&SynthSpec::default()).unwrap();
    let run = |mode, lambda| {
        let cfg = TrainConfig::<f64> {
            mode,
            lambda,
            epochs: 5,
            head_dim: 16,
            eta: 1e-3,
            seed: 3,
            ..Default::default()
        };
        train(&data.train, &cfg, Some(TrainedModel::fresh(8, 8, 16, 3))).unwrap()
    };
    let a = run(TrainMode::AlpaTrain, 0.0);
    let b = run(TrainMode::SupCon, 1.0);
    let bits = |m: &TrainedModel<f64>| {
        m.tensors()
            .iter()
            .flat_map(|t| t.iter().map(|x| x.to_bits()))
            .chain(m.loss_history.iter().map(|x| x.to_bits()))
            .collect::<Vec<_>>()
    };
    ensure(bits(&a) == bits(&b), || "lambda = 0 trajectory differs from supcon-only".into())?;
    Ok(format!("L_alpa = L_supcon = 4 log 3; lambda = 0 matches supcon over {} epochs bit for bit", a.loss_history.len()))
}

fn knn_oracle() -> Outcome {
    let mut r = rng::seeded(2024);
    let mut queries = 0usize;
    for bank_i in 0..50 {
        let n = r.random_range(50..=1000usize);
        let dim = r.random_range(1..=32usize);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, dim)).collect();
        let labels: Vec<i32> = (0..n).map(|_| r.random_range(0..4)).collect();
        let prov = (0..n as u32)
            .map(|i| Provenance {
                example_id: i,
                scale: ScaleTag::Global,
            })
            .collect();
        let bank = build_bank(&rows, prov).unwrap();
        let alpha = [5.0, 10.0, 50.0][bank_i % 3];
        let sub = subsample_bank(&bank, &labels, alpha, bank_i as u64).unwrap();
        let unit: Vec<Vec<f64>> = rows
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        for _ in 0..100 {
            let q = gaussian(&mut r, dim);
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut all: Vec<(f64, usize)> = unit
                .iter()
                .enumerate()
                .map(|(i, u)| (u.iter().zip(&q).map(|(a, b)| (a - b / qn).powi(2)).sum::<f64>().sqrt(), i))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for k in [1usize, 5, 50] {
                let got = rk_query(&bank, &q, k).map_err(|e| e.to_string())?;
                for (idx, (&(d, id), (&gid, &gd))) in all[..k]
                    .iter()
                    .zip(got.neighbor_ids.iter().zip(&got.distances))
                    .enumerate()
                {
                    ensure(id == gid && (d - gd).abs() < 1e-9, || {
                        format!("bank {bank_i} k {k} rank {idx}: got ({gid}, {gd}), oracle ({id}, {d})")
                    })?;
                }
                let ks = k.min(sub.len());
                let rs = rk_query(&sub, &q, ks).unwrap().r_k;
                let rf = rk_query(&bank, &q, ks).unwrap().r_k;
                ensure(rs >= rf - 1e-12, || format!("bank {bank_i}: subsampled r_k {rs} < full {rf}"))?;
            }
            queries += 1;
        }
    }
    Ok(format!("50 banks x {} queries x k in {{1, 5, 50}} match; subsampling monotone", queries / 50))
}

struct Experiment {
    csd_fpr: f64,
    csd_auroc: f64,
    knn_fpr: f64,
    knn_auroc: f64,
    dominance_gap: f64,
    global_only_equal: bool,
    scored: usize,
}

fn scores(
    d: &FeatureDataset<f64>,
    enc: &EncoderParams<f64>,
    bank: &mode_core::BankF64,
    mode: ScaleMode,
) -> Vec<f64> {
    d.maps()
        .iter()
        .enumerate()
        .map(|(i, m)| csd_score(m, i, enc, bank, 50, mode).unwrap().score)
        .collect()
}

fn synthetic_experiment() -> Experiment {
    let data = gen_synthetic::<f64>(&SynthSpec::default()).unwrap();
    let e = data.train.shape().channels;
    let cfg = TrainConfig::<f64> {
        mode: TrainMode::AlpaFinetune,
        eta: 1e-4,
        ..Default::default()
    };
    let model = train(&data.train, &cfg, Some(TrainedModel::identity_pretrained(e, cfg.head_dim, 0))).unwrap();
    let identity = EncoderParams::identity(e);
    let mode = ScaleMode::GlobalPlusLocalPlusPlus;

    let csd_bank = fit_bank(&data.train, &model.encoder, mode, 100.0, 0).unwrap();
    let (csd_id, csd_ood) = (
        scores(&data.id_test, &model.encoder, &csd_bank, mode),
        scores(&data.ood_test, &model.encoder, &csd_bank, mode),
    );
    let knn_bank = fit_bank(&data.train, &identity, ScaleMode::GlobalOnly, 100.0, 0).unwrap();
    let knn = |d: &FeatureDataset<f64>| -> Vec<f64> {
        d.maps()
            .iter()
            .enumerate()
            .map(|(i, m)| knn_score_global(m, i, &identity, &knn_bank, 50).unwrap().score)
            .collect()
    };
    let (knn_id, knn_ood) = (knn(&data.id_test), knn(&data.ood_test));

    // Dominance and GlobalOnly equivalence, for both encoders.
    let mut gap = f64::NEG_INFINITY;
    let mut equal = true;
    let mut scored = 0;
    for enc in [&model.encoder, &identity] {
        let multi = fit_bank(&data.train, enc, mode, 100.0, 0).unwrap();
        let global = fit_bank(&data.train, enc, ScaleMode::GlobalOnly, 100.0, 0).unwrap();
        for d in [&data.id_test, &data.ood_test] {
            for (i, m) in d.maps().iter().enumerate() {
                let c = csd_score(m, i, enc, &multi, 50, mode).unwrap().score;
                let b = knn_score_global(m, i, enc, &global, 50).unwrap().score;
                let g = csd_score(m, i, enc, &global, 50, ScaleMode::GlobalOnly).unwrap().score;
                gap = gap.max(c - b);
                equal &= g.to_bits() == b.to_bits();
                scored += 1;
            }
        }
    }
    Experiment {
        csd_fpr: fpr_at_tpr(&csd_id, &csd_ood, 0.95).unwrap(),
        csd_auroc: auroc(&csd_id, &csd_ood).unwrap(),
        knn_fpr: fpr_at_tpr(&knn_id, &knn_ood, 0.95).unwrap(),
        knn_auroc: auroc(&knn_id, &knn_ood).unwrap(),
        dominance_gap: gap,
        global_only_equal: equal,
        scored,
    }
}

fn metric_oracles() -> Outcome {
    let mut r = rng::seeded(77);
    for trial in 0..200 {
        let n = r.random_range(1..=200usize);
        let m = r.random_range(1..=200usize);
        let levels = r.random_range(2..50u32);
        let mut draw = |n| (0..n).map(|_| f64::from(r.random_range(0..levels)) / 7.0).collect::<Vec<_>>();
        let (id, ood) = (draw(n), draw(m));
        let (mut gt, mut eq) = (0u64, 0u64);
        for o in &ood {
            for i in &id {
                if o > i {
                    gt += 1;
                } else if o == i {
                    eq += 1;
                }
            }
        }
        let oracle = (gt as f64 + 0.5 * eq as f64) / (n as f64 * m as f64);
        let a = auroc(&id, &ood).unwrap();
        ensure(a == oracle, || format!("trial {trial}: auroc {a} vs pair count {oracle}"))?;
        let t = trapezoid_auc(&roc_curve(&id, &ood).unwrap());
        ensure((a - t).abs() < 1e-9, || format!("trial {trial}: trapezoid {t} vs {a}"))?;

        // Sweep the strict-rule threshold family: below the minimum, every
        // midpoint between consecutive distinct ID scores, max + 1e-9.
        let mut distinct = id.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let mut cands = vec![distinct[0]];
        cands.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        cands.push(distinct[distinct.len() - 1] + 1e-9);
        let need = 0.95 * n as f64;
        let best = cands
            .iter()
            .find(|&&t| id.iter().filter(|&&s| s < t).count() as f64 >= need)
            .copied()
            .unwrap();
        let sweep = ood.iter().filter(|&&s| s < best).count() as f64 / m as f64;
        let fpr = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        ensure(fpr == sweep, || format!("trial {trial}: fpr {fpr} vs sweep {sweep}"))?;

        let same = auroc(&id, &id).unwrap();
        ensure(same == 0.5, || format!("trial {trial}: identical-distribution auroc {same}"))?;
    }
    Ok("200 trials: pair counting exact, trapezoid within 1e-9, FPR sweep exact, identical = 0.5".into())
}

fn run_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let gen = GenOutputs::in_dir(dir);
    let spec = SynthSpec {
        per_class: 20,
        test_per_class: 10,
        ood_per_class: 40,
        ..SynthSpec::default()
    };
    pipeline::run_gen(&spec, &gen).unwrap();
    let cfg = TrainConfig::<f64> {
        epochs: 3,
        eta: 1e-4,
        head_dim: 16,
        ..Default::default()
    };
    let model = dir.join("model.mdl");
    pipeline::run_train(&gen.train, &cfg, None, &model, &dir.join("loss.csv")).unwrap();
    let bank = dir.join("bank.bnk");
    pipeline::run_fit(&gen.train, Some(&model), ScaleMode::GlobalPlusLocalPlusPlus, 50.0, 7, &bank).unwrap();
    let scores = dir.join("scores.csv");
    pipeline::run_score(
        &gen.id_test,
        Some(&gen.ood_test),
        Some(&model),
        &bank,
        10,
        ScaleMode::GlobalPlusLocalPlusPlus,
        0.95,
        &scores,
    )
    .unwrap();
    let acc = AccuracyInputs {
        train: &gen.train,
        id_test: &gen.id_test,
        model: Some(&model),
    };
    pipeline::run_eval(&scores, Some(acc), &EvalOutputs::in_dir(dir)).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_pipeline(a.path());
    let fb = run_pipeline(b.path());
    ensure(fa.len() == fb.len(), || "different file sets".into())?;
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        ensure(na == nb && da == db, || format!("{na} differs between runs"))?;
    }
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    Ok(format!("{} files identical: {}", fa.len(), names.join(", ")))
}

fn threshold_semantics() -> Outcome {
    ensure(decide_score(0.5, 0.5).verdict == Verdict::Ood, || "score = eps must be OOD".into())?;
    let mut r = rng::seeded(31);
    let mut sets = 0;
    for n in 1..=50usize {
        for _ in 0..200 {
            let levels = r.random_range(1..=n as u32 + 1);
            let s: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) * 0.25).collect();
            let eps = select_threshold(&s, 0.95).map_err(|e| e.to_string())?;
            let admitted: Vec<f64> = s.iter().copied().filter(|&x| x < eps).collect();
            let tpr = admitted.len() as f64 / n as f64;
            ensure(tpr >= 0.95, || format!("n {n}: TPR {tpr}"))?;
            let top = admitted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let below = s.iter().filter(|&&x| x < top).count() as f64 / n as f64;
            ensure(below < 0.95, || format!("n {n}: a smaller threshold also reaches TPR {below}"))?;
            for &x in &s {
                let v = decide_score(x, eps).verdict;
                ensure((v == Verdict::Id) == (x < eps), || "verdict disagrees with score < eps".into())?;
            }
            sets += 1;
        }
    }
    Ok(format!("score = eps is OOD; {sets} score sets with n <= 50: TPR >= 0.95 and minimal"))
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.check("attention rows", Duration::from_secs(5), attention_correctness);
    suite.check("gradient fidelity", Duration::from_secs(30), gradient_fidelity);
    suite.check("degenerate losses", Duration::from_secs(120), degenerate_losses);
    suite.check("knn oracle", Duration::from_secs(60), knn_oracle);

    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let exp = pool.install(synthetic_experiment);
    let took = start.elapsed();
    suite.check("csd dominance", Duration::MAX, || {
        ensure(exp.dominance_gap <= 1e-12, || format!("csd exceeds knn by {:e}", exp.dominance_gap))?;
        ensure(exp.global_only_equal, || "GlobalOnly differs from the baseline".into())?;
        Ok(format!(
            "{} scores, max(csd - knn) = {:.3e}; GlobalOnly bit-equal to baseline",
            exp.scored, exp.dominance_gap
        ))
    });
    suite.check("synthetic claim", Duration::MAX, || {
        let dfpr = exp.knn_fpr - exp.csd_fpr;
        let dauc = exp.csd_auroc - exp.knn_auroc;
        let detail = format!(
            "MODE-F + CSD FPR95 {:.3} AUROC {:.4}; identity KNN FPR95 {:.3} AUROC {:.4}; single-threaded {took:.1?}",
            exp.csd_fpr, exp.csd_auroc, exp.knn_fpr, exp.knn_auroc
        );
        ensure(dfpr >= 0.10, || format!("FPR gap {dfpr:.3} < 0.10; {detail}"))?;
        ensure(dauc >= 0.05, || format!("AUROC gain {dauc:.4} < 0.05; {detail}"))?;
        ensure(took < Duration::from_secs(300), || format!("runtime {took:?} over 5 min; {detail}"))?;
        Ok(detail)
    });
    suite.check("metric oracles", Duration::from_secs(60), metric_oracles);
    suite.check("pipeline determinism", Duration::from_secs(120), determinism);
    suite.check("threshold semantics", Duration::from_secs(60), threshold_semantics);

    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
