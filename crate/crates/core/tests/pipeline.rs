use std::collections::BTreeSet;
use std::path::Path;

use mode_core::pipeline::{self, GenOutputs};
use mode_core::{
    load_bank, load_features, save_features, FeatureDataset, MapShape, ScaleMode, ScaleTag, SynthSpec,
};

fn small_spec() -> SynthSpec {
    SynthSpec {
        per_class: 12,
        test_per_class: 6,
        ood_per_class: 20,
        ..SynthSpec::default()
    }
}

fn generated(dir: &Path) -> GenOutputs {
    let g = GenOutputs::in_dir(dir);
    pipeline::run_gen(&small_spec(), &g).unwrap();
    g
}

#[test]
fn bank_rows_follow_the_counting_rule() {
    let dir = tempfile::tempdir().unwrap();
    let g = generated(dir.path());
    let n = 48;
    for (mode, per) in [
        (ScaleMode::GlobalOnly, 1),
        (ScaleMode::LocalOnly, 16),
        (ScaleMode::LocalPlusPlus, 5),
        (ScaleMode::GlobalPlusLocalPlusPlus, 6),
    ] {
        let b = pipeline::run_fit(&g.train, None, mode, 100.0, 1, &dir.path().join("b.bnk")).unwrap();
        assert_eq!(b.len(), n * per, "{mode}");
        let loaded = load_bank::<f64>(&dir.path().join("b.bnk")).unwrap();
        assert_eq!(loaded.provenance(), b.provenance());
        let ids: BTreeSet<u32> = b.provenance().iter().map(|p| p.example_id).collect();
        assert_eq!(ids.len(), n);
    }
    let b = pipeline::run_fit(&g.train, None, ScaleMode::GlobalPlusLocalPlusPlus, 100.0, 1, &dir.path().join("b.bnk"))
        .unwrap();
    for id in 0..n as u32 {
        let tags: Vec<ScaleTag> = b.provenance().iter().filter(|p| p.example_id == id).map(|p| p.scale).collect();
        assert_eq!(tags.iter().filter(|&&t| t == ScaleTag::Global).count(), 1);
        assert_eq!(tags.iter().filter(|&&t| t == ScaleTag::LocalPlusPlus).count(), 5);
    }
}

#[test]
fn larger_alpha_keeps_a_superset() {
    let dir = tempfile::tempdir().unwrap();
    let g = generated(dir.path());
    let kept = |alpha| {
        let b = pipeline::run_fit(&g.train, None, ScaleMode::GlobalOnly, alpha, 9, &dir.path().join("b.bnk")).unwrap();
        b.provenance().iter().map(|p| p.example_id).collect::<BTreeSet<_>>()
    };
    let (k10, k50, k100) = (kept(10.0), kept(50.0), kept(100.0));
    assert!(k10.is_subset(&k50) && k50.is_subset(&k100));
    // 12 per class: ceil(1.2) = 2, ceil(6) = 6.
    assert_eq!((k10.len(), k50.len(), k100.len()), (8, 24, 48));
}

#[test]
fn training_examples_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let g = generated(dir.path());
    let bank = dir.path().join("bank.bnk");
    pipeline::run_fit(&g.train, None, ScaleMode::GlobalPlusLocalPlusPlus, 100.0, 1, &bank).unwrap();
    let out = pipeline::run_score(
        &g.train,
        None,
        None,
        &bank,
        1,
        ScaleMode::GlobalPlusLocalPlusPlus,
        0.95,
        &dir.path().join("s.csv"),
    )
    .unwrap();
    // Bank rows are stored as f32, queries stay f64.
    assert!(out.rows.iter().all(|r| r.score < 1e-6), "{:?}", out.rows.iter().map(|r| r.score).fold(0.0, f64::max));
}

#[test]
fn csd_never_exceeds_global_and_global_only_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let g = generated(dir.path());
    let d = dir.path();
    pipeline::run_fit(&g.train, None, ScaleMode::GlobalPlusLocalPlusPlus, 100.0, 1, &d.join("m.bnk")).unwrap();
    pipeline::run_fit(&g.train, None, ScaleMode::GlobalOnly, 100.0, 1, &d.join("g.bnk")).unwrap();
    let score = |bank: &str, mode| {
        pipeline::run_score(&g.id_test, Some(&g.ood_test), None, &d.join(bank), 5, mode, 0.95, &d.join("s.csv"))
            .unwrap()
            .rows
    };
    let csd = score("m.bnk", ScaleMode::GlobalPlusLocalPlusPlus);
    let global = score("g.bnk", ScaleMode::GlobalOnly);
    assert_eq!(csd.len(), global.len());
    for (c, b) in csd.iter().zip(&global) {
        assert_eq!((c.example_id, &c.dataset_tag), (b.example_id, &b.dataset_tag));
        assert!(c.score <= b.score + 1e-12);
        assert_eq!(b.winner_scale, ScaleTag::Global);
    }
    let text = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(text.starts_with("example_id,dataset_tag,score,winner_scale,verdict\n"));
}

#[test]
fn separated_and_identical_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = d.join("s.csv");
    std::fs::write(&csv, "example_id,dataset_tag,score,winner_scale,verdict\n0,id,0.1,global,ID\n1,id,0.2,global,ID\n0,ood,0.8,global,OOD\n1,ood,0.9,global,OOD\n").unwrap();
    let r = pipeline::run_eval(&csv, None, &pipeline::EvalOutputs::in_dir(d)).unwrap();
    assert_eq!((r.fpr95, r.auroc), (0.0, 1.0));
    std::fs::write(&csv, "example_id,dataset_tag,score,winner_scale,verdict\n0,id,0.5,global,OOD\n0,ood,0.5,global,OOD\n").unwrap();
    let r = pipeline::run_eval(&csv, None, &pipeline::EvalOutputs::in_dir(d)).unwrap();
    assert_eq!(r.auroc, 0.5);
    let roc = std::fs::read_to_string(d.join("roc.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n0,0\n"));
}

#[test]
fn bench_rows_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let g = generated(dir.path());
    let out = dir.path().join("bench.csv");
    let res = pipeline::run_bench(&g.train, &g.id_test, None, ScaleMode::GlobalPlusLocalPlusPlus, 1, &out).unwrap();
    let alphas: Vec<f64> = res.rows.iter().filter(|r| r.method == "csd").map(|r| r.alpha).collect();
    assert_eq!(alphas, vec![5.0, 10.0, 50.0, 100.0]);
    assert!(res.rows.iter().any(|r| r.method == "knn"));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("method,alpha,k,bank_rows,ms_per_image\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn zero_feature_vector_is_a_normalization_error() {
    let dir = tempfile::tempdir().unwrap();
    let shape = MapShape::new(2, 2, 2).unwrap();
    let maps = vec![mode_core::FeatureMap::new(shape, vec![0.0; 8], 0).unwrap()];
    let p = dir.path().join("z.fmb");
    save_features(&FeatureDataset::new(shape, maps, 1).unwrap(), &p).unwrap();
    assert!(load_features::<f64>(&p).is_ok());
    let err = pipeline::run_fit(&p, None, ScaleMode::GlobalOnly, 100.0, 0, &dir.path().join("b.bnk")).unwrap_err();
    assert!(matches!(err, mode_core::Error::Normalization(_)), "{err}");
}
