//! One test per acceptance criterion; each prints a single PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see them.
//! Criteria 7 and 8 need MovieLens-1M: set `C3REC_ML1M_DIR` to the folder
//! holding `ratings.dat` and `movies.dat` and pass `--ignored`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use c3rec::calibration::AttributeTable;
use c3rec::cheapconv::{cheap_param_count, raw_param_count, CheapConvLayer, RawConvLayer};
use c3rec::data::{build_training_windows, load_movielens, test_split, DatasetBundle};
use c3rec::eval::{evaluate, greedy_calibrated_rerank, mrr_at_k, recall_at_k, top_k, EvalOptions};
use c3rec::model::{sequence_head, predict_scores, C3Model, Mode, ModelConfig, Variant};
use c3rec::synthetic::{drift_corpus, memorization_corpus};
use c3rec::tensor::Tape;
use c3rec::train::{evaluate_loss, train, window_recall, TrainConfig};
use common::{model_grad_check, rng};
use rand::Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n:>2}  {}  {name}  ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    for variant in Variant::ALL {
        let (e, at) = model_grad_check(variant, 1);
        if e > worst.0 {
            worst = (e, format!("{variant} {at}"));
        }
    }
    let took = start.elapsed();
    let pass = worst.0 < 1e-3 && took < Duration::from_secs(10);
    verdict(1, "gradient fidelity", pass, format!("worst rel err {:.2e} at {}, tol 1e-3, {}", worst.0, worst.1, secs(took)));
}

#[test]
fn criterion_02_parameter_count() {
    let mut r = rng(2);
    let cheap = CheapConvLayer::init(3, 64, &mut r).unwrap().param_count();
    let raw = RawConvLayer::init(3, 64, &mut r).unwrap().param_count();
    let pass = cheap == 6176 && raw == 12288 && cheap_param_count(3, 64) == cheap && raw_param_count(3, 64) == raw;
    verdict(2, "parameter count", pass, format!("cheap {cheap}, raw {raw}"));
}

#[test]
fn criterion_03_causality() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut checked = 0;
    let mut violations = 0;
    for trial in 0..20 {
        let variant = Variant::ALL[trial % Variant::ALL.len()];
        let cfg = ModelConfig {
            dim: 6,
            kernel_size: 3,
            head_kernel: 3,
            num_blocks: 2,
            max_len: 8,
            dropout: 0.0,
            variant,
            ..ModelConfig::default()
        };
        let model = C3Model::new(cfg, 12, r.random()).unwrap();
        let items: Vec<u32> = (0..8).map(|_| r.random_range(1..=12)).collect();
        let run = |seq: &[u32], t: usize| {
            let mut tape = Tape::new();
            let vars = model.store().bind(&mut tape, false);
            let h = model.encode(&mut tape, &vars, seq, &mut Mode::Eval).unwrap();
            let rows = tape.value(h).data()[..t * 6].to_vec();
            let prefix = tape.slice(h, 0, 0, t).unwrap();
            let o = sequence_head(&mut tape, &vars, &model.params().head, prefix, model.config()).unwrap();
            let scores = predict_scores(tape.value(o), model.store().get(model.item_embedding_id())).unwrap();
            (rows, scores.into_data())
        };
        for t in 1..8 {
            let mut other = items.clone();
            for v in &mut other[t..] {
                *v = r.random_range(1..=12);
            }
            let (a, b) = (run(&items, t), run(&other, t));
            let prefix_only = model.score_history(&items[..t]).unwrap();
            checked += 1;
            if a != b || a.1 != prefix_only {
                violations += 1;
            }
        }
    }
    let took = start.elapsed();
    let pass = violations == 0 && took < Duration::from_secs(30);
    verdict(3, "causality", pass, format!("{checked} suffix perturbations over 20 models, {violations} violations, {}", secs(took)));
}

/// Attribute-set KL oracle written independently of the library.
fn oracle_kl(list: &[u32], history: &[u32], sets: &[Vec<usize>], n_attr: usize) -> f64 {
    let dist = |items: &[u32]| {
        let mut d = vec![0.0; n_attr];
        for &i in items {
            let s = &sets[i as usize - 1];
            for &a in s {
                d[a] += 1.0 / s.len() as f64 / items.len() as f64;
            }
        }
        d
    };
    let (p, q) = (dist(history), dist(list));
    let mut kl = 0.0;
    for a in 0..n_attr {
        if p[a] > 0.0 {
            kl += p[a] * (p[a] / (0.99 * q[a] + 0.01 * p[a])).ln();
        }
    }
    kl
}

#[test]
fn criterion_04_metric_oracles() {
    let start = Instant::now();
    let mut r = rng(4);
    let (n, n_attr) = (60, 5);
    let sets: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let a = r.random_range(0..n_attr);
            let b = r.random_range(0..n_attr);
            if a == b { vec![a] } else { vec![a, b] }
        })
        .collect();
    let table = AttributeTable::from_attribute_sets((0..n_attr).map(|a| format!("a{a}")).collect(), &sets).unwrap();
    let mut lists = Vec::new();
    let mut histories = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        lists.push(top_k(&scores, 20, &[]));
        histories.push((0..r.random_range(1..15)).map(|_| r.random_range(1..=n as u32)).collect::<Vec<u32>>());
        targets.push(r.random_range(1..=n as u32));
    }
    let mut mismatches = 0;
    let mut worst_ckl: f64 = 0.0;
    for k in [10, 20] {
        let hits = lists.iter().zip(&targets).filter(|(l, t)| l[..k].contains(t)).count();
        let rr: f64 = lists
            .iter()
            .zip(&targets)
            .map(|(l, t)| l[..k].iter().position(|i| i == t).map_or(0.0, |p| 1.0 / (p + 1) as f64))
            .sum();
        mismatches += usize::from(recall_at_k(&lists, &targets, k).unwrap() != hits as f64 / 1000.0);
        mismatches += usize::from(mrr_at_k(&lists, &targets, k).unwrap() != rr / 1000.0);
        let cut: Vec<Vec<u32>> = lists.iter().map(|l| l[..k].to_vec()).collect();
        let lib = c3rec::calibration::ckl_metric(&cut, &histories, &table).unwrap();
        let oracle: f64 = cut.iter().zip(&histories).map(|(l, h)| oracle_kl(l, h, &sets, n_attr)).sum::<f64>() / 1000.0;
        worst_ckl = worst_ckl.max((lib - oracle).abs());
    }
    let took = start.elapsed();
    let pass = mismatches == 0 && worst_ckl <= 1e-9 && took < Duration::from_secs(10);
    verdict(4, "metric oracle equivalence", pass, format!("recall/mrr mismatches {mismatches}, C_KL max diff {worst_ckl:.1e} (tol 1e-9), {}", secs(took)));
}

fn overfit_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.dim = 16;
    cfg.model.max_len = 8;
    cfg.model.num_blocks = 1;
    cfg.model.dropout = 0.0;
    cfg.model.lambda = 0.0;
    cfg.adam.learning_rate = 0.005;
    cfg.batch_size = 50;
    cfg.validation_fraction = 0.0;
    cfg.epochs = epochs;
    cfg.seed = 5;
    cfg
}

#[test]
fn criterion_05_overfit_sanity() {
    let start = Instant::now();
    let bundle = memorization_corpus(10, 7, 3).unwrap();
    let windows = build_training_windows(&bundle);
    let out = train(&overfit_config(2000), &bundle).unwrap();
    let loss = evaluate_loss(&out.model, &bundle, &windows).unwrap().loss;
    let recall = window_recall(&out.model, &bundle, &windows, 1).unwrap();
    let took = start.elapsed();
    let pass = windows.len() == 50 && recall == 1.0 && loss < 0.01 && took < Duration::from_secs(120);
    verdict(5, "overfit sanity", pass, format!("{} windows, Recall@1 {recall}, loss {loss:.5} (< 0.01), {}", windows.len(), secs(took)));
}

#[test]
fn criterion_06_calibration_direction() {
    let start = Instant::now();
    let bundle = drift_corpus(200, 6, 7, 12, 8, 7).unwrap();
    let cases = test_split(&bundle);
    let run = |lambda: f64| {
        let mut cfg = TrainConfig::default();
        cfg.model.dim = 16;
        cfg.model.max_len = 20;
        cfg.model.num_blocks = 1;
        cfg.model.dropout = 0.0;
        cfg.model.lambda = lambda;
        cfg.adam.learning_rate = 0.005;
        cfg.batch_size = 64;
        cfg.validation_fraction = 0.0;
        cfg.epochs = 10;
        cfg.seed = 6;
        let out = train(&cfg, &bundle).unwrap();
        let opts = EvalOptions { cutoffs: vec![10], ..EvalOptions::default() };
        evaluate(&out.model, &cases, &bundle.attribute_table, &opts).unwrap().rows.remove(0)
    };
    let (plain, calibrated) = (run(0.0), run(0.7));
    let degradation = (plain.recall - calibrated.recall) / plain.recall;
    let took = start.elapsed();
    let pass = calibrated.ckl < plain.ckl && degradation <= 0.30 && took < Duration::from_secs(600);
    verdict(
        6,
        "calibration direction",
        pass,
        format!(
            "C_KL@10 {:.4} -> {:.4}, Recall@10 {:.4} -> {:.4} (relative drop {:.1}%, max 30%), {}",
            plain.ckl,
            calibrated.ckl,
            plain.recall,
            calibrated.recall,
            100.0 * degradation,
            secs(took)
        ),
    );
}

fn ml1m_dir() -> PathBuf {
    PathBuf::from(std::env::var("C3REC_ML1M_DIR").expect("set C3REC_ML1M_DIR to the MovieLens-1M folder"))
}

#[test]
#[ignore = "requires MovieLens-1M at $C3REC_ML1M_DIR"]
fn criterion_07_ablation_ordering() {
    let start = Instant::now();
    let dir = ml1m_dir();
    let full = load_movielens(dir.join("ratings.dat"), dir.join("movies.dat")).unwrap();
    let sequences: Vec<Vec<u32>> = full.sequences.iter().take(500).map(|s| s.items.clone()).collect();
    let bundle = DatasetBundle::from_sequences(sequences, full.attribute_table.clone()).unwrap();
    let cases = test_split(&bundle);
    let mut mrr: BTreeMap<&str, f64> = BTreeMap::new();
    for variant in [Variant::C3Sasr, Variant::NoCc] {
        for seed in 0..3 {
            let mut cfg = TrainConfig::default();
            cfg.model.dim = 32;
            cfg.model.max_len = 50;
            cfg.model.variant = variant;
            cfg.epochs = 10;
            cfg.batch_size = 128;
            cfg.validation_fraction = 0.0;
            cfg.seed = seed;
            let out = train(&cfg, &bundle).unwrap();
            let opts = EvalOptions { cutoffs: vec![10], ..EvalOptions::default() };
            let row = evaluate(&out.model, &cases, &bundle.attribute_table, &opts).unwrap().rows.remove(0);
            *mrr.entry(variant.name()).or_default() += row.mrr / 3.0;
        }
    }
    let took = start.elapsed();
    let (c3, nocc) = (mrr["C3SASR"], mrr["NoCC"]);
    let pass = c3 >= nocc && took < Duration::from_secs(1800);
    verdict(7, "ablation ordering", pass, format!("MRR@10 C3SASR {c3:.4} vs NoCC {nocc:.4} over 3 seeds, {}", secs(took)));
}

#[test]
#[ignore = "requires MovieLens-1M at $C3REC_ML1M_DIR"]
fn criterion_08_dataset_statistics() {
    let start = Instant::now();
    let dir = ml1m_dir();
    let b = load_movielens(dir.join("ratings.dat"), dir.join("movies.dat")).unwrap();
    let windows = build_training_windows(&b).len();
    let tests = test_split(&b).len();
    let rel = (windows as f64 - 981_504.0).abs() / 981_504.0;
    let took = start.elapsed();
    let pass = b.stats.users == 6040
        && b.stats.items == 3883
        && b.stats.attributes == 18
        && tests == 6040
        && rel <= 0.005
        && took < Duration::from_secs(60);
    verdict(
        8,
        "dataset statistics",
        pass,
        format!(
            "users {}, items {}, attributes {}, test cases {tests}, windows {windows} ({:.3}% from 981504, tol 0.5%), {}",
            b.stats.users,
            b.stats.items,
            b.stats.attributes,
            100.0 * rel,
            secs(took)
        ),
    );
}

#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bundle.json");
    memorization_corpus(10, 7, 3).unwrap().save(&data).unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "dim = 16\nmax_len = 8\nnum_blocks = 1\ndropout = 0.2\nlearning_rate = 0.01\nbatch_size = 16\nepochs = 150\nvalidation_fraction = 0\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_c3rec");
    let run = |tag: &str| {
        let ckpt = dir.path().join(format!("{tag}.json"));
        let report = dir.path().join(format!("{tag}.jsonl"));
        let s = |args: &[&str]| Command::new(bin).args(args).status().unwrap().success();
        let ok = s(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap(), "--seed", "9", "--variant", "C3CSASR"])
            && s(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", report.to_str().unwrap()]);
        assert!(ok, "run {tag} failed");
        (fs::read(ckpt).unwrap(), fs::read(report).unwrap())
    };
    let (a, b) = (run("first"), run("second"));
    let took = start.elapsed();
    let pass = a.0 == b.0 && a.1 == b.1;
    verdict(9, "determinism", pass, format!("checkpoints {} bytes identical: {}, reports identical: {}, {}", a.0.len(), a.0 == b.0, a.1 == b.1, secs(took)));
}

#[test]
fn criterion_10_reranker_degeneracy() {
    let start = Instant::now();
    let mut r = rng(10);
    let n = 150;
    let sets: Vec<Vec<usize>> = (0..n).map(|i| vec![i % 7]).collect();
    let table = AttributeTable::from_attribute_sets((0..7).map(|a| format!("a{a}")).collect(), &sets).unwrap();
    let p = [0.3, 0.1, 0.1, 0.2, 0.1, 0.1, 0.1];
    let mut mismatches = 0;
    for trial in 0..1000 {
        let mut scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        if trial % 10 == 0 {
            // Quantised scores exercise tie-breaking.
            scores.iter_mut().for_each(|s| *s = (*s * 8.0).floor());
        }
        let k = [10, 20][trial % 2];
        let got = greedy_calibrated_rerank(&scores, &table, &p, k, 0.0, 100).unwrap();
        mismatches += usize::from(got != top_k(&scores, k, &[]));
    }
    let took = start.elapsed();
    let pass = mismatches == 0 && took < Duration::from_secs(5);
    verdict(10, "reranker degeneracy", pass, format!("1000 score vectors, {mismatches} mismatches, {}", secs(took)));
}
