//! Trains a small model on a synthetic interest-drift corpus, evaluates it on
//! the held-out last items and round-trips the checkpoint.
//!
//! `cargo run --release --example train_synthetic`

use c3rec::data::test_split;
use c3rec::eval::{evaluate, EvalOptions};
use c3rec::model::{C3Model, Variant};
use c3rec::synthetic::drift_corpus;
use c3rec::train::{train_with, TrainConfig};

fn main() -> c3rec::Result<()> {
    let bundle = drift_corpus(200, 4, 10, 6, 4, 11)?;
    println!("{}", serde_json::to_string(&bundle.stats)?);

    let mut cfg = TrainConfig::default();
    cfg.model.dim = 16;
    cfg.model.max_len = 10;
    cfg.model.num_blocks = 1;
    cfg.model.variant = Variant::C3Csasr;
    cfg.model.lambda = 0.3;
    cfg.batch_size = 64;
    cfg.epochs = 15;
    cfg.adam.learning_rate = 0.005;

    let outcome = train_with(&cfg, &bundle, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  ce {:.4}  calib {:.4}  val {}",
            e.epoch,
            e.values.loss,
            e.values.accuracy,
            e.values.calibration,
            e.validation_recall.map_or("-".into(), |r| format!("{r:.3}")),
        );
    })?;
    println!("best epoch {:?}, stopped early: {}", outcome.log.best_epoch, outcome.log.stopped_early);

    let report = evaluate(&outcome.model, &test_split(&bundle), &bundle.attribute_table, &EvalOptions::default())?;
    print!("{}", report.to_csv());

    let path = std::env::temp_dir().join("c3rec_train_synthetic.json");
    outcome.model.save(&path)?;
    let restored = C3Model::load(&path)?;
    let same = restored.score_history(&[1, 2, 3])? == outcome.model.score_history(&[1, 2, 3])?;
    println!("checkpoint {} reloads identically: {same}", path.display());
    Ok(())
}
