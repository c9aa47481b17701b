//! Trains each architecture variant under one seed and tabulates the results.
//!
//! `cargo run --release --example ablation`

use c3rec::eval::EvalOptions;
use c3rec::model::Variant;
use c3rec::synthetic::drift_corpus;
use c3rec::train::{run_ablation, TrainConfig};

fn main() -> c3rec::Result<()> {
    let bundle = drift_corpus(150, 4, 8, 6, 4, 3)?;
    let mut cfg = TrainConfig::default();
    cfg.model.dim = 12;
    cfg.model.max_len = 10;
    cfg.model.num_blocks = 1;
    cfg.batch_size = 64;
    cfg.epochs = 8;
    cfg.adam.learning_rate = 0.005;

    let report = run_ablation(&cfg, &bundle, &Variant::ALL, &EvalOptions::default())?;
    print!("{}", report.to_table());
    Ok(())
}
