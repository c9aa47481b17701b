//! Greedy calibrated reranking traded off against relevance with `beta`.
//!
//! `cargo run --example calibrated_rerank`

use c3rec::calibration::{history_distribution, list_distribution, smoothed_kl, AttributeTable};
use c3rec::eval::{greedy_calibrated_rerank, top_k};

fn main() -> c3rec::Result<()> {
    let names = ["action", "romance", "horror"].map(String::from).to_vec();
    let sets: Vec<Vec<usize>> = (0..12).map(|i| vec![i % 3]).collect();
    let table = AttributeTable::from_attribute_sets(names, &sets)?;

    // Mostly action in the history, but the scorer loves romance.
    let history = [1u32, 4, 7, 10, 2, 3];
    let scores: Vec<f64> = (1..=12).map(|i| if i % 3 == 2 { 1.0 - i as f64 * 0.01 } else { 0.5 - i as f64 * 0.01 }).collect();
    let p = history_distribution(&history, &table)?;
    println!("history distribution {:.3?}", p.probs());

    let k = 6;
    let show = |label: &str, list: &[u32]| -> c3rec::Result<()> {
        let q = list_distribution(list, &table)?;
        println!("{label:<10} {list:?}  kl {:.4}", smoothed_kl(p.probs(), q.probs(), 0.01));
        Ok(())
    };
    show("top-k", &top_k(&scores, k, &[]))?;
    for beta in [0.0, 0.3, 0.6, 0.9] {
        let list = greedy_calibrated_rerank(&scores, &table, p.probs(), k, beta, 12)?;
        show(&format!("beta {beta}"), &list)?;
    }
    Ok(())
}
