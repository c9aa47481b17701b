//! Top-k ranking, Recall@k, MRR@k and the calibration metric on toy lists.
//!
//! `cargo run --example evaluate_metrics`

use c3rec::calibration::{ckl_metric, history_distribution, list_distribution, AttributeTable};
use c3rec::eval::{mrr_at_k, recall_at_k, top_k};

fn main() -> c3rec::Result<()> {
    // Six items over two genres; item 3 belongs to both.
    let table = AttributeTable::from_attribute_sets(
        vec!["drama".into(), "comedy".into()],
        &[vec![0], vec![0], vec![0, 1], vec![1], vec![1], vec![1]],
    )?;

    let scores = [[0.1, 0.9, 0.3, 0.9, 0.2, 0.0], [0.5, 0.1, 0.1, 0.2, 0.8, 0.7]];
    let histories = [vec![1u32, 2], vec![4, 5, 3]];
    let targets = [4u32, 1];

    // Ties go to the smaller id; seen items may be excluded.
    let lists: Vec<Vec<u32>> = scores.iter().map(|s| top_k(s, 3, &[])).collect();
    let unseen: Vec<Vec<u32>> = scores.iter().zip(&histories).map(|(s, h)| top_k(s, 3, h)).collect();
    println!("top-3        {lists:?}");
    println!("top-3 unseen {unseen:?}");

    for k in [1, 3] {
        println!(
            "k={k}  recall {:.3}  mrr {:.3}  ckl {:.4}",
            recall_at_k(&lists, &targets, k)?,
            mrr_at_k(&lists, &targets, k)?,
            ckl_metric(&lists.iter().map(|l| &l[..k]).collect::<Vec<_>>(), &histories, &table)?,
        );
    }

    let p = history_distribution(&histories[1], &table)?;
    let q = list_distribution(&lists[1], &table)?;
    println!("\nuser 2 history {:?}\nuser 2 list    {:?}", p.probs(), q.probs());
    Ok(())
}
