//! Parses MovieLens `ratings.dat` / `movies.dat` into a bundle and derives the
//! training windows and test cases.
//!
//! `cargo run --example load_movielens -- /path/to/ml-1m`
//!
//! Without an argument a small synthetic copy is written and parsed instead.

use std::path::PathBuf;

use c3rec::data::{build_training_windows, load_movielens, test_split};
use c3rec::synthetic::{random_corpus, write_movielens};

fn main() -> c3rec::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            let dir = std::env::temp_dir().join("c3rec_movielens_demo");
            std::fs::create_dir_all(&dir)?;
            write_movielens(&random_corpus(50, 40, 6, 3, 12, 1)?, &dir)?;
            dir
        }
    };
    let bundle = load_movielens(dir.join("ratings.dat"), dir.join("movies.dat"))?;
    println!("{}", serde_json::to_string_pretty(&bundle.stats)?);

    let windows = build_training_windows(&bundle);
    let cases = test_split(&bundle);
    let w = &windows[0];
    println!("first window: history {:?} -> {}", w.history(&bundle), w.target(&bundle));
    let c = &cases[0];
    println!("first test case: user {} history len {} -> {}", c.user_id, c.history.len(), c.target);
    println!("attributes: {}", bundle.attribute_table.attribute_names().join(", "));
    Ok(())
}
