//! Seeded synthetic corpora for tests, examples and benchmarks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::AttributeTable;
use crate::data::{DatasetBundle, MOVIELENS_GENRES};
use crate::error::{Error, Result};

fn group_table(groups: usize, per_group: usize) -> Result<AttributeTable> {
    let names = (0..groups).map(|g| format!("g{g}")).collect();
    let sets: Vec<Vec<usize>> = (0..groups * per_group)
        .map(|i| vec![i / per_group])
        .collect();
    AttributeTable::from_attribute_sets(names, &sets)
}

/// Items `g·per_group + 1 ..= (g+1)·per_group` form attribute group `g`.
pub fn group_items(group: usize, per_group: usize) -> Vec<u32> {
    (1..=per_group)
        .map(|i| (group * per_group + i) as u32)
        .collect()
}

/// Users whose interest drifts: `early` items from a source group followed
/// by `late` items from a different destination group. Histories are skewed
/// towards the source group while the next items come from the destination.
pub fn drift_corpus(
    users: usize,
    groups: usize,
    per_group: usize,
    early: usize,
    late: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if groups < 2 || per_group == 0 || early + late < 2 {
        return Err(Error::Config(
            "drift corpus needs two groups and length ≥ 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = group_table(groups, per_group)?;
    let sequences = (0..users)
        .map(|_| {
            let src = rng.random_range(0..groups);
            let dst = (src + rng.random_range(1..groups)) % groups;
            let (a, b) = (group_items(src, per_group), group_items(dst, per_group));
            let mut seq: Vec<u32> = (0..early).map(|_| *a.choose(&mut rng).unwrap()).collect();
            seq.extend((0..late).map(|_| *b.choose(&mut rng).unwrap()));
            seq
        })
        .collect();
    DatasetBundle::from_sequences(sequences, table)
}

/// Users that each walk a private, repeat-free run of items, so every
/// prefix determines its next item. Yields `users·(len−2)` windows.
pub fn memorization_corpus(users: usize, len: usize, attributes: usize) -> Result<DatasetBundle> {
    if len < 2 || attributes == 0 {
        return Err(Error::Config("memorization corpus needs len ≥ 2".into()));
    }
    let n = users * len;
    let names = (0..attributes).map(|a| format!("a{a}")).collect();
    let sets: Vec<Vec<usize>> = (0..n).map(|i| vec![i % attributes]).collect();
    let table = AttributeTable::from_attribute_sets(names, &sets)?;
    let sequences = (0..users)
        .map(|u| (0..len).map(|j| (u * len + j + 1) as u32).collect())
        .collect();
    DatasetBundle::from_sequences(sequences, table)
}

/// Uniformly random sequences over `items` items, each carrying one or two of
/// `attributes` attributes.
pub fn random_corpus(
    users: usize,
    items: usize,
    attributes: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if items == 0 || attributes == 0 || min_len < 2 || max_len < min_len {
        return Err(Error::Config(
            "random corpus needs items, attributes and 2 ≤ min_len ≤ max_len".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = (0..attributes).map(|a| format!("a{a}")).collect();
    let sets: Vec<Vec<usize>> = (0..items)
        .map(|_| {
            let first = rng.random_range(0..attributes);
            let second = rng.random_range(0..attributes);
            if first == second {
                vec![first]
            } else {
                vec![first, second]
            }
        })
        .collect();
    let table = AttributeTable::from_attribute_sets(names, &sets)?;
    let sequences = (0..users)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len)
                .map(|_| rng.random_range(1..=items as u32))
                .collect()
        })
        .collect();
    DatasetBundle::from_sequences(sequences, table)
}

/// Writes `bundle` as MovieLens-style `ratings.dat` / `movies.dat` under
/// `dir`. Attributes map to genres by index, so at most 18 are allowed.
pub fn write_movielens(
    bundle: &DatasetBundle,
    dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let table = &bundle.attribute_table;
    if table.num_attributes() > MOVIELENS_GENRES.len() {
        return Err(Error::Config(format!(
            "{} attributes exceed the genre list",
            table.num_attributes()
        )));
    }
    let mut movies = String::new();
    for item in 1..=table.num_items() as u32 {
        let genres: Vec<&str> = table
            .row(item)?
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, _)| MOVIELENS_GENRES[a])
            .collect();
        let _ = writeln!(movies, "{item}::Movie {item} (2000)::{}", genres.join("|"));
    }
    let mut ratings = String::new();
    for seq in &bundle.sequences {
        for (&item, &ts) in seq.items.iter().zip(&seq.timestamps) {
            let _ = writeln!(
                ratings,
                "{}::{item}::4::{}",
                seq.user_id + 1,
                978_300_000 + ts
            );
        }
    }
    let dir = dir.as_ref();
    let (r, m) = (dir.join("ratings.dat"), dir.join("movies.dat"));
    fs::write(&r, ratings)?;
    fs::write(&m, movies)?;
    Ok((r, m))
}
