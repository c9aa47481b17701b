//! Interaction-log ingestion, leave-one-out splitting and training windows.
//!
//! Two input formats are supported:
//!
//! * MovieLens-1M: `ratings.dat` lines `UserID::MovieID::Rating::Timestamp`
//!   and `movies.dat` lines `MovieID::Title::Genre|Genre|…`. The item
//!   vocabulary is every movie in `movies.dat`, ordered by movie id; the 18
//!   genres form the attribute vocabulary.
//! * Generic TSV: an events file `user<TAB>item<TAB>timestamp` and an
//!   attributes file `item<TAB>attr|attr|…` (`,` also separates). Items and
//!   attributes are numbered in order of first appearance in the attributes
//!   file, users in order of first appearance in the events file.
//!
//! Each user's interactions are stably sorted by timestamp (ties keep file
//! order). Users with fewer than two interactions are dropped. Item ids are
//! remapped to `1..=|I|`; 0 is padding.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{history_distribution, AttributeTable};
use crate::error::{Error, Result};
use crate::model::SequenceBatch;
use crate::tensor::Tensor;

pub const MOVIELENS_GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub const BUNDLE_FORMAT: &str = "c3rec-bundle";
pub const BUNDLE_VERSION: u32 = 1;

/// One user's time-ordered interactions, in internal item ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    /// Contiguous internal user index.
    pub user_id: u32,
    /// User key as it appeared in the source file.
    pub external_id: String,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub interactions: usize,
    pub training_windows: usize,
    pub test_cases: usize,
    pub average_length: f64,
    /// Users discarded for having fewer than two interactions.
    pub dropped_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub format: String,
    pub version: u32,
    pub sequences: Vec<InteractionSequence>,
    pub attribute_table: AttributeTable,
    /// External item keys; internal id `i` is `vocab[i - 1]`.
    pub vocab: Vec<String>,
    pub stats: DatasetStats,
}

impl DatasetBundle {
    /// Builds a bundle from already remapped item-id sequences.
    pub fn from_sequences(
        sequences: Vec<Vec<u32>>,
        attribute_table: AttributeTable,
    ) -> Result<Self> {
        let vocab = (1..=attribute_table.num_items())
            .map(|i| i.to_string())
            .collect();
        let sequences = sequences
            .into_iter()
            .enumerate()
            .map(|(u, items)| InteractionSequence {
                user_id: u as u32,
                external_id: u.to_string(),
                timestamps: (0..items.len() as i64).collect(),
                items,
            })
            .collect();
        Self::assemble(sequences, attribute_table, vocab, 0)
    }

    fn assemble(
        sequences: Vec<InteractionSequence>,
        attribute_table: AttributeTable,
        vocab: Vec<String>,
        dropped_users: usize,
    ) -> Result<Self> {
        let n_items = attribute_table.num_items();
        if vocab.len() != n_items {
            return Err(Error::Data(format!(
                "vocabulary of {} items but {} attribute rows",
                vocab.len(),
                n_items
            )));
        }
        for s in &sequences {
            if s.items.len() < 2 {
                return Err(Error::Data(format!(
                    "user {} has fewer than two interactions",
                    s.external_id
                )));
            }
            if let Some(&bad) = s.items.iter().find(|&&i| i == 0 || i as usize > n_items) {
                return Err(Error::Data(format!(
                    "item id {bad} outside vocabulary 1..={n_items}"
                )));
            }
            if s.timestamps.len() != s.items.len() || s.timestamps.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Data(format!(
                    "user {} has unordered timestamps",
                    s.external_id
                )));
            }
        }
        let interactions: usize = sequences.iter().map(InteractionSequence::len).sum();
        let stats = DatasetStats {
            users: sequences.len(),
            items: n_items,
            attributes: attribute_table.num_attributes(),
            interactions,
            training_windows: sequences.iter().map(|s| s.len() - 2).sum(),
            test_cases: sequences.len(),
            average_length: if sequences.is_empty() {
                0.0
            } else {
                interactions as f64 / sequences.len() as f64
            },
            dropped_users,
        };
        Ok(DatasetBundle {
            format: BUNDLE_FORMAT.to_string(),
            version: BUNDLE_VERSION,
            sequences,
            attribute_table,
            vocab,
            stats,
        })
    }

    pub fn num_items(&self) -> usize {
        self.attribute_table.num_items()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bundle: DatasetBundle = serde_json::from_str(&fs::read_to_string(path)?)?;
        if bundle.format != BUNDLE_FORMAT || bundle.version != BUNDLE_VERSION {
            return Err(Error::Data(format!(
                "unsupported bundle {} v{}",
                bundle.format, bundle.version
            )));
        }
        Ok(bundle)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with their 1-based numbers; tolerates CRLF and non-UTF-8
/// bytes (MovieLens titles are Latin-1).
fn lines(bytes: &[u8]) -> impl Iterator<Item = (usize, String)> + '_ {
    bytes
        .split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, l)| {
            (
                i + 1,
                String::from_utf8_lossy(l.strip_suffix(b"\r").unwrap_or(l)).into_owned(),
            )
        })
        .filter(|(_, l)| !l.trim().is_empty())
}

fn group_by_user(
    events: Vec<(String, u32, i64)>,
    order: impl Fn(&[(String, Vec<(u32, i64)>)]) -> Vec<usize>,
) -> (Vec<InteractionSequence>, usize) {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut users: Vec<(String, Vec<(u32, i64)>)> = Vec::new();
    for (user, item, ts) in events {
        let slot = *index.entry(user.clone()).or_insert_with(|| {
            users.push((user, Vec::new()));
            users.len() - 1
        });
        users[slot].1.push((item, ts));
    }
    let mut sequences = Vec::new();
    let mut dropped = 0;
    for slot in order(&users) {
        let (user, mut events) = std::mem::take(&mut users[slot]);
        if events.len() < 2 {
            dropped += 1;
            continue;
        }
        events.sort_by_key(|&(_, ts)| ts);
        sequences.push(InteractionSequence {
            user_id: sequences.len() as u32,
            external_id: user,
            items: events.iter().map(|e| e.0).collect(),
            timestamps: events.iter().map(|e| e.1).collect(),
        });
    }
    (sequences, dropped)
}

/// Loads MovieLens-1M `ratings.dat` and `movies.dat`.
pub fn load_movielens(
    ratings_path: impl AsRef<Path>,
    movies_path: impl AsRef<Path>,
) -> Result<DatasetBundle> {
    let (ratings_path, movies_path) = (ratings_path.as_ref(), movies_path.as_ref());
    let genre_index: HashMap<&str, usize> = MOVIELENS_GENRES
        .iter()
        .enumerate()
        .map(|(i, g)| (*g, i))
        .collect();

    let mut movies: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (no, line) in lines(&fs::read(movies_path)?) {
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() < 3 {
            return Err(parse_err(
                movies_path,
                no,
                "expected MovieID::Title::Genres",
            ));
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(movies_path, no, format!("bad movie id `{}`", fields[0])))?;
        let genres = fields[fields.len() - 1].trim();
        if genres.is_empty() {
            return Err(Error::Data(format!("movie {id} (line {no}) has no genre")));
        }
        let set = genres
            .split('|')
            .map(|g| {
                genre_index
                    .get(g.trim())
                    .copied()
                    .ok_or_else(|| parse_err(movies_path, no, format!("unknown genre `{g}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if movies.insert(id, set).is_some() {
            return Err(parse_err(
                movies_path,
                no,
                format!("duplicate movie id {id}"),
            ));
        }
    }

    let remap: HashMap<u64, u32> = movies
        .keys()
        .enumerate()
        .map(|(i, &m)| (m, i as u32 + 1))
        .collect();
    let vocab: Vec<String> = movies.keys().map(u64::to_string).collect();
    let sets: Vec<Vec<usize>> = movies.into_values().collect();
    let names = MOVIELENS_GENRES.iter().map(|g| g.to_string()).collect();
    let table = AttributeTable::from_attribute_sets(names, &sets)?;

    let mut events = Vec::new();
    for (no, line) in lines(&fs::read(ratings_path)?) {
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(parse_err(
                ratings_path,
                no,
                "expected UserID::MovieID::Rating::Timestamp",
            ));
        }
        let num = |s: &str, what: &str| -> Result<i64> {
            s.trim()
                .parse()
                .map_err(|_| parse_err(ratings_path, no, format!("bad {what} `{s}`")))
        };
        let user = num(fields[0], "user id")?;
        let movie = num(fields[1], "movie id")?;
        num(fields[2], "rating")?;
        let ts = num(fields[3], "timestamp")?;
        let item = *remap.get(&(movie as u64)).ok_or_else(|| {
            Error::Data(format!(
                "rating on line {no} references unknown movie {movie}"
            ))
        })?;
        events.push((user.to_string(), item, ts));
    }

    let (sequences, dropped) = group_by_user(events, |users| {
        let mut order: Vec<usize> = (0..users.len()).collect();
        order.sort_by_key(|&i| users[i].0.parse::<i64>().unwrap_or(i64::MAX));
        order
    });
    DatasetBundle::assemble(sequences, table, vocab, dropped)
}

/// Loads a TSV events file and its item-attribute file.
pub fn load_tsv(
    events_path: impl AsRef<Path>,
    attributes_path: impl AsRef<Path>,
    has_header: bool,
) -> Result<DatasetBundle> {
    let (events_path, attributes_path) = (events_path.as_ref(), attributes_path.as_ref());
    let skip = usize::from(has_header);

    let mut item_ids: HashMap<String, u32> = HashMap::new();
    let mut vocab = Vec::new();
    let mut attr_ids: HashMap<String, usize> = HashMap::new();
    let mut attr_names = Vec::new();
    let mut sets = Vec::new();
    for (no, line) in lines(&fs::read(attributes_path)?).skip(skip) {
        let (item, attrs) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(attributes_path, no, "expected item<TAB>attributes"))?;
        let item = item.trim().to_string();
        let mut set = Vec::new();
        for a in attrs
            .split(['|', ','])
            .map(str::trim)
            .filter(|a| !a.is_empty())
        {
            let id = *attr_ids.entry(a.to_string()).or_insert_with(|| {
                attr_names.push(a.to_string());
                attr_names.len() - 1
            });
            set.push(id);
        }
        if set.is_empty() {
            return Err(Error::Data(format!(
                "item `{item}` (line {no}) has no attributes"
            )));
        }
        if item_ids
            .insert(item.clone(), vocab.len() as u32 + 1)
            .is_some()
        {
            return Err(parse_err(
                attributes_path,
                no,
                format!("duplicate item `{item}`"),
            ));
        }
        vocab.push(item);
        sets.push(set);
    }
    let table = AttributeTable::from_attribute_sets(attr_names, &sets)?;

    let mut events = Vec::new();
    for (no, line) in lines(&fs::read(events_path)?).skip(skip) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(
                events_path,
                no,
                "expected user<TAB>item<TAB>timestamp",
            ));
        }
        let item = *item_ids.get(fields[1].trim()).ok_or_else(|| {
            Error::Data(format!(
                "event on line {no} references item `{}` without attributes",
                fields[1]
            ))
        })?;
        let ts: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(events_path, no, format!("bad timestamp `{}`", fields[2])))?;
        events.push((fields[0].trim().to_string(), item, ts));
    }
    let (sequences, dropped) = group_by_user(events, |users| (0..users.len()).collect());
    DatasetBundle::assemble(sequences, table, vocab, dropped)
}

/// Prefix `[x_1..x_len]` of one sequence, predicting `x_{len+1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainingWindow {
    pub sequence: usize,
    pub prefix_len: usize,
}

impl TrainingWindow {
    pub fn history<'a>(&self, bundle: &'a DatasetBundle) -> &'a [u32] {
        &bundle.sequences[self.sequence].items[..self.prefix_len]
    }

    pub fn target(&self, bundle: &DatasetBundle) -> u32 {
        bundle.sequences[self.sequence].items[self.prefix_len]
    }
}

/// Every prefix whose target is not the held-out last item: a sequence of
/// length `L` yields `L − 2` windows with prefix lengths `1..=L−2`.
///
/// Windows reference the full prefix; inputs are truncated to the most recent
/// `max_len` items when a batch is assembled.
pub fn build_training_windows(bundle: &DatasetBundle) -> Vec<TrainingWindow> {
    bundle
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            (1..seq.len() - 1).map(move |prefix_len| TrainingWindow {
                sequence: s,
                prefix_len,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub user_id: u32,
    pub history: Vec<u32>,
    pub target: u32,
}

/// Leave-one-out split: one case per user, the last item held out.
pub fn test_split(bundle: &DatasetBundle) -> Vec<TestCase> {
    bundle
        .sequences
        .iter()
        .map(|s| TestCase {
            user_id: s.user_id,
            history: s.items[..s.len() - 1].to_vec(),
            target: s.items[s.len() - 1],
        })
        .collect()
}

/// Model inputs for a set of windows plus the `[B×A]` history distributions
/// of their full prefixes.
pub fn assemble_batch(
    bundle: &DatasetBundle,
    windows: &[TrainingWindow],
    max_len: usize,
) -> Result<(SequenceBatch, Tensor)> {
    let histories: Vec<&[u32]> = windows.iter().map(|w| w.history(bundle)).collect();
    let targets = windows.iter().map(|w| w.target(bundle)).collect();
    let batch = SequenceBatch::from_histories(&histories, targets, max_len);
    let a = bundle.attribute_table.num_attributes();
    let mut prefs = Vec::with_capacity(windows.len() * a);
    for h in &histories {
        prefs.extend(history_distribution(h, &bundle.attribute_table)?.into_vec());
    }
    Ok((batch, Tensor::new(vec![windows.len(), a], prefs)?))
}
