//! Top-K retrieval metrics, the greedy calibration reranker and evaluation
//! reports.
//!
//! Rankings sort by descending score and break ties by ascending item id.
//!
//! Reports serialize one row per cutoff. JSON lines:
//!
//! ```text
//! {"label":"C3SASR","fingerprint":"3f2a…","k":10,"recall":0.21,"mrr":0.08,"ckl":0.41,"n_cases":6040}
//! ```
//!
//! CSV uses the same columns in the same order, with a header line.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    ckl_metric, history_distribution, smoothed_kl, AttributeTable, KL_SMOOTHING,
};
use crate::data::TestCase;
use crate::error::{Error, Result};
use crate::model::{C3Model, SequenceBatch};

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];
pub const DEFAULT_POOL: usize = 100;

/// Anything that maps histories to next-item scores over `1..=num_items`.
pub trait SequenceScorer: Sync {
    fn num_items(&self) -> usize;

    /// One score vector per history; entry `j` scores item `j + 1`.
    fn score_batch(&self, histories: &[&[u32]]) -> Result<Vec<Vec<f64>>>;

    fn fingerprint(&self) -> String;
}

impl SequenceScorer for C3Model {
    fn num_items(&self) -> usize {
        C3Model::num_items(self)
    }

    fn score_batch(&self, histories: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let batch = SequenceBatch::from_histories(histories, Vec::new(), self.config().max_len);
        let probs = self.forward(&batch)?;
        Ok((0..histories.len())
            .map(|b| probs.row(b).to_vec())
            .collect())
    }

    fn fingerprint(&self) -> String {
        fingerprint(&(self.config(), C3Model::num_items(self)))
    }
}

/// Short SHA-256 digest of a value's JSON form.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    Sha256::digest(&json)[..8]
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` best item ids, skipping `exclude`; shorter if too few remain.
pub fn top_k(scores: &[f64], k: usize, exclude: &[u32]) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|&j| !exclude.contains(&(j as u32 + 1)))
        .collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx.into_iter().map(|j| j as u32 + 1).collect()
}

fn check_lists<L: AsRef<[u32]>>(rec_lists: &[L], targets: &[u32], k: usize) -> Result<()> {
    if rec_lists.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} lists for {} targets",
            rec_lists.len(),
            targets.len()
        )));
    }
    if rec_lists.is_empty() {
        return Err(Error::Contract("no cases".into()));
    }
    if let Some(short) = rec_lists.iter().find(|l| l.as_ref().len() < k) {
        return Err(Error::Contract(format!(
            "cutoff {k} exceeds list of length {}",
            short.as_ref().len()
        )));
    }
    Ok(())
}

fn rank_within<L: AsRef<[u32]>>(list: &L, target: u32, k: usize) -> Option<usize> {
    list.as_ref()[..k]
        .iter()
        .position(|&i| i == target)
        .map(|p| p + 1)
}

/// Fraction of cases whose target is among the first `k` entries.
pub fn recall_at_k<L: AsRef<[u32]>>(rec_lists: &[L], targets: &[u32], k: usize) -> Result<f64> {
    check_lists(rec_lists, targets, k)?;
    let hits = rec_lists
        .iter()
        .zip(targets)
        .filter(|(l, &t)| rank_within(*l, t, k).is_some())
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Mean reciprocal rank, counting 0 beyond rank `k`.
pub fn mrr_at_k<L: AsRef<[u32]>>(rec_lists: &[L], targets: &[u32], k: usize) -> Result<f64> {
    check_lists(rec_lists, targets, k)?;
    let total: f64 = rec_lists
        .iter()
        .zip(targets)
        .filter_map(|(l, &t)| rank_within(l, t, k))
        .map(|r| 1.0 / r as f64)
        .fold(0.0, |a, b| a + b);
    Ok(total / targets.len() as f64)
}

/// Builds a `k`-item list greedily from the top-`pool` candidates, each step
/// adding the item maximising `(1−β)·score − β·KL(p ‖ q̃(list + item))`.
pub fn greedy_calibrated_rerank(
    scores: &[f64],
    table: &AttributeTable,
    history: &[f64],
    k: usize,
    beta: f64,
    pool: usize,
) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
    }
    if history.len() != table.num_attributes() {
        return Err(Error::dim(
            "greedy_calibrated_rerank",
            &[history.len()],
            &[table.num_attributes()],
        ));
    }
    let mut candidates = top_k(scores, pool, &[]);
    candidates.retain(|&c| scores[c as usize - 1].is_finite());
    if candidates.len() < k {
        return Err(Error::Contract(format!(
            "candidate pool of {} items is smaller than cutoff {k}",
            candidates.len()
        )));
    }
    let a = table.num_attributes();
    let mut mass = vec![0.0; a];
    let mut q = vec![0.0; a];
    let mut list = Vec::with_capacity(k);
    for step in 0..k {
        let n = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (slot, &c) in candidates.iter().enumerate() {
            let row = table.row(c)?;
            for ((qv, m), r) in q.iter_mut().zip(&mass).zip(row) {
                *qv = (m + r) / n;
            }
            let objective = (1.0 - beta) * scores[c as usize - 1]
                - beta * smoothed_kl(history, &q, KL_SMOOTHING);
            let better = match best {
                None => true,
                Some((b, v)) => objective > v || (objective == v && c < candidates[b]),
            };
            if better {
                best = Some((slot, objective));
            }
        }
        let (slot, _) = best.expect("pool holds at least k candidates");
        let chosen = candidates.remove(slot);
        for (m, r) in mass.iter_mut().zip(table.row(chosen)?) {
            *m += r;
        }
        list.push(chosen);
    }
    Ok(list)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankOptions {
    pub beta: f64,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    /// Drop items already in the history from the ranking.
    pub filter_seen: bool,
    pub rerank: Option<RerankOptions>,
    /// Cases scored per forward pass.
    pub chunk_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            filter_seen: false,
            rerank: None,
            chunk_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub fingerprint: String,
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
    pub ckl: f64,
    pub n_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.rows
            .iter_mut()
            .for_each(|r| r.label = label.to_string());
        self
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,fingerprint,k,recall,mrr,ckl,n_cases\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.label, r.fingerprint, r.k, r.recall, r.mrr, r.ckl, r.n_cases
            );
        }
        out
    }

    pub fn write_json_lines(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_lines()?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Ranked lists of length `max(cutoffs)` for every case, in case order.
pub fn recommend<S: SequenceScorer + ?Sized>(
    scorer: &S,
    cases: &[TestCase],
    table: &AttributeTable,
    opts: &EvalOptions,
) -> Result<Vec<Vec<u32>>> {
    let depth = opts.cutoffs.iter().copied().max().unwrap_or(0);
    let chunks: Vec<Result<Vec<Vec<u32>>>> = cases
        .par_chunks(opts.chunk_size.max(1))
        .map(|chunk| {
            let histories: Vec<&[u32]> = chunk.iter().map(|c| c.history.as_slice()).collect();
            let scores = scorer.score_batch(&histories)?;
            chunk
                .iter()
                .zip(&scores)
                .map(|(case, s)| {
                    let mut s = s.clone();
                    if opts.filter_seen {
                        for &i in &case.history {
                            s[i as usize - 1] = f64::NEG_INFINITY;
                        }
                    }
                    let list = match opts.rerank {
                        Some(r) => {
                            let p = history_distribution(&case.history, table)?;
                            greedy_calibrated_rerank(&s, table, p.probs(), depth, r.beta, r.pool)?
                        }
                        None => top_k(
                            &s,
                            depth,
                            if opts.filter_seen { &case.history } else { &[] },
                        ),
                    };
                    if list.len() < depth {
                        return Err(Error::Contract(format!(
                            "only {} rankable items for cutoff {depth}",
                            list.len()
                        )));
                    }
                    Ok(list)
                })
                .collect()
        })
        .collect();
    let mut lists = Vec::with_capacity(cases.len());
    for chunk in chunks {
        lists.extend(chunk?);
    }
    Ok(lists)
}

/// Scores every case and reports Recall, MRR and C_KL at each cutoff.
pub fn evaluate<S: SequenceScorer + ?Sized>(
    scorer: &S,
    cases: &[TestCase],
    table: &AttributeTable,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.cutoffs.is_empty() || opts.cutoffs.contains(&0) {
        return Err(Error::Config(format!("invalid cutoffs {:?}", opts.cutoffs)));
    }
    if scorer.num_items() != table.num_items() {
        return Err(Error::Data(format!(
            "scorer covers {} items, attribute table {}",
            scorer.num_items(),
            table.num_items()
        )));
    }
    let lists = recommend(scorer, cases, table, opts)?;
    let targets: Vec<u32> = cases.iter().map(|c| c.target).collect();
    let histories: Vec<&[u32]> = cases.iter().map(|c| c.history.as_slice()).collect();
    let fp = scorer.fingerprint();
    let mut rows = Vec::new();
    for &k in &opts.cutoffs {
        let truncated: Vec<&[u32]> = lists.iter().map(|l| &l[..k]).collect();
        rows.push(EvalRow {
            label: String::new(),
            fingerprint: fp.clone(),
            k,
            recall: recall_at_k(&truncated, &targets, k)?,
            mrr: mrr_at_k(&truncated, &targets, k)?,
            ckl: ckl_metric(&truncated, &histories, table)?,
            n_cases: cases.len(),
        });
    }
    Ok(EvalReport { rows })
}
