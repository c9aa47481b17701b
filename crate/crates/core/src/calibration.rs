//! Attribute preference distributions, the calibration loss and the weighted
//! training objective, and the `C_KL` calibration metric.
//!
//! Three distributions over item attributes are compared:
//! * `p` – the history: mean attribute row of the items a user consumed,
//! * `q` – a recommendation list: mean attribute row of the listed items,
//! * `q̂` – the model's soft prediction: attribute rows weighted by the
//!   predicted next-item probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Mass blended from `p` into `q` before taking the KL divergence.
pub const KL_SMOOTHING: f64 = 0.01;

const SUM_TOLERANCE: f64 = 1e-9;

/// Per-item distribution over a fixed attribute vocabulary. Row `i` belongs to
/// item id `i + 1`; id 0 is padding and has no row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl AttributeTable {
    /// Uniform mass over each item's attribute set.
    pub fn from_attribute_sets(names: Vec<String>, sets: &[Vec<usize>]) -> Result<Self> {
        let a = names.len();
        let mut rows = Vec::with_capacity(sets.len());
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Data(format!("item {} has no attributes", i + 1)));
            }
            if let Some(&bad) = set.iter().find(|&&s| s >= a) {
                return Err(Error::Data(format!(
                    "item {} references attribute {bad} of {a}",
                    i + 1
                )));
            }
            let mut row = vec![0.0; a];
            let mut distinct = set.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let w = 1.0 / distinct.len() as f64;
            for s in distinct {
                row[s] = w;
            }
            rows.push(row);
        }
        Ok(AttributeTable { names, rows })
    }

    pub fn from_rows(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != names.len() {
                return Err(Error::dim("attribute row", &[row.len()], &[names.len()]));
            }
            check_distribution(row).map_err(|e| Error::Data(format!("item {}: {e}", i + 1)))?;
        }
        Ok(AttributeTable { names, rows })
    }

    pub fn num_items(&self) -> usize {
        self.rows.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.names.len()
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, item: u32) -> Result<&[f64]> {
        if item == 0 {
            return Err(Error::Data("padding id 0 has no attributes".into()));
        }
        self.rows
            .get(item as usize - 1)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no attributes for item {item}")))
    }

    /// `[|I| × A]` matrix of all rows.
    pub fn matrix(&self) -> Tensor {
        Tensor::new(vec![self.rows.len(), self.names.len()], self.rows.concat())
            .expect("rows have uniform width")
    }
}

fn check_distribution(probs: &[f64]) -> std::result::Result<(), String> {
    if probs.iter().any(|&v| !(v >= 0.0)) {
        return Err("negative or non-finite mass".into());
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(format!("mass sums to {total}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDistribution {
    probs: Vec<f64>,
}

impl PreferenceDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs).map_err(Error::Domain)?;
        Ok(PreferenceDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

fn mean_rows<'a>(
    items: impl Iterator<Item = &'a u32>,
    table: &AttributeTable,
    what: &str,
) -> Result<PreferenceDistribution> {
    let mut acc = vec![0.0; table.num_attributes()];
    let mut n = 0usize;
    for &item in items {
        for (a, r) in acc.iter_mut().zip(table.row(item)?) {
            *a += r;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain(format!("{what} is empty")));
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    Ok(PreferenceDistribution { probs: acc })
}

/// `p(s)`: mean attribute row of the history, ignoring padding ids.
pub fn history_distribution(seq: &[u32], table: &AttributeTable) -> Result<PreferenceDistribution> {
    mean_rows(seq.iter().filter(|&&i| i != 0), table, "history")
}

/// `q(s)`: unweighted mean attribute row of a recommendation list.
pub fn list_distribution(items: &[u32], table: &AttributeTable) -> Result<PreferenceDistribution> {
    mean_rows(items.iter(), table, "recommendation list")
}

/// `q̂(s) = Σ_i ŷ_i · row(i)`, where `scores[j]` belongs to item `j + 1`.
pub fn predicted_distribution(
    scores: &[f64],
    table: &AttributeTable,
) -> Result<PreferenceDistribution> {
    if scores.len() != table.num_items() {
        return Err(Error::dim(
            "predicted_distribution",
            &[scores.len()],
            &[table.num_items()],
        ));
    }
    let mut acc = vec![0.0; table.num_attributes()];
    for (y, row) in scores.iter().zip(&table.rows) {
        for (a, r) in acc.iter_mut().zip(row) {
            *a += y * r;
        }
    }
    Ok(PreferenceDistribution { probs: acc })
}

/// `1 − cos(q̂, p)`.
pub fn calibration_loss(predicted: &[f64], history: &[f64]) -> Result<f64> {
    if predicted.len() != history.len() {
        return Err(Error::dim(
            "calibration_loss",
            &[predicted.len()],
            &[history.len()],
        ));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(predicted), norm(history));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("calibration loss of a zero vector".into()));
    }
    let dot: f64 = predicted.iter().zip(history).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (na * nb))
}

/// `−log ŷ_target`, for a target item id.
pub fn cross_entropy(target: u32, probs: &[f64]) -> Result<f64> {
    let p = target
        .checked_sub(1)
        .and_then(|i| probs.get(i as usize))
        .ok_or_else(|| Error::Data(format!("target {target} outside score vector")))?;
    Ok(-p.ln())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// `(1−λ)·CE(y, ŷ) + λ·(1 − cos(q̂(ŷ), p))` for a single case.
pub fn weighted_loss(
    target: u32,
    probs: &[f64],
    history: &[f64],
    table: &AttributeTable,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    let ce = cross_entropy(target, probs)?;
    let q_hat = predicted_distribution(probs, table)?;
    let calib = calibration_loss(q_hat.probs(), history)?;
    Ok((1.0 - lambda) * ce + lambda * calib)
}

/// Tape handles for a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Scalar `(1−λ)·mean(CE) + λ·mean(1 − cos)`.
    pub total: Var,
    /// Scalar mean cross-entropy.
    pub accuracy: Var,
    /// Scalar mean calibration loss.
    pub calibration: Var,
}

/// Batch form of [`weighted_loss`] on a tape.
///
/// `logits` and `probs` are `[B×|I|]`, `histories` holds one `p` row per case
/// (`[B×A]`) and `attributes` is the `[|I|×A]` table matrix.
pub fn weighted_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    probs: Var,
    targets: &[u32],
    histories: Var,
    attributes: Var,
    lambda: f64,
) -> Result<LossTerms> {
    check_lambda(lambda)?;
    let columns: Vec<usize> = targets
        .iter()
        .map(|&t| {
            t.checked_sub(1)
                .map(|i| i as usize)
                .ok_or_else(|| Error::Data("target id 0 is padding".into()))
        })
        .collect::<Result<_>>()?;
    let log_probs = tape.log_softmax(logits, 1)?;
    let picked = tape.pick_rows(log_probs, &columns)?;
    let mean_log = tape.mean(picked);
    let accuracy = tape.scale(mean_log, -1.0);

    let q_hat = tape.matmul(probs, attributes)?;
    let cos = tape.row_cosine(q_hat, histories)?;
    let neg = tape.scale(cos, -1.0);
    let per_case = tape.add_scalar(neg, 1.0);
    let calibration = tape.mean(per_case);

    let a = tape.scale(accuracy, 1.0 - lambda);
    let c = tape.scale(calibration, lambda);
    let total = tape.add(a, c)?;
    Ok(LossTerms {
        total,
        accuracy,
        calibration,
    })
}

/// `KL(p ‖ q̃)` with `q̃ = (1−γ)·q + γ·p`; terms with `p = 0` vanish.
pub fn smoothed_kl(history: &[f64], list: &[f64], gamma: f64) -> f64 {
    history
        .iter()
        .zip(list)
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &q)| p * (p / ((1.0 - gamma) * q + gamma * p)).ln())
        .sum()
}

/// Mean smoothed KL divergence between each history and its recommendation
/// list; lower is better calibrated.
pub fn ckl_metric<L: AsRef<[u32]>, H: AsRef<[u32]>>(
    rec_lists: &[L],
    histories: &[H],
    table: &AttributeTable,
) -> Result<f64> {
    if rec_lists.len() != histories.len() {
        return Err(Error::Contract(format!(
            "{} recommendation lists for {} histories",
            rec_lists.len(),
            histories.len()
        )));
    }
    if rec_lists.is_empty() {
        return Err(Error::Domain("no test cases".into()));
    }
    let mut total = 0.0;
    for (list, hist) in rec_lists.iter().zip(histories) {
        let p = history_distribution(hist.as_ref(), table)?;
        let q = list_distribution(list.as_ref(), table)?;
        total += smoothed_kl(p.probs(), q.probs(), KL_SMOOTHING);
    }
    Ok(total / rec_lists.len() as f64)
}
