//! Ranking metrics, α trajectories and CSV emission.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::error::{Error, Result};

pub const DEFAULT_K_LIST: [usize; 2] = [5, 10];

/// Threshold on the largest entrywise change between consecutive rounds.
pub const CONVERGENCE_TOLERANCE: f64 = 0.01;
/// Consecutive quiet rounds required before α counts as converged.
pub const CONVERGENCE_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub client: usize,
    pub round: usize,
    pub split: Split,
    /// `"H@5"`, `"N@10"`, ...
    pub values: BTreeMap<String, f64>,
    pub users: usize,
}

impl MetricRecord {
    pub fn hit(&self, k: usize) -> Option<f64> {
        self.values.get(&format!("H@{k}")).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.values.get(&format!("N@{k}")).copied()
    }
}

/// One user's candidate scores; `item_ids[c]` is scored by `scores[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredUser {
    pub item_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub target: usize,
}

/// 1-based rank of `target`. Ties go to the smaller item id.
pub fn rank_of(item_ids: &[usize], scores: &[f64], target: usize) -> Result<usize> {
    if item_ids.len() != scores.len() {
        return Err(Error::Evaluation(format!(
            "{} candidates but {} scores",
            item_ids.len(),
            scores.len()
        )));
    }
    let pos = item_ids
        .iter()
        .position(|&id| id == target)
        .ok_or_else(|| Error::Evaluation(format!("ground truth {target} not among candidates")))?;
    let st = scores[pos];
    if st.is_nan() {
        return Err(Error::Evaluation(format!("NaN score for item {target}")));
    }
    let ahead = item_ids
        .iter()
        .zip(scores)
        .filter(|&(&id, &s)| s > st || (s == st && id < target))
        .count();
    Ok(ahead + 1)
}

pub fn rank_and_score(
    users: &[ScoredUser],
    k_list: &[usize],
    client: usize,
    round: usize,
    split: Split,
) -> Result<MetricRecord> {
    let ranks = users
        .iter()
        .map(|u| rank_of(&u.item_ids, &u.scores, u.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(record_from_ranks(&ranks, k_list, client, round, split))
}

pub fn record_from_ranks(
    ranks: &[usize],
    k_list: &[usize],
    client: usize,
    round: usize,
    split: Split,
) -> MetricRecord {
    let n = ranks.len().max(1) as f64;
    let mut values = BTreeMap::new();
    for &k in k_list {
        let hit = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let ndcg = ranks
            .iter()
            .filter(|&&r| r <= k)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum::<f64>()
            / n;
        values.insert(format!("H@{k}"), hit);
        values.insert(format!("N@{k}"), ndcg);
    }
    MetricRecord {
        client,
        round,
        split,
        values,
        users: ranks.len(),
    }
}

/// Round-indexed α matrices and the round after which they stop moving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrajectory {
    pub rounds: Vec<usize>,
    pub matrices: Vec<Vec<Vec<f64>>>,
    pub convergence_round: Option<usize>,
}

impl AlphaTrajectory {
    /// α matrix at the convergence round, or at the last round.
    pub fn settled(&self) -> Option<&Vec<Vec<f64>>> {
        match self.convergence_round {
            Some(r) => self
                .rounds
                .iter()
                .position(|&x| x == r)
                .map(|i| &self.matrices[i]),
            None => self.matrices.last(),
        }
    }
}

pub fn alpha_trajectory(rounds: &[(usize, Vec<Vec<f64>>)]) -> Result<AlphaTrajectory> {
    if rounds.is_empty() {
        return Err(Error::Evaluation("no α snapshots".into()));
    }
    let max_change = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let deltas: Vec<f64> = rounds
        .windows(2)
        .map(|w| max_change(&w[0].1, &w[1].1))
        .collect();
    // deltas[t] is the change from rounds[t] to rounds[t + 1].
    let convergence_round = (0..deltas.len())
        .find(|&t| {
            t + CONVERGENCE_WINDOW <= deltas.len()
                && deltas[t..t + CONVERGENCE_WINDOW]
                    .iter()
                    .all(|&d| d < CONVERGENCE_TOLERANCE)
        })
        .map(|t| rounds[t].0);
    Ok(AlphaTrajectory {
        rounds: rounds.iter().map(|r| r.0).collect(),
        matrices: rounds.iter().map(|r| r.1.clone()).collect(),
        convergence_round,
    })
}

/// A metric row as written to CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub method: String,
    pub client: usize,
    /// Round number, or `final` for the finalized model.
    pub round: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_rows(run_id: &str, method: &str, round: &str, rec: &MetricRecord) -> Vec<MetricRow> {
    let split = match rec.split {
        Split::Val => "val",
        Split::Test => "test",
    };
    rec.values
        .iter()
        .map(|(m, &v)| MetricRow {
            run_id: run_id.to_string(),
            method: method.to_string(),
            client: rec.client,
            round: round.to_string(),
            split: split.to_string(),
            metric: m.clone(),
            value: v,
        })
        .collect()
}

pub fn write_metric_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub run_id: String,
    pub round: usize,
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
}

pub fn alpha_rows(run_id: &str, traj: &AlphaTrajectory) -> Vec<AlphaRow> {
    let mut out = Vec::new();
    for (&round, m) in traj.rounds.iter().zip(&traj.matrices) {
        for (i, row) in m.iter().enumerate() {
            for (j, &alpha) in row.iter().enumerate() {
                out.push(AlphaRow {
                    run_id: run_id.to_string(),
                    round,
                    i,
                    j,
                    alpha,
                });
            }
        }
    }
    out
}

pub fn write_alpha_csv<W: Write>(rows: &[AlphaRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["run_id", "round", "i", "j", "alpha"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
