//! Detector evaluation without labels: centroid-distance ratios, the
//! user/transaction dual evaluation, and hits against a small set of known
//! anomalies.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureMatrix;
use crate::kmeans::KMeansModel;
use crate::ledger::{TransactionRecord, UserMap};
use crate::matrix::squared_distance;
use crate::ranking::AnomalyRanking;

/// Which users took part in which transactions, both ways. User ids are
/// kept in their decimal string form to match ranking entity ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OwnershipIndex {
    pub user_txs: BTreeMap<String, BTreeSet<String>>,
    pub tx_users: BTreeMap<String, BTreeSet<String>>,
}

impl OwnershipIndex {
    pub fn txs_of(&self, user: &str) -> impl Iterator<Item = &str> {
        self.user_txs
            .get(user)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn users_of(&self, tx: &str) -> impl Iterator<Item = &str> {
        self.tx_users
            .get(tx)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    /// True when the two maps are exact inverses.
    pub fn is_consistent(&self) -> bool {
        let forward: usize = self.user_txs.values().map(BTreeSet::len).sum();
        let backward: usize = self.tx_users.values().map(BTreeSet::len).sum();
        forward == backward
            && self.user_txs.iter().all(|(u, txs)| {
                txs.iter()
                    .all(|t| self.tx_users.get(t).is_some_and(|us| us.contains(u)))
            })
    }
}

/// A user owns every transaction where one of its addresses is an input or
/// an output.
pub fn build_ownership(records: &[TransactionRecord], user_map: &UserMap) -> Result<OwnershipIndex> {
    let mut idx = OwnershipIndex::default();
    for r in records {
        for addr in r.addresses() {
            let user = user_map.user_of(addr)?.to_string();
            idx.user_txs
                .entry(user.clone())
                .or_default()
                .insert(r.tx_id.clone());
            idx.tx_users.entry(r.tx_id.clone()).or_default().insert(user);
        }
    }
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualEvalResult {
    #[serde(rename = "A1")]
    pub a1: f64,
    #[serde(rename = "A2")]
    pub a2: f64,
    #[serde(rename = "m_DE")]
    pub m_de: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    /// |X_N|: transactions owned by the top N users.
    pub x_n_size: usize,
    /// |Y_M|: users owning the top M transactions.
    pub y_m_size: usize,
}

/// `(A1 + A2) / 2`.
pub fn dual_metric(a1: f64, a2: f64) -> f64 {
    (a1 + a2) / 2.0
}

/// Overlap of a derived set with the equally long prefix of a ranking.
fn prefix_overlap(derived: &BTreeSet<&str>, ranking: &AnomalyRanking) -> f64 {
    if derived.is_empty() {
        return 0.0;
    }
    let hits = ranking.top(derived.len()).filter(|id| derived.contains(id)).count();
    hits as f64 / derived.len() as f64
}

/// Dual evaluation of a user ranking against a transaction ranking.
///
/// `X_N` is the set of transactions owned by the top `n` users; A1 is the
/// share of `X_N` found in the first `|X_N|` entries of the transaction
/// ranking. `Y_M` and A2 are the mirror image.
pub fn dual_evaluation(
    user_ranking: &AnomalyRanking,
    tx_ranking: &AnomalyRanking,
    ownership: &OwnershipIndex,
    n: usize,
    m: usize,
) -> Result<DualEvalResult> {
    if n > user_ranking.len() {
        return Err(invalid(format!("N = {n} exceeds the {} ranked users", user_ranking.len())));
    }
    if m > tx_ranking.len() {
        return Err(invalid(format!("M = {m} exceeds the {} ranked transactions", tx_ranking.len())));
    }
    let x_n: BTreeSet<&str> = user_ranking.top(n).flat_map(|u| ownership.txs_of(u)).collect();
    let y_m: BTreeSet<&str> = tx_ranking.top(m).flat_map(|t| ownership.users_of(t)).collect();
    if x_n.is_empty() {
        warn!("top {n} users own no transactions; A1 set to 0");
    }
    if y_m.is_empty() {
        warn!("top {m} transactions have no owners; A2 set to 0");
    }
    let a1 = prefix_overlap(&x_n, tx_ranking);
    let a2 = prefix_overlap(&y_m, user_ranking);
    Ok(DualEvalResult {
        a1,
        a2,
        m_de: dual_metric(a1, a2),
        n,
        m,
        x_n_size: x_n.len(),
        y_m_size: y_m.len(),
    })
}

/// Mean over the top `top_n` ranked entities of the distance to their
/// k-means centroid divided by the largest such distance in their cluster.
pub fn centroid_distance_ratios(
    model: &KMeansModel,
    x: &FeatureMatrix,
    ranking: &AnomalyRanking,
    top_n: usize,
) -> Result<f64> {
    if top_n == 0 {
        return Err(invalid("top_n must be positive"));
    }
    if top_n > x.rows() || top_n > ranking.len() {
        return Err(invalid(format!("top_n = {top_n} exceeds the data size")));
    }
    if model.assignments.len() != x.rows() {
        return Err(invalid("k-means model was fit on different data"));
    }
    let dist: Vec<f64> = x
        .values
        .iter_rows()
        .zip(&model.assignments)
        .map(|(r, &c)| squared_distance(r, model.centroid(c)).sqrt())
        .collect();
    let mut max_in_cluster = vec![0.0f64; model.k];
    for (d, &c) in dist.iter().zip(&model.assignments) {
        max_in_cluster[c] = max_in_cluster[c].max(*d);
    }
    let index = x.index_of();
    let mut total = 0.0;
    for id in ranking.top(top_n) {
        let &i = index
            .get(id)
            .ok_or_else(|| invalid(format!("ranked entity `{id}` is not in the feature matrix")))?;
        let c = model.assignments[i];
        if max_in_cluster[c] > 0.0 {
            total += dist[i] / max_in_cluster[c];
        }
    }
    Ok(total / top_n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    User,
    Tx,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub kind: EntityKind,
    pub id: String,
    pub label: String,
}

/// Known anomalous users and transactions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub entries: Vec<TruthEntry>,
}

impl GroundTruth {
    pub fn push(&mut self, kind: EntityKind, id: impl Into<String>, label: impl Into<String>) {
        self.entries.push(TruthEntry {
            kind,
            id: id.into(),
            label: label.into(),
        });
    }

    pub fn of_kind(&self, kind: EntityKind) -> impl Iterator<Item = &TruthEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        self.of_kind(kind).count()
    }

    /// Reads `kind,id,label` lines (`kind` is `user` or `tx`). A header line
    /// and `#` comments are skipped; the label may contain commas.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut truth = GroundTruth::default();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if line.is_empty() || line.starts_with('#') || line == "kind,id,label" {
                continue;
            }
            let bad = |reason: String| Error::Parse { line: line_no, reason };
            let mut parts = line.splitn(3, ',');
            let kind = match parts.next() {
                Some("user") => EntityKind::User,
                Some("tx") => EntityKind::Tx,
                other => return Err(bad(format!("unknown kind {other:?}"))),
            };
            let id = parts.next().unwrap_or("");
            if id.is_empty() {
                return Err(bad("empty id".into()));
            }
            truth.push(kind, id, parts.next().unwrap_or(""));
        }
        Ok(truth)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "kind,id,label")?;
        for e in &self.entries {
            let kind = match e.kind {
                EntityKind::User => "user",
                EntityKind::Tx => "tx",
            };
            writeln!(w, "{kind},{},{}", e.id, e.label)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    /// 1-based rank.
    pub rank: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitReport {
    pub top_n: usize,
    pub truth_count: usize,
    pub hit_count: usize,
    pub hits: Vec<Hit>,
}

/// Known entities of `kind` that appear in the first `top_n` ranks.
pub fn ground_truth_hits(
    ranking: &AnomalyRanking,
    truth: &GroundTruth,
    kind: EntityKind,
    top_n: usize,
) -> Result<HitReport> {
    if top_n > ranking.len() {
        return Err(invalid(format!("top_n = {top_n} exceeds the ranking length {}", ranking.len())));
    }
    let known: BTreeMap<&str, &str> = truth
        .of_kind(kind)
        .map(|e| (e.id.as_str(), e.label.as_str()))
        .collect();
    let mut seen = HashSet::new();
    let hits: Vec<Hit> = ranking
        .top(top_n)
        .enumerate()
        .filter_map(|(i, id)| {
            let label = known.get(id)?;
            seen.insert(id).then(|| Hit {
                id: id.to_string(),
                rank: i + 1,
                label: label.to_string(),
            })
        })
        .collect();
    Ok(HitReport {
        top_n,
        truth_count: known.len(),
        hit_count: hits.len(),
        hits,
    })
}
