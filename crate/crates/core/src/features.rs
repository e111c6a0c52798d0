//! Per-node feature extraction and log normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graphs::{TransactionGraph, UserGraph};
use crate::ledger::{TransactionRecord, SATOSHI_PER_BTC};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    User,
    Transaction,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::User => "user",
            GraphKind::Transaction => "tx",
        })
    }
}

/// Node features. The first twelve are the canonical set; the last two are
/// derived columns used by the default schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    InDegree,
    OutDegree,
    UniqueInDegree,
    UniqueOutDegree,
    ClusteringCoefficient,
    AvgInTransaction,
    AvgOutTransaction,
    AvgInInterval,
    AvgOutInterval,
    Balance,
    CreationDate,
    ActiveDuration,
    /// Mean of the in- and out-interval features.
    MeanTimeInterval,
    /// Sum of a transaction's outputs; total received for users.
    TotalAmount,
}

impl Feature {
    pub const CANONICAL: [Feature; 12] = [
        Feature::InDegree,
        Feature::OutDegree,
        Feature::UniqueInDegree,
        Feature::UniqueOutDegree,
        Feature::ClusteringCoefficient,
        Feature::AvgInTransaction,
        Feature::AvgOutTransaction,
        Feature::AvgInInterval,
        Feature::AvgOutInterval,
        Feature::Balance,
        Feature::CreationDate,
        Feature::ActiveDuration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::InDegree => "in_degree",
            Feature::OutDegree => "out_degree",
            Feature::UniqueInDegree => "unique_in_degree",
            Feature::UniqueOutDegree => "unique_out_degree",
            Feature::ClusteringCoefficient => "clustering_coefficient",
            Feature::AvgInTransaction => "avg_in_transaction",
            Feature::AvgOutTransaction => "avg_out_transaction",
            Feature::AvgInInterval => "avg_in_interval",
            Feature::AvgOutInterval => "avg_out_interval",
            Feature::Balance => "balance",
            Feature::CreationDate => "creation_date",
            Feature::ActiveDuration => "active_duration",
            Feature::MeanTimeInterval => "mean_time_interval",
            Feature::TotalAmount => "total_amount",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::CANONICAL
            .iter()
            .chain(&[Feature::MeanTimeInterval, Feature::TotalAmount])
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid(format!("unknown feature `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<Feature>,
    kind: GraphKind,
}

impl FeatureSchema {
    pub fn new(kind: GraphKind, features: Vec<Feature>) -> Result<Self> {
        if features.is_empty() {
            return Err(invalid("feature schema is empty"));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(*f) {
                return Err(invalid(format!("feature `{f}` listed twice")));
            }
        }
        Ok(Self { features, kind })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.features.iter().map(|f| f.name()).collect()
    }
}

/// The reduced schemas used for detection: six user features, three
/// transaction features.
pub fn default_schema(kind: GraphKind) -> FeatureSchema {
    let features = match kind {
        GraphKind::User => vec![
            Feature::InDegree,
            Feature::OutDegree,
            Feature::AvgInTransaction,
            Feature::AvgOutTransaction,
            Feature::MeanTimeInterval,
            Feature::ClusteringCoefficient,
        ],
        GraphKind::Transaction => {
            vec![Feature::InDegree, Feature::OutDegree, Feature::TotalAmount]
        }
    };
    FeatureSchema::new(kind, features).expect("default schemas are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub entity_ids: Vec<String>,
    pub values: Matrix,
    pub schema: FeatureSchema,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.entity_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            entity_ids: indices.iter().map(|&i| self.entity_ids[i].clone()).collect(),
            values: self.values.select_rows(indices),
            schema: self.schema.clone(),
            normalized: self.normalized,
        }
    }

    /// CSV with header `entity_id,<feature names...>`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "entity_id")?;
        for name in self.schema.names() {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for (id, row) in self.entity_ids.iter().zip(self.values.iter_rows()) {
            write!(w, "{id}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Incident edges of one node: (counterpart, amount in satoshi, timestamp).
#[derive(Debug, Default, Clone)]
struct Incidence {
    incoming: Vec<(usize, u64, i64)>,
    outgoing: Vec<(usize, u64, i64)>,
}

struct Adjacency {
    nodes: Vec<Incidence>,
    /// Sorted distinct neighbors in the undirected simple projection.
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    fn new(n: usize, edges: impl Iterator<Item = (usize, usize, u64, i64)>) -> Self {
        let mut nodes = vec![Incidence::default(); n];
        let mut neighbors = vec![Vec::new(); n];
        for (from, to, amount, ts) in edges {
            nodes[from].outgoing.push((to, amount, ts));
            nodes[to].incoming.push((from, amount, ts));
            if from != to {
                neighbors[from].push(to);
                neighbors[to].push(from);
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        Self { nodes, neighbors }
    }

    fn clustering_coefficients(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut mark = vec![false; n];
        let mut out = vec![0.0; n];
        for u in 0..n {
            let nb = &self.neighbors[u];
            let d = nb.len();
            if d < 2 {
                continue;
            }
            for &v in nb {
                mark[v] = true;
            }
            let mut links = 0u64;
            for &v in nb {
                for &w in &self.neighbors[v] {
                    if mark[w] {
                        links += 1;
                    }
                }
            }
            for &v in nb {
                mark[v] = false;
            }
            // each neighbor pair was counted from both ends
            let links = links / 2;
            out[u] = links as f64 / (d as f64 * (d as f64 - 1.0) / 2.0);
        }
        out
    }
}

fn mean_amount_btc(edges: &[(usize, u64, i64)]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let total: u128 = edges.iter().map(|e| e.1 as u128).sum();
    total as f64 / SATOSHI_PER_BTC as f64 / edges.len() as f64
}

/// Mean gap between consecutive sorted timestamps.
fn mean_interval(edges: &[(usize, u64, i64)]) -> f64 {
    if edges.len() < 2 {
        return 0.0;
    }
    let (lo, hi) = edges
        .iter()
        .fold((i64::MAX, i64::MIN), |(lo, hi), e| (lo.min(e.2), hi.max(e.2)));
    (hi - lo) as f64 / (edges.len() - 1) as f64
}

fn unique_count(edges: &[(usize, u64, i64)]) -> f64 {
    let mut c: Vec<usize> = edges.iter().map(|e| e.0).collect();
    c.sort_unstable();
    c.dedup();
    c.len() as f64
}

/// Values that do not come from the incidence lists.
struct NodeExtras {
    balance_btc: f64,
    total_amount_btc: f64,
}

fn fill_rows(
    adj: &Adjacency,
    schema: &FeatureSchema,
    extras: impl Fn(usize, &Incidence) -> NodeExtras,
) -> Matrix {
    let n = adj.nodes.len();
    let needs_cc = schema.features().contains(&Feature::ClusteringCoefficient);
    let cc = if needs_cc {
        adj.clustering_coefficients()
    } else {
        Vec::new()
    };
    let mut m = Matrix::zeros(n, schema.len());
    for (i, node) in adj.nodes.iter().enumerate() {
        let ext = extras(i, node);
        let (first, last) = node
            .incoming
            .iter()
            .chain(&node.outgoing)
            .fold(None, |acc: Option<(i64, i64)>, e| match acc {
                None => Some((e.2, e.2)),
                Some((lo, hi)) => Some((lo.min(e.2), hi.max(e.2))),
            })
            .unwrap_or((0, 0));
        let row = m.row_mut(i);
        for (j, f) in schema.features().iter().enumerate() {
            row[j] = match f {
                Feature::InDegree => node.incoming.len() as f64,
                Feature::OutDegree => node.outgoing.len() as f64,
                Feature::UniqueInDegree => unique_count(&node.incoming),
                Feature::UniqueOutDegree => unique_count(&node.outgoing),
                Feature::ClusteringCoefficient => cc[i],
                Feature::AvgInTransaction => mean_amount_btc(&node.incoming),
                Feature::AvgOutTransaction => mean_amount_btc(&node.outgoing),
                Feature::AvgInInterval => mean_interval(&node.incoming),
                Feature::AvgOutInterval => mean_interval(&node.outgoing),
                Feature::MeanTimeInterval => {
                    0.5 * (mean_interval(&node.incoming) + mean_interval(&node.outgoing))
                }
                Feature::Balance => ext.balance_btc,
                Feature::CreationDate => first as f64,
                Feature::ActiveDuration => (last - first) as f64,
                Feature::TotalAmount => ext.total_amount_btc,
            };
        }
    }
    m
}

/// One row per user, in ascending user id order.
///
/// Balance and total amount come from the ledger flows stored on the graph,
/// so coinbase receipts and self-change are included.
pub fn extract_user_features(graph: &UserGraph, schema: &FeatureSchema) -> Result<FeatureMatrix> {
    if schema.kind() != GraphKind::User {
        return Err(invalid("user features need a user schema"));
    }
    let ids: Vec<u64> = graph.nodes.iter().copied().collect();
    let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let adj = Adjacency::new(
        ids.len(),
        graph
            .edges
            .iter()
            .map(|e| (index[&e.from], index[&e.to], e.amount.0, e.timestamp)),
    );
    let values = fill_rows(&adj, schema, |i, _| {
        let flow = graph.flows.get(&ids[i]).copied().unwrap_or_default();
        NodeExtras {
            balance_btc: flow.balance() as f64 / SATOSHI_PER_BTC as f64,
            total_amount_btc: flow.received.as_btc(),
        }
    });
    Ok(FeatureMatrix {
        entity_ids: ids.iter().map(|u| u.to_string()).collect(),
        values,
        schema: schema.clone(),
        normalized: false,
    })
}

/// One row per transaction, in record order.
///
/// Edge timestamps are the spending transaction's time. Balance is graph
/// inflow minus graph outflow.
pub fn extract_transaction_features(
    graph: &TransactionGraph,
    records: &[TransactionRecord],
    schema: &FeatureSchema,
) -> Result<FeatureMatrix> {
    if schema.kind() != GraphKind::Transaction {
        return Err(invalid("transaction features need a transaction schema"));
    }
    let by_id: HashMap<&str, &TransactionRecord> =
        records.iter().map(|r| (r.tx_id.as_str(), r)).collect();
    let mut totals = Vec::with_capacity(graph.nodes.len());
    for id in &graph.nodes {
        let r = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Inconsistent(id.clone()))?;
        totals.push(r.total_output().as_btc());
    }
    let adj = Adjacency::new(
        graph.nodes.len(),
        graph
            .edges
            .iter()
            .map(|e| (e.from, e.to, e.amount.0, graph.timestamps[e.to])),
    );
    let values = fill_rows(&adj, schema, |i, node| {
        let inflow: i128 = node.incoming.iter().map(|e| e.1 as i128).sum();
        let outflow: i128 = node.outgoing.iter().map(|e| e.1 as i128).sum();
        NodeExtras {
            balance_btc: (inflow - outflow) as f64 / SATOSHI_PER_BTC as f64,
            total_amount_btc: totals[i],
        }
    });
    Ok(FeatureMatrix {
        entity_ids: graph.nodes.clone(),
        values,
        schema: schema.clone(),
        normalized: false,
    })
}

/// sign(x)·ln(1+|x|): odd, strictly increasing, defined everywhere.
#[inline]
pub fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Signed log transform followed by a population z-score per column.
/// Zero-variance columns become all zeros.
pub fn normalize(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    if matrix.normalized {
        return Err(invalid("matrix is already normalized"));
    }
    let (m, n) = (matrix.rows(), matrix.cols());
    let mut values = matrix.values.clone();
    for i in 0..m {
        for v in values.row_mut(i) {
            *v = if *v == 0.0 { 0.0 } else { signed_log1p(*v) };
        }
    }
    for j in 0..n {
        let mut sum = 0.0;
        for i in 0..m {
            sum += values.get(i, j);
        }
        let mean = if m > 0 { sum / m as f64 } else { 0.0 };
        let mut ss = 0.0;
        for i in 0..m {
            let d = values.get(i, j) - mean;
            ss += d * d;
        }
        let std = if m > 0 { (ss / m as f64).sqrt() } else { 0.0 };
        let constant = (0..m).all(|i| values.get(i, j) == values.get(0, j));
        for i in 0..m {
            let z = if constant || std == 0.0 {
                0.0
            } else {
                (values.get(i, j) - mean) / std
            };
            values.set(i, j, z);
        }
    }
    if values.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value after normalization".into()));
    }
    Ok(FeatureMatrix {
        entity_ids: matrix.entity_ids.clone(),
        values,
        schema: matrix.schema.clone(),
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_transaction_graph, build_user_graph};
    use crate::ledger::{load_user_map, parse_ledger};

    fn all_user_features() -> FeatureSchema {
        let mut f = Feature::CANONICAL.to_vec();
        f.push(Feature::MeanTimeInterval);
        f.push(Feature::TotalAmount);
        FeatureSchema::new(GraphKind::User, f).unwrap()
    }

    fn col(fm: &FeatureMatrix, row: &str, f: Feature) -> f64 {
        let i = fm.entity_ids.iter().position(|e| e == row).unwrap();
        let j = fm.schema.features().iter().position(|&g| g == f).unwrap();
        fm.values.get(i, j)
    }

    #[test]
    fn default_schema_sizes() {
        assert_eq!(default_schema(GraphKind::User).len(), 6);
        assert_eq!(default_schema(GraphKind::Transaction).len(), 3);
        assert!(FeatureSchema::new(GraphKind::User, vec![]).is_err());
        assert!(FeatureSchema::new(GraphKind::User, vec![Feature::Balance, Feature::Balance]).is_err());
        assert_eq!(
            default_schema(GraphKind::User).names()[4],
            "mean_time_interval"
        );
    }

    #[test]
    fn feature_names_parse_back() {
        for f in Feature::CANONICAL {
            assert_eq!(f.name().parse::<Feature>().unwrap(), f);
        }
        assert!("nope".parse::<Feature>().is_err());
    }

    #[test]
    fn receiver_hand_computed() {
        // u9 receives 2 BTC at t=100 and 4 BTC at t=160 and never sends.
        let recs = parse_ledger(
            "c1,50,,a1:2.00000000\nc2,60,,a2:4.00000000\n\
             t1,100,a1:2.00000000,a9:2.00000000\nt2,160,a2:4.00000000,a9:4.00000000\n"
                .as_bytes(),
        )
        .unwrap();
        let map = load_user_map("a1,1\na2,2\na9,9\n".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        let fm = extract_user_features(&g, &all_user_features()).unwrap();
        assert_eq!(col(&fm, "9", Feature::InDegree), 2.0);
        assert_eq!(col(&fm, "9", Feature::OutDegree), 0.0);
        assert_eq!(col(&fm, "9", Feature::AvgInTransaction), 3.0);
        assert_eq!(col(&fm, "9", Feature::AvgInInterval), 60.0);
        assert_eq!(col(&fm, "9", Feature::Balance), 6.0);
        assert_eq!(col(&fm, "9", Feature::ActiveDuration), 60.0);
        assert_eq!(col(&fm, "9", Feature::CreationDate), 100.0);
        assert_eq!(col(&fm, "9", Feature::MeanTimeInterval), 30.0);
    }

    #[test]
    fn self_payer_has_zero_row() {
        let recs = parse_ledger("t,2,a1:5.00000000,a1b:5.00000000\n".as_bytes()).unwrap();
        let map = load_user_map("a1,1\na1b,1\n".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        let fm = extract_user_features(&g, &all_user_features()).unwrap();
        assert_eq!(fm.rows(), 1);
        // total_amount is the only flow-based column that sees self-change
        let total_col = fm.cols() - 1;
        for j in 0..total_col {
            assert_eq!(fm.values.get(0, j), 0.0, "{}", fm.schema.features()[j]);
        }
    }

    #[test]
    fn triangle_clustering_is_one() {
        let recs = parse_ledger(
            "c,0,,a:9.00000000|b:9.00000000|c:9.00000000\n\
             t1,1,a:1.00000000,b:1.00000000\nt2,2,b:1.00000000,c:1.00000000\n\
             t3,3,c:1.00000000,a:1.00000000\n"
                .as_bytes(),
        )
        .unwrap();
        let map = load_user_map("".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        let fm = extract_user_features(&g, &default_schema(GraphKind::User)).unwrap();
        for id in &fm.entity_ids {
            assert_eq!(col(&fm, id, Feature::ClusteringCoefficient), 1.0);
        }
    }

    #[test]
    fn star_clustering_is_zero() {
        let recs = parse_ledger(
            "c,0,,h:9.00000000\nt1,1,h:1.00000000,a:1.00000000\nt2,2,h:1.00000000,b:1.00000000\n"
                .as_bytes(),
        )
        .unwrap();
        let map = load_user_map("".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        let fm = extract_user_features(&g, &default_schema(GraphKind::User)).unwrap();
        let hub = map.get("h").unwrap().to_string();
        assert_eq!(col(&fm, &hub, Feature::ClusteringCoefficient), 0.0);
    }

    #[test]
    fn coinbase_transaction_row() {
        let recs = parse_ledger("c,1,,a:3.00000000|b:2.00000000\n".as_bytes()).unwrap();
        let g = build_transaction_graph(&recs);
        let fm =
            extract_transaction_features(&g, &recs, &default_schema(GraphKind::Transaction)).unwrap();
        assert_eq!(fm.values.row(0), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn diamond_degrees() {
        let recs = parse_ledger(
            "t1,1,,aB:1.00000000|aC:2.00000000\nt2,2,aB:1.00000000,aD:1.00000000\n\
             t3,3,aC:2.00000000,aE:2.00000000\nt4,4,aD:1.00000000|aE:2.00000000,aF:3.00000000\n"
                .as_bytes(),
        )
        .unwrap();
        let g = build_transaction_graph(&recs);
        let fm =
            extract_transaction_features(&g, &recs, &default_schema(GraphKind::Transaction)).unwrap();
        assert_eq!(fm.values.row(0)[..2], [0.0, 2.0]);
        assert_eq!(fm.values.row(3)[..2], [2.0, 0.0]);
    }

    #[test]
    fn transaction_features_detect_missing_record() {
        let recs = parse_ledger("t1,1,,a:1.00000000\n".as_bytes()).unwrap();
        let g = build_transaction_graph(&recs);
        let err = extract_transaction_features(&g, &[], &default_schema(GraphKind::Transaction));
        assert!(matches!(err, Err(Error::Inconsistent(_))));
    }

    #[test]
    fn wrong_schema_kind_rejected() {
        let recs = parse_ledger("t1,1,,a:1.00000000\n".as_bytes()).unwrap();
        let g = build_transaction_graph(&recs);
        assert!(extract_transaction_features(&g, &recs, &default_schema(GraphKind::User)).is_err());
    }

    fn fm_from_columns(cols: &[&[f64]]) -> FeatureMatrix {
        let m = cols[0].len();
        let rows: Vec<Vec<f64>> = (0..m).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let schema = FeatureSchema::new(
            GraphKind::Transaction,
            [Feature::InDegree, Feature::OutDegree, Feature::TotalAmount][..cols.len()].to_vec(),
        )
        .unwrap();
        FeatureMatrix {
            entity_ids: (0..m).map(|i| i.to_string()).collect(),
            values: Matrix::from_rows(&rows).unwrap(),
            schema,
            normalized: false,
        }
    }

    #[test]
    fn normalize_hand_values() {
        let e = std::f64::consts::E;
        let fm = fm_from_columns(&[&[5.0, 5.0, 5.0], &[0.0, e - 1.0, 0.0]]);
        let z = normalize(&fm).unwrap();
        assert_eq!(z.values.column(0), vec![0.0, 0.0, 0.0]);

        let fm = fm_from_columns(&[&[0.0, e - 1.0]]);
        let z = normalize(&fm).unwrap();
        let c = z.values.column(0);
        assert!((c[0] + 1.0).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12, "{c:?}");
        assert!(z.normalized);
        assert!(normalize(&z).is_err());
    }

    #[test]
    fn signed_log_is_odd() {
        for x in [0.0, 0.5, 3.0, 1e9] {
            assert_eq!(signed_log1p(-x), -signed_log1p(x));
        }
    }

    #[test]
    fn csv_dump_header() {
        let fm = fm_from_columns(&[&[1.0, 2.0]]);
        let mut buf = Vec::new();
        fm.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "entity_id,in_degree\n0,1\n1,2\n");
    }
}
