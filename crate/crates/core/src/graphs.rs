//! The two dual graph views of a ledger.
//!
//! The user graph has users as nodes and one edge per (sender user, receiver
//! user) pair of every transaction. The transaction graph has transactions
//! as nodes and an edge wherever coins created by one transaction are spent
//! by another.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;

use log::warn;

use crate::error::Result;
use crate::ledger::{Satoshi, TransactionRecord, UserMap};

/// How the received amount is attributed when a transaction has several
/// distinct sender users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AmountAttribution {
    /// Every sender gets a parallel edge carrying the receiver's full amount.
    #[default]
    Full,
    /// Each sender's edge carries its share of the inputs.
    ProRata,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserEdge {
    pub from: u64,
    pub to: u64,
    pub amount: Satoshi,
    pub timestamp: i64,
    pub tx_id: String,
}

/// Per-user flows taken straight from the ledger, including coinbase
/// receipts and change returned to self.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LedgerFlow {
    pub received: Satoshi,
    pub sent: Satoshi,
}

impl LedgerFlow {
    pub fn balance(&self) -> i64 {
        self.received.0 as i64 - self.sent.0 as i64
    }
}

#[derive(Debug, Clone, Default)]
pub struct UserGraph {
    pub nodes: BTreeSet<u64>,
    pub edges: Vec<UserEdge>,
    pub flows: BTreeMap<u64, LedgerFlow>,
}

impl UserGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Writes `src,dst,amount,timestamp` lines.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "src,dst,amount,timestamp")?;
        for e in &self.edges {
            writeln!(w, "{},{},{},{}", e.from, e.to, e.amount, e.timestamp)?;
        }
        Ok(())
    }
}

pub fn build_user_graph(records: &[TransactionRecord], user_map: &UserMap) -> Result<UserGraph> {
    build_user_graph_with(records, user_map, AmountAttribution::Full)
}

pub fn build_user_graph_with(
    records: &[TransactionRecord],
    user_map: &UserMap,
    attribution: AmountAttribution,
) -> Result<UserGraph> {
    let mut graph = UserGraph::default();
    for r in records {
        let mut senders: BTreeMap<u64, Satoshi> = BTreeMap::new();
        for t in &r.inputs {
            let u = user_map.user_of(&t.address)?;
            *senders.entry(u).or_default() += t.amount;
            graph.flows.entry(u).or_default().sent += t.amount;
            graph.nodes.insert(u);
        }
        let mut receivers: BTreeMap<u64, Satoshi> = BTreeMap::new();
        for t in &r.outputs {
            let u = user_map.user_of(&t.address)?;
            *receivers.entry(u).or_default() += t.amount;
            graph.flows.entry(u).or_default().received += t.amount;
            graph.nodes.insert(u);
        }
        let total_in: u128 = senders.values().map(|s| s.0 as u128).sum();
        for (&s, &share) in &senders {
            for (&d, &received) in &receivers {
                if s == d {
                    continue;
                }
                let amount = match attribution {
                    AmountAttribution::Full => received,
                    AmountAttribution::ProRata if total_in > 0 => {
                        Satoshi((received.0 as u128 * share.0 as u128 / total_in) as u64)
                    }
                    AmountAttribution::ProRata => Satoshi::ZERO,
                };
                graph.edges.push(UserEdge {
                    from: s,
                    to: d,
                    amount,
                    timestamp: r.timestamp,
                    tx_id: r.tx_id.clone(),
                });
            }
        }
    }
    Ok(graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxEdge {
    /// Index of the funding transaction.
    pub from: usize,
    /// Index of the spending transaction.
    pub to: usize,
    pub amount: Satoshi,
}

/// An input that could not be matched to an unspent output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingInput {
    pub tx_id: String,
    pub address: String,
    pub missing: Satoshi,
}

#[derive(Debug, Clone, Default)]
pub struct TransactionGraph {
    /// Transaction ids in record order; node `i` is `nodes[i]`.
    pub nodes: Vec<String>,
    /// Timestamps aligned with `nodes`.
    pub timestamps: Vec<i64>,
    pub edges: Vec<TxEdge>,
    pub dangling: Vec<DanglingInput>,
}

impl TransactionGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// True when a topological order exists.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            indeg[e.to] += 1;
            out[e.from].push(e.to);
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop_front() {
            seen += 1;
            for &w in &out[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push_back(w);
                }
            }
        }
        seen == n
    }

    /// Writes `src,dst,amount,timestamp` lines; the timestamp is the
    /// spending transaction's.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "src,dst,amount,timestamp")?;
        for e in &self.edges {
            writeln!(
                w,
                "{},{},{},{}",
                self.nodes[e.from], self.nodes[e.to], e.amount, self.timestamps[e.to]
            )?;
        }
        Ok(())
    }
}

/// Links outputs to the inputs that later spend them.
///
/// The ledger has no outpoint references, so each address keeps a FIFO queue
/// of unspent amounts and inputs drain it front to back. Several chunks
/// drawn from the same funding transaction collapse into one edge.
pub fn build_transaction_graph(records: &[TransactionRecord]) -> TransactionGraph {
    let mut graph = TransactionGraph {
        nodes: records.iter().map(|r| r.tx_id.clone()).collect(),
        timestamps: records.iter().map(|r| r.timestamp).collect(),
        ..Default::default()
    };
    let mut unspent: HashMap<&str, VecDeque<(usize, u64)>> = HashMap::new();

    for (to, r) in records.iter().enumerate() {
        // funding tx -> position in graph.edges, for this spender only
        let mut edge_pos: BTreeMap<usize, usize> = BTreeMap::new();
        for input in &r.inputs {
            let mut need = input.amount.0;
            if let Some(queue) = unspent.get_mut(input.address.as_str()) {
                while need > 0 {
                    let Some(front) = queue.front_mut() else { break };
                    let take = need.min(front.1);
                    let from = front.0;
                    front.1 -= take;
                    need -= take;
                    if front.1 == 0 {
                        queue.pop_front();
                    }
                    if take == 0 {
                        continue;
                    }
                    match edge_pos.get(&from) {
                        Some(&p) => graph.edges[p].amount += Satoshi(take),
                        None => {
                            edge_pos.insert(from, graph.edges.len());
                            graph.edges.push(TxEdge {
                                from,
                                to,
                                amount: Satoshi(take),
                            });
                        }
                    }
                }
            }
            if need > 0 {
                warn!(
                    "tx {}: input from {} has {} BTC with no prior unspent output",
                    r.tx_id,
                    input.address,
                    Satoshi(need)
                );
                graph.dangling.push(DanglingInput {
                    tx_id: r.tx_id.clone(),
                    address: input.address.clone(),
                    missing: Satoshi(need),
                });
            }
        }
        for output in &r.outputs {
            if output.amount.0 > 0 {
                unspent
                    .entry(output.address.as_str())
                    .or_default()
                    .push_back((to, output.amount.0));
            }
        }
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{load_user_map, parse_ledger};

    fn ledger(text: &str) -> Vec<TransactionRecord> {
        parse_ledger(text.as_bytes()).unwrap()
    }

    #[test]
    fn simple_payment() {
        let recs = ledger("c,1,,a1:5.00000000\nt,2,a1:5.00000000,a2:5.00000000\n");
        let map = load_user_map("a1,1\na2,2\n".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        assert_eq!(g.nodes, BTreeSet::from([1, 2]));
        assert_eq!(g.edges.len(), 1);
        assert_eq!((g.edges[0].from, g.edges[0].to), (1, 2));
        assert_eq!(g.edges[0].amount, Satoshi(500_000_000));
    }

    #[test]
    fn change_output_is_not_an_edge() {
        let recs = ledger("t,2,a1:5.00000000,a1b:2.00000000|a2:3.00000000\n");
        let map = load_user_map("a1,1\na1b,1\na2,2\n".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].amount, Satoshi(300_000_000));
        assert_eq!(g.flows[&1].balance(), -300_000_000);
    }

    #[test]
    fn self_payment_keeps_isolated_node() {
        let recs = ledger("t,2,a1:5.00000000,a1b:5.00000000\n");
        let map = load_user_map("a1,1\na1b,1\n".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn three_transaction_chain() {
        // u1 -> u2, u2 -> u3, u2 -> u1: enumerated by hand, three edges.
        let recs = ledger(
            "c,0,,a1:9.00000000\n\
             t1,1,a1:9.00000000,a2:9.00000000\n\
             t2,2,a2:4.00000000,a3:4.00000000\n\
             t3,3,a2:5.00000000,a1:5.00000000\n",
        );
        let map = load_user_map("a1,1\na2,2\na3,3\n".as_bytes(), &recs).unwrap();
        let g = build_user_graph(&recs, &map).unwrap();
        let pairs: Vec<(u64, u64)> = g.edges.iter().map(|e| (e.from, e.to)).collect();
        assert_eq!(pairs, vec![(1, 2), (2, 3), (2, 1)]);
        assert_eq!(g.nodes, BTreeSet::from([1, 2, 3]));
    }

    #[test]
    fn multi_sender_attribution() {
        let recs = ledger("t,1,a1:1.00000000|a2:3.00000000,a3:4.00000000\n");
        let map = load_user_map("".as_bytes(), &recs).unwrap();
        let full = build_user_graph(&recs, &map).unwrap();
        assert_eq!(full.edges.len(), 2);
        assert!(full.edges.iter().all(|e| e.amount == Satoshi(400_000_000)));

        let pro = build_user_graph_with(&recs, &map, AmountAttribution::ProRata).unwrap();
        let amounts: Vec<u64> = pro.edges.iter().map(|e| e.amount.0).collect();
        assert_eq!(amounts, vec![100_000_000, 300_000_000]);
    }

    #[test]
    fn unmapped_address_is_an_error() {
        let recs = ledger("t,1,a1:1.00000000,a2:1.00000000\n");
        let mut map = UserMap::new();
        map.insert("a1", 0);
        assert!(build_user_graph(&recs, &map).is_err());
    }

    #[test]
    fn spend_links_transactions() {
        let g = build_transaction_graph(&ledger(
            "t1,1,,aB:1.00000000\nt2,2,aB:1.00000000,aC:1.00000000\n",
        ));
        assert_eq!(g.edges, vec![TxEdge { from: 0, to: 1, amount: Satoshi(100_000_000) }]);
        assert!(g.dangling.is_empty());
    }

    #[test]
    fn single_transaction() {
        let g = build_transaction_graph(&ledger("t1,1,,aB:1.00000000\n"));
        assert_eq!((g.node_count(), g.edge_count()), (1, 0));
    }

    pub(crate) const DIAMOND: &str = "t1,1,,aB:1.00000000|aC:2.00000000\n\
        t2,2,aB:1.00000000,aD:1.00000000\n\
        t3,3,aC:2.00000000,aE:2.00000000\n\
        t4,4,aD:1.00000000|aE:2.00000000,aF:3.00000000\n";

    #[test]
    fn diamond() {
        let g = build_transaction_graph(&ledger(DIAMOND));
        let pairs: BTreeSet<(usize, usize)> = g.edges.iter().map(|e| (e.from, e.to)).collect();
        assert_eq!(pairs, BTreeSet::from([(0, 1), (0, 2), (1, 3), (2, 3)]));
        assert!(g.is_acyclic());
    }

    #[test]
    fn dangling_input_is_recorded() {
        let g = build_transaction_graph(&ledger(
            "t1,1,,aB:1.00000000\nt2,2,aB:3.00000000,aC:3.00000000\n",
        ));
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].amount, Satoshi(100_000_000));
        assert_eq!(g.dangling.len(), 1);
        assert_eq!(g.dangling[0].missing, Satoshi(200_000_000));
    }

    #[test]
    fn fifo_splits_across_funders() {
        // aB funded by t1 then t2; t3 spends 1.5 BTC -> drains t1 then half of t2.
        let g = build_transaction_graph(&ledger(
            "t1,1,,aB:1.00000000\nt2,2,,aB:1.00000000\nt3,3,aB:1.50000000,aC:1.50000000\nt4,4,aB:0.50000000,aC:0.50000000\n",
        ));
        let e: Vec<(usize, usize, u64)> = g.edges.iter().map(|e| (e.from, e.to, e.amount.0)).collect();
        assert_eq!(e, vec![(0, 2, 100_000_000), (1, 2, 50_000_000), (1, 3, 50_000_000)]);
    }

    #[test]
    fn edge_list_dump() {
        let recs = ledger(DIAMOND);
        let g = build_transaction_graph(&recs);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("src,dst,amount,timestamp\nt1,t2,1.00000000,2\n"));
    }
}
