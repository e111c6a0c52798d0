//! Seeded synthetic ledgers with planted anomalies.
//!
//! Background traffic is fee-free: every non-coinbase transaction spends
//! whole unspent outputs and returns change to the sender, so the sum of all
//! user balances equals the sum of coinbase outputs. Three motifs are
//! planted on top:
//!
//! * funnel theft: one transaction drains many previously funded outputs,
//!   each from a different funding transaction, into a single fresh address;
//! * burst sender: a user fires a run of payments one second apart;
//! * dormant user: funded early, silent, then spends everything late.

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{invalid, Result};
use crate::eval::{EntityKind, GroundTruth};
use crate::ledger::{Satoshi, TransactionRecord, Transfer, UserMap, SATOSHI_PER_BTC};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub user_count: usize,
    pub tx_count: usize,
    pub seed: u64,
    pub funnel_thefts: usize,
    /// Funded outputs drained by each funnel.
    pub funnel_sources: usize,
    pub burst_senders: usize,
    /// Payments per burst.
    pub burst_length: usize,
    pub dormant_users: usize,
    /// Log-normal coinbase amounts: parameters of ln(BTC).
    pub amount_log_mean: f64,
    pub amount_log_std: f64,
    /// Log-normal gaps between transactions: parameters of ln(seconds).
    pub gap_log_mean: f64,
    pub gap_log_std: f64,
    /// Probability that a background slot is a coinbase.
    pub coinbase_rate: f64,
    pub start_timestamp: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            user_count: 500,
            tx_count: 10_000,
            seed: 0,
            funnel_thefts: 5,
            funnel_sources: 60,
            burst_senders: 5,
            burst_length: 25,
            dormant_users: 5,
            amount_log_mean: 10f64.ln(),
            amount_log_std: 1.0,
            gap_log_mean: 600f64.ln(),
            gap_log_std: 1.0,
            coinbase_rate: 0.05,
            start_timestamp: 1_300_000_000,
        }
    }
}

impl SynthConfig {
    fn special_users(&self) -> usize {
        self.funnel_thefts + self.burst_senders + self.dormant_users
    }

    /// Transactions consumed by planted motifs.
    pub fn anomaly_tx_count(&self) -> usize {
        self.funnel_thefts + self.burst_senders * (self.burst_length + 1) + 2 * self.dormant_users
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_count == 0 || self.tx_count == 0 {
            return Err(invalid("user and transaction counts must be positive"));
        }
        if self.user_count < self.special_users() + 2 {
            return Err(invalid(format!(
                "{} users cannot host {} planted users plus background traffic",
                self.user_count,
                self.special_users()
            )));
        }
        if self.anomaly_tx_count() >= self.tx_count {
            return Err(invalid(format!(
                "{} planted transactions do not fit in {} transactions",
                self.anomaly_tx_count(),
                self.tx_count
            )));
        }
        if self.funnel_thefts > 0 && self.funnel_sources < 2 {
            return Err(invalid("a funnel needs at least 2 sources"));
        }
        if self.burst_senders > 0 && self.burst_length == 0 {
            return Err(invalid("burst length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.coinbase_rate) {
            return Err(invalid("coinbase rate must be a probability"));
        }
        if self.amount_log_std < 0.0 || self.gap_log_std < 0.0 {
            return Err(invalid("log-normal spreads must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthLedger {
    pub records: Vec<TransactionRecord>,
    pub user_map: UserMap,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Funnel(usize),
    Burst(usize),
    DormantFund(usize),
    DormantSpend(usize),
}

struct State {
    rng: ChaCha8Rng,
    amounts: LogNormal<f64>,
    gaps: LogNormal<f64>,
    records: Vec<TransactionRecord>,
    /// Unspent (funding tx index, amount) per address, oldest first.
    unspent: BTreeMap<String, VecDeque<(usize, u64)>>,
    addresses: Vec<Vec<String>>,
    user_map: UserMap,
    clock: i64,
}

impl State {
    fn tick(&mut self, fixed_gap: Option<i64>) -> i64 {
        let gap = fixed_gap.unwrap_or_else(|| self.gaps.sample(&mut self.rng).round().max(1.0) as i64);
        self.clock += gap.max(1);
        self.clock
    }

    fn coinbase_amount(&mut self) -> u64 {
        let btc = self.amounts.sample(&mut self.rng);
        ((btc * SATOSHI_PER_BTC as f64).round() as u64).max(1)
    }

    fn push(&mut self, inputs: Vec<Transfer>, outputs: Vec<Transfer>, gap: Option<i64>) -> usize {
        let idx = self.records.len();
        let timestamp = self.tick(gap);
        for o in &outputs {
            self.unspent
                .entry(o.address.clone())
                .or_default()
                .push_back((idx, o.amount.0));
        }
        self.records.push(TransactionRecord {
            tx_id: format!("t{idx}"),
            timestamp,
            inputs,
            outputs,
        });
        idx
    }

    fn coinbase(&mut self, user: usize, amount: Option<u64>) -> usize {
        let amount = amount.unwrap_or_else(|| self.coinbase_amount());
        let addr = self.addresses[user].choose(&mut self.rng).expect("user has an address").clone();
        self.push(vec![], vec![Transfer::new(addr, Satoshi(amount))], None)
    }

    fn funded_addresses(&self, user: usize) -> Vec<String> {
        self.addresses[user]
            .iter()
            .filter(|a| self.unspent.get(*a).is_some_and(|q| !q.is_empty()))
            .cloned()
            .collect()
    }

    fn spend_front(&mut self, address: &str) -> Option<(usize, Transfer)> {
        let (src, amount) = self.unspent.get_mut(address)?.pop_front()?;
        Some((src, Transfer::new(address, Satoshi(amount))))
    }

    /// One payment from `sender` to another background user, change back.
    fn transfer(&mut self, sender: usize, background: usize, gap: Option<i64>) -> Option<usize> {
        let funded = self.funded_addresses(sender);
        let first = funded.choose(&mut self.rng)?.clone();
        let mut inputs = vec![self.spend_front(&first)?.1];
        if self.rng.random_bool(0.3) {
            let second = funded.choose(&mut self.rng).expect("non-empty").clone();
            if let Some((_, t)) = self.spend_front(&second) {
                inputs.push(t);
            }
        }
        let total: u64 = inputs.iter().map(|t| t.amount.0).sum();
        let receivers = if self.rng.random_bool(0.1) { 2 } else { 1 };
        let mut outputs = Vec::new();
        let mut left = total;
        for _ in 0..receivers {
            if left == 0 {
                break;
            }
            let mut to = self.rng.random_range(0..background);
            if to == sender {
                to = (to + 1) % background;
            }
            let addr = self.addresses[to].choose(&mut self.rng).expect("address").clone();
            let frac = self.rng.random_range(0.05..0.95);
            let pay = ((left as f64 * frac) as u64).clamp(1, left);
            outputs.push(Transfer::new(addr, Satoshi(pay)));
            left -= pay;
        }
        if left > 0 {
            let change = self.addresses[sender].choose(&mut self.rng).expect("address").clone();
            outputs.push(Transfer::new(change, Satoshi(left)));
        }
        Some(self.push(inputs, outputs, gap))
    }
}

/// Generates a ledger, a complete user map and the planted ground truth.
/// Identical configs give identical output.
pub fn generate(config: &SynthConfig) -> Result<SynthLedger> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let amounts = LogNormal::new(config.amount_log_mean, config.amount_log_std)
        .map_err(|e| invalid(e.to_string()))?;
    let gaps = LogNormal::new(config.gap_log_mean, config.gap_log_std)
        .map_err(|e| invalid(e.to_string()))?;

    let background = config.user_count - config.special_users();
    let thief0 = background;
    let burst0 = thief0 + config.funnel_thefts;
    let dormant0 = burst0 + config.burst_senders;

    let mut user_map = UserMap::new();
    let mut addresses = Vec::with_capacity(config.user_count);
    for u in 0..config.user_count {
        let n = if u < background { rng.random_range(1..=3) } else { 1 };
        let addrs: Vec<String> = (0..n).map(|k| format!("a{u}_{k}")).collect();
        for a in &addrs {
            user_map.insert(a.clone(), u as u64);
        }
        addresses.push(addrs);
    }

    // Planted events start at random slots after a warm-up and before the
    // point where postponed events could overrun the ledger.
    let lo = config.tx_count / 5;
    let hi = (config.tx_count - config.anomaly_tx_count()).max(lo + 1);
    let mut schedule: BTreeMap<usize, Vec<Event>> = BTreeMap::new();
    for k in 0..config.funnel_thefts {
        schedule.entry(rng.random_range(lo..hi)).or_default().push(Event::Funnel(k));
    }
    for b in 0..config.burst_senders {
        schedule.entry(rng.random_range(lo..hi)).or_default().push(Event::Burst(b));
    }
    for d in 0..config.dormant_users {
        let fund = rng.random_range(0..lo.max(1));
        let spend = rng.random_range(hi.saturating_sub(hi / 10).max(lo)..hi);
        schedule.entry(fund).or_default().push(Event::DormantFund(d));
        schedule.entry(spend).or_default().push(Event::DormantSpend(d));
    }

    let mut st = State {
        rng,
        amounts,
        gaps,
        records: Vec::with_capacity(config.tx_count),
        unspent: BTreeMap::new(),
        addresses,
        user_map,
        clock: config.start_timestamp,
    };
    let mut truth = GroundTruth::default();
    let mut pending: VecDeque<Event> = VecDeque::new();
    let warmup = background.min(config.tx_count / 10);
    let mut funded_dormant = vec![false; config.dormant_users];

    while st.records.len() < config.tx_count {
        let slot = st.records.len();
        // bursts append several records at once, so catch up on every slot passed
        while let Some(entry) = schedule.first_entry() {
            if *entry.key() > slot {
                break;
            }
            pending.extend(entry.remove());
        }
        // a dormant spend cannot run before its funding
        let next = pending
            .iter()
            .position(|e| !matches!(e, Event::DormantSpend(d) if !funded_dormant[*d]));
        if let Some(pos) = next {
            let event = pending.remove(pos).expect("index from position");
            match event {
                Event::Funnel(k) => {
                    let thief = thief0 + k;
                    let mut candidates: Vec<String> = st.unspent
                        .iter()
                        .filter(|(a, q)| {
                            !q.is_empty() && st.user_map.get(a).is_some_and(|u| (u as usize) < background)
                        })
                        .map(|(a, _)| a.clone())
                        .collect();
                    candidates.shuffle(&mut st.rng);
                    let mut used = HashSet::new();
                    let mut inputs = Vec::new();
                    for a in candidates {
                        if inputs.len() == config.funnel_sources {
                            break;
                        }
                        let src = st.unspent[&a].front().expect("non-empty").0;
                        if used.insert(src) {
                            inputs.push(st.spend_front(&a).expect("non-empty").1);
                        }
                    }
                    if inputs.len() < config.funnel_sources {
                        log::warn!(
                            "funnel {k} found only {} distinct funded sources",
                            inputs.len()
                        );
                    }
                    if inputs.is_empty() {
                        let idx = st.coinbase(thief, None);
                        truth.push(EntityKind::Tx, st.records[idx].tx_id.clone(), "funnel_theft");
                    } else {
                        let total: u64 = inputs.iter().map(|t| t.amount.0).sum();
                        let sink = st.addresses[thief][0].clone();
                        let idx = st.push(inputs, vec![Transfer::new(sink, Satoshi(total))], None);
                        truth.push(EntityKind::Tx, st.records[idx].tx_id.clone(), "funnel_theft");
                    }
                    truth.push(EntityKind::User, thief.to_string(), "funnel_sink");
                }
                Event::Burst(b) => {
                    let user = burst0 + b;
                    st.coinbase(user, None);
                    for _ in 0..config.burst_length {
                        if st.records.len() >= config.tx_count {
                            break;
                        }
                        if st.transfer(user, background, Some(1)).is_none() {
                            st.coinbase(user, None);
                        }
                    }
                    truth.push(EntityKind::User, user.to_string(), "burst_sender");
                }
                Event::DormantFund(d) => {
                    st.coinbase(dormant0 + d, None);
                    funded_dormant[d] = true;
                }
                Event::DormantSpend(d) => {
                    let user = dormant0 + d;
                    let addr = st.addresses[user][0].clone();
                    let mut inputs = Vec::new();
                    while let Some((_, t)) = st.spend_front(&addr) {
                        inputs.push(t);
                    }
                    let total: u64 = inputs.iter().map(|t| t.amount.0).sum();
                    let to = st.rng.random_range(0..background);
                    let dest = st.addresses[to][0].clone();
                    st.push(inputs, vec![Transfer::new(dest, Satoshi(total.max(1)))], None);
                    truth.push(EntityKind::User, user.to_string(), "dormant_then_active");
                }
            }
            continue;
        }

        if slot < warmup {
            st.coinbase(slot % background, None);
            continue;
        }
        if st.rng.random_bool(config.coinbase_rate) {
            let u = st.rng.random_range(0..background);
            st.coinbase(u, None);
            continue;
        }
        let mut done = false;
        for _ in 0..10 {
            let sender = st.rng.random_range(0..background);
            if st.transfer(sender, background, None).is_some() {
                done = true;
                break;
            }
        }
        if !done {
            let u = st.rng.random_range(0..background);
            st.coinbase(u, None);
        }
    }

    Ok(SynthLedger {
        records: st.records,
        user_map: st.user_map,
        truth,
    })
}
