//! Ledger and user-map parsing.
//!
//! Ledger lines look like
//!
//! ```text
//! tx_id,timestamp,in1:amt|in2:amt,out1:amt|out2:amt
//! ```
//!
//! where amounts are BTC decimals with exactly eight fractional digits. An
//! empty input field marks a coinbase transaction. Lines starting with `#`
//! are comments. The user map has one `address,user_id` pair per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SATOSHI_PER_BTC: u64 = 100_000_000;

/// An amount in satoshi (1e-8 BTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Satoshi(pub u64);

impl Satoshi {
    pub const ZERO: Satoshi = Satoshi(0);

    pub fn from_btc_str(s: &str) -> std::result::Result<Self, String> {
        let (whole, frac) = s
            .split_once('.')
            .ok_or_else(|| format!("amount `{s}` has no decimal point"))?;
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("amount `{s}` has an invalid integer part"));
        }
        if frac.len() != 8 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("amount `{s}` must have exactly 8 fractional digits"));
        }
        let whole: u64 = whole
            .parse()
            .map_err(|_| format!("amount `{s}` is out of range"))?;
        let frac: u64 = frac.parse().expect("eight ascii digits");
        whole
            .checked_mul(SATOSHI_PER_BTC)
            .and_then(|w| w.checked_add(frac))
            .map(Satoshi)
            .ok_or_else(|| format!("amount `{s}` is out of range"))
    }

    pub fn as_btc(self) -> f64 {
        self.0 as f64 / SATOSHI_PER_BTC as f64
    }
}

impl fmt::Display for Satoshi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:08}",
            self.0 / SATOSHI_PER_BTC,
            self.0 % SATOSHI_PER_BTC
        )
    }
}

impl std::ops::Add for Satoshi {
    type Output = Satoshi;
    fn add(self, rhs: Satoshi) -> Satoshi {
        Satoshi(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Satoshi {
    fn add_assign(&mut self, rhs: Satoshi) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Satoshi {
    fn sum<I: Iterator<Item = Satoshi>>(iter: I) -> Satoshi {
        iter.fold(Satoshi::ZERO, |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub address: String,
    pub amount: Satoshi,
}

impl Transfer {
    pub fn new(address: impl Into<String>, amount: Satoshi) -> Self {
        Self {
            address: address.into(),
            amount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub tx_id: String,
    pub timestamp: i64,
    pub inputs: Vec<Transfer>,
    pub outputs: Vec<Transfer>,
}

impl TransactionRecord {
    pub fn is_coinbase(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn total_output(&self) -> Satoshi {
        self.outputs.iter().map(|t| t.amount).sum()
    }

    pub fn total_input(&self) -> Satoshi {
        self.inputs.iter().map(|t| t.amount).sum()
    }

    /// Every address touched by this record: inputs first, then outputs.
    pub fn addresses(&self) -> impl Iterator<Item = &str> {
        self.inputs
            .iter()
            .chain(self.outputs.iter())
            .map(|t| t.address.as_str())
    }
}

impl fmt::Display for TransactionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn side(f: &mut fmt::Formatter<'_>, transfers: &[Transfer]) -> fmt::Result {
            for (i, t) in transfers.iter().enumerate() {
                if i > 0 {
                    f.write_str("|")?;
                }
                write!(f, "{}:{}", t.address, t.amount)?;
            }
            Ok(())
        }
        write!(f, "{},{},", self.tx_id, self.timestamp)?;
        side(f, &self.inputs)?;
        f.write_str(",")?;
        side(f, &self.outputs)
    }
}

fn parse_transfers(field: &str) -> std::result::Result<Vec<Transfer>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split('|')
        .map(|entry| {
            let (address, amount) = entry
                .rsplit_once(':')
                .ok_or_else(|| format!("entry `{entry}` is not address:amount"))?;
            if address.is_empty() {
                return Err(format!("entry `{entry}` has an empty address"));
            }
            Ok(Transfer::new(address, Satoshi::from_btc_str(amount)?))
        })
        .collect()
}

fn parse_line(line: &str) -> std::result::Result<TransactionRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 comma-separated fields, found {}", fields.len()));
    }
    let tx_id = fields[0];
    if tx_id.is_empty() {
        return Err("empty transaction id".into());
    }
    let timestamp: i64 = fields[1]
        .parse()
        .map_err(|_| format!("timestamp `{}` is not an integer", fields[1]))?;
    Ok(TransactionRecord {
        tx_id: tx_id.to_string(),
        timestamp,
        inputs: parse_transfers(fields[2])?,
        outputs: parse_transfers(fields[3])?,
    })
}

fn is_skippable(line: &str) -> bool {
    line.is_empty() || line.starts_with('#')
}

/// Parses a ledger stream into records, in file order.
pub fn parse_ledger<R: BufRead>(reader: R) -> Result<Vec<TransactionRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if is_skippable(&line) {
            continue;
        }
        let record = parse_line(&line).map_err(|reason| Error::Parse {
            line: line_no,
            reason,
        })?;
        if !seen.insert(record.tx_id.clone()) {
            return Err(Error::DuplicateTxId {
                line: line_no,
                tx_id: record.tx_id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_ledger<W: Write>(mut writer: W, records: &[TransactionRecord]) -> Result<()> {
    for r in records {
        writeln!(writer, "{r}")?;
    }
    Ok(())
}

/// Total mapping from address to user id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserMap {
    users: HashMap<String, u64>,
}

impl UserMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, address: &str) -> Option<u64> {
        self.users.get(address).copied()
    }

    pub fn user_of(&self, address: &str) -> Result<u64> {
        self.get(address)
            .ok_or_else(|| Error::UnmappedAddress(address.to_string()))
    }

    pub fn insert(&mut self, address: impl Into<String>, user: u64) -> Option<u64> {
        self.users.insert(address.into(), user)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Entries sorted by (user id, address).
    pub fn sorted_entries(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self.users.iter().map(|(a, &u)| (a.as_str(), u)).collect();
        v.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
        v
    }

    /// Gives every unmapped ledger address a fresh singleton user id, in
    /// first-appearance order, starting above the largest id already present.
    pub fn complete(&mut self, records: &[TransactionRecord]) {
        let mut next = self.users.values().max().map_or(0, |m| m + 1);
        for r in records {
            for addr in r.addresses() {
                if !self.users.contains_key(addr) {
                    self.users.insert(addr.to_string(), next);
                    next += 1;
                }
            }
        }
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for (addr, user) in self.sorted_entries() {
            writeln!(writer, "{addr},{user}")?;
        }
        Ok(())
    }
}

/// Reads `address,user_id` lines and completes the map over the ledger.
pub fn load_user_map<R: BufRead>(reader: R, records: &[TransactionRecord]) -> Result<UserMap> {
    let mut map = UserMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if is_skippable(&line) {
            continue;
        }
        let (address, user) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            reason: "expected address,user_id".into(),
        })?;
        let user: u64 = user.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            reason: format!("user id `{user}` is not a non-negative integer"),
        })?;
        if address.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                reason: "empty address".into(),
            });
        }
        if let Some(prev) = map.get(address) {
            if prev != user {
                return Err(Error::UserMapConflict {
                    line: line_no,
                    address: address.to_string(),
                    first: prev,
                    second: user,
                });
            }
        }
        map.insert(address, user);
    }
    map.complete(records);
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    /// 1-based position of the record in the slice.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub record_count: usize,
    pub error_count: usize,
    pub errors: Vec<ValidationError>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.error_count == 0
    }
}

/// Checks record invariants. Problems are reported, never raised.
pub fn validate_ledger(records: &[TransactionRecord]) -> ValidationReport {
    let mut errors = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.timestamp < 0 {
            errors.push(ValidationError {
                line,
                reason: "negative timestamp".into(),
            });
        }
        if r.outputs.is_empty() {
            errors.push(ValidationError {
                line,
                reason: "no outputs".into(),
            });
        }
        if let Some(first) = seen.insert(r.tx_id.as_str(), line) {
            errors.push(ValidationError {
                line,
                reason: format!("duplicate tx id (first at {first})"),
            });
        }
    }
    ValidationReport {
        record_count: records.len(),
        error_count: errors.len(),
        errors,
    }
}
