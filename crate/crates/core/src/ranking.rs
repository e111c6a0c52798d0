use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity {
    pub entity_id: String,
    pub score: f64,
}

/// Entities ordered from most to least anomalous. The first
/// `flagged_count` entries are the flagged ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRanking {
    pub entries: Vec<RankedEntity>,
    pub flagged_count: usize,
}

impl AnomalyRanking {
    /// Sorts by descending score; equal scores keep their input order.
    pub fn from_scores(ids: &[String], scores: &[f64], flagged_count: usize) -> Self {
        debug_assert_eq!(ids.len(), scores.len());
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Self {
            entries: order
                .into_iter()
                .map(|i| RankedEntity {
                    entity_id: ids[i].clone(),
                    score: scores[i],
                })
                .collect(),
            flagged_count: flagged_count.min(ids.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, n: usize) -> impl Iterator<Item = &str> {
        self.entries.iter().take(n).map(|e| e.entity_id.as_str())
    }

    pub fn flagged(&self) -> impl Iterator<Item = &str> {
        self.top(self.flagged_count)
    }

    /// CSV `rank,entity_id,score,flagged` with 1-based ranks.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rank,entity_id,score,flagged")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{}",
                i + 1,
                e.entity_id,
                e.score,
                u8::from(i < self.flagged_count)
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        let mut flagged_count = 0;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if idx == 0 && line.starts_with("rank,") || line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::Parse {
                line: line_no,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected rank,entity_id,score,flagged"));
            }
            let score: f64 = f[2].parse().map_err(|_| bad("score is not a number"))?;
            match f[3] {
                "1" => {
                    if flagged_count != entries.len() {
                        return Err(bad("flagged rows must form a prefix"));
                    }
                    flagged_count += 1;
                }
                "0" => {}
                _ => return Err(bad("flagged must be 0 or 1")),
            }
            entries.push(RankedEntity {
                entity_id: f[1].to_string(),
                score,
            });
        }
        Ok(Self {
            entries,
            flagged_count,
        })
    }
}
