//! RBF kernel evaluation and row storage for the SMO solver.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::matrix::{squared_distance, Matrix};

/// `exp(-γ‖x − z‖²)`.
#[inline]
pub fn rbf_kernel(x: &[f64], z: &[f64], gamma: f64) -> f64 {
    debug_assert_eq!(x.len(), z.len());
    (-gamma * squared_distance(x, z)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelStorage {
    /// Whole m×m matrix computed up front.
    Dense,
    /// Rows computed on demand and kept in a bounded LRU cache.
    RowCache { capacity_rows: usize },
}

/// Above this many points the full kernel matrix is never materialized.
pub const DENSE_POINT_LIMIT: usize = 20_000;

/// Picks dense storage when both the point limit and the byte budget allow it.
pub fn choose_storage(m: usize, cache_bytes: usize) -> KernelStorage {
    let row_bytes = m.max(1) * std::mem::size_of::<f64>();
    let capacity_rows = (cache_bytes / row_bytes).max(2);
    if m <= DENSE_POINT_LIMIT && capacity_rows >= m {
        KernelStorage::Dense
    } else {
        KernelStorage::RowCache { capacity_rows }
    }
}

struct Lru {
    capacity: usize,
    rows: HashMap<usize, (Rc<[f64]>, u64)>,
    by_age: BTreeMap<u64, usize>,
    clock: u64,
}

impl Lru {
    fn touch(&mut self, i: usize) -> Option<Rc<[f64]>> {
        let (row, stamp) = self.rows.get_mut(&i)?;
        self.by_age.remove(stamp);
        self.clock += 1;
        *stamp = self.clock;
        self.by_age.insert(self.clock, i);
        Some(Rc::clone(row))
    }

    fn insert(&mut self, i: usize, row: Rc<[f64]>) {
        if self.rows.len() >= self.capacity {
            if let Some((_, victim)) = self.by_age.pop_first() {
                self.rows.remove(&victim);
            }
        }
        self.clock += 1;
        self.by_age.insert(self.clock, i);
        self.rows.insert(i, (row, self.clock));
    }
}

enum Rows {
    Dense(Vec<Rc<[f64]>>),
    Cached(Lru),
}

/// Kernel rows `K(x_i, ·)` over a fixed training set.
pub struct KernelRows<'a> {
    x: &'a Matrix,
    gamma: f64,
    rows: Rows,
    storage: KernelStorage,
    computed_rows: usize,
}

impl<'a> KernelRows<'a> {
    pub fn new(x: &'a Matrix, gamma: f64, storage: KernelStorage) -> Self {
        let mut this = Self {
            x,
            gamma,
            rows: Rows::Dense(Vec::new()),
            storage,
            computed_rows: 0,
        };
        this.rows = match storage {
            KernelStorage::Dense => {
                Rows::Dense((0..x.rows()).map(|i| this.compute(i)).collect())
            }
            KernelStorage::RowCache { capacity_rows } => Rows::Cached(Lru {
                capacity: capacity_rows.max(2),
                rows: HashMap::new(),
                by_age: BTreeMap::new(),
                clock: 0,
            }),
        };
        this
    }

    fn compute(&mut self, i: usize) -> Rc<[f64]> {
        self.computed_rows += 1;
        let xi = self.x.row(i);
        self.x
            .iter_rows()
            .enumerate()
            .map(|(j, xj)| if j == i { 1.0 } else { rbf_kernel(xi, xj, self.gamma) })
            .collect()
    }

    pub fn row(&mut self, i: usize) -> Rc<[f64]> {
        if let Rows::Dense(rows) = &self.rows {
            return Rc::clone(&rows[i]);
        }
        if let Rows::Cached(lru) = &mut self.rows {
            if let Some(r) = lru.touch(i) {
                return r;
            }
        }
        let row = self.compute(i);
        if let Rows::Cached(lru) = &mut self.rows {
            lru.insert(i, Rc::clone(&row));
        }
        row
    }

    pub fn storage(&self) -> KernelStorage {
        self.storage
    }

    /// Number of kernel rows evaluated so far, including re-evaluations
    /// after eviction.
    pub fn computed_rows(&self) -> usize {
        self.computed_rows
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}
