//! Prototype selection for novel classes.
//!
//! Each active prototype is used as a one-vs-rest classifier on a novel
//! class's support grids; the resulting binary mask is compared with the
//! true class mask and `1 - IoU` becomes the assignment cost. A rectangular
//! Kuhn-Munkres solve then gives every novel class its best prototype, and
//! repeating the solve on the remaining columns yields `N` prototypes each.

use serde::{Deserialize, Serialize};

use crate::data::FeatureGrid;
use crate::error::{Error, Result};
use crate::numeric::dot;
use crate::par::Execution;
use crate::prototype::PrototypeBank;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Min-max normalized cosine map of `grid` against `prototype`, thresholded.
/// A constant map yields the empty mask.
pub fn prototype_mask(grid: &FeatureGrid, prototype: &[f64], threshold: f64) -> Vec<bool> {
    let scores: Vec<f64> = grid.pixel_features().map(|f| dot(f, prototype)).collect();
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let range = hi - lo;
    if !(range > 1e-12) {
        return vec![false; scores.len()];
    }
    scores
        .iter()
        .map(|s| (s - lo) / range >= threshold)
        .collect()
}

pub fn class_mask(grid: &FeatureGrid, class: u32) -> Vec<bool> {
    grid.labels().iter().map(|&l| l == class).collect()
}

/// `|a and b| / |a or b|`, zero when both masks are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(a.len(), b.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Support grids of one novel class (features already embedded).
#[derive(Debug, Clone)]
pub struct NovelSupport<'a> {
    pub class_id: u32,
    pub grids: Vec<&'a FeatureGrid>,
}

/// Row-major cost matrix; rows are novel classes, columns bank slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub row_classes: Vec<u32>,
    pub col_slots: Vec<usize>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(Self {
            rows,
            cols,
            values,
            row_classes: (0..rows as u32).collect(),
            col_slots: (0..cols).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn select_columns(&self, keep: &[usize]) -> CostMatrix {
        let mut values = Vec::with_capacity(self.rows * keep.len());
        for r in 0..self.rows {
            values.extend(keep.iter().map(|&c| self.get(r, c)));
        }
        CostMatrix {
            rows: self.rows,
            cols: keep.len(),
            values,
            row_classes: self.row_classes.clone(),
            col_slots: keep.iter().map(|&c| self.col_slots[c]).collect(),
        }
    }
}

/// `X_ij = 1 - mean IoU` of active prototype `j`'s mask against class `i`
/// over the class's support grids.
pub fn build_cost_matrix(
    supports: &[NovelSupport<'_>],
    bank: &PrototypeBank,
    threshold: f64,
    exec: Execution,
) -> Result<CostMatrix> {
    let active = bank.active();
    if active.len() < supports.len() {
        return Err(Error::InsufficientPrototypes {
            needed: supports.len(),
            available: active.len(),
        });
    }
    for s in supports {
        if s.grids.is_empty() {
            return Err(Error::NoPixels(s.class_id));
        }
    }
    let cols = active.len();
    let pairs = exec.map_range(supports.len() * cols, |idx| -> Result<f64> {
        let (r, c) = (idx / cols, idx % cols);
        let support = &supports[r];
        let proto = bank.prototype(active[c]);
        let mut total = 0.0;
        for g in &support.grids {
            let predicted = prototype_mask(g, proto, threshold);
            total += iou(&predicted, &class_mask(g, support.class_id))?;
        }
        Ok(1.0 - total / support.grids.len() as f64)
    });
    let values = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CostMatrix {
        rows: supports.len(),
        cols,
        values,
        row_classes: supports.iter().map(|s| s.class_id).collect(),
        col_slots: active,
    })
}

/// Minimum-cost matching of every row to a distinct column (rows <= cols).
///
/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(rows^2 * cols)`. Columns are scanned in ascending order and only a
/// strictly better candidate replaces the current one, so ties resolve to
/// the lowest column index and the result is deterministic.
pub fn km_assign(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::Infeasible { rows: n, cols: m });
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // 1-based: index 0 is the virtual root row/column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut matching = vec![usize::MAX; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            matching[row_of[j] - 1] = j - 1;
        }
    }
    let total = matching
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.get(r, c))
        .sum();
    Ok((matching, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class_id: u32,
    /// Bank slots in selection order (one per round).
    pub slots: Vec<usize>,
    pub ious: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignmentPlan {
    pub selections: Vec<ClassSelection>,
}

impl AssignmentPlan {
    pub fn for_class(&self, class_id: u32) -> Option<&ClassSelection> {
        self.selections.iter().find(|s| s.class_id == class_id)
    }

    pub fn all_slots(&self) -> Vec<usize> {
        self.selections
            .iter()
            .flat_map(|s| s.slots.iter().copied())
            .collect()
    }
}

/// Runs the assignment `rounds` times, removing the chosen columns after each round.
pub fn select_n_rounds(
    supports: &[NovelSupport<'_>],
    bank: &PrototypeBank,
    rounds: usize,
    threshold: f64,
    exec: Execution,
) -> Result<AssignmentPlan> {
    let needed = rounds * supports.len();
    if bank.active_count() < needed {
        return Err(Error::InsufficientPrototypes {
            needed,
            available: bank.active_count(),
        });
    }
    let full = build_cost_matrix(supports, bank, threshold, exec)?;
    select_from_costs(&full, rounds)
}

/// Round-based selection over a precomputed cost matrix.
pub fn select_from_costs(full: &CostMatrix, rounds: usize) -> Result<AssignmentPlan> {
    let needed = rounds * full.rows;
    if full.cols < needed {
        return Err(Error::InsufficientPrototypes {
            needed,
            available: full.cols,
        });
    }
    let mut plan = AssignmentPlan {
        selections: full
            .row_classes
            .iter()
            .map(|&class_id| ClassSelection {
                class_id,
                slots: Vec::new(),
                ious: Vec::new(),
            })
            .collect(),
    };
    let mut remaining: Vec<usize> = (0..full.cols).collect();
    for _ in 0..rounds {
        let sub = full.select_columns(&remaining);
        let (matching, _) = km_assign(&sub)?;
        for (r, &c) in matching.iter().enumerate() {
            plan.selections[r].slots.push(sub.col_slots[c]);
            plan.selections[r].ious.push(1.0 - sub.get(r, c));
        }
        let taken: Vec<usize> = matching.iter().map(|&c| remaining[c]).collect();
        remaining.retain(|c| !taken.contains(c));
    }
    Ok(plan)
}
