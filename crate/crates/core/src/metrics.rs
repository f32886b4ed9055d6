//! Adjusted Rand index and its foreground-only variant.
//!
//! Pair counts are accumulated in integers, so the index is computed from an
//! exact rational `2(T·I − A·B) / (T(A + B) − 2A·B)` with `T = C(n, 2)`,
//! `I = Σ C(n_ij, 2)`, `A = Σ C(a_i, 2)`, `B = Σ C(b_j, 2)`, and only the final
//! division is rounded.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Co-occurrence counts of predicted (rows) and true (columns) labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub pred_labels: Vec<u32>,
    pub true_labels: Vec<u32>,
    /// Row-major `pred_labels.len() × true_labels.len()`.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, pred: u32, truth: u32) -> u64 {
        match (
            self.pred_labels.binary_search(&pred),
            self.true_labels.binary_search(&truth),
        ) {
            (Ok(i), Ok(j)) => self.counts[i * self.true_labels.len() + j],
            _ => 0,
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        let cols = self.true_labels.len();
        self.counts
            .chunks(cols.max(1))
            .map(|r| r.iter().sum())
            .take(self.pred_labels.len())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        let cols = self.true_labels.len();
        let mut out = vec![0; cols];
        for row in self.counts.chunks(cols.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, c)| *o += c);
        }
        out
    }

    /// Numerator and denominator of the adjusted index, `None` when the
    /// denominator vanishes.
    pub fn ari_fraction(&self) -> Option<(i128, i128)> {
        let t = pairs(self.total) as i128;
        let index: u128 = self.counts.iter().map(|&c| pairs(c)).sum();
        let a: u128 = self.row_sums().into_iter().map(pairs).sum();
        let b: u128 = self.column_sums().into_iter().map(pairs).sum();
        let (index, a, b) = (index as i128, a as i128, b as i128);
        let num = 2 * (t * index - a * b);
        let den = t * (a + b) - 2 * a * b;
        (den != 0).then_some((num, den))
    }
}

/// Counts label pairs over pixels where `mask` is true (all when absent).
pub fn contingency<P, T>(pred: &[P], truth: &[T], mask: Option<&[bool]>) -> Result<ContingencyTable>
where
    P: Copy + Into<u32>,
    T: Copy + Into<u32>,
{
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::shape(
            "contingency",
            format!(
                "pred {}, truth {}, mask {:?}",
                pred.len(),
                truth.len(),
                mask.map(<[bool]>::len)
            ),
        ));
    }
    let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            *cells.entry((p.into(), t.into())).or_insert(0) += 1;
        }
    }
    let mut pred_labels: Vec<u32> = cells.keys().map(|k| k.0).collect();
    let mut true_labels: Vec<u32> = cells.keys().map(|k| k.1).collect();
    pred_labels.dedup();
    true_labels.sort_unstable();
    true_labels.dedup();
    let cols = true_labels.len();
    let mut counts = vec![0; pred_labels.len() * cols];
    let mut total = 0;
    for (&(p, t), &c) in &cells {
        let i = pred_labels.binary_search(&p).expect("present");
        let j = true_labels.binary_search(&t).expect("present");
        counts[i * cols + j] = c;
        total += c;
    }
    Ok(ContingencyTable {
        pred_labels,
        true_labels,
        counts,
        total,
    })
}

/// Adjusted Rand index; 1 when both partitions are a single cluster.
pub fn adjusted_rand_index(table: &ContingencyTable) -> Result<f64> {
    if table.total < 2 {
        return Err(Error::UndefinedMetric(format!(
            "adjusted Rand index needs at least 2 scored pixels, got {}",
            table.total
        )));
    }
    Ok(match table.ari_fraction() {
        Some((num, den)) => num as f64 / den as f64,
        None => 1.0,
    })
}

/// ARI over pixels whose true label differs from `background`.
pub fn foreground_ari<P, T>(pred: &[P], truth: &[T], background: T) -> Result<f64>
where
    P: Copy + Into<u32>,
    T: Copy + Into<u32> + PartialEq,
{
    let mask: Vec<bool> = truth.iter().map(|&t| t != background).collect();
    let table = contingency(pred, truth, Some(&mask))?;
    if table.total < 2 {
        return Err(Error::UndefinedMetric(format!(
            "foreground ARI needs at least 2 foreground pixels, got {}",
            table.total
        )));
    }
    adjusted_rand_index(&table)
}

/// ARI over all pixels.
pub fn ari<P, T>(pred: &[P], truth: &[T]) -> Result<f64>
where
    P: Copy + Into<u32>,
    T: Copy + Into<u32>,
{
    adjusted_rand_index(&contingency(pred, truth, None)?)
}
