use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Running softmax statistics for a block of score rows: per-row maximum
/// and exp-sum relative to that maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPartial {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
}

impl SoftmaxPartial {
    /// Identity element of [`combine_partials`]: (m = -inf, s = 0).
    pub fn neutral(rows: usize) -> Self {
        Self { m: vec![f64::NEG_INFINITY; rows], s: vec![0.0; rows] }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    /// Statistics of a dense row-major score block.
    pub fn from_scores(scores: &[f64], cols: usize) -> Self {
        let rows = scores.len() / cols.max(1);
        let mut p = Self::neutral(rows);
        for r in 0..rows {
            let row = &scores[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            p.m[r] = m;
            p.s[r] = row.iter().map(|x| (x - m).exp()).sum();
        }
        p
    }
}

/// Rescale factor `exp(m_old - m_new)` with the neutral element mapped to 0.
#[inline]
pub(crate) fn rescale(m_old: f64, m_new: f64) -> f64 {
    if m_old == f64::NEG_INFINITY {
        0.0
    } else {
        (m_old - m_new).exp()
    }
}

/// Merge two partials over disjoint key sets.
pub fn combine_partials(a: &SoftmaxPartial, b: &SoftmaxPartial) -> Result<SoftmaxPartial, SimError> {
    if a.rows() != b.rows() || a.s.len() != b.s.len() {
        return Err(SimError::ShapeMismatch(format!(
            "combining partials with {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    let mut out = SoftmaxPartial::neutral(a.rows());
    for r in 0..a.rows() {
        let m = a.m[r].max(b.m[r]);
        out.m[r] = m;
        out.s[r] = a.s[r] * rescale(a.m[r], m) + b.s[r] * rescale(b.m[r], m);
    }
    Ok(out)
}
