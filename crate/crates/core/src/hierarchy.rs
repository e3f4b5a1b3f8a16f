//! Fine and coarse label spaces joined by a surjective coarsening map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::log_sum_exp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("label {label} outside 0..{count}")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("coarsening is not surjective: coarse label {0} has no preimage")]
    NotSurjective(usize),
    #[error("need at least two fine and two coarse labels, got {fine} and {coarse}")]
    TooFewLabels { fine: usize, coarse: usize },
    #[error("distribution over {len} labels does not match {expected} fine labels")]
    LengthMismatch { len: usize, expected: usize },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("zero probability mass on the preimage of coarse label {0}")]
    DegenerateConditional(usize),
}

/// Surjective map `g` from fine labels `0..fine_count` to coarse labels
/// `0..coarse_count`. Serialized as the bare JSON array `table`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct HierarchyMap {
    table: Vec<usize>,
    coarse_count: usize,
    preimages: Vec<Vec<usize>>,
}

impl TryFrom<Vec<usize>> for HierarchyMap {
    type Error = HierarchyError;

    fn try_from(table: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(table)
    }
}

impl From<HierarchyMap> for Vec<usize> {
    fn from(h: HierarchyMap) -> Self {
        h.table
    }
}

impl HierarchyMap {
    /// The coarse label count is `max(table) + 1`; every coarse label in that
    /// range must be hit.
    pub fn new(table: Vec<usize>) -> Result<Self, HierarchyError> {
        let coarse_count = table.iter().max().map_or(0, |m| m + 1);
        if table.len() < 2 || coarse_count < 2 {
            return Err(HierarchyError::TooFewLabels {
                fine: table.len(),
                coarse: coarse_count,
            });
        }
        let mut preimages = vec![Vec::new(); coarse_count];
        for (y, &z) in table.iter().enumerate() {
            preimages[z].push(y);
        }
        if let Some(z) = preimages.iter().position(Vec::is_empty) {
            return Err(HierarchyError::NotSurjective(z));
        }
        Ok(Self {
            table,
            coarse_count,
            preimages,
        })
    }

    pub fn identity(n: usize) -> Result<Self, HierarchyError> {
        Self::new((0..n).collect())
    }

    pub fn fine_count(&self) -> usize {
        self.table.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_count
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    pub fn coarsen(&self, y: usize) -> Result<usize, HierarchyError> {
        self.table
            .get(y)
            .copied()
            .ok_or(HierarchyError::LabelOutOfRange {
                label: y,
                count: self.table.len(),
            })
    }

    pub fn preimage(&self, z: usize) -> &[usize] {
        &self.preimages[z]
    }

    /// Coarse labels with more than one fine preimage, ascending.
    pub fn ambiguous_labels(&self) -> Vec<usize> {
        (0..self.coarse_count)
            .filter(|&z| self.preimages[z].len() > 1)
            .collect()
    }

    pub fn is_bijective(&self) -> bool {
        self.coarse_count == self.table.len()
    }

    /// Distribution over `g^-1(z)` obtained by restricting `probs` and
    /// dividing by the preimage mass. Entries follow [`Self::preimage`] order.
    pub fn renormalize(&self, probs: &[f64], z: usize) -> Result<Vec<f64>, HierarchyError> {
        if probs.len() != self.table.len() {
            return Err(HierarchyError::LengthMismatch {
                len: probs.len(),
                expected: self.table.len(),
            });
        }
        if z >= self.coarse_count {
            return Err(HierarchyError::LabelOutOfRange {
                label: z,
                count: self.coarse_count,
            });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(HierarchyError::NotNormalized(total));
        }
        let pre = &self.preimages[z];
        let mass: f64 = pre.iter().map(|&y| probs[y]).sum();
        if mass <= 0.0 {
            return Err(HierarchyError::DegenerateConditional(z));
        }
        Ok(pre.iter().map(|&y| probs[y] / mass).collect())
    }

    /// Coarse log-probabilities from fine ones: `log sum_{y in g^-1(z)} p(y)`.
    pub fn coarsen_log_probs(&self, fine_log_probs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(fine_log_probs.len(), self.table.len());
        let mut buf = Vec::new();
        self.preimages
            .iter()
            .map(|pre| {
                buf.clear();
                buf.extend(pre.iter().map(|&y| fine_log_probs[y]));
                log_sum_exp(&buf)
            })
            .collect()
    }

    /// `log p(y | Y in g^-1(g(y)))` from fine log-probabilities. Exactly zero
    /// when `g(y)` has a single preimage.
    pub fn renormalized_log_prob(&self, fine_log_probs: &[f64], y: usize) -> f64 {
        let pre = &self.preimages[self.table[y]];
        if pre.len() == 1 {
            return 0.0;
        }
        let lse = log_sum_exp(&pre.iter().map(|&v| fine_log_probs[v]).collect::<Vec<_>>());
        fine_log_probs[y] - lse
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn syn1() -> HierarchyMap {
        HierarchyMap::new(vec![0, 1, 1]).unwrap()
    }

    #[test]
    fn coarsen_examples() {
        assert_eq!(syn1().coarsen(0), Ok(0));
        let id = HierarchyMap::identity(4).unwrap();
        for y in 0..4 {
            assert_eq!(id.coarsen(y), Ok(y));
        }
        let parity = HierarchyMap::new((0..10).map(|l| l % 2).collect()).unwrap();
        // 0-based label 7 is class 8 of 1..10, an even-indexed class.
        assert_eq!(parity.coarsen(7), Ok(1));
        assert!(matches!(
            syn1().coarsen(3),
            Err(HierarchyError::LabelOutOfRange { label: 3, count: 3 })
        ));
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            HierarchyMap::new(vec![0, 0, 0]),
            Err(HierarchyError::TooFewLabels { fine: 3, coarse: 1 })
        );
        assert_eq!(
            HierarchyMap::new(vec![0, 2, 2]),
            Err(HierarchyError::NotSurjective(1))
        );
        assert!(HierarchyMap::new(vec![]).is_err());
    }

    #[test]
    fn ambiguous_label_sets() {
        assert_eq!(syn1().ambiguous_labels(), vec![1]);
        assert!(HierarchyMap::identity(5).unwrap().ambiguous_labels().is_empty());
        assert_eq!(
            HierarchyMap::new(vec![0, 0, 1, 1]).unwrap().ambiguous_labels(),
            vec![0, 1]
        );
    }

    #[test]
    fn renormalize_examples() {
        let r = syn1().renormalize(&[0.5, 0.3, 0.2], 1).unwrap();
        assert!((r[0] - 0.6).abs() < 1e-12 && (r[1] - 0.4).abs() < 1e-12);
        assert_eq!(syn1().renormalize(&[0.5, 0.3, 0.2], 0).unwrap(), vec![1.0]);
        let h = HierarchyMap::new(vec![0, 0, 1, 1]).unwrap();
        assert_eq!(h.renormalize(&[0.25; 4], 1).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn renormalize_errors() {
        assert_eq!(
            syn1().renormalize(&[1.0, 0.0, 0.0], 1),
            Err(HierarchyError::DegenerateConditional(1))
        );
        assert!(matches!(
            syn1().renormalize(&[0.5, 0.5, 0.5], 1),
            Err(HierarchyError::NotNormalized(_))
        ));
    }

    #[test]
    fn json_is_bare_array() {
        let s = serde_json::to_string(&syn1()).unwrap();
        assert_eq!(s, "[0,1,1]");
        let back: HierarchyMap = serde_json::from_str(&s).unwrap();
        assert_eq!(back, syn1());
        assert!(serde_json::from_str::<HierarchyMap>("[0,2]").is_err());
    }

    fn arb_hierarchy() -> impl Strategy<Value = HierarchyMap> {
        (2usize..5, 0usize..4).prop_flat_map(|(coarse, extra)| {
            proptest::collection::vec(0..coarse, extra).prop_map(move |tail| {
                let mut table: Vec<usize> = (0..coarse).collect();
                table.extend(tail);
                HierarchyMap::new(table).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn renormalized_output_is_a_distribution(
            h in arb_hierarchy(),
            raw in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let raw = &raw[..h.fine_count()];
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            for z in 0..h.coarse_count() {
                let r = h.renormalize(&probs, z).unwrap();
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(r.iter().all(|&v| v > 0.0));
            }
            let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
            for y in 0..h.fine_count() {
                let v = h.renormalized_log_prob(&lp, y);
                if h.preimage(h.table()[y]).len() == 1 {
                    prop_assert_eq!(v, 0.0);
                }
                let z = h.coarsen(y).unwrap();
                let pos = h.preimage(z).iter().position(|&p| p == y).unwrap();
                let direct = h.renormalize(&probs, z).unwrap()[pos].ln();
                prop_assert!((v - direct).abs() < 1e-12);
            }
            let coarse = h.coarsen_log_probs(&lp);
            let total_coarse: f64 = coarse.iter().map(|v| v.exp()).sum();
            prop_assert!((total_coarse - 1.0).abs() < 1e-12);
        }
    }
}
