use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::tape::Mat;

/// Where a feature row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    /// Low-variance generator output for a known class.
    SyntheticKnown,
    /// High-variance generator output for a pseudo-unknown class.
    SyntheticUnknown,
}

/// Embedded samples of one domain with episode-local labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub provenance: Provenance,
}

impl FeatureBatch {
    pub fn new(features: Mat, labels: Vec<usize>, domain: Domain, provenance: Provenance) -> Self {
        assert_eq!(features.nrows(), labels.len(), "one label per feature row");
        Self {
            features,
            labels,
            domain,
            provenance,
        }
    }

    pub fn empty(dim: usize, domain: Domain, provenance: Provenance) -> Self {
        Self::new(Mat::zeros((0, dim)), Vec::new(), domain, provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices whose label satisfies `pred`.
    pub fn rows_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| pred(l))
            .map(|(i, _)| i)
            .collect()
    }
}
