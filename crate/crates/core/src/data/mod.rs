//! Datasets, class splits and episodic sampling.
//!
//! Classes are identified by name across both domains. The source-train
//! classes come from the source domain; every other split is drawn from the
//! target domain, and no class name appears in two splits.

mod episode;
mod registry;
mod sample;
mod splits;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use episode::{sample_episode, sample_test_episode, DomainEpisode, Episode, EpisodeSpec, LabeledRef, Phase};
pub use registry::{load_registry, DatasetKind, DatasetRegistry, DatasetSpec, DomainData, ListingEntry, Manifest};
pub use sample::{ImageTensor, Sample, SampleRef, IMAGE_SIDE};
pub use splits::{make_class_splits, ClassSplits, SplitSizes, SPLITS_FORMAT_VERSION};
pub use synthetic::SyntheticTask;

/// One of the two domains of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}
