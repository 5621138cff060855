use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassSplits, DatasetRegistry, Domain, SampleRef};
use crate::error::{DafosError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Test,
}

/// Shape of an episode. In the test phase `target_shots` is the support size
/// and `source_shots` is unused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub unknown: usize,
    pub source_shots: usize,
    pub target_shots: usize,
    pub queries: usize,
    pub phase: Phase,
    /// Test phase only: also draw known-class queries from the source domain.
    pub generalized: bool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            unknown: 5,
            source_shots: 5,
            target_shots: 1,
            queries: 3,
            phase: Phase::Train,
            generalized: false,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(DafosError::config("episode.ways", "need at least 2 known classes"));
        }
        if self.unknown < 1 {
            return Err(DafosError::config("episode.unknown", "need at least 1 pseudo-unknown class"));
        }
        if self.queries < 1 {
            return Err(DafosError::config("episode.queries", "need at least 1 query per class"));
        }
        if self.target_shots < 1 {
            return Err(DafosError::config("episode.target_shots", "must be at least 1"));
        }
        if self.phase == Phase::Train && self.source_shots <= self.target_shots {
            return Err(DafosError::config(
                "episode.source_shots",
                "source shots must exceed target shots during training",
            ));
        }
        Ok(())
    }
}

/// A sample with its class name, episode-local label and domain.
///
/// Known classes take labels `0..K`, pseudo-unknown classes `K..K+U`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRef {
    pub sample: SampleRef,
    pub class: String,
    pub label: usize,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEpisode {
    pub domain: Domain,
    pub known: Vec<String>,
    pub unknown: Vec<String>,
    pub support: Vec<LabeledRef>,
    pub query: Vec<LabeledRef>,
}

impl DomainEpisode {
    fn empty(domain: Domain) -> Self {
        Self {
            domain,
            known: Vec::new(),
            unknown: Vec::new(),
            support: Vec::new(),
            query: Vec::new(),
        }
    }

    pub fn ways(&self) -> usize {
        self.known.len()
    }

    pub fn is_known(&self, label: usize) -> bool {
        label < self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty() && self.query.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub phase: Phase,
    pub generalized: bool,
    pub source: DomainEpisode,
    pub target: DomainEpisode,
}

impl Episode {
    pub fn domain(&self, d: Domain) -> &DomainEpisode {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

fn pick_classes<R: Rng + ?Sized>(
    pool: &[String],
    known: usize,
    unknown: usize,
    what: &str,
    rng: &mut R,
) -> Result<(Vec<String>, Vec<String>)> {
    if known + unknown > pool.len() {
        return Err(DafosError::InsufficientClasses(format!(
            "{what}: need {known}+{unknown} classes, pool has {}",
            pool.len()
        )));
    }
    let mut chosen: Vec<String> = pool.choose_multiple(rng, known + unknown).cloned().collect();
    let unknown_part = chosen.split_off(known);
    Ok((chosen, unknown_part))
}

/// Draws `support + query` distinct samples for one class.
fn draw_samples<R: Rng + ?Sized>(
    registry: &DatasetRegistry,
    domain: Domain,
    class: &str,
    label: usize,
    support: usize,
    query: usize,
    rng: &mut R,
) -> Result<(Vec<LabeledRef>, Vec<LabeledRef>)> {
    let refs = registry.samples(domain, class).ok_or_else(|| {
        DafosError::Data(format!("class `{class}` not present in {domain} domain"))
    })?;
    let need = support + query;
    if refs.len() < need {
        return Err(DafosError::InsufficientSamples(format!(
            "class `{class}` ({domain}) has {} samples, episode needs {need}",
            refs.len()
        )));
    }
    let picks = index::sample(rng, refs.len(), need).into_vec();
    let make = |i: usize| LabeledRef {
        sample: refs[i].clone(),
        class: class.to_string(),
        label,
        domain,
    };
    let s = picks[..support].iter().map(|&i| make(i)).collect();
    let q = picks[support..].iter().map(|&i| make(i)).collect();
    Ok((s, q))
}

fn build_domain<R: Rng + ?Sized>(
    registry: &DatasetRegistry,
    domain: Domain,
    known: Vec<String>,
    unknown: Vec<String>,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<DomainEpisode> {
    let mut ep = DomainEpisode::empty(domain);
    for (label, class) in known.iter().enumerate() {
        let (s, q) = draw_samples(registry, domain, class, label, shots, queries, rng)?;
        ep.support.extend(s);
        ep.query.extend(q);
    }
    for (i, class) in unknown.iter().enumerate() {
        let (_, q) = draw_samples(registry, domain, class, known.len() + i, 0, queries, rng)?;
        ep.query.extend(q);
    }
    ep.known = known;
    ep.unknown = unknown;
    Ok(ep)
}

/// Samples a training episode: known and pseudo-unknown classes come from the
/// source-train pool for the source domain and the target-train pool for the
/// target domain.
pub fn sample_episode<R: Rng + ?Sized>(
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    if spec.phase != Phase::Train {
        return Err(DafosError::InvalidArgument("sample_episode needs a train-phase spec".into()));
    }
    spec.validate()?;
    let (ks, us) = pick_classes(&splits.source_train, spec.ways, spec.unknown, "source", rng)?;
    let (kt, ut) = pick_classes(&splits.target_train, spec.ways, spec.unknown, "target", rng)?;
    let source = build_domain(registry, Domain::Source, ks, us, spec.source_shots, spec.queries, rng)?;
    let target = build_domain(registry, Domain::Target, kt, ut, spec.target_shots, spec.queries, rng)?;
    Ok(Episode {
        phase: Phase::Train,
        generalized: false,
        source,
        target,
    })
}

/// Samples a test episode: support from the test-known classes, queries mixing
/// test-known and test-unknown classes. With `spec.generalized`, known-class
/// queries from `spec.ways` source-train classes are added (no source support;
/// inference uses the stored source prototype bank).
pub fn sample_test_episode<R: Rng + ?Sized>(
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    if spec.phase != Phase::Test {
        return Err(DafosError::InvalidArgument("sample_test_episode needs a test-phase spec".into()));
    }
    spec.validate()?;
    if spec.ways > splits.test_known.len() {
        return Err(DafosError::InsufficientClasses(format!(
            "test: need {} known classes, {} available",
            spec.ways,
            splits.test_known.len()
        )));
    }
    if spec.unknown > splits.test_unknown.len() {
        return Err(DafosError::InsufficientClasses(format!(
            "test: need {} unknown classes, {} available",
            spec.unknown,
            splits.test_unknown.len()
        )));
    }
    let known: Vec<String> = splits.test_known.choose_multiple(rng, spec.ways).cloned().collect();
    let unknown: Vec<String> = splits
        .test_unknown
        .choose_multiple(rng, spec.unknown)
        .cloned()
        .collect();
    let target = build_domain(
        registry,
        Domain::Target,
        known,
        unknown,
        spec.target_shots,
        spec.queries,
        rng,
    )?;
    let source = if spec.generalized {
        let (ks, _) = pick_classes(&splits.source_train, spec.ways, 0, "source", rng)?;
        build_domain(registry, Domain::Source, ks, Vec::new(), 0, spec.queries, rng)?
    } else {
        DomainEpisode::empty(Domain::Source)
    };
    Ok(Episode {
        phase: Phase::Test,
        generalized: spec.generalized,
        source,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_registry, make_class_splits, DatasetSpec, SplitSizes};
    use crate::rng::DetRng;
    use rand::SeedableRng;

    fn setup() -> (DatasetRegistry, ClassSplits) {
        let reg = load_registry(None, &DatasetSpec::default()).unwrap();
        let splits = make_class_splits(&reg, &SplitSizes::default()).unwrap();
        (reg, splits)
    }

    #[test]
    fn counts_match_protocol() {
        let (reg, splits) = setup();
        let spec = EpisodeSpec {
            unknown: 1,
            ..Default::default()
        };
        let ep = sample_episode(&reg, &splits, &spec, &mut DetRng::seed_from_u64(0)).unwrap();
        assert_eq!(ep.source.support.len(), 25);
        assert_eq!(ep.target.support.len(), 5);
        assert_eq!(ep.source.query.len(), 18);
        assert_eq!(ep.target.query.len(), 18);
    }

    #[test]
    fn spec_counts_with_five_unknown() {
        let reg = load_registry(None, &DatasetSpec::default()).unwrap();
        let splits = make_class_splits(
            &reg,
            &SplitSizes {
                source_train: 10,
                target_train: 10,
                test_known: 3,
                test_unknown: 3,
                seed: 0,
            },
        )
        .unwrap();
        let spec = EpisodeSpec::default();
        let ep = sample_episode(&reg, &splits, &spec, &mut DetRng::seed_from_u64(4)).unwrap();
        assert_eq!(ep.source.support.len(), 25);
        assert_eq!(ep.target.support.len(), 5);
        assert_eq!(ep.source.query.len(), 30);
        assert_eq!(ep.target.query.len(), 30);
    }

    #[test]
    fn too_many_unknown_classes_is_rejected() {
        let (reg, splits) = setup();
        let spec = EpisodeSpec {
            unknown: 6,
            ..Default::default()
        };
        let err = sample_episode(&reg, &splits, &spec, &mut DetRng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DafosError::InsufficientClasses(_)));
    }

    #[test]
    fn train_phase_requires_more_source_shots() {
        let spec = EpisodeSpec {
            source_shots: 1,
            target_shots: 1,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generalized_test_has_both_domains() {
        let (reg, splits) = setup();
        let spec = EpisodeSpec {
            phase: Phase::Test,
            generalized: true,
            ..Default::default()
        };
        let ep = sample_test_episode(&reg, &splits, &spec, &mut DetRng::seed_from_u64(1)).unwrap();
        assert!(!ep.source.query.is_empty());
        assert!(!ep.target.query.is_empty());
        assert!(ep.source.support.is_empty());
        assert!(ep.source.query.iter().all(|q| splits.source_train.contains(&q.class)));
    }

    #[test]
    fn insufficient_samples_is_reported() {
        let spec = DatasetSpec {
            synthetic: Some(crate::data::SyntheticTask {
                samples_per_class: 4,
                ..Default::default()
            }),
            ..Default::default()
        };
        let reg = load_registry(None, &spec).unwrap();
        let splits = make_class_splits(&reg, &SplitSizes::default()).unwrap();
        let ep_spec = EpisodeSpec {
            unknown: 1,
            ..Default::default()
        };
        let err = sample_episode(&reg, &splits, &ep_spec, &mut DetRng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DafosError::InsufficientSamples(_)));
    }
}
