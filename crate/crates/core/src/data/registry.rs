use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{synthetic::SyntheticTask, Domain, SampleRef, SplitSizes};
use crate::error::{DafosError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `<root>/<domain>/<class>/<sample>` on disk.
    Directory,
    /// Explicit per-class file lists in the manifest.
    Listing,
    /// Generated Gaussian task.
    Synthetic,
}

/// Explicit file list for one class of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListingEntry {
    pub domain: Domain,
    pub class: String,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Root directory; relative listing paths resolve against it.
    pub root: Option<PathBuf>,
    /// Directory name of the source domain under `root`.
    pub source: String,
    /// Directory name of the target domain under `root`.
    pub target: String,
    pub synthetic: Option<SyntheticTask>,
    pub listing: Vec<ListingEntry>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            root: None,
            source: "source".into(),
            target: "target".into(),
            synthetic: Some(SyntheticTask::default()),
            listing: Vec::new(),
        }
    }
}

/// Dataset description plus split request, as stored in a manifest file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Manifest {
    pub dataset: DatasetSpec,
    pub splits: SplitSizes,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DafosError::config("manifest", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DafosError::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub name: String,
    /// Sorted by class name.
    pub classes: BTreeMap<String, Vec<SampleRef>>,
}

impl DomainData {
    pub fn num_samples(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }
}

/// Per-domain class → samples map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistry {
    pub source: DomainData,
    pub target: DomainData,
    pub synthetic: Option<SyntheticTask>,
}

impl DatasetRegistry {
    pub fn domain(&self, d: Domain) -> &DomainData {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.source.num_samples() + self.target.num_samples()
    }

    pub fn samples(&self, d: Domain, class: &str) -> Option<&[SampleRef]> {
        self.domain(d).classes.get(class).map(Vec::as_slice)
    }

    fn validate(&self) -> Result<()> {
        for d in Domain::BOTH {
            for (class, refs) in &self.domain(d).classes {
                if refs.is_empty() {
                    return Err(DafosError::Data(format!("empty class `{class}` in {d} domain")));
                }
            }
        }
        Ok(())
    }
}

/// Builds a registry from `manifest`. `root` overrides `manifest.dataset.root`.
pub fn load_registry(root: Option<&Path>, manifest: &DatasetSpec) -> Result<DatasetRegistry> {
    let root = root.map(Path::to_path_buf).or_else(|| manifest.root.clone());
    let registry = match manifest.kind {
        DatasetKind::Synthetic => {
            let task = manifest.synthetic.clone().ok_or_else(|| {
                DafosError::config("dataset.synthetic", "synthetic dataset needs a [dataset.synthetic] block")
            })?;
            synthetic_registry(manifest, task)?
        }
        DatasetKind::Directory => {
            let root = root.ok_or_else(|| DafosError::config("dataset.root", "directory dataset needs a root"))?;
            DatasetRegistry {
                source: scan_domain(&root, &manifest.source)?,
                target: scan_domain(&root, &manifest.target)?,
                synthetic: None,
            }
        }
        DatasetKind::Listing => listing_registry(root.as_deref(), manifest)?,
    };
    registry.validate()?;
    Ok(registry)
}

fn synthetic_registry(spec: &DatasetSpec, task: SyntheticTask) -> Result<DatasetRegistry> {
    if task.classes == 0 || task.samples_per_class == 0 || task.dim == 0 {
        return Err(DafosError::config(
            "dataset.synthetic",
            "classes, samples_per_class and dim must be positive",
        ));
    }
    let build = |domain: Domain, name: &str| DomainData {
        name: name.to_string(),
        classes: (0..task.classes)
            .map(|c| {
                let refs = (0..task.samples_per_class)
                    .map(|i| SampleRef::Synthetic {
                        domain,
                        class: c as u32,
                        index: i as u32,
                    })
                    .collect();
                (SyntheticTask::class_name(c), refs)
            })
            .collect(),
    };
    Ok(DatasetRegistry {
        source: build(Domain::Source, &spec.source),
        target: build(Domain::Target, &spec.target),
        synthetic: Some(task),
    })
}

fn scan_domain(root: &Path, name: &str) -> Result<DomainData> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(DafosError::Data(format!(
            "missing domain directory {}",
            dir.display()
        )));
    }
    let mut classes = BTreeMap::new();
    let entries = fs::read_dir(&dir).map_err(|e| DafosError::io(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DafosError::io(&dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let class = entry.file_name().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(&path)
            .map_err(|e| DafosError::io(&path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DafosError::Data(format!("empty class `{class}` in {}", dir.display())));
        }
        classes.insert(class, files.into_iter().map(SampleRef::File).collect());
    }
    Ok(DomainData {
        name: name.to_string(),
        classes,
    })
}

fn listing_registry(root: Option<&Path>, spec: &DatasetSpec) -> Result<DatasetRegistry> {
    let mut source = DomainData {
        name: spec.source.clone(),
        ..Default::default()
    };
    let mut target = DomainData {
        name: spec.target.clone(),
        ..Default::default()
    };
    for entry in &spec.listing {
        let domain = match entry.domain {
            Domain::Source => &mut source,
            Domain::Target => &mut target,
        };
        if entry.files.is_empty() {
            return Err(DafosError::Data(format!(
                "empty class `{}` in {} domain",
                entry.class, entry.domain
            )));
        }
        let refs = entry
            .files
            .iter()
            .map(|f| match root {
                Some(r) if f.is_relative() => SampleRef::File(r.join(f)),
                _ => SampleRef::File(f.clone()),
            })
            .collect();
        if domain.classes.insert(entry.class.clone(), refs).is_some() {
            return Err(DafosError::Data(format!(
                "duplicate class name `{}` in {} domain",
                entry.class, entry.domain
            )));
        }
    }
    Ok(DatasetRegistry {
        source,
        target,
        synthetic: None,
    })
}
