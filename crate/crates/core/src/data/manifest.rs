use super::io::{load_sample, SampleFormat};
use super::{DataError, Sample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// On-disk manifest: sample paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub labeled: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a String>) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(DataError::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

impl DatasetManifest {
    /// Validate a manifest without touching the file system. An empty
    /// `labeled` list means every training sample is labeled.
    pub fn new(file: ManifestFile, root: impl Into<PathBuf>) -> Result<Self, DataError> {
        check_unique(file.train.iter().chain(&file.test))?;
        check_unique(&file.labeled)?;
        let train: HashSet<&String> = file.train.iter().collect();
        if let Some(id) = file.labeled.iter().find(|id| !train.contains(id)) {
            return Err(DataError::Overlap(format!("labeled id {id} is not a training id")));
        }
        let labeled_ids = if file.labeled.is_empty() {
            file.train.clone()
        } else {
            let listed: HashSet<&String> = file.labeled.iter().collect();
            file.train.iter().filter(|id| listed.contains(id)).cloned().collect()
        };
        let mut manifest = Self {
            root: root.into(),
            train_ids: file.train,
            test_ids: file.test,
            labeled_ids,
            unlabeled_ids: Vec::new(),
        };
        manifest.unlabeled_ids = manifest.complement(&manifest.labeled_ids);
        Ok(manifest)
    }

    fn complement(&self, labeled: &[String]) -> Vec<String> {
        let set: HashSet<&String> = labeled.iter().collect();
        self.train_ids.iter().filter(|id| !set.contains(id)).cloned().collect()
    }

    /// Training ids in a seed-determined order; prefixes of this order are
    /// the labeled sets, so smaller labeled sets nest inside larger ones.
    fn shuffled_train(&self, seed: u64) -> Vec<String> {
        let mut ids = self.train_ids.clone();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids
    }

    /// Relabel with `count` training samples chosen by `seed`; the rest
    /// become unlabeled. Ids keep manifest order.
    pub fn with_labeled_count(&self, count: usize, seed: u64) -> Result<Self, DataError> {
        if count > self.train_ids.len() {
            return Err(DataError::Manifest(format!(
                "requested {count} labeled volumes but only {} training volumes exist",
                self.train_ids.len()
            )));
        }
        let chosen: HashSet<String> = self.shuffled_train(seed).into_iter().take(count).collect();
        let labeled_ids: Vec<String> = self
            .train_ids
            .iter()
            .filter(|id| chosen.contains(*id))
            .cloned()
            .collect();
        Ok(Self {
            unlabeled_ids: self.complement(&labeled_ids),
            labeled_ids,
            ..self.clone()
        })
    }

    /// Keep at most `count` unlabeled samples, chosen by `seed`.
    pub fn with_unlabeled_limit(&self, count: usize, seed: u64) -> Self {
        let current: HashSet<&String> = self.unlabeled_ids.iter().collect();
        let chosen: HashSet<String> = self
            .shuffled_train(seed)
            .into_iter()
            .filter(|id| current.contains(id))
            .take(count)
            .collect();
        Self {
            unlabeled_ids: self
                .unlabeled_ids
                .iter()
                .filter(|id| chosen.contains(*id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Load one sample; the id is kept as the manifest entry.
    pub fn load(&self, id: &str) -> Result<Sample, DataError> {
        let path = self.path(id);
        let mut sample = load_sample(&path, SampleFormat::infer(&path))?;
        sample.id = id.to_string();
        Ok(sample)
    }

    pub fn check_files(&self) -> Result<(), DataError> {
        for id in self.train_ids.iter().chain(&self.test_ids) {
            let path = self.path(id);
            if !path.exists() {
                return Err(DataError::MissingFile(path));
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> ManifestFile {
        ManifestFile {
            train: self.train_ids.clone(),
            test: self.test_ids.clone(),
            labeled: self.labeled_ids.clone(),
        }
    }
}

/// Parse, validate and check that every listed sample exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| DataError::format(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::new(file, root)?;
    manifest.check_files()?;
    Ok(manifest)
}
