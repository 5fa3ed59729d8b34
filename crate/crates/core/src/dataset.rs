//! Paired before/after corpus: manifest import, on-disk store, sampling.
//!
//! Store layout is one directory per pair:
//!
//! ```text
//! <store>/<pair_id>/before.png
//! <store>/<pair_id>/after.png
//! <store>/<pair_id>/meta.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{ImagingError, Raster};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("missing image: {}", .0.display())]
    MissingImage(PathBuf),
    #[error("cannot decode {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: ImagingError,
    },
    #[error("pair {pair_id}: before is {before:?}, after is {after:?}")]
    DimensionMismatch {
        pair_id: String,
        before: (u32, u32),
        after: (u32, u32),
    },
    #[error("requested {requested} pairs but the split holds {available}")]
    InsufficientPairs { requested: usize, available: usize },
    #[error("unknown pair id {0:?}")]
    UnknownPairId(String),
    #[error("store is corrupt: {0}")]
    CorruptStore(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One before/after image pair with its reference captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiTemporalPair {
    pub pair_id: String,
    pub image_before: Raster,
    pub image_after: Raster,
    pub references: Vec<String>,
    pub split: Split,
}

impl BiTemporalPair {
    pub fn new(
        pair_id: impl Into<String>,
        image_before: Raster,
        image_after: Raster,
        references: Vec<String>,
        split: Split,
    ) -> Result<Self, DatasetError> {
        let pair_id = pair_id.into();
        check_dimensions(&pair_id, &image_before, &image_after)?;
        check_references(&pair_id, &references)?;
        Ok(Self {
            pair_id,
            image_before,
            image_after,
            references,
            split,
        })
    }
}

fn check_dimensions(pair_id: &str, before: &Raster, after: &Raster) -> Result<(), DatasetError> {
    if (before.width(), before.height()) != (after.width(), after.height()) {
        return Err(DatasetError::DimensionMismatch {
            pair_id: pair_id.to_owned(),
            before: (before.width(), before.height()),
            after: (after.width(), after.height()),
        });
    }
    Ok(())
}

fn check_references(pair_id: &str, references: &[String]) -> Result<(), DatasetError> {
    if references.is_empty() {
        return Err(DatasetError::ManifestParse(format!(
            "pair {pair_id:?} has no captions"
        )));
    }
    if references.iter().any(|c| c.trim().is_empty()) {
        return Err(DatasetError::ManifestParse(format!(
            "pair {pair_id:?} has a blank caption"
        )));
    }
    Ok(())
}

/// Pair ids double as directory names.
fn check_pair_id(pair_id: &str) -> Result<(), DatasetError> {
    let ok = !pair_id.is_empty()
        && !pair_id.starts_with('.')
        && pair_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(DatasetError::ManifestParse(format!(
            "pair id {pair_id:?} must be non-empty [A-Za-z0-9._-] and not start with '.'"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub path_before: String,
    pub path_after: String,
    pub captions: Vec<String>,
    pub split: Split,
}

/// Canonical JSON manifest. Image paths resolve against an images root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let manifest: Self =
            serde_json::from_str(text).map_err(|e| DatasetError::ManifestParse(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| {
            DatasetError::ManifestParse(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            check_pair_id(&entry.pair_id)?;
            if !seen.insert(entry.pair_id.as_str()) {
                return Err(DatasetError::ManifestParse(format!(
                    "duplicate pair id {:?}",
                    entry.pair_id
                )));
            }
            check_references(&entry.pair_id, &entry.captions)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Upstream Levir-CC caption file (`LevirCCcaptions.json`).
#[derive(Debug, Deserialize)]
struct LevirCaptionFile {
    images: Vec<LevirImage>,
}

#[derive(Debug, Deserialize)]
struct LevirImage {
    filename: String,
    split: String,
    sentences: Vec<LevirSentence>,
}

#[derive(Debug, Deserialize)]
struct LevirSentence {
    raw: String,
}

/// Maps the upstream Levir-CC caption JSON into a manifest. Images are
/// expected at `<split>/A/<filename>` (before) and `<split>/B/<filename>`
/// (after) under the images root; the pair id is the file stem. Raw
/// sentences are whitespace-trimmed.
pub fn convert_levir_cc(caption_json: &str) -> Result<DatasetManifest, DatasetError> {
    let file: LevirCaptionFile = serde_json::from_str(caption_json)
        .map_err(|e| DatasetError::ManifestParse(format!("levir-cc captions: {e}")))?;
    let mut entries = Vec::with_capacity(file.images.len());
    for img in file.images {
        let split: Split = img.split.parse().map_err(DatasetError::ManifestParse)?;
        let pair_id = Path::new(&img.filename)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&img.filename)
            .to_owned();
        entries.push(ManifestEntry {
            pair_id,
            path_before: format!("{split}/A/{}", img.filename),
            path_after: format!("{split}/B/{}", img.filename),
            captions: img
                .sentences
                .iter()
                .map(|s| s.raw.trim().to_owned())
                .collect(),
            split,
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PairMeta {
    pair_id: String,
    split: Split,
    width: u32,
    height: u32,
    references: Vec<String>,
}

const META_FILE: &str = "meta.json";
const BEFORE_FILE: &str = "before.png";
const AFTER_FILE: &str = "after.png";

/// Read-only view of an imported store. Cloning is cheap enough for
/// handing to worker threads; all reads go to disk.
#[derive(Debug, Clone)]
pub struct DatasetStore {
    root: PathBuf,
    pairs: BTreeMap<String, PairMeta>,
}

fn read_source_image(images_root: &Path, rel: &str) -> Result<Raster, DatasetError> {
    let path = images_root.join(rel);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::MissingImage(path))
        }
        Err(e) => return Err(e.into()),
    };
    Raster::decode(&bytes).map_err(|source| DatasetError::Decode { path, source })
}

/// Writes `bytes` to `path` through a sibling temp file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = parent.join(format!(
        ".{name}.{}.{:?}.tmp",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Imports every manifest entry into `store_root`, replacing any pairs a
/// previous import left there. All entries are decoded and checked before
/// the store is touched.
pub fn import_corpus(
    manifest_path: &Path,
    images_root: &Path,
    store_root: &Path,
) -> Result<DatasetStore, DatasetError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    import_manifest(&manifest, images_root, store_root)
}

pub fn import_manifest(
    manifest: &DatasetManifest,
    images_root: &Path,
    store_root: &Path,
) -> Result<DatasetStore, DatasetError> {
    manifest.validate()?;
    let mut staged = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let before = read_source_image(images_root, &entry.path_before)?;
        let after = read_source_image(images_root, &entry.path_after)?;
        check_dimensions(&entry.pair_id, &before, &after)?;
        staged.push((entry, before.to_png()?, after.to_png()?, before.width(), before.height()));
    }

    fs::create_dir_all(store_root)?;
    let wanted: BTreeSet<&str> = manifest.entries.iter().map(|e| e.pair_id.as_str()).collect();
    for dir in fs::read_dir(store_root)? {
        let dir = dir?.path();
        let stale = dir.join(META_FILE).is_file()
            && dir
                .file_name()
                .and_then(|n| n.to_str())
                .is_none_or(|n| !wanted.contains(n));
        if stale {
            fs::remove_dir_all(&dir)?;
        }
    }

    let mut pairs = BTreeMap::new();
    for (entry, before_png, after_png, width, height) in staged {
        let dir = store_root.join(&entry.pair_id);
        fs::create_dir_all(&dir)?;
        let meta = PairMeta {
            pair_id: entry.pair_id.clone(),
            split: entry.split,
            width,
            height,
            references: entry.captions.clone(),
        };
        write_atomic(&dir.join(BEFORE_FILE), &before_png)?;
        write_atomic(&dir.join(AFTER_FILE), &after_png)?;
        let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        write_atomic(&dir.join(META_FILE), &meta_json)?;
        pairs.insert(meta.pair_id.clone(), meta);
    }
    Ok(DatasetStore {
        root: store_root.to_path_buf(),
        pairs,
    })
}

impl DatasetStore {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let mut pairs = BTreeMap::new();
        for dir in fs::read_dir(root)? {
            let dir = dir?.path();
            let meta_path = dir.join(META_FILE);
            if !meta_path.is_file() {
                continue;
            }
            let meta: PairMeta = serde_json::from_slice(&fs::read(&meta_path)?)
                .map_err(|e| DatasetError::CorruptStore(format!("{}: {e}", meta_path.display())))?;
            let dir_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if dir_name != meta.pair_id {
                return Err(DatasetError::CorruptStore(format!(
                    "directory {dir_name:?} holds pair {:?}",
                    meta.pair_id
                )));
            }
            pairs.insert(meta.pair_id.clone(), meta);
        }
        Ok(Self {
            root: root.to_path_buf(),
            pairs,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All pair ids in lexicographic order.
    pub fn pair_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    pub fn contains(&self, pair_id: &str) -> bool {
        self.pairs.contains_key(pair_id)
    }

    pub fn count_by_split(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for meta in self.pairs.values() {
            *counts.entry(meta.split).or_default() += 1;
        }
        counts
    }

    pub fn references(&self, pair_id: &str) -> Result<&[String], DatasetError> {
        self.pairs
            .get(pair_id)
            .map(|m| m.references.as_slice())
            .ok_or_else(|| DatasetError::UnknownPairId(pair_id.to_owned()))
    }

    pub fn image_path(&self, pair_id: &str, after: bool) -> Result<PathBuf, DatasetError> {
        if !self.contains(pair_id) {
            return Err(DatasetError::UnknownPairId(pair_id.to_owned()));
        }
        let file = if after { AFTER_FILE } else { BEFORE_FILE };
        Ok(self.root.join(pair_id).join(file))
    }

    pub fn load_pair(&self, pair_id: &str) -> Result<BiTemporalPair, DatasetError> {
        let meta = self
            .pairs
            .get(pair_id)
            .ok_or_else(|| DatasetError::UnknownPairId(pair_id.to_owned()))?;
        let dir = self.root.join(pair_id);
        let load = |file: &str| -> Result<Raster, DatasetError> {
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|_| DatasetError::MissingImage(path.clone()))?;
            Raster::decode(&bytes).map_err(|source| DatasetError::Decode { path, source })
        };
        BiTemporalPair::new(
            meta.pair_id.clone(),
            load(BEFORE_FILE)?,
            load(AFTER_FILE)?,
            meta.references.clone(),
            meta.split,
        )
    }

    /// Draws `n` distinct ids uniformly without replacement from the ids of
    /// `split` (all splits when `None`), sorted lexicographically first.
    /// The draw is a partial Fisher-Yates shuffle driven by ChaCha8 seeded
    /// with `seed`.
    pub fn sample_pairs(
        &self,
        n: usize,
        seed: u64,
        split: Option<Split>,
    ) -> Result<Vec<String>, DatasetError> {
        let mut ids: Vec<&str> = self
            .pairs
            .values()
            .filter(|m| split.is_none_or(|s| m.split == s))
            .map(|m| m.pair_id.as_str())
            .collect();
        if n > ids.len() {
            return Err(DatasetError::InsufficientPairs {
                requested: n,
                available: ids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            let j = rng.gen_range(i..ids.len());
            ids.swap(i, j);
        }
        Ok(ids[..n].iter().map(|s| (*s).to_owned()).collect())
    }

    /// SHA-256 over every pair's id and stored files, in id order.
    pub fn content_digest(&self) -> Result<String, DatasetError> {
        let mut hasher = Sha256::new();
        for id in self.pairs.keys() {
            hasher.update((id.len() as u64).to_le_bytes());
            hasher.update(id.as_bytes());
            for file in [META_FILE, BEFORE_FILE, AFTER_FILE] {
                let bytes = fs::read(self.root.join(id).join(file))?;
                hasher.update((bytes.len() as u64).to_le_bytes());
                hasher.update(&bytes);
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}
