//! Dataset manifests: a TOML document listing database and query images,
//! their token files, and ground-truth positives.
//!
//! ```toml
//! name = "pitts-mini"
//!
//! [[database]]
//! id = "db/0001"
//! place = "p0001"            # needed for training only
//! dino = "tokens/db_0001.dino.vprt"
//! clip = "tokens/db_0001.clip.vprt"
//!
//! [[query]]
//! id = "q/0001"
//! dino = "tokens/q_0001.dino.vprt"
//! clip = "tokens/q_0001.clip.vprt"
//! positives = ["db/0001"]
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, tokens::read_tokens, write_file};
use crate::error::{Error, Result};
use crate::fusion::{Source, TokenSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place: Option<String>,
    pub dino: PathBuf,
    pub clip: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub id: String,
    pub dino: PathBuf,
    pub clip: PathBuf,
    #[serde(default)]
    pub positives: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub database: Vec<DatabaseEntry>,
    #[serde(default)]
    pub query: Vec<QueryEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate_ids()?;
        Ok(m)
    }

    /// Parses the manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| Error::invalid(format!("{}: manifest is not UTF-8", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        m.validate_files()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml().as_bytes())
    }

    pub fn dataset_name(&self) -> &str {
        if self.name.is_empty() {
            "dataset"
        } else {
            &self.name
        }
    }

    fn validate_ids(&self) -> Result<()> {
        let mut db = HashSet::new();
        for e in &self.database {
            if !db.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate database id {}", e.id)));
            }
        }
        let mut qs = HashSet::new();
        for q in &self.query {
            if !qs.insert(q.id.as_str()) {
                return Err(Error::invalid(format!("duplicate query id {}", q.id)));
            }
            if let Some(p) = q.positives.iter().find(|p| !db.contains(p.as_str())) {
                return Err(Error::invalid(format!("query {} lists unknown positive {p}", q.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate_files(&self) -> Result<()> {
        let missing: Vec<&str> = self
            .images()
            .filter(|(_, dino, clip)| !self.resolve(dino).is_file() || !self.resolve(clip).is_file())
            .map(|(id, _, _)| id)
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "missing token files for: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// `(id, dino path, clip path)` for database entries followed by queries.
    pub fn images(&self) -> impl Iterator<Item = (&str, &Path, &Path)> {
        self.database
            .iter()
            .map(|e| (e.id.as_str(), e.dino.as_path(), e.clip.as_path()))
            .chain(
                self.query
                    .iter()
                    .map(|q| (q.id.as_str(), q.dino.as_path(), q.clip.as_path())),
            )
    }

    /// Loads and checks the DINO/CLIP token pair of one image.
    pub fn load_pair(&self, id: &str, dino: &Path, clip: &Path) -> Result<(TokenSet, TokenSet)> {
        let with_id = |e: Error| match e {
            Error::Format { path, kind, detail } => Error::format(path, kind, format!("image {id}: {detail}")),
            other => Error::invalid(format!("image {id}: {other}")),
        };
        let d = read_tokens(&self.resolve(dino), id).map_err(with_id)?;
        let c = read_tokens(&self.resolve(clip), id).map_err(with_id)?;
        if d.source != Source::Dino || c.source != Source::Clip {
            return Err(Error::invalid(format!(
                "image {id}: expected DINO and CLIP token files, found {:?} and {:?}",
                d.source, c.source
            )));
        }
        Ok((d, c))
    }

    pub fn positives(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.query
            .iter()
            .map(|q| (q.id.clone(), q.positives.iter().cloned().collect()))
            .collect()
    }

    /// Place label per database entry; training requires every entry to have one.
    pub fn place_labels(&self) -> Result<Vec<String>> {
        self.database
            .iter()
            .map(|e| {
                e.place
                    .clone()
                    .ok_or_else(|| Error::invalid(format!("database entry {} has no place label", e.id)))
            })
            .collect()
    }
}
