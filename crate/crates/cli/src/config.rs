//! Run configuration: one TOML file per row of a results matrix.
//!
//! ```toml
//! store = "data/store"
//! strategy = "hybrid"
//! captioner = "llava"
//! composer = "gpt4"
//! n = 100
//! seed = 7
//! cache = "cache"
//! parallelism = 4
//! out = "runs/hyb-llava-gpt4.jsonl"
//!
//! [[backends]]
//! name = "llava"
//! endpoint_url = "http://localhost:8000/v1/chat/completions"
//! model_id = "llava-1.5-13b"
//! supports_images = true
//! ```
//!
//! API keys never live in the file; see
//! [`narrator_core::backend::http::credential_env_var`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use narrator_core::{BackendSpec, Split, Strategy};

use crate::CliError;

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub store: PathBuf,
    pub strategy: Strategy,
    /// Required by Step-by-Step and Hybrid; ignored by All-at-Once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captioner: Option<String>,
    pub composer: String,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Restricts sampling to one split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub cache: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Drop the default stopword nouns when scoring.
    #[serde(default)]
    pub stopwords: bool,
    pub out: PathBuf,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub strategy: Option<Strategy>,
    pub captioner: Option<String>,
    pub composer: Option<String>,
    pub cache: Option<PathBuf>,
    pub stopwords: Option<bool>,
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads and parses `path`; relative paths inside the file are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.store, &mut cfg.cache, &mut cfg.out] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: Overrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { self.$f = v; } )* };
        }
        take!(seed, n, strategy, composer, cache, stopwords, out, parallelism);
        if o.captioner.is_some() {
            self.captioner = o.captioner;
        }
    }

    /// Checks invariants and that every referenced backend is declared.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        let names: HashMap<&str, &BackendSpec> =
            self.backends.iter().map(|b| (b.name.as_str(), b)).collect();
        if names.len() != self.backends.len() {
            return bad("backend names must be unique".into());
        }
        for b in &self.backends {
            b.validate().map_err(|e| CliError::Config(format!("backend {:?}: {e}", b.name)))?;
        }
        if !names.contains_key(self.composer.as_str()) {
            return bad(format!("unknown backend {:?}", self.composer));
        }
        if self.strategy.uses_captioner() {
            match &self.captioner {
                None => return bad(format!("{} needs a captioner", self.strategy.label())),
                Some(c) if !names.contains_key(c.as_str()) => {
                    return bad(format!("unknown backend {c:?}"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn backend(&self, name: &str) -> Option<&BackendSpec> {
        self.backends.iter().find(|b| b.name == name)
    }
}
