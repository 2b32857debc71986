//! Name-keyed registries for interchangeable strategies.
//!
//! Every pluggable family in the crate (encoders, decoders, losses, data
//! layers, optimizers, learning-rate policies, loss-scale policies,
//! transports) is looked up by its config name through a [`Registry`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Maps a config name to a factory value (usually a constructor function).
pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &str, factory: F) -> &mut Self {
        self.entries.insert(name.to_string(), factory);
        self
    }

    pub fn with(mut self, name: &str, factory: F) -> Self {
        self.register(name, factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.get(name).ok_or_else(|| Error::UnknownKind {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

impl<F> std::fmt::Debug for Registry<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}
