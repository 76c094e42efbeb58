//! LS(): per-switch logical store for signatures, lists, profiles, and audit records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::net::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsNamespace {
    Signatures,
    Whitelist,
    Blacklist,
    /// Opaque behaviour profiles; stored and returned as bytes only.
    Profiles,
    /// Append-only.
    Audit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsEntry {
    pub namespace: LsNamespace,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub written_at: SimTime,
}

impl LsEntry {
    pub fn new(namespace: LsNamespace, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>, at: SimTime) -> Self {
        LsEntry { namespace, key: key.into(), value: value.into(), written_at: at }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LsError {
    #[error("audit key {0:?} already written")]
    AuditOverwrite(String),
}

#[derive(Debug, Clone, Default)]
pub struct LogicalStore {
    entries: BTreeMap<(LsNamespace, Vec<u8>), LsEntry>,
}

impl LogicalStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, entry: LsEntry) -> Result<(), LsError> {
        let key = (entry.namespace, entry.key.clone());
        if entry.namespace == LsNamespace::Audit && self.entries.contains_key(&key) {
            return Err(LsError::AuditOverwrite(String::from_utf8_lossy(&entry.key).into_owned()));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, namespace: LsNamespace, key: &[u8]) -> Option<&[u8]> {
        self.entries.get(&(namespace, key.to_vec())).map(|e| e.value.as_slice())
    }

    pub fn entry(&self, namespace: LsNamespace, key: &[u8]) -> Option<&LsEntry> {
        self.entries.get(&(namespace, key.to_vec()))
    }

    /// Drops every entry of a namespace. Audit cannot be cleared.
    pub(crate) fn clear(&mut self, namespace: LsNamespace) {
        debug_assert_ne!(namespace, LsNamespace::Audit);
        self.entries.retain(|(ns, _), _| *ns != namespace);
    }

    pub fn iter_namespace(&self, namespace: LsNamespace) -> impl Iterator<Item = &LsEntry> {
        self.entries.values().filter(move |e| e.namespace == namespace)
    }

    pub fn count(&self, namespace: LsNamespace) -> usize {
        self.iter_namespace(namespace).count()
    }
}
