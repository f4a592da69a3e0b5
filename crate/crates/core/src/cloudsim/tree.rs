//! Hierarchical JSON store addressed by slash-separated paths.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::value::RawValue;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("path is empty")]
    Empty,
    #[error("path {0:?} has an empty segment")]
    EmptySegment(String),
    #[error("value written at {0:?} is not a JSON object")]
    NotObject(String),
}

/// Splits a write path. Leading and trailing slashes are not allowed.
pub fn segments(path: &str) -> Result<Vec<&str>, PathError> {
    if path.is_empty() {
        return Err(PathError::Empty);
    }
    let segs: Vec<&str> = path.split('/').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(PathError::EmptySegment(path.to_string()));
    }
    Ok(segs)
}

/// Normalizes a subscription prefix: a single trailing slash is dropped and
/// the empty prefix (or "/") addresses the root.
pub fn normalize_prefix(prefix: &str) -> Result<String, PathError> {
    let p = prefix.strip_suffix('/').unwrap_or(prefix);
    if p.is_empty() {
        return Ok(String::new());
    }
    segments(p)?;
    Ok(p.to_string())
}

/// Whether a write at `path` falls under the normalized `prefix`.
pub fn under_prefix(path: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || path == prefix
        || (path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'/')
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Arc<RawValue>),
    Branch(BTreeMap<String, Node>),
}

impl Node {
    fn to_value(&self) -> Value {
        match self {
            Node::Leaf(raw) => serde_json::from_str(raw.get()).expect("leaves hold valid JSON"),
            Node::Branch(children) => Value::Object(
                children
                    .iter()
                    .map(|(k, v)| (k.clone(), v.to_value()))
                    .collect::<Map<String, Value>>(),
            ),
        }
    }

    fn count_leaves(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Branch(c) => c.values().map(Node::count_leaves).sum(),
        }
    }
}

/// JSON tree plus a version counter bumped on every accepted write.
#[derive(Debug, Clone)]
pub struct JsonTree {
    root: BTreeMap<String, Node>,
    version: u64,
}

impl Default for JsonTree {
    fn default() -> Self {
        JsonTree::new()
    }
}

impl JsonTree {
    pub fn new() -> JsonTree {
        JsonTree {
            root: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Writes `value` (which must be a JSON object) at `path`, replacing
    /// whatever was there, and returns the new version.
    pub fn put(&mut self, path: &str, value: Arc<RawValue>) -> Result<u64, PathError> {
        let segs = segments(path)?;
        if !value.get().trim_start().starts_with('{') {
            return Err(PathError::NotObject(path.to_string()));
        }
        let (last, parents) = segs.split_last().expect("non-empty");
        let mut level = &mut self.root;
        for seg in parents {
            let node = level
                .entry(seg.to_string())
                .or_insert_with(|| Node::Branch(BTreeMap::new()));
            if let Node::Leaf(_) = node {
                *node = Node::Branch(BTreeMap::new());
            }
            level = match node {
                Node::Branch(children) => children,
                Node::Leaf(_) => unreachable!(),
            };
        }
        level.insert(last.to_string(), Node::Leaf(value));
        self.version += 1;
        Ok(self.version)
    }

    fn node(&self, path: &str) -> Option<&Node> {
        let segs = segments(path).ok()?;
        let mut level = &self.root;
        let (last, parents) = segs.split_last()?;
        for seg in parents {
            match level.get(*seg)? {
                Node::Branch(children) => level = children,
                Node::Leaf(_) => return None,
            }
        }
        level.get(*last)
    }

    pub fn get(&self, path: &str) -> Option<Value> {
        self.node(path).map(Node::to_value)
    }

    /// Subtree under a normalized prefix; an empty object when absent.
    pub fn subtree(&self, prefix: &str) -> Value {
        if prefix.is_empty() {
            return Node::Branch(self.root.clone()).to_value();
        }
        self.node(prefix)
            .map(Node::to_value)
            .unwrap_or_else(|| Value::Object(Map::new()))
    }

    /// Number of values stored under a prefix.
    pub fn count_under(&self, prefix: &str) -> usize {
        if prefix.is_empty() {
            return self.root.values().map(Node::count_leaves).sum();
        }
        self.node(prefix).map_or(0, Node::count_leaves)
    }

    /// Empties the tree; the version counter keeps counting.
    pub fn clear(&mut self) {
        self.root.clear();
    }
}
