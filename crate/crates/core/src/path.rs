//! Dot-separated addresses of persona tree nodes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path `{0}` needs at least two segments")]
    TooShort(String),
    #[error("path `{path}` has an empty segment at position {index}")]
    EmptySegment { path: String, index: usize },
    #[error("segment `{segment}` contains invalid character {ch:?}")]
    InvalidChar { segment: String, ch: char },
}

/// Returns true for characters allowed inside a node name.
pub fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

/// Checks a single node name; used for schema nodes and path segments alike.
pub fn validate_name(name: &str) -> Result<(), PathError> {
    if name.is_empty() {
        return Err(PathError::EmptySegment {
            path: name.to_string(),
            index: 0,
        });
    }
    match name.chars().find(|c| !is_name_char(*c)) {
        Some(ch) => Err(PathError::InvalidChar {
            segment: name.to_string(),
            ch,
        }),
        None => Ok(()),
    }
}

/// Address of a leaf: at least two names joined by periods.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePath {
    segments: Vec<String>,
}

impl NodePath {
    pub fn new<I, S>(segments: I) -> Result<Self, PathError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        let joined = segments.join(".");
        if segments.len() < 2 {
            return Err(PathError::TooShort(joined));
        }
        for (index, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(PathError::EmptySegment {
                    path: joined,
                    index,
                });
            }
            validate_name(seg)?;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    /// Final segment (the leaf name).
    pub fn name(&self) -> &str {
        self.segments.last().expect("path has >= 2 segments")
    }

    /// Text form of the parent branch, e.g. `a.b` for `a.b.c`.
    pub fn parent_key(&self) -> String {
        self.segments[..self.segments.len() - 1].join(".")
    }

    pub fn child(&self, name: &str) -> Result<Self, PathError> {
        let mut segments = self.segments.clone();
        segments.push(name.to_string());
        Self::new(segments)
    }
}

impl FromStr for NodePath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s.split('.'))
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("."))
    }
}

impl Serialize for NodePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
