//! Streaming access to OSM full-history XML dumps.
//!
//! A history dump is a single XML document listing every stored version of
//! every node, way and relation, in file order. [`HistoryReader`] walks that
//! document as a pull parser and yields one [`RawVersion`] per version record
//! without ever materializing more than the record currently being read.
//! [`group_by_element`] turns the flat version stream into per-element
//! [`ElementHistory`] values, relying on the dump property that all versions
//! of an element are stored contiguously.

mod grouping;
mod parser;
mod writer;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use thiserror::Error;

pub use grouping::{group_by_element, GroupByElement};
pub use parser::{parse_history, HistoryReader};
pub use writer::write_history_xml;

/// User id recorded for versions that carry no `uid` attribute.
///
/// Early OSM edits and anonymized accounts have no user id in the dump. They
/// still count as versions (and therefore edits) but are excluded from any
/// per-user statistic and from the co-contribution network.
pub const ANONYMOUS_USER_ID: u64 = 0;

/// The three kinds of OSM elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ElementType {
    Node,
    Way,
    Relation,
}

impl ElementType {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementType::Node => "node",
            ElementType::Way => "way",
            ElementType::Relation => "relation",
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "node" => Ok(ElementType::Node),
            "way" => Ok(ElementType::Way),
            "relation" => Ok(ElementType::Relation),
            _ => Err(()),
        }
    }
}

/// A latitude/longitude pair in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coords {
    pub lat: f64,
    pub lon: f64,
}

/// One entry of a relation's member list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Member {
    pub member_type: ElementType,
    pub member_id: u64,
}

/// Type-specific part of a version record.
///
/// Exactly one variant applies to an element, matching its [`ElementType`].
/// Deleted node versions carry no coordinates, hence the `Option`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Node { coords: Option<Coords> },
    Way { node_refs: Vec<u64> },
    Relation { members: Vec<Member> },
}

impl Payload {
    pub fn element_type(&self) -> ElementType {
        match self {
            Payload::Node { .. } => ElementType::Node,
            Payload::Way { .. } => ElementType::Way,
            Payload::Relation { .. } => ElementType::Relation,
        }
    }
}

/// One historical version of one element, as stored in the dump.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVersion {
    pub element_type: ElementType,
    pub element_id: u64,
    pub version: u32,
    pub timestamp: DateTime<Utc>,
    /// Contributing user, [`ANONYMOUS_USER_ID`] when the dump has none.
    pub user_id: u64,
    pub visible: bool,
    pub payload: Payload,
}

impl RawVersion {
    pub fn is_anonymous(&self) -> bool {
        self.user_id == ANONYMOUS_USER_ID
    }

    /// Coordinates of this version, for visible node versions.
    pub fn coords(&self) -> Option<Coords> {
        match &self.payload {
            Payload::Node { coords } => *coords,
            _ => None,
        }
    }
}

/// All stored versions of one element, ascending by version number.
///
/// Version numbers increase strictly but may have gaps (redacted versions
/// are removed from public dumps without renumbering the rest).
#[derive(Debug, Clone, PartialEq)]
pub struct ElementHistory {
    pub element_type: ElementType,
    pub element_id: u64,
    pub versions: Vec<RawVersion>,
}

impl ElementHistory {
    /// The highest stored version record.
    pub fn latest(&self) -> &RawVersion {
        self.versions.last().expect("history holds at least one version")
    }

    pub fn max_version(&self) -> u32 {
        self.latest().version
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }
}

/// Errors raised while reading or regrouping a history stream.
#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input at byte {position}: {reason}")]
    MalformedInput { position: u64, reason: String },
    #[error("missing required attribute `{attribute}` at byte {position}")]
    MissingAttribute { position: u64, attribute: &'static str },
    #[error("out-of-order input: {element_type} {element_id} reappeared or its versions decreased")]
    OutOfOrderInput {
        element_type: ElementType,
        element_id: u64,
    },
}
