use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Digit string naming a key-tree node. A child's code is its parent's code
/// followed by one digit, so the prefixes of a code spell out the path to
/// the root.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeCode(String);

impl NodeCode {
    pub fn parse(s: &str) -> Result<Self> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::InvalidCode(s.to_owned()));
        }
        Ok(Self(s.to_owned()))
    }

    pub fn root() -> Self {
        Self("1".to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn child(&self, digit: u8) -> NodeCode {
        debug_assert!(digit < 10);
        let mut s = self.0.clone();
        s.push(char::from(b'0' + digit));
        NodeCode(s)
    }

    /// Parent code, obtained by deleting the rightmost digit.
    pub fn parent(&self) -> Option<NodeCode> {
        (self.0.len() > 1).then(|| NodeCode(self.0[..self.0.len() - 1].to_owned()))
    }

    pub fn last_digit(&self) -> u8 {
        self.0.as_bytes()[self.0.len() - 1] - b'0'
    }

    /// True if `self` is `other` or one of its ancestors.
    pub fn is_prefix_of(&self, other: &NodeCode) -> bool {
        other.0.starts_with(&self.0)
    }

    /// All prefixes from the shortest (root) to `self` inclusive, starting
    /// at length `root_len`.
    pub fn prefixes_from(&self, root_len: usize) -> impl Iterator<Item = NodeCode> + '_ {
        (root_len..=self.0.len()).map(move |l| NodeCode(self.0[..l].to_owned()))
    }

    /// Deletes the digit at `index`. Used when a subtree is promoted one level.
    pub fn delete_digit_at(&self, index: usize) -> NodeCode {
        let mut s = self.0.clone();
        s.remove(index);
        NodeCode(s)
    }
}

impl TryFrom<String> for NodeCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        NodeCode::parse(&s)
    }
}

impl From<NodeCode> for String {
    fn from(c: NodeCode) -> String {
        c.0
    }
}

impl fmt::Display for NodeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for NodeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeCode({})", self.0)
    }
}
