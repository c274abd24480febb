//! Binary key-tree shape shared by the CKC and LKH schemes.
//!
//! Nodes are addressed by [`NodeCode`]; the root holds the group key and
//! members sit at leaves. This module only maintains structure and stored
//! keys. How keys are refreshed is up to the scheme on top.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::Serialize;

use crate::code::NodeCode;
use crate::crypto::{random_digit, KeyMaterial, KEY_WIDTH};
use crate::error::{Error, Result};
use crate::MemberId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub key: KeyMaterial,
    pub member: Option<MemberId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyTree {
    root: NodeCode,
    nodes: BTreeMap<NodeCode, TreeNode>,
    leaves: BTreeMap<MemberId, NodeCode>,
}

/// Where a new member lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Insertion {
    /// Parent of the new leaf: the root, or the former code of a split leaf.
    pub parent: NodeCode,
    pub joiner_leaf: NodeCode,
    /// Occupant of the split leaf with its old and new leaf codes.
    pub split: Option<(MemberId, NodeCode, NodeCode)>,
}

/// Structural outcome of removing a member, expressed in pre-removal codes
/// unless noted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Removal {
    pub leaver_leaf: NodeCode,
    pub parent: NodeCode,
    /// The leaver's sibling, if any, before promotion.
    pub sibling: Option<NodeCode>,
    /// Sibling keys along the leaver's root path, bottom-up, pre-removal codes.
    pub cover: Vec<(NodeCode, KeyMaterial)>,
    /// Code prefix rewrite applied to the promoted subtree: every code with
    /// prefix `from` had the digit at index `from.len() - 1` deleted.
    pub promoted: Option<NodeCode>,
    /// True when the sibling was internal and merged into the root.
    pub merged_into_root: bool,
    /// Depth of the leaver's leaf before removal.
    pub depth: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct DumpEntry {
    pub code: String,
    pub key: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member: Option<MemberId>,
}

impl KeyTree {
    pub fn new(root: NodeCode, group_key: KeyMaterial) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            root.clone(),
            TreeNode {
                key: group_key,
                member: None,
            },
        );
        Self {
            root,
            nodes,
            leaves: BTreeMap::new(),
        }
    }

    /// Builds a tree from explicit leaf positions. Internal nodes are the
    /// strict prefixes of the leaf codes and get keys from `internal_key`.
    pub fn from_layout(
        root: NodeCode,
        group_key: KeyMaterial,
        leaves: Vec<(MemberId, NodeCode, KeyMaterial)>,
        mut internal_key: impl FnMut(&NodeCode) -> Result<KeyMaterial>,
    ) -> Result<Self> {
        let mut tree = Self::new(root.clone(), group_key);
        for (member, leaf, key) in leaves {
            if !root.is_prefix_of(&leaf) || leaf == root {
                return Err(Error::InvalidCode(leaf.to_string()));
            }
            if tree.leaves.contains_key(&member) {
                return Err(Error::DuplicateMember(member));
            }
            for code in leaf.prefixes_from(root.len() + 1) {
                if code == leaf {
                    break;
                }
                if let std::collections::btree_map::Entry::Vacant(e) = tree.nodes.entry(code) {
                    let key = internal_key(e.key())?;
                    e.insert(TreeNode { key, member: None });
                }
            }
            tree.nodes.insert(
                leaf.clone(),
                TreeNode {
                    key,
                    member: Some(member.clone()),
                },
            );
            tree.leaves.insert(member, leaf);
        }
        tree.check_shape()?;
        Ok(tree)
    }

    pub fn root(&self) -> &NodeCode {
        &self.root
    }

    pub fn group_key(&self) -> KeyMaterial {
        self.nodes[&self.root].key
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn contains(&self, member: &str) -> bool {
        self.leaves.contains_key(member)
    }

    pub fn members(&self) -> impl Iterator<Item = &MemberId> {
        self.leaves.keys()
    }

    pub fn leaf_of(&self, member: &str) -> Option<&NodeCode> {
        self.leaves.get(member)
    }

    pub fn key_at(&self, code: &NodeCode) -> Option<KeyMaterial> {
        self.nodes.get(code).map(|n| n.key)
    }

    pub fn node(&self, code: &NodeCode) -> Option<&TreeNode> {
        self.nodes.get(code)
    }

    pub(crate) fn set_key(&mut self, code: &NodeCode, key: KeyMaterial) {
        self.nodes
            .get_mut(code)
            .expect("set_key on a code that is in the tree")
            .key = key;
    }

    pub fn depth(&self, code: &NodeCode) -> usize {
        code.len() - self.root.len()
    }

    pub fn children(&self, code: &NodeCode) -> Vec<NodeCode> {
        (0..10u8)
            .map(|d| code.child(d))
            .filter(|c| self.nodes.contains_key(c))
            .collect()
    }

    fn child_digits(&self, code: &NodeCode) -> Vec<u8> {
        self.children(code).iter().map(NodeCode::last_digit).collect()
    }

    /// Codes from the root down to and including the member's leaf.
    pub fn path(&self, member: &str) -> Option<Vec<NodeCode>> {
        let leaf = self.leaves.get(member)?;
        Some(leaf.prefixes_from(self.root.len()).collect())
    }

    /// Keys on the member's path, keyed by code. This is what an in-sync
    /// member view must hold.
    pub fn path_keys(&self, member: &str) -> Option<BTreeMap<NodeCode, KeyMaterial>> {
        Some(
            self.path(member)?
                .into_iter()
                .map(|c| {
                    let k = self.nodes[&c].key;
                    (c, k)
                })
                .collect(),
        )
    }

    pub fn max_depth(&self) -> usize {
        self.leaves
            .values()
            .map(|c| self.depth(c))
            .max()
            .unwrap_or(0)
    }

    /// Picks the position for a new member: a free slot under the root, or
    /// the shallowest leaf (smallest code on ties), which gets split.
    pub fn insertion_point(&self) -> Option<NodeCode> {
        if self.children(&self.root).len() < 2 {
            return None;
        }
        self.leaves
            .values()
            .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)))
            .cloned()
    }

    /// Adds a leaf for `member`. Keys on the new internal node (if any) are
    /// left as the split leaf's old key; the caller refreshes them.
    pub fn insert<R: RngCore>(
        &mut self,
        member: &str,
        individual_key: KeyMaterial,
        rng: &mut R,
    ) -> Result<Insertion> {
        if self.leaves.contains_key(member) {
            return Err(Error::DuplicateMember(member.to_owned()));
        }
        match self.insertion_point() {
            None => {
                let digit = random_digit(rng, &self.child_digits(&self.root))?;
                let leaf = self.root.child(digit);
                self.check_width(&leaf)?;
                self.put_leaf(member, leaf.clone(), individual_key);
                Ok(Insertion {
                    parent: self.root.clone(),
                    joiner_leaf: leaf,
                    split: None,
                })
            }
            Some(split_code) => {
                let occupant_digit = random_digit(rng, &[])?;
                let joiner_digit = random_digit(rng, &[occupant_digit])?;
                let occupant_leaf = split_code.child(occupant_digit);
                let joiner_leaf = split_code.child(joiner_digit);
                self.check_width(&joiner_leaf)?;
                let node = self.nodes.get_mut(&split_code).expect("leaf exists");
                let occupant = node.member.take().expect("split target is a leaf");
                let occupant_key = node.key;
                self.put_leaf(&occupant, occupant_leaf.clone(), occupant_key);
                self.put_leaf(member, joiner_leaf.clone(), individual_key);
                Ok(Insertion {
                    parent: split_code.clone(),
                    joiner_leaf,
                    split: Some((occupant, split_code, occupant_leaf)),
                })
            }
        }
    }

    fn check_width(&self, code: &NodeCode) -> Result<()> {
        if code.len() > KEY_WIDTH {
            Err(Error::CodeTooLong(code.clone()))
        } else {
            Ok(())
        }
    }

    fn put_leaf(&mut self, member: &str, leaf: NodeCode, key: KeyMaterial) {
        self.nodes.insert(
            leaf.clone(),
            TreeNode {
                key,
                member: Some(member.to_owned()),
            },
        );
        self.leaves.insert(member.to_owned(), leaf);
    }

    fn sibling_of(&self, code: &NodeCode) -> Option<NodeCode> {
        let parent = code.parent()?;
        self.children(&parent).into_iter().find(|c| c != code)
    }

    /// Removes `member`'s leaf, deletes its parent and promotes the sibling
    /// subtree into the parent's position. When the parent is the root the
    /// root stays; an internal sibling is merged into it instead.
    pub fn remove(&mut self, member: &str) -> Result<Removal> {
        let leaf = self
            .leaves
            .get(member)
            .cloned()
            .ok_or_else(|| Error::UnknownMember(member.to_owned()))?;
        let parent = leaf.parent().expect("leaves are below the root");
        let depth = self.depth(&leaf);

        let mut cover = Vec::new();
        let mut cursor = leaf.clone();
        while cursor != self.root {
            if let Some(sib) = self.sibling_of(&cursor) {
                cover.push((sib.clone(), self.nodes[&sib].key));
            }
            cursor = cursor.parent().expect("below root");
        }
        let sibling = self.sibling_of(&leaf);

        self.nodes.remove(&leaf);
        self.leaves.remove(member);

        let mut promoted = None;
        let mut merged_into_root = false;
        if let Some(sib) = &sibling {
            let sib_is_leaf = self.nodes[sib].member.is_some();
            if parent != self.root {
                self.nodes.remove(&parent);
                self.promote(sib);
                promoted = Some(sib.clone());
            } else if !sib_is_leaf {
                // the merged node's key is dropped; its children move up
                self.nodes.remove(sib);
                self.promote(sib);
                promoted = Some(sib.clone());
                merged_into_root = true;
            }
        }
        Ok(Removal {
            leaver_leaf: leaf,
            parent,
            sibling,
            cover,
            promoted,
            merged_into_root,
            depth,
        })
    }

    /// Rewrites every code under `from` by deleting the digit at
    /// `from.len() - 1`.
    fn promote(&mut self, from: &NodeCode) {
        let index = from.len() - 1;
        let moved: Vec<NodeCode> = self
            .nodes
            .keys()
            .filter(|c| from.is_prefix_of(c))
            .cloned()
            .collect();
        let mut relocated = Vec::with_capacity(moved.len());
        for code in moved {
            let node = self.nodes.remove(&code).expect("listed above");
            relocated.push((code.delete_digit_at(index), node));
        }
        for (code, node) in relocated {
            if let Some(m) = &node.member {
                self.leaves.insert(m.clone(), code.clone());
            }
            self.nodes.insert(code, node);
        }
    }

    pub fn structure_ok(&self) -> bool {
        self.check_shape().is_ok()
    }

    fn check_shape(&self) -> Result<()> {
        for (code, node) in &self.nodes {
            let kids = self.children(code).len();
            match &node.member {
                Some(m) => {
                    if kids != 0 || self.leaves.get(m) != Some(code) {
                        return Err(Error::Protocol(format!("bad leaf {code}")));
                    }
                }
                None if *code == self.root => {
                    if kids > 2 || (kids < 2 && self.leaves.len() > 1) {
                        return Err(Error::Protocol("root arity".into()));
                    }
                }
                None => {
                    if kids != 2 {
                        return Err(Error::Protocol(format!("node {code} has {kids} children")));
                    }
                }
            }
            if *code != self.root && !self.nodes.contains_key(&code.parent().unwrap_or_else(|| self.root.clone())) {
                return Err(Error::Protocol(format!("orphan {code}")));
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> Vec<DumpEntry> {
        self.nodes
            .iter()
            .map(|(code, node)| DumpEntry {
                code: code.to_string(),
                key: node.key.fingerprint(),
                member: node.member.clone(),
            })
            .collect()
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.dump()).expect("dump serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{random_key, seeded_rng};

    fn grow(n: usize, seed: u64) -> KeyTree {
        let mut rng = seeded_rng(seed);
        let mut t = KeyTree::new(NodeCode::root(), random_key(&mut rng));
        for i in 0..n {
            let k = random_key(&mut rng);
            t.insert(&format!("u{i}"), k, &mut rng).unwrap();
        }
        t
    }

    #[test]
    fn sequential_inserts_fill_level_by_level() {
        for k in 1..=5 {
            let n = 1usize << k;
            let t = grow(n, 7);
            assert!(t.structure_ok());
            assert!(t.members().all(|m| t.depth(t.leaf_of(m).unwrap()) == k));
        }
    }

    #[test]
    fn cover_of_balanced_leaf_has_depth_entries() {
        let mut t = grow(8, 3);
        let r = t.remove("u5").unwrap();
        assert_eq!(r.depth, 3);
        assert_eq!(r.cover.len(), 3);
        assert_eq!(t.len(), 7);
        assert!(t.structure_ok());
    }

    #[test]
    fn removal_down_to_empty_keeps_shape() {
        let mut t = grow(9, 4);
        for i in [3, 0, 8, 1, 7, 2, 6, 4, 5] {
            t.remove(&format!("u{i}")).unwrap();
            assert!(t.structure_ok(), "after removing u{i}");
        }
        assert!(t.is_empty());
        assert_eq!(t.dump().len(), 1);
    }

    #[test]
    fn duplicate_and_unknown_members() {
        let mut t = grow(2, 5);
        let mut rng = seeded_rng(0);
        assert!(matches!(
            t.insert("u0", random_key(&mut rng), &mut rng),
            Err(Error::DuplicateMember(_))
        ));
        assert!(matches!(t.remove("nobody"), Err(Error::UnknownMember(_))));
    }

    #[test]
    fn promoted_subtree_codes_shorten() {
        let mut t = grow(6, 9);
        let before = t.max_depth();
        // remove a depth-2 leaf whose sibling is internal or a leaf
        let victim = t
            .members()
            .find(|m| t.depth(t.leaf_of(m).unwrap()) == 2)
            .cloned()
            .unwrap();
        let r = t.remove(&victim).unwrap();
        if let Some(p) = &r.promoted {
            assert!(t.node(p).is_none() || t.node(&r.parent).is_some());
        }
        assert!(t.max_depth() <= before);
        assert!(t.structure_ok());
    }
}
