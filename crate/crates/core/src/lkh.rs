//! Logical Key Hierarchy baseline.
//!
//! Every key on the affected path is regenerated at random and pushed down
//! the tree encrypted under child keys. Node codes here are positional
//! labels only; nothing is derived from them.

use rand::RngCore;

use crate::code::NodeCode;
use crate::crypto::{encrypt, random_key, KeyMaterial};
use crate::error::Result;
use crate::rekey::{Delivery, KeyPayload, MemberKeyView, RekeyCounters, RekeyOutput, TreeNotice};
use crate::tree::KeyTree;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LkhTree {
    tree: KeyTree,
    epoch: u64,
}

impl LkhTree {
    pub fn new(root: NodeCode, group_key: KeyMaterial) -> Self {
        Self {
            tree: KeyTree::new(root, group_key),
            epoch: 0,
        }
    }

    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn initial_view(&self, member: &str) -> Option<MemberKeyView> {
        Some(MemberKeyView {
            member: member.to_owned(),
            root: self.tree.root().clone(),
            leaf: self.tree.leaf_of(member)?.clone(),
            keys: self.tree.path_keys(member)?,
            epoch: self.epoch,
        })
    }

    /// Encrypts each of `changed` (bottom-up) under both of its children.
    /// With `one_send_per_node` the pair travels in one multicast send.
    fn push_down(
        &self,
        changed: &[NodeCode],
        one_send_per_node: bool,
        payloads: &mut Vec<KeyPayload>,
        counters: &mut RekeyCounters,
    ) {
        for code in changed {
            let key = self.tree.key_at(code).expect("changed node exists");
            let children = self.tree.children(code);
            if one_send_per_node && !children.is_empty() {
                counters.multicast_sends += 1;
            }
            for child in children {
                let under = self.tree.key_at(&child).expect("child exists");
                payloads.push(KeyPayload {
                    delivery: Delivery::Multicast,
                    under: child,
                    target: code.clone(),
                    ciphertext: encrypt(&under, &key.0),
                    send: counters.multicast_sends + counters.unicast_sends,
                    key_used: under,
                });
                counters.encryptions += 1;
                if !one_send_per_node {
                    counters.multicast_sends += 1;
                }
            }
        }
    }

    pub fn join<R: RngCore>(
        &mut self,
        member: &str,
        individual_key: KeyMaterial,
        rng: &mut R,
    ) -> Result<RekeyOutput> {
        let ins = self.tree.insert(member, individual_key, rng)?;
        let root = self.tree.root().clone();
        let mut changed: Vec<NodeCode> = ins.parent.prefixes_from(root.len()).collect();
        changed.reverse();
        for code in &changed {
            self.tree.set_key(code, random_key(rng));
        }
        self.epoch += 1;

        let mut counters = RekeyCounters {
            key_generations: changed.len() as u32,
            individual_keys: 1,
            rekey_cost: changed.len() as u32 + 1,
            ..Default::default()
        };
        let mut payloads = Vec::new();
        // chained unicast to the newcomer: each key under the one below it
        let mut under = ins.joiner_leaf.clone();
        let mut under_key = individual_key;
        for code in &changed {
            let key = self.tree.key_at(code).expect("changed");
            payloads.push(KeyPayload {
                delivery: Delivery::Unicast(member.to_owned()),
                under: under.clone(),
                target: code.clone(),
                ciphertext: encrypt(&under_key, &key.0),
                send: counters.unicast_sends,
                key_used: under_key,
            });
            counters.encryptions += 1;
            counters.unicast_sends += 1;
            under = code.clone();
            under_key = key;
        }
        self.push_down(&changed, true, &mut payloads, &mut counters);

        Ok(RekeyOutput {
            epoch: self.epoch,
            root,
            counters,
            payloads,
            notice: TreeNotice::Join {
                joiner: member.to_owned(),
                joiner_leaf: ins.joiner_leaf,
                parent: ins.parent,
                split: ins.split,
            },
        })
    }

    pub fn leave<R: RngCore>(&mut self, member: &str, rng: &mut R) -> Result<RekeyOutput> {
        let removal = self.tree.remove(member)?;
        let root = self.tree.root().clone();
        let mut changed: Vec<NodeCode> = removal
            .parent
            .prefixes_from(root.len())
            .filter(|c| *c != removal.parent || *c == root)
            .collect();
        changed.reverse();
        for code in &changed {
            self.tree.set_key(code, random_key(rng));
        }
        self.epoch += 1;

        let mut counters = RekeyCounters {
            key_generations: changed.len() as u32,
            rekey_cost: removal.depth as u32,
            ..Default::default()
        };
        let mut payloads = Vec::new();
        if !self.tree.is_empty() {
            self.push_down(&changed, false, &mut payloads, &mut counters);
            // The new group key also goes straight to the two subtrees that
            // flanked the removed parent.
            if removal.parent != root {
                let group_key = self.tree.group_key();
                let flank = removal.parent.parent().and_then(|gp| {
                    self.tree
                        .children(&gp)
                        .into_iter()
                        .find(|c| *c != removal.parent)
                });
                for code in std::iter::once(removal.parent.clone()).chain(flank) {
                    let under = self.tree.key_at(&code).expect("flank exists");
                    payloads.push(KeyPayload {
                        delivery: Delivery::Multicast,
                        under: code,
                        target: root.clone(),
                        ciphertext: encrypt(&under, &group_key.0),
                        send: counters.multicast_sends,
                        key_used: under,
                    });
                    counters.encryptions += 1;
                    counters.multicast_sends += 1;
                }
            }
        }

        Ok(RekeyOutput {
            epoch: self.epoch,
            root,
            counters,
            payloads,
            notice: TreeNotice::Leave {
                leaver: member.to_owned(),
                parent: removal.parent,
                promoted: removal.promoted,
                merged_into_root: removal.merged_into_root,
            },
        })
    }
}

/// The joiner's side: follow the unicast chain from the individual key.
pub fn joiner_view(
    member: &str,
    individual_key: KeyMaterial,
    out: &RekeyOutput,
) -> Result<MemberKeyView> {
    let TreeNotice::Join { joiner_leaf, .. } = &out.notice else {
        return Err(crate::Error::Protocol("expected a join notice".into()));
    };
    let mut view = MemberKeyView {
        member: member.to_owned(),
        root: out.root.clone(),
        leaf: joiner_leaf.clone(),
        keys: [(joiner_leaf.clone(), individual_key)].into_iter().collect(),
        epoch: out.epoch,
    };
    view.absorb_payloads(
        out.unicasts()
            .filter(|p| p.delivery == Delivery::Unicast(member.to_owned())),
    )?;
    Ok(view)
}

/// Existing member's side of a join or leave.
pub fn member_refresh(view: &mut MemberKeyView, out: &RekeyOutput) -> Result<u32> {
    if let TreeNotice::Leave { leaver, .. } = &out.notice {
        if *leaver == view.member {
            return Err(crate::Error::Protocol("leaver cannot refresh".into()));
        }
    }
    if !view.begin(out.epoch)? {
        return Ok(0);
    }
    view.apply_split(&out.notice);
    view.apply_promotion(&out.notice);
    if let TreeNotice::Join {
        split: Some((occupant, old, _)),
        ..
    } = &out.notice
    {
        // the split leaf's old position is now an internal node
        if *occupant == view.member {
            view.keys.remove(old);
        }
    }
    let n = view.absorb_payloads(out.multicasts())?;
    view.epoch = out.epoch;
    Ok(n)
}
