//! Code for Key Calculation (CKC) key tree.
//!
//! The server only ships the group key. On join it is refreshed as
//! `f(AK_G)` and unicast to the newcomer under its individual key; on leave
//! a fresh group key is encrypted once per cover subtree. Every other key on
//! an affected path is recomputed by members as `f(AK_G XOR code)`.

use rand::RngCore;

use crate::code::NodeCode;
use crate::crypto::{decrypt, encrypt, hash_f, hash_f_xor, random_key, KeyMaterial, KEY_WIDTH};
use crate::error::{Error, Result};
use crate::rekey::{
    Delivery, KeyPayload, MemberKeyView, RekeyCounters, RekeyOutput, TreeNotice,
};
use crate::tree::KeyTree;

/// Where the joiner's individual key came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    /// Derived locally on both sides from the accepted OTP credential.
    Authentication,
    /// Generated by the server and delivered over a secure channel.
    ServerGenerated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkcTree {
    tree: KeyTree,
    epoch: u64,
}

impl CkcTree {
    pub fn new(root: NodeCode, group_key: KeyMaterial) -> Self {
        Self {
            tree: KeyTree::new(root, group_key),
            epoch: 0,
        }
    }

    /// Tree with explicit leaf codes; middle keys are `f(AK_G XOR code)`.
    pub fn from_layout(
        root: NodeCode,
        group_key: KeyMaterial,
        leaves: Vec<(String, NodeCode, KeyMaterial)>,
    ) -> Result<Self> {
        let tree = KeyTree::from_layout(root, group_key, leaves, |c| hash_f_xor(&group_key, c))?;
        Ok(Self { tree, epoch: 0 })
    }

    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The view a member holds right after the tree was built.
    pub fn initial_view(&self, member: &str) -> Option<MemberKeyView> {
        Some(MemberKeyView {
            member: member.to_owned(),
            root: self.tree.root().clone(),
            leaf: self.tree.leaf_of(member)?.clone(),
            keys: self.tree.path_keys(member)?,
            epoch: self.epoch,
        })
    }

    pub fn join<R: RngCore>(
        &mut self,
        member: &str,
        individual_key: KeyMaterial,
        source: KeySource,
        rng: &mut R,
    ) -> Result<RekeyOutput> {
        let group_key = hash_f(&self.tree.group_key());
        let ins = self.tree.insert(member, individual_key, rng)?;
        let root = self.tree.root().clone();
        self.tree.set_key(&root, group_key);
        for code in ins.parent.prefixes_from(root.len() + 1) {
            self.tree.set_key(&code, hash_f_xor(&group_key, &code)?);
        }
        self.epoch += 1;

        let mut plain = group_key.0.to_vec();
        plain.extend_from_slice(ins.joiner_leaf.as_str().as_bytes());
        let payload = KeyPayload {
            delivery: Delivery::Unicast(member.to_owned()),
            under: ins.joiner_leaf.clone(),
            target: root.clone(),
            ciphertext: encrypt(&individual_key, &plain),
            send: 0,
            key_used: individual_key,
        };
        let generated = u32::from(source == KeySource::ServerGenerated);
        let counters = RekeyCounters {
            key_generations: 1 + generated,
            encryptions: 1,
            unicast_sends: 1,
            multicast_sends: 0,
            individual_keys: generated,
            rekey_cost: 1 + generated,
        };
        Ok(RekeyOutput {
            epoch: self.epoch,
            root,
            counters,
            payloads: vec![payload],
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
        let group_key = random_key(rng);
        self.tree.set_key(&root, group_key);

        let payloads: Vec<KeyPayload> = removal
            .cover
            .iter()
            .enumerate()
            .map(|(i, (code, key))| KeyPayload {
                delivery: Delivery::Multicast,
                under: code.clone(),
                target: root.clone(),
                ciphertext: encrypt(key, &group_key.0),
                send: i as u32,
                key_used: *key,
            })
            .collect();
        for code in removal.parent.prefixes_from(root.len() + 1) {
            if code == removal.parent {
                break;
            }
            self.tree.set_key(&code, hash_f_xor(&group_key, &code)?);
        }
        self.epoch += 1;

        let sends = payloads.len() as u32;
        Ok(RekeyOutput {
            epoch: self.epoch,
            root,
            counters: RekeyCounters {
                key_generations: 1,
                encryptions: sends,
                unicast_sends: 0,
                multicast_sends: sends,
                individual_keys: 0,
                rekey_cost: removal.depth as u32,
            },
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

/// The joiner's side: open the unicast and derive every key on its path.
pub fn joiner_view(
    member: &str,
    individual_key: KeyMaterial,
    out: &RekeyOutput,
) -> Result<MemberKeyView> {
    let payload = out
        .unicasts()
        .find(|p| p.delivery == Delivery::Unicast(member.to_owned()))
        .ok_or(Error::Malformed("no unicast for joiner"))?;
    let plain = decrypt(&individual_key, &payload.ciphertext)?;
    if plain.len() <= KEY_WIDTH {
        return Err(Error::Malformed("join unicast too short"));
    }
    let group_key = KeyMaterial::from_slice(&plain[..KEY_WIDTH])?;
    let leaf_str =
        std::str::from_utf8(&plain[KEY_WIDTH..]).map_err(|_| Error::Malformed("leaf code"))?;
    let leaf = NodeCode::parse(leaf_str)?;
    let mut keys = std::collections::BTreeMap::new();
    keys.insert(out.root.clone(), group_key);
    for code in leaf.prefixes_from(out.root.len() + 1) {
        if code == leaf {
            break;
        }
        let k = hash_f_xor(&group_key, &code)?;
        keys.insert(code, k);
    }
    keys.insert(leaf.clone(), individual_key);
    Ok(MemberKeyView {
        member: member.to_owned(),
        root: out.root.clone(),
        leaf,
        keys,
        epoch: out.epoch,
    })
}

/// Decodes the join unicast into (group key, leaf code). Helper for tests
/// and trace inspection.
pub fn open_join_unicast(
    individual_key: &KeyMaterial,
    payload: &KeyPayload,
) -> Result<(KeyMaterial, NodeCode)> {
    let plain = decrypt(individual_key, &payload.ciphertext)?;
    let group_key = KeyMaterial::from_slice(&plain[..KEY_WIDTH])?;
    let leaf = std::str::from_utf8(&plain[KEY_WIDTH..])
        .map_err(|_| Error::Malformed("leaf code"))
        .and_then(NodeCode::parse)?;
    Ok((group_key, leaf))
}

/// Existing member's side of a join. Returns the number of keys replaced or
/// added (0 if the event was already applied).
pub fn member_refresh_join(view: &mut MemberKeyView, out: &RekeyOutput) -> Result<usize> {
    let TreeNotice::Join { parent, .. } = &out.notice else {
        return Err(Error::Protocol("expected a join notice".into()));
    };
    if !view.begin(out.epoch)? {
        return Ok(0);
    }
    let group_key = hash_f(&view.group_key());
    view.keys.insert(view.root.clone(), group_key);
    let mut changed = 1;
    view.apply_split(&out.notice);
    for code in parent.prefixes_from(view.root.len() + 1) {
        if code.is_prefix_of(&view.leaf) && code != view.leaf {
            view.keys.insert(code.clone(), hash_f_xor(&group_key, &code)?);
            changed += 1;
        }
    }
    view.epoch = out.epoch;
    Ok(changed)
}

/// Remaining member's side of a leave.
pub fn member_refresh_leave(view: &mut MemberKeyView, out: &RekeyOutput) -> Result<()> {
    let TreeNotice::Leave { leaver, parent, .. } = &out.notice else {
        return Err(Error::Protocol("expected a leave notice".into()));
    };
    if *leaver == view.member {
        return Err(Error::NoCoverKey(view.member.clone()));
    }
    if !view.begin(out.epoch)? {
        return Ok(());
    }
    // highest cover key first: cover payloads are listed bottom-up
    let payload = out
        .multicasts()
        .filter(|p| view.keys.contains_key(&p.under))
        .min_by_key(|p| p.under.len())
        .ok_or_else(|| Error::NoCoverKey(view.member.clone()))?;
    let plain = decrypt(&view.keys[&payload.under], &payload.ciphertext)?;
    let group_key = KeyMaterial::from_slice(&plain)?;

    view.apply_promotion(&out.notice);
    view.keys.insert(view.root.clone(), group_key);
    for code in parent.prefixes_from(view.root.len() + 1) {
        if code == *parent {
            break;
        }
        if code.is_prefix_of(&view.leaf) {
            view.keys.insert(code.clone(), hash_f_xor(&group_key, &code)?);
        }
    }
    view.epoch = out.epoch;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;
    use std::collections::BTreeMap;

    fn grow(n: usize, seed: u64) -> (CkcTree, BTreeMap<String, MemberKeyView>, crate::crypto::SimRng) {
        let mut rng = seeded_rng(seed);
        let mut t = CkcTree::new(NodeCode::root(), random_key(&mut rng));
        let mut views: BTreeMap<String, MemberKeyView> = BTreeMap::new();
        for i in 0..n {
            let id = format!("u{i}");
            let k = random_key(&mut rng);
            let out = t.join(&id, k, KeySource::Authentication, &mut rng).unwrap();
            for v in views.values_mut() {
                member_refresh_join(v, &out).unwrap();
            }
            views.insert(id.clone(), joiner_view(&id, k, &out).unwrap());
        }
        (t, views, rng)
    }

    fn assert_consistent(t: &CkcTree, views: &BTreeMap<String, MemberKeyView>) {
        assert_eq!(t.tree().len(), views.len());
        for (m, v) in views {
            assert_eq!(Some(&v.keys), t.tree().path_keys(m).as_ref(), "view of {m}");
            assert!(v.codes_match_path());
        }
    }

    #[test]
    fn join_counters_and_consistency() {
        for n in 2..=33 {
            let (t, views, _) = grow(n, n as u64);
            assert_consistent(&t, &views);
        }
        let (mut t, _, mut rng) = grow(7, 1);
        let out = t
            .join("x", random_key(&mut rng), KeySource::Authentication, &mut rng)
            .unwrap();
        assert_eq!(
            out.counters,
            RekeyCounters {
                key_generations: 1,
                encryptions: 1,
                unicast_sends: 1,
                multicast_sends: 0,
                individual_keys: 0,
                rekey_cost: 1
            }
        );
        let out = t
            .join("y", random_key(&mut rng), KeySource::ServerGenerated, &mut rng)
            .unwrap();
        assert_eq!(out.counters.key_generations, 2);
        assert_eq!(out.counters.rekey_cost, 2);
    }

    #[test]
    fn off_path_member_only_changes_group_key() {
        let (mut t, mut views, mut rng) = grow(7, 2);
        let out = t
            .join("u7", random_key(&mut rng), KeySource::Authentication, &mut rng)
            .unwrap();
        let TreeNotice::Join { parent, .. } = &out.notice else {
            unreachable!()
        };
        for (m, v) in views.iter_mut() {
            let before = v.clone();
            let changed = member_refresh_join(v, &out).unwrap();
            let on_path = parent
                .prefixes_from(v.root.len() + 1)
                .any(|c| c.is_prefix_of(&before.leaf));
            if !on_path {
                assert_eq!(changed, 1, "{m}");
                let diff = before.keys.iter().filter(|(c, k)| v.keys[*c] != **k).count();
                assert_eq!(diff, 1);
            }
            // idempotent
            let again = v.clone();
            assert_eq!(member_refresh_join(v, &out).unwrap(), 0);
            assert_eq!(*v, again);
        }
    }

    #[test]
    fn leave_from_balanced_eight() {
        let (mut t, mut views, mut rng) = grow(8, 3);
        let leaver = views.remove("u5").unwrap();
        let out = t.leave("u5", &mut rng).unwrap();
        assert_eq!(out.counters.key_generations, 1);
        assert_eq!(out.counters.encryptions, 3);
        assert_eq!(out.counters.multicast_sends, 3);
        assert_eq!(out.counters.rekey_cost, 3);
        for v in views.values_mut() {
            member_refresh_leave(v, &out).unwrap();
        }
        assert_consistent(&t, &views);
        for p in &out.payloads {
            for k in leaver.keys.values() {
                assert!(decrypt(k, &p.ciphertext).is_err());
            }
        }
        let mut l = leaver.clone();
        assert!(member_refresh_leave(&mut l, &out).is_err());
    }

    #[test]
    fn leave_until_empty_stays_consistent() {
        let (mut t, mut views, mut rng) = grow(12, 4);
        let order = ["u3", "u0", "u11", "u6", "u1", "u9", "u2", "u10", "u4", "u8", "u7"];
        for m in order {
            views.remove(m);
            let out = t.leave(m, &mut rng).unwrap();
            for v in views.values_mut() {
                member_refresh_leave(v, &out).unwrap();
            }
            assert_consistent(&t, &views);
        }
        let out = t.leave("u5", &mut rng).unwrap();
        assert!(out.payloads.is_empty());
        assert!(t.tree().is_empty());
    }

    #[test]
    fn errors() {
        let (mut t, _, mut rng) = grow(3, 5);
        assert!(matches!(
            t.join("u1", random_key(&mut rng), KeySource::Authentication, &mut rng),
            Err(Error::DuplicateMember(_))
        ));
        assert!(matches!(t.leave("zz", &mut rng), Err(Error::UnknownMember(_))));
    }
}
