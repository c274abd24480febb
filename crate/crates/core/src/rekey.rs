//! Types shared by the re-keying schemes: counters, key payloads, the
//! structural notice attached to every event, and the member-side key view.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::code::NodeCode;
use crate::crypto::{decrypt, Ciphertext, KeyMaterial};
use crate::error::{Error, Result};
use crate::MemberId;

/// Per-event overhead counters.
///
/// `key_generations`, `encryptions`, `unicast_sends` and `multicast_sends`
/// follow the comparison-table conventions of each scheme. `individual_keys`
/// counts individual keys the server had to create for a joiner, and
/// `rekey_cost` is the summary cost: keys created per join, levels re-keyed
/// per leave.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RekeyCounters {
    pub key_generations: u32,
    pub encryptions: u32,
    pub unicast_sends: u32,
    pub multicast_sends: u32,
    pub individual_keys: u32,
    pub rekey_cost: u32,
}

impl AddAssign for RekeyCounters {
    fn add_assign(&mut self, o: Self) {
        self.key_generations += o.key_generations;
        self.encryptions += o.encryptions;
        self.unicast_sends += o.unicast_sends;
        self.multicast_sends += o.multicast_sends;
        self.individual_keys += o.individual_keys;
        self.rekey_cost += o.rekey_cost;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// CKC with the individual key taken from the one-time-password session.
    CkcCraw,
    /// CKC with a server-generated individual key.
    CkcPlain,
    Lkh,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::CkcCraw, Scheme::CkcPlain, Scheme::Lkh];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::CkcCraw => "ckc_craw",
            Scheme::CkcPlain => "ckc_plain",
            Scheme::Lkh => "lkh",
        }
    }

    /// Whether the individual key comes from authentication rather than
    /// being generated and shipped by the server.
    pub fn key_from_auth(self) -> bool {
        matches!(self, Scheme::CkcCraw)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Scenario(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Unicast(MemberId),
    Multicast,
}

/// One encrypted key on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPayload {
    pub delivery: Delivery,
    /// Tree position of the encrypting key.
    pub under: NodeCode,
    /// Tree position of the key carried.
    pub target: NodeCode,
    pub ciphertext: Ciphertext,
    /// Index of the network send this payload travels in.
    pub send: u32,
    /// Server-side record of the encrypting key, kept for auditing. Not
    /// part of what goes on the wire and never read by member code.
    pub key_used: KeyMaterial,
}

/// Structural change metadata. Members read only the parts that touch their
/// own path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNotice {
    Join {
        joiner: MemberId,
        joiner_leaf: NodeCode,
        /// Parent of the joiner's leaf.
        parent: NodeCode,
        /// Occupant of the split leaf, with old and new leaf codes.
        split: Option<(MemberId, NodeCode, NodeCode)>,
    },
    Leave {
        leaver: MemberId,
        parent: NodeCode,
        promoted: Option<NodeCode>,
        merged_into_root: bool,
    },
}

/// Everything the server emits for one membership event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RekeyOutput {
    pub epoch: u64,
    pub root: NodeCode,
    pub counters: RekeyCounters,
    pub payloads: Vec<KeyPayload>,
    pub notice: TreeNotice,
}

impl RekeyOutput {
    pub fn unicasts(&self) -> impl Iterator<Item = &KeyPayload> {
        self.payloads
            .iter()
            .filter(|p| matches!(p.delivery, Delivery::Unicast(_)))
    }

    pub fn multicasts(&self) -> impl Iterator<Item = &KeyPayload> {
        self.payloads
            .iter()
            .filter(|p| p.delivery == Delivery::Multicast)
    }
}

/// A member's local key store: one key per node on its leaf-to-root path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberKeyView {
    pub member: MemberId,
    pub root: NodeCode,
    pub leaf: NodeCode,
    pub keys: BTreeMap<NodeCode, KeyMaterial>,
    pub epoch: u64,
}

impl MemberKeyView {
    pub fn group_key(&self) -> KeyMaterial {
        self.keys[&self.root]
    }

    pub fn individual_key(&self) -> KeyMaterial {
        self.keys[&self.leaf]
    }

    /// Held codes are exactly the prefixes of the leaf code.
    pub fn codes_match_path(&self) -> bool {
        self.keys
            .keys()
            .cloned()
            .eq(self.leaf.prefixes_from(self.root.len()))
    }

    /// Returns false if the event was already applied.
    pub(crate) fn begin(&mut self, epoch: u64) -> Result<bool> {
        if epoch <= self.epoch {
            return Ok(false);
        }
        if epoch != self.epoch + 1 {
            return Err(Error::Protocol(format!(
                "{} at epoch {} missed events before {}",
                self.member, self.epoch, epoch
            )));
        }
        Ok(true)
    }

    /// Moves the occupant's leaf after a split.
    pub(crate) fn apply_split(&mut self, notice: &TreeNotice) {
        if let TreeNotice::Join {
            split: Some((occupant, old, new)),
            ..
        } = notice
        {
            if *occupant == self.member {
                let key = self.keys[old];
                self.keys.insert(new.clone(), key);
                self.leaf = new.clone();
            }
        }
    }

    /// Applies sibling promotion after a leave, if this member is inside the
    /// promoted subtree.
    pub(crate) fn apply_promotion(&mut self, notice: &TreeNotice) {
        let TreeNotice::Leave {
            parent,
            promoted: Some(from),
            merged_into_root,
            ..
        } = notice
        else {
            return;
        };
        if !from.is_prefix_of(&self.leaf) {
            return;
        }
        let dropped = if *merged_into_root { from } else { parent };
        self.keys.remove(dropped);
        let index = from.len() - 1;
        let moved: Vec<NodeCode> = self
            .keys
            .keys()
            .filter(|c| from.is_prefix_of(c))
            .cloned()
            .collect();
        let mut relocated = Vec::new();
        for c in moved {
            let k = self.keys.remove(&c).expect("listed");
            relocated.push((c.delete_digit_at(index), k));
        }
        self.keys.extend(relocated);
        self.leaf = self.leaf.delete_digit_at(index);
    }

    /// Decrypts the payloads addressed to this member's path, bottom-up,
    /// so keys recovered at one level unlock the next.
    pub(crate) fn absorb_payloads<'a>(
        &mut self,
        payloads: impl Iterator<Item = &'a KeyPayload>,
    ) -> Result<u32> {
        let mut absorbed = 0;
        for p in payloads {
            if !p.target.is_prefix_of(&self.leaf) {
                continue;
            }
            let Some(key) = self.keys.get(&p.under) else {
                continue;
            };
            let plain = decrypt(key, &p.ciphertext)?;
            self.keys
                .insert(p.target.clone(), KeyMaterial::from_slice(&plain)?);
            absorbed += 1;
        }
        Ok(absorbed)
    }
}
