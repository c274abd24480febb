#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use craw_core::crypto::{decrypt, hash_f, hash_f_xor, seeded_rng, KEY_WIDTH};
use craw_core::sim::Audit;
use craw_core::{KeyMaterial, NodeCode, Scenario};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

/// Random mixed join/leave/move script. Every event is valid for the member
/// state the script itself implies; per-member ordering is kept by the
/// simulator deferring events for busy members.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let n_areas = rng.gen_range(1..=3);
    let n_members = rng.gen_range(2..=32);
    let areas: Vec<String> = (0..n_areas).map(|i| ["A", "B", "C"][i].to_owned()).collect();
    let ids: Vec<String> = (0..n_members).map(|i| format!("m{i}")).collect();

    let mut at: BTreeMap<String, Option<usize>> = BTreeMap::new();
    let mut rosters = vec![Vec::new(); n_areas];
    for id in &ids {
        let place = if rng.gen_bool(0.6) { Some(rng.gen_range(0..n_areas)) } else { None };
        if let Some(a) = place {
            rosters[a].push(id.clone());
        }
        at.insert(id.clone(), place);
    }

    let mut events = Vec::new();
    let mut t = 0.5;
    for _ in 0..rng.gen_range(4..=24) {
        t += rng.gen_range(0.05..1.2);
        let id = ids.choose(&mut rng).unwrap().clone();
        let ev = match at[&id] {
            None => {
                let a = rng.gen_range(0..n_areas);
                at.insert(id.clone(), Some(a));
                json!({"at": t, "op": "join", "member": id, "area": areas[a]})
            }
            Some(a) if n_areas > 1 && rng.gen_bool(0.5) => {
                let mut b = rng.gen_range(0..n_areas - 1);
                if b >= a {
                    b += 1;
                }
                at.insert(id.clone(), Some(b));
                json!({"at": t, "op": "move", "member": id, "from": areas[a], "to": areas[b]})
            }
            Some(a) => {
                at.insert(id.clone(), None);
                json!({"at": t, "op": "leave", "member": id, "area": areas[a]})
            }
        };
        events.push(ev);
    }

    let areas: Vec<_> = areas
        .iter()
        .zip(&rosters)
        .map(|(id, members)| json!({"id": id, "members": members}))
        .collect();
    let members: Vec<_> = ids.iter().map(|id| json!({"id": id})).collect();
    let value = json!({
        "schema": "craw-scenario/v1",
        "name": format!("random-{seed}"),
        "seed": seed,
        "schemes": ["ckc_craw", "ckc_plain", "lkh"],
        // generous horizon so every deferred event and hand-off completes
        "horizon": t + 2.0 * 24.0,
        "delays": {"frame_interval": 0.4},
        "areas": areas,
        "members": members,
        "events": events,
        "audit": true,
    });
    Scenario::from_json(&value.to_string()).expect("generated scenario is valid")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub member: String,
    pub area: String,
    pub cipher: usize,
    pub content: bool,
    /// Cipher precedes a later membership of the member in that area.
    pub before_join: bool,
}

/// Offline key-knowledge oracle. Starting from every key a member ever held,
/// it closes under the derivations available to that member: the one-way
/// step `f(K)` on any key, the code step `f(K ^ code)` on any group key with
/// every code the member ever held, and opening any recorded key ciphertext
/// whose key is known. Derived keys are kept only when some area used them
/// as a group key or some ciphertext was sealed under them. A violation is a
/// ciphertext the member could open that was sent while it was not a member
/// of that area.
pub struct Oracle<'a> {
    audit: &'a Audit,
    group_keys: HashSet<KeyMaterial>,
    by_key: HashMap<KeyMaterial, Vec<usize>>,
    carried: Vec<Option<KeyMaterial>>,
}

impl<'a> Oracle<'a> {
    pub fn new(audit: &'a Audit) -> Self {
        let group_keys = audit.group_keys.values().flatten().copied().collect();
        let mut by_key: HashMap<KeyMaterial, Vec<usize>> = HashMap::new();
        let mut carried = Vec::with_capacity(audit.ciphers.len());
        for (i, c) in audit.ciphers.iter().enumerate() {
            by_key.entry(c.key).or_default().push(i);
            carried.push(if c.content {
                None
            } else {
                let plain = decrypt(&c.key, &c.ciphertext).expect("audit key opens its cipher");
                Some(KeyMaterial::from_slice(&plain[..KEY_WIDTH]).unwrap())
            });
        }
        Self {
            audit,
            group_keys,
            by_key,
            carried,
        }
    }

    pub fn closure(&self, start: &BTreeSet<KeyMaterial>, codes: &BTreeSet<NodeCode>) -> HashSet<KeyMaterial> {
        let mut known: HashSet<KeyMaterial> = start.iter().copied().collect();
        let mut work: Vec<KeyMaterial> = known.iter().copied().collect();
        while let Some(k) = work.pop() {
            let mut next = vec![hash_f(&k)];
            if self.group_keys.contains(&k) {
                next.extend(codes.iter().map(|c| hash_f_xor(&k, c).unwrap()));
            }
            // f-chains are unbounded; only keys that were ever used count
            next.retain(|d| self.group_keys.contains(d) || self.by_key.contains_key(d));
            let opened = self.by_key.get(&k).into_iter().flatten().filter_map(|&i| self.carried[i]);
            next.extend(opened);
            for n in next {
                if known.insert(n) {
                    work.push(n);
                }
            }
        }
        known
    }

    pub fn violations_for(
        &self,
        member: &str,
        start: &BTreeSet<KeyMaterial>,
        codes: &BTreeSet<NodeCode>,
    ) -> Vec<Violation> {
        let known = self.closure(start, codes);
        let mut out = Vec::new();
        for (i, c) in self.audit.ciphers.iter().enumerate() {
            if !known.contains(&c.key) || self.audit.is_member_at(member, &c.area, i) {
                continue;
            }
            let before_join = self
                .audit
                .intervals
                .get(&(member.to_owned(), c.area.clone()))
                .is_some_and(|spans| spans.iter().any(|&(s, _)| i < s));
            out.push(Violation {
                member: member.to_owned(),
                area: c.area.clone(),
                cipher: i,
                content: c.content,
                before_join,
            });
        }
        out
    }

    /// Every code the member held in any area.
    pub fn codes_of(&self, member: &str) -> BTreeSet<NodeCode> {
        self.audit
            .known_codes
            .iter()
            .filter(|((m, _), _)| m == member)
            .flat_map(|(_, c)| c.iter().cloned())
            .collect()
    }

    pub fn violations(&self) -> Vec<Violation> {
        self.audit
            .knowledge
            .iter()
            .flat_map(|(m, keys)| self.violations_for(m, keys, &self.codes_of(m)))
            .collect()
    }

    /// Same check for an adversary that knows every code the area ever used.
    pub fn violations_with_all_codes(&self) -> Vec<Violation> {
        let all: BTreeSet<NodeCode> = self.audit.codes.values().flatten().cloned().collect();
        self.audit
            .knowledge
            .iter()
            .flat_map(|(m, keys)| self.violations_for(m, keys, &all))
            .collect()
    }
}

/// One area per n in `sizes`, each seeded with n-1 members; at t=1 the n-th
/// member joins and at t=2 the first seeded member leaves.
pub fn tables_scenario(sizes: &[usize]) -> Scenario {
    let mut areas = Vec::new();
    let mut members = Vec::new();
    let mut events = Vec::new();
    for &n in sizes {
        let area = format!("T{n}");
        let roster: Vec<String> = (1..n).map(|i| format!("t{n}_{i}")).collect();
        let joiner = format!("t{n}_{n}");
        events.push(json!({"at": 1.0, "op": "join", "member": joiner, "area": area}));
        events.push(json!({"at": 2.0, "op": "leave", "member": roster[0], "area": area}));
        members.extend(roster.iter().chain([&joiner]).map(|id| json!({"id": id})));
        areas.push(json!({"id": area, "members": roster}));
    }
    let value = json!({
        "schema": "craw-scenario/v1",
        "name": "tables",
        "seed": 1,
        "schemes": ["ckc_craw", "ckc_plain", "lkh"],
        "horizon": 3.0,
        "areas": areas,
        "members": members,
        "events": events,
    });
    Scenario::from_json(&value.to_string()).unwrap()
}

/// Area A holds u1..u8, area B holds b1..b7; u8 moves A -> B at t=1 and u1
/// leaves A at t=2.2. Frames every 10 ms.
pub fn handoff_scenario() -> Scenario {
    let a: Vec<String> = (1..=8).map(|i| format!("u{i}")).collect();
    let b: Vec<String> = (1..=7).map(|i| format!("b{i}")).collect();
    let members: Vec<_> = a.iter().chain(&b).map(|id| json!({"id": id})).collect();
    let value = json!({
        "schema": "craw-scenario/v1",
        "name": "handoff",
        "seed": 1,
        "schemes": ["ckc_craw"],
        "horizon": 3.0,
        "delays": {"frame_interval": 0.01},
        "areas": [{"id": "A", "members": a}, {"id": "B", "members": b}],
        "members": members,
        "events": [
            {"at": 1.0, "op": "move", "member": "u8", "from": "A", "to": "B"},
            {"at": 2.2, "op": "leave", "member": "u1", "area": "A"},
        ],
    });
    Scenario::from_json(&value.to_string()).unwrap()
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// `kind src dst` per message, content frames left out.
pub fn kind_lines(out: &craw_core::SimOutput) -> Vec<String> {
    out.trace
        .iter()
        .filter(|m| m.kind != craw_core::MessageKind::ContentFrame)
        .map(|m| format!("{} {} {}", m.kind, m.src, m.dst))
        .collect()
}
