//! Where CKC forward secrecy rests on code secrecy. Middle keys are
//! `f(group key ^ code)`, so anyone holding a past group key and a node's code
//! holds that node's key from that epoch.

use craw_core::ckc::{CkcTree, KeySource};
use craw_core::crypto::{decrypt, hash_f_xor, random_key, seeded_rng, KEY_WIDTH};
use craw_core::{KeyMaterial, NodeCode};

fn code(s: &str) -> NodeCode {
    NodeCode::parse(s).unwrap()
}

fn layout(leaves: &[(&str, &str)], seed: u64) -> CkcTree {
    let mut rng = seeded_rng(seed);
    let gk = random_key(&mut rng);
    let leaves = leaves
        .iter()
        .map(|(m, c)| (m.to_string(), code(c), random_key(&mut rng)))
        .collect();
    CkcTree::from_layout(code("1"), gk, leaves).unwrap()
}

/// Cover payloads of a leave the departed member can open with the group
/// keys and codes it saw while it was a member.
fn opened_by_leaver(
    out: &craw_core::RekeyOutput,
    group_keys: &[KeyMaterial],
    codes: &[NodeCode],
) -> Vec<KeyMaterial> {
    out.multicasts()
        .filter_map(|p| {
            group_keys
                .iter()
                .flat_map(|g| codes.iter().map(move |c| hash_f_xor(g, c).unwrap()))
                .find_map(|k| decrypt(&k, &p.ciphertext).ok())
        })
        .map(|plain| KeyMaterial::from_slice(&plain[..KEY_WIDTH]).unwrap())
        .collect()
}

#[test]
fn static_tree_leaver_opens_nothing() {
    let mut t = layout(
        &[
            ("u1", "1111"),
            ("u2", "1112"),
            ("u3", "1121"),
            ("u4", "1122"),
            ("u5", "1771"),
            ("u6", "1772"),
            ("u7", "1781"),
            ("u8", "1782"),
        ],
        1,
    );
    let known_gk = t.tree().group_key();
    let path: Vec<NodeCode> = t.tree().path("u8").unwrap();
    let mut rng = seeded_rng(2);
    let out = t.leave("u8", &mut rng).unwrap();
    assert_eq!(out.counters.multicast_sends, 3);
    assert!(opened_by_leaver(&out, &[known_gk], &path).is_empty());
}

#[test]
fn promotion_hands_a_leaver_a_cover_code() {
    let mut rng = seeded_rng(3);
    let mut t = layout(
        &[
            ("m9", "11711"),
            ("m10", "11712"),
            ("m15", "1177"),
            ("m16", "118"),
            ("a", "1811"),
            ("b", "1812"),
            ("c", "1881"),
            ("d", "1882"),
        ],
        4,
    );
    let mut seen_keys = vec![t.tree().group_key()];
    let mut seen_codes: Vec<NodeCode> = t.tree().path("m9").unwrap();

    // m16 leaves: subtree 117 takes over 11, m9 moves 11711 -> 1111 and m15
    // moves 1177 -> 117, a code m9 held as its grandparent
    t.leave("m16", &mut rng).unwrap();
    assert_eq!(t.tree().leaf_of("m9"), Some(&code("1111")));
    assert_eq!(t.tree().leaf_of("m15"), Some(&code("117")));
    seen_keys.push(t.tree().group_key());
    seen_codes.extend(t.tree().path("m9").unwrap());

    // a join splits the shallowest leaf, m15's, and node 117 gets
    // f(AK' ^ "117") under a group key m9 also receives
    t.join("m12", random_key(&mut rng), KeySource::Authentication, &mut rng).unwrap();
    assert!(t.tree().key_at(&code("117")).is_some());
    assert!(t.tree().node(&code("117")).unwrap().member.is_none());
    seen_keys.push(t.tree().group_key());

    let out = t.leave("m9", &mut rng).unwrap();
    assert!(out.multicasts().any(|p| p.under == code("117")));
    let fresh = t.tree().group_key();
    let opened = opened_by_leaver(&out, &seen_keys, &seen_codes);
    assert!(opened.contains(&fresh), "leaver recovers the post-leave group key");
}

#[test]
fn guessing_sibling_digits_breaks_a_static_leave() {
    // codes are short digit strings; a leaver that tries all ten digits next
    // to its own path finds the cover keys of a tree that never changed shape
    let mut t = layout(
        &[
            ("u1", "1111"),
            ("u2", "1112"),
            ("u3", "1121"),
            ("u4", "1122"),
            ("u5", "1771"),
            ("u6", "1772"),
            ("u7", "1781"),
            ("u8", "1782"),
        ],
        5,
    );
    let known_gk = t.tree().group_key();
    let mut guesses = Vec::new();
    for p in t.tree().path("u8").unwrap() {
        for d in 0..10 {
            guesses.push(p.child(d));
        }
    }
    let mut rng = seeded_rng(6);
    let out = t.leave("u8", &mut rng).unwrap();
    let fresh = t.tree().group_key();
    assert!(opened_by_leaver(&out, &[known_gk], &guesses).contains(&fresh));
}
