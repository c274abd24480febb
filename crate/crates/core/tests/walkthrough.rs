use craw_core::ckc::{self, CkcTree, KeySource};
use craw_core::crypto::{hash_f, hash_f_xor, random_key, seeded_rng};
use craw_core::NodeCode;

fn code(s: &str) -> NodeCode {
    NodeCode::parse(s).unwrap()
}

/// Seven members under root 15, u7 alone at 1578, u8 joins.
#[test]
fn join_into_seven_member_area() {
    let mut rng = seeded_rng(15);
    let ak = random_key(&mut rng);
    let leaves = [
        ("u1", "15111"),
        ("u2", "15112"),
        ("u3", "15121"),
        ("u4", "15122"),
        ("u5", "15711"),
        ("u6", "15712"),
        ("u7", "1578"),
    ]
    .iter()
    .map(|(m, c)| (m.to_string(), code(c), random_key(&mut rng)))
    .collect();
    let mut t = CkcTree::from_layout(code("15"), ak, leaves).unwrap();
    let mut views: Vec<_> = ["u1", "u5", "u7"].iter().map(|m| t.initial_view(m).unwrap()).collect();

    let k8 = random_key(&mut rng);
    let out = t.join("u8", k8, KeySource::Authentication, &mut rng).unwrap();
    let ak2 = t.tree().group_key();
    assert_eq!(ak2, hash_f(&ak));

    let unicast: Vec<_> = out.unicasts().collect();
    assert_eq!(unicast.len(), 1);
    let (gk, leaf) = ckc::open_join_unicast(&k8, unicast[0]).unwrap();
    assert_eq!(gk, ak2);
    assert_eq!(leaf.parent(), Some(code("1578")));
    assert_eq!(t.tree().leaf_of("u8"), Some(&leaf));

    let k58 = hash_f_xor(&ak2, &code("157")).unwrap();
    let k78 = hash_f_xor(&ak2, &code("1578")).unwrap();
    assert_eq!(t.tree().key_at(&code("157")), Some(k58));
    assert_eq!(t.tree().key_at(&code("1578")), Some(k78));

    for v in &mut views {
        ckc::member_refresh_join(v, &out).unwrap();
        assert_eq!(v.keys[&code("15")], ak2);
    }
    assert_eq!(views[1].keys[&code("157")], k58);
    assert_eq!(views[2].keys[&code("1578")], k78);
    assert!(!views[0].keys.contains_key(&code("157")));

    let u8 = ckc::joiner_view("u8", k8, &out).unwrap();
    assert_eq!(u8.keys[&code("157")], k58);
    assert_eq!(u8.keys[&code("1578")], k78);
    assert_eq!(out.counters.multicast_sends, 0);
}
