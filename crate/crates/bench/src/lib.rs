//! Fixtures shared by the benchmarks.

use craw_core::ckc::{CkcTree, KeySource};
use craw_core::crypto::{random_key, seeded_rng, SimRng};
use craw_core::lkh::LkhTree;
use craw_core::NodeCode;

pub fn member(i: usize) -> String {
    format!("m{i}")
}

/// CKC tree grown to `n` members by successive joins.
pub fn ckc_tree(n: usize, seed: u64) -> (CkcTree, SimRng) {
    let mut rng = seeded_rng(seed);
    let mut t = CkcTree::new(NodeCode::root(), random_key(&mut rng));
    for i in 0..n {
        let k = random_key(&mut rng);
        t.join(&member(i), k, KeySource::Authentication, &mut rng).expect("join");
    }
    (t, rng)
}

pub fn lkh_tree(n: usize, seed: u64) -> (LkhTree, SimRng) {
    let mut rng = seeded_rng(seed);
    let mut t = LkhTree::new(NodeCode::root(), random_key(&mut rng));
    for i in 0..n {
        let k = random_key(&mut rng);
        t.join(&member(i), k, &mut rng).expect("join");
    }
    (t, rng)
}
