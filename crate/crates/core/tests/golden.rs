mod common;

use std::fs;

use common::{golden_dir, kind_lines};
use craw_core::{run, Scenario, Scheme};

fn check(name: &str) {
    let dir = golden_dir();
    let sc = Scenario::from_json(&fs::read_to_string(dir.join(format!("{name}.json"))).unwrap()).unwrap();
    let want: Vec<String> = fs::read_to_string(dir.join(format!("{name}.txt")))
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect();
    let got = kind_lines(&run(&sc, Scheme::CkcCraw).unwrap());
    assert_eq!(got, want, "{name} trace drifted");
}

#[test]
fn join_trace() {
    check("join");
}

#[test]
fn leave_trace() {
    check("leave");
}

#[test]
fn move_trace() {
    check("move");
}

#[test]
fn traces_are_stable_across_runs() {
    let sc = Scenario::from_json(&fs::read_to_string(golden_dir().join("move.json")).unwrap()).unwrap();
    let a = run(&sc, Scheme::CkcCraw).unwrap().trace_text();
    let b = run(&sc, Scheme::CkcCraw).unwrap().trace_text();
    assert_eq!(a, b);
}
