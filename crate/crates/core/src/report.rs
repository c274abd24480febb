//! Run bundles on disk and run-to-run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::entities::MainListEntry;
use crate::error::{Error, Result};
use crate::rekey::{RekeyCounters, Scheme};
use crate::scenario::Scenario;
use crate::sim::{MetricsLedger, SimOutput};
use crate::timing::{JoinMode, SimTime};

pub const CSV_HEADER: &str = "event_id,time,kind,scheme,area,keygen,enc,unicast,multicast";

pub const COST_DEFINITION: &str = "re-keying cost = keys the server must generate and deliver for the event: \
on join the new group key plus any server-made individual key (an individual key taken from \
authentication is free); on leave the number of tree levels re-keyed (depth of the leaver's leaf)";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Scenario(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedgerFile {
    scenario: String,
    runs: Vec<MetricsLedger>,
}

pub fn metrics_csv(outputs: &[SimOutput]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for out in outputs {
        for r in &out.ledger.rows {
            let c = r.counters;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.event_id, r.time, r.kind, r.scheme, r.area, c.key_generations, c.encryptions, c.unicast_sends, c.multicast_sends
            );
        }
    }
    s
}

pub fn trace_log(outputs: &[SimOutput]) -> String {
    let mut s = String::new();
    for out in outputs {
        let _ = writeln!(s, "# scheme {}", out.scheme);
        s.push_str(&out.trace_text());
    }
    s
}

pub fn mainlist_json(outputs: &[SimOutput]) -> String {
    let map: BTreeMap<String, Vec<&MainListEntry>> = outputs
        .iter()
        .map(|o| (o.scheme.to_string(), o.mainlist.entries().collect()))
        .collect();
    serde_json::to_string_pretty(&map).expect("main list serializes") + "\n"
}

fn secs(t: SimTime) -> String {
    t.to_string()
}

pub fn report_text(scenario: &Scenario, outputs: &[SimOutput]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", scenario.name);
    let _ = writeln!(s, "seed: {}", scenario.seed);
    let schemes: Vec<String> = outputs.iter().map(|o| o.scheme.to_string()).collect();
    let _ = writeln!(s, "schemes: {}", schemes.join(", "));
    let _ = writeln!(s);
    let _ = writeln!(s, "{COST_DEFINITION}");

    let _ = writeln!(s, "\n== counters per event ==");
    let _ = writeln!(
        s,
        "{:<10} {:>5} {:>10} {:<16} {:<6} {:<8} {:>4} {:>6} {:>4} {:>7} {:>9} {:>4}",
        "scheme", "event", "time", "kind", "area", "member", "n", "keygen", "enc", "unicast", "multicast", "cost"
    );
    for out in outputs {
        for r in &out.ledger.rows {
            let c = r.counters;
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>10} {:<16} {:<6} {:<8} {:>4} {:>6} {:>4} {:>7} {:>9} {:>4}",
                r.scheme,
                r.event_id,
                secs(r.time),
                r.kind,
                r.area,
                r.member,
                r.group_size,
                c.key_generations,
                c.encryptions,
                c.unicast_sends,
                c.multicast_sends,
                c.rekey_cost
            );
        }
    }

    let _ = writeln!(s, "\n== aggregate counters ==");
    let _ = writeln!(
        s,
        "{:<10} {:<16} {:>6} {:>6} {:>5} {:>7} {:>9} {:>5}",
        "scheme", "kind", "events", "keygen", "enc", "unicast", "multicast", "cost"
    );
    for out in outputs {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &out.ledger.rows {
            *counts.entry(&r.kind).or_default() += 1;
        }
        let agg = out.ledger.aggregate();
        let rows = agg
            .iter()
            .map(|(k, c)| (k.as_str(), counts[k.as_str()], *c))
            .chain(std::iter::once(("total", out.ledger.rows.len(), out.ledger.total())));
        for (kind, n, c) in rows {
            let _ = writeln!(
                s,
                "{:<10} {:<16} {:>6} {:>6} {:>5} {:>7} {:>9} {:>5}",
                out.scheme, kind, n, c.key_generations, c.encryptions, c.unicast_sends, c.multicast_sends, c.rekey_cost
            );
        }
    }

    let d = &scenario.delays;
    let _ = writeln!(s, "\n== timing ==");
    let _ = writeln!(
        s,
        "configured hand-off: t_probe {} + t_reauth {} + t_reassoc {} = {:.7} s",
        d.t_probe,
        d.t_reauth,
        d.t_reassoc,
        d.handoff_time()
    );
    let _ = writeln!(
        s,
        "configured join setup: craw = t_auth {:.6} s; ordinary = t_auth_ordinary + t_keygen + t_keydist = {:.6} s; delta = {:.6} s",
        d.join_setup_time(JoinMode::Craw),
        d.join_setup_time(JoinMode::Ordinary),
        d.join_setup_delta()
    );
    let _ = writeln!(s, "\njoin setup (realized)");
    let _ = writeln!(s, "{:<10} {:<8} {:<6} {:<8} {:>10} {:>10} {:>10}", "scheme", "member", "area", "mode", "started", "completed", "duration");
    for out in outputs {
        for j in &out.ledger.joins {
            let mode = match j.mode {
                JoinMode::Craw => "craw",
                JoinMode::Ordinary => "ordinary",
            };
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:<6} {:<8} {:>10} {:>10} {:>10}",
                out.scheme,
                j.member,
                j.area,
                mode,
                secs(j.started),
                secs(j.completed),
                secs(j.duration())
            );
        }
    }
    let _ = writeln!(s, "\nhand-off (realized)");
    let _ = writeln!(
        s,
        "{:<10} {:<8} {:<6} {:<6} {:>10} {:>10} {:>10} {:>10} {:>12}",
        "scheme", "member", "from", "to", "started", "probe", "reauth", "reassoc", "total"
    );
    for out in outputs {
        for h in &out.ledger.handoffs {
            let (p, r, a) = match h.phases() {
                Some((p, r, a)) => (secs(p), secs(r), secs(a)),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let total = match (h.total(), h.rejected) {
                (Some(t), _) => secs(t),
                (None, true) => "rejected".into(),
                (None, false) => "in-progress".into(),
            };
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:<6} {:<6} {:>10} {:>10} {:>10} {:>10} {:>12}",
                out.scheme,
                h.member,
                h.from,
                h.to,
                secs(h.started),
                p,
                r,
                a,
                total
            );
        }
    }

    let _ = writeln!(s, "\n== content ==");
    let _ = writeln!(s, "{:<10} {:<8} {:>9} {:>9} {:>11} {:>11}", "scheme", "member", "expected", "decrypted", "post-leave", "post-dec");
    for out in outputs {
        let _ = writeln!(s, "{:<10} frames emitted: {}", out.scheme, out.ledger.frames_emitted);
        for (id, f) in &out.ledger.frames {
            if *f == Default::default() {
                continue;
            }
            let _ = writeln!(
                s,
                "{:<10} {:<8} {:>9} {:>9} {:>11} {:>11}",
                out.scheme, id, f.expected, f.decrypted, f.post_leave_attempts, f.post_leave_decrypted
            );
        }
    }
    s
}

/// Writes the full bundle for one scenario run into `dir`.
pub fn write_bundle(dir: &Path, scenario: &Scenario, outputs: &[SimOutput]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let ledger = LedgerFile {
        scenario: scenario.name.clone(),
        runs: outputs.iter().map(|o| o.ledger.clone()).collect(),
    };
    let files = [
        ("metrics.csv", metrics_csv(outputs)),
        ("trace.log", trace_log(outputs)),
        ("mainlist.json", mainlist_json(outputs)),
        ("report.txt", report_text(scenario, outputs)),
        ("ledger.json", serde_json::to_string_pretty(&ledger).expect("ledger serializes") + "\n"),
        ("scenario.json", scenario.to_json() + "\n"),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

struct LoadedRun {
    label: String,
    scenario: Scenario,
    ledgers: Vec<MetricsLedger>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| io_err(&path, e))
    };
    let scenario = Scenario::from_json(&read("scenario.json")?)?;
    let ledger: LedgerFile = serde_json::from_str(&read("ledger.json")?)
        .map_err(|e| Error::Scenario(format!("{}: {e}", dir.join("ledger.json").display())))?;
    Ok(LoadedRun {
        label: dir.display().to_string(),
        scenario,
        ledgers: ledger.runs,
    })
}

/// Scenario fields that differ, ignoring scheme selection and seed.
fn scenario_mismatches(a: &Scenario, b: &Scenario) -> Vec<String> {
    let strip = |s: &Scenario| -> BTreeMap<String, Value> {
        let Value::Object(map) = serde_json::to_value(s).expect("scenario serializes") else {
            unreachable!("scenario is an object")
        };
        map.into_iter()
            .filter(|(k, _)| k != "schemes" && k != "seed")
            .collect()
    };
    let (x, y) = (strip(a), strip(b));
    let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
    keys.into_iter()
        .filter(|k| x.get(*k) != y.get(*k))
        .cloned()
        .collect()
}

fn delta(a: u32, b: u32) -> String {
    format!("{:+}", i64::from(b) - i64::from(a))
}

fn is_power_of_two(n: usize) -> bool {
    n >= 2 && n.is_power_of_two()
}

/// Side-by-side comparison of two or more run directories.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    if dirs.len() < 2 {
        return Err(Error::Scenario("compare needs at least two run directories".into()));
    }
    let runs: Vec<LoadedRun> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let mut problems = Vec::new();
    for r in &runs[1..] {
        let m = scenario_mismatches(&runs[0].scenario, &r.scenario);
        if !m.is_empty() {
            problems.push(format!("{} vs {}: {}", runs[0].label, r.label, m.join(", ")));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Scenario(format!("incompatible scenarios: {}", problems.join("; "))));
    }

    let columns: Vec<(String, &MetricsLedger)> = runs
        .iter()
        .flat_map(|r| r.ledgers.iter().map(move |l| (format!("{}[{}]", r.label, l.scheme), l)))
        .collect();
    let base = columns[0].1;
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", runs[0].scenario.name);
    let _ = writeln!(s, "baseline: {}", columns[0].0);
    let _ = writeln!(s, "{COST_DEFINITION}");

    let _ = writeln!(s, "\n== counters per event (deltas against baseline) ==");
    for (label, ledger) in &columns {
        let _ = writeln!(s, "-- {label}");
        if ledger.rows.len() != base.rows.len() {
            let _ = writeln!(s, "   event count differs: {} vs {}", ledger.rows.len(), base.rows.len());
        }
        for (i, r) in ledger.rows.iter().enumerate() {
            let c = r.counters;
            let b = base.rows.get(i).map(|b| b.counters).unwrap_or_default();
            let _ = writeln!(
                s,
                "   {:>4} {:<14} {:<6} n={:<3} keygen {:>3} ({:>3}) enc {:>3} ({:>3}) unicast {:>3} ({:>3}) multicast {:>3} ({:>3}) cost {:>3} ({:>3})",
                r.event_id,
                r.kind,
                r.area,
                r.group_size,
                c.key_generations,
                delta(b.key_generations, c.key_generations),
                c.encryptions,
                delta(b.encryptions, c.encryptions),
                c.unicast_sends,
                delta(b.unicast_sends, c.unicast_sends),
                c.multicast_sends,
                delta(b.multicast_sends, c.multicast_sends),
                c.rekey_cost,
                delta(b.rekey_cost, c.rekey_cost)
            );
        }
    }

    let _ = writeln!(s, "\n== aggregate (deltas against baseline) ==");
    let bt = base.total();
    for (label, ledger) in &columns {
        let t = ledger.total();
        let _ = writeln!(
            s,
            "   {label}: keygen {} ({}) enc {} ({}) unicast {} ({}) multicast {} ({}) cost {} ({})",
            t.key_generations,
            delta(bt.key_generations, t.key_generations),
            t.encryptions,
            delta(bt.encryptions, t.encryptions),
            t.unicast_sends,
            delta(bt.unicast_sends, t.unicast_sends),
            t.multicast_sends,
            delta(bt.multicast_sends, t.multicast_sends),
            t.rekey_cost,
            delta(bt.rekey_cost, t.rekey_cost)
        );
    }

    let _ = writeln!(s, "\n== timing (deltas against baseline) ==");
    let sum = |v: &mut dyn Iterator<Item = SimTime>| v.fold(SimTime::ZERO, |a, b| a + b).micros() as i64;
    let bj = sum(&mut base.joins.iter().map(|j| j.duration()));
    let bh = sum(&mut base.handoffs.iter().filter_map(|h| h.total()));
    for (label, ledger) in &columns {
        let j = sum(&mut ledger.joins.iter().map(|j| j.duration()));
        let h = sum(&mut ledger.handoffs.iter().filter_map(|h| h.total()));
        let _ = writeln!(
            s,
            "   {label}: join setup total {} s ({:+} us) over {} joins; hand-off total {} s ({:+} us) over {} hand-offs",
            SimTime(j as u64),
            j - bj,
            ledger.joins.len(),
            SimTime(h as u64),
            h - bh,
            ledger.handoffs.iter().filter(|h| h.total().is_some()).count()
        );
    }

    let relation = cost_relation(&columns);
    if !relation.is_empty() {
        let _ = writeln!(s, "\n== join re-keying cost relation (craw 1, lkh log2 n + 1) ==");
        s.push_str(&relation);
    }
    Ok(s)
}

/// Checks the join-cost relation on every power-of-two group size seen in
/// both a CRAW and an LKH column.
fn cost_relation(columns: &[(String, &MetricsLedger)]) -> String {
    let costs = |scheme: Scheme| -> BTreeMap<usize, Vec<RekeyCounters>> {
        let mut m: BTreeMap<usize, Vec<RekeyCounters>> = BTreeMap::new();
        for (_, l) in columns.iter().filter(|(_, l)| l.scheme == scheme) {
            for r in l.rows.iter().filter(|r| r.kind == "join" || r.kind == "handoff_join") {
                m.entry(r.group_size).or_default().push(r.counters);
            }
        }
        m
    };
    let craw = costs(Scheme::CkcCraw);
    let lkh = costs(Scheme::Lkh);
    let mut s = String::new();
    for (n, lk) in &lkh {
        let Some(cr) = craw.get(n) else { continue };
        if !is_power_of_two(*n) {
            continue;
        }
        let expected = n.trailing_zeros() + 1;
        let craw_ok = cr.iter().all(|c| c.rekey_cost == 1);
        let lkh_ok = lk.iter().all(|c| c.rekey_cost == expected);
        let _ = writeln!(
            s,
            "   n={n:<3} craw {} lkh {} (log2 n + 1 = {expected}) {}",
            cr[0].rekey_cost,
            lk[0].rekey_cost,
            if craw_ok && lkh_ok { "holds" } else { "VIOLATED" }
        );
    }
    s
}
