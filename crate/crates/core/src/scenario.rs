//! Declarative scenario files.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rekey::Scheme;
use crate::timing::DelayConfig;

pub const SCHEMA: &str = "craw-scenario/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaSpec {
    pub id: String,
    /// Initial roster, placed before the clock starts.
    #[serde(default)]
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub id: String,
    /// Defaults to the member id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password: Option<String>,
    #[serde(default = "yes")]
    pub registered: bool,
    /// Authenticates with a password other than the registered one.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub impostor: bool,
}

fn yes() -> bool {
    true
}

impl MemberSpec {
    pub fn password(&self) -> &[u8] {
        self.password.as_deref().unwrap_or(&self.id).as_bytes()
    }

    /// Whether this member's authentication can succeed.
    pub fn can_authenticate(&self) -> bool {
        self.registered && !self.impostor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptOp {
    Join { member: String, area: String },
    Leave { member: String, area: String },
    Move { member: String, from: String, to: String },
}

impl ScriptOp {
    pub fn member(&self) -> &str {
        match self {
            ScriptOp::Join { member, .. } | ScriptOp::Leave { member, .. } | ScriptOp::Move { member, .. } => member,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    /// Seconds from the start of the run.
    pub at: f64,
    #[serde(flatten)]
    pub op: ScriptOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_group")]
    pub group: String,
    pub schemes: Vec<Scheme>,
    /// Seconds.
    pub horizon: f64,
    #[serde(default)]
    pub delays: DelayConfig,
    pub areas: Vec<AreaSpec>,
    #[serde(default)]
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub events: Vec<ScriptEvent>,
    /// Record every ciphertext and key for offline secrecy checks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub audit: bool,
}

fn default_group() -> String {
    "g".into()
}

fn bad(field: impl Into<String>, msg: impl std::fmt::Display) -> Error {
    Error::Scenario(format!("{}: {msg}", field.into()))
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_overrides(text, &[])
    }

    /// Parses, applies `key=value` overrides (dotted paths, value parsed as
    /// JSON and taken as a string otherwise), then validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Scenario(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let scenario: Scenario = serde_json::from_value(doc).map_err(|e| Error::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn member(&self, id: &str) -> Option<&MemberSpec> {
        self.members.iter().find(|m| m.id == id)
    }

    /// Events with their file index in execution order: by time, ties in
    /// file order.
    pub fn ordered_events(&self) -> Vec<(usize, &ScriptEvent)> {
        let mut evs: Vec<(usize, &ScriptEvent)> = self.events.iter().enumerate().collect();
        evs.sort_by(|a, b| a.1.at.total_cmp(&b.1.at));
        evs
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(bad("schema", format!("expected {SCHEMA:?}, got {:?}", self.schema)));
        }
        if self.name.is_empty() {
            return Err(bad("name", "must not be empty"));
        }
        if self.schemes.is_empty() {
            return Err(bad("schemes", "at least one scheme is required"));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(bad("horizon", format!("must be > 0, got {}", self.horizon)));
        }
        self.delays.validate()?;

        let mut members = BTreeMap::new();
        for (i, m) in self.members.iter().enumerate() {
            if m.id.is_empty() || m.id.contains(char::is_whitespace) {
                return Err(bad(format!("members[{i}].id"), format!("invalid id {:?}", m.id)));
            }
            if members.insert(m.id.as_str(), m).is_some() {
                return Err(bad(format!("members[{i}].id"), format!("duplicate member {:?}", m.id)));
            }
        }
        let mut areas = BTreeSet::new();
        let mut location: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, a) in self.areas.iter().enumerate() {
            if a.id.is_empty() || a.id.contains(char::is_whitespace) {
                return Err(bad(format!("areas[{i}].id"), format!("invalid id {:?}", a.id)));
            }
            if !areas.insert(a.id.as_str()) {
                return Err(bad(format!("areas[{i}].id"), format!("duplicate area {:?}", a.id)));
            }
            for (j, id) in a.members.iter().enumerate() {
                let field = format!("areas[{i}].members[{j}]");
                let spec = members
                    .get(id.as_str())
                    .ok_or_else(|| bad(&field, format!("unknown member {id:?}")))?;
                if !spec.can_authenticate() {
                    return Err(bad(&field, format!("initial member {id:?} must be registered with its own password")));
                }
                if let Some(other) = location.insert(id, &a.id) {
                    return Err(bad(&field, format!("{id:?} is already placed in area {other:?}")));
                }
            }
        }

        for (i, ev) in self.ordered_events() {
            let field = |f: &str| format!("events[{i}].{f}");
            if !ev.at.is_finite() || ev.at < 0.0 || ev.at > self.horizon {
                return Err(bad(field("at"), format!("{} is outside [0, horizon={}]", ev.at, self.horizon)));
            }
            let id = ev.op.member();
            let spec = members
                .get(id)
                .ok_or_else(|| bad(field("member"), format!("unknown member {id:?}")))?;
            let known = |f: &str, a: &str| -> Result<()> {
                if areas.contains(a) {
                    Ok(())
                } else {
                    Err(bad(field(f), format!("unknown area {a:?}")))
                }
            };
            match &ev.op {
                ScriptOp::Join { area, .. } => {
                    known("area", area)?;
                    if let Some(cur) = location.get(id) {
                        return Err(bad(field("member"), format!("{id:?} is already in area {cur:?} at {}", ev.at)));
                    }
                    if spec.can_authenticate() {
                        location.insert(id, area);
                    }
                }
                ScriptOp::Leave { area, .. } => {
                    known("area", area)?;
                    if location.get(id) != Some(&area.as_str()) {
                        return Err(bad(field("area"), format!("{id:?} is not in area {area:?} at {}", ev.at)));
                    }
                    location.remove(id);
                }
                ScriptOp::Move { from, to, .. } => {
                    known("from", from)?;
                    known("to", to)?;
                    if from == to {
                        return Err(bad(field("to"), format!("move must name two distinct areas, got {from:?} twice")));
                    }
                    if location.get(id) != Some(&from.as_str()) {
                        return Err(bad(field("from"), format!("{id:?} is not in area {from:?} at {}", ev.at)));
                    }
                    location.insert(id, to);
                }
            }
        }
        Ok(())
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Scenario(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut slot = doc;
    for part in key.split('.') {
        if slot.is_null() {
            *slot = Value::Object(Default::default());
        }
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Scenario(format!("override {key:?}: {part:?} is not inside an object")))?;
        slot = obj.entry(part.to_owned()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}
