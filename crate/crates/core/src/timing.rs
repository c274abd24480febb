//! Simulated time and the delay model.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated time in whole microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    /// Rounds to the nearest microsecond. Negative or non-finite input is
    /// rejected.
    pub fn from_secs(secs: f64) -> Result<SimTime> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(Error::Scenario(format!("invalid duration {secs}")));
        }
        Ok(SimTime((secs * 1e6).round() as u64))
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn micros(self) -> u64 {
        self.0
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, o: SimTime) -> SimTime {
        SimTime(self.0 + o.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, o: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(o.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

/// Phase delays in seconds. Defaults are the reported hand-off parameters
/// and join-setup components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    /// Searching for a valid AWS.
    pub t_probe: f64,
    /// Re-authentication at the new AWS with the one-time password.
    pub t_reauth: f64,
    /// Re-keying in the new area until its group key reaches the member.
    pub t_reassoc: f64,
    /// One-time-password authentication for a fresh join.
    pub t_auth: f64,
    /// Conventional authentication, used by schemes that ship an
    /// individual key.
    pub t_auth_ordinary: f64,
    pub t_keygen: f64,
    pub t_keydist: f64,
    /// Content frame period; 0 disables content.
    pub frame_interval: f64,
    /// Transit latency added to every protocol message.
    pub link_latency: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            t_probe: 0.0195167,
            t_reauth: 0.002517,
            t_reassoc: 0.924,
            t_auth: 0.002517,
            t_auth_ordinary: 0.000237,
            t_keygen: 0.0,
            t_keydist: 0.939,
            frame_interval: 0.0,
            link_latency: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinMode {
    Craw,
    Ordinary,
}

impl DelayConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_probe", self.t_probe),
            ("t_reauth", self.t_reauth),
            ("t_reassoc", self.t_reassoc),
            ("t_auth", self.t_auth),
            ("t_auth_ordinary", self.t_auth_ordinary),
            ("t_keygen", self.t_keygen),
            ("t_keydist", self.t_keydist),
            ("frame_interval", self.frame_interval),
            ("link_latency", self.link_latency),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Scenario(format!("delays.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn micros(&self, secs: f64) -> SimTime {
        SimTime::from_secs(secs).expect("validated delay")
    }

    pub fn join_setup_time(&self, mode: JoinMode) -> f64 {
        match mode {
            JoinMode::Craw => self.t_auth,
            JoinMode::Ordinary => self.t_auth_ordinary + self.t_keygen + self.t_keydist,
        }
    }

    /// Ordinary minus CRAW join-setup time.
    pub fn join_setup_delta(&self) -> f64 {
        self.join_setup_time(JoinMode::Ordinary) - self.join_setup_time(JoinMode::Craw)
    }

    /// Configured hand-off total `probe + reauth + reassoc`.
    pub fn handoff_time(&self) -> f64 {
        self.t_probe + self.t_reauth + self.t_reassoc
    }

    /// Re-authentication phase of a hand-off for the given mode; ordinary
    /// schemes also prepare an individual key there.
    pub fn reauth_phase(&self, mode: JoinMode) -> f64 {
        match mode {
            JoinMode::Craw => self.t_reauth,
            JoinMode::Ordinary => self.t_auth_ordinary + self.t_keygen + self.t_keydist,
        }
    }
}
