//! Group key management for secure multicast with mobile members.
//!
//! Areas run a CKC key tree (or the LKH baseline for comparison), members
//! authenticate with a SAS one-time password whose session credential doubles
//! as the individual key, and a discrete-event simulator drives joins, leaves
//! and hand-offs between areas.

pub mod ckc;
pub mod code;
pub mod crypto;
pub mod entities;
pub mod error;
pub mod lkh;
pub mod otp;
pub mod rekey;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod timing;
pub mod tree;

pub type MemberId = String;

pub use code::NodeCode;
pub use crypto::KeyMaterial;
pub use entities::{MainList, MainListEntry, MessageKind, Network, ProtocolMessage};
pub use error::{Error, Result};
pub use rekey::{MemberKeyView, RekeyCounters, RekeyOutput, Scheme};
pub use scenario::Scenario;
pub use sim::{run, run_all, MetricsLedger, SimOutput};
pub use timing::{DelayConfig, JoinMode, SimTime};
