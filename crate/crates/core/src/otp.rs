//! SAS one-time-password authentication.
//!
//! The server stores `E(N_i ^ S)`. To authenticate, the client draws a new
//! nonce and sends
//!
//! ```text
//! alpha = E(E(N_{i+1} ^ S)) ^ E(N_i ^ S)
//! beta  = E(N_{i+1} ^ S)    ^ E(N_i ^ S)
//! ```
//!
//! The server recovers `X = beta ^ stored`, checks `alpha ^ E(X) == stored`,
//! and on success rolls its record to `X`. The accepted credential `X` also
//! yields the member's individual key, so no key has to be generated or
//! shipped for the join.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::crypto::{hash_e, hash_e2, hash_f_bytes, xor_bytes, KeyMaterial, AUTH_HASH_WIDTH};
use crate::error::{Error, Result};
use crate::MemberId;

pub type Credential = [u8; AUTH_HASH_WIDTH];

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 octets"))
    }
}

/// Server-side verifier for one member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthRecord {
    pub member: MemberId,
    pub session: u32,
    #[serde(with = "hex_bytes")]
    pub stored_hash: Credential,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthChallenge {
    pub member: MemberId,
    pub alpha: Credential,
    pub beta: Credential,
}

impl AuthChallenge {
    /// Wire form: `member alpha-hex beta-hex`.
    pub fn to_wire(&self) -> String {
        format!(
            "{} {} {}",
            self.member,
            hex::encode(self.alpha),
            hex::encode(self.beta)
        )
    }

    pub fn from_wire(s: &str) -> Result<Self> {
        let mut parts = s.split(' ');
        let (Some(member), Some(a), Some(b), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Malformed("challenge needs three fields"));
        };
        let decode = |h: &str| -> Result<Credential> {
            hex::decode(h)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or(Error::Malformed("challenge hash"))
        };
        Ok(Self {
            member: member.to_owned(),
            alpha: decode(a)?,
            beta: decode(b)?,
        })
    }
}

/// Client-held secret state. The password never leaves this struct.
#[derive(Clone)]
pub struct ClientSecret {
    member: MemberId,
    password: Credential,
    current_nonce: Credential,
    pending_nonce: Option<Credential>,
    sessions: u32,
}

impl fmt::Debug for ClientSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientSecret")
            .field("member", &self.member)
            .field("sessions", &self.sessions)
            .finish_non_exhaustive()
    }
}

/// Pads or truncates the password to the hash width.
fn fit_password(password: &[u8]) -> Credential {
    let mut out = [0u8; AUTH_HASH_WIDTH];
    let n = password.len().min(AUTH_HASH_WIDTH);
    out[..n].copy_from_slice(&password[..n]);
    out
}

fn random_nonce<R: RngCore>(rng: &mut R) -> Credential {
    let mut n = [0u8; AUTH_HASH_WIDTH];
    rng.fill_bytes(&mut n);
    n
}

/// Individual key derived from an accepted session credential.
pub fn individual_key(credential: &Credential) -> KeyMaterial {
    hash_f_bytes(credential)
}

impl ClientSecret {
    pub fn new<R: RngCore>(member: &str, password: &[u8], rng: &mut R) -> Self {
        Self {
            member: member.to_owned(),
            password: fit_password(password),
            current_nonce: random_nonce(rng),
            pending_nonce: None,
            sessions: 0,
        }
    }

    pub fn member(&self) -> &str {
        &self.member
    }

    /// Number of accepted sessions so far.
    pub fn sessions(&self) -> u32 {
        self.sessions
    }

    fn credential(&self, nonce: &Credential) -> Credential {
        hash_e(&xor_bytes(nonce, &self.password))
    }

    /// `E(N_i ^ S)` for the current nonce.
    pub fn current_credential(&self) -> Credential {
        self.credential(&self.current_nonce)
    }

    /// Draws `N_{i+1}` and builds the (alpha, beta) pair. Calling it again
    /// before the outcome is known replaces the pending nonce.
    pub fn make_challenge<R: RngCore>(&mut self, rng: &mut R) -> AuthChallenge {
        let next = random_nonce(rng);
        let masked_next = xor_bytes(&next, &self.password);
        let current = self.current_credential();
        self.pending_nonce = Some(next);
        AuthChallenge {
            member: self.member.clone(),
            alpha: xor_bytes(&hash_e2(&masked_next), &current),
            beta: xor_bytes(&hash_e(&masked_next), &current),
        }
    }

    /// Individual key the pending session will yield if accepted.
    pub fn pending_key(&self) -> Option<KeyMaterial> {
        self.pending_nonce
            .map(|n| individual_key(&self.credential(&n)))
    }

    /// Commits the pending nonce after the server accepted.
    pub fn accept(&mut self) -> Result<KeyMaterial> {
        let next = self
            .pending_nonce
            .take()
            .ok_or_else(|| Error::Protocol(format!("{} has no pending session", self.member)))?;
        self.current_nonce = next;
        self.sessions += 1;
        Ok(individual_key(&self.current_credential()))
    }

    /// Drops the pending nonce after a rejection.
    pub fn reject(&mut self) {
        self.pending_nonce = None;
    }
}

pub fn register(secret: &ClientSecret) -> AuthRecord {
    AuthRecord {
        member: secret.member.clone(),
        session: 1,
        stored_hash: secret.current_credential(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthOutcome {
    Accepted {
        record: AuthRecord,
        individual_key: KeyMaterial,
    },
    Rejected,
}

impl AuthOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, AuthOutcome::Accepted { .. })
    }
}

pub fn verify(record: &AuthRecord, challenge: &AuthChallenge) -> AuthOutcome {
    if record.member != challenge.member {
        return AuthOutcome::Rejected;
    }
    let next = xor_bytes(&challenge.beta, &record.stored_hash);
    let recovered = xor_bytes(&challenge.alpha, &hash_e(&next));
    if recovered.ct_eq(&record.stored_hash).unwrap_u8() != 1 {
        return AuthOutcome::Rejected;
    }
    AuthOutcome::Accepted {
        record: AuthRecord {
            member: record.member.clone(),
            session: record.session + 1,
            stored_hash: next,
        },
        individual_key: individual_key(&next),
    }
}
