//! Primitives shared by the key trees and the authentication protocol.
//!
//! Two hashes are used and kept domain separated: `f` drives group-key
//! re-keying and middle-node derivation, `E` drives the one-time-password
//! exchange. Both are SHA-256 with a distinct prefix; `f` is truncated to
//! the key width. Symmetric encryption is ChaCha20-Poly1305 with a key
//! stretched from the 16-octet key material and a synthetic nonce derived
//! from key and plaintext, so ciphertexts are reproducible under a seed.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::code::NodeCode;
use crate::error::{Error, Result};

/// Width of every symmetric key, in octets.
pub const KEY_WIDTH: usize = 16;
/// Output width of the authentication hash `E`.
pub const AUTH_HASH_WIDTH: usize = 32;

const F_DOMAIN: &[u8] = b"craw/f/v1";
const E_DOMAIN: &[u8] = b"craw/E/v1";
const AEAD_KEY_DOMAIN: &[u8] = b"craw/aead-key/v1";
const AEAD_NONCE_DOMAIN: &[u8] = b"craw/aead-nonce/v1";
const NONCE_LEN: usize = 12;

/// Deterministic random source used everywhere in the crate.
pub type SimRng = ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyMaterial(pub [u8; KEY_WIDTH]);

impl KeyMaterial {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; KEY_WIDTH] = bytes
            .try_into()
            .map_err(|_| Error::Malformed("key material has the wrong width"))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_WIDTH] {
        &self.0
    }

    /// Short stable identifier for logs and tree dumps. Not secret-safe.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::new()
            .chain_update(b"craw/fingerprint")
            .chain_update(self.0)
            .finalize();
        hex::encode(&digest[..4])
    }

    pub fn xor(&self, other: &[u8; KEY_WIDTH]) -> KeyMaterial {
        let mut out = self.0;
        for (o, b) in out.iter_mut().zip(other) {
            *o ^= b;
        }
        KeyMaterial(out)
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyMaterial({})", self.fingerprint())
    }
}

fn f_raw(input: &[u8]) -> KeyMaterial {
    let digest = Sha256::new()
        .chain_update(F_DOMAIN)
        .chain_update(input)
        .finalize();
    let mut out = [0u8; KEY_WIDTH];
    out.copy_from_slice(&digest[..KEY_WIDTH]);
    KeyMaterial(out)
}

/// The re-keying one-way function `f`.
pub fn hash_f(key: &KeyMaterial) -> KeyMaterial {
    f_raw(&key.0)
}

/// Hash arbitrary octets into the key space with `f`.
pub fn hash_f_bytes(input: &[u8]) -> KeyMaterial {
    f_raw(input)
}

/// Encodes a node code as one ASCII octet per digit, right-aligned in a
/// zero-filled key-width buffer.
pub fn encode_code(code: &NodeCode) -> Result<[u8; KEY_WIDTH]> {
    let digits = code.as_str().as_bytes();
    if digits.len() > KEY_WIDTH {
        return Err(Error::CodeTooLong(code.clone()));
    }
    let mut buf = [0u8; KEY_WIDTH];
    buf[KEY_WIDTH - digits.len()..].copy_from_slice(digits);
    Ok(buf)
}

/// Middle-node derivation `f(key XOR code)`.
pub fn hash_f_xor(key: &KeyMaterial, code: &NodeCode) -> Result<KeyMaterial> {
    let encoded = encode_code(code)?;
    Ok(hash_f(&key.xor(&encoded)))
}

/// The authentication hash `E`.
pub fn hash_e(input: &[u8]) -> [u8; AUTH_HASH_WIDTH] {
    Sha256::new()
        .chain_update(E_DOMAIN)
        .chain_update(input)
        .finalize()
        .into()
}

/// `E` applied twice.
pub fn hash_e2(input: &[u8]) -> [u8; AUTH_HASH_WIDTH] {
    hash_e(&hash_e(input))
}

pub fn xor_bytes<const N: usize>(a: &[u8; N], b: &[u8; N]) -> [u8; N] {
    let mut out = *a;
    for (o, x) in out.iter_mut().zip(b) {
        *o ^= x;
    }
    out
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ciphertext {
    pub nonce: [u8; NONCE_LEN],
    /// Encrypted payload with the 16-octet Poly1305 tag appended.
    pub sealed: Vec<u8>,
}

impl Ciphertext {
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::new()
            .chain_update(self.nonce)
            .chain_update(&self.sealed)
            .finalize();
        hex::encode(&digest[..4])
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({}, {} octets)", self.fingerprint(), self.sealed.len())
    }
}

fn aead_for(key: &KeyMaterial) -> ChaCha20Poly1305 {
    let stretched = Sha256::new()
        .chain_update(AEAD_KEY_DOMAIN)
        .chain_update(key.0)
        .finalize();
    ChaCha20Poly1305::new(Key::from_slice(&stretched))
}

pub fn encrypt(key: &KeyMaterial, plaintext: &[u8]) -> Ciphertext {
    let digest = Sha256::new()
        .chain_update(AEAD_NONCE_DOMAIN)
        .chain_update(key.0)
        .chain_update(plaintext)
        .finalize();
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&digest[..NONCE_LEN]);
    let sealed = aead_for(key)
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    Ciphertext { nonce, sealed }
}

pub fn decrypt(key: &KeyMaterial, ciphertext: &Ciphertext) -> Result<Vec<u8>> {
    aead_for(key)
        .decrypt(Nonce::from_slice(&ciphertext.nonce), ciphertext.sealed.as_slice())
        .map_err(|_| Error::Integrity)
}

pub fn random_key<R: RngCore>(rng: &mut R) -> KeyMaterial {
    let mut out = [0u8; KEY_WIDTH];
    rng.fill_bytes(&mut out);
    KeyMaterial(out)
}

/// Draws a decimal digit not in `exclusions`.
pub fn random_digit<R: RngCore>(rng: &mut R, exclusions: &[u8]) -> Result<u8> {
    let free: Vec<u8> = (0..10u8).filter(|d| !exclusions.contains(d)).collect();
    if free.is_empty() {
        return Err(Error::NoFreeDigit);
    }
    Ok(free[rng.gen_range(0..free.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> NodeCode {
        NodeCode::parse(s).unwrap()
    }

    #[test]
    fn f_is_deterministic_and_moves_the_key() {
        let mut rng = seeded_rng(1);
        let k = random_key(&mut rng);
        assert_eq!(hash_f(&k), hash_f(&k));
        assert_ne!(hash_f(&k), k);
    }

    #[test]
    fn code_encoding_is_right_aligned_ascii() {
        let enc = encode_code(&code("157")).unwrap();
        assert_eq!(&enc[..13], &[0u8; 13]);
        assert_eq!(&enc[13..], b"157");
    }

    #[test]
    fn distinct_codes_give_distinct_middle_keys() {
        let k = random_key(&mut seeded_rng(2));
        let a = hash_f_xor(&k, &code("15")).unwrap();
        let b = hash_f_xor(&k, &code("157")).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, hash_f_xor(&k, &code("15")).unwrap());
    }

    #[test]
    fn code_wider_than_key_is_rejected() {
        let k = random_key(&mut seeded_rng(3));
        let long = code("12345678901234567");
        assert_eq!(hash_f_xor(&k, &long), Err(Error::CodeTooLong(long)));
        assert!(hash_f_xor(&k, &code("1234567890123456")).is_ok());
    }

    #[test]
    fn e2_is_e_composed() {
        let x = b"some credential";
        assert_eq!(hash_e2(x), hash_e(&hash_e(x)));
    }

    #[test]
    fn f_and_e_are_domain_separated() {
        let k = random_key(&mut seeded_rng(4));
        assert_ne!(&hash_f(&k).0[..], &hash_e(&k.0)[..KEY_WIDTH]);
    }

    #[test]
    fn aead_round_trip_and_wrong_key() {
        let mut rng = seeded_rng(5);
        let k = random_key(&mut rng);
        let ct = encrypt(&k, b"group key");
        assert_eq!(decrypt(&k, &ct).unwrap(), b"group key");
        let mut flipped = k;
        flipped.0[0] ^= 1;
        assert_eq!(decrypt(&flipped, &ct), Err(Error::Integrity));
    }

    #[test]
    fn corrupted_ciphertext_fails() {
        let k = random_key(&mut seeded_rng(6));
        let mut ct = encrypt(&k, b"payload");
        ct.sealed[0] ^= 0x80;
        assert!(decrypt(&k, &ct).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded_rng(9);
        let mut b = seeded_rng(9);
        for _ in 0..10 {
            assert_eq!(random_key(&mut a), random_key(&mut b));
            assert_eq!(random_digit(&mut a, &[]).unwrap(), random_digit(&mut b, &[]).unwrap());
        }
    }

    #[test]
    fn random_digit_respects_exclusions() {
        let mut rng = seeded_rng(10);
        for _ in 0..1000 {
            assert_ne!(random_digit(&mut rng, &[2]).unwrap(), 2);
        }
        let all: Vec<u8> = (0..10).collect();
        assert_eq!(random_digit(&mut rng, &all), Err(Error::NoFreeDigit));
        assert_eq!(random_digit(&mut rng, &all[1..]).unwrap(), 0);
    }

    #[test]
    fn two_random_keys_differ() {
        let mut rng = seeded_rng(11);
        assert_ne!(random_key(&mut rng), random_key(&mut rng));
    }
}
