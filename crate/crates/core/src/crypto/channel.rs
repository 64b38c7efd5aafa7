//! Authenticated encryption for the ground-to-satellite channel.
//!
//! Envelope layout: `nonce (12) | AES-256-GCM ciphertext | tag (16)`. The
//! nonce is derived from a caller-supplied seed so simulated runs replay
//! byte-for-byte.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use super::ratchet::ChannelKey;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const ENVELOPE_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

pub const UPLINK_AAD: &[u8] = b"spacehsm/uplink";
pub const DOWNLINK_AAD: &[u8] = b"spacehsm/downlink";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("authenticated decryption failed")]
pub struct DecryptError;

pub fn nonce_from_seed(seed: &[u8]) -> [u8; NONCE_LEN] {
    let mut h = Sha256::new();
    h.update(b"spacehsm/nonce");
    h.update(seed);
    let digest = h.finalize();
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&digest[..NONCE_LEN]);
    nonce
}

pub fn seal(key: &ChannelKey, nonce_seed: &[u8], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(&key.key.into());
    let nonce = nonce_from_seed(nonce_seed);
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("AES-GCM encryption of in-memory buffer");
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

pub fn open(key: &ChannelKey, aad: &[u8], envelope: &[u8]) -> Result<Vec<u8>, DecryptError> {
    if envelope.len() < ENVELOPE_OVERHEAD {
        return Err(DecryptError);
    }
    let (nonce, ct) = envelope.split_at(NONCE_LEN);
    Aes256Gcm::new(&key.key.into())
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
        .map_err(|_| DecryptError)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ratchet::PrgState;

    #[test]
    fn round_trip_and_overhead() {
        let key = PrgState::from_seed([1; 32]).key();
        let env = seal(&key, b"seed", UPLINK_AAD, b"hello");
        assert_eq!(env.len(), 5 + ENVELOPE_OVERHEAD);
        assert_eq!(open(&key, UPLINK_AAD, &env).unwrap(), b"hello");
        assert_eq!(env, seal(&key, b"seed", UPLINK_AAD, b"hello"));
    }

    #[test]
    fn wrong_key_direction_or_truncation_fail() {
        let s = PrgState::from_seed([1; 32]);
        let env = seal(&s.key(), b"seed", UPLINK_AAD, b"hello");
        assert_eq!(open(&s.next().key(), UPLINK_AAD, &env), Err(DecryptError));
        assert_eq!(open(&s.key(), DOWNLINK_AAD, &env), Err(DecryptError));
        assert_eq!(open(&s.key(), UPLINK_AAD, &env[..20]), Err(DecryptError));
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let key = PrgState::from_seed([2; 32]).key();
        let env = seal(&key, b"n", UPLINK_AAD, b"certificate request body");
        for bit in 0..env.len() * 8 {
            let mut bad = env.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(open(&key, UPLINK_AAD, &bad), Err(DecryptError), "bit {bit}");
        }
    }
}
