//! The satellite-side state machine.
//!
//! An [`HsmState`] owns the signing key, the channel-key ratchet and two
//! accumulators: the per-epoch accumulator whose root goes out in every
//! beacon, and the full signing history across all epochs. A reset starts a
//! fresh epoch accumulator so the new terrestrial log can match it; the
//! history is never cleared.

pub mod messages;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::accumulator::{Digest, MerkleLog};
use crate::crypto::channel::{self, DecryptError, DOWNLINK_AAD, UPLINK_AAD};
use crate::crypto::{derive_key, ChannelKey, KeyPair, PrgState, PublicKey, SchemeId};
use crate::wire::WireError;

pub use messages::{
    Attestation, BeaconMessage, CertificateResponse, CsrMessage, RequestId, SignedCertificate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsmConfig {
    pub scheme: SchemeId,
    /// Probability that a signing attempt suffers a bit flip.
    pub fault_rate: f64,
    /// Extra signing attempts after a detected fault.
    pub retry_limit: u32,
}

impl Default for HsmConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeId::Ed25519Wide,
            fault_rate: 0.0,
            retry_limit: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HsmError {
    #[error("signature failed self-verification on all {attempts} attempts")]
    FaultDetected { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UplinkError {
    /// Neither the current nor the next channel key opened the message.
    #[error("uplink dropped: {0}")]
    Decrypt(#[from] DecryptError),
    #[error("malformed certificate request: {error}")]
    MalformedCsr {
        epoch_advanced: bool,
        error: WireError,
    },
    #[error("signing aborted after {attempts} faulty attempts")]
    Fault { epoch_advanced: bool, attempts: u32 },
}

#[derive(Debug, Clone)]
pub struct SignOutcome {
    pub certificate: SignedCertificate,
    /// Attempts discarded because the fresh signature did not verify.
    pub faulty_attempts: u32,
}

#[derive(Debug, Clone)]
pub struct UplinkReply {
    /// Downlink payload for the requester, sealed under the current channel key.
    pub response: Vec<u8>,
    pub certificate: SignedCertificate,
    pub epoch_advanced: bool,
    pub faulty_attempts: u32,
    /// True when the request id was already signed and the cached
    /// certificate was re-sent instead of signing again.
    pub replayed: bool,
}

#[derive(Debug, Clone)]
struct Issued {
    certificate: SignedCertificate,
    root: Digest,
    log_size: u64,
}

#[derive(Debug, Clone)]
pub struct HsmState {
    keypair: KeyPair,
    ratchet: PrgState,
    current_key: ChannelKey,
    log: MerkleLog,
    history: MerkleLog,
    beacon_sequence: u64,
    pub fault_rate: f64,
    pub retry_limit: u32,
    fault_rng: ChaCha8Rng,
    issued: BTreeMap<RequestId, Issued>,
    responses_sent: u64,
}

fn label_hash(entropy: &[u8; 32], label: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(entropy);
    h.update(label);
    h.finalize().into()
}

impl HsmState {
    /// Generates the key pair from `entropy` and emits the first beacon.
    pub fn bootstrap(
        entropy: &[u8; 32],
        initial_ratchet: PrgState,
        config: &HsmConfig,
    ) -> (HsmState, BeaconMessage) {
        let keypair = KeyPair::generate(config.scheme, &label_hash(entropy, b"signing-key"));
        let current_key = initial_ratchet.key();
        let mut state = HsmState {
            keypair,
            ratchet: initial_ratchet,
            current_key,
            log: MerkleLog::new(),
            history: MerkleLog::new(),
            beacon_sequence: 0,
            fault_rate: config.fault_rate,
            retry_limit: config.retry_limit,
            fault_rng: ChaCha8Rng::from_seed(label_hash(entropy, b"fault-injection")),
            issued: BTreeMap::new(),
            responses_sent: 0,
        };
        let beacon = state.make_beacon();
        (state, beacon)
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public_key()
    }

    pub fn epoch(&self) -> u64 {
        self.current_key.epoch
    }

    pub fn ratchet(&self) -> &PrgState {
        &self.ratchet
    }

    pub fn current_key(&self) -> &ChannelKey {
        &self.current_key
    }

    /// Accumulator for the current epoch; its root is what beacons carry.
    pub fn log(&self) -> &MerkleLog {
        &self.log
    }

    /// Every certificate ever signed, across all epochs, in signing order.
    pub fn history(&self) -> &MerkleLog {
        &self.history
    }

    pub fn beacon_sequence(&self) -> u64 {
        self.beacon_sequence
    }

    /// Opens with the current key, falling back to exactly one key ahead.
    /// A successful fallback moves the HSM to the next epoch permanently.
    pub fn try_decrypt(&mut self, ciphertext: &[u8]) -> Result<(Vec<u8>, bool), DecryptError> {
        if let Ok(pt) = channel::open(&self.current_key, UPLINK_AAD, ciphertext) {
            return Ok((pt, false));
        }
        let (_, next_state) = derive_key(&self.ratchet);
        let next_key = next_state.key();
        let pt = channel::open(&next_key, UPLINK_AAD, ciphertext)?;
        self.ratchet = next_state;
        self.current_key = next_key;
        self.log = MerkleLog::new();
        self.issued.clear();
        Ok((pt, true))
    }

    /// Signs, self-verifies, and only then appends and releases. A faulty
    /// attempt leaves no trace in the accumulator.
    pub fn sign_certificate(&mut self, csr: CsrMessage) -> Result<SignOutcome, HsmError> {
        let epoch = self.epoch();
        let leaf_index = self.log.len();
        let tbs = SignedCertificate::signed_bytes(&csr, epoch, leaf_index);
        let attempts = 1 + self.retry_limit;
        let mut faulty_attempts = 0;
        for _ in 0..attempts {
            let mut signature = self.keypair.sign(&tbs);
            if self.fault_rate > 0.0 && self.fault_rng.gen_bool(self.fault_rate.min(1.0)) {
                let bit = self.fault_rng.gen_range(0..signature.len() * 8);
                signature[bit / 8] ^= 1 << (bit % 8);
            }
            if !self.public_key().verify(&tbs, &signature) {
                faulty_attempts += 1;
                continue;
            }
            let certificate = SignedCertificate {
                csr,
                signature,
                signer_epoch: epoch,
                leaf_index,
            };
            let leaf = certificate.encode();
            self.history.append(leaf.clone());
            self.log.append(leaf);
            return Ok(SignOutcome {
                certificate,
                faulty_attempts,
            });
        }
        Err(HsmError::FaultDetected { attempts })
    }

    pub fn make_beacon(&mut self) -> BeaconMessage {
        let public_key = self.public_key().clone();
        let root = self.log.root();
        let log_size = self.log.len();
        let epoch = self.epoch();
        let sequence = self.beacon_sequence;
        self.beacon_sequence += 1;
        let signature = self.keypair.sign(&BeaconMessage::signed_bytes(
            &public_key,
            &root,
            log_size,
            epoch,
            sequence,
        ));
        BeaconMessage {
            public_key,
            accumulator_root: root,
            log_size,
            epoch,
            sequence,
            beacon_signature: signature,
        }
    }

    pub fn attest_peer(&self, peer_public_key: &PublicKey) -> Attestation {
        Attestation {
            attested_key: peer_public_key.clone(),
            attester_key: self.public_key().clone(),
            signature: self
                .keypair
                .sign(&Attestation::signed_bytes(peer_public_key)),
        }
    }

    /// Decrypt, parse, sign, and seal the reply. Re-sent requests (same id,
    /// same body) get the cached certificate rather than a second signature.
    pub fn process_uplink(&mut self, payload: &[u8]) -> Result<UplinkReply, UplinkError> {
        let (plaintext, epoch_advanced) = self.try_decrypt(payload)?;
        let csr = CsrMessage::decode(&plaintext).map_err(|error| UplinkError::MalformedCsr {
            epoch_advanced,
            error,
        })?;

        let (issued, faulty_attempts, replayed) = match self.issued.get(&csr.request_id) {
            Some(prev) if prev.certificate.csr == csr => (prev.clone(), 0, true),
            _ => {
                let request_id = csr.request_id;
                let outcome = self.sign_certificate(csr).map_err(|e| match e {
                    HsmError::FaultDetected { attempts } => UplinkError::Fault {
                        epoch_advanced,
                        attempts,
                    },
                })?;
                let issued = Issued {
                    certificate: outcome.certificate,
                    root: self.log.root(),
                    log_size: self.log.len(),
                };
                self.issued.insert(request_id, issued.clone());
                (issued, outcome.faulty_attempts, false)
            }
        };

        let response =
            CertificateResponse::for_certificate(&issued.certificate, issued.root, issued.log_size);
        let mut nonce_seed = b"response".to_vec();
        nonce_seed.extend_from_slice(&self.responses_sent.to_be_bytes());
        nonce_seed.extend_from_slice(&issued.certificate.csr.request_id);
        self.responses_sent += 1;
        let sealed = channel::seal(
            &self.current_key,
            &nonce_seed,
            DOWNLINK_AAD,
            &response.encode(),
        );

        Ok(UplinkReply {
            response: sealed,
            certificate: issued.certificate,
            epoch_advanced,
            faulty_attempts,
            replayed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accumulator::empty_root;

    fn fresh(config: &HsmConfig) -> (HsmState, BeaconMessage) {
        HsmState::bootstrap(&[11; 32], PrgState::from_seed([22; 32]), config)
    }

    fn csr(n: u8) -> CsrMessage {
        CsrMessage::padded([n; 16], n as u64, b"CN=example", 256)
    }

    fn seal_for(key: &ChannelKey, csr: &CsrMessage) -> Vec<u8> {
        channel::seal(key, &csr.request_id, UPLINK_AAD, &csr.encode())
    }

    #[test]
    fn bootstrap_is_deterministic_and_starts_empty() {
        let (a, beacon) = fresh(&HsmConfig::default());
        let (b, _) = fresh(&HsmConfig::default());
        assert_eq!(a.public_key(), b.public_key());
        assert_eq!(beacon.accumulator_root, empty_root());
        assert_eq!((beacon.epoch, beacon.sequence, beacon.log_size), (0, 0, 0));
        assert!(beacon.verify_with(a.public_key()));
        assert_eq!(a.current_key().epoch, a.ratchet().counter);
    }

    #[test]
    fn decrypt_current_next_and_two_ahead() {
        let (mut hsm, _) = fresh(&HsmConfig::default());
        let s0 = PrgState::from_seed([22; 32]);
        let s1 = s0.next();
        let s2 = s1.next();

        let (pt, adv) = hsm.try_decrypt(&seal_for(&s0.key(), &csr(1))).unwrap();
        assert_eq!(pt, csr(1).encode());
        assert!(!adv);

        assert_eq!(
            hsm.try_decrypt(&seal_for(&s2.key(), &csr(2))),
            Err(DecryptError)
        );
        assert_eq!(hsm.epoch(), 0);

        let (_, adv) = hsm.try_decrypt(&seal_for(&s1.key(), &csr(3))).unwrap();
        assert!(adv);
        assert_eq!(hsm.epoch(), 1);
        assert_eq!(hsm.current_key().epoch, hsm.ratchet().counter);

        // old-epoch traffic is dropped
        assert_eq!(
            hsm.try_decrypt(&seal_for(&s0.key(), &csr(4))),
            Err(DecryptError)
        );
    }

    #[test]
    fn signing_appends_in_order() {
        let (mut hsm, _) = fresh(&HsmConfig::default());
        let a = hsm.sign_certificate(csr(1)).unwrap().certificate;
        let b = hsm.sign_certificate(csr(2)).unwrap().certificate;
        assert_eq!((a.leaf_index, b.leaf_index), (0, 1));
        assert!(a.verify(hsm.public_key()));
        assert_eq!(hsm.log().len(), 2);
        assert_eq!(hsm.log().leaf(1).unwrap(), b.encode());
    }

    #[test]
    fn certain_fault_without_retries_releases_nothing() {
        let config = HsmConfig {
            fault_rate: 1.0,
            retry_limit: 0,
            ..HsmConfig::default()
        };
        let (mut hsm, _) = fresh(&config);
        assert_eq!(
            hsm.sign_certificate(csr(1)).unwrap_err(),
            HsmError::FaultDetected { attempts: 1 }
        );
        assert!(hsm.log().is_empty());
        assert!(hsm.history().is_empty());
    }

    #[test]
    fn beacons_track_the_accumulator() {
        let (mut hsm, first) = fresh(&HsmConfig::default());
        for n in 0..3 {
            hsm.sign_certificate(csr(n)).unwrap();
        }
        let b1 = hsm.make_beacon();
        let b2 = hsm.make_beacon();
        assert_eq!(b1.sequence, first.sequence + 1);
        assert_eq!(b2.sequence, b1.sequence + 1);
        assert_eq!(b1.accumulator_root, hsm.log().root());
        assert_eq!(b1.log_size, 3);
        assert_eq!(BeaconMessage::decode(&b1.encode()).unwrap(), b1);
    }

    #[test]
    fn mutual_attestation() {
        let (a, _) = fresh(&HsmConfig::default());
        let (b, _) = HsmState::bootstrap(
            &[99; 32],
            PrgState::from_seed([1; 32]),
            &HsmConfig::default(),
        );
        let ab = a.attest_peer(b.public_key());
        let ba = b.attest_peer(a.public_key());
        assert!(ab.verify_with(a.public_key()));
        assert!(ba.verify_with(b.public_key()));
        assert!(!ab.verify_with(b.public_key()));
        assert_eq!(Attestation::decode(&ab.encode()).unwrap(), ab);
    }

    #[test]
    fn uplink_happy_path_garbage_and_replay() {
        let (mut hsm, _) = fresh(&HsmConfig::default());
        let key = PrgState::from_seed([22; 32]).key();
        let request = csr(5);
        let reply = hsm.process_uplink(&seal_for(&key, &request)).unwrap();
        assert!(!reply.replayed && !reply.epoch_advanced);
        let opened = channel::open(&key, DOWNLINK_AAD, &reply.response).unwrap();
        let resp = CertificateResponse::decode(&opened).unwrap();
        assert_eq!(resp.accumulator_root, hsm.log().root());
        let cert = resp.into_certificate(request.clone());
        assert!(cert.verify(hsm.public_key()));
        assert_eq!(cert, reply.certificate);

        let again = hsm.process_uplink(&seal_for(&key, &request)).unwrap();
        assert!(again.replayed);
        assert_eq!(hsm.log().len(), 1);

        let before = hsm.log().root();
        assert!(matches!(
            hsm.process_uplink(b"not a ciphertext at all, just noise"),
            Err(UplinkError::Decrypt(_))
        ));
        assert_eq!(hsm.log().root(), before);

        let bad = channel::seal(&key, b"x", UPLINK_AAD, b"short");
        assert!(matches!(
            hsm.process_uplink(&bad),
            Err(UplinkError::MalformedCsr {
                epoch_advanced: false,
                ..
            })
        ));
    }

    #[test]
    fn uplink_under_next_key_advances_and_restarts_epoch_accumulator() {
        let (mut hsm, _) = fresh(&HsmConfig::default());
        let s0 = PrgState::from_seed([22; 32]);
        hsm.process_uplink(&seal_for(&s0.key(), &csr(1))).unwrap();
        let reply = hsm
            .process_uplink(&seal_for(&s0.next().key(), &csr(2)))
            .unwrap();
        assert!(reply.epoch_advanced);
        assert_eq!(reply.certificate.signer_epoch, 1);
        assert_eq!(reply.certificate.leaf_index, 0);
        assert_eq!(hsm.log().len(), 1);
        assert_eq!(hsm.history().len(), 2);
    }
}
