//! Canonical byte layouts for everything the satellite signs or sends.
//!
//! All integers are big-endian. `bytes16`/`bytes32` denote a `u16`/`u32`
//! length prefix followed by that many bytes. Each signed structure is signed
//! over a distinct ASCII label followed by its fields, so a signature on one
//! kind can never be replayed as another.
//!
//! | message | layout |
//! |---|---|
//! | `CsrMessage` | `request_id[16] \| timestamp_us u64 \| bytes32(subject)` |
//! | `SignedCertificate` | `bytes32(csr) \| signer_epoch u64 \| leaf_index u64 \| bytes16(signature)` |
//! | `BeaconMessage` | `public_key \| root[32] \| log_size u64 \| epoch u64 \| sequence u64 \| bytes16(signature)` |
//! | `Attestation` | `attested_key \| attester_key \| bytes16(signature)` |
//! | `CertificateResponse` | `request_id[16] \| signer_epoch u64 \| leaf_index u64 \| bytes16(signature) \| root[32] \| log_size u64` |
//!
//! A `public_key` is `scheme u8 | bytes16(key)`.

use sha2::{Digest as _, Sha256};

use crate::accumulator::Digest;
use crate::crypto::PublicKey;
use crate::wire::{Reader, WireError, Writer};

const CERT_LABEL: &[u8] = b"spacehsm/cert/v1";
const BEACON_LABEL: &[u8] = b"spacehsm/beacon/v1";
const ATTEST_LABEL: &[u8] = b"spacehsm/attest/v1";

pub type RequestId = [u8; 16];

/// An opaque certificate-signing request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrMessage {
    pub subject: Vec<u8>,
    pub request_id: RequestId,
    /// Simulated time of issue, microseconds.
    pub timestamp_us: u64,
}

impl CsrMessage {
    /// Serialized size with an empty subject.
    pub const FIXED_LEN: usize = 16 + 8 + 4;
    pub const DEFAULT_TOTAL_LEN: usize = 2560;

    /// Builds a request whose canonical encoding is exactly `total_len` bytes,
    /// padding `label` with deterministic filler derived from the request id.
    /// `total_len` is raised to fit the label if necessary.
    pub fn padded(
        request_id: RequestId,
        timestamp_us: u64,
        label: &[u8],
        total_len: usize,
    ) -> Self {
        let subject_len = total_len.saturating_sub(Self::FIXED_LEN).max(label.len());
        let mut subject = label.to_vec();
        let mut block = 0u32;
        while subject.len() < subject_len {
            let mut h = Sha256::new();
            h.update(request_id);
            h.update(block.to_be_bytes());
            let chunk = h.finalize();
            let take = (subject_len - subject.len()).min(chunk.len());
            subject.extend_from_slice(&chunk[..take]);
            block += 1;
        }
        Self {
            subject,
            request_id,
            timestamp_us,
        }
    }

    pub fn encoded_len(&self) -> usize {
        Self::FIXED_LEN + self.subject.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.request_id)
            .u64(self.timestamp_us)
            .bytes32(&self.subject);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let request_id = r.array()?;
        let timestamp_us = r.u64()?;
        let subject = r.bytes32()?.to_vec();
        r.finish()?;
        Ok(Self {
            subject,
            request_id,
            timestamp_us,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedCertificate {
    pub csr: CsrMessage,
    pub signature: Vec<u8>,
    pub signer_epoch: u64,
    pub leaf_index: u64,
}

impl SignedCertificate {
    /// Bytes covered by the signature. Binds the request to its accumulator
    /// position and epoch.
    pub fn signed_bytes(csr: &CsrMessage, signer_epoch: u64, leaf_index: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(CERT_LABEL)
            .bytes32(&csr.encode())
            .u64(signer_epoch)
            .u64(leaf_index);
        w.finish()
    }

    pub fn verify(&self, hsm_key: &PublicKey) -> bool {
        hsm_key.verify(
            &Self::signed_bytes(&self.csr, self.signer_epoch, self.leaf_index),
            &self.signature,
        )
    }

    /// Canonical encoding; this is the accumulator leaf.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes32(&self.csr.encode())
            .u64(self.signer_epoch)
            .u64(self.leaf_index)
            .bytes16(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let csr = CsrMessage::decode(r.bytes32()?)?;
        let signer_epoch = r.u64()?;
        let leaf_index = r.u64()?;
        let signature = r.bytes16()?.to_vec();
        r.finish()?;
        Ok(Self {
            csr,
            signature,
            signer_epoch,
            leaf_index,
        })
    }
}

/// The compact reply returned to the requesting ground station. The station
/// already holds the request, so only the signature and accumulator state
/// travel back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertificateResponse {
    pub request_id: RequestId,
    pub signer_epoch: u64,
    pub leaf_index: u64,
    pub signature: Vec<u8>,
    pub accumulator_root: Digest,
    pub log_size: u64,
}

impl CertificateResponse {
    /// Encoded length with a 256-byte signature.
    pub const ENCODED_LEN: usize = 16 + 8 + 8 + 2 + crate::crypto::SIGNATURE_LEN + 32 + 8;

    pub fn for_certificate(cert: &SignedCertificate, root: Digest, log_size: u64) -> Self {
        Self {
            request_id: cert.csr.request_id,
            signer_epoch: cert.signer_epoch,
            leaf_index: cert.leaf_index,
            signature: cert.signature.clone(),
            accumulator_root: root,
            log_size,
        }
    }

    /// Reassembles the full certificate from the station's copy of the request.
    pub fn into_certificate(self, csr: CsrMessage) -> SignedCertificate {
        SignedCertificate {
            csr,
            signature: self.signature,
            signer_epoch: self.signer_epoch,
            leaf_index: self.leaf_index,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.request_id)
            .u64(self.signer_epoch)
            .u64(self.leaf_index)
            .bytes16(&self.signature)
            .raw(&self.accumulator_root.0)
            .u64(self.log_size);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let out = Self {
            request_id: r.array()?,
            signer_epoch: r.u64()?,
            leaf_index: r.u64()?,
            signature: r.bytes16()?.to_vec(),
            accumulator_root: Digest(r.array()?),
            log_size: r.u64()?,
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaconMessage {
    pub public_key: PublicKey,
    pub accumulator_root: Digest,
    pub log_size: u64,
    pub epoch: u64,
    pub sequence: u64,
    pub beacon_signature: Vec<u8>,
}

impl BeaconMessage {
    pub fn signed_bytes(
        public_key: &PublicKey,
        root: &Digest,
        log_size: u64,
        epoch: u64,
        sequence: u64,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(BEACON_LABEL);
        public_key.write(&mut w);
        w.raw(&root.0).u64(log_size).u64(epoch).u64(sequence);
        w.finish()
    }

    /// Self-consistency only: checks the signature under the carried key.
    /// Callers that trust a particular key should use [`verify_with`](Self::verify_with).
    pub fn verify(&self) -> bool {
        self.verify_with(&self.public_key)
    }

    pub fn verify_with(&self, key: &PublicKey) -> bool {
        *key == self.public_key
            && key.verify(
                &Self::signed_bytes(
                    &self.public_key,
                    &self.accumulator_root,
                    self.log_size,
                    self.epoch,
                    self.sequence,
                ),
                &self.beacon_signature,
            )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.public_key.write(&mut w);
        w.raw(&self.accumulator_root.0)
            .u64(self.log_size)
            .u64(self.epoch)
            .u64(self.sequence)
            .bytes16(&self.beacon_signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let out = Self {
            public_key: PublicKey::read(&mut r)?,
            accumulator_root: Digest(r.array()?),
            log_size: r.u64()?,
            epoch: r.u64()?,
            sequence: r.u64()?,
            beacon_signature: r.bytes16()?.to_vec(),
        };
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attestation {
    pub attested_key: PublicKey,
    pub attester_key: PublicKey,
    pub signature: Vec<u8>,
}

impl Attestation {
    pub fn signed_bytes(attested_key: &PublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(ATTEST_LABEL);
        attested_key.write(&mut w);
        w.finish()
    }

    pub fn verify(&self) -> bool {
        self.verify_with(&self.attester_key)
    }

    pub fn verify_with(&self, attester: &PublicKey) -> bool {
        attester.verify(&Self::signed_bytes(&self.attested_key), &self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.attested_key.write(&mut w);
        self.attester_key.write(&mut w);
        w.bytes16(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let out = Self {
            attested_key: PublicKey::read(&mut r)?,
            attester_key: PublicKey::read(&mut r)?,
            signature: r.bytes16()?.to_vec(),
        };
        r.finish()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_csr_hits_exact_size() {
        for total in [28, 100, 2560, 4000] {
            let csr = CsrMessage::padded([1; 16], 5, b"CN=test", total);
            assert_eq!(csr.encode().len(), total.max(28 + 7));
            assert_eq!(csr.encoded_len(), csr.encode().len());
        }
        let csr = CsrMessage::padded([1; 16], 5, b"CN=test", 2560);
        assert!(csr.subject.starts_with(b"CN=test"));
        assert_eq!(CsrMessage::decode(&csr.encode()).unwrap(), csr);
    }

    #[test]
    fn csr_layout() {
        let csr = CsrMessage {
            subject: b"ab".to_vec(),
            request_id: [7; 16],
            timestamp_us: 0x0102,
        };
        let bytes = csr.encode();
        assert_eq!(&bytes[..16], &[7; 16]);
        assert_eq!(&bytes[16..24], &0x0102u64.to_be_bytes());
        assert_eq!(&bytes[24..28], &2u32.to_be_bytes());
        assert_eq!(&bytes[28..], b"ab");
        assert!(CsrMessage::decode(&bytes[..27]).is_err());
    }

    #[test]
    fn response_size_needs_two_frames() {
        let resp = CertificateResponse {
            request_id: [0; 16],
            signer_epoch: 0,
            leaf_index: 0,
            signature: vec![0; 256],
            accumulator_root: Digest::default(),
            log_size: 1,
        };
        let bytes = resp.encode();
        assert_eq!(bytes.len(), 330);
        assert_eq!(CertificateResponse::decode(&bytes).unwrap(), resp);
    }
}
