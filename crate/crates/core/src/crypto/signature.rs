//! Pluggable signature schemes.
//!
//! Every scheme produces exactly [`SIGNATURE_LEN`] bytes so frame and power
//! arithmetic does not depend on the choice. [`SchemeId::Rsa2048`] is real
//! RSA-2048 with PKCS#1 v1.5 / SHA-256. [`SchemeId::Ed25519Wide`] is the fast
//! default for simulation: an Ed25519 signature followed by a 192-byte
//! SHA-256 expansion bound to the signature and the public key. Verification
//! checks both halves, so any flipped bit is rejected.

use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPrivateKey, EncodeRsaPublicKey};
use rsa::pkcs1v15;
use rsa::signature::SignatureEncoding;
use rsa::{RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::wire::{Reader, WireError, Writer};

pub const SIGNATURE_LEN: usize = 256;

const ED25519_LEN: usize = 64;
const WIDE_LABEL: &[u8] = b"spacehsm/ed25519-wide/v1";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeId {
    #[default]
    Ed25519Wide,
    Rsa2048,
}

impl SchemeId {
    pub fn tag(self) -> u8 {
        match self {
            SchemeId::Ed25519Wide => 1,
            SchemeId::Rsa2048 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(SchemeId::Ed25519Wide),
            2 => Some(SchemeId::Rsa2048),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey {
    pub scheme: SchemeId,
    pub bytes: Vec<u8>,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fp = Sha256::digest(&self.bytes);
        write!(f, "PublicKey({:?}, {})", self.scheme, hex::encode(&fp[..8]))
    }
}

impl PublicKey {
    /// `scheme_tag u8 | key_len u16 | key bytes`
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u8(self.scheme.tag()).bytes16(&self.bytes);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let tag = r.u8()?;
        let scheme = SchemeId::from_tag(tag).ok_or_else(|| WireError::Invalid {
            field: "scheme",
            reason: format!("unknown tag {tag}"),
        })?;
        Ok(Self {
            scheme,
            bytes: r.bytes16()?.to_vec(),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let pk = Self::read(&mut r)?;
        r.finish()?;
        Ok(pk)
    }

    /// Short hex fingerprint for logs.
    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.encode())[..8])
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        if signature.len() != SIGNATURE_LEN {
            return false;
        }
        match self.scheme {
            SchemeId::Ed25519Wide => {
                let Ok(key_bytes) = <[u8; 32]>::try_from(self.bytes.as_slice()) else {
                    return false;
                };
                let Ok(vk) = VerifyingKey::from_bytes(&key_bytes) else {
                    return false;
                };
                let (head, tail) = signature.split_at(ED25519_LEN);
                let Ok(sig) = ed25519_dalek::Signature::from_slice(head) else {
                    return false;
                };
                vk.verify_strict(message, &sig).is_ok() && wide_expansion(head, &key_bytes) == tail
            }
            SchemeId::Rsa2048 => {
                let Ok(pk) = RsaPublicKey::from_pkcs1_der(&self.bytes) else {
                    return false;
                };
                let Ok(sig) = pkcs1v15::Signature::try_from(signature) else {
                    return false;
                };
                pkcs1v15::VerifyingKey::<Sha256>::new(pk)
                    .verify(message, &sig)
                    .is_ok()
            }
        }
    }
}

fn wide_expansion(ed_sig: &[u8], public_key: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(SIGNATURE_LEN - ED25519_LEN);
    let mut block = 0u32;
    while out.len() < SIGNATURE_LEN - ED25519_LEN {
        let mut h = Sha256::new();
        h.update(WIDE_LABEL);
        h.update(ed_sig);
        h.update(public_key);
        h.update(block.to_be_bytes());
        out.extend_from_slice(&h.finalize());
        block += 1;
    }
    out.truncate(SIGNATURE_LEN - ED25519_LEN);
    out
}

enum Secret {
    Ed25519(Box<SigningKey>),
    Rsa(Box<pkcs1v15::SigningKey<Sha256>>, Box<RsaPrivateKey>),
}

/// Signing key pair. Generation is deterministic in the supplied entropy.
pub struct KeyPair {
    secret: Secret,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl Clone for KeyPair {
    fn clone(&self) -> Self {
        let secret = match &self.secret {
            Secret::Ed25519(k) => Secret::Ed25519(k.clone()),
            Secret::Rsa(s, k) => Secret::Rsa(s.clone(), k.clone()),
        };
        Self {
            secret,
            public: self.public.clone(),
        }
    }
}

impl KeyPair {
    pub fn generate(scheme: SchemeId, entropy: &[u8; 32]) -> Self {
        match scheme {
            SchemeId::Ed25519Wide => {
                let sk = SigningKey::from_bytes(entropy);
                let public = PublicKey {
                    scheme,
                    bytes: sk.verifying_key().to_bytes().to_vec(),
                };
                Self {
                    secret: Secret::Ed25519(Box::new(sk)),
                    public,
                }
            }
            SchemeId::Rsa2048 => {
                let mut rng = ChaCha20Rng::from_seed(*entropy);
                let sk = RsaPrivateKey::new(&mut rng, 2048).expect("2048-bit RSA keygen");
                let public = PublicKey {
                    scheme,
                    bytes: sk
                        .to_public_key()
                        .to_pkcs1_der()
                        .expect("encode RSA public key")
                        .into_vec(),
                };
                let signer = pkcs1v15::SigningKey::<Sha256>::new(sk.clone());
                Self {
                    secret: Secret::Rsa(Box::new(signer), Box::new(sk)),
                    public,
                }
            }
        }
    }

    pub fn scheme(&self) -> SchemeId {
        self.public.scheme
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    /// Ed25519 seed or PKCS#1 DER private key.
    pub fn private_key_bytes(&self) -> Vec<u8> {
        match &self.secret {
            Secret::Ed25519(k) => k.to_bytes().to_vec(),
            Secret::Rsa(_, k) => k
                .to_pkcs1_der()
                .expect("encode RSA private key")
                .as_bytes()
                .to_vec(),
        }
    }

    /// Always returns [`SIGNATURE_LEN`] bytes.
    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        match &self.secret {
            Secret::Ed25519(k) => {
                let head = k.sign(message).to_bytes();
                let mut out = head.to_vec();
                let pk: [u8; 32] = self.public.bytes.as_slice().try_into().unwrap();
                out.extend(wide_expansion(&head, &pk));
                out
            }
            Secret::Rsa(signer, _) => signer.sign(message).to_vec(),
        }
    }
}
