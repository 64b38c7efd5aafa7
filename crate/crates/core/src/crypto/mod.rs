//! Cryptographic building blocks: signatures, the channel-key ratchet and
//! the authenticated channel cipher.

pub mod channel;
pub mod ratchet;
pub mod signature;

pub use channel::{open, seal, DecryptError, ENVELOPE_OVERHEAD};
pub use ratchet::{derive_key, ChannelKey, PrgState};
pub use signature::{KeyPair, PublicKey, SchemeId, SIGNATURE_LEN};
