//! The public certificate log, one append-only accumulator per epoch.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accumulator::{verify_inclusion, Digest, InclusionProof, MerkleLog};
use crate::crypto::PublicKey;
use crate::hsm::SignedCertificate;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogError {
    #[error("epoch {epoch} log is frozen")]
    Frozen { epoch: u64 },
    #[error("certificate signature does not verify")]
    BadSignature,
    #[error("certificate from epoch {cert_epoch} submitted to epoch {log_epoch} log")]
    EpochMismatch { cert_epoch: u64, log_epoch: u64 },
    #[error("a different certificate already occupies leaf {leaf_index}")]
    Conflict { leaf_index: u64 },
    #[error("no log for epoch {0}")]
    UnknownEpoch(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    /// Appended, together with any held submissions it unblocked.
    Appended { count: u64 },
    /// Valid, but earlier leaves are still missing; held until they arrive.
    Held,
    /// Byte-identical to an entry already present.
    Duplicate,
}

/// Append-only log for a single epoch. Entries are kept in the HSM's
/// signing order: a certificate is appended when its `leaf_index` equals the
/// current size, so the log root is directly comparable with beacon roots.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateLog {
    epoch: u64,
    entries: MerkleLog,
    frozen: bool,
    held: BTreeMap<u64, Vec<u8>>,
}

impl CertificateLog {
    pub fn new(epoch: u64) -> Self {
        Self {
            epoch,
            entries: MerkleLog::new(),
            frozen: false,
            held: BTreeMap::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn entries(&self) -> &MerkleLog {
        &self.entries
    }

    pub fn len(&self) -> u64 {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> Digest {
        self.entries.root()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    pub fn certificate(&self, leaf_index: u64) -> Option<SignedCertificate> {
        self.entries
            .leaf(leaf_index)
            .and_then(|b| SignedCertificate::decode(b).ok())
    }

    pub fn submit(
        &mut self,
        cert: &SignedCertificate,
        hsm_key: &PublicKey,
    ) -> Result<SubmitOutcome, LogError> {
        if self.frozen {
            return Err(LogError::Frozen { epoch: self.epoch });
        }
        if cert.signer_epoch != self.epoch {
            return Err(LogError::EpochMismatch {
                cert_epoch: cert.signer_epoch,
                log_epoch: self.epoch,
            });
        }
        if !cert.verify(hsm_key) {
            return Err(LogError::BadSignature);
        }
        let bytes = cert.encode();
        let idx = cert.leaf_index;
        let size = self.entries.len();
        if idx < size {
            return if self.entries.leaf(idx) == Some(bytes.as_slice()) {
                Ok(SubmitOutcome::Duplicate)
            } else {
                Err(LogError::Conflict { leaf_index: idx })
            };
        }
        if idx > size {
            return match self.held.get(&idx) {
                Some(prev) if *prev == bytes => Ok(SubmitOutcome::Duplicate),
                Some(_) => Err(LogError::Conflict { leaf_index: idx }),
                None => {
                    self.held.insert(idx, bytes);
                    Ok(SubmitOutcome::Held)
                }
            };
        }
        self.entries.append(bytes);
        let mut count = 1;
        while let Some(next) = self.held.remove(&self.entries.len()) {
            self.entries.append(next);
            count += 1;
        }
        Ok(SubmitOutcome::Appended { count })
    }
}

/// All epochs' logs. Exactly one (the highest epoch) is open for appends
/// unless it has been frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LogServer {
    hsm_key: PublicKey,
    logs: BTreeMap<u64, CertificateLog>,
}

impl LogServer {
    pub fn new(hsm_key: PublicKey, epoch: u64) -> Self {
        Self {
            hsm_key,
            logs: BTreeMap::from([(epoch, CertificateLog::new(epoch))]),
        }
    }

    pub fn hsm_key(&self) -> &PublicKey {
        &self.hsm_key
    }

    pub fn active_epoch(&self) -> u64 {
        *self.logs.keys().next_back().expect("at least one log")
    }

    pub fn active(&self) -> &CertificateLog {
        self.logs.values().next_back().expect("at least one log")
    }

    pub fn log(&self, epoch: u64) -> Option<&CertificateLog> {
        self.logs.get(&epoch)
    }

    pub fn logs(&self) -> impl Iterator<Item = &CertificateLog> {
        self.logs.values()
    }

    pub fn submit(&mut self, cert: &SignedCertificate) -> Result<SubmitOutcome, LogError> {
        let log = self
            .logs
            .get_mut(&cert.signer_epoch)
            .ok_or(LogError::UnknownEpoch(cert.signer_epoch))?;
        log.submit(cert, &self.hsm_key)
    }

    /// Freezes the active log and opens an empty one for the next epoch.
    pub fn rotate(&mut self) -> u64 {
        let epoch = self.active_epoch();
        self.logs.get_mut(&epoch).unwrap().freeze();
        self.logs.insert(epoch + 1, CertificateLog::new(epoch + 1));
        epoch + 1
    }

    pub fn prove(&self, cert: &SignedCertificate) -> Option<InclusionProof> {
        let log = self.logs.get(&cert.signer_epoch)?;
        (log.entries.leaf(cert.leaf_index)? == cert.encode()).then(|| {
            log.entries
                .prove_inclusion(cert.leaf_index)
                .expect("index within log")
        })
    }

    pub fn export(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &ExportRecord| {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        };
        push(&ExportRecord::Hsm {
            public_key: B64.encode(self.hsm_key.encode()),
        });
        for log in self.logs.values() {
            push(&ExportRecord::Log {
                epoch: log.epoch,
                frozen: log.frozen,
                size: log.len(),
                root: log.root(),
            });
            for (i, leaf) in log.entries.leaves().enumerate() {
                push(&ExportRecord::Entry {
                    epoch: log.epoch,
                    leaf_index: i as u64,
                    cert: B64.encode(leaf),
                });
            }
        }
        out
    }

    /// Rebuilds a server from [`export`](Self::export) output, re-verifying
    /// every entry and the declared roots.
    pub fn import(text: &str) -> Result<Self, ExportError> {
        let mut server: Option<LogServer> = None;
        let mut declared: BTreeMap<u64, (bool, u64, Digest)> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| ExportError::Line {
                line: line_no,
                reason,
            };
            let record: ExportRecord =
                serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            match record {
                ExportRecord::Hsm { public_key } => {
                    if server.is_some() {
                        return Err(bad("duplicate hsm record".into()));
                    }
                    let bytes = B64.decode(public_key).map_err(|e| bad(e.to_string()))?;
                    let key = PublicKey::decode(&bytes).map_err(|e| bad(e.to_string()))?;
                    server = Some(LogServer {
                        hsm_key: key,
                        logs: BTreeMap::new(),
                    });
                }
                ExportRecord::Log {
                    epoch,
                    frozen,
                    size,
                    root,
                } => {
                    let s = server
                        .as_mut()
                        .ok_or_else(|| bad("log before hsm record".into()))?;
                    if s.logs.insert(epoch, CertificateLog::new(epoch)).is_some() {
                        return Err(bad(format!("duplicate log for epoch {epoch}")));
                    }
                    declared.insert(epoch, (frozen, size, root));
                }
                ExportRecord::Entry {
                    epoch,
                    leaf_index,
                    cert,
                } => {
                    let s = server
                        .as_mut()
                        .ok_or_else(|| bad("entry before hsm record".into()))?;
                    let key = s.hsm_key.clone();
                    let log = s
                        .logs
                        .get_mut(&epoch)
                        .ok_or_else(|| bad(format!("entry for undeclared epoch {epoch}")))?;
                    let bytes = B64.decode(cert).map_err(|e| bad(e.to_string()))?;
                    let cert = SignedCertificate::decode(&bytes).map_err(|e| bad(e.to_string()))?;
                    if cert.leaf_index != leaf_index || leaf_index != log.len() {
                        return Err(bad(format!("entry {leaf_index} out of order")));
                    }
                    match log.submit(&cert, &key) {
                        Ok(SubmitOutcome::Appended { .. }) => {}
                        Ok(other) => return Err(bad(format!("entry not appended: {other:?}"))),
                        Err(e) => return Err(bad(e.to_string())),
                    }
                }
            }
        }
        let mut server = server.ok_or(ExportError::MissingHsm)?;
        if server.logs.is_empty() {
            return Err(ExportError::NoLogs);
        }
        for (epoch, (frozen, size, root)) in declared {
            let log = server.logs.get_mut(&epoch).unwrap();
            if log.len() != size || log.root() != root {
                return Err(ExportError::RootMismatch { epoch });
            }
            if frozen {
                log.freeze();
            }
        }
        Ok(server)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExportRecord {
    Hsm {
        public_key: String,
    },
    Log {
        epoch: u64,
        frozen: bool,
        size: u64,
        root: Digest,
    },
    Entry {
        epoch: u64,
        leaf_index: u64,
        cert: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExportError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("export has no hsm record")]
    MissingHsm,
    #[error("export has no logs")]
    NoLogs,
    #[error("epoch {epoch} entries do not match the declared size and root")]
    RootMismatch { epoch: u64 },
}

/// Signature check, plus inclusion in the signing epoch's log when a proof
/// is supplied. Any failure yields `false`.
pub fn verify_certificate(
    cert: &SignedCertificate,
    hsm_key: &PublicKey,
    logs: &LogServer,
    proof: Option<&InclusionProof>,
) -> bool {
    if !cert.verify(hsm_key) {
        return false;
    }
    let Some(proof) = proof else {
        return true;
    };
    let Some(log) = logs.log(cert.signer_epoch) else {
        return false;
    };
    if proof.leaf_index != cert.leaf_index {
        return false;
    }
    let Ok(root) = log.entries().root_at(proof.tree_size) else {
        return false;
    };
    verify_inclusion(&root, proof.tree_size, &cert.encode(), proof)
}
