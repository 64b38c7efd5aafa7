use super::log::LogServer;
use crate::crypto::{derive_key, ChannelKey, PrgState};

/// Offline copy of the channel-key ratchet. The snapshot is private; the
/// only way to use it is [`reset_procedure`].
pub struct OfflineVault {
    ratchet_snapshot: PrgState,
}

impl std::fmt::Debug for OfflineVault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OfflineVault")
            .field("epoch", &self.ratchet_snapshot.counter)
            .finish_non_exhaustive()
    }
}

impl OfflineVault {
    /// Stores the ratchet state for the epoch currently in use.
    pub fn seal(ratchet_snapshot: PrgState) -> Self {
        Self { ratchet_snapshot }
    }

    pub fn epoch(&self) -> u64 {
        self.ratchet_snapshot.counter
    }
}

/// Derives the next channel key from the vault, advances the stored
/// snapshot, freezes the active log and opens the next epoch's log.
pub fn reset_procedure(vault: OfflineVault, logs: &mut LogServer) -> (ChannelKey, OfflineVault) {
    let (_, next) = derive_key(&vault.ratchet_snapshot);
    let key = next.key();
    logs.rotate();
    (key, OfflineVault::seal(next))
}
