use parking_lot::Mutex;
use serde::Serialize;

use crate::clock::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub at: Timestamp,
    pub event: String,
    pub detail: String,
}

/// Append-only in-memory audit trail. Entries are mirrored to `tracing`.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn record(&self, at: Timestamp, event: &str, detail: impl Into<String>) {
        let detail = detail.into();
        tracing::warn!(target: "audit", event, %detail);
        self.entries.lock().push(AuditEntry {
            at,
            event: event.to_string(),
            detail,
        });
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().clone()
    }
}
