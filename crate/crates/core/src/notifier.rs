//! Per-subject mailboxes for access outcomes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Timestamp, VirtualId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotifyError {
    #[error("subject {0} already notified about {1}")]
    DuplicateNotification(VirtualId, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Allowed,
    Denied,
    Deleted,
    ConsentRenewalRequested,
    /// A legal-basis grant was extended to a new purpose.
    PurposeExtended,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Allowed => "Allowed",
            Outcome::Denied => "Denied",
            Outcome::Deleted => "Deleted",
            Outcome::ConsentRenewalRequested => "ConsentRenewalRequested",
            Outcome::PurposeExtended => "PurposeExtended",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Outcome::Allowed,
            Outcome::Denied,
            Outcome::Deleted,
            Outcome::ConsentRenewalRequested,
            Outcome::PurposeExtended,
        ]
        .into_iter()
        .find(|o| o.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub notif_id: u64,
    pub subject_vid: VirtualId,
    pub request_id: String,
    pub outcome: Outcome,
    pub summary: String,
    pub created_at: Timestamp,
    pub delivered: bool,
}

/// Mailboxes keyed by virtual identifier; a subject only ever sees its own.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Notifier {
    next_id: u64,
    mailboxes: BTreeMap<VirtualId, Vec<Notification>>,
    sent: BTreeSet<(VirtualId, String)>,
}

impl Notifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(
        &mut self,
        subject_vid: &VirtualId,
        request_id: &str,
        outcome: Outcome,
        summary: String,
        now: Timestamp,
    ) -> Result<&Notification, NotifyError> {
        let key = (subject_vid.clone(), String::from(request_id));
        if self.sent.contains(&key) {
            return Err(NotifyError::DuplicateNotification(key.0, key.1));
        }
        self.sent.insert(key);
        self.next_id += 1;
        let mailbox = self.mailboxes.entry(subject_vid.clone()).or_default();
        mailbox.push(Notification {
            notif_id: self.next_id,
            subject_vid: subject_vid.clone(),
            request_id: request_id.into(),
            outcome,
            summary,
            created_at: now,
            delivered: false,
        });
        Ok(mailbox.last().unwrap())
    }

    /// Undelivered notifications for `subject_vid` in enqueue order; marks them delivered.
    pub fn fetch(&mut self, subject_vid: &VirtualId) -> Vec<Notification> {
        let Some(mailbox) = self.mailboxes.get_mut(subject_vid) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for n in mailbox.iter_mut().filter(|n| !n.delivered) {
            n.delivered = true;
            out.push(n.clone());
        }
        out
    }

    /// Full mailbox without changing delivery state.
    pub fn mailbox(&self, subject_vid: &VirtualId) -> &[Notification] {
        self.mailboxes.get(subject_vid).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all(&self) -> impl Iterator<Item = &Notification> {
        self.mailboxes.values().flatten()
    }

    pub fn pairs(&self) -> &BTreeSet<(VirtualId, String)> {
        &self.sent
    }

    pub fn len(&self) -> usize {
        self.sent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sent.is_empty()
    }

    pub fn snapshot(&self) -> Vec<Notification> {
        let mut all: Vec<Notification> = self.all().cloned().collect();
        all.sort_by_key(|n| n.notif_id);
        all
    }

    pub fn from_snapshot(notifications: Vec<Notification>) -> Self {
        let mut n = Notifier::new();
        for note in notifications {
            n.next_id = n.next_id.max(note.notif_id);
            n.sent.insert((note.subject_vid.clone(), note.request_id.clone()));
            n.mailboxes.entry(note.subject_vid.clone()).or_default().push(note);
        }
        n
    }
}
