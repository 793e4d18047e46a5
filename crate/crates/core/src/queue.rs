//! Human-oracle ticket queue, persisted as JSON lines.
//!
//! Status moves pending → claimed → submitted → resolved, and claimed →
//! pending when a lease runs out. Lease expiry is evaluated lazily against
//! the `now` passed to each operation, in milliseconds since the epoch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_edits, Edit};
use crate::io;
use crate::oracle::{AnnotationRecord, AnnotationSource};
use crate::types::LabelMask;

pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;

/// The five assets every ticket carries.
pub const ASSET_NAMES: [&str; 5] = ["raw", "initial_seg", "eem_overlay", "prompts", "palette"];

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Pending,
    Claimed,
    Submitted,
    Resolved,
}

impl TicketStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TicketStatus::Pending => "pending",
            TicketStatus::Claimed => "claimed",
            TicketStatus::Submitted => "submitted",
            TicketStatus::Resolved => "resolved",
        }
    }

    /// Whether `self → next` is one of the declared edges.
    pub fn can_become(self, next: TicketStatus) -> bool {
        use TicketStatus::*;
        matches!(
            (self, next),
            (Pending, Claimed) | (Claimed, Submitted) | (Submitted, Resolved) | (Claimed, Pending)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator_id: String,
    pub edits: Vec<Edit>,
    pub submitted_at: u64,
    pub record: AnnotationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub ticket_id: String,
    pub sample_id: String,
    pub cycle: usize,
    pub status: TicketStatus,
    pub lease_expiry: Option<u64>,
    /// Current holder while claimed; the last holder after a lease lapses.
    pub annotator_id: Option<String>,
    pub claimed_at: Option<u64>,
    /// Name → path relative to the run directory.
    pub asset_refs: BTreeMap<String, String>,
    /// Initial segmentation as a label PNG, relative to the run directory.
    pub initial_mask: String,
    pub top_score: f64,
    pub num_prompts: usize,
    pub submission: Option<Submission>,
}

/// Queue summary entry, as listed to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketSummary {
    pub ticket_id: String,
    pub sample_id: String,
    pub cycle: usize,
    pub status: TicketStatus,
    pub lease_expiry: Option<u64>,
    pub annotator_id: Option<String>,
    pub top_score: f64,
    pub asset_refs: BTreeMap<String, String>,
}

impl From<&Ticket> for TicketSummary {
    fn from(t: &Ticket) -> Self {
        TicketSummary {
            ticket_id: t.ticket_id.clone(),
            sample_id: t.sample_id.clone(),
            cycle: t.cycle,
            status: t.status,
            lease_expiry: t.lease_expiry,
            annotator_id: t.annotator_id.clone(),
            top_score: t.top_score,
            asset_refs: t.asset_refs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Queue {
    path: PathBuf,
    pub lease_ms: u64,
    tickets: Vec<Ticket>,
}

impl Queue {
    pub fn in_memory(path: impl Into<PathBuf>) -> Self {
        Queue {
            path: path.into(),
            lease_ms: DEFAULT_LEASE_MS,
            tickets: Vec::new(),
        }
    }

    /// Loads the queue file, or starts empty if it does not exist.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut q = Queue::in_memory(&path);
        if !path.exists() {
            return Ok(q);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let t: Ticket = serde_json::from_str(trimmed).map_err(|e| Error::CorruptInput {
                    offset: offset + e.column().saturating_sub(1),
                    reason: e.to_string(),
                })?;
                q.tickets.push(t);
            }
            offset += line.len();
        }
        Ok(q)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn save(&self) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.tickets {
            serde_json::to_writer(&mut out, t)?;
            out.push(b'\n');
        }
        io::write_atomic(&self.path, &out)
    }

    pub fn tickets(&self) -> &[Ticket] {
        &self.tickets
    }

    pub fn get(&self, id: &str) -> Option<&Ticket> {
        self.tickets.iter().find(|t| t.ticket_id == id)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut Ticket> {
        self.tickets
            .iter_mut()
            .find(|t| t.ticket_id == id)
            .ok_or_else(|| Error::UnknownTicket(id.to_string()))
    }

    /// Reverts claims whose lease has run out. Returns how many lapsed.
    pub fn expire(&mut self, now: u64) -> usize {
        let mut n = 0;
        for t in &mut self.tickets {
            if t.status == TicketStatus::Claimed && t.lease_expiry.is_some_and(|e| e <= now) {
                t.status = TicketStatus::Pending;
                t.lease_expiry = None;
                t.claimed_at = None;
                n += 1;
            }
        }
        n
    }

    pub fn enqueue(&mut self, ticket: Ticket) -> Result<()> {
        let open = self
            .tickets
            .iter()
            .any(|t| t.sample_id == ticket.sample_id && t.status != TicketStatus::Resolved);
        if open || self.get(&ticket.ticket_id).is_some() {
            return Err(Error::DuplicateTicket(ticket.sample_id));
        }
        self.tickets.push(ticket);
        Ok(())
    }

    /// Pending and claimed tickets of `cycle` (all cycles when `None`),
    /// highest top-prompt score first.
    pub fn active(&mut self, cycle: Option<usize>, now: u64) -> Vec<TicketSummary> {
        self.expire(now);
        let mut out: Vec<TicketSummary> = self
            .tickets
            .iter()
            .filter(|t| matches!(t.status, TicketStatus::Pending | TicketStatus::Claimed))
            .filter(|t| cycle.is_none_or(|c| t.cycle == c))
            .map(TicketSummary::from)
            .collect();
        out.sort_by(|a, b| b.top_score.total_cmp(&a.top_score).then_with(|| a.ticket_id.cmp(&b.ticket_id)));
        out
    }

    pub fn claim(&mut self, id: &str, annotator: &str, now: u64) -> Result<Ticket> {
        self.expire(now);
        let lease = self.lease_ms;
        let t = self.get_mut(id)?;
        if t.status != TicketStatus::Pending {
            return Err(Error::TicketConflict {
                id: id.to_string(),
                status: t.status.as_str().into(),
                action: "claim".into(),
            });
        }
        t.status = TicketStatus::Claimed;
        t.annotator_id = Some(annotator.to_string());
        t.claimed_at = Some(now);
        t.lease_expiry = Some(now + lease);
        Ok(t.clone())
    }

    /// Merges `edits` onto the initial segmentation and records the
    /// submission. The caller supplies the initial mask (read from
    /// `ticket.initial_mask`).
    pub fn submit(&mut self, id: &str, annotator: &str, edits: Vec<Edit>, initial: &LabelMask, now: u64) -> Result<AnnotationRecord> {
        let was_claimed_by_me = self
            .get(id)
            .is_some_and(|t| t.status == TicketStatus::Claimed && t.annotator_id.as_deref() == Some(annotator));
        self.expire(now);
        let t = self.get_mut(id)?;
        if t.status == TicketStatus::Pending && (was_claimed_by_me || t.annotator_id.as_deref() == Some(annotator)) {
            return Err(Error::LeaseExpired(id.to_string()));
        }
        if t.status != TicketStatus::Claimed || t.annotator_id.as_deref() != Some(annotator) {
            return Err(Error::TicketConflict {
                id: id.to_string(),
                status: t.status.as_str().into(),
                action: "submit".into(),
            });
        }
        if edits.is_empty() {
            return Err(Error::Geometry("annotation has no edits".into()));
        }
        let corrected = apply_edits(initial, &edits)?;
        let record = AnnotationRecord {
            sample_id: t.sample_id.clone(),
            corrected,
            regions_covered: (1..=t.num_prompts).collect(),
            source: AnnotationSource::Human,
            annotator_id: Some(annotator.to_string()),
            elapsed: t.claimed_at.map(|c| now.saturating_sub(c) as f64 / 1000.0).unwrap_or(0.0),
        };
        t.status = TicketStatus::Submitted;
        t.lease_expiry = None;
        t.submission = Some(Submission {
            annotator_id: annotator.to_string(),
            edits,
            submitted_at: now,
            record: record.clone(),
        });
        Ok(record)
    }

    pub fn resolve(&mut self, id: &str) -> Result<AnnotationRecord> {
        let t = self.get_mut(id)?;
        if t.status != TicketStatus::Submitted {
            return Err(Error::TicketConflict {
                id: id.to_string(),
                status: t.status.as_str().into(),
                action: "resolve".into(),
            });
        }
        t.status = TicketStatus::Resolved;
        Ok(t.submission.as_ref().expect("submitted tickets carry a submission").record.clone())
    }

    /// Tickets of `cycle`, in queue order.
    pub fn for_cycle(&self, cycle: usize) -> impl Iterator<Item = &Ticket> {
        self.tickets.iter().filter(move |t| t.cycle == cycle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ticket(id: &str, score: f64) -> Ticket {
        Ticket {
            ticket_id: format!("c1-{id}"),
            sample_id: id.into(),
            cycle: 1,
            status: TicketStatus::Pending,
            lease_expiry: None,
            annotator_id: None,
            claimed_at: None,
            asset_refs: BTreeMap::new(),
            initial_mask: String::new(),
            top_score: score,
            num_prompts: 1,
            submission: None,
        }
    }

    fn brush() -> Vec<Edit> {
        vec![Edit::Brush {
            class_id: 1,
            runs: vec![[0, 0, 2]],
        }]
    }

    #[test]
    fn listing_is_by_descending_score() {
        let mut q = Queue::in_memory("/nonexistent/q.jsonl");
        for (id, s) in [("a", 0.2), ("b", 0.9), ("c", 0.5)] {
            q.enqueue(ticket(id, s)).unwrap();
        }
        let ids: Vec<_> = q.active(None, 0).into_iter().map(|t| t.sample_id).collect();
        assert_eq!(ids, vec!["b", "c", "a"]);
    }

    #[test]
    fn duplicate_sample_rejected() {
        let mut q = Queue::in_memory("q");
        q.enqueue(ticket("a", 0.1)).unwrap();
        assert!(matches!(q.enqueue(ticket("a", 0.1)), Err(Error::DuplicateTicket(_))));
    }

    #[test]
    fn claim_conflict_and_lease_expiry() {
        let mut q = Queue::in_memory("q");
        q.enqueue(ticket("a", 0.1)).unwrap();
        let t = q.claim("c1-a", "ann", 1000).unwrap();
        assert_eq!(t.lease_expiry, Some(1000 + DEFAULT_LEASE_MS));
        assert!(matches!(q.claim("c1-a", "other", 2000), Err(Error::TicketConflict { .. })));
        let init = LabelMask::filled((4, 4), 0, 3);
        let late = 1000 + DEFAULT_LEASE_MS;
        assert!(matches!(q.submit("c1-a", "ann", brush(), &init, late), Err(Error::LeaseExpired(_))));
        assert_eq!(q.get("c1-a").unwrap().status, TicketStatus::Pending);
        q.claim("c1-a", "other", late).unwrap();
        let rec = q.submit("c1-a", "other", brush(), &init, late + 5).unwrap();
        assert_eq!(rec.corrected.labels[[0, 1]], 1);
        assert_eq!(q.resolve("c1-a").unwrap(), rec);
        assert!(q.resolve("c1-a").is_err());
    }

    #[test]
    fn persists_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.jsonl");
        let mut q = Queue::open(&path).unwrap();
        q.enqueue(ticket("a", 0.1)).unwrap();
        q.enqueue(ticket("b", 0.2)).unwrap();
        q.claim("c1-b", "x", 5).unwrap();
        q.submit("c1-b", "x", brush(), &LabelMask::filled((4, 4), 0, 3), 9).unwrap();
        q.save().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(Queue::open(&path).unwrap().tickets(), q.tickets());
    }
}
