//! Best-effort mailboxes for partition boundaries.
//!
//! One mailbox serves one direction of one shared edge. Publishing
//! merges an outbox into the slot, keeping the most recent value of
//! each stateful field and accumulating consumable flows; pulling takes
//! everything accumulated since the last pull. Neither side ever waits
//! for the other: a paused peer simply leaves stale (or no) data.

use std::sync::Mutex;

use super::cell::{CardinalOutbox, Message};

#[derive(Debug, Default)]
struct EdgeSlot {
    pending: CardinalOutbox,
    has_data: bool,
    publishes: u64,
    consumes: u64,
    last_publisher: Option<(usize, u64)>,
}

#[derive(Debug, Default)]
pub struct EdgeMailbox {
    slot: Mutex<EdgeSlot>,
}

const MAILBOX_MESSAGE_CAP: usize = 64;

impl EdgeMailbox {
    pub fn new() -> EdgeMailbox {
        EdgeMailbox::default()
    }

    /// Merge an outbox; most-recent-value for state, accumulate flows.
    pub fn publish(&self, out: CardinalOutbox, worker: usize, update: u64) {
        let mut slot = self.slot.lock().unwrap();
        let p = &mut slot.pending;
        if out.snapshot.is_some() {
            p.snapshot = out.snapshot;
        }
        if out.meta.is_some() {
            p.meta = out.meta;
        }
        for l in 0..out.quorum.len() {
            if out.quorum[l].is_some() {
                p.quorum[l] = out.quorum[l];
            }
        }
        p.inter_messages.extend(out.inter_messages);
        if p.inter_messages.len() > MAILBOX_MESSAGE_CAP {
            let drop = p.inter_messages.len() - MAILBOX_MESSAGE_CAP;
            p.inter_messages.drain(0..drop);
        }
        p.resource += out.resource;
        p.direct_credit += out.direct_credit;
        if out.spawn.is_some() {
            p.spawn = out.spawn;
        }
        slot.has_data = true;
        slot.publishes += 1;
        slot.last_publisher = Some((worker, update));
    }

    /// Take whatever has accumulated; `None` when nothing arrived since
    /// the last pull.
    pub fn pull(&self) -> Option<CardinalOutbox> {
        let mut slot = self.slot.lock().unwrap();
        if !slot.has_data {
            return None;
        }
        slot.has_data = false;
        slot.consumes += 1;
        // state fields persist (most recent value stays readable) while
        // consumable flows drain
        let mut out = CardinalOutbox {
            snapshot: slot.pending.snapshot.clone(),
            meta: slot.pending.meta,
            quorum: slot.pending.quorum,
            inter_messages: std::mem::take(&mut slot.pending.inter_messages),
            resource: std::mem::take(&mut slot.pending.resource),
            direct_credit: std::mem::take(&mut slot.pending.direct_credit),
            spawn: slot.pending.spawn.take(),
        };
        if out.snapshot.is_none()
            && out.meta.is_none()
            && out.quorum.iter().all(|q| q.is_none())
            && out.inter_messages.is_empty()
            && out.resource == 0.0
            && out.direct_credit == 0.0
            && out.spawn.is_none()
        {
            return None;
        }
        // clear one-shot state so it is not re-delivered every pull
        slot.pending.snapshot = None;
        slot.pending.meta = None;
        slot.pending.quorum = Default::default();
        out.inter_messages.shrink_to(MAILBOX_MESSAGE_CAP);
        Some(out)
    }

    /// (publishes, consumes) so far.
    pub fn stats(&self) -> (u64, u64) {
        let slot = self.slot.lock().unwrap();
        (slot.publishes, slot.consumes)
    }

    /// Provenance stamp of the most recent publish.
    pub fn last_publisher(&self) -> Option<(usize, u64)> {
        self.slot.lock().unwrap().last_publisher
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag::Tag;

    #[test]
    fn publish_accumulates_and_pull_drains() {
        let mb = EdgeMailbox::new();
        assert!(mb.pull().is_none());

        let mut a = CardinalOutbox::default();
        a.resource = 1.5;
        a.inter_messages.push(Message {
            tag: Tag(7),
            payload: [0.0; 8],
        });
        mb.publish(a, 0, 1);

        let mut b = CardinalOutbox::default();
        b.resource = 0.5;
        mb.publish(b, 0, 2);

        let got = mb.pull().expect("data pending");
        assert_eq!(got.resource, 2.0);
        assert_eq!(got.inter_messages.len(), 1);
        assert!(mb.pull().is_none(), "drained");
        assert_eq!(mb.stats().0, 2);
        assert_eq!(mb.last_publisher(), Some((0, 2)));
    }

    #[test]
    fn newest_spawn_packet_wins() {
        use crate::genome::Genome;
        use crate::world::cell::SpawnPacket;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let g = std::sync::Arc::new(Genome::generate_random(4, &mut rng));
        let packet = |lvl| SpawnPacket {
            genome: g.clone(),
            shared_levels: lvl,
            parent_kin_ids: [1, 2],
            parent_ancestor_ids: [0, 0],
            parent_formation_epochs: [0, 0],
            parent_epoch: 0,
        };
        let mb = EdgeMailbox::new();
        let mut a = CardinalOutbox::default();
        a.spawn = Some(packet(1));
        mb.publish(a, 0, 0);
        let mut b = CardinalOutbox::default();
        b.spawn = Some(packet(2));
        mb.publish(b, 0, 1);
        let got = mb.pull().unwrap();
        assert_eq!(got.spawn.unwrap().shared_levels, 2);
    }
}
