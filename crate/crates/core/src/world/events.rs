//! Environment-dispatched events.
//!
//! Each event owns one slot in the genome's 35-entry event tag block.
//! When an event's predicate holds for a cardinal processor, the
//! corresponding tag launches a module through the global table.
//! Predicates read the refreshed sensor banks rather than raw
//! simulation state, so sensor perturbations also disturb event
//! handling.

use crate::genome::NUM_EVENT_TAGS;

use super::state::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Always,
    IsChildCellOf,
    IsChildGroupOf(usize),
    IsNewborn,
    IsParentCellOf,
    KinGroupMatch(usize),
    KinGroupMismatch(usize),
    KinGroupWillExpire(usize),
    KinGroupWillNotExpire(usize),
    NeighborApoptosis,
    NeighborFragmented,
    NeighborIsAlive,
    NeighborIsNewborn,
    NeighborIsNotAlive,
    NeighborKinGroupWillExpire(usize),
    NeighborOptimumQuorumExceeded(usize),
    OptimumQuorumExceeded(usize),
    OptimumQuorumNotExceeded(usize),
    ParentFragmented,
    PhylogeneticRootMatch,
    PhylogeneticRootMismatch,
    PoorerThanNeighbor,
    ReceivedResourceFrom,
    RicherThanNeighbor,
    StockpileDepleted,
    StockpileFecund,
}

/// Canonical event order; the index into this table is the index into
/// the genome's event tag block.
pub const EVENT_ORDER: [EventKind; NUM_EVENT_TAGS] = [
    EventKind::Always,
    EventKind::IsChildCellOf,
    EventKind::IsChildGroupOf(0),
    EventKind::IsChildGroupOf(1),
    EventKind::IsNewborn,
    EventKind::IsParentCellOf,
    EventKind::KinGroupMatch(0),
    EventKind::KinGroupMatch(1),
    EventKind::KinGroupMismatch(0),
    EventKind::KinGroupMismatch(1),
    EventKind::KinGroupWillExpire(0),
    EventKind::KinGroupWillExpire(1),
    EventKind::KinGroupWillNotExpire(0),
    EventKind::KinGroupWillNotExpire(1),
    EventKind::NeighborApoptosis,
    EventKind::NeighborFragmented,
    EventKind::NeighborIsAlive,
    EventKind::NeighborIsNewborn,
    EventKind::NeighborIsNotAlive,
    EventKind::NeighborKinGroupWillExpire(0),
    EventKind::NeighborKinGroupWillExpire(1),
    EventKind::NeighborOptimumQuorumExceeded(0),
    EventKind::NeighborOptimumQuorumExceeded(1),
    EventKind::OptimumQuorumExceeded(0),
    EventKind::OptimumQuorumExceeded(1),
    EventKind::OptimumQuorumNotExceeded(0),
    EventKind::OptimumQuorumNotExceeded(1),
    EventKind::ParentFragmented,
    EventKind::PhylogeneticRootMatch,
    EventKind::PhylogeneticRootMismatch,
    EventKind::PoorerThanNeighbor,
    EventKind::ReceivedResourceFrom,
    EventKind::RicherThanNeighbor,
    EventKind::StockpileDepleted,
    EventKind::StockpileFecund,
];

pub fn event_index(kind: EventKind) -> usize {
    EVENT_ORDER.iter().position(|&k| k == kind).unwrap()
}

fn truthy(v: f32) -> bool {
    v != 0.0
}

/// Evaluate an event predicate against a cardinal's sensor banks.
///
/// `intro` is the cardinal's 44-entry introspective bank; `extro` is
/// the received neighbor snapshot (empty until the neighbor publishes).
pub fn event_active(kind: EventKind, intro: &[f32], extro: &[f32]) -> bool {
    let ex = |i: usize| extro.get(i).copied().unwrap_or(0.0);
    match kind {
        EventKind::Always => true,
        EventKind::IsChildCellOf => truthy(intro[I_IS_CHILD_CELL_OF]),
        EventKind::IsChildGroupOf(l) => truthy(intro[I_IS_CHILD_GROUP_OF_0 + l]),
        EventKind::IsNewborn => truthy(intro[I_IS_NEWBORN]),
        EventKind::IsParentCellOf => truthy(intro[I_IS_PARENT_CELL_OF]),
        EventKind::KinGroupMatch(l) => truthy(intro[I_KIN_GROUP_MATCH_0 + l]),
        EventKind::KinGroupMismatch(l) => !truthy(intro[I_KIN_GROUP_MATCH_0 + l]),
        EventKind::KinGroupWillExpire(l) => truthy(intro[I_KIN_GROUP_WILL_EXPIRE_0 + l]),
        EventKind::KinGroupWillNotExpire(l) => !truthy(intro[I_KIN_GROUP_WILL_EXPIRE_0 + l]),
        EventKind::NeighborApoptosis => truthy(intro[I_NEIGHBOR_APOPTOSIS]),
        EventKind::NeighborFragmented => truthy(intro[I_NEIGHBOR_FRAGMENTED]),
        EventKind::NeighborIsAlive => truthy(ex(I_IS_ALIVE)),
        EventKind::NeighborIsNewborn => truthy(intro[I_NEIGHBOR_IS_NEWBORN]),
        EventKind::NeighborIsNotAlive => !truthy(ex(I_IS_ALIVE)),
        EventKind::NeighborKinGroupWillExpire(l) => {
            truthy(intro[I_NEIGHBOR_KIN_GROUP_WILL_EXPIRE_0 + l])
        }
        EventKind::NeighborOptimumQuorumExceeded(l) => {
            truthy(intro[I_NEIGHBOR_OPTIMUM_QUORUM_EXCEEDED_0 + l])
        }
        EventKind::OptimumQuorumExceeded(l) => truthy(intro[I_OPTIMUM_QUORUM_EXCEEDED_0 + l]),
        EventKind::OptimumQuorumNotExceeded(l) => !truthy(intro[I_OPTIMUM_QUORUM_EXCEEDED_0 + l]),
        EventKind::ParentFragmented => truthy(intro[I_PARENT_FRAGMENTED]),
        EventKind::PhylogeneticRootMatch => truthy(intro[I_PHYLOGENETIC_ROOT_MATCH]),
        EventKind::PhylogeneticRootMismatch => !truthy(intro[I_PHYLOGENETIC_ROOT_MATCH]),
        EventKind::PoorerThanNeighbor => {
            intro[I_RESOURCE_STOCKPILE] < ex(I_RESOURCE_STOCKPILE) && !extro.is_empty()
        }
        EventKind::ReceivedResourceFrom => intro[I_RECEIVED_RESOURCE_FROM] > 0.0,
        EventKind::RicherThanNeighbor => truthy(intro[I_RICHER_THAN_NEIGHBOR]),
        EventKind::StockpileDepleted => truthy(intro[I_STOCKPILE_DEPLETED]),
        EventKind::StockpileFecund => truthy(intro[I_STOCKPILE_FECUND]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_order_is_a_bijection_with_the_tag_block() {
        assert_eq!(EVENT_ORDER.len(), NUM_EVENT_TAGS);
        for (i, &k) in EVENT_ORDER.iter().enumerate() {
            assert_eq!(event_index(k), i);
        }
    }

    #[test]
    fn always_fires_and_complements_disagree() {
        let intro = [0.0f32; NUM_INTROSPECTIVE];
        let extro: [f32; 0] = [];
        assert!(event_active(EventKind::Always, &intro, &extro));
        // dead / absent neighbor
        assert!(event_active(EventKind::NeighborIsNotAlive, &intro, &extro));
        assert!(!event_active(EventKind::NeighborIsAlive, &intro, &extro));
    }

    #[test]
    fn stockpile_fecund_reads_the_sensor() {
        let mut intro = [0.0f32; NUM_INTROSPECTIVE];
        let extro: [f32; 0] = [];
        assert!(!event_active(EventKind::StockpileFecund, &intro, &extro));
        intro[I_STOCKPILE_FECUND] = 1.0;
        assert!(event_active(EventKind::StockpileFecund, &intro, &extro));
    }
}
