//! Fixed layouts for per-cardinal readable and writable state.
//!
//! Introspective state (44 entries) is split into an interpreted bank
//! of boolean sensors, refreshed once per update and consumed by both
//! programs and the event dispatcher, and a raw bank exposing simulation
//! values directly. Writable state (18 entries) carries the cell's
//! behavioral outputs plus scratch memory. A cardinal's published
//! snapshot (introspective + writable) becomes the facing neighbor's
//! extrospective state.

/// Number of kin levels; fixed at build time.
pub const L: usize = 2;

// -- interpreted introspective sensors --------------------------------------

pub const I_IS_CHILD_CELL_OF: usize = 0;
pub const I_IS_CHILD_GROUP_OF_0: usize = 1;
pub const I_IS_CHILD_GROUP_OF_1: usize = 2;
pub const I_IS_NEWBORN: usize = 3;
pub const I_IS_PARENT_CELL_OF: usize = 4;
pub const I_IS_PARENT_GROUP_OF_0: usize = 5;
pub const I_IS_PARENT_GROUP_OF_1: usize = 6;
pub const I_KIN_GROUP_MATCH_0: usize = 7;
pub const I_KIN_GROUP_MATCH_1: usize = 8;
pub const I_KIN_GROUP_WILL_EXPIRE_0: usize = 9;
pub const I_KIN_GROUP_WILL_EXPIRE_1: usize = 10;
pub const I_NEIGHBOR_APOPTOSIS: usize = 11;
pub const I_NEIGHBOR_FRAGMENTED: usize = 12;
pub const I_NEIGHBOR_IS_NEWBORN: usize = 13;
pub const I_NEIGHBOR_KIN_GROUP_WILL_EXPIRE_0: usize = 14;
pub const I_NEIGHBOR_KIN_GROUP_WILL_EXPIRE_1: usize = 15;
pub const I_NEIGHBOR_OPTIMUM_QUORUM_EXCEEDED_0: usize = 16;
pub const I_NEIGHBOR_OPTIMUM_QUORUM_EXCEEDED_1: usize = 17;
pub const I_OPTIMUM_QUORUM_EXCEEDED_0: usize = 18;
pub const I_OPTIMUM_QUORUM_EXCEEDED_1: usize = 19;
pub const I_PARENT_FRAGMENTED: usize = 20;
pub const I_PHYLOGENETIC_ROOT_MATCH: usize = 21;
pub const I_RICHER_THAN_NEIGHBOR: usize = 22;
pub const I_STOCKPILE_DEPLETED: usize = 23;
pub const I_STOCKPILE_FECUND: usize = 24;

pub const NUM_INTERPRETED: usize = 25;

// -- raw introspective values ------------------------------------------------

pub const I_CELL_AGE: usize = 25;
pub const I_EPOCH: usize = 26;
pub const I_INCOMING_INTER_MESSAGE_COUNTER: usize = 27;
pub const I_INCOMING_INTRA_MESSAGE_COUNTER: usize = 28;
pub const I_IS_ALIVE: usize = 29;
pub const I_KIN_GROUP_AGE_0: usize = 30;
pub const I_KIN_GROUP_AGE_1: usize = 31;
pub const I_KIN_GROUP_ID_ANCESTOR_VIEW_0: usize = 32;
pub const I_KIN_GROUP_ID_ANCESTOR_VIEW_1: usize = 33;
pub const I_KIN_GROUP_ID_VIEW_0: usize = 34;
pub const I_KIN_GROUP_ID_VIEW_1: usize = 35;
pub const I_MOST_RECENT_CAUSE_OF_DEATH: usize = 36;
pub const I_NUM_KNOWN_QUORUM_BITS_0: usize = 37;
pub const I_NUM_KNOWN_QUORUM_BITS_1: usize = 38;
pub const I_PHYLOGENETIC_ROOT_VIEW: usize = 39;
pub const I_RECEIVED_RESOURCE_FROM: usize = 40;
pub const I_RESOURCE_STOCKPILE: usize = 41;
pub const I_SPAWN_COUNT: usize = 42;
pub const I_SPAWNED_FROM: usize = 43;

pub const NUM_INTROSPECTIVE: usize = 44;

pub const INTROSPECTIVE_NAMES: [&str; NUM_INTROSPECTIVE] = [
    "is_child_cell_of",
    "is_child_group_of_0",
    "is_child_group_of_1",
    "is_newborn",
    "is_parent_cell_of",
    "is_parent_group_of_0",
    "is_parent_group_of_1",
    "kin_group_match_0",
    "kin_group_match_1",
    "kin_group_will_expire_0",
    "kin_group_will_expire_1",
    "neighbor_apoptosis",
    "neighbor_fragmented",
    "neighbor_is_newborn",
    "neighbor_kin_group_will_expire_0",
    "neighbor_kin_group_will_expire_1",
    "neighbor_optimum_quorum_exceeded_0",
    "neighbor_optimum_quorum_exceeded_1",
    "optimum_quorum_exceeded_0",
    "optimum_quorum_exceeded_1",
    "parent_fragmented",
    "phylogenetic_root_match",
    "richer_than_neighbor",
    "stockpile_depleted",
    "stockpile_fecund",
    "cell_age",
    "epoch",
    "incoming_inter_message_counter",
    "incoming_intra_message_counter",
    "is_alive",
    "kin_group_age_0",
    "kin_group_age_1",
    "kin_group_id_ancestor_view_0",
    "kin_group_id_ancestor_view_1",
    "kin_group_id_view_0",
    "kin_group_id_view_1",
    "most_recent_cause_of_death",
    "num_known_quorum_bits_0",
    "num_known_quorum_bits_1",
    "phylogenetic_root_view",
    "received_resource_from",
    "resource_stockpile",
    "spawn_count",
    "spawned_from",
];

// -- writable state -----------------------------------------------------------

pub const W_NOP_MEMORY: usize = 0; // 4 slots
pub const W_TRANSIENT_NOP: usize = 4; // 4 slots
pub const W_APOPTOSIS_REQUEST: usize = 8;
pub const W_HEIR_REQUEST: usize = 9;
pub const W_REPLEV_REQUEST_0: usize = 10;
pub const W_REPLEV_REQUEST_1: usize = 11;
pub const W_RESOURCE_RECEIVE_RESISTANCE: usize = 12;
pub const W_RESOURCE_RESERVE_REQUEST: usize = 13;
pub const W_RESOURCE_SEND_LIMIT: usize = 14;
pub const W_RESOURCE_SEND_REQUEST: usize = 15;
pub const W_SPAWN_ARREST: usize = 16;
pub const W_SPAWN_REQUEST: usize = 17;

pub const NUM_WRITABLE: usize = 18;

pub const WRITABLE_NAMES: [&str; NUM_WRITABLE] = [
    "nop_memory_0",
    "nop_memory_1",
    "nop_memory_2",
    "nop_memory_3",
    "transient_nop_0",
    "transient_nop_1",
    "transient_nop_2",
    "transient_nop_3",
    "apoptosis_request",
    "heir_request",
    "replev_request_0",
    "replev_request_1",
    "resource_receive_resistance",
    "resource_reserve_request",
    "resource_send_limit",
    "resource_send_request",
    "spawn_arrest",
    "spawn_request",
];

/// A cardinal's published snapshot: introspective then writable.
pub const PUBLISHED_LEN: usize = NUM_INTROSPECTIVE + NUM_WRITABLE;
/// Extrospective state is the received copy of the neighbor's snapshot.
pub const NUM_EXTROSPECTIVE: usize = PUBLISHED_LEN;
/// Full readable vector: introspective, extrospective, writable.
pub const NUM_READABLE: usize = NUM_INTROSPECTIVE + NUM_EXTROSPECTIVE + NUM_WRITABLE;

pub fn extrospective_name(index: usize) -> String {
    if index < NUM_INTROSPECTIVE {
        format!("neighbor_{}", INTROSPECTIVE_NAMES[index])
    } else {
        format!("neighbor_{}", WRITABLE_NAMES[index - NUM_INTROSPECTIVE])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        assert_eq!(NUM_INTERPRETED, 25);
        assert_eq!(NUM_INTROSPECTIVE, 44);
        assert_eq!(NUM_WRITABLE, 18);
        assert_eq!(NUM_EXTROSPECTIVE, 62);
        assert_eq!(NUM_READABLE, 124);
        assert_eq!(W_SPAWN_REQUEST, NUM_WRITABLE - 1);
        assert_eq!(I_SPAWNED_FROM, NUM_INTROSPECTIVE - 1);
    }
}
