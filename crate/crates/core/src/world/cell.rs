//! Tiles, cells, cardinal processors, and their exchange packets.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::genome::Genome;
use crate::tag::Tag;
use crate::vm::{CpuState, ProgramLayout, NUM_REGISTERS};

use super::state::*;

pub const NUM_CARDINALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

pub const DIRS: [Dir; NUM_CARDINALS] = [Dir::North, Dir::East, Dir::South, Dir::West];

impl Dir {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Dir {
        DIRS[i % NUM_CARDINALS]
    }

    pub fn opposite(self) -> Dir {
        match self {
            Dir::North => Dir::South,
            Dir::East => Dir::West,
            Dir::South => Dir::North,
            Dir::West => Dir::East,
        }
    }

    /// Step on the torus.
    pub fn offset(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        match self {
            Dir::North => (x, (y + h - 1) % h),
            Dir::South => (x, (y + 1) % h),
            Dir::East => ((x + 1) % w, y),
            Dir::West => ((x + w - 1) % w, y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CauseOfDeath {
    None,
    Elimination,
    Apoptosis,
    Fragmentation,
    Age,
}

impl CauseOfDeath {
    pub fn code(self) -> f32 {
        match self {
            CauseOfDeath::None => 0.0,
            CauseOfDeath::Elimination => 1.0,
            CauseOfDeath::Apoptosis => 2.0,
            CauseOfDeath::Fragmentation => 3.0,
            CauseOfDeath::Age => 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Message {
    pub tag: Tag,
    pub payload: [f32; NUM_REGISTERS],
}

/// Genome plus the kin decisions and bookkeeping a newborn needs.
#[derive(Clone, Debug)]
pub struct SpawnPacket {
    pub genome: Arc<Genome>,
    /// Kin levels the child shares with the parent (0, 1, or 2).
    pub shared_levels: usize,
    pub parent_kin_ids: [u64; L],
    pub parent_ancestor_ids: [u64; L],
    pub parent_formation_epochs: [u64; L],
    pub parent_epoch: u64,
}

/// Per-level quorum bookkeeping: own fixed bit, OR-merged known bits,
/// and which direction each non-self bit was first learned from.
#[derive(Clone, Debug)]
pub struct QuorumLevel {
    pub own_bit: Option<u8>,
    pub known: u64,
    pub learned_from: [Option<Dir>; 64],
}

impl Default for QuorumLevel {
    fn default() -> QuorumLevel {
        QuorumLevel {
            own_bit: None,
            known: 0,
            learned_from: [None; 64],
        }
    }
}

impl QuorumLevel {
    pub fn count(&self) -> usize {
        self.known.count_ones() as usize
    }

    pub fn non_self_count(&self) -> usize {
        let own_mask = self.own_bit.map_or(0, |b| 1u64 << b);
        (self.known & !own_mask).count_ones() as usize
    }
}

/// Per-level quorum broadcast: group identity plus known bits.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuorumBroadcast {
    pub group_id: u64,
    pub bits: u64,
}

/// Exact neighbor facts published every update alongside the lossy
/// float snapshot, keyed to the receiving edge.
#[derive(Clone, Copy, Debug)]
pub struct NeighborMeta {
    pub alive: bool,
    pub kin_ids: [u64; L],
    pub ancestor_ids: [u64; L],
    pub root_id: u64,
    pub age: u64,
    pub epoch: u64,
    pub stockpile: f64,
    pub cause_of_death: CauseOfDeath,
    pub group_ages: [u64; L],
    pub quorum_counts: [usize; L],
    /// The published cell was spawned from the cell receiving this meta.
    pub spawned_from_you: bool,
}

impl Default for NeighborMeta {
    fn default() -> NeighborMeta {
        NeighborMeta {
            alive: false,
            kin_ids: [0; L],
            ancestor_ids: [0; L],
            root_id: 0,
            age: 0,
            epoch: 0,
            stockpile: 0.0,
            cause_of_death: CauseOfDeath::None,
            group_ages: [0; L],
            quorum_counts: [0; L],
            spawned_from_you: false,
        }
    }
}

/// Most-recent-value inputs a cardinal holds from its facing neighbor,
/// plus accumulating consumable flows.
#[derive(Clone, Debug, Default)]
pub struct CardinalInput {
    pub snapshot: Vec<f32>,
    pub meta: Option<NeighborMeta>,
    pub quorum: [Option<QuorumBroadcast>; L],
    pub inter_messages: VecDeque<Message>,
    pub resource_in: f64,
    /// Refunds and apoptosis recoveries: credited without receipt decay.
    pub direct_credit: f64,
    pub spawn_in: Option<SpawnPacket>,
}

const MESSAGE_QUEUE_CAP: usize = 64;

impl CardinalInput {
    pub fn push_inter_message(&mut self, m: Message) {
        if self.inter_messages.len() >= MESSAGE_QUEUE_CAP {
            self.inter_messages.pop_front();
        }
        self.inter_messages.push_back(m);
    }
}

/// Staged outputs of one cardinal, drained after its cell updates.
#[derive(Clone, Debug, Default)]
pub struct CardinalOutbox {
    pub snapshot: Option<Vec<f32>>,
    pub meta: Option<NeighborMeta>,
    pub quorum: [Option<QuorumBroadcast>; L],
    pub inter_messages: Vec<Message>,
    pub resource: f64,
    pub direct_credit: f64,
    pub spawn: Option<SpawnPacket>,
}

impl CardinalOutbox {
    pub fn is_empty(&self) -> bool {
        self.snapshot.is_none()
            && self.meta.is_none()
            && self.quorum.iter().all(|q| q.is_none())
            && self.inter_messages.is_empty()
            && self.resource == 0.0
            && self.direct_credit == 0.0
            && self.spawn.is_none()
    }
}

/// One cardinal processor: a CPU facing one neighbor, with its own
/// sensor banks, writable state, queues, and staged outputs.
#[derive(Clone, Debug)]
pub struct Cardinal {
    pub cpu: CpuState,
    pub intro: [f32; NUM_INTROSPECTIVE],
    pub writable: [f32; NUM_WRITABLE],
    pub input: CardinalInput,
    pub outbox: CardinalOutbox,
    pub intra_messages: VecDeque<Message>,
    pub inter_message_counter: u64,
    pub intra_message_counter: u64,
    /// Resource received from this neighbor on the latest receive tick.
    pub received_resource_from: f64,
}

impl Cardinal {
    fn new(layout: Arc<ProgramLayout>, max_cores: usize) -> Cardinal {
        Cardinal {
            cpu: CpuState::new(layout, max_cores),
            intro: [0.0; NUM_INTROSPECTIVE],
            writable: [0.0; NUM_WRITABLE],
            input: CardinalInput::default(),
            outbox: CardinalOutbox::default(),
            intra_messages: VecDeque::new(),
            inter_message_counter: 0,
            intra_message_counter: 0,
            received_resource_from: 0.0,
        }
    }

    pub fn push_intra_message(&mut self, m: Message) {
        if self.intra_messages.len() >= MESSAGE_QUEUE_CAP {
            self.intra_messages.pop_front();
        }
        self.intra_messages.push_back(m);
    }

    /// The 62-entry snapshot other cells may read.
    pub fn published_snapshot(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(PUBLISHED_LEN);
        out.extend_from_slice(&self.intro);
        out.extend_from_slice(&self.writable);
        out
    }
}

/// Hereditary group membership at both kin levels.
#[derive(Clone, Copy, Debug, Default)]
pub struct KinState {
    pub ids: [u64; L],
    pub ancestor_ids: [u64; L],
    pub formation_epochs: [u64; L],
}

/// One grid tile. Some fields survive the resident cell's death (the
/// tile remembers its most recent cause of death).
#[derive(Clone, Debug)]
pub struct Tile {
    pub alive: bool,
    pub genome: Arc<Genome>,
    pub layout: Arc<ProgramLayout>,
    pub cardinals: [Cardinal; NUM_CARDINALS],
    pub stockpile: f64,
    pub kin: KinState,
    pub quorum: [QuorumLevel; L],
    pub age: u64,
    pub birth_epoch: u64,
    pub epoch: u64,
    pub spawned_from: Option<Dir>,
    pub spawn_counts: [u64; NUM_CARDINALS],
    pub most_recent_death: CauseOfDeath,
}

impl Tile {
    pub fn empty() -> Tile {
        let genome = Arc::new(Genome {
            program: vec![crate::ops::Instruction::nop()],
            event_tags: [Tag(0); crate::genome::NUM_EVENT_TAGS],
            root_id: 0,
            stint_root_id: 0,
            generation_counters: [0; L + 1],
            mutation_counts: Default::default(),
        });
        let layout = Arc::new(ProgramLayout::analyze(&genome.program));
        Tile {
            alive: false,
            cardinals: std::array::from_fn(|_| Cardinal::new(layout.clone(), 16)),
            genome,
            layout,
            stockpile: 0.0,
            kin: KinState::default(),
            quorum: std::array::from_fn(|_| QuorumLevel::default()),
            age: 0,
            birth_epoch: 0,
            epoch: 0,
            spawned_from: None,
            spawn_counts: [0; NUM_CARDINALS],
            most_recent_death: CauseOfDeath::None,
        }
    }

    /// Install a genome and bring the tile to life.
    #[allow(clippy::too_many_arguments)]
    pub fn make_alive<R: Rng>(
        &mut self,
        genome: Arc<Genome>,
        kin: KinState,
        stockpile: f64,
        epoch: u64,
        spawned_from: Option<Dir>,
        max_cores: usize,
        p_set_quorum_bit: f64,
        rng: &mut R,
    ) {
        let layout = Arc::new(ProgramLayout::analyze(&genome.program));
        self.genome = genome;
        self.layout = layout.clone();
        for c in &mut self.cardinals {
            let input = std::mem::take(&mut c.input);
            *c = Cardinal::new(layout.clone(), max_cores);
            // the neighbor-facing channel outlives the resident
            c.input = input;
        }
        self.alive = true;
        self.stockpile = stockpile;
        self.kin = kin;
        self.age = 0;
        self.birth_epoch = epoch;
        self.epoch = epoch;
        self.spawned_from = spawned_from;
        self.spawn_counts = [0; NUM_CARDINALS];
        for (level, q) in self.quorum.iter_mut().enumerate() {
            *q = QuorumLevel::default();
            let set = p_set_quorum_bit >= 1.0 || rng.gen::<f64>() < p_set_quorum_bit;
            if set {
                let bit = if level == 0 {
                    rng.gen_range(0..64u8)
                } else {
                    level1_quorum_bit(self.kin.ids[0])
                };
                q.own_bit = Some(bit);
                q.known = 1u64 << bit;
            }
        }
    }

    /// Death routine: writable state zeroed, cores purged, quorum
    /// knowledge dropped. The stockpile is the caller's responsibility
    /// (it flows through the resource ledger).
    pub fn kill(&mut self, cause: CauseOfDeath) {
        self.alive = false;
        self.most_recent_death = cause;
        self.stockpile = 0.0;
        self.kin = KinState::default();
        self.spawned_from = None;
        for q in &mut self.quorum {
            *q = QuorumLevel::default();
        }
        for c in &mut self.cardinals {
            c.cpu.purge_cores();
            c.cpu.tables.reset_regulators();
            c.writable = [0.0; NUM_WRITABLE];
            c.intro = [0.0; NUM_INTROSPECTIVE];
            c.intra_messages.clear();
            c.inter_message_counter = 0;
            c.intra_message_counter = 0;
            c.received_resource_from = 0.0;
        }
    }

    pub fn quorum_count(&self, level: usize) -> usize {
        self.quorum[level].count()
    }
}

/// The highest-level quorum bit is a deterministic function of the
/// lowest-level kin group ID.
pub fn level1_quorum_bit(group_id_0: u64) -> u8 {
    // splitmix64 finalizer
    let mut z = group_id_0.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) as u8 % 64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_geometry() {
        for d in DIRS {
            assert_eq!(d.opposite().opposite(), d);
        }
        // torus wrap
        assert_eq!(Dir::North.offset(0, 0, 5, 5), (0, 4));
        assert_eq!(Dir::West.offset(0, 2, 5, 5), (4, 2));
        assert_eq!(Dir::South.offset(3, 4, 5, 5), (3, 0));
    }

    #[test]
    fn level1_bit_is_deterministic() {
        assert_eq!(level1_quorum_bit(42), level1_quorum_bit(42));
        let distinct: std::collections::HashSet<u8> =
            (0..64u64).map(level1_quorum_bit).collect();
        assert!(distinct.len() > 32, "hash should spread over bit slots");
    }

    #[test]
    fn quorum_counts_exclude_self_bit() {
        let mut q = QuorumLevel {
            own_bit: Some(3),
            known: 0,
            learned_from: [None; 64],
        };
        q.known = (1 << 3) | (1 << 10) | (1 << 20);
        assert_eq!(q.count(), 3);
        assert_eq!(q.non_self_count(), 2);
    }
}
