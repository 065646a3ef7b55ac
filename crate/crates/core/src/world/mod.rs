//! The ecological substrate: a toroidal grid of cells advanced by a
//! per-update service schedule.
//!
//! Each update runs three passes over the tiles: a sensor-refresh pass
//! in scan order, an execution pass (CPU cycles, events, messages) in a
//! per-update random order, and a world pass (births, resources,
//! quorum, state exchange, death) in the same order. Outputs are
//! delivered to neighbors as each cell finishes, so information moves
//! at least one tile per update; cross-partition edges go through
//! mailboxes instead.

pub mod boundary;
pub mod cell;
pub mod events;
pub mod state;

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::genome::Genome;
use crate::tag::{default_thresholds, MatchThresholds, Tag};
use crate::vm::{Peripheral, NUM_REGISTERS};

use boundary::EdgeMailbox;
use cell::*;
use events::{event_active, EVENT_ORDER};
use state::*;

/// An experimental manipulation applied to one strain during a
/// competition: swap one state index between cardinal processors
/// displaced along a chain, or reroute one bucket of messages back to
/// their sender.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub kind: PerturbKind,
    /// Only cells with this root id are manipulated.
    pub strain_root: u64,
    pub chain: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    StateExchange {
        category: StateCategory,
        index: usize,
    },
    MessageReroute {
        scope: MessageScope,
        bucket: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateCategory {
    Introspective,
    Extrospective,
    Writable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageScope {
    Intra,
    Inter,
}

/// Every possible tag maps to exactly one bucket.
pub fn message_bucket(tag: Tag, buckets: usize) -> usize {
    tag.high32() as usize % buckets
}

/// Per-update resource flows. The identity `sum(stockpiles) after -
/// before == net()` holds exactly in single-worker runs; every
/// stockpile mutation must be mirrored here.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LedgerFrame {
    pub base_inflow: f64,
    pub collective_inflow: f64,
    pub birth_endowment: f64,
    pub deposits: f64,
    pub credits: f64,
    pub resource_decayed: f64,
    pub group_decayed: f64,
    pub diversity_decayed: f64,
    pub spawn_paid: f64,
    pub defense_paid: f64,
    pub death_discarded: f64,
    pub sent_out: f64,
    /// Informational: receipt decay, resistance losses, credits refused
    /// by dead tiles. Not part of the stockpile identity.
    pub in_flight_lost: f64,
    /// Informational: apoptosis recoveries created for heirs.
    pub apop_recovery_created: f64,
}

impl LedgerFrame {
    pub fn net(&self) -> f64 {
        self.base_inflow + self.collective_inflow + self.birth_endowment + self.deposits
            + self.credits
            - self.resource_decayed
            - self.group_decayed
            - self.diversity_decayed
            - self.spawn_paid
            - self.defense_paid
            - self.death_discarded
            - self.sent_out
    }
}

#[derive(Clone, Copy, Debug)]
enum NeighborRef {
    Local(usize),
    Remote,
}

pub struct World {
    pub cfg: Arc<RunConfig>,
    pub thresholds: MatchThresholds,
    width: usize,
    height: usize,
    pub tiles: Vec<Tile>,
    neighbors: Vec<[NeighborRef; NUM_CARDINALS]>,
    pub update: u64,
    rng: ChaCha8Rng,
    pub last_ledger: LedgerFrame,
    ledger: LedgerFrame,
    perturb: Option<Perturbation>,
    swap_plan: Vec<(usize, usize)>,
    order_buf: Vec<usize>,
    /// Remote mailbox wiring for partitioned runs (empty when k = 1).
    pub remote_out: HashMap<(usize, Dir), Arc<EdgeMailbox>>,
    pub remote_in: HashMap<(usize, Dir), Arc<EdgeMailbox>>,
    pub worker_id: usize,
}

impl World {
    /// A full toroidal world of empty tiles.
    pub fn new(cfg: Arc<RunConfig>, seed: u64) -> World {
        let (w, h) = cfg.grid_dims();
        World::with_dims(cfg, seed, w, h, true)
    }

    /// A rectangular region. `wrap` closes the torus internally; when
    /// false, edges are remote and expect mailboxes (partitioned runs).
    pub fn with_dims(cfg: Arc<RunConfig>, seed: u64, w: usize, h: usize, wrap: bool) -> World {
        assert!(w > 0 && h > 0, "degenerate grid");
        let tiles: Vec<Tile> = (0..w * h).map(|_| Tile::empty()).collect();
        let mut neighbors = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let entry = std::array::from_fn(|d| {
                    let dir = Dir::from_index(d);
                    let (nx, ny) = dir.offset(x, y, w, h);
                    let wraps = (dir == Dir::North && y == 0)
                        || (dir == Dir::South && y == h - 1)
                        || (dir == Dir::West && x == 0)
                        || (dir == Dir::East && x == w - 1);
                    if wraps && !wrap {
                        NeighborRef::Remote
                    } else {
                        NeighborRef::Local(ny * w + nx)
                    }
                });
                neighbors.push(entry);
            }
        }
        World {
            thresholds: default_thresholds(),
            cfg,
            width: w,
            height: h,
            tiles,
            neighbors,
            update: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_ledger: LedgerFrame::default(),
            ledger: LedgerFrame::default(),
            perturb: None,
            swap_plan: Vec::new(),
            order_buf: Vec::new(),
            remote_out: HashMap::new(),
            remote_in: HashMap::new(),
            worker_id: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn set_perturbation(&mut self, p: Option<Perturbation>) {
        self.perturb = p;
    }

    pub fn neighbor_of(&self, tile: usize, dir: Dir) -> Option<usize> {
        match self.neighbors[tile][dir.index()] {
            NeighborRef::Local(i) => Some(i),
            NeighborRef::Remote => None,
        }
    }

    pub fn live_count(&self) -> usize {
        self.tiles.iter().filter(|t| t.alive).count()
    }

    pub fn live_fraction(&self) -> f64 {
        self.live_count() as f64 / self.tiles.len() as f64
    }

    pub fn total_stockpile(&self) -> f64 {
        self.tiles.iter().map(|t| t.stockpile).sum()
    }

    /// Census of live cells by an arbitrary key.
    pub fn census<K: Ord, F: Fn(&Tile) -> K>(
        &self,
        key: F,
    ) -> std::collections::BTreeMap<K, usize> {
        let mut out = std::collections::BTreeMap::new();
        for t in self.tiles.iter().filter(|t| t.alive) {
            *out.entry(key(t)).or_insert(0) += 1;
        }
        out
    }

    /// Shuffled injection of genomes into random distinct tiles. Every
    /// seeded cell founds fresh kin groups.
    pub fn seed_cells(&mut self, genomes: Vec<Arc<Genome>>) {
        assert!(genomes.len() <= self.tiles.len(), "seed exceeds grid");
        let mut slots: Vec<usize> = (0..self.tiles.len()).collect();
        slots.shuffle(&mut self.rng);
        let mut genomes = genomes;
        genomes.shuffle(&mut self.rng);
        for (slot, genome) in slots.into_iter().zip(genomes) {
            let kin = KinState {
                ids: [self.fresh_group_id(), self.fresh_group_id()],
                ancestor_ids: [0; L],
                formation_epochs: [0; L],
            };
            let endow = self.start_resource();
            self.ledger.birth_endowment += endow;
            let max_cores = self.cfg.max_cores;
            let p_bit = self.cfg.p_set_quorum_bit;
            self.tiles[slot].most_recent_death = CauseOfDeath::None;
            self.tiles[slot].make_alive(genome, kin, endow, 0, None, max_cores, p_bit, &mut self.rng);
        }
    }

    fn start_resource(&mut self) -> f64 {
        let lo = self.cfg.min_start_resource;
        let hi = self.cfg.max_start_resource;
        if hi > lo {
            self.rng.gen_range(lo..hi)
        } else {
            lo
        }
    }

    fn fresh_group_id(&mut self) -> u64 {
        loop {
            let id = self.rng.gen::<u64>();
            if id != 0 {
                return id;
            }
        }
    }

    fn due(&self, frequency: u64) -> bool {
        frequency != 0 && self.update % frequency == 0
    }

    /// Advance the world one update.
    pub fn step_update(&mut self) {
        self.ledger = LedgerFrame::default();
        self.pull_remote_inputs();

        let mut order = std::mem::take(&mut self.order_buf);
        order.clear();
        order.extend(0..self.tiles.len());
        order.shuffle(&mut self.rng);

        // pass 1: sensors, in scan order
        for i in 0..self.tiles.len() {
            self.sensor_pass(i);
        }

        let perturb_due = self.due(self.cfg.intermittent_state_perturb_services_frequency);
        if perturb_due {
            self.apply_state_exchange(StateCategory::Introspective);
            self.apply_state_exchange(StateCategory::Extrospective);
        }

        // pass 2: program execution
        for &i in &order {
            self.execution_pass(i);
        }

        if perturb_due {
            self.restore_state_exchange(&[
                StateCategory::Introspective,
                StateCategory::Extrospective,
            ]);
            self.apply_state_exchange(StateCategory::Writable);
        }

        // pass 3: world services and delivery
        for &i in &order {
            self.world_pass(i);
        }

        if perturb_due {
            self.restore_state_exchange(&[StateCategory::Writable]);
        }

        if self.due(self.cfg.diversity_maintenance_service_frequency) {
            self.diversity_maintenance(false);
        }
        if self.due(self.cfg.stint_diversity_maintenance_service_frequency) {
            self.diversity_maintenance(true);
        }

        self.order_buf = order;
        self.update += 1;
        self.last_ledger = self.ledger;
    }

    // -- pass 1 ----------------------------------------------------------

    fn sensor_pass(&mut self, i: usize) {
        if self.due(self.cfg.cell_age_service_frequency) && self.tiles[i].alive {
            self.tiles[i].age += 1;
        }
        self.refresh_introspective(i);
    }

    fn refresh_introspective(&mut self, i: usize) {
        if !self.tiles[i].alive {
            return;
        }
        let cfg = self.cfg.clone();
        let event_freq = cfg.event_launching_service_frequency.max(1);
        for d in 0..NUM_CARDINALS {
            let meta = self.tiles[i].cardinals[d].input.meta.unwrap_or_default();
            let tile = &self.tiles[i];
            let card = &tile.cardinals[d];
            let truth = |b: bool| b as u8 as f32;
            let mut intro = [0.0f32; NUM_INTROSPECTIVE];

            intro[I_IS_CHILD_CELL_OF] = truth(
                tile.spawned_from == Some(Dir::from_index(d)) && meta.alive && tile.age < meta.age,
            );
            for l in 0..L {
                intro[I_IS_CHILD_GROUP_OF_0 + l] = truth(
                    meta.alive
                        && tile.kin.ancestor_ids[l] != 0
                        && tile.kin.ancestor_ids[l] == meta.kin_ids[l],
                );
                intro[I_IS_PARENT_GROUP_OF_0 + l] = truth(
                    meta.alive && tile.kin.ids[l] != 0 && meta.ancestor_ids[l] == tile.kin.ids[l],
                );
                intro[I_KIN_GROUP_MATCH_0 + l] = truth(
                    meta.alive && tile.kin.ids[l] != 0 && meta.kin_ids[l] == tile.kin.ids[l],
                );
                let group_age = tile.epoch.saturating_sub(tile.kin.formation_epochs[l]);
                let duration = cfg.group_expiration_duration(l);
                intro[I_KIN_GROUP_WILL_EXPIRE_0 + l] =
                    truth(group_age as f64 > 0.8 * duration as f64);
                intro[I_NEIGHBOR_KIN_GROUP_WILL_EXPIRE_0 + l] =
                    truth(meta.alive && meta.group_ages[l] as f64 > 0.8 * duration as f64);
                intro[I_NEIGHBOR_OPTIMUM_QUORUM_EXCEEDED_0 + l] =
                    truth(meta.alive && meta.quorum_counts[l] > cfg.optimal_quorum_count);
                intro[I_OPTIMUM_QUORUM_EXCEEDED_0 + l] =
                    truth(tile.quorum[l].count() > cfg.optimal_quorum_count);
                intro[I_KIN_GROUP_AGE_0 + l] = group_age as f32;
                intro[I_KIN_GROUP_ID_ANCESTOR_VIEW_0 + l] = tile.kin.ancestor_ids[l] as f32;
                intro[I_KIN_GROUP_ID_VIEW_0 + l] = tile.kin.ids[l] as f32;
                intro[I_NUM_KNOWN_QUORUM_BITS_0 + l] = tile.quorum[l].count() as f32;
            }
            intro[I_IS_NEWBORN] = truth(tile.age < event_freq);
            intro[I_IS_PARENT_CELL_OF] =
                truth(meta.alive && meta.spawned_from_you && tile.age > meta.age);
            intro[I_NEIGHBOR_APOPTOSIS] = truth(meta.cause_of_death == CauseOfDeath::Apoptosis);
            intro[I_NEIGHBOR_FRAGMENTED] =
                truth(meta.cause_of_death == CauseOfDeath::Fragmentation);
            intro[I_NEIGHBOR_IS_NEWBORN] = truth(meta.alive && meta.age < event_freq);
            intro[I_PARENT_FRAGMENTED] =
                truth(tile.most_recent_death == CauseOfDeath::Fragmentation);
            intro[I_PHYLOGENETIC_ROOT_MATCH] =
                truth(meta.alive && meta.root_id == tile.genome.root_id);
            intro[I_RICHER_THAN_NEIGHBOR] = truth(tile.stockpile > meta.stockpile);
            intro[I_STOCKPILE_DEPLETED] = truth(tile.stockpile < 2.0 * cfg.base_harvest_rate);
            intro[I_STOCKPILE_FECUND] = truth(tile.stockpile > cfg.rep_thresh);

            intro[I_CELL_AGE] = tile.age as f32;
            intro[I_EPOCH] = tile.epoch as f32;
            intro[I_INCOMING_INTER_MESSAGE_COUNTER] = card.inter_message_counter as f32;
            intro[I_INCOMING_INTRA_MESSAGE_COUNTER] = card.intra_message_counter as f32;
            intro[I_IS_ALIVE] = 1.0;
            intro[I_MOST_RECENT_CAUSE_OF_DEATH] = tile.most_recent_death.code();
            intro[I_PHYLOGENETIC_ROOT_VIEW] = tile.genome.root_id as f32;
            intro[I_RECEIVED_RESOURCE_FROM] = card.received_resource_from as f32;
            intro[I_RESOURCE_STOCKPILE] = tile.stockpile as f32;
            intro[I_SPAWN_COUNT] = tile.spawn_counts[d] as f32;
            intro[I_SPAWNED_FROM] = truth(tile.spawned_from == Some(Dir::from_index(d)));

            self.tiles[i].cardinals[d].intro = intro;
        }
    }

    // -- pass 2 ----------------------------------------------------------

    fn execution_pass(&mut self, i: usize) {
        if !self.tiles[i].alive {
            return;
        }
        if self.due(self.cfg.decay_to_baseline_service_frequency) {
            for c in &mut self.tiles[i].cardinals {
                c.cpu.tables.decay_all();
                for w in W_TRANSIENT_NOP..W_TRANSIENT_NOP + 4 {
                    c.writable[w] = 0.0;
                }
                for w in W_APOPTOSIS_REQUEST..NUM_WRITABLE {
                    c.writable[w] = 0.0;
                }
            }
        }
        if self.due(self.cfg.intermittent_cpu_reset_service_frequency) {
            for c in &mut self.tiles[i].cardinals {
                c.cpu.purge_cores();
            }
        }
        if self.due(self.cfg.controller_mapped_state_noise_service_frequency) {
            self.controller_noise(i);
        }
        if self.due(self.cfg.cpu_execution_service_frequency) {
            self.cpu_execution(i);
        }
        if self.due(self.cfg.event_launching_service_frequency) {
            self.event_launching(i);
        }
        if self.due(self.cfg.intra_message_launching_service_frequency) {
            self.intra_message_launching(i);
        }
        if self.due(self.cfg.inter_message_launching_service_frequency) {
            self.inter_message_launching(i);
            // purging service: excess that found no core is dropped
            for c in &mut self.tiles[i].cardinals {
                c.input.inter_messages.clear();
            }
        }
        if self.due(self.cfg.inter_message_counter_clear_service_frequency) {
            for c in &mut self.tiles[i].cardinals {
                c.inter_message_counter = 0;
                c.intra_message_counter = 0;
            }
        }
    }

    fn controller_noise(&mut self, i: usize) {
        let rate = self.cfg.controller_mapped_state_defect_rate;
        if rate <= 0.0 {
            return;
        }
        let bits = (NUM_WRITABLE * NUM_CARDINALS * 32) as f64;
        let n = Poisson::new(rate * bits)
            .map(|p| p.sample(&mut self.rng) as usize)
            .unwrap_or(0);
        for _ in 0..n {
            let d = self.rng.gen_range(0..NUM_CARDINALS);
            let w = self.rng.gen_range(0..NUM_WRITABLE);
            let value = if self.rng.gen::<bool>() {
                0.0
            } else {
                f32::from_bits((self.rng.next_u64() >> 32) as u32)
            };
            self.tiles[i].cardinals[d].writable[w] = value;
        }
    }

    fn cpu_execution(&mut self, i: usize) {
        let rounds = self.cfg.hardware_execution_rounds;
        let cycles = self.cfg.hardware_execution_cycles;
        let thresholds = self.thresholds;
        let mut card_order: [usize; NUM_CARDINALS] = [0, 1, 2, 3];
        for _ in 0..rounds {
            card_order.shuffle(&mut self.rng);
            for &d in &card_order {
                self.run_cardinal(i, d, cycles, &thresholds);
            }
        }
    }

    fn run_cardinal(&mut self, i: usize, d: usize, cycles: usize, thresholds: &MatchThresholds) {
        let mut staged_intra: Vec<(usize, Message)> = Vec::new();
        let mut staged_inter: Vec<Message> = Vec::new();
        let genome = self.tiles[i].genome.clone();
        {
            let card = &mut self.tiles[i].cardinals[d];
            let mut periph = CellPeripheral {
                intro: &card.intro,
                extro: &card.input.snapshot,
                writable: &mut card.writable,
                my_dir: d,
                staged_intra: &mut staged_intra,
                staged_inter: &mut staged_inter,
            };
            card.cpu
                .execute_cycles(&genome.program, &mut periph, &mut self.rng, thresholds, cycles);
        }
        let reroute_intra = self.reroute_bucket(i, MessageScope::Intra);
        let reroute_inter = self.reroute_bucket(i, MessageScope::Inter);
        let buckets = self.cfg.message_bucket_count;
        for (target, m) in staged_intra {
            let dest = match reroute_intra {
                Some(b) if message_bucket(m.tag, buckets) == b => d,
                _ => target,
            };
            let card = &mut self.tiles[i].cardinals[dest];
            card.push_intra_message(m);
            card.intra_message_counter += 1;
        }
        for m in staged_inter {
            match reroute_inter {
                Some(b) if message_bucket(m.tag, buckets) == b => {
                    let card = &mut self.tiles[i].cardinals[d];
                    card.input.push_inter_message(m);
                    card.inter_message_counter += 1;
                }
                _ => self.tiles[i].cardinals[d].outbox.inter_messages.push(m),
            }
        }
    }

    fn reroute_bucket(&self, i: usize, scope: MessageScope) -> Option<usize> {
        let p = self.perturb.as_ref()?;
        if self.tiles[i].genome.root_id != p.strain_root {
            return None;
        }
        match p.kind {
            PerturbKind::MessageReroute { scope: s, bucket } if s == scope => Some(bucket),
            _ => None,
        }
    }

    fn event_launching(&mut self, i: usize) {
        let genome = self.tiles[i].genome.clone();
        let thresholds = self.thresholds;
        for d in 0..NUM_CARDINALS {
            let card = &mut self.tiles[i].cardinals[d];
            for (idx, &kind) in EVENT_ORDER.iter().enumerate() {
                if event_active(kind, &card.intro, &card.input.snapshot) {
                    card.cpu.launch(genome.event_tags[idx], &thresholds);
                }
            }
        }
    }

    fn intra_message_launching(&mut self, i: usize) {
        let thresholds = self.thresholds;
        let max_cores = self.cfg.max_cores;
        for d in 0..NUM_CARDINALS {
            let card = &mut self.tiles[i].cardinals[d];
            while let Some(m) = card.intra_messages.pop_front() {
                if card.cpu.num_cores() >= max_cores {
                    card.intra_messages.push_front(m);
                    break;
                }
                card.cpu
                    .launch_with_payload(m.tag, m.payload, &thresholds, false);
            }
        }
    }

    fn inter_message_launching(&mut self, i: usize) {
        let thresholds = self.thresholds;
        let max_cores = self.cfg.max_cores;
        for d in 0..NUM_CARDINALS {
            let card = &mut self.tiles[i].cardinals[d];
            while let Some(m) = card.input.inter_messages.pop_front() {
                if card.cpu.num_cores() >= max_cores {
                    card.input.inter_messages.push_front(m);
                    break;
                }
                card.cpu
                    .launch_with_payload(m.tag, m.payload, &thresholds, true);
            }
        }
    }

    // -- pass 3 ----------------------------------------------------------

    fn world_pass(&mut self, i: usize) {
        if self.due(self.cfg.birth_setup_service_frequency) {
            self.birth_setup(i);
        }
        if self.tiles[i].alive {
            if self.due(self.cfg.spawn_sending_service_frequency) {
                self.spawn_sending(i);
            }
            if self.due(self.cfg.resource_harvesting_service_frequency) {
                let amt = self.cfg.base_harvest_rate;
                self.tiles[i].stockpile += amt;
                self.ledger.base_inflow += amt;
            }
            if self.due(self.cfg.collective_harvesting_service_frequency) {
                self.collective_harvesting(i);
            }
        }
        if self.due(self.cfg.resource_receiving_service_frequency) {
            self.resource_receiving(i);
        }
        if self.tiles[i].alive {
            if self.due(self.cfg.resource_sending_service_frequency) {
                self.resource_sending(i);
            }
            if self.due(self.cfg.resource_decay_service_frequency) {
                let decay = self.cfg.resource_decay;
                let tile = &mut self.tiles[i];
                let kept = tile.stockpile * decay;
                self.ledger.resource_decayed += tile.stockpile - kept;
                tile.stockpile = kept;
            }
            self.collective_resource_decay(i);
            if self.due(self.cfg.quorum_service_frequency) {
                self.quorum_service(i);
            }
        }
        // dead tiles keep publishing so neighbors observe the death and
        // former groupmates erase quorum bits
        self.publish_meta(i);
        if self.due(self.cfg.state_output_put_service_frequency) {
            for d in 0..NUM_CARDINALS {
                let snap = self.tiles[i].cardinals[d].published_snapshot();
                self.tiles[i].cardinals[d].outbox.snapshot = Some(snap);
            }
        }
        if self.tiles[i].alive && self.due(self.cfg.epoch_advance_service_frequency) {
            let mut epoch = self.tiles[i].epoch + 1;
            for d in 0..NUM_CARDINALS {
                if let Some(meta) = self.tiles[i].cardinals[d].input.meta {
                    epoch = epoch.max(meta.epoch);
                }
            }
            self.tiles[i].epoch = epoch;
        }
        if self.tiles[i].alive && self.due(self.cfg.group_expiration_service_frequency) {
            self.group_expiration(i);
        }
        if self.tiles[i].alive && self.due(self.cfg.apoptosis_service_frequency) {
            self.apoptosis(i);
        }
        self.deliver_outboxes(i);
    }

    fn birth_setup(&mut self, i: usize) {
        let mut requests: Vec<(usize, SpawnPacket)> = Vec::new();
        for d in 0..NUM_CARDINALS {
            if let Some(p) = self.tiles[i].cardinals[d].input.spawn_in.take() {
                requests.push((d, p));
            }
        }
        if requests.is_empty() {
            return;
        }
        requests.shuffle(&mut self.rng);
        let defense = self.cfg.spawn_defense_cost;
        for (d, packet) in requests {
            if self.tiles[i].alive && self.tiles[i].stockpile > defense {
                self.tiles[i].stockpile -= defense;
                self.ledger.defense_paid += defense;
                continue;
            }
            if self.tiles[i].alive {
                self.ledger.death_discarded += self.tiles[i].stockpile;
                self.tiles[i].kill(CauseOfDeath::Elimination);
            }
            self.install_offspring(i, d, packet);
            break;
        }
    }

    fn install_offspring(&mut self, i: usize, from_dir: usize, packet: SpawnPacket) {
        let shared = packet.shared_levels.min(L);
        let epoch = self.tiles[i].epoch.max(packet.parent_epoch);
        let mut ids = [0u64; L];
        let mut ancestors = [0u64; L];
        let mut formations = [0u64; L];
        // sharing retains membership from the outermost level inward
        for l in 0..L {
            if l >= L - shared {
                ids[l] = packet.parent_kin_ids[l];
                ancestors[l] = packet.parent_ancestor_ids[l];
                formations[l] = packet.parent_formation_epochs[l];
            } else {
                ids[l] = self.fresh_group_id();
                ancestors[l] = packet.parent_kin_ids[l];
                formations[l] = epoch;
            }
        }
        let kin = KinState {
            ids,
            ancestor_ids: ancestors,
            formation_epochs: formations,
        };
        let endow = self.start_resource();
        self.ledger.birth_endowment += endow;
        let max_cores = self.cfg.max_cores;
        let p_bit = self.cfg.p_set_quorum_bit;
        self.tiles[i].make_alive(
            packet.genome,
            kin,
            endow,
            epoch,
            Some(Dir::from_index(from_dir)),
            max_cores,
            p_bit,
            &mut self.rng,
        );
    }

    fn spawn_sending(&mut self, i: usize) {
        if self.tiles[i].stockpile < self.cfg.rep_thresh {
            return;
        }
        let mut eligible: Vec<usize> = (0..NUM_CARDINALS)
            .filter(|&d| {
                let c = &self.tiles[i].cardinals[d];
                c.writable[W_SPAWN_REQUEST] != 0.0 && c.writable[W_SPAWN_ARREST] == 0.0
            })
            .collect();
        if eligible.is_empty() {
            return;
        }
        eligible.shuffle(&mut self.rng);
        let d = eligible[0];
        let cost = self.cfg.rep_thresh;
        self.tiles[i].stockpile -= cost;
        self.ledger.spawn_paid += cost;
        self.tiles[i].spawn_counts[d] += 1;

        let shared_levels = (0..L)
            .filter(|&l| self.tiles[i].cardinals[d].writable[W_REPLEV_REQUEST_0 + l] != 0.0)
            .count();
        let mcfg = self.cfg.mutation_config();
        let parent_genome = self.tiles[i].genome.clone();
        let child_genome = Arc::new(parent_genome.reproduce(shared_levels, &mcfg, &mut self.rng));
        let tile = &self.tiles[i];
        let packet = SpawnPacket {
            genome: child_genome,
            shared_levels,
            parent_kin_ids: tile.kin.ids,
            parent_ancestor_ids: tile.kin.ancestor_ids,
            parent_formation_epochs: tile.kin.formation_epochs,
            parent_epoch: tile.epoch,
        };
        self.tiles[i].cardinals[d].outbox.spawn = Some(packet);
    }

    fn collective_harvesting(&mut self, i: usize) {
        let rate = self.cfg.collective_harvest_rate;
        let target = self.cfg.optimal_quorum_count;
        let mut bonus = 0.0;
        for l in 0..L {
            let non_self = self.tiles[i].quorum[l].non_self_count();
            bonus += rate * non_self.min(target) as f64;
        }
        if bonus > 0.0 {
            self.tiles[i].stockpile += bonus;
            self.ledger.collective_inflow += bonus;
        }
    }

    fn collective_resource_decay(&mut self, i: usize) {
        let target = self.cfg.optimal_quorum_count;
        let base = self.cfg.group_size_decay_base;
        let mut factor = 1.0f64;
        for l in 0..L {
            let count = self.tiles[i].quorum[l].count();
            if count > target {
                factor *= base.powf((2.0f64).powi((count - target) as i32));
            }
        }
        if factor < 1.0 {
            let tile = &mut self.tiles[i];
            let kept = tile.stockpile * factor;
            self.ledger.group_decayed += tile.stockpile - kept;
            tile.stockpile = kept;
        }
    }

    fn resource_receiving(&mut self, i: usize) {
        let alive = self.tiles[i].alive;
        for d in 0..NUM_CARDINALS {
            let gross = std::mem::take(&mut self.tiles[i].cardinals[d].input.resource_in);
            let credit = std::mem::take(&mut self.tiles[i].cardinals[d].input.direct_credit);
            if !alive {
                // dead tiles refund all received resources to the sender
                if gross > 0.0 {
                    self.tiles[i].cardinals[d].outbox.direct_credit += gross;
                }
                if credit > 0.0 {
                    self.ledger.in_flight_lost += credit;
                }
                self.tiles[i].cardinals[d].received_resource_from = 0.0;
                continue;
            }
            let raw_resistance = self.tiles[i].cardinals[d].writable[W_RESOURCE_RECEIVE_RESISTANCE];
            let resistance = if raw_resistance.is_finite() {
                (raw_resistance as f64).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let net = gross * (1.0 - resistance) * self.cfg.receipt_decay;
            self.ledger.in_flight_lost += gross - net;
            if net > 0.0 {
                self.tiles[i].stockpile += net;
                self.ledger.deposits += net;
            }
            if credit > 0.0 {
                self.tiles[i].stockpile += credit;
                self.ledger.credits += credit;
            }
            self.tiles[i].cardinals[d].received_resource_from = net;
        }
    }

    fn resource_sending(&mut self, i: usize) {
        let sane = |x: f32| -> f64 {
            if x.is_finite() {
                x as f64
            } else {
                0.0
            }
        };
        for d in 0..NUM_CARDINALS {
            let (request, limit, reserve) = {
                let c = &self.tiles[i].cardinals[d];
                (
                    sane(c.writable[W_RESOURCE_SEND_REQUEST]).max(0.0),
                    sane(c.writable[W_RESOURCE_SEND_LIMIT]),
                    sane(c.writable[W_RESOURCE_RESERVE_REQUEST]).max(0.0),
                )
            };
            if request <= 0.0 {
                continue;
            }
            let available = (self.tiles[i].stockpile - reserve).max(0.0);
            let mut amount = request.min(available);
            if limit > 0.0 {
                amount = amount.min(limit);
            }
            if amount <= 0.0 {
                continue;
            }
            self.tiles[i].stockpile -= amount;
            self.ledger.sent_out += amount;
            self.tiles[i].cardinals[d].outbox.resource += amount;
        }
    }

    fn quorum_service(&mut self, i: usize) {
        for l in 0..L {
            let group_id = self.tiles[i].kin.ids[l];
            for d in 0..NUM_CARDINALS {
                let Some(b) = self.tiles[i].cardinals[d].input.quorum[l] else {
                    continue;
                };
                if group_id == 0 || b.group_id != group_id {
                    continue;
                }
                let q = &mut self.tiles[i].quorum[l];
                let fresh = b.bits & !q.known;
                if fresh != 0 {
                    q.known |= fresh;
                    for bit in 0..64 {
                        if fresh & (1 << bit) != 0 {
                            q.learned_from[bit] = Some(Dir::from_index(d));
                        }
                    }
                }
            }
            // forget bits the original source no longer broadcasts
            let mut to_erase = 0u64;
            {
                let tile = &self.tiles[i];
                let q = &tile.quorum[l];
                for bit in 0..64 {
                    let Some(src) = q.learned_from[bit] else {
                        continue;
                    };
                    if q.known & (1 << bit) == 0 {
                        continue;
                    }
                    let still = match tile.cardinals[src.index()].input.quorum[l] {
                        Some(b) => b.group_id == group_id && b.bits & (1 << bit) != 0,
                        None => false,
                    };
                    if !still {
                        to_erase |= 1 << bit;
                    }
                }
            }
            if to_erase != 0 {
                let q = &mut self.tiles[i].quorum[l];
                q.known &= !to_erase;
                for bit in 0..64 {
                    if to_erase & (1 << bit) != 0 {
                        q.learned_from[bit] = None;
                    }
                }
            }
        }
    }

    fn publish_meta(&mut self, i: usize) {
        let tile = &self.tiles[i];
        let alive = tile.alive;
        let base = NeighborMeta {
            alive,
            kin_ids: tile.kin.ids,
            ancestor_ids: tile.kin.ancestor_ids,
            root_id: tile.genome.root_id,
            age: tile.age,
            epoch: tile.epoch,
            stockpile: tile.stockpile,
            cause_of_death: tile.most_recent_death,
            group_ages: std::array::from_fn(|l| {
                tile.epoch.saturating_sub(tile.kin.formation_epochs[l])
            }),
            quorum_counts: std::array::from_fn(|l| tile.quorum[l].count()),
            spawned_from_you: false,
        };
        let quorum: [QuorumBroadcast; L] = std::array::from_fn(|l| QuorumBroadcast {
            group_id: if alive { tile.kin.ids[l] } else { 0 },
            bits: if alive { tile.quorum[l].known } else { 0 },
        });
        let spawned_from = tile.spawned_from;
        for d in 0..NUM_CARDINALS {
            let mut meta = base;
            meta.spawned_from_you = spawned_from == Some(Dir::from_index(d));
            let out = &mut self.tiles[i].cardinals[d].outbox;
            out.meta = Some(meta);
            for l in 0..L {
                out.quorum[l] = Some(quorum[l]);
            }
        }
    }

    fn group_expiration(&mut self, i: usize) {
        let age_epochs = self.tiles[i].epoch.saturating_sub(self.tiles[i].birth_epoch);
        if age_epochs > self.cfg.cell_age_duration {
            self.ledger.death_discarded += self.tiles[i].stockpile;
            self.tiles[i].kill(CauseOfDeath::Age);
            return;
        }
        let mut fragment = false;
        for l in 0..L {
            let duration = self.cfg.group_expiration_duration(l);
            let group_age = self.tiles[i]
                .epoch
                .saturating_sub(self.tiles[i].kin.formation_epochs[l]);
            if group_age > duration {
                let over = (group_age - duration) as f64 / duration.max(1) as f64;
                if self.rng.gen::<f64>() < over.min(1.0) {
                    fragment = true;
                }
            }
        }
        if !fragment {
            return;
        }
        // replaced in place by a daughter without kin commonality; the
        // daughter keeps the stockpile
        let stock = self.tiles[i].stockpile;
        let epoch = self.tiles[i].epoch;
        let parent_ids = self.tiles[i].kin.ids;
        let mcfg = self.cfg.mutation_config();
        let parent_genome = self.tiles[i].genome.clone();
        let child = Arc::new(parent_genome.reproduce(0, &mcfg, &mut self.rng));
        self.tiles[i].stockpile = 0.0;
        self.tiles[i].kill(CauseOfDeath::Fragmentation);
        let kin = KinState {
            ids: [self.fresh_group_id(), self.fresh_group_id()],
            ancestor_ids: parent_ids,
            formation_epochs: [epoch; L],
        };
        let max_cores = self.cfg.max_cores;
        let p_bit = self.cfg.p_set_quorum_bit;
        self.tiles[i].make_alive(child, kin, stock, epoch, None, max_cores, p_bit, &mut self.rng);
    }

    fn apoptosis(&mut self, i: usize) {
        let requested = (0..NUM_CARDINALS)
            .any(|d| self.tiles[i].cardinals[d].writable[W_APOPTOSIS_REQUEST] != 0.0);
        if !requested {
            return;
        }
        let heirs: Vec<usize> = (0..NUM_CARDINALS)
            .filter(|&d| self.tiles[i].cardinals[d].writable[W_HEIR_REQUEST] != 0.0)
            .collect();
        let recovered = self.cfg.apop_recovery_frac * self.cfg.rep_thresh;
        self.ledger.death_discarded += self.tiles[i].stockpile;
        self.tiles[i].kill(CauseOfDeath::Apoptosis);
        if heirs.is_empty() {
            // no heirs: the recovered resource is discarded
            return;
        }
        self.ledger.apop_recovery_created += recovered;
        let share = recovered / heirs.len() as f64;
        for d in heirs {
            self.tiles[i].cardinals[d].outbox.direct_credit += share;
        }
    }

    fn diversity_maintenance(&mut self, stint: bool) {
        let threshold = if stint {
            self.cfg.stint_diversity_maintenance_prevalence
        } else {
            self.cfg.diversity_maintenance_prevalence
        };
        let live = self.live_count();
        if live == 0 {
            return;
        }
        let census = if stint {
            self.census(|t| t.genome.stint_root_id)
        } else {
            self.census(|t| t.genome.root_id)
        };
        let base = self.cfg.group_size_decay_base;
        let mut penalized: HashMap<u64, f64> = HashMap::new();
        for (root, count) in census {
            let prevalence = count as f64 / live as f64;
            if prevalence > threshold {
                penalized.insert(root, Self::diversity_penalty_factor(base, prevalence - threshold));
            }
        }
        if penalized.is_empty() {
            return;
        }
        for t in self.tiles.iter_mut().filter(|t| t.alive) {
            let key = if stint {
                t.genome.stint_root_id
            } else {
                t.genome.root_id
            };
            if let Some(&factor) = penalized.get(&key) {
                let kept = t.stockpile * factor;
                self.ledger.diversity_decayed += t.stockpile - kept;
                t.stockpile = kept;
            }
        }
    }

    /// Stockpile decay factor applied per maintenance tick at a given
    /// excess prevalence; smooth and monotone decreasing.
    pub fn diversity_penalty_factor(base: f64, excess: f64) -> f64 {
        base.powf((2.0f64).powf(10.0 * excess))
    }

    // -- delivery ----------------------------------------------------------

    fn deliver_outboxes(&mut self, i: usize) {
        for d in 0..NUM_CARDINALS {
            if self.tiles[i].cardinals[d].outbox.is_empty() {
                continue;
            }
            let out = std::mem::take(&mut self.tiles[i].cardinals[d].outbox);
            let dir = Dir::from_index(d);
            match self.neighbors[i][d] {
                NeighborRef::Local(n) => {
                    let input = &mut self.tiles[n].cardinals[dir.opposite().index()];
                    deliver_into(input, out);
                }
                NeighborRef::Remote => {
                    if let Some(mailbox) = self.remote_out.get(&(i, dir)) {
                        mailbox.publish(out, self.worker_id, self.update);
                    }
                }
            }
        }
    }

    fn pull_remote_inputs(&mut self) {
        if self.remote_in.is_empty() {
            return;
        }
        let keys: Vec<(usize, Dir)> = {
            let mut k: Vec<_> = self.remote_in.keys().copied().collect();
            k.sort_by_key(|&(t, d)| (t, d.index()));
            k
        };
        for (tile, dir) in keys {
            let mailbox = self.remote_in.get(&(tile, dir)).unwrap().clone();
            if let Some(out) = mailbox.pull() {
                let input = &mut self.tiles[tile].cardinals[dir.index()];
                deliver_into(input, out);
            }
        }
    }

    // -- perturbation machinery --------------------------------------------

    fn manipulated_cardinals(&self) -> Vec<(usize, usize)> {
        let Some(p) = &self.perturb else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (i, t) in self.tiles.iter().enumerate() {
            if t.alive && t.genome.root_id == p.strain_root {
                for d in 0..NUM_CARDINALS {
                    out.push((i, d));
                }
            }
        }
        out
    }

    fn apply_state_exchange(&mut self, which: StateCategory) {
        let Some(p) = self.perturb.clone() else {
            return;
        };
        let PerturbKind::StateExchange { category, index } = p.kind else {
            return;
        };
        if category != which {
            return;
        }
        let list = self.manipulated_cardinals();
        let chain = p.chain.max(1);
        let mut plan: Vec<(usize, usize)> = Vec::new();
        // swap adjacent `chain`-sized blocks along the scan-ordered ring
        let mut block = 0;
        while block + chain < list.len() {
            for j in 0..chain {
                let a = block + j;
                let b = a + chain;
                if b >= list.len() {
                    break;
                }
                plan.push((encode_card(list[a]), encode_card(list[b])));
            }
            block += 2 * chain;
        }
        for &(a, b) in &plan {
            let (ta, da) = decode_card(a);
            let (tb, db) = decode_card(b);
            self.swap_state(category, index, ta, da, tb, db);
        }
        self.swap_plan = plan;
    }

    fn restore_state_exchange(&mut self, which: &[StateCategory]) {
        let Some(p) = self.perturb.clone() else {
            return;
        };
        let PerturbKind::StateExchange { category, index } = p.kind else {
            return;
        };
        if !which.contains(&category) {
            return;
        }
        let plan = std::mem::take(&mut self.swap_plan);
        for &(a, b) in &plan {
            let (ta, da) = decode_card(a);
            let (tb, db) = decode_card(b);
            self.swap_state(category, index, ta, da, tb, db);
        }
    }

    fn swap_state(
        &mut self,
        category: StateCategory,
        index: usize,
        ta: usize,
        da: usize,
        tb: usize,
        db: usize,
    ) {
        match category {
            StateCategory::Introspective => {
                let idx = index % NUM_INTROSPECTIVE;
                let va = self.tiles[ta].cardinals[da].intro[idx];
                let vb = self.tiles[tb].cardinals[db].intro[idx];
                self.tiles[ta].cardinals[da].intro[idx] = vb;
                self.tiles[tb].cardinals[db].intro[idx] = va;
            }
            StateCategory::Writable => {
                let idx = index % NUM_WRITABLE;
                let va = self.tiles[ta].cardinals[da].writable[idx];
                let vb = self.tiles[tb].cardinals[db].writable[idx];
                self.tiles[ta].cardinals[da].writable[idx] = vb;
                self.tiles[tb].cardinals[db].writable[idx] = va;
            }
            StateCategory::Extrospective => {
                let idx = index % NUM_EXTROSPECTIVE;
                let va = self.tiles[ta].cardinals[da].input.snapshot.get(idx).copied();
                let vb = self.tiles[tb].cardinals[db].input.snapshot.get(idx).copied();
                if let (Some(va), Some(vb)) = (va, vb) {
                    self.tiles[ta].cardinals[da].input.snapshot[idx] = vb;
                    self.tiles[tb].cardinals[db].input.snapshot[idx] = va;
                }
            }
        }
    }

    /// Digest of the complete simulation state, for determinism checks.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.update.to_le_bytes());
        for t in &self.tiles {
            h.update([t.alive as u8]);
            h.update(t.stockpile.to_le_bytes());
            h.update(t.age.to_le_bytes());
            h.update(t.epoch.to_le_bytes());
            for l in 0..L {
                h.update(t.kin.ids[l].to_le_bytes());
                h.update(t.quorum[l].known.to_le_bytes());
            }
            h.update(t.genome.root_id.to_le_bytes());
            if t.alive {
                h.update(t.genome.serialize().as_bytes());
            }
            for c in &t.cardinals {
                for w in c.writable {
                    h.update(w.to_le_bytes());
                }
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn encode_card((tile, d): (usize, usize)) -> usize {
    tile * NUM_CARDINALS + d
}

fn decode_card(x: usize) -> (usize, usize) {
    (x / NUM_CARDINALS, x % NUM_CARDINALS)
}

/// Merge a drained outbox into a receiving cardinal's input slots.
pub fn deliver_into(card: &mut Cardinal, out: CardinalOutbox) {
    if let Some(s) = out.snapshot {
        card.input.snapshot = s;
    }
    if let Some(m) = out.meta {
        card.input.meta = Some(m);
    }
    for l in 0..L {
        if let Some(q) = out.quorum[l] {
            card.input.quorum[l] = Some(q);
        }
    }
    for m in out.inter_messages {
        card.input.push_inter_message(m);
        card.inter_message_counter += 1;
    }
    card.input.resource_in += out.resource;
    card.input.direct_credit += out.direct_credit;
    if let Some(s) = out.spawn {
        card.input.spawn_in = Some(s);
    }
}

/// Peripheral exposing one cardinal's banks to the interpreter.
struct CellPeripheral<'a> {
    intro: &'a [f32; NUM_INTROSPECTIVE],
    extro: &'a [f32],
    writable: &'a mut [f32; NUM_WRITABLE],
    my_dir: usize,
    staged_intra: &'a mut Vec<(usize, Message)>,
    staged_inter: &'a mut Vec<Message>,
}

impl CellPeripheral<'_> {
    /// Map a peer offset (0..=2) onto the other three cardinal indices.
    fn peer(&self, offset: usize) -> usize {
        let k = offset % (NUM_CARDINALS - 1);
        k + (k >= self.my_dir) as usize
    }
}

impl Peripheral for CellPeripheral<'_> {
    fn readable_len(&self) -> usize {
        NUM_READABLE
    }

    fn read_own(&self, index: usize) -> f32 {
        if index < NUM_INTROSPECTIVE {
            self.intro[index]
        } else if index < NUM_INTROSPECTIVE + NUM_EXTROSPECTIVE {
            self.extro.get(index - NUM_INTROSPECTIVE).copied().unwrap_or(0.0)
        } else {
            self.writable[index - NUM_INTROSPECTIVE - NUM_EXTROSPECTIVE]
        }
    }

    fn neighbor_readable_len(&self) -> usize {
        NUM_EXTROSPECTIVE
    }

    fn read_neighbor(&self, index: usize) -> f32 {
        self.extro.get(index).copied().unwrap_or(0.0)
    }

    fn writable_len(&self) -> usize {
        NUM_WRITABLE
    }

    fn read_writable(&self, index: usize) -> f32 {
        self.writable[index]
    }

    fn write_writable(&mut self, index: usize, value: f32) {
        self.writable[index] = value;
    }

    fn send_inter(&mut self, tag: Tag, payload: [f32; NUM_REGISTERS]) {
        self.staged_inter.push(Message { tag, payload });
    }

    fn send_intra(&mut self, peer: usize, tag: Tag, payload: [f32; NUM_REGISTERS]) {
        let target = self.peer(peer);
        self.staged_intra.push((target, Message { tag, payload }));
    }

    fn broadcast_intra(&mut self, tag: Tag, payload: [f32; NUM_REGISTERS]) {
        for d in 0..NUM_CARDINALS {
            if d != self.my_dir {
                self.staged_intra.push((d, Message { tag, payload }));
            }
        }
    }
}
