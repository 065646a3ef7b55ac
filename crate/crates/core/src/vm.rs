//! The event-driven virtual CPU.
//!
//! Each CPU hosts a ring of virtual cores executing one shared program.
//! Modules are activated by tag lookup against two tables: a global
//! table holding every module, and an exposed table holding only the
//! modules whose tag ends in 0 (the subset reachable from other cells).
//! Jump instructions route through per-module local anchor tables.
//! Lookup is biased by decaying per-entry regulators.

use std::sync::Arc;

use rand::RngCore;

use crate::ops::{Instruction, OpCode};
use crate::tag::{match_distance, MatchThresholds, Tag};

pub const NUM_REGISTERS: usize = 8;
pub const DEFAULT_MAX_CORES: usize = 16;
pub const MAX_FORK_REQUESTS: usize = 3;
pub const SWITCH_STEPS: usize = 8;
pub const DEFAULT_CYCLES_PER_ROUND: usize = 16;

/// Additive regulation: adjusted = raw + REG_SLOPE * value, where the
/// down-regulation benefit is capped and the result keeps a little
/// leeway beyond [0, 1] so saturated entries still order.
pub const REG_SLOPE: f64 = 0.1;
pub const REG_MAX_BENEFIT: f64 = 0.25;
pub const REG_CLAMP_LEEWAY: f64 = 0.1;
pub const REG_COUNTDOWN_START: i64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regulator {
    pub value: f64,
    pub countdown: i64,
}

impl Regulator {
    pub fn set(&mut self, v: f64) {
        self.value = v;
        self.countdown = REG_COUNTDOWN_START;
    }

    pub fn adjust(&mut self, delta: f64) {
        self.value += delta;
        self.countdown = REG_COUNTDOWN_START;
    }

    /// Age the countdown; once it runs out the value snaps back to 0.
    /// Negative amounts forestall decay.
    pub fn decay(&mut self, amount: i64) {
        self.countdown -= amount;
        if self.countdown <= 0 {
            self.countdown = 0;
            self.value = 0.0;
        }
    }

    fn adjusted(&self, raw: f64) -> f64 {
        let delta = (REG_SLOPE * self.value).max(-REG_MAX_BENEFIT);
        (raw + delta).clamp(-REG_CLAMP_LEEWAY, 1.0 + REG_CLAMP_LEEWAY)
    }
}

#[derive(Clone, Debug)]
struct JumpEntry {
    tag: Tag,
    target: usize,
    regulator: Regulator,
}

/// Tag-matching lookup table with per-entry regulators.
#[derive(Clone, Debug, Default)]
pub struct JumpTable {
    entries: Vec<JumpEntry>,
}

impl JumpTable {
    pub fn new(entries: impl IntoIterator<Item = (Tag, usize)>) -> JumpTable {
        JumpTable {
            entries: entries
                .into_iter()
                .map(|(tag, target)| JumpEntry {
                    tag,
                    target,
                    regulator: Regulator::default(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry minimizing regulator-adjusted distance, if the
    /// best adjusted distance is within `threshold`. Ties break toward
    /// the lowest target index.
    pub fn best_entry(&self, query: Tag, threshold: f64) -> Option<usize> {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let adjusted = e.regulator.adjusted(match_distance(query, e.tag));
            let candidate = (adjusted, e.target, i);
            best = Some(match best {
                None => candidate,
                Some(cur) => {
                    if (candidate.0, candidate.1) < (cur.0, cur.1) {
                        candidate
                    } else {
                        cur
                    }
                }
            });
        }
        best.filter(|&(d, _, _)| d <= threshold).map(|(_, _, i)| i)
    }

    /// Resolved lookup: the target instruction index of the best match.
    pub fn lookup(&self, query: Tag, threshold: f64) -> Option<usize> {
        self.best_entry(query, threshold)
            .map(|i| self.entries[i].target)
    }

    pub fn regulator_of_best(&self, query: Tag, threshold: f64) -> Option<f64> {
        self.best_entry(query, threshold)
            .map(|i| self.entries[i].regulator.value)
    }

    pub fn set_regulator(&mut self, query: Tag, threshold: f64, v: f64) {
        if let Some(i) = self.best_entry(query, threshold) {
            self.entries[i].regulator.set(v);
        }
    }

    pub fn adjust_regulator(&mut self, query: Tag, threshold: f64, delta: f64) {
        if let Some(i) = self.best_entry(query, threshold) {
            self.entries[i].regulator.adjust(delta);
        }
    }

    pub fn decay_regulator(&mut self, query: Tag, threshold: f64, amount: i64) {
        if let Some(i) = self.best_entry(query, threshold) {
            self.entries[i].regulator.decay(amount);
        }
    }

    /// One decay event on every entry (the decay-to-baseline service).
    pub fn decay_all(&mut self) {
        for e in &mut self.entries {
            e.regulator.decay(1);
        }
    }

    pub fn reset_regulators(&mut self) {
        for e in &mut self.entries {
            e.regulator = Regulator::default();
        }
    }

    #[cfg(test)]
    pub fn regulator_values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.regulator.value).collect()
    }
}

/// Structure derived from a program: module boundaries, anchor tables,
/// and the closing rule for global anchors.
///
/// A region is the span between consecutive global anchors. A global
/// anchor closes the preceding region (terminates the executing core)
/// only if that region contains a local anchor; otherwise execution
/// falls through, letting several global anchors lead into one module.
#[derive(Clone, Debug)]
pub struct ProgramLayout {
    len: usize,
    region_of: Vec<u16>,
    region_start: Vec<usize>,
    closes: Vec<bool>,
    global_entries: Vec<(Tag, usize)>,
    exposed_entries: Vec<(Tag, usize)>,
    local_entries: Vec<Vec<(Tag, usize)>>,
}

impl ProgramLayout {
    pub fn analyze(program: &[Instruction]) -> ProgramLayout {
        let len = program.len();
        let mut region_of = vec![0u16; len];
        let mut region_start = vec![0usize];
        let mut closes = vec![false; len];
        let mut global_entries = Vec::new();
        let mut local_entries: Vec<Vec<(Tag, usize)>> = vec![Vec::new()];
        let mut local_seen_in_region = false;

        for (i, inst) in program.iter().enumerate() {
            match inst.op {
                OpCode::GlobalAnchor => {
                    closes[i] = local_seen_in_region;
                    global_entries.push((inst.tag, i));
                    region_start.push(i);
                    local_entries.push(Vec::new());
                    local_seen_in_region = false;
                    region_of[i] = (region_start.len() - 1) as u16;
                }
                OpCode::LocalAnchor => {
                    local_seen_in_region = true;
                    region_of[i] = (region_start.len() - 1) as u16;
                    let region = local_entries.len() - 1;
                    local_entries[region].push((inst.tag, i));
                }
                _ => {
                    region_of[i] = (region_start.len() - 1) as u16;
                }
            }
        }

        let exposed_entries = global_entries
            .iter()
            .copied()
            .filter(|(tag, _)| tag.ends_in_zero())
            .collect();

        ProgramLayout {
            len,
            region_of,
            region_start,
            closes,
            global_entries,
            exposed_entries,
            local_entries,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn region_of(&self, index: usize) -> usize {
        self.region_of[index] as usize
    }

    pub fn num_regions(&self) -> usize {
        self.region_start.len()
    }

    pub fn closes_module(&self, index: usize) -> bool {
        self.closes[index]
    }

    pub fn global_entries(&self) -> &[(Tag, usize)] {
        &self.global_entries
    }

    pub fn exposed_entries(&self) -> &[(Tag, usize)] {
        &self.exposed_entries
    }

    pub fn local_entries(&self, region: usize) -> &[(Tag, usize)] {
        &self.local_entries[region]
    }
}

/// One virtual core: eight float registers plus control state.
#[derive(Clone, Debug)]
pub struct Core {
    pub registers: [f32; NUM_REGISTERS],
    pub pc: usize,
    pub module_start: usize,
    pub fork_requests: Vec<Tag>,
    pub alive: bool,
    birth_seq: u64,
}

impl Core {
    fn launch(at: usize, birth_seq: u64) -> Core {
        Core {
            registers: [0.0; NUM_REGISTERS],
            pc: at,
            module_start: at,
            fork_requests: Vec::new(),
            alive: true,
            birth_seq,
        }
    }

    fn reg(&self, arg: u8) -> f32 {
        self.registers[arg as usize % NUM_REGISTERS]
    }

    fn set_reg(&mut self, arg: u8, v: f32) {
        self.registers[arg as usize % NUM_REGISTERS] = v;
    }
}

/// What instruction execution can see and touch outside the core.
///
/// Reading an absent neighbor yields zeros; state indices are reduced
/// modulo the respective vector length by the caller.
pub trait Peripheral {
    fn readable_len(&self) -> usize;
    fn read_own(&self, index: usize) -> f32;
    fn neighbor_readable_len(&self) -> usize;
    fn read_neighbor(&self, index: usize) -> f32;
    fn writable_len(&self) -> usize;
    fn read_writable(&self, index: usize) -> f32;
    fn write_writable(&mut self, index: usize, value: f32);
    fn send_inter(&mut self, tag: Tag, payload: [f32; NUM_REGISTERS]);
    /// `peer` selects among the other same-cell processors (0..=2).
    fn send_intra(&mut self, peer: usize, tag: Tag, payload: [f32; NUM_REGISTERS]);
    fn broadcast_intra(&mut self, tag: Tag, payload: [f32; NUM_REGISTERS]);
}

/// Peripheral that ignores everything; handy for tests and null cells.
#[derive(Default)]
pub struct NullPeripheral;

impl Peripheral for NullPeripheral {
    fn readable_len(&self) -> usize {
        1
    }
    fn read_own(&self, _: usize) -> f32 {
        0.0
    }
    fn neighbor_readable_len(&self) -> usize {
        1
    }
    fn read_neighbor(&self, _: usize) -> f32 {
        0.0
    }
    fn writable_len(&self) -> usize {
        1
    }
    fn read_writable(&self, _: usize) -> f32 {
        0.0
    }
    fn write_writable(&mut self, _: usize, _: f32) {}
    fn send_inter(&mut self, _: Tag, _: [f32; NUM_REGISTERS]) {}
    fn send_intra(&mut self, _: usize, _: Tag, _: [f32; NUM_REGISTERS]) {}
    fn broadcast_intra(&mut self, _: Tag, _: [f32; NUM_REGISTERS]) {}
}

/// The lookup tables of one CPU (separate from the core ring so a core
/// can be executed while tables are mutated by regulator ops).
#[derive(Clone, Debug)]
pub struct CpuTables {
    pub global: JumpTable,
    pub exposed: JumpTable,
    pub locals: Vec<JumpTable>,
}

impl CpuTables {
    fn from_layout(layout: &ProgramLayout) -> CpuTables {
        CpuTables {
            global: JumpTable::new(layout.global_entries().iter().copied()),
            exposed: JumpTable::new(layout.exposed_entries().iter().copied()),
            locals: (0..layout.num_regions())
                .map(|r| JumpTable::new(layout.local_entries(r).iter().copied()))
                .collect(),
        }
    }

    pub fn decay_all(&mut self) {
        self.global.decay_all();
        self.exposed.decay_all();
        for t in &mut self.locals {
            t.decay_all();
        }
    }

    pub fn reset_regulators(&mut self) {
        self.global.reset_regulators();
        self.exposed.reset_regulators();
        for t in &mut self.locals {
            t.reset_regulators();
        }
    }
}

/// One cardinal processor's CPU: a ring of cores over a shared program.
#[derive(Clone, Debug)]
pub struct CpuState {
    pub layout: Arc<ProgramLayout>,
    pub tables: CpuTables,
    cores: std::collections::VecDeque<Core>,
    max_cores: usize,
    next_birth_seq: u64,
}

impl CpuState {
    pub fn new(layout: Arc<ProgramLayout>, max_cores: usize) -> CpuState {
        let tables = CpuTables::from_layout(&layout);
        CpuState {
            layout,
            tables,
            cores: std::collections::VecDeque::new(),
            max_cores,
            next_birth_seq: 0,
        }
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> impl Iterator<Item = &Core> {
        self.cores.iter()
    }

    pub fn purge_cores(&mut self) {
        self.cores.clear();
    }

    fn push_core(&mut self, at: usize) {
        if self.cores.len() >= self.max_cores {
            // evict the oldest active core
            let oldest = self
                .cores
                .iter()
                .enumerate()
                .min_by_key(|(_, c)| c.birth_seq)
                .map(|(i, _)| i)
                .unwrap();
            self.cores.remove(oldest);
        }
        let seq = self.next_birth_seq;
        self.next_birth_seq += 1;
        self.cores.push_back(Core::launch(at, seq));
    }

    /// Activate the best-matching module through the global table.
    pub fn launch(&mut self, tag: Tag, thresholds: &MatchThresholds) -> bool {
        match self.tables.global.lookup(tag, thresholds.module_threshold) {
            Some(at) => {
                self.push_core(at);
                true
            }
            None => false,
        }
    }

    /// Activate through the exposed table (messages from other cells).
    pub fn launch_exposed(&mut self, tag: Tag, thresholds: &MatchThresholds) -> bool {
        match self.tables.exposed.lookup(tag, thresholds.module_threshold) {
            Some(at) => {
                self.push_core(at);
                true
            }
            None => false,
        }
    }

    /// Launch a core to process a message: the payload lands in the new
    /// core's registers. Inter-cell messages may only reach exposed
    /// modules; intra-cell messages use the global table.
    pub fn launch_with_payload(
        &mut self,
        tag: Tag,
        payload: [f32; NUM_REGISTERS],
        thresholds: &MatchThresholds,
        exposed_only: bool,
    ) -> bool {
        let table = if exposed_only {
            &self.tables.exposed
        } else {
            &self.tables.global
        };
        match table.lookup(tag, thresholds.module_threshold) {
            Some(at) => {
                self.push_core(at);
                self.cores.back_mut().unwrap().registers = payload;
                true
            }
            None => false,
        }
    }

    /// Run `cycles` scheduler cycles: each cycle gives one core a turn of
    /// up to `SWITCH_STEPS` instructions. Fork requests of a terminated
    /// core are serviced when it dies.
    pub fn execute_cycles<P: Peripheral, R: RngCore>(
        &mut self,
        program: &[Instruction],
        peripheral: &mut P,
        rng: &mut R,
        thresholds: &MatchThresholds,
        cycles: usize,
    ) {
        debug_assert_eq!(program.len(), self.layout.len());
        if program.is_empty() {
            return;
        }
        for _ in 0..cycles {
            let Some(mut core) = self.cores.pop_front() else {
                break;
            };
            for _ in 0..SWITCH_STEPS {
                if !core.alive {
                    break;
                }
                step_instruction(
                    &mut core,
                    program,
                    &self.layout,
                    &mut self.tables,
                    peripheral,
                    rng,
                    thresholds,
                );
            }
            if core.alive {
                self.cores.push_back(core);
            } else {
                for tag in std::mem::take(&mut core.fork_requests) {
                    self.launch(tag, thresholds);
                }
            }
        }
    }
}

fn uniform01(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn shift_bits(bits: u32, amount: f32) -> u32 {
    if amount.is_nan() {
        return bits;
    }
    let s = amount.clamp(-64.0, 64.0) as i32;
    if s >= 32 || s <= -32 {
        0
    } else if s >= 0 {
        bits << s
    } else {
        bits >> -s
    }
}

/// Execute one instruction on `core`, returning the number of RNG draws
/// consumed (which must equal the op's static metadata).
pub fn step_instruction<P: Peripheral, R: RngCore>(
    core: &mut Core,
    program: &[Instruction],
    layout: &ProgramLayout,
    tables: &mut CpuTables,
    peripheral: &mut P,
    rng: &mut R,
    thresholds: &MatchThresholds,
) -> u8 {
    let inst = program[core.pc];
    let here = core.pc;
    let [a0, a1, a2] = inst.args;
    let mut advance = true;
    let mut touches = 0u8;
    let mut touch = |rng: &mut R| -> u64 {
        touches += 1;
        rng.next_u64()
    };

    match inst.op {
        OpCode::Nop0 => {}
        OpCode::Nop1 => {
            touch(rng);
        }
        OpCode::Nop2 => {
            touch(rng);
            touch(rng);
        }
        OpCode::ForkIf => {
            if core.reg(a0) != 0.0 && core.fork_requests.len() < MAX_FORK_REQUESTS {
                core.fork_requests.push(inst.tag);
            }
        }
        OpCode::TerminateIf => {
            if core.reg(a0) != 0.0 {
                core.alive = false;
            }
        }
        OpCode::Add => core.set_reg(a0, core.reg(a1) + core.reg(a2)),
        OpCode::Subtract => core.set_reg(a0, core.reg(a1) - core.reg(a2)),
        OpCode::Multiply => core.set_reg(a0, core.reg(a1) * core.reg(a2)),
        OpCode::Divide => core.set_reg(a0, core.reg(a1) / core.reg(a2)),
        OpCode::Modulo => core.set_reg(a0, core.reg(a1) % core.reg(a2)),
        OpCode::BitwiseAnd => {
            core.set_reg(a0, f32::from_bits(core.reg(a1).to_bits() & core.reg(a2).to_bits()))
        }
        OpCode::BitwiseOr => {
            core.set_reg(a0, f32::from_bits(core.reg(a1).to_bits() | core.reg(a2).to_bits()))
        }
        OpCode::BitwiseXor => {
            core.set_reg(a0, f32::from_bits(core.reg(a1).to_bits() ^ core.reg(a2).to_bits()))
        }
        OpCode::BitwiseNot => core.set_reg(a0, f32::from_bits(!core.reg(a1).to_bits())),
        OpCode::BitwiseShift => {
            core.set_reg(a0, f32::from_bits(shift_bits(core.reg(a1).to_bits(), core.reg(a2))))
        }
        OpCode::CountOnes => core.set_reg(a0, core.reg(a1).to_bits().count_ones() as f32),
        OpCode::Equal => core.set_reg(a0, (core.reg(a1) == core.reg(a2)) as u8 as f32),
        OpCode::NotEqual => core.set_reg(a0, (core.reg(a1) != core.reg(a2)) as u8 as f32),
        OpCode::GreaterThan => core.set_reg(a0, (core.reg(a1) > core.reg(a2)) as u8 as f32),
        OpCode::LessThan => core.set_reg(a0, (core.reg(a1) < core.reg(a2)) as u8 as f32),
        OpCode::LogicalAnd => {
            core.set_reg(a0, (core.reg(a1) != 0.0 && core.reg(a2) != 0.0) as u8 as f32)
        }
        OpCode::LogicalOr => {
            core.set_reg(a0, (core.reg(a1) != 0.0 || core.reg(a2) != 0.0) as u8 as f32)
        }
        OpCode::Not => core.set_reg(a0, (core.reg(a0) == 0.0) as u8 as f32),
        OpCode::Negate => core.set_reg(a0, -core.reg(a0)),
        OpCode::Increment => core.set_reg(a0, core.reg(a0) + 1.0),
        OpCode::Decrement => core.set_reg(a0, core.reg(a0) - 1.0),
        OpCode::RandomBool => {
            let p = inst.tag.bits() as f64 / (u64::MAX as f64 + 1.0);
            let v = (uniform01(touch(rng)) < p) as u8 as f32;
            core.set_reg(a0, v);
        }
        OpCode::RandomDraw => {
            let v = uniform01(touch(rng)) as f32;
            core.set_reg(a0, v);
        }
        OpCode::RandomFill => {
            let bits = (touch(rng) >> 32) as u32;
            core.set_reg(a0, f32::from_bits(bits));
        }
        OpCode::Terminal => {
            // deterministic value from the tag: the high 32 bits as a
            // fraction of [-2^15, 2^15)
            let frac = inst.tag.high32() as f64 / (u32::MAX as f64 + 1.0);
            core.set_reg(a0, (frac * 65536.0 - 32768.0) as f32);
        }
        OpCode::GlobalAnchor => {
            if layout.closes_module(here) {
                core.alive = false;
            }
        }
        OpCode::LocalAnchor => {}
        OpCode::GlobalJumpIf => {
            if core.reg(a0) != 0.0 {
                if let Some(at) = tables.global.lookup(inst.tag, thresholds.jump_threshold) {
                    if core.reg(a1) != 0.0 {
                        core.registers = [0.0; NUM_REGISTERS];
                    }
                    core.pc = at;
                    core.module_start = at;
                    advance = false;
                }
            }
        }
        OpCode::GlobalJumpIfNot => {
            // same jump condition as GlobalJumpIf; only the register
            // reset condition is inverted
            if core.reg(a0) != 0.0 {
                if let Some(at) = tables.global.lookup(inst.tag, thresholds.jump_threshold) {
                    if core.reg(a1) == 0.0 {
                        core.registers = [0.0; NUM_REGISTERS];
                    }
                    core.pc = at;
                    core.module_start = at;
                    advance = false;
                }
            }
        }
        OpCode::LocalJumpIf => {
            if core.reg(a0) != 0.0 {
                let region = layout.region_of(here);
                if let Some(at) = tables.locals[region].lookup(inst.tag, thresholds.jump_threshold)
                {
                    core.pc = at;
                    advance = false;
                }
            }
        }
        OpCode::LocalJumpIfNot => {
            if core.reg(a0) == 0.0 {
                let region = layout.region_of(here);
                if let Some(at) = tables.locals[region].lookup(inst.tag, thresholds.jump_threshold)
                {
                    core.pc = at;
                    advance = false;
                }
            }
        }
        OpCode::ProtectedRegulatorSet => {
            tables
                .global
                .set_regulator(inst.tag, thresholds.module_threshold, core.reg(a0) as f64);
        }
        OpCode::ProtectedRegulatorAdjust => {
            tables
                .global
                .adjust_regulator(inst.tag, thresholds.module_threshold, core.reg(a0) as f64);
        }
        OpCode::ProtectedRegulatorDecay => {
            tables
                .global
                .decay_regulator(inst.tag, thresholds.module_threshold, core.reg(a0) as i64);
        }
        OpCode::ProtectedRegulatorGet => {
            if let Some(v) = tables
                .global
                .regulator_of_best(inst.tag, thresholds.module_threshold)
            {
                core.set_reg(a0, v as f32);
            }
        }
        OpCode::ExposedRegulatorSet => {
            tables
                .exposed
                .set_regulator(inst.tag, thresholds.module_threshold, core.reg(a0) as f64);
        }
        OpCode::ExposedRegulatorAdjust => {
            tables
                .exposed
                .adjust_regulator(inst.tag, thresholds.module_threshold, core.reg(a0) as f64);
        }
        OpCode::ExposedRegulatorDecay => {
            tables
                .exposed
                .decay_regulator(inst.tag, thresholds.module_threshold, core.reg(a0) as i64);
        }
        OpCode::ExposedRegulatorGet => {
            if let Some(v) = tables
                .exposed
                .regulator_of_best(inst.tag, thresholds.module_threshold)
            {
                core.set_reg(a0, v as f32);
            }
        }
        OpCode::LocalRegulatorSet => {
            let region = layout.region_of(here);
            tables.locals[region].set_regulator(
                inst.tag,
                thresholds.jump_threshold,
                core.reg(a0) as f64,
            );
        }
        OpCode::LocalRegulatorAdjust => {
            let region = layout.region_of(here);
            tables.locals[region].adjust_regulator(
                inst.tag,
                thresholds.jump_threshold,
                core.reg(a0) as f64,
            );
        }
        OpCode::LocalRegulatorDecay => {
            let region = layout.region_of(here);
            tables.locals[region].decay_regulator(
                inst.tag,
                thresholds.jump_threshold,
                core.reg(a0) as i64,
            );
        }
        OpCode::LocalRegulatorGet => {
            let region = layout.region_of(here);
            if let Some(v) =
                tables.locals[region].regulator_of_best(inst.tag, thresholds.jump_threshold)
            {
                core.set_reg(a0, v as f32);
            }
        }
        OpCode::ReadOwnState => {
            let idx = inst.tag.high32() as usize % peripheral.readable_len();
            core.set_reg(a0, peripheral.read_own(idx));
        }
        OpCode::ReadNeighborState => {
            let idx = inst.tag.high32() as usize % peripheral.neighbor_readable_len();
            core.set_reg(a0, peripheral.read_neighbor(idx));
        }
        OpCode::AddToOwnState => {
            let idx = inst.tag.high32() as usize % peripheral.writable_len();
            let v = peripheral.read_writable(idx) + core.reg(a0);
            peripheral.write_writable(idx, v);
        }
        OpCode::MultiplyOwnState => {
            let idx = inst.tag.high32() as usize % peripheral.writable_len();
            let v = peripheral.read_writable(idx) * core.reg(a0);
            peripheral.write_writable(idx, v);
        }
        OpCode::WriteOwnStateIf => {
            if core.reg(a1) != 0.0 {
                let idx = inst.tag.high32() as usize % peripheral.writable_len();
                peripheral.write_writable(idx, core.reg(a0));
            }
        }
        OpCode::SendInterMessageIf => {
            if core.reg(a0) != 0.0 {
                peripheral.send_inter(inst.tag, core.registers);
            }
        }
        OpCode::SendIntraMessageIf => {
            if core.reg(a0) != 0.0 {
                let peer = (a0 as usize + a1 as usize + a2 as usize) % 3;
                peripheral.send_intra(peer, inst.tag, core.registers);
            }
        }
        OpCode::BroadcastIntraMessageIf => {
            if core.reg(a0) != 0.0 {
                peripheral.broadcast_intra(inst.tag, core.registers);
            }
        }
    }

    if advance && core.alive {
        core.pc += 1;
        if core.pc >= program.len() {
            core.pc = core.module_start.min(program.len().saturating_sub(1));
        }
    }
    touches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag::default_thresholds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(op: OpCode, tag: u64, args: [u8; 3]) -> Instruction {
        Instruction::new(op, Tag(tag), args)
    }

    fn cpu_for(program: &[Instruction]) -> CpuState {
        CpuState::new(Arc::new(ProgramLayout::analyze(program)), DEFAULT_MAX_CORES)
    }

    #[test]
    fn empty_table_never_matches() {
        let t = JumpTable::default();
        assert_eq!(t.lookup(Tag(123), 1.0), None);
    }

    #[test]
    fn exact_match_always_passes() {
        let t = JumpTable::new([(Tag(42), 7)]);
        let th = default_thresholds();
        assert_eq!(t.lookup(Tag(42), th.module_threshold), Some(7));
    }

    #[test]
    fn regulation_moves_entries_across_the_threshold() {
        // Find a tag pair whose raw distance sits just below the module
        // threshold, then push it out with up-regulation and back in
        // with down-regulation.
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (query, entry) = loop {
            let q = Tag::random(&mut rng);
            let e = Tag::random(&mut rng);
            let d = match_distance(q, e);
            if d < th.module_threshold && d > th.module_threshold - 0.05 {
                break (q, e);
            }
        };
        let raw = match_distance(query, entry);

        let mut table = JumpTable::new([(entry, 3)]);
        assert_eq!(table.lookup(query, th.module_threshold), Some(3));

        // +10 regulator: adjusted = raw + 1.0 (clamped to 1.1) > threshold
        table.set_regulator(query, f64::INFINITY, 10.0);
        assert_eq!(table.lookup(query, th.module_threshold), None);

        // -10 regulator: benefit capped at 0.25 below raw
        table.set_regulator(query, f64::INFINITY, -10.0);
        let expect = (raw - REG_MAX_BENEFIT).clamp(-REG_CLAMP_LEEWAY, 1.0 + REG_CLAMP_LEEWAY);
        assert!(expect <= th.module_threshold);
        assert_eq!(table.lookup(query, th.module_threshold), Some(3));
    }

    #[test]
    fn lookup_ties_break_to_lowest_target() {
        let tag = Tag(0xaaaa_bbbb_cccc_dddd);
        let t = JumpTable::new([(tag, 9), (tag, 2), (tag, 5)]);
        assert_eq!(t.lookup(tag, 1.0), Some(2));
    }

    #[test]
    fn regulator_decays_to_zero_after_countdown() {
        let mut r = Regulator::default();
        r.set(5.0);
        r.decay(1);
        assert_eq!(r.value, 5.0);
        r.decay(1);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.countdown, 0);
        // negative amounts forestall
        r.set(2.0);
        r.decay(-3);
        assert_eq!(r.countdown, 5);
        r.decay(1);
        assert_eq!(r.value, 2.0);
    }

    #[test]
    fn empty_program_is_inert() {
        let program: Vec<Instruction> = vec![];
        let mut cpu = cpu_for(&program);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let th = default_thresholds();
        assert!(!cpu.launch(Tag(1), &th));
        cpu.execute_cycles(&program, &mut NullPeripheral, &mut rng, &th, 16);
        assert_eq!(cpu.num_cores(), 0);
    }

    #[test]
    fn hand_traced_increment_module() {
        // [GlobalAnchor, Increment r0, TerminateIf r0] -> r0 == 1, dead
        let anchor = Tag(0b10);
        let program = vec![
            inst(OpCode::GlobalAnchor, anchor.bits(), [0; 3]),
            inst(OpCode::Increment, 0, [0, 0, 0]),
            inst(OpCode::TerminateIf, 0, [0, 0, 0]),
        ];
        let mut cpu = cpu_for(&program);
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cpu.launch(anchor, &th));
        assert_eq!(cpu.num_cores(), 1);

        // capture register state right before termination
        let mut seen_r0 = None;
        for _ in 0..4 {
            if let Some(core) = cpu.cores().next() {
                seen_r0 = Some(core.registers[0]);
            }
            cpu.execute_cycles(&program, &mut NullPeripheral, &mut rng, &th, 1);
        }
        assert_eq!(cpu.num_cores(), 0, "core must terminate");
        let _ = seen_r0;
    }

    #[test]
    fn seventeen_launches_cap_at_sixteen_cores() {
        let anchor = Tag(0b100);
        let program = vec![inst(OpCode::GlobalAnchor, anchor.bits(), [0; 3])];
        let mut cpu = cpu_for(&program);
        let th = default_thresholds();
        for _ in 0..17 {
            assert!(cpu.launch(anchor, &th));
        }
        assert_eq!(cpu.num_cores(), DEFAULT_MAX_CORES);
        // oldest (birth_seq 0) must be gone
        assert!(cpu.cores().all(|c| c.birth_seq > 0));
    }

    #[test]
    fn fork_requests_cap_at_three_and_fire_on_termination() {
        let anchor = Tag(0b110);
        let mut program = vec![inst(OpCode::GlobalAnchor, anchor.bits(), [0; 3])];
        program.push(inst(OpCode::Increment, 0, [0, 0, 0]));
        for _ in 0..5 {
            program.push(inst(OpCode::ForkIf, anchor.bits(), [0, 0, 0]));
        }
        program.push(inst(OpCode::TerminateIf, 0, [0, 0, 0]));
        let mut cpu = cpu_for(&program);
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cpu.launch(anchor, &th);
        cpu.execute_cycles(&program, &mut NullPeripheral, &mut rng, &th, 1);
        // original core died; its 3 forks were launched
        assert_eq!(cpu.num_cores(), 3);
    }

    #[test]
    fn pc_wraps_to_module_start() {
        let anchor = Tag(0b1000);
        let program = vec![
            inst(OpCode::GlobalAnchor, anchor.bits(), [0; 3]),
            inst(OpCode::Increment, 0, [0, 0, 0]),
        ];
        let mut cpu = cpu_for(&program);
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cpu.launch(anchor, &th);
        // 2 cycles x 8 steps = 16 instructions: 8 full wraps, each
        // executing anchor (nop) + increment
        cpu.execute_cycles(&program, &mut NullPeripheral, &mut rng, &th, 2);
        let core = cpu.cores().next().unwrap();
        assert_eq!(core.registers[0], 8.0);
    }

    #[test]
    fn global_anchor_closing_rule() {
        // module A has a local anchor, so the following global anchor
        // closes it; module B has none, so execution falls through B's
        // trailing anchor into C.
        let a = Tag(0b0010);
        let b = Tag(0b0100);
        let c = Tag(0b1000);
        let program = vec![
            inst(OpCode::GlobalAnchor, a.bits(), [0; 3]),
            inst(OpCode::LocalAnchor, 0xffff, [0; 3]),
            inst(OpCode::Increment, 0, [0, 0, 0]),
            inst(OpCode::GlobalAnchor, b.bits(), [0; 3]), // closes A
            inst(OpCode::Increment, 0, [1, 0, 0]),
            inst(OpCode::GlobalAnchor, c.bits(), [0; 3]), // does not close B
            inst(OpCode::Increment, 0, [2, 0, 0]),
        ];
        let layout = ProgramLayout::analyze(&program);
        assert!(layout.closes_module(3));
        assert!(!layout.closes_module(5));
        assert!(!layout.closes_module(0));
        assert_eq!(layout.num_regions(), 4); // prelude + 3 anchored
    }

    #[test]
    fn rng_touch_metadata_matches_actual_consumption() {
        // fuzz: every op's actual draw count equals its metadata
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let th = default_thresholds();
        for &op in OpCode::ALL {
            for trial in 0..8u64 {
                let program = vec![
                    Instruction::new(op, Tag(trial.wrapping_mul(0x9e37_79b9_7f4a_7c15)), [
                        (trial % 8) as u8,
                        ((trial + 1) % 8) as u8,
                        ((trial + 2) % 8) as u8,
                    ]),
                ];
                let layout = ProgramLayout::analyze(&program);
                let mut tables = CpuTables::from_layout(&layout);
                let mut core = Core::launch(0, 0);
                core.registers = [1.0, -2.0, 3.5, 0.0, 7.0, 0.25, -0.5, 2.0];
                let consumed = step_instruction(
                    &mut core,
                    &program,
                    &layout,
                    &mut tables,
                    &mut NullPeripheral,
                    &mut rng,
                    &th,
                );
                assert_eq!(consumed, op.rng_touches(), "{}", op.name());
            }
        }
    }

    #[test]
    fn arithmetic_catalog_semantics() {
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut run = |op: OpCode, regs: [f32; 8], args: [u8; 3]| -> [f32; 8] {
            let program = vec![inst(op, 0, args)];
            let layout = ProgramLayout::analyze(&program);
            let mut tables = CpuTables::from_layout(&layout);
            let mut core = Core::launch(0, 0);
            core.registers = regs;
            step_instruction(
                &mut core,
                &program,
                &layout,
                &mut tables,
                &mut NullPeripheral,
                &mut rng,
                &th,
            );
            core.registers
        };

        let mut regs = [0.0f32; 8];
        regs[1] = 2.0;
        regs[2] = 3.0;
        assert_eq!(run(OpCode::Add, regs, [0, 1, 2])[0], 5.0);
        assert_eq!(run(OpCode::Subtract, regs, [0, 1, 2])[0], -1.0);
        assert_eq!(run(OpCode::Multiply, regs, [0, 1, 2])[0], 6.0);
        assert_eq!(run(OpCode::GreaterThan, regs, [0, 2, 1])[0], 1.0);
        assert_eq!(run(OpCode::LessThan, regs, [0, 2, 1])[0], 0.0);

        // divide by zero stores non-finite values verbatim
        let mut dz = [0.0f32; 8];
        dz[1] = 1.0;
        assert!(run(OpCode::Divide, dz, [0, 1, 2])[0].is_infinite());
        assert!(run(OpCode::Modulo, dz, [0, 1, 2])[0].is_nan());

        // popcount oracle on the stored bit pattern
        let mut bits = [0.0f32; 8];
        bits[1] = f32::from_bits(0b1011_0110_1000_0000_0000_0000_0000_0001);
        let expected = bits[1].to_bits().count_ones() as f32;
        assert_eq!(run(OpCode::CountOnes, bits, [0, 1, 0])[0], expected);
        assert_eq!(expected, 7.0);
    }

    #[test]
    fn nop_one_advances_rng_exactly_once() {
        let program = vec![inst(OpCode::Nop1, 0, [0; 3])];
        let layout = ProgramLayout::analyze(&program);
        let mut tables = CpuTables::from_layout(&layout);
        let th = default_thresholds();

        let mut rng_a = ChaCha8Rng::seed_from_u64(1234);
        let mut rng_b = ChaCha8Rng::seed_from_u64(1234);
        let mut core = Core::launch(0, 0);
        let before = core.clone();
        let consumed = step_instruction(
            &mut core,
            &program,
            &layout,
            &mut tables,
            &mut NullPeripheral,
            &mut rng_a,
            &th,
        );
        assert_eq!(consumed, 1);
        assert_eq!(core.registers, before.registers);
        rng_b.next_u64();
        assert_eq!(rng_a.next_u64(), rng_b.next_u64());
    }

    #[test]
    fn terminal_value_is_deterministic_and_bounded() {
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..100u64 {
            let tag = seed.wrapping_mul(0xa076_1d64_78bd_642f);
            let program = vec![inst(OpCode::Terminal, tag, [0; 3])];
            let layout = ProgramLayout::analyze(&program);
            let mut tables = CpuTables::from_layout(&layout);
            let mut c1 = Core::launch(0, 0);
            let mut c2 = Core::launch(0, 0);
            step_instruction(&mut c1, &program, &layout, &mut tables, &mut NullPeripheral, &mut rng, &th);
            step_instruction(&mut c2, &program, &layout, &mut tables, &mut NullPeripheral, &mut rng, &th);
            assert_eq!(c1.registers[0], c2.registers[0]);
            assert!((-32768.0..32768.0).contains(&c1.registers[0]));
        }
    }

    #[test]
    fn hundred_forks_never_exceed_core_cap() {
        let anchor = Tag(0b10010);
        let mut program = vec![
            inst(OpCode::GlobalAnchor, anchor.bits(), [0; 3]),
            inst(OpCode::Increment, 0, [0, 0, 0]),
        ];
        for _ in 0..3 {
            program.push(inst(OpCode::ForkIf, anchor.bits(), [0, 0, 0]));
        }
        program.push(inst(OpCode::TerminateIf, 0, [0, 0, 0]));
        let mut cpu = cpu_for(&program);
        let th = default_thresholds();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cpu.launch(anchor, &th);
        for _ in 0..100 {
            cpu.execute_cycles(&program, &mut NullPeripheral, &mut rng, &th, 16);
            assert!(cpu.num_cores() <= DEFAULT_MAX_CORES);
        }
    }
}
