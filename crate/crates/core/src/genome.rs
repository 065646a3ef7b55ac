//! Genome representation, random generation, mutation, and nopout.
//!
//! A genome is a linear program plus a fixed block of event tags and
//! lineage annotations. Genomes are immutable values: every operation
//! returns a fresh genome.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::ops::{Instruction, OpCode};
use crate::tag::Tag;

pub const PROGRAM_MAX_SIZE: usize = 4096;
pub const PROGRAM_START_SIZE: usize = 128;
pub const NUM_EVENT_TAGS: usize = 35;
/// Kin group levels tracked by the simulation (a build constant).
pub const NUM_KIN_LEVELS: usize = 2;

/// How much kin-group commonality an offspring retains, which gates the
/// whole-genome mutation probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KinCommonality {
    Full,
    Partial,
    None,
}

impl KinCommonality {
    pub fn from_shared_levels(shared: usize) -> KinCommonality {
        match shared {
            0 => KinCommonality::None,
            n if n >= NUM_KIN_LEVELS => KinCommonality::Full,
            _ => KinCommonality::Partial,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationConfig {
    /// Mutation probability per reproduction when any commonality remains.
    pub mutation_apply_rate_kin: f64,
    /// Mutation probability when no kin commonality is retained.
    pub mutation_apply_rate_nonkin: f64,
    /// Per-bit flip probability over the binary genome image.
    pub point_rate_per_bit: f64,
    /// Per-site insertion/deletion event rate.
    pub sequence_defect_rate_per_site: f64,
    /// Introduced sites bound for minor indels (uniform 0..=bound).
    pub minor_indel_bound: usize,
    /// Probability a sequence mutation takes severe intensity.
    pub severe_rate: f64,
}

impl Default for MutationConfig {
    fn default() -> MutationConfig {
        MutationConfig {
            mutation_apply_rate_kin: 0.1,
            mutation_apply_rate_nonkin: 1.0,
            point_rate_per_bit: 0.0002,
            sequence_defect_rate_per_site: 0.001,
            minor_indel_bound: 8,
            severe_rate: 0.001,
        }
    }
}

impl MutationConfig {
    pub fn disabled() -> MutationConfig {
        MutationConfig {
            mutation_apply_rate_kin: 0.0,
            mutation_apply_rate_nonkin: 0.0,
            point_rate_per_bit: 0.0,
            sequence_defect_rate_per_site: 0.0,
            minor_indel_bound: 0,
            severe_rate: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationCounts {
    /// Reproductions on which the mutation gate fired.
    pub events: u64,
    pub point_mutations: u64,
    pub indels: u64,
}

/// The unit of heredity: program, event tags, and lineage annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genome {
    pub program: Vec<Instruction>,
    pub event_tags: [Tag; NUM_EVENT_TAGS],
    /// Originally seeded ancestor (stint 0 progenitor).
    pub root_id: u64,
    /// Ancestor seeded into the current stint.
    pub stint_root_id: u64,
    /// Ancestral reproduction counts keyed by shared kin levels (0..=L).
    pub generation_counters: [u64; NUM_KIN_LEVELS + 1],
    pub mutation_counts: MutationCounts,
}

impl Genome {
    /// Uniform-random genome: ops drawn proportional to prevalence.
    pub fn generate_random<R: Rng>(start_size: usize, rng: &mut R) -> Genome {
        assert!(
            (1..=PROGRAM_MAX_SIZE).contains(&start_size),
            "start_size out of range"
        );
        let program = (0..start_size).map(|_| random_instruction(rng)).collect();
        let mut event_tags = [Tag(0); NUM_EVENT_TAGS];
        for t in &mut event_tags {
            *t = Tag::random(rng);
        }
        Genome {
            program,
            event_tags,
            root_id: 0,
            stint_root_id: 0,
            generation_counters: [0; NUM_KIN_LEVELS + 1],
            mutation_counts: MutationCounts::default(),
        }
    }

    /// Offspring copy: mutation gated on kin commonality, lineage
    /// counters advanced.
    pub fn reproduce<R: Rng>(
        &self,
        shared_levels: usize,
        cfg: &MutationConfig,
        rng: &mut R,
    ) -> Genome {
        let gate = match KinCommonality::from_shared_levels(shared_levels) {
            KinCommonality::None => cfg.mutation_apply_rate_nonkin,
            _ => cfg.mutation_apply_rate_kin,
        };
        let mut child = if rng.gen::<f64>() < gate {
            self.mutate_unconditionally(cfg, rng)
        } else {
            self.clone()
        };
        child.generation_counters[shared_levels.min(NUM_KIN_LEVELS)] += 1;
        child
    }

    /// Apply the full mutation suite regardless of the gate.
    pub fn mutate_unconditionally<R: Rng>(&self, cfg: &MutationConfig, rng: &mut R) -> Genome {
        let mut g = self.clone();
        g.mutation_counts.events += 1;
        point_mutate(&mut g, cfg.point_rate_per_bit, rng);
        sequence_mutate(&mut g, cfg, rng);
        g
    }

    /// Replace the instruction at `site` with the Nop variant consuming
    /// the same number of RNG draws; tag and args are preserved so the
    /// genome's bit layout stays comparable. Returns `false` (genome
    /// unchanged) when the site is already a Nop.
    pub fn nopout_site(&self, site: usize) -> (Genome, bool) {
        assert!(site < self.program.len(), "nopout site out of range");
        let inst = self.program[site];
        if inst.op.is_nop() {
            return (self.clone(), false);
        }
        let mut g = self.clone();
        g.program[site].op = inst.op.matching_nop();
        (g, true)
    }

    pub fn num_non_nop_sites(&self) -> usize {
        self.program.iter().filter(|i| !i.op.is_nop()).count()
    }

    /// Total bits in the binary image (program + event tags).
    pub fn bit_len(&self) -> usize {
        self.program.len() * 96 + NUM_EVENT_TAGS * 64
    }
}

pub fn random_instruction<R: Rng>(rng: &mut R) -> Instruction {
    let weights: Vec<u32> = OpCode::ALL.iter().map(|o| o.prevalence()).collect();
    let dist = WeightedIndex::new(&weights).unwrap();
    Instruction {
        op: OpCode::ALL[dist.sample(rng)],
        tag: Tag::random(rng),
        args: [rng.gen(), rng.gen(), rng.gen()],
    }
}

/// Flip each bit of the binary genome image with probability `rate`.
fn point_mutate<R: Rng>(g: &mut Genome, rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    let n_bits = g.bit_len() as u64;
    let flips = Binomial::new(n_bits, rate).unwrap().sample(rng);
    if flips == 0 {
        return;
    }
    let program_bits = g.program.len() * 96;
    for _ in 0..flips {
        let bit = rng.gen_range(0..n_bits) as usize;
        if bit < program_bits {
            let site = bit / 96;
            let mut bytes = g.program[site].to_bytes();
            bytes[(bit % 96) / 8] ^= 1 << (bit % 8);
            g.program[site] = Instruction::from_bytes(bytes);
        } else {
            let tag_bit = bit - program_bits;
            g.event_tags[tag_bit / 64].0 ^= 1 << (tag_bit % 64);
        }
    }
    g.mutation_counts.point_mutations += flips;
}

/// Insertion/deletion defects at a per-site rate; half deletions, half
/// insertions; insertions split between fresh random instructions and
/// duplication of the immediately preceding segment.
fn sequence_mutate<R: Rng>(g: &mut Genome, cfg: &MutationConfig, rng: &mut R) {
    if cfg.sequence_defect_rate_per_site <= 0.0 {
        return;
    }
    let n_defects = Binomial::new(g.program.len() as u64, cfg.sequence_defect_rate_per_site)
        .unwrap()
        .sample(rng);
    for _ in 0..n_defects {
        g.mutation_counts.indels += 1;
        let site = rng.gen_range(0..g.program.len());
        let severe = rng.gen::<f64>() < cfg.severe_rate;
        let bound = if severe {
            g.program.len()
        } else {
            cfg.minor_indel_bound
        };
        let span = rng.gen_range(0..=bound);
        if rng.gen::<bool>() {
            // deletion, truncated at the tail, always keeping >= 1 site
            let span = span.min(g.program.len() - site).min(g.program.len() - 1);
            g.program.drain(site..site + span);
        } else {
            let duplicate = rng.gen::<bool>();
            let insert: Vec<Instruction> = if duplicate && site >= span {
                g.program[site - span..site].to_vec()
            } else if duplicate {
                // not enough preceding material: fall back to random
                (0..span).map(|_| random_instruction(rng)).collect()
            } else {
                (0..span).map(|_| random_instruction(rng)).collect()
            };
            let room = PROGRAM_MAX_SIZE - g.program.len();
            let take = insert.len().min(room);
            g.program.splice(site..site, insert.into_iter().take(take));
        }
        if g.program.is_empty() {
            g.program.push(Instruction::nop());
        }
    }
}

// -- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct InstructionRecord {
    op: String,
    tag: String,
    args: [u8; 3],
}

#[derive(Serialize, Deserialize)]
struct GenomeRecord {
    program: Vec<InstructionRecord>,
    event_tags: Vec<String>,
    root_id: u64,
    stint_root_id: u64,
    generation_counters: [u64; NUM_KIN_LEVELS + 1],
    mutation_counts: MutationCounts,
}

#[derive(Debug, thiserror::Error)]
pub enum GenomeParseError {
    #[error("malformed genome record at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unknown op code name {0:?}")]
    UnknownOp(String),
    #[error("bad tag literal {0:?}")]
    BadTag(String),
    #[error("expected {NUM_EVENT_TAGS} event tags, found {0}")]
    BadEventTagCount(usize),
    #[error("program length {0} outside [1, {PROGRAM_MAX_SIZE}]")]
    BadProgramLength(usize),
}

impl Genome {
    /// Self-describing single-line JSON record with bit-exact hex tags.
    pub fn serialize(&self) -> String {
        let record = GenomeRecord {
            program: self
                .program
                .iter()
                .map(|i| InstructionRecord {
                    op: i.op.name().to_string(),
                    tag: i.tag.to_hex(),
                    args: i.args,
                })
                .collect(),
            event_tags: self.event_tags.iter().map(|t| t.to_hex()).collect(),
            root_id: self.root_id,
            stint_root_id: self.stint_root_id,
            generation_counters: self.generation_counters,
            mutation_counts: self.mutation_counts,
        };
        serde_json::to_string(&record).expect("genome serialization cannot fail")
    }

    pub fn deserialize(text: &str) -> Result<Genome, GenomeParseError> {
        let record: GenomeRecord =
            serde_json::from_str(text).map_err(|e| GenomeParseError::Malformed {
                offset: e.column().saturating_sub(1),
                reason: e.to_string(),
            })?;
        if record.event_tags.len() != NUM_EVENT_TAGS {
            return Err(GenomeParseError::BadEventTagCount(record.event_tags.len()));
        }
        if record.program.is_empty() || record.program.len() > PROGRAM_MAX_SIZE {
            return Err(GenomeParseError::BadProgramLength(record.program.len()));
        }
        let mut program = Vec::with_capacity(record.program.len());
        for r in &record.program {
            let op = OpCode::from_name(&r.op).ok_or_else(|| GenomeParseError::UnknownOp(r.op.clone()))?;
            let tag = Tag::from_hex(&r.tag).ok_or_else(|| GenomeParseError::BadTag(r.tag.clone()))?;
            program.push(Instruction::new(op, tag, r.args));
        }
        let mut event_tags = [Tag(0); NUM_EVENT_TAGS];
        for (slot, hex) in event_tags.iter_mut().zip(&record.event_tags) {
            *slot = Tag::from_hex(hex).ok_or_else(|| GenomeParseError::BadTag(hex.clone()))?;
        }
        Ok(Genome {
            program,
            event_tags,
            root_id: record.root_id,
            stint_root_id: record.stint_root_id,
            generation_counters: record.generation_counters,
            mutation_counts: record.mutation_counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_size_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(Genome::generate_random(128, &mut rng).program.len(), 128);
        let tiny = Genome::generate_random(1, &mut rng);
        assert_eq!(tiny.program.len(), 1);
        assert!(Genome::deserialize(&tiny.serialize()).is_ok());
    }

    #[test]
    fn op_frequencies_follow_prevalence() {
        // multinomial oracle: GlobalAnchor should appear with frequency
        // 15 / 186 within 3 sigma over 1e5 draws
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut anchors = 0usize;
        for _ in 0..n {
            if random_instruction(&mut rng).op == OpCode::GlobalAnchor {
                anchors += 1;
            }
        }
        let p = 15.0 / OpCode::total_prevalence() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (anchors as f64 - mean).abs() < 3.0 * sigma,
            "anchors={anchors} mean={mean} sigma={sigma}"
        );
    }

    #[test]
    fn null_mutation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Genome::generate_random(64, &mut rng);
        let cfg = MutationConfig {
            mutation_apply_rate_kin: 1.0,
            mutation_apply_rate_nonkin: 1.0,
            point_rate_per_bit: 0.0,
            sequence_defect_rate_per_site: 0.0,
            minor_indel_bound: 8,
            severe_rate: 0.0,
        };
        let child = g.mutate_unconditionally(&cfg, &mut rng);
        assert_eq!(child.program, g.program);
        assert_eq!(child.event_tags, g.event_tags);
    }

    #[test]
    fn point_mutation_rate_matches_binomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Genome::generate_random(1000, &mut rng);
        let cfg = MutationConfig {
            sequence_defect_rate_per_site: 0.0,
            ..MutationConfig::default()
        };
        let trials = 10_000u64;
        let mut flipped = 0u64;
        for _ in 0..trials {
            let child = g.mutate_unconditionally(&cfg, &mut rng);
            flipped += child.mutation_counts.point_mutations - g.mutation_counts.point_mutations;
        }
        let n = trials as f64 * g.bit_len() as f64;
        let p = cfg.point_rate_per_bit;
        let mean = n * p;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!(
            (flipped as f64 - mean).abs() < 3.0 * sigma,
            "flipped={flipped} mean={mean} sigma={sigma}"
        );
    }

    #[test]
    fn mutation_gate_rate_under_full_commonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Genome::generate_random(32, &mut rng);
        let cfg = MutationConfig::default();
        let trials = 10_000;
        let mut fired = 0u64;
        for _ in 0..trials {
            let child = g.reproduce(NUM_KIN_LEVELS, &cfg, &mut rng);
            fired += child.mutation_counts.events - g.mutation_counts.events;
        }
        let mean = trials as f64 * cfg.mutation_apply_rate_kin;
        let sigma = (trials as f64 * 0.1 * 0.9).sqrt();
        assert!(
            (fired as f64 - mean).abs() < 3.0 * sigma,
            "fired={fired} mean={mean}"
        );
        // no commonality: the gate always fires
        let child = g.reproduce(0, &cfg, &mut rng);
        assert_eq!(child.mutation_counts.events, g.mutation_counts.events + 1);
    }

    #[test]
    fn mutation_respects_program_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = MutationConfig {
            sequence_defect_rate_per_site: 0.25,
            severe_rate: 0.2,
            ..MutationConfig::default()
        };
        let mut g = Genome::generate_random(4, &mut rng);
        for _ in 0..2000 {
            g = g.mutate_unconditionally(&cfg, &mut rng);
            assert!((1..=PROGRAM_MAX_SIZE).contains(&g.program.len()));
        }
    }

    #[test]
    fn nopout_substitutes_touch_matched_nop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Genome::generate_random(16, &mut rng);
        g.program[3] = Instruction::new(OpCode::RandomFill, Tag(77), [1, 2, 3]);
        g.program[4] = Instruction::new(OpCode::Add, Tag(88), [4, 5, 6]);

        let (g1, changed) = g.nopout_site(3);
        assert!(changed);
        assert_eq!(g1.program[3].op, OpCode::Nop1);
        assert_eq!(g1.program[3].tag, Tag(77));
        assert_eq!(g1.program[3].args, [1, 2, 3]);

        let (g2, changed) = g.nopout_site(4);
        assert!(changed);
        assert_eq!(g2.program[4].op, OpCode::Nop0);

        // idempotence
        let (g3, changed) = g1.nopout_site(3);
        assert!(!changed);
        assert_eq!(g3, g1);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let size = rng.gen_range(1..200);
            let mut g = Genome::generate_random(size, &mut rng);
            g.root_id = rng.gen();
            g.stint_root_id = rng.gen();
            let text = g.serialize();
            let back = Genome::deserialize(&text).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn corrupting_one_tag_hex_digit_changes_exactly_that_tag() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Genome::generate_random(8, &mut rng);
        let text = g.serialize();
        // locate the first event tag's hex and flip one digit
        let original_hex = g.event_tags[0].to_hex();
        let mut corrupted_hex = original_hex.clone();
        let first = corrupted_hex.remove(0);
        let replacement = if first == '0' { '1' } else { '0' };
        corrupted_hex.insert(0, replacement);
        let corrupted_text = text.replacen(&original_hex, &corrupted_hex, 1);
        assert_ne!(corrupted_text, text);

        let back = Genome::deserialize(&corrupted_text).unwrap();
        // bit-level diff oracle: exactly one tag differs, program intact
        assert_eq!(back.program, g.program);
        let diffs: Vec<usize> = (0..NUM_EVENT_TAGS)
            .filter(|&i| back.event_tags[i] != g.event_tags[i])
            .collect();
        assert_eq!(diffs, vec![0]);
    }

    #[test]
    fn malformed_input_reports_an_error() {
        assert!(Genome::deserialize("{ not json").is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = Genome::generate_random(4, &mut rng);
        let bad = g.serialize().replace("add", "frobnicate_xyz");
        // only fails when that op actually appeared
        if g.program.iter().any(|i| i.op == OpCode::Add) {
            assert!(Genome::deserialize(&bad).is_err());
        }
    }

    #[test]
    fn duplication_inserts_verbatim_preceding_segment() {
        // deterministically drive sequence_mutate by trying seeds until a
        // duplication occurs, then check the copied span matches
        let mut rng0 = ChaCha8Rng::seed_from_u64(11);
        let base = Genome::generate_random(64, &mut rng0);
        let cfg = MutationConfig {
            point_rate_per_bit: 0.0,
            sequence_defect_rate_per_site: 0.2,
            ..MutationConfig::default()
        };
        let mut found_duplication = false;
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let child = base.mutate_unconditionally(&cfg, &mut rng);
            if child.program.len() <= base.program.len() {
                continue;
            }
            let grew = child.program.len() - base.program.len();
            // find insertion point: longest common prefix/suffix
            let mut prefix = 0;
            while prefix < base.program.len()
                && base.program[prefix] == child.program[prefix]
            {
                prefix += 1;
            }
            let inserted = &child.program[prefix..prefix + grew];
            if prefix >= grew && inserted == &base.program[prefix - grew..prefix] {
                found_duplication = true;
                break;
            }
        }
        assert!(found_duplication, "no duplication observed in 500 seeds");
    }
}
