//! The instruction set of the virtual CPU.
//!
//! Every operation carries static metadata: a prevalence weight (its
//! relative frequency under random generation and insertion mutations),
//! the number of register arguments it reads, and the number of RNG
//! draws it consumes. RNG touch counts matter because nopout editing
//! must substitute a Nop variant that advances the generator identically.

use serde::{Deserialize, Serialize};

use crate::tag::Tag;

macro_rules! op_catalog {
    ($( $variant:ident => ($name:literal, $prevalence:literal, $args:literal, $touches:literal) ),+ $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum OpCode {
            $( $variant, )+
        }

        impl OpCode {
            pub const ALL: &'static [OpCode] = &[ $( OpCode::$variant, )+ ];

            pub fn name(self) -> &'static str {
                match self {
                    $( OpCode::$variant => $name, )+
                }
            }

            pub fn from_name(name: &str) -> Option<OpCode> {
                match name {
                    $( $name => Some(OpCode::$variant), )+
                    _ => None,
                }
            }

            /// Relative weight under random generation.
            pub fn prevalence(self) -> u32 {
                match self {
                    $( OpCode::$variant => $prevalence, )+
                }
            }

            /// Register arguments consulted (out of the 3 stored).
            pub fn num_args(self) -> u8 {
                match self {
                    $( OpCode::$variant => $args, )+
                }
            }

            /// RNG draws consumed per execution.
            pub fn rng_touches(self) -> u8 {
                match self {
                    $( OpCode::$variant => $touches, )+
                }
            }
        }
    };
}

op_catalog! {
    ForkIf => ("fork_if", 1, 1, 0),
    Nop0 => ("nop_0", 1, 0, 0),
    Nop1 => ("nop_1", 1, 0, 1),
    Nop2 => ("nop_2", 1, 1, 2),
    TerminateIf => ("terminate_if", 1, 1, 0),
    Add => ("add", 1, 3, 0),
    Divide => ("divide", 1, 3, 0),
    Modulo => ("modulo", 1, 3, 0),
    Multiply => ("multiply", 1, 3, 0),
    Subtract => ("subtract", 1, 3, 0),
    BitwiseAnd => ("bitwise_and", 1, 3, 0),
    BitwiseNot => ("bitwise_not", 1, 2, 0),
    BitwiseOr => ("bitwise_or", 1, 3, 0),
    BitwiseShift => ("bitwise_shift", 1, 3, 0),
    BitwiseXor => ("bitwise_xor", 1, 3, 0),
    CountOnes => ("count_ones", 1, 2, 0),
    RandomFill => ("random_fill", 1, 1, 1),
    Equal => ("equal", 1, 3, 0),
    GreaterThan => ("greater_than", 1, 3, 0),
    LessThan => ("less_than", 1, 3, 0),
    LogicalAnd => ("logical_and", 1, 3, 0),
    LogicalOr => ("logical_or", 1, 3, 0),
    NotEqual => ("not_equal", 1, 3, 0),
    GlobalAnchor => ("global_anchor", 15, 0, 0),
    GlobalJumpIf => ("global_jump_if", 1, 2, 0),
    GlobalJumpIfNot => ("global_jump_if_not", 1, 2, 0),
    ProtectedRegulatorAdjust => ("protected_regulator_adjust", 1, 1, 0),
    ProtectedRegulatorDecay => ("protected_regulator_decay", 1, 1, 0),
    ProtectedRegulatorGet => ("protected_regulator_get", 1, 1, 0),
    ProtectedRegulatorSet => ("protected_regulator_set", 1, 1, 0),
    LocalAnchor => ("local_anchor", 20, 0, 0),
    LocalJumpIf => ("local_jump_if", 1, 1, 0),
    LocalJumpIfNot => ("local_jump_if_not", 1, 1, 0),
    LocalRegulatorAdjust => ("local_regulator_adjust", 1, 1, 0),
    LocalRegulatorDecay => ("local_regulator_decay", 1, 1, 0),
    LocalRegulatorGet => ("local_regulator_get", 1, 1, 0),
    LocalRegulatorSet => ("local_regulator_set", 1, 1, 0),
    Decrement => ("decrement", 1, 1, 0),
    Increment => ("increment", 1, 1, 0),
    Negate => ("negate", 1, 1, 0),
    Not => ("not", 1, 1, 0),
    RandomBool => ("random_bool", 1, 1, 1),
    RandomDraw => ("random_draw", 1, 1, 1),
    Terminal => ("terminal", 50, 1, 0),
    ExposedRegulatorAdjust => ("exposed_regulator_adjust", 1, 1, 0),
    ExposedRegulatorDecay => ("exposed_regulator_decay", 1, 1, 0),
    ExposedRegulatorGet => ("exposed_regulator_get", 1, 1, 0),
    ExposedRegulatorSet => ("exposed_regulator_set", 1, 1, 0),
    AddToOwnState => ("add_to_own_state", 5, 1, 0),
    BroadcastIntraMessageIf => ("broadcast_intra_message_if", 1, 1, 0),
    MultiplyOwnState => ("multiply_own_state", 5, 1, 0),
    ReadNeighborState => ("read_neighbor_state", 10, 1, 0),
    ReadOwnState => ("read_own_state", 20, 1, 0),
    SendInterMessageIf => ("send_inter_message_if", 5, 1, 0),
    SendIntraMessageIf => ("send_intra_message_if", 5, 1, 0),
    WriteOwnStateIf => ("write_own_state_if", 5, 2, 0),
}

impl OpCode {
    pub fn is_nop(self) -> bool {
        matches!(self, OpCode::Nop0 | OpCode::Nop1 | OpCode::Nop2)
    }

    /// The Nop variant consuming the same number of RNG draws.
    pub fn matching_nop(self) -> OpCode {
        match self.rng_touches() {
            0 => OpCode::Nop0,
            1 => OpCode::Nop1,
            _ => OpCode::Nop2,
        }
    }

    /// Decode an arbitrary byte, wrapping out-of-range values into the
    /// library. Used when bit-level mutation scrambles an op code.
    pub fn from_u8_wrapping(byte: u8) -> OpCode {
        Self::ALL[byte as usize % Self::ALL.len()]
    }

    pub fn to_u8(self) -> u8 {
        Self::ALL.iter().position(|&o| o == self).unwrap() as u8
    }

    pub fn total_prevalence() -> u32 {
        Self::ALL.iter().map(|o| o.prevalence()).sum()
    }
}

/// One program instruction: an op code, a 64-bit tag, and three small
/// register arguments (reduced modulo the register count at use).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub op: OpCode,
    pub tag: Tag,
    pub args: [u8; 3],
}

impl Instruction {
    pub fn new(op: OpCode, tag: Tag, args: [u8; 3]) -> Instruction {
        Instruction { op, tag, args }
    }

    pub fn nop() -> Instruction {
        Instruction::new(OpCode::Nop0, Tag(0), [0; 3])
    }

    /// Byte image used for bit-level point mutation: op byte, tag
    /// little-endian, then the three args.
    pub fn to_bytes(self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[0] = self.op.to_u8();
        out[1..9].copy_from_slice(&self.tag.0.to_le_bytes());
        out[9..12].copy_from_slice(&self.args);
        out
    }

    pub fn from_bytes(bytes: [u8; 12]) -> Instruction {
        Instruction {
            op: OpCode::from_u8_wrapping(bytes[0]),
            tag: Tag(u64::from_le_bytes(bytes[1..9].try_into().unwrap())),
            args: [bytes[9], bytes[10], bytes[11]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_size_and_weights() {
        assert_eq!(OpCode::ALL.len(), 56);
        assert_eq!(OpCode::total_prevalence(), 186);
        assert_eq!(OpCode::GlobalAnchor.prevalence(), 15);
        assert_eq!(OpCode::LocalAnchor.prevalence(), 20);
        assert_eq!(OpCode::Terminal.prevalence(), 50);
    }

    #[test]
    fn nop_substitution_matches_rng_touches() {
        for &op in OpCode::ALL {
            let nop = op.matching_nop();
            assert!(nop.is_nop());
            assert_eq!(nop.rng_touches(), op.rng_touches(), "{}", op.name());
        }
        assert_eq!(OpCode::RandomFill.matching_nop(), OpCode::Nop1);
        assert_eq!(OpCode::Add.matching_nop(), OpCode::Nop0);
    }

    #[test]
    fn name_round_trip() {
        for &op in OpCode::ALL {
            assert_eq!(OpCode::from_name(op.name()), Some(op));
        }
        assert_eq!(OpCode::from_name("no_such_op"), None);
    }

    #[test]
    fn byte_image_round_trip() {
        let inst = Instruction::new(OpCode::Terminal, Tag(0x0123_4567_89ab_cdef), [3, 7, 250]);
        assert_eq!(Instruction::from_bytes(inst.to_bytes()), inst);
        // invalid op bytes decode to a valid op by wrapping
        let mut bytes = inst.to_bytes();
        bytes[0] = 200;
        let decoded = Instruction::from_bytes(bytes);
        assert_eq!(decoded.op, OpCode::ALL[200 % OpCode::ALL.len()]);
    }
}
