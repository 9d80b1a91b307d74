//! Classical-plane packet formats and their bit-exact encodings.
//!
//! Every packet starts with a 3-bit type tag:
//!
//! | kind  | tag | payload                                   |
//! |-------|-----|-------------------------------------------|
//! | LIP   | 000 | qc, opcode, slot, slot                    |
//! | TPSIP | 001 | src qc, src slot, dst qc, dst slot, to    |
//! | TPDIP | 010 | dst qc, dst slot                          |
//! | CBP   | 011 | cb (2 bits), dst qc, dst slot             |
//! | TP    | 100 | to                                        |
//! | EOC   | 101 | qc                                        |
//!
//! Fields are written MSB first in the order listed. Address widths follow
//! the system size: `ceil(log2(max(n, 2)))` bits for `n` cores or slots.
//! Single-qubit LIPs zero-fill the second slot so every LIP has the same size.

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::Opcode;
use crate::compiler::Instruction;

pub type Bits = BitVec<u8, Msb0>;

pub const TYPE_BITS: u32 = 3;
pub const OPCODE_BITS: u32 = 4;
pub const CB_BITS: u32 = 2;
pub const DEFAULT_TO_BITS: u32 = 8;
/// Width of the instruction-count field that heads a bundle in memory.
pub const BUNDLE_HEADER_BITS: u32 = 16;

/// Bits needed to address `n` distinct values, never less than one.
pub fn addr_bits(n: usize) -> u32 {
    let n = n.max(2);
    usize::BITS - (n - 1).leading_zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidths {
    pub type_bits: u32,
    pub opcode_bits: u32,
    pub qc_addr_bits: u32,
    pub slot_addr_bits: u32,
    pub to_bits: u32,
    pub cb_bits: u32,
}

impl BitWidths {
    pub fn new(n_qc: usize, slots_per_qc: usize, to_bits: u32) -> Self {
        BitWidths {
            type_bits: TYPE_BITS,
            opcode_bits: OPCODE_BITS,
            qc_addr_bits: addr_bits(n_qc),
            slot_addr_bits: addr_bits(slots_per_qc),
            to_bits,
            cb_bits: CB_BITS,
        }
    }

    /// Largest token-order value representable.
    pub fn max_token_order(&self) -> u64 {
        (1u64 << self.to_bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PacketKind {
    Lip,
    Tpsip,
    Tpdip,
    Cbp,
    Tp,
    Eoc,
}

impl PacketKind {
    pub const ALL: [PacketKind; 6] = [
        PacketKind::Lip,
        PacketKind::Tpsip,
        PacketKind::Tpdip,
        PacketKind::Cbp,
        PacketKind::Tp,
        PacketKind::Eoc,
    ];

    pub fn tag(self) -> u8 {
        match self {
            PacketKind::Lip => 0b000,
            PacketKind::Tpsip => 0b001,
            PacketKind::Tpdip => 0b010,
            PacketKind::Cbp => 0b011,
            PacketKind::Tp => 0b100,
            PacketKind::Eoc => 0b101,
        }
    }

    pub fn from_tag(tag: u8) -> Option<PacketKind> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketKind::Lip => "LIP",
            PacketKind::Tpsip => "TPSIP",
            PacketKind::Tpdip => "TPDIP",
            PacketKind::Cbp => "CBP",
            PacketKind::Tp => "TP",
            PacketKind::Eoc => "EOC",
        }
    }

    /// Encoded size; depends only on the kind and the widths.
    pub fn size_bits(self, w: &BitWidths) -> u32 {
        let body = match self {
            PacketKind::Lip => w.qc_addr_bits + w.opcode_bits + 2 * w.slot_addr_bits,
            PacketKind::Tpsip => 2 * (w.qc_addr_bits + w.slot_addr_bits) + w.to_bits,
            PacketKind::Tpdip => w.qc_addr_bits + w.slot_addr_bits,
            PacketKind::Cbp => w.cb_bits + w.qc_addr_bits + w.slot_addr_bits,
            PacketKind::Tp => w.to_bits,
            PacketKind::Eoc => w.qc_addr_bits,
        };
        w.type_bits + body
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Packet {
    Lip {
        qc: u32,
        opcode: Opcode,
        slots: (u32, Option<u32>),
    },
    Tpsip {
        src_qc: u32,
        src_slot: u32,
        dst_qc: u32,
        dst_slot: u32,
        to: u32,
    },
    Tpdip {
        dst_qc: u32,
        dst_slot: u32,
    },
    Cbp {
        cb: u8,
        dst_qc: u32,
        dst_slot: u32,
    },
    Tp {
        to: u32,
    },
    Eoc {
        qc: u32,
    },
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        match self {
            Packet::Lip { .. } => PacketKind::Lip,
            Packet::Tpsip { .. } => PacketKind::Tpsip,
            Packet::Tpdip { .. } => PacketKind::Tpdip,
            Packet::Cbp { .. } => PacketKind::Cbp,
            Packet::Tp { .. } => PacketKind::Tp,
            Packet::Eoc { .. } => PacketKind::Eoc,
        }
    }

    /// Instruction packet the dispatcher sends for `instr`. A TPS without an
    /// assigned token order is sent with order zero.
    pub fn for_instruction(instr: &Instruction) -> Packet {
        match *instr {
            Instruction::Local { opcode, qc, ref slots } => Packet::Lip {
                qc: qc as u32,
                opcode,
                slots: (slots[0] as u32, slots.get(1).map(|&s| s as u32)),
            },
            Instruction::Tps {
                src_qc,
                src_slot,
                dst_qc,
                dst_slot,
                token_order,
            } => Packet::Tpsip {
                src_qc: src_qc as u32,
                src_slot: src_slot as u32,
                dst_qc: dst_qc as u32,
                dst_slot: dst_slot as u32,
                to: token_order.unwrap_or(0),
            },
            Instruction::Tpd { dst_qc, dst_slot } => Packet::Tpdip {
                dst_qc: dst_qc as u32,
                dst_slot: dst_slot as u32,
            },
        }
    }
}

pub fn size_bits(pkt: &Packet, w: &BitWidths) -> u32 {
    pkt.kind().size_bits(w)
}

/// Size of an instruction as stored in program memory: the packet body
/// without its tag, with an opcode field added for TPS/TPD (LIP bodies
/// already carry one).
pub fn instruction_bits(instr: &Instruction, w: &BitWidths) -> u32 {
    let body = size_bits(&Packet::for_instruction(instr), w) - w.type_bits;
    match instr {
        Instruction::Local { .. } => body,
        Instruction::Tps { .. } | Instruction::Tpd { .. } => body + w.opcode_bits,
    }
}

/// Memory footprint of a bundle: count header plus every instruction.
pub fn bundle_bits<'a, I>(instrs: I, w: &BitWidths) -> u32
where
    I: IntoIterator<Item = &'a Instruction>,
{
    BUNDLE_HEADER_BITS + instrs.into_iter().map(|i| instruction_bits(i, w)).sum::<u32>()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unknown packet tag {0:#05b}")]
    UnknownTag(u8),
    #[error("{kind:?} packet needs {expected} bits, got {got}")]
    Truncated {
        kind: Option<PacketKind>,
        expected: usize,
        got: usize,
    },
    #[error("{kind:?} packet needs exactly {expected} bits, got {got}")]
    TrailingBits {
        kind: PacketKind,
        expected: usize,
        got: usize,
    },
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("LIP carries {opcode} which has no operand layout")]
    BadLipOpcode { opcode: Opcode },
    #[error("padding slot field of a single-qubit LIP is {0}, expected zero")]
    NonZeroPadding(u32),
    #[error("field {field} = {value} does not fit in {bits} bits")]
    FieldOverflow {
        field: &'static str,
        value: u64,
        bits: u32,
    },
}

fn push_field(out: &mut Bits, field: &'static str, value: u64, bits: u32) -> Result<(), CodecError> {
    if bits < 64 && value >> bits != 0 {
        return Err(CodecError::FieldOverflow { field, value, bits });
    }
    for i in (0..bits).rev() {
        out.push((value >> i) & 1 == 1);
    }
    Ok(())
}

struct Reader<'a> {
    bits: &'a BitSlice<u8, Msb0>,
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: u32) -> u64 {
        let v = self.bits[self.pos..self.pos + n as usize]
            .iter()
            .fold(0u64, |acc, b| (acc << 1) | (*b as u64));
        self.pos += n as usize;
        v
    }
}

pub fn encode(pkt: &Packet, w: &BitWidths) -> Result<Bits, CodecError> {
    let mut out = Bits::with_capacity(size_bits(pkt, w) as usize);
    push_field(&mut out, "type", pkt.kind().tag() as u64, w.type_bits)?;
    let (qb, sb) = (w.qc_addr_bits, w.slot_addr_bits);
    match *pkt {
        Packet::Lip { qc, opcode, slots } => {
            if !opcode.is_gate() {
                return Err(CodecError::BadLipOpcode { opcode });
            }
            push_field(&mut out, "qc", qc as u64, qb)?;
            push_field(&mut out, "opcode", opcode.code() as u64, w.opcode_bits)?;
            push_field(&mut out, "slot0", slots.0 as u64, sb)?;
            push_field(&mut out, "slot1", slots.1.unwrap_or(0) as u64, sb)?;
        }
        Packet::Tpsip {
            src_qc,
            src_slot,
            dst_qc,
            dst_slot,
            to,
        } => {
            push_field(&mut out, "src_qc", src_qc as u64, qb)?;
            push_field(&mut out, "src_slot", src_slot as u64, sb)?;
            push_field(&mut out, "dst_qc", dst_qc as u64, qb)?;
            push_field(&mut out, "dst_slot", dst_slot as u64, sb)?;
            push_field(&mut out, "to", to as u64, w.to_bits)?;
        }
        Packet::Tpdip { dst_qc, dst_slot } => {
            push_field(&mut out, "dst_qc", dst_qc as u64, qb)?;
            push_field(&mut out, "dst_slot", dst_slot as u64, sb)?;
        }
        Packet::Cbp { cb, dst_qc, dst_slot } => {
            push_field(&mut out, "cb", cb as u64, w.cb_bits)?;
            push_field(&mut out, "dst_qc", dst_qc as u64, qb)?;
            push_field(&mut out, "dst_slot", dst_slot as u64, sb)?;
        }
        Packet::Tp { to } => push_field(&mut out, "to", to as u64, w.to_bits)?,
        Packet::Eoc { qc } => push_field(&mut out, "qc", qc as u64, qb)?,
    }
    debug_assert_eq!(out.len(), size_bits(pkt, w) as usize);
    Ok(out)
}

pub fn decode(bits: &BitSlice<u8, Msb0>, w: &BitWidths) -> Result<Packet, CodecError> {
    if bits.len() < w.type_bits as usize {
        return Err(CodecError::Truncated {
            kind: None,
            expected: w.type_bits as usize,
            got: bits.len(),
        });
    }
    let mut r = Reader { bits, pos: 0 };
    let tag = r.take(w.type_bits) as u8;
    let kind = PacketKind::from_tag(tag).ok_or(CodecError::UnknownTag(tag))?;
    let expected = kind.size_bits(w) as usize;
    if bits.len() < expected {
        return Err(CodecError::Truncated {
            kind: Some(kind),
            expected,
            got: bits.len(),
        });
    }
    if bits.len() > expected {
        return Err(CodecError::TrailingBits {
            kind,
            expected,
            got: bits.len(),
        });
    }
    let (qb, sb) = (w.qc_addr_bits, w.slot_addr_bits);
    let pkt = match kind {
        PacketKind::Lip => {
            let qc = r.take(qb) as u32;
            let code = r.take(w.opcode_bits) as u8;
            let opcode = Opcode::from_code(code).ok_or(CodecError::UnknownOpcode(code))?;
            if !opcode.is_gate() {
                return Err(CodecError::BadLipOpcode { opcode });
            }
            let s0 = r.take(sb) as u32;
            let s1 = r.take(sb) as u32;
            let slots = if opcode.arity() == 2 {
                (s0, Some(s1))
            } else if s1 != 0 {
                return Err(CodecError::NonZeroPadding(s1));
            } else {
                (s0, None)
            };
            Packet::Lip { qc, opcode, slots }
        }
        PacketKind::Tpsip => Packet::Tpsip {
            src_qc: r.take(qb) as u32,
            src_slot: r.take(sb) as u32,
            dst_qc: r.take(qb) as u32,
            dst_slot: r.take(sb) as u32,
            to: r.take(w.to_bits) as u32,
        },
        PacketKind::Tpdip => Packet::Tpdip {
            dst_qc: r.take(qb) as u32,
            dst_slot: r.take(sb) as u32,
        },
        PacketKind::Cbp => Packet::Cbp {
            cb: r.take(w.cb_bits) as u8,
            dst_qc: r.take(qb) as u32,
            dst_slot: r.take(sb) as u32,
        },
        PacketKind::Tp => Packet::Tp {
            to: r.take(w.to_bits) as u32,
        },
        PacketKind::Eoc => Packet::Eoc { qc: r.take(qb) as u32 },
    };
    Ok(pkt)
}

/// Renders a bit string as `0`/`1` characters.
pub fn bits_to_string(bits: &BitSlice<u8, Msb0>) -> String {
    bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addr_bits_values() {
        assert_eq!(addr_bits(0), 1);
        assert_eq!(addr_bits(1), 1);
        assert_eq!(addr_bits(2), 1);
        assert_eq!(addr_bits(3), 2);
        assert_eq!(addr_bits(4), 2);
        assert_eq!(addr_bits(9), 4);
        assert_eq!(addr_bits(16), 4);
        assert_eq!(addr_bits(17), 5);
        assert_eq!(addr_bits(100), 7);
        assert_eq!(addr_bits(1024), 10);
    }

    #[test]
    fn size_formulas() {
        let w = BitWidths::new(4, 9, 8);
        assert_eq!(w.qc_addr_bits, 2);
        assert_eq!(w.slot_addr_bits, 4);
        assert_eq!(PacketKind::Tp.size_bits(&w), 11);
        assert_eq!(PacketKind::Cbp.size_bits(&w), 11);
        assert_eq!(PacketKind::Lip.size_bits(&w), 3 + 2 + 4 + 8);
        assert_eq!(PacketKind::Tpsip.size_bits(&w), 3 + 2 * 6 + 8);
        assert_eq!(PacketKind::Tpdip.size_bits(&w), 3 + 6);
        assert_eq!(PacketKind::Eoc.size_bits(&w), 3 + 2);
    }

    #[test]
    fn single_qubit_lip_is_fixed_width_and_zero_filled() {
        let w = BitWidths::new(2, 16, 8);
        let one = Packet::Lip { qc: 1, opcode: Opcode::H, slots: (3, None) };
        let two = Packet::Lip { qc: 1, opcode: Opcode::Cx, slots: (3, Some(5)) };
        assert_eq!(size_bits(&one, &w), size_bits(&two, &w));
        let bits = encode(&one, &w).unwrap();
        assert_eq!(bits_to_string(&bits), "000" .to_owned() + "1" + "0000" + "0011" + "0000");
    }

    #[test]
    fn tp_golden_encoding() {
        let w = BitWidths::new(2, 16, 8);
        let bits = encode(&Packet::Tp { to: 0 }, &w).unwrap();
        assert_eq!(bits_to_string(&bits), "10000000000");
        let bits = encode(&Packet::Tp { to: 5 }, &w).unwrap();
        assert_eq!(bits_to_string(&bits), "10000000101");
    }

    #[test]
    fn golden_encodings_for_every_kind() {
        let w = BitWidths::new(4, 9, 8);
        let cases = [
            (
                Packet::Tpsip { src_qc: 1, src_slot: 2, dst_qc: 3, dst_slot: 9, to: 1 },
                "001" .to_owned() + "01" + "0010" + "11" + "1001" + "00000001",
            ),
            (Packet::Tpdip { dst_qc: 3, dst_slot: 9 }, "010".to_owned() + "11" + "1001"),
            (Packet::Cbp { cb: 2, dst_qc: 0, dst_slot: 1 }, "011".to_owned() + "10" + "00" + "0001"),
            (Packet::Eoc { qc: 2 }, "101".to_owned() + "10"),
        ];
        for (pkt, expected) in cases {
            assert_eq!(bits_to_string(&encode(&pkt, &w).unwrap()), expected, "{pkt:?}");
        }
    }

    #[test]
    fn decode_rejects_short_and_unknown() {
        let w = BitWidths::new(2, 16, 8);
        let two = bitvec![u8, Msb0; 1, 0];
        assert!(matches!(decode(&two, &w), Err(CodecError::Truncated { kind: None, .. })));
        let unknown = bitvec![u8, Msb0; 1, 1, 1, 0, 0];
        assert_eq!(decode(&unknown, &w), Err(CodecError::UnknownTag(0b111)));
        let short_tp = bitvec![u8, Msb0; 1, 0, 0, 0, 0];
        assert!(matches!(
            decode(&short_tp, &w),
            Err(CodecError::Truncated { kind: Some(PacketKind::Tp), expected: 11, got: 5 })
        ));
        let mut long_tp = encode(&Packet::Tp { to: 3 }, &w).unwrap();
        long_tp.push(false);
        assert!(matches!(decode(&long_tp, &w), Err(CodecError::TrailingBits { .. })));
    }

    #[test]
    fn encode_rejects_overflowing_fields() {
        let w = BitWidths::new(2, 16, 8);
        assert!(matches!(
            encode(&Packet::Tp { to: 256 }, &w),
            Err(CodecError::FieldOverflow { field: "to", .. })
        ));
        assert!(matches!(
            encode(&Packet::Eoc { qc: 2 }, &w),
            Err(CodecError::FieldOverflow { field: "qc", .. })
        ));
    }

    #[test]
    fn tags_are_distinct_and_fit() {
        let mut tags: Vec<u8> = PacketKind::ALL.iter().map(|k| k.tag()).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 6);
        assert!(tags.iter().all(|&t| t < 8));
    }
}
