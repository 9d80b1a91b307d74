//! Compilation from logical circuits to instruction bundles.
//!
//! Placement is modulo (qubit `i` lives on core `i mod n`). Bundles are built
//! ASAP: each round emits every gate whose predecessors on all its operands
//! are already emitted. A two-qubit gate whose operands sit on different cores
//! first spends a round as a TPS/TPD pair that teleports the first operand
//! into a free slot on the second operand's core; the gate itself is emitted
//! locally in a later round. Each core has one LTM port, so a bundle holds at
//! most one TPS per source core and one TPD per destination core; teleports
//! that would break this spill into the next round.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{CircuitError, LogicalCircuit, Opcode};
use crate::isa::{addr_bits, BitWidths, DEFAULT_TO_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub qc: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub n_qc: usize,
    pub slots_per_qc: usize,
    /// Indexed by logical qubit.
    pub locations: Vec<Location>,
}

impl Placement {
    pub fn location(&self, qubit: usize) -> Location {
        self.locations[qubit]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Instruction {
    Local {
        opcode: Opcode,
        qc: usize,
        slots: Vec<usize>,
    },
    /// Teleport source. Carries the destination's global address.
    Tps {
        src_qc: usize,
        src_slot: usize,
        dst_qc: usize,
        dst_slot: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token_order: Option<u32>,
    },
    Tpd {
        dst_qc: usize,
        dst_slot: usize,
    },
}

impl Instruction {
    /// Core that receives and executes the instruction.
    pub fn core(&self) -> usize {
        match *self {
            Instruction::Local { qc, .. } => qc,
            Instruction::Tps { src_qc, .. } => src_qc,
            Instruction::Tpd { dst_qc, .. } => dst_qc,
        }
    }

    /// Qubit slots on the executing core that the instruction occupies.
    pub fn local_slots(&self) -> Vec<usize> {
        match self {
            Instruction::Local { slots, .. } => slots.clone(),
            Instruction::Tps { src_slot, .. } => vec![*src_slot],
            Instruction::Tpd { dst_slot, .. } => vec![*dst_slot],
        }
    }

    /// Dispatcher emission key: core id, then lowest slot.
    pub fn emission_key(&self) -> (usize, usize) {
        (self.core(), self.local_slots().into_iter().min().unwrap_or(0))
    }

    pub fn is_tps(&self) -> bool {
        matches!(self, Instruction::Tps { .. })
    }

    pub fn is_tpd(&self) -> bool {
        matches!(self, Instruction::Tpd { .. })
    }

    pub fn token_order(&self) -> Option<u32> {
        match self {
            Instruction::Tps { token_order, .. } => *token_order,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub instructions: Vec<Instruction>,
}

impl Bundle {
    pub fn tps_count(&self) -> usize {
        self.instructions.iter().filter(|i| i.is_tps()).count()
    }

    /// Cores that receive at least one instruction, ascending.
    pub fn participating_cores(&self) -> Vec<usize> {
        let mut cores: Vec<usize> = self.instructions.iter().map(Instruction::core).collect();
        cores.sort_unstable();
        cores.dedup();
        cores
    }

    /// Length of the ID-MAC token chain: every TPS, then one EOC slot per
    /// participating core.
    pub fn chain_len(&self) -> usize {
        self.tps_count() + self.participating_cores().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub bundles: Vec<Bundle>,
    pub initial_placement: Placement,
    pub widths: BitWidths,
}

impl Program {
    pub fn n_qc(&self) -> usize {
        self.initial_placement.n_qc
    }

    pub fn instruction_count(&self) -> usize {
        self.bundles.iter().map(|b| b.instructions.len()).sum()
    }

    pub fn teleport_count(&self) -> usize {
        self.bundles.iter().map(Bundle::tps_count).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(text: &str) -> Result<Program, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Checks the structural bundle invariants.
    pub fn validate(&self) -> Result<(), CompileError> {
        let n_qc = self.n_qc();
        for (b, bundle) in self.bundles.iter().enumerate() {
            let bad = |reason: String| CompileError::MalformedBundle { bundle: b, reason };
            let mut touched = HashSet::new();
            let mut src_cores = HashSet::new();
            let mut dst_cores = HashSet::new();
            let mut tps_targets = Vec::new();
            let mut tpd_targets = Vec::new();
            let mut orders = Vec::new();
            for instr in &bundle.instructions {
                if instr.core() >= n_qc {
                    return Err(bad(format!("core {} out of range", instr.core())));
                }
                for slot in instr.local_slots() {
                    if !touched.insert((instr.core(), slot)) {
                        return Err(bad(format!("slot ({}, {slot}) touched twice", instr.core())));
                    }
                }
                match *instr {
                    Instruction::Tps {
                        src_qc,
                        dst_qc,
                        dst_slot,
                        token_order,
                        ..
                    } => {
                        if dst_qc >= n_qc {
                            return Err(bad(format!("TPS destination core {dst_qc} out of range")));
                        }
                        if !src_cores.insert(src_qc) {
                            return Err(bad(format!("core {src_qc} sources two teleports")));
                        }
                        tps_targets.push((dst_qc, dst_slot));
                        if let Some(to) = token_order {
                            orders.push(to);
                        }
                    }
                    Instruction::Tpd { dst_qc, dst_slot } => {
                        if !dst_cores.insert(dst_qc) {
                            return Err(bad(format!("core {dst_qc} receives two teleports")));
                        }
                        tpd_targets.push((dst_qc, dst_slot));
                    }
                    Instruction::Local { opcode, ref slots, .. } => {
                        if slots.len() != opcode.arity() || !opcode.is_gate() {
                            return Err(bad(format!("malformed local {opcode}")));
                        }
                    }
                }
            }
            tps_targets.sort_unstable();
            tpd_targets.sort_unstable();
            if tps_targets != tpd_targets {
                return Err(bad("TPS destinations do not match TPD addresses".into()));
            }
            if !orders.is_empty() {
                if orders.len() != tps_targets.len() {
                    return Err(bad("some TPS lack a token order".into()));
                }
                orders.sort_unstable();
                if orders.iter().enumerate().any(|(i, &o)| o as usize != i) {
                    return Err(bad(format!("token orders {orders:?} are not 0..k")));
                }
                if orders.last().map(|&o| o as u64 > self.widths.max_token_order()) == Some(true) {
                    return Err(bad("token order exceeds to_bits".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Extra communication slots per core beyond `slots_per_qc`; `None` means
    /// unbounded.
    pub overflow_slots: Option<usize>,
    /// Minimum token-order width; widened if a bundle needs more.
    pub to_bits: u32,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            overflow_slots: None,
            to_bits: DEFAULT_TO_BITS,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("system needs at least one core and one slot per core")]
    EmptySystem,
    #[error("{n_qubits} qubits need {needed} slots per core on {n_qc} cores, only {slots_per_qc} available")]
    Capacity {
        n_qubits: usize,
        n_qc: usize,
        slots_per_qc: usize,
        needed: usize,
    },
    #[error("placement covers {placed} qubits, circuit has {needed}")]
    PlacementMismatch { placed: usize, needed: usize },
    #[error("no free slot on core {qc} for an incoming teleport")]
    DestinationFull { qc: usize },
    #[error("bundle {bundle}: {reason}")]
    MalformedBundle { bundle: usize, reason: String },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

/// Modulo placement: qubit `i` goes to core `i mod n_qc`, slot `i div n_qc`.
pub fn map_modulo(circuit: &LogicalCircuit, n_qc: usize, slots_per_qc: usize) -> Result<Placement, CompileError> {
    if n_qc == 0 || slots_per_qc == 0 {
        return Err(CompileError::EmptySystem);
    }
    let needed = circuit.n_qubits.div_ceil(n_qc);
    if needed > slots_per_qc {
        return Err(CompileError::Capacity {
            n_qubits: circuit.n_qubits,
            n_qc,
            slots_per_qc,
            needed,
        });
    }
    let locations = (0..circuit.n_qubits)
        .map(|i| Location {
            qc: i % n_qc,
            slot: i / n_qc,
        })
        .collect();
    Ok(Placement {
        n_qc,
        slots_per_qc,
        locations,
    })
}

struct SlotTable {
    occupied: Vec<Vec<bool>>,
    limit: Option<usize>,
}

impl SlotTable {
    fn new(placement: &Placement, overflow: Option<usize>) -> Self {
        let mut occupied = vec![vec![false; placement.slots_per_qc]; placement.n_qc];
        for loc in &placement.locations {
            occupied[loc.qc][loc.slot] = true;
        }
        SlotTable {
            occupied,
            limit: overflow.map(|o| placement.slots_per_qc + o),
        }
    }

    fn allocate(&mut self, qc: usize) -> Option<usize> {
        let row = &mut self.occupied[qc];
        let slot = match row.iter().position(|o| !o) {
            Some(s) => s,
            None => {
                if self.limit.is_some_and(|l| row.len() >= l) {
                    return None;
                }
                row.push(false);
                row.len() - 1
            }
        };
        row[slot] = true;
        Some(slot)
    }

    fn free(&mut self, loc: Location) {
        self.occupied[loc.qc][loc.slot] = false;
    }

    fn max_slots(&self) -> usize {
        self.occupied.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Lays the circuit out as bundles. Token orders are left unassigned.
pub fn compile(circuit: &LogicalCircuit, placement: &Placement, opts: &CompileOptions) -> Result<Program, CompileError> {
    circuit.validate()?;
    if placement.locations.len() != circuit.n_qubits {
        return Err(CompileError::PlacementMismatch {
            placed: placement.locations.len(),
            needed: circuit.n_qubits,
        });
    }

    let gates = &circuit.gates;
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); circuit.n_qubits];
    for (g, gate) in gates.iter().enumerate() {
        for &q in &gate.operands {
            queues[q].push_back(g);
        }
    }
    let mut loc = placement.locations.clone();
    let mut slots = SlotTable::new(placement, opts.overflow_slots);
    let mut remaining = gates.len();
    let mut bundles = Vec::new();

    while remaining > 0 {
        let mut ready: Vec<usize> = queues
            .iter()
            .enumerate()
            .filter_map(|(q, queue)| {
                let &g = queue.front()?;
                let ops = &gates[g].operands;
                (ops[0] == q && ops.iter().all(|&o| queues[o].front() == Some(&g))).then_some(g)
            })
            .collect();
        ready.sort_unstable();

        let mut instructions = Vec::new();
        let mut src_used = HashSet::new();
        let mut dst_used = HashSet::new();
        let mut vacated = Vec::new();

        for g in ready {
            let gate = &gates[g];
            let first = loc[gate.operands[0]];
            let same_core = gate.operands.iter().all(|&q| loc[q].qc == first.qc);
            if same_core {
                instructions.push(Instruction::Local {
                    opcode: gate.opcode,
                    qc: first.qc,
                    slots: gate.operands.iter().map(|&q| loc[q].slot).collect(),
                });
                for &q in &gate.operands {
                    queues[q].pop_front();
                }
                remaining -= 1;
                continue;
            }

            let (a, b) = (gate.operands[0], gate.operands[1]);
            let (src, dst) = (loc[a].qc, loc[b].qc);
            if src_used.contains(&src) || dst_used.contains(&dst) {
                continue;
            }
            let Some(fresh) = slots.allocate(dst) else {
                continue;
            };
            instructions.push(Instruction::Tps {
                src_qc: src,
                src_slot: loc[a].slot,
                dst_qc: dst,
                dst_slot: fresh,
                token_order: None,
            });
            instructions.push(Instruction::Tpd {
                dst_qc: dst,
                dst_slot: fresh,
            });
            src_used.insert(src);
            dst_used.insert(dst);
            vacated.push(loc[a]);
            loc[a] = Location { qc: dst, slot: fresh };
        }

        if instructions.is_empty() {
            // every ready gate is a teleport blocked on a full destination
            let stuck = queues
                .iter()
                .find_map(|q| q.front())
                .map(|&g| loc[gates[g].operands[1]].qc)
                .unwrap_or(0);
            return Err(CompileError::DestinationFull { qc: stuck });
        }
        for v in vacated {
            slots.free(v);
        }
        instructions.sort_by_key(Instruction::emission_key);
        bundles.push(Bundle { instructions });
    }

    let max_chain = bundles.iter().map(Bundle::chain_len).max().unwrap_or(0);
    let to_bits = opts.to_bits.max(addr_bits(max_chain));
    let widths = BitWidths::new(
        placement.n_qc,
        placement.slots_per_qc.max(slots.max_slots()),
        to_bits,
    );
    Ok(Program {
        bundles,
        initial_placement: placement.clone(),
        widths,
    })
}

/// Numbers the TPS instructions of each bundle 0, 1, 2, … in dispatcher
/// emission order (source core, then source slot). Existing orders are
/// overwritten.
pub fn assign_token_orders(mut program: Program) -> Program {
    for bundle in &mut program.bundles {
        let mut tps: Vec<usize> = bundle
            .instructions
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_tps())
            .map(|(idx, _)| idx)
            .collect();
        tps.sort_by_key(|&idx| bundle.instructions[idx].emission_key());
        for (order, idx) in tps.into_iter().enumerate() {
            if let Instruction::Tps { token_order, .. } = &mut bundle.instructions[idx] {
                *token_order = Some(order as u32);
            }
        }
    }
    program
}

/// Modulo placement, compilation and token-order assignment in one step.
pub fn build_program(
    circuit: &LogicalCircuit,
    n_qc: usize,
    slots_per_qc: usize,
    opts: &CompileOptions,
) -> Result<Program, CompileError> {
    let placement = map_modulo(circuit, n_qc, slots_per_qc)?;
    let program = compile(circuit, &placement, opts)?;
    Ok(assign_token_orders(program))
}
