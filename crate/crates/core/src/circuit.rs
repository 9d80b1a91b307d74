//! Logical circuits, benchmark generators and the plain-text circuit format.
//!
//! The text format is line oriented:
//!
//! ```text
//! # comment
//! qubits 3
//! h 0
//! cx 0 1
//! ```
//!
//! Rotation angles are not carried: the simulator only cares about which
//! qubits a gate touches and how long it takes.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStreams, Stream};

/// Instruction opcodes. The 4-bit opcode field caps the set at sixteen entries;
/// `Tps` and `Tpd` are reserved for compiler-generated teleport instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    H,
    X,
    Sx,
    Rz,
    Y,
    Z,
    S,
    Sdg,
    T,
    Tdg,
    Sxdg,
    Cx,
    Cz,
    Swap,
    Tps,
    Tpd,
}

impl Opcode {
    pub const ALL: [Opcode; 16] = [
        Opcode::H,
        Opcode::X,
        Opcode::Sx,
        Opcode::Rz,
        Opcode::Y,
        Opcode::Z,
        Opcode::S,
        Opcode::Sdg,
        Opcode::T,
        Opcode::Tdg,
        Opcode::Sxdg,
        Opcode::Cx,
        Opcode::Cz,
        Opcode::Swap,
        Opcode::Tps,
        Opcode::Tpd,
    ];

    /// 4-bit instruction code.
    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&op| op == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Opcode> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::H => "h",
            Opcode::X => "x",
            Opcode::Sx => "sx",
            Opcode::Rz => "rz",
            Opcode::Y => "y",
            Opcode::Z => "z",
            Opcode::S => "s",
            Opcode::Sdg => "sdg",
            Opcode::T => "t",
            Opcode::Tdg => "tdg",
            Opcode::Sxdg => "sxdg",
            Opcode::Cx => "cx",
            Opcode::Cz => "cz",
            Opcode::Swap => "swap",
            Opcode::Tps => "tps",
            Opcode::Tpd => "tpd",
        }
    }

    /// Number of logical-qubit operands for circuit gates.
    pub fn arity(self) -> usize {
        match self {
            Opcode::Cx | Opcode::Cz | Opcode::Swap | Opcode::Tps => 2,
            _ => 1,
        }
    }

    /// Whether the opcode may appear in a logical circuit.
    pub fn is_gate(self) -> bool {
        !matches!(self, Opcode::Tps | Opcode::Tpd)
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.is_gate() && op.mnemonic() == s)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gate {
    pub opcode: Opcode,
    pub operands: Vec<usize>,
}

impl Gate {
    pub fn one(opcode: Opcode, q: usize) -> Gate {
        Gate { opcode, operands: vec![q] }
    }

    pub fn two(opcode: Opcode, a: usize, b: usize) -> Gate {
        Gate { opcode, operands: vec![a, b] }
    }

    pub fn is_two_qubit(&self) -> bool {
        self.operands.len() == 2
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("circuit needs at least one qubit")]
    NoQubits,
    #[error("two-qubit gates requested on a {0}-qubit circuit")]
    TooFewQubitsForTwoQubitGates(usize),
    #[error("two-qubit fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("gate {index}: {opcode} expects {expected} operands, got {got}")]
    Arity {
        index: usize,
        opcode: Opcode,
        expected: usize,
        got: usize,
    },
    #[error("gate {index}: operands of a two-qubit gate must differ")]
    RepeatedOperand { index: usize },
    #[error("gate {index}: qubit {qubit} out of range for {n_qubits} qubits")]
    QubitOutOfRange {
        index: usize,
        qubit: usize,
        n_qubits: usize,
    },
    #[error("gate {index}: {opcode} is not a circuit gate")]
    NotAGate { index: usize, opcode: Opcode },
    #[error("graph edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("graph edge ({0}, {1}) is duplicated")]
    DuplicateEdge(usize, usize),
    #[error("graph edge ({0}, {1}) references a vertex outside 0..{2}")]
    VertexOutOfRange(usize, usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalCircuit {
    pub n_qubits: usize,
    pub gates: Vec<Gate>,
}

impl LogicalCircuit {
    pub fn new(n_qubits: usize, gates: Vec<Gate>) -> Result<Self, CircuitError> {
        let circuit = LogicalCircuit { n_qubits, gates };
        circuit.validate()?;
        Ok(circuit)
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        if self.n_qubits == 0 {
            return Err(CircuitError::NoQubits);
        }
        for (index, gate) in self.gates.iter().enumerate() {
            if !gate.opcode.is_gate() {
                return Err(CircuitError::NotAGate {
                    index,
                    opcode: gate.opcode,
                });
            }
            if gate.operands.len() != gate.opcode.arity() {
                return Err(CircuitError::Arity {
                    index,
                    opcode: gate.opcode,
                    expected: gate.opcode.arity(),
                    got: gate.operands.len(),
                });
            }
            if let Some(&qubit) = gate.operands.iter().find(|&&q| q >= self.n_qubits) {
                return Err(CircuitError::QubitOutOfRange {
                    index,
                    qubit,
                    n_qubits: self.n_qubits,
                });
            }
            if gate.is_two_qubit() && gate.operands[0] == gate.operands[1] {
                return Err(CircuitError::RepeatedOperand { index });
            }
        }
        Ok(())
    }

    pub fn two_qubit_count(&self) -> usize {
        self.gates.iter().filter(|g| g.is_two_qubit()).count()
    }

    /// Serializes to the text circuit format.
    pub fn to_text(&self) -> String {
        let mut out = format!("qubits {}\n", self.n_qubits);
        for gate in &self.gates {
            out.push_str(gate.opcode.mnemonic());
            for q in &gate.operands {
                out.push(' ');
                out.push_str(&q.to_string());
            }
            out.push('\n');
        }
        out
    }
}

impl FromStr for LogicalCircuit {
    type Err = CircuitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_circuit(s)
    }
}

/// Parses the text circuit format. Errors carry 1-based line numbers.
pub fn parse_circuit(text: &str) -> Result<LogicalCircuit, CircuitError> {
    let err = |line: usize, message: String| CircuitError::Parse { line, message };
    let mut n_qubits: Option<usize> = None;
    let mut gates = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let head = fields.next().unwrap();
        let Some(n) = n_qubits else {
            if head != "qubits" {
                return Err(err(line_no, format!("expected `qubits <N>` header, found `{head}`")));
            }
            let count = fields
                .next()
                .ok_or_else(|| err(line_no, "missing qubit count".into()))?;
            let count: usize = count
                .parse()
                .map_err(|_| err(line_no, format!("invalid qubit count `{count}`")))?;
            if count == 0 {
                return Err(err(line_no, "qubit count must be positive".into()));
            }
            if let Some(extra) = fields.next() {
                return Err(err(line_no, format!("unexpected token `{extra}` in header")));
            }
            n_qubits = Some(count);
            continue;
        };

        let opcode = Opcode::from_mnemonic(head)
            .ok_or_else(|| err(line_no, format!("unknown mnemonic `{head}`")))?;
        let operands = fields
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| err(line_no, format!("invalid qubit index `{tok}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if operands.len() != opcode.arity() {
            return Err(err(
                line_no,
                format!(
                    "`{head}` takes {} operand(s), got {}",
                    opcode.arity(),
                    operands.len()
                ),
            ));
        }
        if let Some(q) = operands.iter().find(|&&q| q >= n) {
            return Err(err(line_no, format!("qubit {q} out of range for {n} qubits")));
        }
        if operands.len() == 2 && operands[0] == operands[1] {
            return Err(err(line_no, "two-qubit gate operands must be distinct".into()));
        }
        gates.push(Gate { opcode, operands });
    }

    let n_qubits = n_qubits.ok_or_else(|| err(text.lines().count().max(1), "missing `qubits <N>` header".into()))?;
    Ok(LogicalCircuit { n_qubits, gates })
}

const RANDOM_SINGLE_QUBIT: [Opcode; 3] = [Opcode::Rz, Opcode::Sx, Opcode::X];

/// Random circuit with exactly `round(n_gates * two_qubit_fraction)` CX gates.
///
/// Gate kinds are laid out and then shuffled; single-qubit gates draw an
/// opcode from {RZ, SX, X}, and each CX draws its two operands uniformly
/// without replacement.
pub fn gen_random_circuit(
    n_qubits: usize,
    n_gates: usize,
    two_qubit_fraction: f64,
    seed: u64,
) -> Result<LogicalCircuit, CircuitError> {
    if n_qubits == 0 {
        return Err(CircuitError::NoQubits);
    }
    if !(0.0..=1.0).contains(&two_qubit_fraction) {
        return Err(CircuitError::BadFraction(two_qubit_fraction));
    }
    let n_two = (n_gates as f64 * two_qubit_fraction).round() as usize;
    if n_two > 0 && n_qubits < 2 {
        return Err(CircuitError::TooFewQubitsForTwoQubitGates(n_qubits));
    }

    let mut rng = RngStreams::new(seed).stream(Stream::CircuitGen);
    let mut kinds: Vec<bool> = (0..n_gates).map(|i| i < n_two).collect();
    kinds.shuffle(&mut rng);

    let gates = kinds
        .into_iter()
        .map(|two| {
            if two {
                let pair = index::sample(&mut rng, n_qubits, 2);
                Gate::two(Opcode::Cx, pair.index(0), pair.index(1))
            } else {
                let op = RANDOM_SINGLE_QUBIT[rng.random_range(0..RANDOM_SINGLE_QUBIT.len())];
                Gate::one(op, rng.random_range(0..n_qubits))
            }
        })
        .collect();
    Ok(LogicalCircuit { n_qubits, gates })
}

/// GHZ ladder: H on qubit 0 followed by CX(i, i+1).
pub fn gen_ghz(n_qubits: usize) -> Result<LogicalCircuit, CircuitError> {
    if n_qubits == 0 {
        return Err(CircuitError::NoQubits);
    }
    let mut gates = vec![Gate::one(Opcode::H, 0)];
    gates.extend((0..n_qubits - 1).map(|i| Gate::two(Opcode::Cx, i, i + 1)));
    Ok(LogicalCircuit { n_qubits, gates })
}

/// H = RZ(pi/2) SX RZ(pi/2), up to global phase.
pub fn native_h(q: usize) -> [Gate; 3] {
    [
        Gate::one(Opcode::Rz, q),
        Gate::one(Opcode::Sx, q),
        Gate::one(Opcode::Rz, q),
    ]
}

/// CP(l) = RZ(l/2) on control, CX, RZ(-l/2) on target, CX, RZ(l/2) on target.
pub fn native_cphase(control: usize, target: usize) -> [Gate; 5] {
    [
        Gate::one(Opcode::Rz, control),
        Gate::two(Opcode::Cx, control, target),
        Gate::one(Opcode::Rz, target),
        Gate::two(Opcode::Cx, control, target),
        Gate::one(Opcode::Rz, target),
    ]
}

/// CZ = H(target) CX H(target), with H in native form.
pub fn native_cz(control: usize, target: usize) -> Vec<Gate> {
    let mut gates = native_h(target).to_vec();
    gates.push(Gate::two(Opcode::Cx, control, target));
    gates.extend(native_h(target));
    gates
}

/// SWAP as three alternating CX gates.
pub fn native_swap(a: usize, b: usize) -> [Gate; 3] {
    [
        Gate::two(Opcode::Cx, a, b),
        Gate::two(Opcode::Cx, b, a),
        Gate::two(Opcode::Cx, a, b),
    ]
}

/// Textbook QFT in the native set, including the final qubit-reversal swaps.
pub fn gen_qft(n_qubits: usize) -> Result<LogicalCircuit, CircuitError> {
    if n_qubits == 0 {
        return Err(CircuitError::NoQubits);
    }
    let mut gates = Vec::new();
    for j in 0..n_qubits {
        gates.extend(native_h(j));
        for k in j + 1..n_qubits {
            gates.extend(native_cphase(k, j));
        }
    }
    for i in 0..n_qubits / 2 {
        gates.extend(native_swap(i, n_qubits - 1 - i));
    }
    Ok(LogicalCircuit { n_qubits, gates })
}

/// Graph-state preparation: H on every vertex, then one native CZ per edge in
/// input order.
pub fn gen_graphstate(edges: &[(usize, usize)], n_qubits: usize) -> Result<LogicalCircuit, CircuitError> {
    if n_qubits == 0 {
        return Err(CircuitError::NoQubits);
    }
    let mut seen = std::collections::HashSet::new();
    for &(a, b) in edges {
        if a >= n_qubits || b >= n_qubits {
            return Err(CircuitError::VertexOutOfRange(a, b, n_qubits));
        }
        if a == b {
            return Err(CircuitError::SelfLoop(a, b));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(CircuitError::DuplicateEdge(a, b));
        }
    }
    let mut gates: Vec<Gate> = (0..n_qubits).map(|q| Gate::one(Opcode::H, q)).collect();
    for &(a, b) in edges {
        gates.extend(native_cz(a, b));
    }
    Ok(LogicalCircuit { n_qubits, gates })
}

/// Cycle graph 0-1-...-(n-1)-0, the 2-regular graph used for the graph-state
/// benchmark.
pub fn ring_edges(n_qubits: usize) -> Vec<(usize, usize)> {
    match n_qubits {
        0 | 1 => Vec::new(),
        2 => vec![(0, 1)],
        n => (0..n).map(|i| (i, (i + 1) % n)).collect(),
    }
}
