use std::collections::BTreeMap;

use idmac_core::audit::{check_mode_invariance, check_trace};
use idmac_core::circuit::{gen_random_circuit, parse_circuit, Gate, LogicalCircuit, Opcode};
use idmac_core::compiler::{build_program, CompileOptions, Instruction};
use idmac_core::isa::{decode, encode, BitWidths, Packet};
use idmac_core::system::{run_program, Activity, EprConfig, EprModel, MacMode, SimConfig};
use proptest::prelude::*;

fn arb_circuit() -> impl Strategy<Value = LogicalCircuit> {
    (1usize..24, 0usize..80, 0.0f64..=1.0, any::<u64>()).prop_map(|(n, g, f, seed)| {
        let f = if n < 2 { 0.0 } else { f };
        gen_random_circuit(n, g, f, seed).unwrap()
    })
}

fn arb_opcode() -> impl Strategy<Value = Opcode> {
    (0u8..14).prop_map(|c| Opcode::from_code(c).unwrap())
}

fn arb_packet_and_widths() -> impl Strategy<Value = (Packet, BitWidths)> {
    (1usize..300, 1usize..300, 8u32..12).prop_flat_map(|(n_qc, slots, to_bits)| {
        let w = BitWidths::new(n_qc, slots, to_bits);
        let qc = 0..n_qc as u32;
        let sl = 0..slots as u32;
        let to = 0..(1u32 << to_bits);
        let pkt = prop_oneof![
            (qc.clone(), arb_opcode(), sl.clone(), sl.clone()).prop_map(|(qc, opcode, a, b)| Packet::Lip {
                qc,
                opcode,
                slots: (a, (opcode.arity() == 2).then_some(b)),
            }),
            (qc.clone(), sl.clone(), qc.clone(), sl.clone(), to.clone()).prop_map(|(a, b, c, d, to)| Packet::Tpsip {
                src_qc: a,
                src_slot: b,
                dst_qc: c,
                dst_slot: d,
                to
            }),
            (qc.clone(), sl.clone()).prop_map(|(dst_qc, dst_slot)| Packet::Tpdip { dst_qc, dst_slot }),
            (0u8..4, qc.clone(), sl.clone()).prop_map(|(cb, dst_qc, dst_slot)| Packet::Cbp { cb, dst_qc, dst_slot }),
            to.prop_map(|to| Packet::Tp { to }),
            qc.prop_map(|qc| Packet::Eoc { qc }),
        ];
        pkt.prop_map(move |p| (p, w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn circuit_text_round_trips(c in arb_circuit()) {
        prop_assert_eq!(parse_circuit(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn random_generator_hits_two_qubit_count(n in 2usize..40, g in 0usize..300, f in 0.0f64..=1.0, seed: u64) {
        let c = gen_random_circuit(n, g, f, seed).unwrap();
        prop_assert_eq!(c.gates.len(), g);
        prop_assert_eq!(c.two_qubit_count(), (g as f64 * f).round() as usize);
        prop_assert_eq!(c, gen_random_circuit(n, g, f, seed).unwrap());
    }

    #[test]
    fn codec_round_trips((pkt, w) in arb_packet_and_widths()) {
        let bits = encode(&pkt, &w).unwrap();
        prop_assert_eq!(bits.len() as u32, idmac_core::isa::size_bits(&pkt, &w));
        prop_assert_eq!(decode(&bits, &w).unwrap(), pkt);
    }

    #[test]
    fn compiled_programs_are_well_formed(c in arb_circuit(), n_qc in 1usize..6, slots in 1usize..6) {
        prop_assume!(c.n_qubits <= n_qc * slots);
        let p = build_program(&c, n_qc, slots, &CompileOptions::default()).unwrap();
        p.validate().unwrap();
        let locals = p.bundles.iter().flat_map(|b| &b.instructions).filter(|i| matches!(i, Instruction::Local { .. })).count();
        prop_assert_eq!(locals, c.gates.len(), "every gate runs exactly once as a local instruction");
        for b in &p.bundles {
            let mut orders: Vec<u32> = b.instructions.iter().filter_map(Instruction::token_order).collect();
            orders.sort_unstable();
            prop_assert_eq!(orders, (0..b.tps_count() as u32).collect::<Vec<_>>());
            prop_assert!(b.chain_len() as u64 <= p.widths.max_token_order() + 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn simulated_traces_satisfy_invariants(
        c in arb_circuit(),
        n_qc in 1usize..8,
        slots in 1usize..6,
        capacity in prop::option::of(1usize..4),
        seed: u64,
    ) {
        prop_assume!(c.n_qubits <= n_qc * slots);
        let p = build_program(&c, n_qc, slots, &CompileOptions::default()).unwrap();
        let cfg = SimConfig { epr: EprConfig { model: EprModel::Exponential, parallel_capacity: capacity }, ..SimConfig::default() };
        let ct = run_program(&p, &cfg, MacMode::Ct, seed).unwrap();
        let id = run_program(&p, &cfg, MacMode::Id, seed).unwrap();
        check_trace(&p, &ct).unwrap();
        check_trace(&p, &id).unwrap();
        check_mode_invariance(&ct, &id).unwrap();
        // token never idles unaccounted: CT classical comm covers the makespan
        let c_comm: f64 = ct.intervals.iter().filter(|iv| iv.category().name() == "c_comm").map(|iv| iv.duration()).sum();
        prop_assert!((c_comm - ct.makespan).abs() <= 1e-6 * ct.makespan.max(1.0));
    }

    #[test]
    fn qsf_rescales_quantum_intervals_exactly(c in arb_circuit(), n_qc in 1usize..5, alpha in 0.05f64..4.0, mode_id: bool) {
        prop_assume!(c.n_qubits <= n_qc * 6);
        let p = build_program(&c, n_qc, 6, &CompileOptions::default()).unwrap();
        let mode = if mode_id { MacMode::Id } else { MacMode::Ct };
        let base = SimConfig { epr: EprConfig { model: EprModel::Deterministic, parallel_capacity: Some(1) }, ..SimConfig::default() };
        let mut scaled = base;
        scaled.timing.qsf = alpha;
        let a = run_program(&p, &base, mode, 0).unwrap();
        let b = run_program(&p, &scaled, mode, 0).unwrap();
        let key = |t: &idmac_core::system::Trace| {
            t.intervals
                .iter()
                .filter(|iv| iv.activity != Activity::TokenPass)
                .map(|iv| ((iv.bundle, iv.node, iv.activity, iv.tag), iv.duration()))
                .collect::<BTreeMap<_, _>>()
        };
        let (ka, kb) = (key(&a), key(&b));
        prop_assert_eq!(ka.len(), kb.len());
        for (k, da) in &ka {
            let db = kb[k];
            if k.2.category().is_quantum() {
                prop_assert!((db - alpha * da).abs() <= 1e-9 * (alpha * da).abs().max(1e-12), "{:?}: {} vs {}", k, db, alpha * da);
            } else if matches!(k.2, Activity::Transmit(_)) {
                prop_assert_eq!(db, *da);
            }
        }
    }
}

#[test]
fn local_only_circuit_has_no_teleports() {
    let c = LogicalCircuit::new(2, vec![Gate::two(Opcode::Cx, 0, 1), Gate::one(Opcode::H, 1)]).unwrap();
    let p = build_program(&c, 1, 2, &CompileOptions::default()).unwrap();
    assert_eq!(p.teleport_count(), 0);
    for mode in MacMode::BOTH {
        let t = run_program(&p, &SimConfig::default(), mode, 0).unwrap();
        assert!(t.intervals.iter().all(|iv| !iv.category().name().starts_with("q_comm")));
    }
}
