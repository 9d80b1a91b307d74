//! Trace checkers: channel collisions, teleport causality, the bundle
//! barrier, work conservation, token-order sequences and mode invariance.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::compiler::{Instruction, Program};
use crate::isa::PacketKind;
use crate::mac::TIME_EPS;
use crate::system::{Activity, Interval, MacMode, Node, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("transmissions overlap: {first:?} and {second:?}")]
    Collision { first: (f64, f64), second: (f64, f64) },
    #[error("bundle {bundle} teleport {tps}: {what}")]
    Causality { bundle: usize, tps: usize, what: String },
    #[error("bundle {bundle}: {activity} on {node} at {start} precedes the previous bundle's end {barrier}")]
    Barrier {
        bundle: usize,
        node: String,
        activity: &'static str,
        start: f64,
        barrier: f64,
    },
    #[error("bundle {bundle}: {what}")]
    Conservation { bundle: usize, what: String },
    #[error("bundle {bundle}: token orders {seen:?}, expected 1..{len}")]
    TokenOrder { bundle: usize, seen: Vec<usize>, len: usize },
    #[error("CT and ID traces differ in non-token packets: {0}")]
    ModeInvariance(String),
}

/// Runs every single-trace check.
pub fn check_trace(program: &Program, trace: &Trace) -> Result<(), AuditError> {
    check_collisions(trace)?;
    check_barrier(trace)?;
    check_conservation(program, trace)?;
    check_causality(program, trace)?;
    if trace.mode == MacMode::Id {
        check_token_orders(program, trace)?;
    }
    Ok(())
}

pub fn check_collisions(trace: &Trace) -> Result<(), AuditError> {
    let mut tx: Vec<&Interval> = trace.transmissions().collect();
    tx.sort_by(|a, b| a.start.total_cmp(&b.start));
    for w in tx.windows(2) {
        if w[1].start < w[0].end - TIME_EPS {
            return Err(AuditError::Collision {
                first: (w[0].start, w[0].end),
                second: (w[1].start, w[1].end),
            });
        }
    }
    Ok(())
}

pub fn check_barrier(trace: &Trace) -> Result<(), AuditError> {
    for iv in trace.intervals.iter().filter(|iv| iv.node != Node::Ring) {
        if iv.bundle > 0 {
            let barrier = trace.bundle_ends[iv.bundle - 1];
            if iv.start < barrier - TIME_EPS {
                return Err(AuditError::Barrier {
                    bundle: iv.bundle,
                    node: iv.node.to_string(),
                    activity: iv.activity.name(),
                    start: iv.start,
                    barrier,
                });
            }
        }
        if let Some(&end) = trace.bundle_ends.get(iv.bundle) {
            if iv.end > end + TIME_EPS {
                return Err(AuditError::Conservation {
                    bundle: iv.bundle,
                    what: format!("{} on {} ends at {} after the bundle's end {end}", iv.activity.name(), iv.node, iv.end),
                });
            }
        }
    }
    Ok(())
}

type Key = (usize, Activity, Option<usize>);

fn counts(trace: &Trace) -> BTreeMap<Key, usize> {
    let mut m = BTreeMap::new();
    for iv in &trace.intervals {
        *m.entry((iv.bundle, iv.activity, iv.tag)).or_insert(0) += 1;
    }
    m
}

pub fn check_conservation(program: &Program, trace: &Trace) -> Result<(), AuditError> {
    if trace.bundle_ends.len() != program.bundles.len() {
        return Err(AuditError::Conservation {
            bundle: trace.bundle_ends.len(),
            what: format!("{} of {} bundles completed", trace.bundle_ends.len(), program.bundles.len()),
        });
    }
    let seen = counts(trace);
    let get = |k: Key| seen.get(&k).copied().unwrap_or(0);
    for (b, bundle) in program.bundles.iter().enumerate() {
        let fail = |what: String| Err(AuditError::Conservation { bundle: b, what });
        for (i, instr) in bundle.instructions.iter().enumerate() {
            let kind = crate::isa::Packet::for_instruction(instr).kind();
            if get((b, Activity::Transmit(kind), Some(i))) != 1 {
                return fail(format!("instruction {i} dispatched {} times", get((b, Activity::Transmit(kind), Some(i)))));
            }
            match instr {
                Instruction::Local { slots, .. } => {
                    let act = if slots.len() == 2 { Activity::Gate2q } else { Activity::Gate1q };
                    if get((b, act, Some(i))) != 1 {
                        return fail(format!("gate {i} executed {} times", get((b, act, Some(i)))));
                    }
                }
                Instruction::Tps { .. } => {
                    for act in [
                        Activity::EprGeneration,
                        Activity::EprDistribution,
                        Activity::Preprocess,
                        Activity::Transmit(PacketKind::Cbp),
                        Activity::Postprocess,
                    ] {
                        if get((b, act, Some(i))) != 1 {
                            return fail(format!("teleport {i}: {} occurs {} times", act.name(), get((b, act, Some(i)))));
                        }
                    }
                }
                Instruction::Tpd { .. } => {}
            }
        }
        let eocs = get((b, Activity::Transmit(PacketKind::Eoc), None));
        if eocs != bundle.participating_cores().len() {
            return fail(format!("{eocs} EOC for {} participating cores", bundle.participating_cores().len()));
        }
    }
    Ok(())
}

pub fn check_causality(program: &Program, trace: &Trace) -> Result<(), AuditError> {
    let mut by_key: BTreeMap<(usize, usize), Vec<&Interval>> = BTreeMap::new();
    for iv in &trace.intervals {
        if let Some(tag) = iv.tag {
            by_key.entry((iv.bundle, tag)).or_default().push(iv);
        }
    }
    for (b, bundle) in program.bundles.iter().enumerate() {
        for (i, instr) in bundle.instructions.iter().enumerate() {
            let Instruction::Tps { src_qc, dst_qc, .. } = *instr else {
                continue;
            };
            let ivs = by_key.get(&(b, i)).map(Vec::as_slice).unwrap_or(&[]);
            let find = |a: Activity| ivs.iter().find(|iv| iv.activity == a).copied();
            let err = |what: String| AuditError::Causality { bundle: b, tps: i, what };
            let (Some(dist), Some(pre), Some(cbp), Some(post)) = (
                find(Activity::EprDistribution),
                find(Activity::Preprocess),
                find(Activity::Transmit(PacketKind::Cbp)),
                find(Activity::Postprocess),
            ) else {
                return Err(err("missing phase".into()));
            };
            let ok = dist.end <= pre.start + TIME_EPS
                && pre.start < cbp.start
                && pre.end <= cbp.start + TIME_EPS
                && cbp.start < cbp.end
                && cbp.end <= post.start + TIME_EPS;
            if !ok {
                return Err(err(format!(
                    "epr ready {}, preprocess {}..{}, cbp {}..{}, postprocess {}",
                    dist.end, pre.start, pre.end, cbp.start, cbp.end, post.start
                )));
            }
            if pre.node != Node::Qc(src_qc) || post.node != Node::Qc(dst_qc) || cbp.node != Node::Qc(src_qc) {
                return Err(err("phase on the wrong core".into()));
            }
        }
    }
    Ok(())
}

pub fn check_token_orders(program: &Program, trace: &Trace) -> Result<(), AuditError> {
    for (b, bundle) in program.bundles.iter().enumerate() {
        let len = bundle.chain_len();
        let seen = trace.token_orders.get(b).cloned().unwrap_or_default();
        let expected: Vec<usize> = (1..len).collect();
        if seen != expected {
            return Err(AuditError::TokenOrder { bundle: b, seen, len });
        }
    }
    Ok(())
}

/// Multiset of non-token transmissions: `(bundle, sender, kind, tag)`.
pub fn packet_multiset(trace: &Trace) -> BTreeMap<(usize, Node, Activity, Option<usize>), usize> {
    let mut m = BTreeMap::new();
    for iv in trace.transmissions() {
        if iv.activity != Activity::Transmit(PacketKind::Tp) {
            *m.entry((iv.bundle, iv.node, iv.activity, iv.tag)).or_insert(0) += 1;
        }
    }
    m
}

pub fn check_mode_invariance(ct: &Trace, id: &Trace) -> Result<(), AuditError> {
    let a = packet_multiset(ct);
    let b = packet_multiset(id);
    if a != b {
        let diff = a
            .iter()
            .find(|(k, v)| b.get(k) != Some(v))
            .map(|(k, v)| format!("{k:?}: CT {v}, ID {:?}", b.get(k)))
            .or_else(|| b.iter().find(|(k, _)| !a.contains_key(k)).map(|(k, v)| format!("{k:?}: CT none, ID {v}")))
            .unwrap_or_default();
        return Err(AuditError::ModeInvariance(diff));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::gen_random_circuit;
    use crate::compiler::{build_program, CompileOptions};
    use crate::system::{run_program, EprConfig, EprModel, SimConfig};

    #[test]
    fn random_program_passes_every_check() {
        let c = gen_random_circuit(12, 60, 0.5, 4).unwrap();
        let p = build_program(&c, 3, 4, &CompileOptions::default()).unwrap();
        let cfg = SimConfig {
            epr: EprConfig {
                model: EprModel::Exponential,
                parallel_capacity: Some(2),
            },
            ..SimConfig::default()
        };
        let ct = run_program(&p, &cfg, MacMode::Ct, 9).unwrap();
        let id = run_program(&p, &cfg, MacMode::Id, 9).unwrap();
        check_trace(&p, &ct).unwrap();
        check_trace(&p, &id).unwrap();
        check_mode_invariance(&ct, &id).unwrap();
    }

    #[test]
    fn detects_overlap() {
        let c = gen_random_circuit(4, 10, 0.5, 1).unwrap();
        let p = build_program(&c, 2, 4, &CompileOptions::default()).unwrap();
        let mut tr = run_program(&p, &SimConfig::default(), MacMode::Id, 1).unwrap();
        let first = *tr.transmissions().next().unwrap();
        let mut dup = first;
        dup.start += first.duration() / 2.0;
        dup.end += first.duration() / 2.0;
        tr.intervals.push(dup);
        assert!(matches!(check_collisions(&tr), Err(AuditError::Collision { .. })));
    }
}
