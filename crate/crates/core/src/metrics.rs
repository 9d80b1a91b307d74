//! Execution-time breakdowns and MAC comparisons.

use std::fmt::Write as _;

use serde::Serialize;

use crate::system::{Category, MacMode, Trace};

pub const DEFAULT_T2_NS: f64 = 100_000.0;

/// Accumulated busy time per category for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BreakdownReport {
    pub n_qc: usize,
    pub qsf: f64,
    pub mode: MacMode,
    /// `None` for a mean over several seeds.
    pub seed: Option<u64>,
    pub q_comm: f64,
    pub q_comp: f64,
    pub c_comm: f64,
    pub c_comp: f64,
    pub makespan: f64,
}

impl BreakdownReport {
    pub fn total(&self) -> f64 {
        self.q_comm + self.q_comp + self.c_comm + self.c_comp
    }

    /// Shares of `[q_comm, q_comp, c_comm, c_comp]`; undefined for an empty run.
    pub fn shares(&self) -> Option<[f64; 4]> {
        let t = self.total();
        (t > 0.0).then(|| [self.q_comm / t, self.q_comp / t, self.c_comm / t, self.c_comp / t])
    }

    pub fn get(&self, c: Category) -> f64 {
        match c {
            Category::QuantumComm => self.q_comm,
            Category::QuantumComp => self.q_comp,
            Category::ClassicalComm => self.c_comm,
            Category::ClassicalComp => self.c_comp,
        }
    }
}

pub fn breakdown(trace: &Trace) -> BreakdownReport {
    let mut r = BreakdownReport {
        n_qc: trace.n_qc,
        qsf: trace.qsf,
        mode: trace.mode,
        seed: Some(trace.seed),
        q_comm: 0.0,
        q_comp: 0.0,
        c_comm: 0.0,
        c_comp: 0.0,
        makespan: trace.makespan,
    };
    for iv in &trace.intervals {
        let d = iv.duration();
        match iv.category() {
            Category::QuantumComm => r.q_comm += d,
            Category::QuantumComp => r.q_comp += d,
            Category::ClassicalComm => r.c_comm += d,
            Category::ClassicalComp => r.c_comp += d,
        }
    }
    r
}

/// Share of summed busy time spent in classical communication; 0 for an
/// empty report.
pub fn classical_fraction(r: &BreakdownReport) -> f64 {
    r.shares().map_or(0.0, |s| s[2])
}

/// Makespan saved by ID-MAC relative to CT-MAC, in percent.
pub fn speedup(ct: &BreakdownReport, id: &BreakdownReport) -> f64 {
    speedup_ns(ct.makespan, id.makespan)
}

pub fn speedup_ns(ct_makespan: f64, id_makespan: f64) -> f64 {
    if ct_makespan <= 0.0 {
        return 0.0;
    }
    (ct_makespan - id_makespan) / ct_makespan * 100.0
}

/// Relative gain of the proxy fidelity `exp(-T / t2)`, in percent.
pub fn coherence_improvement(ct_makespan: f64, id_makespan: f64, t2: f64) -> f64 {
    assert!(t2 > 0.0, "t2 must be positive");
    // ratio form avoids underflow when T >> t2
    ((ct_makespan - id_makespan) / t2).exp_m1() * 100.0
}

/// Per-category mean over reports of the same configuration.
pub fn mean_report(reports: &[BreakdownReport]) -> Option<BreakdownReport> {
    let first = *reports.first()?;
    let n = reports.len() as f64;
    let avg = |f: fn(&BreakdownReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(BreakdownReport {
        seed: if reports.len() == 1 { first.seed } else { None },
        q_comm: avg(|r| r.q_comm),
        q_comp: avg(|r| r.q_comp),
        c_comm: avg(|r| r.c_comm),
        c_comp: avg(|r| r.c_comp),
        makespan: avg(|r| r.makespan),
        ..first
    })
}

pub const REPORT_HEADER: &str = "n_qc,qsf,mode,seed,q_comm_ns,q_comp_ns,c_comm_ns,c_comp_ns,makespan_ns,c_comm_share";

pub fn report_row(r: &BreakdownReport) -> String {
    let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.n_qc,
        r.qsf,
        r.mode,
        seed,
        r.q_comm,
        r.q_comp,
        r.c_comm,
        r.c_comp,
        r.makespan,
        classical_fraction(r)
    )
}

pub fn report_csv(reports: &[BreakdownReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", report_row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{Activity, Interval, Node};
    use approx::assert_abs_diff_eq;

    fn trace(intervals: Vec<Interval>, makespan: f64) -> Trace {
        Trace {
            mode: MacMode::Id,
            n_qc: 1,
            qsf: 1.0,
            seed: 0,
            intervals,
            makespan,
            bundle_ends: vec![makespan],
            token_orders: vec![],
        }
    }

    fn iv(start: f64, end: f64, activity: Activity) -> Interval {
        Interval::new(start, end - start, Node::Qc(0), activity, 0, None)
    }

    fn report(makespan: f64) -> BreakdownReport {
        breakdown(&trace(vec![iv(0.0, makespan, Activity::Gate1q)], makespan))
    }

    #[test]
    fn single_gate_is_all_quantum_compute() {
        let r = report(25.0);
        assert_eq!(r.shares(), Some([0.0, 1.0, 0.0, 0.0]));
        assert_eq!(classical_fraction(&r), 0.0);
    }

    #[test]
    fn token_only_trace_is_all_classical_comm() {
        let mut t = trace(vec![iv(0.0, 7.0, Activity::TokenPass)], 7.0);
        t.intervals[0].node = Node::Ring;
        let r = breakdown(&t);
        assert_eq!(r.c_comm, 7.0);
        assert_eq!(classical_fraction(&r), 1.0);
    }

    #[test]
    fn empty_trace_has_no_shares() {
        let r = breakdown(&trace(vec![], 0.0));
        assert_eq!(r.shares(), None);
        assert_eq!(classical_fraction(&r), 0.0);
    }

    #[test]
    fn shares_sum_to_one() {
        let t = trace(
            vec![
                iv(0.0, 3.0, Activity::Fetch),
                iv(3.0, 4.5, Activity::TokenPass),
                iv(1.0, 100.0, Activity::EprGeneration),
                iv(2.0, 27.0, Activity::Gate1q),
            ],
            100.0,
        );
        let s = breakdown(&t).shares().unwrap();
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn speedup_arithmetic() {
        assert_eq!(speedup(&report(200.0), &report(100.0)), 50.0);
        let r = report(123.0);
        assert_eq!(speedup(&r, &r), 0.0);
    }

    #[test]
    fn coherence_proxy() {
        let t2 = DEFAULT_T2_NS;
        let expect = ((-0.5f64).exp() - (-1.0f64).exp()) / (-1.0f64).exp() * 100.0;
        assert_abs_diff_eq!(coherence_improvement(t2, t2 / 2.0, t2), expect, epsilon = 1e-9);
        assert_abs_diff_eq!(expect, 64.872, epsilon = 1e-3);
        assert_eq!(coherence_improvement(5e3, 5e3, t2), 0.0);
        assert!(coherence_improvement(5e3, 4e3, 1e300).abs() < 1e-9);
    }

    #[test]
    fn mean_and_csv() {
        let m = mean_report(&[report(10.0), report(30.0)]).unwrap();
        assert_eq!(m.makespan, 20.0);
        assert_eq!(m.seed, None);
        let csv = report_csv(&[m]);
        assert_eq!(csv.lines().next(), Some(REPORT_HEADER));
        assert_eq!(csv.lines().nth(1), Some("1,1,ID,mean,0,20,0,0,20,0"));
    }
}
