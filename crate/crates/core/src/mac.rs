//! Shared wireless channel and its two arbitration policies.
//!
//! * CT-MAC: a token circulates over the fixed ring `[CU, QC0, …, QCn-1]`,
//!   one hop per `hop_ns`. Only the holder transmits. Idle circulation is not
//!   simulated hop by hop; arrival times follow from the last release point,
//!   and contiguous stretches of circulation are logged as segments.
//! * ID-MAC: the compiler numbers every transmitter of a bundle. Order 0 may
//!   transmit as soon as it is ready and the channel is idle; order `k > 0`
//!   waits for the token packet `TP{k}` sent by order `k - 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{BitWidths, Packet};

/// Slack for comparing times produced along different float paths.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MacError {
    #[error("collision: node {node} starts at {start} but channel is busy until {busy_until}")]
    Collision { node: usize, start: f64, busy_until: f64 },
    #[error("token TP{{{order}}} arrived but the chain only has {len} slots")]
    UnexpectedToken { order: usize, len: usize },
    #[error("token TP{{{order}}} arrived out of sequence (expected {expected})")]
    OutOfSequence { order: usize, expected: usize },
    #[error("node {node} claims token order {order}, which belongs to node {owner}")]
    WrongHolder { order: usize, node: usize, owner: usize },
}

pub fn transmit_duration(pkt: &Packet, widths: &BitWidths, bitrate_bits_per_ns: f64) -> f64 {
    assert!(bitrate_bits_per_ns > 0.0);
    crate::isa::size_bits(pkt, widths) as f64 / bitrate_bits_per_ns
}

/// The single shared medium. Tracks when it next becomes idle and rejects
/// overlapping transmissions.
#[derive(Debug, Clone)]
pub struct Channel {
    bitrate: f64,
    busy_until: f64,
    active: Option<usize>,
}

impl Channel {
    pub fn new(bitrate_bits_per_ns: f64) -> Self {
        Channel {
            bitrate: bitrate_bits_per_ns,
            busy_until: 0.0,
            active: None,
        }
    }

    pub fn bitrate(&self) -> f64 {
        self.bitrate
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    /// Node of the transmission that ends at `busy_until`, if any.
    pub fn last_transmitter(&self) -> Option<usize> {
        self.active
    }

    pub fn duration(&self, pkt: &Packet, widths: &BitWidths) -> f64 {
        transmit_duration(pkt, widths, self.bitrate)
    }

    /// Reserves `[start, start + duration)`. Returns the end time.
    pub fn occupy(&mut self, node: usize, start: f64, duration: f64) -> Result<f64, MacError> {
        if start < self.busy_until - TIME_EPS {
            return Err(MacError::Collision {
                node,
                start,
                busy_until: self.busy_until,
            });
        }
        self.busy_until = start + duration;
        self.active = Some(node);
        Ok(self.busy_until)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtService {
    /// Holder sends everything that was pending when the token arrived.
    #[default]
    Exhaustive,
    /// Holder sends one packet per token visit.
    OnePacket,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdleToken {
    /// Token keeps hopping when nobody has anything to send.
    #[default]
    Circulate,
    /// Token stays with the last holder until someone has traffic.
    Park,
}

/// Earliest time `>= ready` at which a free-running token that reaches
/// `from` at `at` will reach `node`.
pub fn ct_grant(ring_len: usize, hop_ns: f64, from: usize, at: f64, node: usize, ready: f64) -> f64 {
    let d = (node + ring_len - from % ring_len) % ring_len;
    let first = at + d as f64 * hop_ns;
    if first >= ready - TIME_EPS {
        return first;
    }
    let period = ring_len as f64 * hop_ns;
    // slack keeps an exact-lap arrival from rounding up to the next lap
    let laps = ((ready - first - TIME_EPS) / period).ceil().max(0.0);
    let mut t = first + laps * period;
    if t < ready - TIME_EPS {
        t += period;
    }
    t
}

/// A scheduled token arrival. Stale grants (older epoch) are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grant {
    pub node: usize,
    pub at: f64,
    pub epoch: u64,
}

/// A stretch of token movement with no holder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSegment {
    pub start: f64,
    pub end: f64,
    pub hops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TokenState {
    /// Reaches `node` at `at`, moving since `since`.
    Moving { node: usize, at: f64, since: f64 },
    Held { node: usize },
    Parked { node: usize },
}

/// Circulating-token arbiter.
#[derive(Debug, Clone)]
pub struct CirculatingToken {
    ring_len: usize,
    hop: f64,
    service: CtService,
    idle: IdleToken,
    state: TokenState,
    pending: Vec<usize>,
    scheduled: Option<Grant>,
    epoch: u64,
}

impl CirculatingToken {
    /// Token starts at node 0 at time 0.
    pub fn new(ring_len: usize, hop_ns: f64, service: CtService, idle: IdleToken) -> Self {
        assert!(ring_len >= 1 && hop_ns > 0.0);
        let state = match idle {
            IdleToken::Circulate => TokenState::Moving {
                node: 0,
                at: 0.0,
                since: 0.0,
            },
            IdleToken::Park => TokenState::Parked { node: 0 },
        };
        CirculatingToken {
            ring_len,
            hop: hop_ns,
            service,
            idle,
            state,
            pending: vec![0; ring_len],
            scheduled: None,
            epoch: 0,
        }
    }

    pub fn ring_len(&self) -> usize {
        self.ring_len
    }

    pub fn pending(&self, node: usize) -> usize {
        self.pending[node]
    }

    pub fn holder(&self) -> Option<usize> {
        match self.state {
            TokenState::Held { node } => Some(node),
            _ => None,
        }
    }

    fn arrival(&self, node: usize, not_before: f64) -> Option<f64> {
        match self.state {
            TokenState::Moving { node: from, at, .. } => Some(ct_grant(self.ring_len, self.hop, from, at, node, not_before)),
            TokenState::Parked { node: from } => {
                let d = (node + self.ring_len - from) % self.ring_len;
                Some(not_before + d as f64 * self.hop)
            }
            TokenState::Held { .. } => None,
        }
    }

    fn new_grant(&mut self, node: usize, at: f64) -> Grant {
        self.epoch += 1;
        let grant = Grant {
            node,
            at,
            epoch: self.epoch,
        };
        self.scheduled = Some(grant);
        grant
    }

    /// Registers one more packet waiting at `node`. Returns a grant to
    /// schedule when it supersedes the current one.
    pub fn request(&mut self, node: usize, now: f64) -> Option<Grant> {
        self.pending[node] += 1;
        if let TokenState::Parked { node: from } = self.state {
            self.state = TokenState::Moving {
                node: from,
                at: now,
                since: now,
            };
        }
        let at = self.arrival(node, now)?;
        match self.scheduled {
            Some(g) if g.at <= at => None,
            _ => Some(self.new_grant(node, at)),
        }
    }

    /// Token reaches `grant.node`. Returns how many packets the holder may
    /// send together with the circulation segment that just ended, or `None`
    /// for a superseded grant.
    pub fn on_arrival(&mut self, grant: Grant, now: f64) -> Option<(usize, Option<TokenSegment>)> {
        if self.scheduled.map(|g| g.epoch) != Some(grant.epoch) {
            return None;
        }
        self.scheduled = None;
        let segment = match self.state {
            TokenState::Moving { since, .. } if now > since => Some(TokenSegment {
                start: since,
                end: now,
                hops: ((now - since) / self.hop).round() as u64,
            }),
            _ => None,
        };
        self.state = TokenState::Held { node: grant.node };
        let waiting = self.pending[grant.node];
        debug_assert!(waiting > 0);
        let count = match self.service {
            CtService::Exhaustive => waiting,
            CtService::OnePacket => 1,
        };
        Some((count, segment))
    }

    /// Holder `node` finished sending `served` packets at `now`.
    pub fn release(&mut self, node: usize, served: usize, now: f64) -> Option<Grant> {
        debug_assert_eq!(self.holder(), Some(node));
        self.pending[node] -= served;
        let next = (node + 1) % self.ring_len;
        self.state = TokenState::Moving {
            node: next,
            at: now + self.hop,
            since: now,
        };
        let best = (0..self.ring_len)
            .filter(|&n| self.pending[n] > 0)
            .filter_map(|n| self.arrival(n, now).map(|t| (t, n)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((at, n)) => Some(self.new_grant(n, at)),
            None => {
                if self.idle == IdleToken::Park {
                    self.state = TokenState::Parked { node };
                }
                None
            }
        }
    }

    /// Closes the open circulation segment at `end` (end of simulation).
    pub fn finish(&mut self, end: f64) -> Option<TokenSegment> {
        match self.state {
            TokenState::Moving { since, .. } if end > since => {
                self.state = TokenState::Moving {
                    node: 0,
                    at: end,
                    since: end,
                };
                Some(TokenSegment {
                    start: since,
                    end,
                    hops: ((end - since) / self.hop).floor() as u64,
                })
            }
            _ => None,
        }
    }
}

/// Grant time for token order `to` under ID-MAC.
pub fn id_grant(to: usize, ready: f64, channel_idle: f64, token_arrival: Option<f64>) -> Option<f64> {
    if to == 0 {
        Some(ready.max(channel_idle))
    } else {
        token_arrival.map(|t| ready.max(t).max(channel_idle))
    }
}

/// Per-bundle ID-MAC token chain. `holders[o]` is the node entitled to
/// transmit at order `o`.
#[derive(Debug, Clone)]
pub struct TokenChain {
    holders: Vec<usize>,
    current: usize,
    token_at: Option<f64>,
    ready: Vec<Option<f64>>,
    granted: Vec<bool>,
    seen: Vec<usize>,
}

impl TokenChain {
    /// Order 0 becomes entitled at `start` (the channel is idle from then on).
    pub fn new(holders: Vec<usize>, start: f64) -> Self {
        let n = holders.len();
        TokenChain {
            holders,
            current: 0,
            token_at: Some(start),
            ready: vec![None; n],
            granted: vec![false; n],
            seen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.holders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holders.is_empty()
    }

    /// Whether the holder of `order` must pass a token on afterwards.
    pub fn forwards(&self, order: usize) -> bool {
        order + 1 < self.holders.len()
    }

    /// Token orders carried by TP packets so far.
    pub fn observed(&self) -> &[usize] {
        &self.seen
    }

    fn try_grant(&mut self) -> Option<(usize, f64)> {
        let order = self.current;
        let ready = self.ready.get(order).copied().flatten()?;
        let token = self.token_at?;
        if self.granted[order] {
            return None;
        }
        self.granted[order] = true;
        Some((order, ready.max(token)))
    }

    /// `node` has its packet for `order` ready at `at`.
    pub fn mark_ready(&mut self, order: usize, node: usize, at: f64) -> Result<Option<(usize, f64)>, MacError> {
        let owner = *self.holders.get(order).ok_or(MacError::UnexpectedToken {
            order,
            len: self.holders.len(),
        })?;
        if owner != node {
            return Err(MacError::WrongHolder { order, node, owner });
        }
        self.ready[order] = Some(at);
        Ok(if order == self.current { self.try_grant() } else { None })
    }

    /// `TP{order}` finished arriving at `at`.
    pub fn token_arrived(&mut self, order: usize, at: f64) -> Result<Option<(usize, f64)>, MacError> {
        if order >= self.holders.len() {
            return Err(MacError::UnexpectedToken {
                order,
                len: self.holders.len(),
            });
        }
        if order != self.current + 1 {
            return Err(MacError::OutOfSequence {
                order,
                expected: self.current + 1,
            });
        }
        self.seen.push(order);
        self.current = order;
        self.token_at = Some(at);
        Ok(self.try_grant())
    }

    pub fn is_complete(&self) -> bool {
        self.current + 1 >= self.holders.len() && self.granted.last().copied().unwrap_or(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::BitWidths;
    use approx::assert_relative_eq;

    #[test]
    fn durations() {
        let w = BitWidths::new(2, 16, 8);
        assert_relative_eq!(transmit_duration(&Packet::Tp { to: 1 }, &w, 12.0), 11.0 / 12.0);
        let w12 = BitWidths::new(4, 9, 9); // TP = 3 + 9 = 12 bits
        assert_relative_eq!(transmit_duration(&Packet::Tp { to: 1 }, &w12, 12.0), 1.0);
    }

    #[test]
    fn channel_rejects_overlap() {
        let mut ch = Channel::new(12.0);
        assert_eq!(ch.occupy(1, 0.0, 2.0), Ok(2.0));
        assert!(matches!(ch.occupy(2, 1.5, 1.0), Err(MacError::Collision { .. })));
        assert_eq!(ch.occupy(2, 2.0, 1.0), Ok(3.0));
    }

    #[test]
    fn ct_grant_after_two_hops() {
        // ring [CU, QC0, QC1], token at CU at t=0, QC1 pending
        assert_eq!(ct_grant(3, 1.0, 0, 0.0, 2, 0.0), 2.0);
        // holder itself: zero delay
        assert_eq!(ct_grant(3, 1.0, 2, 5.0, 2, 5.0), 5.0);
        // ready later: next lap
        assert_eq!(ct_grant(3, 1.0, 0, 0.0, 2, 2.5), 5.0);
        assert_eq!(ct_grant(3, 1.0, 0, 0.0, 2, 5.0), 5.0);
        // arrival coincides with readiness after many laps
        let first = 1.0 + 4.0 / 3.0;
        assert_eq!(ct_grant(3, 1.0, 1, first, 1, 25.0 + 4.0 / 3.0), first + 24.0);
    }

    #[test]
    fn arbiter_grants_in_ring_order() {
        let mut tok = CirculatingToken::new(3, 1.0, CtService::Exhaustive, IdleToken::Circulate);
        let g = tok.request(2, 0.0).unwrap();
        assert_eq!((g.node, g.at), (2, 2.0));
        // QC0 (node 1) becomes pending at 0.5: token reaches it at 1.0 first
        let g1 = tok.request(1, 0.5).unwrap();
        assert_eq!((g1.node, g1.at), (1, 1.0));
        assert!(tok.on_arrival(g, 2.0).is_none(), "superseded grant");
        let (count, seg) = tok.on_arrival(g1, 1.0).unwrap();
        assert_eq!(count, 1);
        assert_eq!(seg, Some(TokenSegment { start: 0.0, end: 1.0, hops: 1 }));
        let g2 = tok.release(1, 1, 1.5).unwrap();
        assert_eq!((g2.node, g2.at), (2, 2.5));
    }

    #[test]
    fn exhaustive_versus_one_packet() {
        for (service, expect) in [(CtService::Exhaustive, 3), (CtService::OnePacket, 1)] {
            let mut tok = CirculatingToken::new(4, 1.0, service, IdleToken::Circulate);
            let g = tok.request(0, 0.0).unwrap();
            tok.request(0, 0.0);
            tok.request(0, 0.0);
            assert_eq!(g.at, 0.0);
            let (count, _) = tok.on_arrival(g, 0.0).unwrap();
            assert_eq!(count, expect);
            let next = tok.release(0, count, 3.0);
            if expect == 1 {
                // remaining packets wait a full lap
                assert_eq!(next.unwrap().at, 7.0);
            } else {
                assert!(next.is_none());
            }
        }
    }

    #[test]
    fn parked_token_moves_on_demand() {
        let mut tok = CirculatingToken::new(3, 1.0, CtService::Exhaustive, IdleToken::Park);
        let g = tok.request(2, 10.0).unwrap();
        assert_eq!(g.at, 12.0);
        let (_, seg) = tok.on_arrival(g, 12.0).unwrap();
        assert_eq!(seg.unwrap().hops, 2);
        assert!(tok.release(2, 1, 13.0).is_none());
        // parked at node 2: immediate grant for node 2 later on
        let g = tok.request(2, 20.0).unwrap();
        assert_eq!(g.at, 20.0);
    }

    #[test]
    fn circulating_token_finish_reports_idle_time() {
        let mut tok = CirculatingToken::new(5, 1.0, CtService::Exhaustive, IdleToken::Circulate);
        let seg = tok.finish(10.0).unwrap();
        assert_eq!(seg, TokenSegment { start: 0.0, end: 10.0, hops: 10 });
    }

    #[test]
    fn chain_waits_for_token_regardless_of_readiness() {
        let mut chain = TokenChain::new(vec![1, 2], 0.0);
        // order 1 is ready first but must wait for TP{1}
        assert_eq!(chain.mark_ready(1, 2, 5.0), Ok(None));
        assert_eq!(chain.mark_ready(0, 1, 10.0), Ok(Some((0, 10.0))));
        assert!(!chain.forwards(1));
        assert!(chain.forwards(0));
        assert_eq!(chain.token_arrived(1, 12.0), Ok(Some((1, 12.0))));
        assert_eq!(chain.observed(), &[1]);
        assert!(chain.is_complete());
    }

    #[test]
    fn chain_faults_on_bad_tokens() {
        let mut chain = TokenChain::new(vec![1, 2], 0.0);
        assert_eq!(chain.token_arrived(2, 1.0), Err(MacError::UnexpectedToken { order: 2, len: 2 }));
        assert_eq!(
            chain.mark_ready(0, 2, 1.0),
            Err(MacError::WrongHolder { order: 0, node: 2, owner: 1 })
        );
        let mut chain = TokenChain::new(vec![1, 2, 3], 0.0);
        assert_eq!(chain.token_arrived(2, 1.0), Err(MacError::OutOfSequence { order: 2, expected: 1 }));
    }

    #[test]
    fn id_grant_rules() {
        assert_eq!(id_grant(0, 5.0, 3.0, None), Some(5.0));
        assert_eq!(id_grant(0, 5.0, 7.0, None), Some(7.0));
        assert_eq!(id_grant(1, 5.0, 0.0, None), None);
        assert_eq!(id_grant(1, 5.0, 0.0, Some(9.0)), Some(9.0));
    }
}
