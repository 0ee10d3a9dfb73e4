//! Simulated broadcast network with random per-packet delays, timestamp
//! based loss and store-and-forward relaying.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ConnectivityMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("delay bounds must satisfy 0 <= min <= max, got [{0}, {1}]")]
    DelayBounds(f64, f64),
    #[error("drop threshold must be non-negative")]
    Threshold,
    #[error("agent index {0} out of range")]
    Agent(usize),
    #[error("send time {0} precedes an earlier delivery round at {1}")]
    TimeReversal(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub delay_min: f64,
    pub delay_max: f64,
    /// Per-hop drop threshold [s].
    pub drop_threshold: f64,
    pub seed: u64,
}

impl ChannelModel {
    /// Delays uniform on `[T, 6T]`, every such delay admissible.
    pub fn for_sample_time(t: f64, seed: u64) -> Self {
        Self {
            delay_min: t,
            delay_max: 6.0 * t,
            drop_threshold: 6.0 * t,
            seed,
        }
    }

    /// Zero delay and no loss.
    pub fn ideal(seed: u64) -> Self {
        Self {
            delay_min: 0.0,
            delay_max: 0.0,
            drop_threshold: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.delay_min >= 0.0 && self.delay_max >= self.delay_min && self.delay_max.is_finite()) {
            return Err(ChannelError::DelayBounds(self.delay_min, self.delay_max));
        }
        if !(self.drop_threshold >= 0.0) {
            return Err(ChannelError::Threshold);
        }
        Ok(())
    }
}

/// Worst-case delay accumulated over `hops` links.
pub fn hop_delay_bound(hops: usize, per_hop: f64) -> f64 {
    hops as f64 * per_hop
}

#[derive(Debug, Clone, PartialEq)]
pub struct InFlightPacket<P> {
    pub packet: P,
    pub source: usize,
    pub destination: usize,
    /// Agent that produced the payload.
    pub origin: usize,
    /// Time the payload left its origin.
    pub origin_time: f64,
    pub send_time: f64,
    pub delivery_time: f64,
    /// Links traversed on arrival, 1 for a direct packet.
    pub hops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery<P> {
    pub packet: P,
    pub source: usize,
    pub destination: usize,
    pub origin: usize,
    pub origin_time: f64,
    pub hops: usize,
    /// Delay on the last link.
    pub link_delay: f64,
    /// Age since the origin sent it.
    pub age: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeStats {
    pub sent: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub delay_sum: f64,
    pub delay_max: f64,
}

impl EdgeStats {
    pub fn mean_delay(&self) -> f64 {
        if self.delivered == 0 {
            0.0
        } else {
            self.delay_sum / self.delivered as f64
        }
    }
}

/// Event queue ordered by delivery time with FIFO tie-break.
#[derive(Debug, Clone)]
pub struct Network<P> {
    model: ChannelModel,
    agents: usize,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), InFlightPacket<P>>,
    seq: u64,
    last_delivery: f64,
    stats: BTreeMap<(usize, usize), EdgeStats>,
}

impl<P: Clone> Network<P> {
    pub fn new(model: ChannelModel, agents: usize) -> Result<Self, ChannelError> {
        model.validate()?;
        Ok(Self {
            model,
            agents,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            queue: BTreeMap::new(),
            seq: 0,
            last_delivery: f64::NEG_INFINITY,
            stats: BTreeMap::new(),
        })
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    /// One packet per out-edge of `source` in `gamma`.
    pub fn send(&mut self, packet: &P, source: usize, gamma: &ConnectivityMatrix, t_now: f64) -> Result<Vec<InFlightPacket<P>>, ChannelError> {
        if source >= self.agents || source >= gamma.len() {
            return Err(ChannelError::Agent(source));
        }
        gamma
            .out_neighbors(source)
            .into_iter()
            .map(|dst| self.send_to(packet, source, dst, source, t_now, 1, t_now))
            .collect()
    }

    /// Sends on a single link; relays pass the payload's origin, origin
    /// time and hop count after this link.
    #[allow(clippy::too_many_arguments)]
    pub fn send_to(
        &mut self,
        packet: &P,
        source: usize,
        destination: usize,
        origin: usize,
        origin_time: f64,
        hops: usize,
        t_now: f64,
    ) -> Result<InFlightPacket<P>, ChannelError> {
        for a in [source, destination, origin] {
            if a >= self.agents {
                return Err(ChannelError::Agent(a));
            }
        }
        if t_now < self.last_delivery {
            return Err(ChannelError::TimeReversal(t_now, self.last_delivery));
        }
        let delay = self.rng.random_range(self.model.delay_min..=self.model.delay_max);
        let p = InFlightPacket {
            packet: packet.clone(),
            source,
            destination,
            origin,
            origin_time,
            send_time: t_now,
            delivery_time: t_now + delay,
            hops: hops.max(1),
        };
        self.queue.insert((p.delivery_time.to_bits(), self.seq), p.clone());
        self.seq += 1;
        self.stats.entry((source, destination)).or_default().sent += 1;
        Ok(p)
    }

    /// Pops every packet due at `t_now`. Packets older than the hop-scaled
    /// threshold are dropped and counted.
    pub fn deliver(&mut self, t_now: f64) -> Vec<Delivery<P>> {
        self.last_delivery = self.last_delivery.max(t_now);
        let mut out = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.get().delivery_time > t_now {
                break;
            }
            let p = entry.remove();
            let link_delay = p.delivery_time - p.send_time;
            let age = p.delivery_time - p.origin_time;
            let st = self.stats.entry((p.source, p.destination)).or_default();
            if age > hop_delay_bound(p.hops, self.model.drop_threshold) {
                st.dropped += 1;
                continue;
            }
            st.delivered += 1;
            st.delay_sum += link_delay;
            st.delay_max = st.delay_max.max(link_delay);
            out.push(Delivery {
                packet: p.packet,
                source: p.source,
                destination: p.destination,
                origin: p.origin,
                origin_time: p.origin_time,
                hops: p.hops,
                link_delay,
                age,
            });
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn edge_stats(&self) -> &BTreeMap<(usize, usize), EdgeStats> {
        &self.stats
    }

    pub fn totals(&self) -> EdgeStats {
        self.stats.values().fold(EdgeStats::default(), |mut a, s| {
            a.sent += s.sent;
            a.delivered += s.delivered;
            a.dropped += s.dropped;
            a.delay_sum += s.delay_sum;
            a.delay_max = a.delay_max.max(s.delay_max);
            a
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fleet() -> ConnectivityMatrix {
        let links = [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1), (1, 3), (2, 4)];
        ConnectivityMatrix::from_links(5, &links).unwrap()
    }

    fn fixed(delay: f64, threshold: f64) -> ChannelModel {
        ChannelModel {
            delay_min: delay,
            delay_max: delay,
            drop_threshold: threshold,
            seed: 1,
        }
    }

    #[test]
    fn sink_node_sends_nothing() {
        let mut net = Network::new(ChannelModel::for_sample_time(0.1, 3), 5).unwrap();
        assert!(net.send(&(), 3, &fleet(), 0.0).unwrap().is_empty());
        assert!(net.deliver(10.0).is_empty());
    }

    #[test]
    fn send_reaches_every_out_neighbor() {
        let mut net = Network::new(ChannelModel::for_sample_time(0.1, 3), 5).unwrap();
        let mut dst: Vec<usize> = net.send(&7u8, 2, &fleet(), 0.0).unwrap().iter().map(|p| p.destination).collect();
        dst.sort();
        assert_eq!(dst, vec![0, 1, 4]);
    }

    #[test]
    fn delay_distribution_mean() {
        let mut net = Network::new(ChannelModel::for_sample_time(0.1, 42), 2).unwrap();
        let delays: Vec<f64> = (0..1000)
            .map(|_| {
                let p = net.send_to(&(), 0, 1, 0, 0.0, 1, 0.0).unwrap();
                p.delivery_time - p.send_time
            })
            .collect();
        assert!(delays.iter().all(|d| (0.1..=0.6).contains(d)));
        let mean = delays.iter().sum::<f64>() / 1000.0;
        assert!((0.33..=0.37).contains(&mean), "mean {mean}");
    }

    #[test]
    fn fixed_delay_delivery_time() {
        let mut net = Network::new(fixed(0.2, 0.6), 2).unwrap();
        net.send_to(&1u8, 0, 1, 0, 1.0, 1, 1.0).unwrap();
        assert!(net.deliver(1.19).is_empty());
        let d = net.deliver(1.2);
        assert_eq!(d.len(), 1);
        assert!((d[0].link_delay - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_threshold_drops_everything() {
        let mut net = Network::new(ChannelModel { drop_threshold: 0.0, ..ChannelModel::for_sample_time(0.1, 9) }, 5).unwrap();
        for k in 0..20 {
            net.send(&(), k % 3, &fleet(), k as f64 * 0.1).unwrap();
        }
        assert!(net.deliver(100.0).is_empty());
        let t = net.totals();
        assert_eq!(t.dropped, t.sent);
    }

    #[test]
    fn ideal_channel_delivers_immediately() {
        let mut net = Network::new(ChannelModel::ideal(0), 5).unwrap();
        net.send(&(), 0, &fleet(), 0.5).unwrap();
        assert_eq!(net.deliver(0.5).len(), 2);
    }

    #[test]
    fn relayed_packets_get_hop_scaled_budget() {
        // 0.5 s per link, 0.6 s per hop: the second hop arrives 1.0 s after
        // the origin, within 2 * 0.6.
        let mut net = Network::new(fixed(0.5, 0.6), 3).unwrap();
        net.send_to(&(), 0, 1, 0, 0.0, 1, 0.0).unwrap();
        let first = net.deliver(0.5);
        assert_eq!(first.len(), 1);
        net.send_to(&(), 1, 2, first[0].origin, first[0].origin_time, 2, 0.5).unwrap();
        let second = net.deliver(1.0);
        assert_eq!(second.len(), 1);
        assert_eq!(second[0].hops, 2);
        assert!((second[0].age - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hop_bound_is_linear() {
        assert_eq!(hop_delay_bound(1, 0.125), 0.125);
        assert_eq!(hop_delay_bound(2, 0.125), 0.25);
        assert_eq!(hop_delay_bound(3, 0.125), 0.375);
    }

    #[test]
    fn invalid_channels_rejected() {
        assert!(Network::<()>::new(fixed(-0.1, 1.0), 2).is_err());
        assert!(Network::<()>::new(ChannelModel { delay_min: 0.5, delay_max: 0.1, drop_threshold: 1.0, seed: 0 }, 2).is_err());
        assert!(Network::<()>::new(fixed(0.1, f64::NAN), 2).is_err());
        let mut net = Network::new(fixed(0.1, 1.0), 2).unwrap();
        assert_eq!(net.send_to(&(), 0, 5, 0, 0.0, 1, 0.0).unwrap_err(), ChannelError::Agent(5));
        net.deliver(1.0);
        assert!(net.send_to(&(), 0, 1, 0, 0.0, 1, 0.5).is_err());
    }

    fn schedule(seed: u64, sends: &[(usize, u8)]) -> Vec<(usize, usize, u64)> {
        let mut net = Network::new(ChannelModel::for_sample_time(0.1, seed), 5).unwrap();
        let mut log = Vec::new();
        for (k, &(src, tick)) in sends.iter().enumerate() {
            let t = k as f64 * 0.1;
            net.send(&tick, src, &fleet(), t).unwrap();
            log.extend(net.deliver(t).into_iter().map(|d| (d.source, d.destination, d.link_delay.to_bits())));
        }
        log
    }

    proptest! {
        #[test]
        fn conservation_holds(seed in any::<u64>(), sends in prop::collection::vec((0usize..5, 0usize..3), 1..60), threshold in 0.0f64..0.7) {
            let mut net = Network::new(ChannelModel { drop_threshold: threshold, ..ChannelModel::for_sample_time(0.1, seed) }, 5).unwrap();
            for (k, &(src, wait)) in sends.iter().enumerate() {
                let t = k as f64 * 0.1;
                net.send(&(), src, &fleet(), t).unwrap();
                if wait > 0 {
                    for d in net.deliver(t) {
                        prop_assert!(d.link_delay <= threshold && d.link_delay >= 0.1 - 1e-12);
                    }
                }
                let s = net.totals();
                prop_assert_eq!(s.sent, s.delivered + s.dropped + net.in_flight());
            }
        }

        #[test]
        fn deterministic_given_seed(seed in any::<u64>(), sends in prop::collection::vec((0usize..5, any::<u8>()), 1..40)) {
            prop_assert_eq!(schedule(seed, &sends), schedule(seed, &sends));
        }

        #[test]
        fn deliveries_come_out_in_time_order(seed in any::<u64>(), n in 1usize..50) {
            let mut net = Network::new(ChannelModel::for_sample_time(0.1, seed), 2).unwrap();
            let sent: Vec<f64> = (0..n).map(|_| net.send_to(&(), 0, 1, 0, 0.0, 1, 0.0).unwrap().delivery_time).collect();
            let mut got = Vec::new();
            let mut sorted = sent.clone();
            sorted.sort_by(f64::total_cmp);
            for d in net.deliver(1.0) {
                got.push(d.link_delay);
            }
            prop_assert_eq!(got, sorted);
        }
    }
}
