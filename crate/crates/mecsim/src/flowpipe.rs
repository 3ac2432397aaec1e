//! Flow export and collection: the observation point at the ingress and
//! the collector that turns mirrored packets into flow records and
//! per-window feature vectors.
//!
//! A flow is the set of packets sharing the classic 5-tuple key. Live
//! flows are sealed (exported) when they go idle for `inactive_timeout`,
//! when they have been alive for `active_timeout`, or when the run ends.
//! Only the key, counts and timestamps survive into a record, never the
//! payload: everything downstream of this module is payload-blind.
//!
//! Independently of record keeping, every observed packet feeds the
//! accumulator of the current detector window `[start, end)`. At each
//! detector tick the accumulator drains into one [`FeatureVector`] per
//! active source address, ordered by address.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use crate::engine::SimTime;
use crate::netmodel::{DeviceId, Packet, Protocol};

/// Serialized size charged per exported record in the ratio report,
/// approximating a NetFlow v5 record.
pub const EXPORTED_RECORD_BYTES: u64 = 48;

/// Order of the numeric features produced by [`FeatureVector::numeric`].
pub const FEATURE_NAMES: [&str; 6] = [
    "flow_count",
    "total_packets",
    "total_bytes",
    "mean_packet_size",
    "distinct_dst_ports",
    "fraction_udp",
];

/// The 5-tuple defining flow membership.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FlowKey {
    pub fn of(packet: &Packet) -> FlowKey {
        FlowKey {
            src_ip: packet.src_ip,
            dst_ip: packet.dst_ip,
            src_port: packet.src_port,
            dst_port: packet.dst_port,
            protocol: packet.protocol,
        }
    }
}

/// One exported flow. `src_device` is a simulator-internal back-reference
/// and is never part of the feature vectors derived from flows.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub src_device: DeviceId,
    pub first_seen: SimTime,
    pub last_seen: SimTime,
    pub packets: u64,
    pub bytes: u64,
}

impl FlowRecord {
    /// One line of the flow dump. Field order is stable; tests and the
    /// offline verdict oracle parse these lines back.
    pub fn render_line(&self) -> String {
        format!(
            "src={} sport={} dst={} dport={} proto={} dev={} first={} last={} pkts={} bytes={}",
            self.key.src_ip,
            self.key.src_port,
            self.key.dst_ip,
            self.key.dst_port,
            self.key.protocol.as_str(),
            self.src_device,
            self.first_seen.as_micros(),
            self.last_seen.as_micros(),
            self.packets,
            self.bytes,
        )
    }

    pub fn parse_line(line: &str) -> Result<FlowRecord, String> {
        let mut fields = BTreeMap::new();
        for token in line.split_ascii_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| format!("malformed token {token:?}"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or(format!("missing field {k}"));
        let parse_u64 = |k: &str| get(k)?.parse::<u64>().map_err(|e| format!("{k}: {e}"));
        let parse_u16 = |k: &str| get(k)?.parse::<u16>().map_err(|e| format!("{k}: {e}"));
        Ok(FlowRecord {
            key: FlowKey {
                src_ip: get("src")?.parse().map_err(|e| format!("src: {e}"))?,
                dst_ip: get("dst")?.parse().map_err(|e| format!("dst: {e}"))?,
                src_port: parse_u16("sport")?,
                dst_port: parse_u16("dport")?,
                protocol: Protocol::parse(get("proto")?).ok_or("bad proto")?,
            },
            src_device: DeviceId(
                get("dev")?.parse::<u32>().map_err(|e| format!("dev: {e}"))?,
            ),
            first_seen: SimTime::from_micros(parse_u64("first")?),
            last_seen: SimTime::from_micros(parse_u64("last")?),
            packets: parse_u64("pkts")?,
            bytes: parse_u64("bytes")?,
        })
    }
}

/// Per-source aggregates over one detector window `[start, end)`.
#[derive(Clone, PartialEq, Debug)]
pub struct FeatureVector {
    pub window_start: SimTime,
    pub window_end: SimTime,
    pub src_ip: Ipv4Addr,
    pub src_device: DeviceId,
    pub flow_count: u64,
    pub total_packets: u64,
    pub total_bytes: u64,
    pub mean_packet_size: f64,
    pub distinct_dst_ports: u64,
    pub fraction_udp: f64,
    /// The ports themselves, kept for watch-port rules; not a numeric
    /// feature.
    pub dst_ports: BTreeSet<u16>,
}

impl FeatureVector {
    /// The six numeric features in [`FEATURE_NAMES`] order.
    pub fn numeric(&self) -> [f64; 6] {
        [
            self.flow_count as f64,
            self.total_packets as f64,
            self.total_bytes as f64,
            self.mean_packet_size,
            self.distinct_dst_ports as f64,
            self.fraction_udp,
        ]
    }

    /// One line of the feature dump consumed by the offline trainer.
    pub fn render_line(&self) -> String {
        format!(
            "win_start={} win_end={} src={} dev={} flows={} pkts={} bytes={} mean={} ports={} udp={}",
            self.window_start.as_micros(),
            self.window_end.as_micros(),
            self.src_ip,
            self.src_device,
            self.flow_count,
            self.total_packets,
            self.total_bytes,
            self.mean_packet_size,
            self.distinct_dst_ports,
            self.fraction_udp,
        )
    }

    /// Parse a feature-dump line back into the six numeric features.
    pub fn parse_numeric(line: &str) -> Result<[f64; 6], String> {
        let mut fields = BTreeMap::new();
        for token in line.split_ascii_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| format!("malformed token {token:?}"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<f64, String> {
            fields
                .get(k)
                .ok_or(format!("missing field {k}"))?
                .parse::<f64>()
                .map_err(|e| format!("{k}: {e}"))
        };
        Ok([
            get("flows")?,
            get("pkts")?,
            get("bytes")?,
            get("mean")?,
            get("ports")?,
            get("udp")?,
        ])
    }
}

#[derive(Default)]
struct WindowAccum {
    device: DeviceId,
    packets: u64,
    bytes: u64,
    udp_packets: u64,
    dst_ports: BTreeSet<u16>,
    flow_keys: BTreeSet<FlowKey>,
}

/// Exported ratios relative to the raw observed traffic.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct RatioReport {
    pub packet_ratio: f64,
    pub byte_ratio: f64,
}

/// The flow table plus the current detector-window accumulator.
pub struct FlowTable {
    active_timeout: SimTime,
    inactive_timeout: SimTime,
    live: BTreeMap<FlowKey, FlowRecord>,
    sealed: Vec<FlowRecord>,
    observed_packets: u64,
    observed_bytes: u64,
    window: BTreeMap<Ipv4Addr, WindowAccum>,
}

impl FlowTable {
    pub fn new(active_timeout: SimTime, inactive_timeout: SimTime) -> Self {
        FlowTable {
            active_timeout,
            inactive_timeout,
            live: BTreeMap::new(),
            sealed: Vec::new(),
            observed_packets: 0,
            observed_bytes: 0,
            window: BTreeMap::new(),
        }
    }

    /// Mirror one delivered packet into the flow table and the current
    /// window accumulator. Ingress-dropped packets must not reach here.
    pub fn observe(&mut self, packet: &Packet) {
        let key = FlowKey::of(packet);
        self.observed_packets += 1;
        self.observed_bytes += packet.length as u64;

        let record = self.live.entry(key).or_insert_with(|| FlowRecord {
            key,
            src_device: packet.src_device,
            first_seen: packet.ts,
            last_seen: packet.ts,
            packets: 0,
            bytes: 0,
        });
        record.packets += 1;
        record.bytes += packet.length as u64;
        record.last_seen = packet.ts;

        let accum = self.window.entry(packet.src_ip).or_default();
        accum.device = packet.src_device;
        accum.packets += 1;
        accum.bytes += packet.length as u64;
        if packet.protocol == Protocol::Udp {
            accum.udp_packets += 1;
        }
        accum.dst_ports.insert(packet.dst_port);
        accum.flow_keys.insert(key);
    }

    /// Seal flows idle for `inactive_timeout` or alive for
    /// `active_timeout`, and return the newly exported records. A later
    /// packet on an actively-expired key simply starts a fresh record.
    pub fn expire_flows(&mut self, now: SimTime) -> Vec<FlowRecord> {
        let inactive = self.inactive_timeout;
        let active = self.active_timeout;
        let expired: Vec<FlowKey> = self
            .live
            .values()
            .filter(|r| {
                now.saturating_sub(r.last_seen) >= inactive
                    || now.saturating_sub(r.first_seen) >= active
            })
            .map(|r| r.key)
            .collect();
        let mut out = Vec::with_capacity(expired.len());
        for key in expired {
            let record = self.live.remove(&key).expect("expired key vanished");
            out.push(record.clone());
            self.sealed.push(record);
        }
        out
    }

    /// Seal every remaining live flow (end of run).
    pub fn flush_all(&mut self) -> usize {
        let n = self.live.len();
        // BTreeMap drains in key order, keeping the export sequence
        // deterministic.
        let live = std::mem::take(&mut self.live);
        self.sealed.extend(live.into_values());
        n
    }

    /// Seal the live flows of one source address immediately. Used when a
    /// device is blocked at ingress: its collected state is flushed, then
    /// nothing more is observed.
    pub fn flush_src(&mut self, src_ip: Ipv4Addr) -> usize {
        let keys: Vec<FlowKey> = self
            .live
            .range(
                FlowKey {
                    src_ip,
                    dst_ip: Ipv4Addr::new(0, 0, 0, 0),
                    src_port: 0,
                    dst_port: 0,
                    protocol: Protocol::Tcp,
                }..,
            )
            .take_while(|(k, _)| k.src_ip == src_ip)
            .map(|(k, _)| *k)
            .collect();
        for key in &keys {
            let record = self.live.remove(key).expect("flush key vanished");
            self.sealed.push(record);
        }
        keys.len()
    }

    /// Drain the window accumulator into one feature vector per source
    /// address active in `[window_start, window_end)`, ordered by address.
    pub fn build_features(
        &mut self,
        window_start: SimTime,
        window_end: SimTime,
    ) -> Vec<FeatureVector> {
        let window = std::mem::take(&mut self.window);
        window
            .into_iter()
            .map(|(src_ip, accum)| FeatureVector {
                window_start,
                window_end,
                src_ip,
                src_device: accum.device,
                flow_count: accum.flow_keys.len() as u64,
                total_packets: accum.packets,
                total_bytes: accum.bytes,
                mean_packet_size: accum.bytes as f64 / accum.packets as f64,
                distinct_dst_ports: accum.dst_ports.len() as u64,
                fraction_udp: accum.udp_packets as f64 / accum.packets as f64,
                dst_ports: accum.dst_ports,
            })
            .collect()
    }

    pub fn sealed(&self) -> &[FlowRecord] {
        &self.sealed
    }

    pub fn live_len(&self) -> usize {
        self.live.len()
    }

    pub fn live_records(&self) -> impl Iterator<Item = &FlowRecord> {
        self.live.values()
    }

    pub fn observed_packets(&self) -> u64 {
        self.observed_packets
    }

    pub fn observed_bytes(&self) -> u64 {
        self.observed_bytes
    }

    /// Exported-size ratios, meaningful once the run has finished and all
    /// flows are sealed.
    pub fn ratio_report(&self) -> RatioReport {
        let records = self.sealed.len() as u64;
        RatioReport {
            packet_ratio: ratio(records, self.observed_packets),
            byte_ratio: ratio(records * EXPORTED_RECORD_BYTES, self.observed_bytes),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
