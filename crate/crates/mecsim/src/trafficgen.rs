//! Packet sources: legitimate device workloads and the attack machinery
//! (constant-rate floods plus pre-attack command-and-control beacons).
//!
//! Legitimate traffic is a per-device Poisson process; flood traffic is a
//! fixed-rate packet train; beacons fire on a rigid period before the
//! flood begins. All randomness comes from the per-device streams of
//! [`crate::engine::RngRegistry`], and the exponential sampler uses a
//! hand-rolled natural log built from elementary IEEE-754 operations so
//! that identical seeds produce bit-identical schedules on every
//! platform, independent of the host libm.

use std::collections::BTreeMap;

use rand_core::RngCore;

use crate::engine::SimTime;
use crate::netmodel::{
    DeviceId, Packet, PayloadTag, Protocol, CNC_IP, SERVICE_IP,
};

/// Sticky flows: a (protocol, destination port) pair keeps one source
/// port for this many packets before rotating to a fresh one.
const FLOW_PACKETS_MIN: u64 = 6;
const FLOW_PACKETS_MAX: u64 = 24;
const EPHEMERAL_PORT_FIRST: u16 = 49152;

#[derive(Clone, Copy, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LengthDist {
    Constant { value: u16 },
    Uniform { low: u16, high: u16 },
}

#[derive(Clone, Copy, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolMix {
    pub tcp: f64,
    pub udp: f64,
    pub icmp: f64,
}

/// A legitimate service pattern (browsing, streaming, telemetry...).
#[derive(Clone, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub name: String,
    pub packet_rate: f64,
    pub length: LengthDist,
    pub protocol_mix: ProtocolMix,
    pub dst_ports: Vec<u16>,
}

/// One bot cohort's attack plan: optional beacons leading up to a
/// constant-rate flood in `[start, stop)`.
#[derive(Clone, PartialEq, Debug)]
pub struct AttackScript {
    pub start: SimTime,
    pub stop: SimTime,
    pub flood_rate_per_bot: f64,
    pub flood_dst_port: u16,
    pub flood_length: u16,
    /// Whether flood packets count toward the serving VM's crash rule.
    pub crash_payload: bool,
    pub beacon_period: Option<SimTime>,
    pub beacon_lead: SimTime,
    pub beacon_port: u16,
}

#[derive(Debug, PartialEq, thiserror::Error)]
pub enum TrafficError {
    #[error("attack window is empty: start {start} >= stop {stop}")]
    InvalidWindow { start: SimTime, stop: SimTime },
    #[error("packet rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("workload {0:?}: protocol weights must be non-negative and sum to 1")]
    BadProtocolMix(String),
    #[error("workload {0:?}: destination port list must not be empty")]
    NoPorts(String),
    #[error("workload {0:?}: length range is inverted")]
    BadLengthRange(String),
}

pub fn validate_profile(p: &WorkloadProfile) -> Result<(), TrafficError> {
    if !(p.packet_rate > 0.0) {
        return Err(TrafficError::NonPositiveRate(p.packet_rate));
    }
    let m = p.protocol_mix;
    let sum = m.tcp + m.udp + m.icmp;
    if m.tcp < 0.0 || m.udp < 0.0 || m.icmp < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(TrafficError::BadProtocolMix(p.name.clone()));
    }
    if p.dst_ports.is_empty() {
        return Err(TrafficError::NoPorts(p.name.clone()));
    }
    if let LengthDist::Uniform { low, high } = p.length {
        if low > high {
            return Err(TrafficError::BadLengthRange(p.name.clone()));
        }
    }
    Ok(())
}

// --- deterministic elementary math ------------------------------------

/// Natural logarithm from IEEE-754 add/mul/div only, so results are
/// bit-identical everywhere. Decomposes x = m * 2^e with m in [1, 2),
/// then sums the atanh series ln(m) = 2 * (s + s^3/3 + s^5/5 + ...) with
/// s = (m-1)/(m+1), |s| < 1/3. A fixed 28-term sum keeps the error below
/// one ulp over the mantissa range.
pub fn det_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut term = s;
    let mut sum = s;
    for k in 1..28u32 {
        term *= s2;
        sum += term / (2 * k + 1) as f64;
    }
    2.0 * sum + e as f64 * std::f64::consts::LN_2
}

/// Uniform draw in the open interval (0, 1): 53 mantissa bits offset by
/// half an ulp so zero is impossible.
fn u01(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Exponential inter-arrival gap, floored at one microsecond so event
/// order stays strict.
fn exp_gap_micros(rng: &mut impl RngCore, rate: f64) -> u64 {
    let gap_secs = -det_ln(u01(rng)) / rate;
    ((gap_secs * 1e6).round() as u64).max(1)
}

fn pick<T: Copy>(rng: &mut impl RngCore, items: &[T]) -> T {
    items[(rng.next_u64() % items.len() as u64) as usize]
}

fn uniform_u64(rng: &mut impl RngCore, low: u64, high: u64) -> u64 {
    low + rng.next_u64() % (high - low + 1)
}

// --- legitimate workloads ---------------------------------------------

struct FlowSlot {
    src_port: u16,
    remaining: u64,
}

/// Poisson packet source for one legitimate device. Pull-based: the
/// simulator asks for the next packet and schedules its arrival.
pub struct LegitGen {
    device: DeviceId,
    profile: WorkloadProfile,
    rng: rand_chacha::ChaCha8Rng,
    cursor: SimTime,
    next_port: u16,
    slots: BTreeMap<(Protocol, u16), FlowSlot>,
}

impl LegitGen {
    pub fn new(
        device: DeviceId,
        profile: WorkloadProfile,
        start: SimTime,
        rng: rand_chacha::ChaCha8Rng,
    ) -> Result<Self, TrafficError> {
        validate_profile(&profile)?;
        Ok(LegitGen {
            device,
            profile,
            rng,
            cursor: start,
            next_port: EPHEMERAL_PORT_FIRST,
            slots: BTreeMap::new(),
        })
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    /// Produce the next packet; its timestamp strictly increases.
    pub fn next_packet(&mut self) -> Packet {
        let gap = exp_gap_micros(&mut self.rng, self.profile.packet_rate);
        self.cursor = self.cursor + SimTime::from_micros(gap);

        let m = self.profile.protocol_mix;
        let roll = u01(&mut self.rng);
        let protocol = if roll < m.tcp {
            Protocol::Tcp
        } else if roll < m.tcp + m.udp {
            Protocol::Udp
        } else {
            Protocol::Icmp
        };
        let dst_port = pick(&mut self.rng, &self.profile.dst_ports);
        let length = match self.profile.length {
            LengthDist::Constant { value } => value,
            LengthDist::Uniform { low, high } => {
                uniform_u64(&mut self.rng, low as u64, high as u64) as u16
            }
        };

        // Keep packets of one logical exchange on a stable source port
        // so the exporter sees multi-packet flows, not one-packet noise.
        let slot = self.slots.entry((protocol, dst_port)).or_insert(FlowSlot {
            src_port: 0,
            remaining: 0,
        });
        if slot.remaining == 0 {
            slot.src_port = self.next_port;
            self.next_port = self.next_port.checked_add(1).unwrap_or(EPHEMERAL_PORT_FIRST);
            slot.remaining = uniform_u64(&mut self.rng, FLOW_PACKETS_MIN, FLOW_PACKETS_MAX);
        }
        slot.remaining -= 1;

        Packet {
            ts: self.cursor,
            src_device: self.device,
            src_ip: self.device.ip(),
            dst_ip: SERVICE_IP,
            src_port: slot.src_port,
            dst_port,
            protocol,
            length,
            payload_tag: PayloadTag::Normal,
        }
    }
}

// --- attack traffic ----------------------------------------------------

/// Fixed-rate flood from one bot: packet k fires at
/// `start + round(k * 1e6 / rate)` microseconds, all packets sharing one
/// five-tuple and carrying the attack payload tag.
#[derive(Debug)]
pub struct FloodGen {
    device: DeviceId,
    script: AttackScript,
    emitted: u64,
}

impl FloodGen {
    pub fn new(device: DeviceId, script: AttackScript) -> Result<Self, TrafficError> {
        if script.start >= script.stop {
            return Err(TrafficError::InvalidWindow {
                start: script.start,
                stop: script.stop,
            });
        }
        if !(script.flood_rate_per_bot > 0.0) {
            return Err(TrafficError::NonPositiveRate(script.flood_rate_per_bot));
        }
        Ok(FloodGen {
            device,
            script,
            emitted: 0,
        })
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    /// Next flood packet, or None once the window is exhausted.
    pub fn next_packet(&mut self) -> Option<Packet> {
        let offset_micros =
            (self.emitted as f64 * 1e6 / self.script.flood_rate_per_bot).round() as u64;
        let ts = self.script.start + SimTime::from_micros(offset_micros);
        if ts >= self.script.stop {
            return None;
        }
        self.emitted += 1;
        Some(Packet {
            ts,
            src_device: self.device,
            src_ip: self.device.ip(),
            dst_ip: SERVICE_IP,
            src_port: 40000,
            dst_port: self.script.flood_dst_port,
            protocol: Protocol::Udp,
            length: self.script.flood_length,
            payload_tag: PayloadTag::AttackSignature,
        })
    }
}

/// The command-and-control check-ins a bot emits before the flood:
/// exactly `floor(lead / period)` small UDP packets to the C&C endpoint,
/// the first at `start - lead`, then one per period, all before `start`.
pub fn beacon_schedule(device: DeviceId, script: &AttackScript) -> Vec<Packet> {
    let Some(period) = script.beacon_period else {
        return Vec::new();
    };
    if period == SimTime::ZERO || script.beacon_lead == SimTime::ZERO {
        return Vec::new();
    }
    let first = script.start.saturating_sub(script.beacon_lead);
    let count = script.beacon_lead.as_micros() / period.as_micros();
    (0..count)
        .map(|k| {
            let ts = first + SimTime::from_micros(k * period.as_micros());
            debug_assert!(ts < script.start);
            Packet {
                ts,
                src_device: device,
                src_ip: device.ip(),
                dst_ip: CNC_IP,
                src_port: 40001,
                dst_port: script.beacon_port,
                protocol: Protocol::Udp,
                length: 64,
                payload_tag: PayloadTag::CncBeacon,
            }
        })
        .collect()
}
