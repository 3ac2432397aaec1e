//! Deep packet inspection of quarantined traffic.
//!
//! Once a device is rerouted to the inspection VM its packets are checked
//! against a signature set. Per-device counters accumulate matches and a
//! decision rule fires exactly once per device: `Attack` after
//! `attack_match_threshold` matching packets, `Cleared` after
//! `clear_min_packets` inspected with zero matches. Counters live per
//! (VM, device) and are wiped when that VM crashes, modelling lost
//! in-memory state; decisions already announced survive the crash.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::infra::VmId;
use crate::netmodel::{DeviceId, Packet, PayloadTag};

/// A detection rule. All present predicates must hold for a packet to
/// match (conjunction); at least one predicate must be present.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signature {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<PayloadTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ports: Option<BTreeSet<u16>>,
}

impl Signature {
    pub fn matches(&self, p: &Packet) -> bool {
        self.tag.is_none_or(|t| p.payload_tag == t)
            && self
                .dst_ports
                .as_ref()
                .is_none_or(|ports| ports.contains(&p.dst_port))
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DpiDecision {
    Attack,
    Cleared,
    Undecided,
}

impl DpiDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            DpiDecision::Attack => "attack",
            DpiDecision::Cleared => "cleared",
            DpiDecision::Undecided => "undecided",
        }
    }
}

/// The decision announced for one device, with the per-signature match
/// counts that justify it.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DpiVerdict {
    pub device: DeviceId,
    pub decision: DpiDecision,
    pub evidence: Vec<(String, u64)>,
    pub decided_at: SimTime,
    /// Packets of this device inspected on the deciding VM.
    pub inspected: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpiConfig {
    /// Matching packets needed to declare Attack.
    pub attack_match_threshold: u64,
    /// Clean packets needed to declare Cleared.
    pub clear_min_packets: u64,
}

impl Default for DpiConfig {
    fn default() -> Self {
        DpiConfig {
            attack_match_threshold: 3,
            clear_min_packets: 200,
        }
    }
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum DpiError {
    #[error("signature set must not be empty")]
    NoSignatures,
    #[error("signature {0:?} has no predicates")]
    EmptySignature(String),
    #[error("duplicate signature id {0:?}")]
    DuplicateSignature(String),
    #[error("thresholds must be at least 1")]
    ZeroThreshold,
}

#[derive(Default, Debug)]
struct Counters {
    inspected: u64,
    matched: u64,
    by_signature: BTreeMap<String, u64>,
}

/// Signature matching plus per-device decision state.
#[derive(Debug)]
pub struct DpiEngine {
    cfg: DpiConfig,
    signatures: Vec<Signature>,
    counters: BTreeMap<(VmId, DeviceId), Counters>,
    decided: BTreeMap<DeviceId, DpiDecision>,
}

impl DpiEngine {
    pub fn new(cfg: DpiConfig, signatures: Vec<Signature>) -> Result<Self, DpiError> {
        if cfg.attack_match_threshold == 0 || cfg.clear_min_packets == 0 {
            return Err(DpiError::ZeroThreshold);
        }
        if signatures.is_empty() {
            return Err(DpiError::NoSignatures);
        }
        let mut seen = BTreeSet::new();
        for sig in &signatures {
            if sig.tag.is_none() && sig.dst_ports.is_none() {
                return Err(DpiError::EmptySignature(sig.id.clone()));
            }
            if !seen.insert(sig.id.clone()) {
                return Err(DpiError::DuplicateSignature(sig.id.clone()));
            }
        }
        Ok(DpiEngine {
            cfg,
            signatures,
            counters: BTreeMap::new(),
            decided: BTreeMap::new(),
        })
    }

    /// Examine one packet on the given VM. Returns a verdict the first
    /// time a decision rule fires for the packet's device; devices with a
    /// standing decision are not re-inspected.
    pub fn inspect(&mut self, vm: VmId, p: &Packet, now: SimTime) -> Option<DpiVerdict> {
        if self.decided.contains_key(&p.src_device) {
            return None;
        }
        let c = self.counters.entry((vm, p.src_device)).or_default();
        c.inspected += 1;
        let mut hit = false;
        for sig in &self.signatures {
            if sig.matches(p) {
                hit = true;
                *c.by_signature.entry(sig.id.clone()).or_insert(0) += 1;
            }
        }
        if hit {
            c.matched += 1;
        }
        let decision = if c.matched >= self.cfg.attack_match_threshold {
            DpiDecision::Attack
        } else if c.matched == 0 && c.inspected >= self.cfg.clear_min_packets {
            DpiDecision::Cleared
        } else {
            return None;
        };
        let verdict = DpiVerdict {
            device: p.src_device,
            decision,
            evidence: c.by_signature.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            decided_at: now,
            inspected: c.inspected,
        };
        self.decided.insert(p.src_device, decision);
        Some(verdict)
    }

    /// Forget all in-flight counters on one VM (its memory is gone after
    /// a crash). Standing decisions are not affected: a verdict, once
    /// reported, is not retracted.
    pub fn reset_vm(&mut self, vm: VmId) {
        self.counters.retain(|(v, _), _| *v != vm);
    }

    pub fn decision_of(&self, device: DeviceId) -> DpiDecision {
        self.decided
            .get(&device)
            .copied()
            .unwrap_or(DpiDecision::Undecided)
    }

    /// Devices still awaiting a decision on the given VM.
    pub fn undecided_on(&self, vm: VmId) -> Vec<DeviceId> {
        self.counters
            .keys()
            .filter(|(v, d)| *v == vm && !self.decided.contains_key(d))
            .map(|(_, d)| *d)
            .collect()
    }
}
