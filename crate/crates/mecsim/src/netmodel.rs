//! Devices, packets and the per-device routing table of the edge host.
//!
//! Every attached device gets a synthetic address in 10.0.0.0/8 derived
//! from its numeric id, and a route that starts at the service machine.
//! Routes only ever move away from the service machine: once a device has
//! been steered into inspection or quarantine it can be dropped or parked
//! but never sent back, which is what shields the service machine from a
//! device that later turns hostile again.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;

/// Destination address of the edge service every device talks to.
pub const SERVICE_IP: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);

/// Address of the command-and-control host that compromised devices
/// signal before an attack.
pub const CNC_IP: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 66);

/// Numeric device identifier, also the low bits of its 10.x.y.z address.
#[derive(
    Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl DeviceId {
    /// Largest id that still fits in the 10.0.0.0/8 host part.
    pub const MAX: u32 = (1 << 24) - 1;

    pub fn ip(self) -> Ipv4Addr {
        let [_, b, c, d] = self.0.to_be_bytes();
        Ipv4Addr::new(10, b, c, d)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a device actually is, independent of what the detector believes.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DeviceProfile {
    /// Ordinary subscriber traffic for the whole run.
    #[serde(rename = "legit")]
    Legitimate,
    /// Compromised device: normal silence, then beacons and floods on
    /// command.
    #[serde(rename = "bot")]
    Bot,
    /// Attacker-controlled device that only floods, no beacon phase.
    #[serde(rename = "attacker")]
    AttackerDirect,
}

impl DeviceProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceProfile::Legitimate => "legit",
            DeviceProfile::Bot => "bot",
            DeviceProfile::AttackerDirect => "attacker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "legit" => Some(DeviceProfile::Legitimate),
            "bot" => Some(DeviceProfile::Bot),
            "attacker" => Some(DeviceProfile::AttackerDirect),
            _ => None,
        }
    }

    /// Ground truth used by detection-quality metrics.
    pub fn is_malicious(self) -> bool {
        !matches!(self, DeviceProfile::Legitimate)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
            Protocol::Icmp => "icmp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tcp" => Some(Protocol::Tcp),
            "udp" => Some(Protocol::Udp),
            "icmp" => Some(Protocol::Icmp),
            _ => None,
        }
    }
}

/// Stand-in for packet content. The payload inspector matches on this
/// instead of real bytes; the flow pipeline never looks at it.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum PayloadTag {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "attack")]
    AttackSignature,
    #[serde(rename = "beacon")]
    CncBeacon,
}

impl PayloadTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadTag::Normal => "normal",
            PayloadTag::AttackSignature => "attack",
            PayloadTag::CncBeacon => "beacon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(PayloadTag::Normal),
            "attack" => Some(PayloadTag::AttackSignature),
            "beacon" => Some(PayloadTag::CncBeacon),
            _ => None,
        }
    }
}

/// One simulated packet. `length` covers headers and payload in bytes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Packet {
    pub ts: SimTime,
    pub src_device: DeviceId,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub length: u16,
    pub payload_tag: PayloadTag,
}

/// Where the ingress steers a device's packets.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteTarget {
    Vm1,
    Vm4,
    Vm4a,
    Vm4b,
    Drop,
}

impl RouteTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteTarget::Vm1 => "VM1",
            RouteTarget::Vm4 => "VM4",
            RouteTarget::Vm4a => "VM4a",
            RouteTarget::Vm4b => "VM4b",
            RouteTarget::Drop => "drop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "VM1" => Some(RouteTarget::Vm1),
            "VM4" => Some(RouteTarget::Vm4),
            "VM4a" => Some(RouteTarget::Vm4a),
            "VM4b" => Some(RouteTarget::Vm4b),
            "drop" => Some(RouteTarget::Drop),
            _ => None,
        }
    }

    /// The routing state machine. A target may always be re-applied to
    /// itself (the redirect step of a repair run does this), quarantine
    /// moves only deepen, and nothing ever returns to the service machine.
    pub fn may_transition_to(self, to: RouteTarget) -> bool {
        use RouteTarget::*;
        if self == to {
            return true;
        }
        matches!(
            (self, to),
            (Vm1, Vm4) | (Vm1, Vm4a) | (Vm4a, Vm4b) | (Vm4a, Drop) | (Vm4, Drop)
        )
    }
}

impl fmt::Display for RouteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the host disposed of one packet.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DeliveryOutcome {
    /// Handled by the routed machine within its capacity budget.
    Served,
    /// The routed machine was crashed, booting or off.
    ServiceLoss,
    /// The routed machine was up but its capacity window was exhausted.
    Degraded,
    /// Discarded at ingress because the device route is `drop`.
    IngressDropped,
}

impl DeliveryOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryOutcome::Served => "served",
            DeliveryOutcome::ServiceLoss => "loss",
            DeliveryOutcome::Degraded => "degraded",
            DeliveryOutcome::IngressDropped => "drop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "served" => Some(DeliveryOutcome::Served),
            "loss" => Some(DeliveryOutcome::ServiceLoss),
            "degraded" => Some(DeliveryOutcome::Degraded),
            "drop" => Some(DeliveryOutcome::IngressDropped),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Device {
    pub id: DeviceId,
    pub profile: DeviceProfile,
    pub ip: Ipv4Addr,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NetError {
    #[error("device {0} is already attached")]
    DuplicateDevice(DeviceId),
    #[error("device id {0} exceeds the addressable range")]
    DeviceIdOutOfRange(u32),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("route change {from} -> {to} for device {device} is forbidden")]
    ForbiddenRoute {
        device: DeviceId,
        from: RouteTarget,
        to: RouteTarget,
    },
}

/// Attached devices and their current routes.
#[derive(Default)]
pub struct Network {
    devices: BTreeMap<DeviceId, Device>,
    routes: BTreeMap<DeviceId, RouteTarget>,
    blocked: BTreeSet<DeviceId>,
}

impl Network {
    pub fn new() -> Self {
        Network::default()
    }

    /// Register a device. Fresh devices always route to the service
    /// machine first; nobody is born quarantined.
    pub fn attach(&mut self, id: DeviceId, profile: DeviceProfile) -> Result<&Device, NetError> {
        if id.0 > DeviceId::MAX {
            return Err(NetError::DeviceIdOutOfRange(id.0));
        }
        if self.devices.contains_key(&id) {
            return Err(NetError::DuplicateDevice(id));
        }
        self.devices.insert(
            id,
            Device {
                id,
                profile,
                ip: id.ip(),
            },
        );
        self.routes.insert(id, RouteTarget::Vm1);
        Ok(&self.devices[&id])
    }

    pub fn device(&self, id: DeviceId) -> Option<&Device> {
        self.devices.get(&id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &Device> {
        self.devices.values()
    }

    pub fn route(&self, id: DeviceId) -> Result<RouteTarget, NetError> {
        self.routes
            .get(&id)
            .copied()
            .ok_or(NetError::UnknownDevice(id))
    }

    /// Apply a route change, returning the previous target. Re-applying
    /// the current target succeeds (and is how a repair run re-asserts
    /// quarantine); forbidden moves leave the table untouched.
    pub fn reroute(&mut self, id: DeviceId, to: RouteTarget) -> Result<RouteTarget, NetError> {
        let current = self.route(id)?;
        if !current.may_transition_to(to) {
            return Err(NetError::ForbiddenRoute {
                device: id,
                from: current,
                to,
            });
        }
        self.routes.insert(id, to);
        Ok(current)
    }

    /// Drop a device's traffic at ingress. This is the crude remedy the
    /// non-orchestrated deployment falls back on: the routing table is
    /// untouched, packets simply stop being delivered anywhere.
    pub fn block(&mut self, id: DeviceId) -> Result<bool, NetError> {
        if !self.devices.contains_key(&id) {
            return Err(NetError::UnknownDevice(id));
        }
        Ok(self.blocked.insert(id))
    }

    pub fn is_blocked(&self, id: DeviceId) -> bool {
        self.blocked.contains(&id)
    }
}
