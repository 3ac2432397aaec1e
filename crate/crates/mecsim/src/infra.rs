//! Virtual machines and the shared capacity of the physical edge host.
//!
//! Capacity is counted in abstract cpu and memory units. One cpu unit
//! buys a fixed packet budget per capacity window (10,000 packets per
//! second by default); serving a packet costs one budget unit and deep
//! inspection of a packet costs one more. Reservations are debited the
//! moment an allocation or grow request is accepted, and a crashed
//! machine keeps its reservation: the repair path restores it in place
//! rather than re-planning the host.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;

/// Default packet budget bought by one cpu unit, per second.
pub const PKTS_PER_CPU_UNIT: u64 = 10_000;

#[derive(Copy, Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub cpu_units: u32,
    pub mem_units: u32,
}

impl ResourceSpec {
    pub const ZERO: ResourceSpec = ResourceSpec {
        cpu_units: 0,
        mem_units: 0,
    };

    pub fn fits_within(self, avail: ResourceSpec) -> bool {
        self.cpu_units <= avail.cpu_units && self.mem_units <= avail.mem_units
    }

    fn plus(self, rhs: ResourceSpec) -> ResourceSpec {
        ResourceSpec {
            cpu_units: self.cpu_units + rhs.cpu_units,
            mem_units: self.mem_units + rhs.mem_units,
        }
    }

    fn saturating_minus(self, rhs: ResourceSpec) -> ResourceSpec {
        ResourceSpec {
            cpu_units: self.cpu_units.saturating_sub(rhs.cpu_units),
            mem_units: self.mem_units.saturating_sub(rhs.mem_units),
        }
    }

    fn max(self, rhs: ResourceSpec) -> ResourceSpec {
        ResourceSpec {
            cpu_units: self.cpu_units.max(rhs.cpu_units),
            mem_units: self.mem_units.max(rhs.mem_units),
        }
    }
}

impl fmt::Display for ResourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}cpu/{}mem", self.cpu_units, self.mem_units)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmId {
    Vm1,
    Vm2,
    Vm3,
    Vm4,
    Vm4a,
    Vm4b,
}

impl VmId {
    pub fn as_str(self) -> &'static str {
        match self {
            VmId::Vm1 => "VM1",
            VmId::Vm2 => "VM2",
            VmId::Vm3 => "VM3",
            VmId::Vm4 => "VM4",
            VmId::Vm4a => "VM4a",
            VmId::Vm4b => "VM4b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "VM1" => Some(VmId::Vm1),
            "VM2" => Some(VmId::Vm2),
            "VM3" => Some(VmId::Vm3),
            "VM4" => Some(VmId::Vm4),
            "VM4a" => Some(VmId::Vm4a),
            "VM4b" => Some(VmId::Vm4b),
            _ => None,
        }
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a machine is for. The repair protocol only covers the deep
/// inspection family; everything else crashing is an unhandled alarm.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VmRole {
    /// Public-facing services, the machine everyone starts routed to.
    Services,
    /// Packet capture and flow export.
    FlowCollector,
    /// Windowed anomaly detection over exported flows.
    Detector,
    /// Deep inspection plus quarantined service replicas on one machine.
    DpiAndQuarantine,
    /// Deep inspection only (split layout).
    DpiOnly,
    /// Quarantined service replicas only (split layout).
    QuarantineServices,
}

impl VmRole {
    pub fn as_str(self) -> &'static str {
        match self {
            VmRole::Services => "services",
            VmRole::FlowCollector => "flow-collector",
            VmRole::Detector => "detector",
            VmRole::DpiAndQuarantine => "dpi-quarantine",
            VmRole::DpiOnly => "dpi",
            VmRole::QuarantineServices => "quarantine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "services" => Some(VmRole::Services),
            "flow-collector" => Some(VmRole::FlowCollector),
            "detector" => Some(VmRole::Detector),
            "dpi-quarantine" => Some(VmRole::DpiAndQuarantine),
            "dpi" => Some(VmRole::DpiOnly),
            "quarantine" => Some(VmRole::QuarantineServices),
            _ => None,
        }
    }

    /// Machines the crash-recovery protocol knows how to repair.
    pub fn is_inspection_family(self) -> bool {
        matches!(
            self,
            VmRole::DpiAndQuarantine | VmRole::DpiOnly | VmRole::QuarantineServices
        )
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmStatus {
    Off,
    Booting,
    Running,
    Crashed,
}

impl VmStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VmStatus::Off => "off",
            VmStatus::Booting => "booting",
            VmStatus::Running => "running",
            VmStatus::Crashed => "crashed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(VmStatus::Off),
            "booting" => Some(VmStatus::Booting),
            "running" => Some(VmStatus::Running),
            "crashed" => Some(VmStatus::Crashed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VmInstance {
    pub id: VmId,
    pub role: VmRole,
    pub spec: ResourceSpec,
    pub status: VmStatus,
    /// When the current boot began, if the machine is Booting.
    pub boot_started: Option<SimTime>,
    /// Set once inspection software has been installed; survives crash
    /// and restore, so a repaired machine does not need a reinstall.
    pub dpi_ready: bool,
    /// Target of an in-flight grow/shrink, applied when the reconfigure
    /// completes. The reservation covers max(spec, pending) meanwhile.
    pending_spec: Option<ResourceSpec>,
    budget_used: u64,
    crash_flagged_in_window: u64,
}

impl VmInstance {
    fn reserved(&self) -> ResourceSpec {
        match self.pending_spec {
            Some(p) => self.spec.max(p),
            None => self.spec,
        }
    }

    /// Packet budget for one capacity window of the given length.
    pub fn window_budget(&self, pkts_per_cpu_unit: u64, window: SimTime) -> u64 {
        self.spec.cpu_units as u64 * pkts_per_cpu_unit * window.as_micros() / 1_000_000
    }

    pub fn budget_used(&self) -> u64 {
        self.budget_used
    }

    pub fn crash_flagged_in_window(&self) -> u64 {
        self.crash_flagged_in_window
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InfraError {
    #[error("no machine {0} on this host")]
    UnknownVm(VmId),
    #[error("machine {0} already exists")]
    VmExists(VmId),
    #[error("requested {requested} but only {free} is free")]
    InsufficientCapacity {
        requested: ResourceSpec,
        free: ResourceSpec,
    },
    #[error("machine {vm} is {actual:?}, expected {expected}")]
    WrongState {
        vm: VmId,
        expected: &'static str,
        actual: VmStatus,
    },
}

/// The physical host: total capacity plus every machine placed on it.
pub struct Host {
    capacity: ResourceSpec,
    pkts_per_cpu_unit: u64,
    vms: BTreeMap<VmId, VmInstance>,
}

impl Host {
    pub fn new(capacity: ResourceSpec, pkts_per_cpu_unit: u64) -> Self {
        Host {
            capacity,
            pkts_per_cpu_unit,
            vms: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> ResourceSpec {
        self.capacity
    }

    pub fn pkts_per_cpu_unit(&self) -> u64 {
        self.pkts_per_cpu_unit
    }

    pub fn vm(&self, id: VmId) -> Option<&VmInstance> {
        self.vms.get(&id)
    }

    pub fn vms(&self) -> impl Iterator<Item = &VmInstance> {
        self.vms.values()
    }

    fn vm_mut(&mut self, id: VmId) -> Result<&mut VmInstance, InfraError> {
        self.vms.get_mut(&id).ok_or(InfraError::UnknownVm(id))
    }

    /// Sum of reservations held by machines that are not off. Crashed
    /// machines count: their slot is kept for in-place repair.
    pub fn allocated(&self) -> ResourceSpec {
        self.vms
            .values()
            .filter(|vm| vm.status != VmStatus::Off)
            .fold(ResourceSpec::ZERO, |acc, vm| acc.plus(vm.reserved()))
    }

    pub fn free(&self) -> ResourceSpec {
        self.capacity.saturating_minus(self.allocated())
    }

    pub fn can_allocate(&self, spec: ResourceSpec) -> bool {
        spec.fits_within(self.free())
    }

    /// Place a machine. `status` is `Running` for machines that exist
    /// from the start of the run and `Booting` for orchestrated starts.
    /// The reservation is debited immediately either way.
    pub fn install(
        &mut self,
        id: VmId,
        role: VmRole,
        spec: ResourceSpec,
        status: VmStatus,
        now: SimTime,
    ) -> Result<(), InfraError> {
        if self
            .vms
            .get(&id)
            .is_some_and(|vm| vm.status != VmStatus::Off)
        {
            return Err(InfraError::VmExists(id));
        }
        if !self.can_allocate(spec) {
            return Err(InfraError::InsufficientCapacity {
                requested: spec,
                free: self.free(),
            });
        }
        self.vms.insert(
            id,
            VmInstance {
                id,
                role,
                spec,
                status,
                boot_started: (status == VmStatus::Booting).then_some(now),
                dpi_ready: false,
                pending_spec: None,
                budget_used: 0,
                crash_flagged_in_window: 0,
            },
        );
        Ok(())
    }

    pub fn boot_complete(&mut self, id: VmId) -> Result<(), InfraError> {
        let vm = self.vm_mut(id)?;
        if vm.status != VmStatus::Booting {
            return Err(InfraError::WrongState {
                vm: id,
                expected: "booting",
                actual: vm.status,
            });
        }
        vm.status = VmStatus::Running;
        vm.boot_started = None;
        Ok(())
    }

    /// Start growing or shrinking a running machine. Growth must fit in
    /// what is currently free; the new size takes effect at
    /// [`Host::apply_reconfigure`].
    pub fn begin_reconfigure(&mut self, id: VmId, new_spec: ResourceSpec) -> Result<(), InfraError> {
        let free = self.free();
        let vm = self.vm_mut(id)?;
        if vm.status != VmStatus::Running {
            return Err(InfraError::WrongState {
                vm: id,
                expected: "running",
                actual: vm.status,
            });
        }
        let growth = new_spec.saturating_minus(vm.spec);
        if !growth.fits_within(free) {
            return Err(InfraError::InsufficientCapacity {
                requested: growth,
                free,
            });
        }
        vm.pending_spec = Some(new_spec);
        Ok(())
    }

    pub fn apply_reconfigure(&mut self, id: VmId) -> Result<(), InfraError> {
        let vm = self.vm_mut(id)?;
        match vm.pending_spec.take() {
            Some(spec) => {
                vm.spec = spec;
                Ok(())
            }
            None => Err(InfraError::WrongState {
                vm: id,
                expected: "reconfiguring",
                actual: vm.status,
            }),
        }
    }

    pub fn crash(&mut self, id: VmId) -> Result<(), InfraError> {
        let vm = self.vm_mut(id)?;
        if vm.status != VmStatus::Running {
            return Err(InfraError::WrongState {
                vm: id,
                expected: "running",
                actual: vm.status,
            });
        }
        vm.status = VmStatus::Crashed;
        vm.pending_spec = None;
        // In-memory application state is gone with the machine.
        vm.dpi_ready = false;
        Ok(())
    }

    /// Begin repairing a crashed machine in place. Keeps the reservation
    /// and the installed-software flag.
    pub fn begin_restore(&mut self, id: VmId, now: SimTime) -> Result<(), InfraError> {
        let vm = self.vm_mut(id)?;
        if vm.status != VmStatus::Crashed {
            return Err(InfraError::WrongState {
                vm: id,
                expected: "crashed",
                actual: vm.status,
            });
        }
        vm.status = VmStatus::Booting;
        vm.boot_started = Some(now);
        Ok(())
    }

    /// Retire a running machine and release its reservation.
    pub fn stop(&mut self, id: VmId) -> Result<(), InfraError> {
        let vm = self.vm_mut(id)?;
        if vm.status != VmStatus::Running {
            return Err(InfraError::WrongState {
                vm: id,
                expected: "running",
                actual: vm.status,
            });
        }
        vm.status = VmStatus::Off;
        vm.pending_spec = None;
        vm.dpi_ready = false;
        Ok(())
    }

    pub fn mark_dpi_ready(&mut self, id: VmId) -> Result<(), InfraError> {
        self.vm_mut(id)?.dpi_ready = true;
        Ok(())
    }

    /// Zero every machine's serve budget and overload counter at the
    /// start of a capacity window.
    pub fn begin_window(&mut self) {
        for vm in self.vms.values_mut() {
            vm.budget_used = 0;
            vm.crash_flagged_in_window = 0;
        }
    }

    /// Spend `cost` budget units on a running machine; returns false when
    /// the window budget is exhausted (the packet is degraded, not
    /// served). Non-running machines never serve.
    pub fn try_spend(&mut self, id: VmId, cost: u64, window: SimTime) -> Result<bool, InfraError> {
        let rate = self.pkts_per_cpu_unit;
        let vm = self.vm_mut(id)?;
        if vm.status != VmStatus::Running {
            return Ok(false);
        }
        let budget = vm.window_budget(rate, window);
        if vm.budget_used + cost <= budget {
            vm.budget_used += cost;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Record one crash-flagged packet aimed at a running machine.
    pub fn note_crash_flagged(&mut self, id: VmId) {
        if let Some(vm) = self.vms.get_mut(&id) {
            if vm.status == VmStatus::Running {
                vm.crash_flagged_in_window += 1;
            }
        }
    }

    /// Machines whose crash-flagged arrivals this window exceeded
    /// `overload_factor` times their window budget. Evaluated at the end
    /// of each capacity window.
    pub fn overloaded(&self, overload_factor: f64, window: SimTime) -> Vec<VmId> {
        self.vms
            .values()
            .filter(|vm| {
                vm.status == VmStatus::Running
                    && vm.crash_flagged_in_window as f64
                        > overload_factor
                            * vm.window_budget(self.pkts_per_cpu_unit, window) as f64
            })
            .map(|vm| vm.id)
            .collect()
    }
}
