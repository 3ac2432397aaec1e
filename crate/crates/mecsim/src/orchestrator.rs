//! The management plane: orchestrator (MEO), platform manager (MEPM) and
//! virtualization manager (VIM) cooperating over a nine-step message
//! protocol to spin up, repair or resize the inspection machinery and to
//! move suspicious devices onto it.
//!
//! One protocol run handles one batch of work. The steps, each one
//! message hop of latency L (numbers are the `step=` field in the log):
//!
//! ```text
//! 1 MEO  -> VIM   request machine create / restore / resize
//! 2 VIM  -> VI    virtualization layer allocates and boots (delay B)
//! 3 VIM  -> MEO   machine ready
//! 4 MEO  -> MEPM  start the application layer
//! 5 MEPM -> VM4x  install the inspection application
//! 6 MEPM -> MEO   application running
//! 7 MEO  -> MEPM  apply traffic rules
//! 8 MEPM -> DET   rules applied: device reroutes take effect here
//! 9 MEPM -> MEO   run complete
//! ```
//!
//! Out-of-band reports (anomaly flags from the detector, verdicts from
//! the inspection VM, step `0` in the log) feed the orchestrator between
//! runs. Runs never overlap: anomalies reported mid-run accumulate and
//! get a follow-up run; a crash aborts a run that targets the crashed
//! machine and starts a repair run at once.

use std::collections::{BTreeMap, BTreeSet};

use crate::engine::SimTime;
use crate::eventlog::Entity;
use crate::infra::{Host, InfraError, ResourceSpec, VmId, VmRole, VmStatus};
use crate::netmodel::{DeviceId, RouteTarget};

/// Where inspection lives: one machine doing both inspection and
/// quarantined service, or a split pair.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Vm4Topology {
    Combined,
    Split,
}

/// Lifecycle policy for the inspection machinery.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Vm4Policy {
    /// Created by the first anomaly run, optionally stopped again after
    /// sitting idle (no device routed to it) for the given time.
    OnDemand { idle_stop_after: Option<SimTime> },
    /// Exists from the start of the run and is never stopped.
    Permanent,
}

#[derive(Clone, Debug)]
pub struct OrchConfig {
    pub topology: Vm4Topology,
    pub policy: Vm4Policy,
    /// One message hop between any two management entities.
    pub msg_latency: SimTime,
    /// Time the virtualization layer needs to boot a machine.
    pub boot_delay: SimTime,
    /// Time to apply a resize to a running machine.
    pub reconfig_delay: SimTime,
    pub min_vm4_spec: ResourceSpec,
    /// Packets per second one CPU unit can handle; drives sizing.
    pub pkts_per_cpu_unit: u64,
}

/// An orchestration message in flight. The simulator delivers it after
/// `msg_latency` and hands it back to [`Orchestrator::on_message`].
#[derive(Clone, PartialEq, Debug)]
pub struct OrchMessage {
    pub run: u32,
    pub step: u8,
    pub from: Entity,
    pub to: Entity,
    pub note: &'static str,
}

/// What the orchestrator asks the simulator to do. Infrastructure
/// mutations happen directly on the [`Host`]; effects cover everything
/// the simulator owns (event scheduling, the routing table, the log).
#[derive(Clone, PartialEq, Debug)]
pub enum OrchEffect {
    /// Deliver after the message latency, then call `on_message`.
    Send(OrchMessage),
    /// Call `on_vm_ready(vm)` at the given time (boot or resize done).
    ScheduleReady { vm: VmId, at: SimTime },
    Reroute {
        device: DeviceId,
        to: RouteTarget,
        cause: &'static str,
    },
    /// Park these devices: not served anywhere until re-released.
    Suspend(Vec<DeviceId>),
    /// Serve these devices again (their reroute says where).
    Release(Vec<DeviceId>),
    RunStarted {
        run: u32,
        trigger: &'static str,
        kind: &'static str,
        devices: Vec<DeviceId>,
    },
    RunCompleted {
        run: u32,
    },
    RunFailed {
        run: u32,
        step: u8,
        reason: &'static str,
    },
    Alarm {
        kind: &'static str,
        detail: String,
    },
    /// The named machine changed state; worth a log snapshot.
    VmChanged(VmId),
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
enum RunKind {
    Provision,
    Restore,
    Reconfigure,
}

impl RunKind {
    fn as_str(self) -> &'static str {
        match self {
            RunKind::Provision => "provision",
            RunKind::Restore => "restore",
            RunKind::Reconfigure => "reconfigure",
        }
    }

    fn step1_note(self) -> &'static str {
        match self {
            RunKind::Provision => "create-vm",
            RunKind::Restore => "restore-vm",
            RunKind::Reconfigure => "resize-vm",
        }
    }
}

#[derive(Debug)]
struct Run {
    id: u32,
    kind: RunKind,
    trigger: &'static str,
    /// Devices to move onto the inspection VM at step 8.
    devices: Vec<DeviceId>,
    /// Machines being created / restored / resized.
    targets: Vec<VmId>,
    awaiting_ready: BTreeSet<VmId>,
    /// The protocol step whose arrival the run is waiting for. Steps 1-3
    /// cover the virtualization layer, 4-6 application bring-up, 7-9 the
    /// traffic rules.
    expected_step: u8,
    new_spec: ResourceSpec,
}

/// The protocol brain. Owns all management-plane bookkeeping; knows
/// nothing about packets.
pub struct Orchestrator {
    cfg: OrchConfig,
    run_seq: u32,
    in_flight: Option<Run>,
    /// Anomalous devices waiting for a run, with their estimated rate.
    pending: BTreeSet<DeviceId>,
    /// Latest packets-per-second estimate per flagged device.
    est_pps: BTreeMap<DeviceId, f64>,
    /// Devices currently routed into the inspection family.
    routed: BTreeMap<DeviceId, RouteTarget>,
    /// Devices with a final disposition (dropped after an Attack verdict).
    resolved: BTreeSet<DeviceId>,
    suspended: BTreeSet<DeviceId>,
    /// Crashed machines waiting their turn for a repair run.
    pending_recovery: BTreeSet<VmId>,
    idle_since: Option<SimTime>,
}

impl Orchestrator {
    pub fn new(cfg: OrchConfig) -> Self {
        Orchestrator {
            cfg,
            run_seq: 0,
            in_flight: None,
            pending: BTreeSet::new(),
            est_pps: BTreeMap::new(),
            routed: BTreeMap::new(),
            resolved: BTreeSet::new(),
            suspended: BTreeSet::new(),
            pending_recovery: BTreeSet::new(),
            idle_since: None,
        }
    }

    pub fn config(&self) -> &OrchConfig {
        &self.cfg
    }

    /// The machine that runs deep inspection under this topology.
    pub fn dpi_vm(&self) -> VmId {
        match self.cfg.topology {
            Vm4Topology::Combined => VmId::Vm4,
            Vm4Topology::Split => VmId::Vm4a,
        }
    }

    /// Where devices are sent for inspection.
    pub fn quarantine_target(&self) -> RouteTarget {
        match self.cfg.topology {
            Vm4Topology::Combined => RouteTarget::Vm4,
            Vm4Topology::Split => RouteTarget::Vm4a,
        }
    }

    fn inspection_vms(&self) -> Vec<(VmId, VmRole)> {
        match self.cfg.topology {
            Vm4Topology::Combined => vec![(VmId::Vm4, VmRole::DpiAndQuarantine)],
            Vm4Topology::Split => vec![
                (VmId::Vm4a, VmRole::DpiOnly),
                (VmId::Vm4b, VmRole::QuarantineServices),
            ],
        }
    }

    pub fn is_run_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn quarantined_devices(&self) -> impl Iterator<Item = (&DeviceId, &RouteTarget)> {
        self.routed.iter()
    }

    /// An anomaly report (step 0) has reached the MEO.
    pub fn on_anomaly(
        &mut self,
        device: DeviceId,
        est_pps: f64,
        now: SimTime,
        host: &mut Host,
    ) -> Vec<OrchEffect> {
        self.on_anomalies(&[(device, est_pps)], now, host)
    }

    /// Several anomaly reports arriving together (one detector window can
    /// flag many devices at once); the whole batch rides a single run.
    pub fn on_anomalies(
        &mut self,
        reports: &[(DeviceId, f64)],
        now: SimTime,
        host: &mut Host,
    ) -> Vec<OrchEffect> {
        let mut effects = Vec::new();
        let mut queued_any = false;
        for &(device, est_pps) in reports {
            if self.routed.contains_key(&device)
                || self.resolved.contains(&device)
                || self.pending.contains(&device)
            {
                continue;
            }
            self.pending.insert(device);
            self.est_pps.insert(device, est_pps);
            self.idle_since = None;
            queued_any = true;
            // During crash repair a flagged device cannot be parked on
            // the broken machine; it is taken out of service until the
            // repaired machine's rules arrive (step 8).
            if self.in_flight.as_ref().is_some_and(|r| r.trigger == "crash") {
                self.suspended.insert(device);
                effects.push(OrchEffect::Suspend(vec![device]));
            }
        }
        if queued_any && self.in_flight.is_none() {
            effects.extend(self.start_anomaly_run(now, host));
        }
        effects
    }

    /// A machine crashed; the orchestrator notices immediately.
    pub fn on_vm_crash(&mut self, vm: VmId, now: SimTime, host: &mut Host) -> Vec<OrchEffect> {
        let mut effects = vec![
            OrchEffect::Alarm {
                kind: "vm-crash",
                detail: vm.as_str().to_string(),
            },
            OrchEffect::VmChanged(vm),
        ];
        self.idle_since = None;
        if let Some(run) = &self.in_flight {
            if run.targets.contains(&vm) {
                effects.push(OrchEffect::RunFailed {
                    run: run.id,
                    step: run.expected_step,
                    reason: "aborted",
                });
                // The aborted batch is not lost: unrouted devices return
                // to the queue for the run after the repair.
                let stranded: Vec<DeviceId> = self
                    .in_flight
                    .take()
                    .map(|r| r.devices)
                    .unwrap_or_default();
                for d in stranded {
                    if !self.routed.contains_key(&d) {
                        self.pending.insert(d);
                    }
                }
            } else {
                self.pending_recovery.insert(vm);
                return effects;
            }
        }
        effects.extend(self.start_restore_run(vm, now, host));
        effects
    }

    /// A boot or resize finished on the virtualization layer.
    pub fn on_vm_ready(&mut self, vm: VmId, now: SimTime, host: &mut Host) -> Vec<OrchEffect> {
        let _ = now;
        let mut effects = Vec::new();
        match host.vm(vm).map(|i| i.status) {
            Some(VmStatus::Booting) => {
                host.boot_complete(vm).expect("booting vm completes");
            }
            Some(VmStatus::Running) => {
                // A ready signal for a machine with no pending resize is
                // stale (its run was aborted by a crash); ignore it.
                if host.apply_reconfigure(vm).is_err() {
                    return effects;
                }
            }
            _ => return effects,
        }
        effects.push(OrchEffect::VmChanged(vm));
        let Some(run) = &mut self.in_flight else {
            return effects;
        };
        let was_awaited = run.awaiting_ready.remove(&vm);
        if was_awaited && run.awaiting_ready.is_empty() && run.expected_step == 3 {
            effects.push(OrchEffect::Send(OrchMessage {
                run: run.id,
                step: 3,
                from: Entity::Vim,
                to: Entity::Meo,
                note: "vm-ready",
            }));
        }
        effects
    }

    /// A protocol message arrived at its destination. Arrivals must come
    /// in step order; anything out of sequence fails the run.
    pub fn on_message(
        &mut self,
        msg: &OrchMessage,
        now: SimTime,
        host: &mut Host,
    ) -> Vec<OrchEffect> {
        let Some(run) = &self.in_flight else {
            // A leftover message for an aborted run dies quietly.
            return Vec::new();
        };
        if msg.run != run.id {
            return Vec::new();
        }
        let run_id = run.id;
        if msg.step != run.expected_step {
            self.in_flight = None;
            return vec![OrchEffect::RunFailed {
                run: run_id,
                step: msg.step,
                reason: "protocol",
            }];
        }
        self.advance_expected_step();
        match msg.step {
            1 => vec![OrchEffect::Send(OrchMessage {
                run: run_id,
                step: 2,
                from: Entity::Vim,
                to: Entity::Vi,
                note: "allocate",
            })],
            2 => self.apply_infrastructure_step(now, host),
            3 => vec![OrchEffect::Send(OrchMessage {
                run: run_id,
                step: 4,
                from: Entity::Meo,
                to: Entity::Mepm,
                note: "start-app",
            })],
            4 => {
                let dpi_vm = self.dpi_vm();
                let already = host.vm(dpi_vm).map(|i| i.dpi_ready).unwrap_or(false);
                vec![OrchEffect::Send(OrchMessage {
                    run: run_id,
                    step: 5,
                    from: Entity::Mepm,
                    to: Entity::Vm(dpi_vm),
                    note: if already { "app-ready" } else { "install-dpi" },
                })]
            }
            5 => {
                host.mark_dpi_ready(self.dpi_vm()).expect("dpi vm is running");
                vec![OrchEffect::Send(OrchMessage {
                    run: run_id,
                    step: 6,
                    from: Entity::Mepm,
                    to: Entity::Meo,
                    note: "app-started",
                })]
            }
            6 => vec![OrchEffect::Send(OrchMessage {
                run: run_id,
                step: 7,
                from: Entity::Meo,
                to: Entity::Mepm,
                note: "apply-rules",
            })],
            7 => vec![OrchEffect::Send(OrchMessage {
                run: run_id,
                step: 8,
                from: Entity::Mepm,
                to: Entity::Detector,
                note: "reroute",
            })],
            8 => self.apply_traffic_rules(),
            9 => {
                self.in_flight = None;
                let mut effects = vec![OrchEffect::RunCompleted { run: run_id }];
                effects.extend(self.start_queued_work(now, host));
                effects
            }
            _ => {
                self.in_flight = None;
                vec![OrchEffect::RunFailed {
                    run: run_id,
                    step: msg.step,
                    reason: "protocol",
                }]
            }
        }
    }

    fn advance_expected_step(&mut self) {
        if let Some(run) = &mut self.in_flight {
            run.expected_step += 1;
        }
    }

    /// A deep-inspection verdict (step 0) has reached the MEPM.
    pub fn on_dpi_verdict(
        &mut self,
        device: DeviceId,
        is_attack: bool,
        _now: SimTime,
    ) -> Vec<OrchEffect> {
        let mut effects = Vec::new();
        if is_attack {
            self.routed.remove(&device);
            self.resolved.insert(device);
            effects.push(OrchEffect::Reroute {
                device,
                to: RouteTarget::Drop,
                cause: "verdict-attack",
            });
            effects.push(OrchEffect::Alarm {
                kind: "attack-confirmed",
                detail: format!("dev:{}", device.0),
            });
        } else if self.cfg.topology == Vm4Topology::Split {
            self.routed.insert(device, RouteTarget::Vm4b);
            effects.push(OrchEffect::Reroute {
                device,
                to: RouteTarget::Vm4b,
                cause: "verdict-cleared",
            });
        }
        // Cleared devices in the combined layout stay where they are:
        // quarantined service continues on the inspection machine.
        effects
    }

    /// Periodic housekeeping: stop an on-demand inspection VM that has
    /// sat idle (nothing routed to the family) long enough.
    pub fn on_tick(&mut self, now: SimTime, host: &mut Host) -> Vec<OrchEffect> {
        let Vm4Policy::OnDemand {
            idle_stop_after: Some(limit),
        } = self.cfg.policy
        else {
            return Vec::new();
        };
        if self.in_flight.is_some() || !self.routed.is_empty() || !self.pending.is_empty() {
            self.idle_since = None;
            return Vec::new();
        }
        let running: Vec<VmId> = self
            .inspection_vms()
            .iter()
            .map(|(vm, _)| *vm)
            .filter(|vm| host.vm(*vm).map(|i| i.status == VmStatus::Running).unwrap_or(false))
            .collect();
        if running.is_empty() {
            self.idle_since = None;
            return Vec::new();
        }
        let since = *self.idle_since.get_or_insert(now);
        if now.saturating_sub(since) < limit {
            return Vec::new();
        }
        self.idle_since = None;
        let mut effects = Vec::new();
        for vm in running {
            host.stop(vm).expect("running vm stops");
            effects.push(OrchEffect::VmChanged(vm));
            effects.push(OrchEffect::Alarm {
                kind: "vm-idle-stop",
                detail: vm.as_str().to_string(),
            });
        }
        effects
    }

    // --- run lifecycle -------------------------------------------------

    fn start_anomaly_run(&mut self, now: SimTime, host: &mut Host) -> Vec<OrchEffect> {
        debug_assert!(self.in_flight.is_none());
        let devices: Vec<DeviceId> = std::mem::take(&mut self.pending).into_iter().collect();
        if devices.is_empty() {
            return Vec::new();
        }
        let dpi_vm = self.dpi_vm();
        let kind = match host.vm(dpi_vm).map(|i| i.status) {
            None | Some(VmStatus::Off) => RunKind::Provision,
            Some(_) => RunKind::Reconfigure,
        };
        let mut wanted: BTreeSet<DeviceId> = devices.iter().copied().collect();
        wanted.extend(self.routed.keys().copied());
        let new_spec = self.size_for(wanted.iter());
        self.begin_run(kind, "anomaly", devices, new_spec, now)
    }

    fn start_restore_run(&mut self, vm: VmId, now: SimTime, _host: &mut Host) -> Vec<OrchEffect> {
        debug_assert!(self.in_flight.is_none());
        self.pending_recovery.remove(&vm);
        let run_id = self.next_run_id();
        let run = Run {
            id: run_id,
            kind: RunKind::Restore,
            trigger: "crash",
            devices: Vec::new(),
            targets: vec![vm],
            awaiting_ready: BTreeSet::new(),
            expected_step: 1,
            new_spec: ResourceSpec::default(),
        };
        let effects = vec![
            OrchEffect::RunStarted {
                run: run.id,
                trigger: run.trigger,
                kind: run.kind.as_str(),
                devices: Vec::new(),
            },
            OrchEffect::Send(OrchMessage {
                run: run.id,
                step: 1,
                from: Entity::Meo,
                to: Entity::Vim,
                note: run.kind.step1_note(),
            }),
        ];
        let _ = now;
        self.in_flight = Some(run);
        effects
    }

    fn begin_run(
        &mut self,
        kind: RunKind,
        trigger: &'static str,
        devices: Vec<DeviceId>,
        new_spec: ResourceSpec,
        _now: SimTime,
    ) -> Vec<OrchEffect> {
        let run = Run {
            id: self.next_run_id(),
            kind,
            trigger,
            devices: devices.clone(),
            targets: self.inspection_vms().iter().map(|(vm, _)| *vm).collect(),
            awaiting_ready: BTreeSet::new(),
            expected_step: 1,
            new_spec,
        };
        let effects = vec![
            OrchEffect::RunStarted {
                run: run.id,
                trigger,
                kind: kind.as_str(),
                devices,
            },
            OrchEffect::Send(OrchMessage {
                run: run.id,
                step: 1,
                from: Entity::Meo,
                to: Entity::Vim,
                note: kind.step1_note(),
            }),
        ];
        self.in_flight = Some(run);
        effects
    }

    /// Step 2 arrived at the virtualization layer: create, restore or
    /// resize the target machines. The only step that can fail a run for
    /// resource reasons.
    fn apply_infrastructure_step(&mut self, now: SimTime, host: &mut Host) -> Vec<OrchEffect> {
        let run = self.in_flight.as_mut().expect("called with a run in flight");
        let mut effects = Vec::new();
        let result: Result<Vec<(VmId, SimTime)>, InfraError> = (|| {
            let mut ready_at = Vec::new();
            match run.kind {
                RunKind::Provision => {
                    for (vm, role) in match self.cfg.topology {
                        Vm4Topology::Combined => vec![(VmId::Vm4, VmRole::DpiAndQuarantine)],
                        Vm4Topology::Split => vec![
                            (VmId::Vm4a, VmRole::DpiOnly),
                            (VmId::Vm4b, VmRole::QuarantineServices),
                        ],
                    } {
                        host.install(vm, role, run.new_spec, VmStatus::Booting, now)?;
                        ready_at.push((vm, now + self.cfg.boot_delay));
                    }
                }
                RunKind::Restore => {
                    for vm in &run.targets {
                        host.begin_restore(*vm, now)?;
                        ready_at.push((*vm, now + self.cfg.boot_delay));
                    }
                }
                RunKind::Reconfigure => {
                    for vm in &run.targets {
                        host.begin_reconfigure(*vm, run.new_spec)?;
                        ready_at.push((*vm, now + self.cfg.reconfig_delay));
                    }
                }
            }
            Ok(ready_at)
        })();
        match result {
            Ok(ready_at) => {
                for (vm, at) in ready_at {
                    run.awaiting_ready.insert(vm);
                    effects.push(OrchEffect::VmChanged(vm));
                    effects.push(OrchEffect::ScheduleReady { vm, at });
                }
            }
            Err(err) => {
                let id = run.id;
                // Put the batch back; the next anomaly report retries.
                for d in run.devices.drain(..) {
                    self.pending.insert(d);
                }
                self.in_flight = None;
                effects.push(OrchEffect::RunFailed {
                    run: id,
                    step: 2,
                    reason: "resources",
                });
                effects.push(OrchEffect::Alarm {
                    kind: "capacity",
                    detail: err.to_string().replace(' ', "-"),
                });
            }
        }
        effects
    }

    /// Step 8 arrived at the detector: move this run's batch onto the
    /// inspection machine, re-assert routes of devices already
    /// quarantined there, and wake anything suspended during repair.
    fn apply_traffic_rules(&mut self) -> Vec<OrchEffect> {
        let run = self.in_flight.as_mut().expect("called with a run in flight");
        let target = match self.cfg.topology {
            Vm4Topology::Combined => RouteTarget::Vm4,
            Vm4Topology::Split => RouteTarget::Vm4a,
        };
        let mut effects = Vec::new();
        if run.kind == RunKind::Restore {
            // Devices parked on the repaired machine get their rule
            // re-asserted; suspended newcomers join the batch now.
            for (dev, route) in &self.routed {
                effects.push(OrchEffect::Reroute {
                    device: *dev,
                    to: *route,
                    cause: "requarantine",
                });
            }
            run.devices = std::mem::take(&mut self.pending).into_iter().collect();
        }
        for dev in run.devices.clone() {
            self.routed.insert(dev, target);
            effects.push(OrchEffect::Reroute {
                device: dev,
                to: target,
                cause: "quarantine",
            });
        }
        if !self.suspended.is_empty() {
            let released: Vec<DeviceId> = std::mem::take(&mut self.suspended).into_iter().collect();
            effects.push(OrchEffect::Release(released));
        }
        let run = self.in_flight.as_ref().expect("still in flight");
        effects.push(OrchEffect::Send(OrchMessage {
            run: run.id,
            step: 9,
            from: Entity::Mepm,
            to: Entity::Meo,
            note: "done",
        }));
        effects
    }

    /// After a completed run, queued crashes take priority over queued
    /// anomalies.
    fn start_queued_work(&mut self, now: SimTime, host: &mut Host) -> Vec<OrchEffect> {
        if let Some(vm) = self.pending_recovery.iter().next().copied() {
            return self.start_restore_run(vm, now, host);
        }
        if !self.pending.is_empty() {
            return self.start_anomaly_run(now, host);
        }
        Vec::new()
    }

    fn next_run_id(&mut self) -> u32 {
        self.run_seq += 1;
        self.run_seq
    }

    /// CPU units to inspect the given devices' estimated aggregate rate,
    /// floored at the configured minimum; memory scales with CPU.
    fn size_for<'a>(&self, devices: impl Iterator<Item = &'a DeviceId>) -> ResourceSpec {
        let total_pps: f64 = devices
            .filter_map(|d| self.est_pps.get(d))
            .sum();
        let cpu = ((total_pps / self.cfg.pkts_per_cpu_unit as f64).ceil() as u32)
            .max(self.cfg.min_vm4_spec.cpu_units);
        ResourceSpec {
            cpu_units: cpu,
            mem_units: cpu.max(self.cfg.min_vm4_spec.mem_units),
        }
    }
}
