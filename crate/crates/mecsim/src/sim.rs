//! The simulation itself: one run of one scenario, in one of two
//! deployments.
//!
//! `Mode::Proposed` is the orchestrated architecture. Flows are mirrored
//! off the ingress, the detector scores each window, flagged devices are
//! reported to the orchestrator (one hop of latency), quarantined onto
//! the inspection machine by a nine-step run, deep-inspected there and
//! finally dropped or cleared. The service machine never inspects
//! anything.
//!
//! `Mode::Baseline` is the conventional deployment the proposal is
//! measured against: deep inspection runs inline on the service machine
//! itself, costing it one extra budget unit per inspected packet. An
//! attack verdict blocks the device at ingress. There is no management
//! plane, and a crashed service machine stays down.
//!
//! Determinism: all randomness comes from per-device labelled streams,
//! all time is integer microseconds, and same-instant events fire in
//! scheduling order. Two runs of the same scenario, seed and mode render
//! byte-identical logs.

use std::collections::{BTreeMap, BTreeSet};

use crate::detector::Detector;
use crate::dpi::{DpiDecision, DpiEngine, DpiVerdict};
use crate::engine::{Engine, EventPayload, RngRegistry, RunSummary, SimTime};
use crate::eventlog::{self, Entity, LogRecord};
use crate::flowpipe::{FlowTable, EXPORTED_RECORD_BYTES};
use crate::infra::{Host, VmId, VmRole, VmStatus, PKTS_PER_CPU_UNIT};
use crate::metrics::{MetricsReport, RunIdentity};
use crate::netmodel::{
    DeliveryOutcome, DeviceId, DeviceProfile, Network, Packet, PayloadTag, RouteTarget,
};
use crate::orchestrator::{OrchConfig, OrchEffect, OrchMessage, Orchestrator, Vm4Policy};
use crate::scenario::Scenario;
use crate::trafficgen::{beacon_schedule, AttackScript, FloodGen, LegitGen};

/// Which deployment a run simulates.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Mode {
    Proposed,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Dpi(#[from] crate::dpi::DpiError),
    #[error(transparent)]
    Traffic(#[from] crate::trafficgen::TrafficError),
    #[error(transparent)]
    Net(#[from] crate::netmodel::NetError),
    #[error(transparent)]
    Infra(#[from] crate::infra::InfraError),
}

/// Everything one run leaves behind.
pub struct RunArtifacts {
    pub records: Vec<LogRecord>,
    pub log_text: String,
    /// SHA-256 of the rendered log; the reproducibility fingerprint.
    pub digest: String,
    pub flows_text: String,
    pub features_text: String,
    pub metrics: MetricsReport,
    pub summary: RunSummary,
}

enum ArrivalSource {
    Legit,
    Flood,
    Beacon,
}

enum SimEvent {
    Attach(DeviceId),
    Arrival {
        packet: Packet,
        source: ArrivalSource,
    },
    DetectorTick,
    CapacityWindow,
    Mgmt(OrchMessage),
    VmReady(VmId),
    ModelSwap(usize),
    AnomalyAtMeo {
        reports: Vec<(DeviceId, f64)>,
    },
    VerdictAtMepm {
        device: DeviceId,
        is_attack: bool,
    },
}

impl EventPayload for SimEvent {
    fn kind(&self) -> &'static str {
        match self {
            SimEvent::Attach(_) => "attach",
            SimEvent::Arrival { .. } => "arrival",
            SimEvent::DetectorTick => "detector-tick",
            SimEvent::CapacityWindow => "capacity-window",
            SimEvent::Mgmt(_) => "mgmt",
            SimEvent::VmReady(_) => "vm-ready",
            SimEvent::ModelSwap(_) => "model-swap",
            SimEvent::AnomalyAtMeo { .. } => "anomaly-report",
            SimEvent::VerdictAtMepm { .. } => "verdict-report",
        }
    }
}

struct DeviceRuntime {
    legit: Option<LegitGen>,
    flood: Option<FloodGen>,
}

fn route_vm(route: RouteTarget) -> Option<VmId> {
    match route {
        RouteTarget::Vm1 => Some(VmId::Vm1),
        RouteTarget::Vm4 => Some(VmId::Vm4),
        RouteTarget::Vm4a => Some(VmId::Vm4a),
        RouteTarget::Vm4b => Some(VmId::Vm4b),
        RouteTarget::Drop => None,
    }
}

pub struct Simulation {
    scenario: Scenario,
    mode: Mode,
    engine: Engine<SimEvent>,
    rng: RngRegistry,
    host: Host,
    network: Network,
    flows: FlowTable,
    detector: Detector,
    dpi: DpiEngine,
    orchestrator: Option<Orchestrator>,
    devices: BTreeMap<DeviceId, DeviceRuntime>,
    /// Devices parked during crash repair: not served anywhere.
    suspended: BTreeSet<DeviceId>,
    /// Devices the detector has already reported to the MEO, ever.
    reported: BTreeSet<DeviceId>,
    records: Vec<LogRecord>,
    feature_lines: Vec<String>,
    /// Packets deep-inspected inline this capacity window (baseline).
    inline_inspected: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario, mode: Mode) -> Result<Simulation, SimError> {
        let detector = Detector::new(scenario.initial_model.clone(), scenario.detector_window)?;
        let dpi = DpiEngine::new(scenario.dpi_config, scenario.signatures.clone())?;
        let mut host = Host::new(scenario.host_capacity, PKTS_PER_CPU_UNIT);
        let mut records = Vec::new();

        for (id, role, spec) in &scenario.base_vms {
            host.install(*id, *role, *spec, VmStatus::Running, SimTime::ZERO)?;
        }
        let orchestrator = match mode {
            Mode::Proposed => {
                let orch = Orchestrator::new(OrchConfig {
                    topology: scenario.vm4.topology,
                    policy: scenario.vm4.policy,
                    msg_latency: scenario.orchestration.msg_latency,
                    boot_delay: scenario.orchestration.boot_delay,
                    reconfig_delay: scenario.orchestration.reconfig_delay,
                    min_vm4_spec: scenario.vm4.min_spec,
                    pkts_per_cpu_unit: PKTS_PER_CPU_UNIT,
                });
                if scenario.vm4.policy == Vm4Policy::Permanent {
                    let vms: &[(VmId, VmRole)] = match scenario.vm4.topology {
                        crate::orchestrator::Vm4Topology::Combined => {
                            &[(VmId::Vm4, VmRole::DpiAndQuarantine)]
                        }
                        crate::orchestrator::Vm4Topology::Split => &[
                            (VmId::Vm4a, VmRole::DpiOnly),
                            (VmId::Vm4b, VmRole::QuarantineServices),
                        ],
                    };
                    for (vm, role) in vms {
                        host.install(*vm, *role, scenario.vm4.min_spec, VmStatus::Running, SimTime::ZERO)?;
                    }
                    host.mark_dpi_ready(orch.dpi_vm())?;
                }
                Some(orch)
            }
            Mode::Baseline => {
                // Inline inspection lives on the service machine.
                host.mark_dpi_ready(VmId::Vm1)?;
                None
            }
        };
        let installed: Vec<VmId> = host.vms().map(|vm| vm.id).collect();
        for vm in installed {
            let i = host.vm(vm).expect("just listed");
            records.push(LogRecord::Vm {
                t: SimTime::ZERO,
                vm,
                status: i.status,
                role: i.role,
                spec: i.spec,
                free: host.free(),
            });
        }

        let mut sim = Simulation {
            rng: RngRegistry::new(scenario.seed),
            flows: FlowTable::new(scenario.flow_active_timeout, scenario.flow_inactive_timeout),
            engine: Engine::new(),
            mode,
            host,
            network: Network::new(),
            detector,
            dpi,
            orchestrator,
            devices: BTreeMap::new(),
            suspended: BTreeSet::new(),
            reported: BTreeSet::new(),
            records,
            feature_lines: Vec::new(),
            inline_inspected: 0,
            scenario,
        };

        // Model swaps are scheduled before any tick so that a swap landing
        // exactly on a tick boundary takes effect for that tick's window.
        let swap_times: Vec<SimTime> =
            sim.scenario.model_updates.iter().map(|(at, _)| *at).collect();
        for (i, at) in swap_times.into_iter().enumerate() {
            sim.schedule(at, SimEvent::ModelSwap(i));
        }
        for spec in sim.scenario.devices.clone() {
            sim.schedule(spec.attach_at, SimEvent::Attach(spec.id));
        }
        let wd = sim.scenario.detector_window;
        sim.schedule(wd, SimEvent::DetectorTick);
        let wc = sim.scenario.crash_model.capacity_window;
        sim.schedule(wc, SimEvent::CapacityWindow);
        Ok(sim)
    }

    /// Convenience: build and run to the scenario horizon.
    pub fn run(scenario: Scenario, mode: Mode) -> Result<RunArtifacts, SimError> {
        Ok(Simulation::new(scenario, mode)?.execute())
    }

    pub fn execute(mut self) -> RunArtifacts {
        let end = self.scenario.duration;
        while let Some((t, event)) = self.engine.pop_due(end) {
            self.handle(t, event);
            debug_assert!(
                self.host.allocated().fits_within(self.host.capacity()),
                "host oversubscribed at {t}"
            );
        }
        self.finish()
    }

    fn finish(mut self) -> RunArtifacts {
        let end = self.scenario.duration;
        self.flows.flush_all();
        let sealed = self.flows.sealed();
        self.records.push(LogRecord::FlowSummary {
            t: end,
            records: sealed.len() as u64,
            exported_bytes: sealed.len() as u64 * EXPORTED_RECORD_BYTES,
            packets: self.flows.observed_packets(),
            bytes: self.flows.observed_bytes(),
        });

        let log_text = eventlog::render_log(&self.records);
        let digest = eventlog::digest(&log_text);
        let flows_text: String = self
            .flows
            .sealed()
            .iter()
            .map(|r| r.render_line() + "\n")
            .collect();
        let features_text: String = self
            .feature_lines
            .iter()
            .map(|l| l.clone() + "\n")
            .collect();
        let metrics = MetricsReport::compute(
            &self.records,
            end,
            RunIdentity {
                scenario: self.scenario.name.clone(),
                seed: self.scenario.seed,
                mode: self.mode.as_str().to_string(),
                digest: digest.clone(),
            },
        );
        RunArtifacts {
            records: self.records,
            log_text,
            digest,
            flows_text,
            features_text,
            metrics,
            summary: self.engine.summary(),
        }
    }

    fn schedule(&mut self, at: SimTime, event: SimEvent) {
        self.engine
            .schedule(at, event)
            .expect("simulation never schedules into the past");
    }

    fn handle(&mut self, t: SimTime, event: SimEvent) {
        match event {
            SimEvent::Attach(id) => self.handle_attach(t, id),
            SimEvent::Arrival { packet, source } => self.handle_arrival(t, packet, source),
            SimEvent::DetectorTick => self.handle_detector_tick(t),
            SimEvent::CapacityWindow => self.handle_capacity_window(t),
            SimEvent::Mgmt(msg) => self.handle_mgmt(t, msg),
            SimEvent::VmReady(vm) => self.handle_vm_ready(t, vm),
            SimEvent::ModelSwap(index) => self.handle_model_swap(t, index),
            SimEvent::AnomalyAtMeo { reports } => self.handle_anomaly(t, reports),
            SimEvent::VerdictAtMepm { device, is_attack } => {
                self.handle_verdict(t, device, is_attack)
            }
        }
    }

    // --- sources ---------------------------------------------------------

    fn handle_attach(&mut self, t: SimTime, id: DeviceId) {
        let spec = self
            .scenario
            .devices
            .iter()
            .find(|d| d.id == id)
            .expect("attach event for unknown device")
            .clone();
        let device = self.network.attach(id, spec.profile).expect("valid attach");
        self.records.push(LogRecord::Attach {
            t,
            dev: id,
            profile: spec.profile,
            ip: device.ip,
        });

        let mut runtime = DeviceRuntime {
            legit: None,
            flood: None,
        };
        match spec.profile {
            DeviceProfile::Legitimate => {
                let name = spec.workload.as_deref().expect("legit device has workload");
                let profile = self.scenario.workloads[name].clone();
                let stream = self.rng.stream(&format!("trafficgen/dev/{}", id.0));
                let mut gen =
                    LegitGen::new(id, profile, t, stream).expect("profile validated at load");
                let first = gen.next_packet();
                runtime.legit = Some(gen);
                self.schedule(
                    first.ts,
                    SimEvent::Arrival {
                        packet: first,
                        source: ArrivalSource::Legit,
                    },
                );
            }
            DeviceProfile::Bot | DeviceProfile::AttackerDirect => {
                let plan = self.scenario.attack.as_ref().expect("attack plan validated");
                let script = AttackScript {
                    start: plan.start,
                    stop: plan.stop,
                    flood_rate_per_bot: plan.rate_per_bot,
                    flood_dst_port: plan.dst_port,
                    flood_length: plan.length,
                    crash_payload: plan.crash_payload,
                    // Direct attackers skip the command phase entirely.
                    beacon_period: match spec.profile {
                        DeviceProfile::Bot => plan.beacon_period,
                        _ => None,
                    },
                    beacon_lead: plan.beacon_lead,
                    beacon_port: plan.beacon_port,
                };
                let beacons = beacon_schedule(id, &script);
                let mut gen = FloodGen::new(id, script).expect("attack window validated");
                self.records.push(LogRecord::AttackSched {
                    t,
                    dev: id,
                    start: plan.start,
                    stop: plan.stop,
                    rate: plan.rate_per_bot,
                    beacons: beacons.len() as u64,
                });
                for beacon in beacons {
                    if beacon.ts >= t {
                        self.schedule(
                            beacon.ts,
                            SimEvent::Arrival {
                                packet: beacon,
                                source: ArrivalSource::Beacon,
                            },
                        );
                    }
                }
                if let Some(first) = gen.next_packet() {
                    self.schedule(
                        first.ts,
                        SimEvent::Arrival {
                            packet: first,
                            source: ArrivalSource::Flood,
                        },
                    );
                }
                runtime.flood = Some(gen);
            }
        }
        self.devices.insert(id, runtime);
    }

    // --- the data plane ---------------------------------------------------

    fn handle_arrival(&mut self, t: SimTime, packet: Packet, source: ArrivalSource) {
        let dev = packet.src_device;
        let route = self.network.route(dev).expect("arrivals follow attach");
        let crash_payload = self
            .scenario
            .attack
            .as_ref()
            .is_some_and(|a| a.crash_payload);

        let outcome = if self.network.is_blocked(dev) || route == RouteTarget::Drop {
            DeliveryOutcome::IngressDropped
        } else if self.suspended.contains(&dev) {
            DeliveryOutcome::ServiceLoss
        } else {
            let vm = route_vm(route).expect("non-drop routes map to a machine");
            match self.host.vm(vm).map(|i| i.status) {
                Some(VmStatus::Running) => {
                    if crash_payload && packet.payload_tag == PayloadTag::AttackSignature {
                        // Arrival pressure, not served work, is what
                        // breaks a machine: degraded packets count too.
                        self.host.note_crash_flagged(vm);
                    }
                    let inspect_here = self.inspection_applies(vm, dev);
                    let cost = 1 + inspect_here as u64;
                    let window = self.scenario.crash_model.capacity_window;
                    if self.host.try_spend(vm, cost, window).expect("vm exists") {
                        if inspect_here {
                            if self.mode == Mode::Baseline {
                                self.inline_inspected += 1;
                            }
                            if let Some(verdict) = self.dpi.inspect(vm, &packet, t) {
                                self.on_dpi_decision(t, vm, verdict);
                            }
                        }
                        DeliveryOutcome::Served
                    } else {
                        DeliveryOutcome::Degraded
                    }
                }
                _ => DeliveryOutcome::ServiceLoss,
            }
        };

        // The flow mirror sits at the ingress: it sees everything that is
        // not dropped right there, including traffic to a dead machine.
        if outcome != DeliveryOutcome::IngressDropped {
            self.flows.observe(&packet);
        }
        self.records.push(LogRecord::Deliver {
            t,
            dev,
            vm: route,
            out: outcome,
            proto: packet.protocol,
            len: packet.length,
            tag: packet.payload_tag,
            sport: packet.src_port,
            dport: packet.dst_port,
        });

        // Pull the source's next packet; exactly one arrival per device
        // sits in the queue at any time.
        let runtime = self.devices.get_mut(&dev).expect("runtime exists");
        let next = match source {
            ArrivalSource::Legit => runtime.legit.as_mut().map(|g| (g.next_packet(), false)),
            ArrivalSource::Flood => runtime
                .flood
                .as_mut()
                .and_then(|g| g.next_packet())
                .map(|p| (p, true)),
            ArrivalSource::Beacon => None,
        };
        if let Some((packet, is_flood)) = next {
            let source = if is_flood {
                ArrivalSource::Flood
            } else {
                ArrivalSource::Legit
            };
            self.schedule(packet.ts, SimEvent::Arrival { packet, source });
        }
    }

    /// Whether a packet landing on `vm` gets deep-inspected, which costs
    /// one extra budget unit.
    fn inspection_applies(&self, vm: VmId, dev: DeviceId) -> bool {
        let inspector = match (&self.orchestrator, self.mode) {
            (Some(orch), _) => orch.dpi_vm(),
            (None, Mode::Baseline) => VmId::Vm1,
            (None, Mode::Proposed) => return false,
        };
        vm == inspector
            && self.host.vm(vm).is_some_and(|i| i.dpi_ready)
            && self.dpi.decision_of(dev) == DpiDecision::Undecided
    }

    fn on_dpi_decision(&mut self, t: SimTime, vm: VmId, verdict: DpiVerdict) {
        self.records.push(LogRecord::Dpi {
            t,
            dev: verdict.device,
            vm,
            decision: verdict.decision,
            inspected: verdict.inspected,
            evidence: verdict.evidence.clone(),
        });
        match self.mode {
            Mode::Proposed => {
                // The inspection VM reports to the platform manager, one
                // hop away; remediation is applied on arrival.
                self.schedule(
                    t + self.scenario.orchestration.msg_latency,
                    SimEvent::VerdictAtMepm {
                        device: verdict.device,
                        is_attack: verdict.decision == DpiDecision::Attack,
                    },
                );
            }
            Mode::Baseline => {
                // No management plane: the only remedy is to drop the
                // device at the ingress, immediately.
                if verdict.decision == DpiDecision::Attack {
                    self.network.block(verdict.device).expect("device attached");
                    self.records.push(LogRecord::Alarm {
                        t,
                        kind: "ingress-block".to_string(),
                        detail: format!("dev:{}", verdict.device.0),
                    });
                    let ip = verdict.device.ip();
                    self.flows.flush_src(ip);
                }
            }
        }
    }

    // --- detection --------------------------------------------------------

    fn handle_detector_tick(&mut self, t: SimTime) {
        let window = self.scenario.detector_window;
        let features = self.flows.build_features(t - window, t);
        for f in &features {
            self.feature_lines.push(f.render_line());
        }
        let verdicts = self.detector.score_window(&features);
        let latency = self.scenario.orchestration.msg_latency;
        let mut reports = Vec::new();
        for (feature, verdict) in features.iter().zip(&verdicts) {
            self.records.push(LogRecord::Verdict {
                t,
                dev: verdict.device,
                src: verdict.src_ip,
                win: verdict.window_end,
                flagged: verdict.flagged,
                score: verdict.score,
                ver: verdict.model_version,
                reason: verdict.reason,
            });
            if verdict.flagged
                && self.mode == Mode::Proposed
                && self.reported.insert(verdict.device)
            {
                let est_pps = feature.total_packets as f64 / window.as_secs_f64();
                reports.push((verdict.device, est_pps));
            }
        }
        if !reports.is_empty() {
            // One window's worth of flagged devices travels as a single
            // batch so the responder can size one machine for all of them.
            self.schedule(t + latency, SimEvent::AnomalyAtMeo { reports });
        }
        self.flows.expire_flows(t);
        self.schedule(t + window, SimEvent::DetectorTick);
    }

    fn handle_model_swap(&mut self, t: SimTime, index: usize) {
        let model = self.scenario.model_updates[index].1.clone();
        let window = self.scenario.detector_window.as_micros();
        let first_end = SimTime::from_micros(t.as_micros().div_ceil(window) * window);
        let report = self
            .detector
            .swap_model(model, first_end)
            .expect("updates validated as strictly newer");
        self.records.push(LogRecord::Swap {
            t,
            old_ver: report.old_version,
            new_ver: report.new_version,
            win: report.first_window_end,
        });
    }

    // --- capacity and crashes ----------------------------------------------

    fn handle_capacity_window(&mut self, t: SimTime) {
        let window = self.scenario.crash_model.capacity_window;
        let factor = self.scenario.crash_model.overload_factor;
        for vm in self.host.overloaded(factor, window) {
            self.host.crash(vm).expect("overloaded machine was running");
            self.dpi.reset_vm(vm);
            let repairable = self
                .host
                .vm(vm)
                .is_some_and(|i| i.role.is_inspection_family());
            if let (Mode::Proposed, true) = (self.mode, repairable) {
                let mut orch = self.orchestrator.take().expect("proposed mode");
                let effects = orch.on_vm_crash(vm, t, &mut self.host);
                self.orchestrator = Some(orch);
                self.apply_effects(t, effects);
            } else {
                // Out of protocol scope: raise the alarm and leave it down.
                self.vm_snapshot(t, vm);
                self.records.push(LogRecord::Alarm {
                    t,
                    kind: "vm-crash".to_string(),
                    detail: vm.as_str().to_string(),
                });
            }
        }
        if self.mode == Mode::Baseline && self.inline_inspected > 0 {
            self.records.push(LogRecord::Inspect {
                t,
                vm: VmId::Vm1,
                pkts: self.inline_inspected,
            });
            self.inline_inspected = 0;
        }
        self.host.begin_window();
        if self.mode == Mode::Proposed {
            let mut orch = self.orchestrator.take().expect("proposed mode");
            let effects = orch.on_tick(t, &mut self.host);
            self.orchestrator = Some(orch);
            self.apply_effects(t, effects);
        }
        self.schedule(t + window, SimEvent::CapacityWindow);
    }

    // --- the management plane ----------------------------------------------

    fn handle_mgmt(&mut self, t: SimTime, msg: OrchMessage) {
        self.records.push(LogRecord::Msg {
            t,
            run: msg.run,
            step: msg.step,
            from: msg.from,
            to: msg.to,
            note: msg.note.to_string(),
        });
        let mut orch = self.orchestrator.take().expect("mgmt only in proposed mode");
        let effects = orch.on_message(&msg, t, &mut self.host);
        self.orchestrator = Some(orch);
        self.apply_effects(t, effects);
    }

    fn handle_vm_ready(&mut self, t: SimTime, vm: VmId) {
        let mut orch = self.orchestrator.take().expect("ready only in proposed mode");
        let effects = orch.on_vm_ready(vm, t, &mut self.host);
        self.orchestrator = Some(orch);
        self.apply_effects(t, effects);
    }

    fn handle_anomaly(&mut self, t: SimTime, reports: Vec<(DeviceId, f64)>) {
        for _ in &reports {
            self.records.push(LogRecord::Msg {
                t,
                run: 0,
                step: 0,
                from: Entity::Detector,
                to: Entity::Meo,
                note: "anomaly".to_string(),
            });
        }
        let mut orch = self.orchestrator.take().expect("proposed mode");
        let effects = orch.on_anomalies(&reports, t, &mut self.host);
        self.orchestrator = Some(orch);
        self.apply_effects(t, effects);
    }

    fn handle_verdict(&mut self, t: SimTime, device: DeviceId, is_attack: bool) {
        let orch_vm = self
            .orchestrator
            .as_ref()
            .expect("proposed mode")
            .dpi_vm();
        self.records.push(LogRecord::Msg {
            t,
            run: 0,
            step: 0,
            from: Entity::Vm(orch_vm),
            to: Entity::Mepm,
            note: if is_attack {
                "verdict-attack".to_string()
            } else {
                "verdict-cleared".to_string()
            },
        });
        let mut orch = self.orchestrator.take().expect("proposed mode");
        let effects = orch.on_dpi_verdict(device, is_attack, t);
        self.orchestrator = Some(orch);
        self.apply_effects(t, effects);
    }

    fn apply_effects(&mut self, t: SimTime, effects: Vec<OrchEffect>) {
        let latency = self.scenario.orchestration.msg_latency;
        for effect in effects {
            match effect {
                OrchEffect::Send(msg) => self.schedule(t + latency, SimEvent::Mgmt(msg)),
                OrchEffect::ScheduleReady { vm, at } => self.schedule(at, SimEvent::VmReady(vm)),
                OrchEffect::Reroute { device, to, cause } => {
                    let from = self.network.route(device).expect("routed device exists");
                    self.network
                        .reroute(device, to)
                        .expect("orchestrator only requests legal moves");
                    self.records.push(LogRecord::Reroute {
                        t,
                        dev: device,
                        from,
                        to,
                        cause: cause.to_string(),
                    });
                }
                OrchEffect::Suspend(devices) => self.suspended.extend(devices),
                OrchEffect::Release(devices) => {
                    for d in devices {
                        self.suspended.remove(&d);
                    }
                }
                OrchEffect::RunStarted { run, trigger, kind, devices } => {
                    self.records.push(LogRecord::RunStart {
                        t,
                        run,
                        trigger: trigger.to_string(),
                        kind: kind.to_string(),
                        devices,
                    });
                }
                OrchEffect::RunCompleted { run } => {
                    self.records.push(LogRecord::RunComplete { t, run });
                }
                OrchEffect::RunFailed { run, step, reason } => {
                    self.records.push(LogRecord::RunFailed {
                        t,
                        run,
                        step,
                        reason: reason.to_string(),
                    });
                }
                OrchEffect::Alarm { kind, detail } => {
                    self.records.push(LogRecord::Alarm {
                        t,
                        kind: kind.to_string(),
                        detail,
                    });
                }
                OrchEffect::VmChanged(vm) => self.vm_snapshot(t, vm),
            }
        }
    }

    fn vm_snapshot(&mut self, t: SimTime, vm: VmId) {
        if let Some(i) = self.host.vm(vm) {
            self.records.push(LogRecord::Vm {
                t,
                vm,
                status: i.status,
                role: i.role,
                spec: i.spec,
                free: self.host.free(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorModel, ModelKind, ThresholdParams};
    use crate::dpi::{DpiConfig, Signature};
    use crate::infra::ResourceSpec;
    use crate::scenario::{
        AttackPlan, CrashModel, DeviceSpec, OrchTiming, Vm4Setup,
    };
    use crate::trafficgen::{LengthDist, ProtocolMix, WorkloadProfile};

    fn threshold_model() -> DetectorModel {
        DetectorModel {
            version: 1,
            kind: ModelKind::Threshold(ThresholdParams {
                max_pps: 500.0,
                max_flows_per_window: 40,
                min_mean_packet_size: 40.0,
                watch_ports: [4444].into_iter().collect(),
            }),
        }
    }

    fn browsing() -> WorkloadProfile {
        WorkloadProfile {
            name: "browsing".to_string(),
            packet_rate: 20.0,
            length: LengthDist::Uniform { low: 200, high: 1400 },
            protocol_mix: ProtocolMix { tcp: 0.9, udp: 0.1, icmp: 0.0 },
            dst_ports: vec![80, 443, 8080],
        }
    }

    fn spec(cpu: u32, mem: u32) -> ResourceSpec {
        ResourceSpec { cpu_units: cpu, mem_units: mem }
    }

    /// A small host with two ordinary devices and no attack.
    fn quiet_scenario() -> Scenario {
        Scenario {
            name: "mini-quiet".to_string(),
            seed: 7,
            duration: SimTime::from_secs(12),
            host_capacity: spec(8, 8),
            base_vms: vec![
                (VmId::Vm1, VmRole::Services, spec(1, 1)),
                (VmId::Vm2, VmRole::FlowCollector, spec(1, 1)),
                (VmId::Vm3, VmRole::Detector, spec(1, 1)),
            ],
            vm4: Vm4Setup {
                policy: Vm4Policy::OnDemand { idle_stop_after: None },
                topology: crate::orchestrator::Vm4Topology::Combined,
                min_spec: spec(1, 1),
            },
            initial_model: threshold_model(),
            detector_window: SimTime::from_secs(4),
            flow_active_timeout: SimTime::from_secs(60),
            flow_inactive_timeout: SimTime::from_secs(15),
            dpi_config: DpiConfig { attack_match_threshold: 3, clear_min_packets: 50 },
            signatures: vec![Signature {
                id: "flood-payload".to_string(),
                tag: Some(PayloadTag::AttackSignature),
                dst_ports: None,
            }],
            workloads: [("browsing".to_string(), browsing())].into_iter().collect(),
            devices: vec![
                DeviceSpec {
                    id: DeviceId(1),
                    profile: DeviceProfile::Legitimate,
                    workload: Some("browsing".to_string()),
                    attach_at: SimTime::ZERO,
                },
                DeviceSpec {
                    id: DeviceId(2),
                    profile: DeviceProfile::Legitimate,
                    workload: Some("browsing".to_string()),
                    attach_at: SimTime::ZERO,
                },
            ],
            attack: None,
            orchestration: OrchTiming {
                msg_latency: SimTime::from_millis(10),
                boot_delay: SimTime::from_secs(2),
                reconfig_delay: SimTime::from_millis(500),
            },
            crash_model: CrashModel { overload_factor: 2.0, capacity_window: SimTime::from_secs(1) },
            model_updates: Vec::new(),
        }
    }

    /// The quiet scenario plus bots that beacon and then flood hard
    /// enough to crash the machine they land on.
    fn attack_scenario(bots: u32, rate: f64, crash: bool) -> Scenario {
        let mut sc = quiet_scenario();
        sc.name = "mini-attack".to_string();
        sc.duration = SimTime::from_secs(24);
        for i in 0..bots {
            sc.devices.push(DeviceSpec {
                id: DeviceId(100 + i),
                profile: DeviceProfile::Bot,
                workload: None,
                attach_at: SimTime::ZERO,
            });
        }
        sc.attack = Some(AttackPlan {
            start: SimTime::from_secs(10),
            stop: SimTime::from_secs(16),
            rate_per_bot: rate,
            dst_port: 80,
            length: 512,
            crash_payload: crash,
            beacon_period: Some(SimTime::from_secs(1)),
            beacon_lead: SimTime::from_secs(6),
            beacon_port: 4444,
        });
        if crash {
            // A crash study needs the flood to keep flowing: make the
            // payload matcher practically undecidable so no verdict ever
            // blocks or drops the bots first.
            sc.dpi_config.attack_match_threshold = 10_000_000;
        }
        sc
    }

    fn msgs_of_run(records: &[LogRecord], run_id: u32) -> Vec<(u8, String)> {
        records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Msg { run, step, note, .. } if *run == run_id => {
                    Some((*step, note.clone()))
                }
                _ => None,
            })
            .collect()
    }

    #[test]
    fn a_quiet_run_serves_everything_and_never_orchestrates() {
        let art = Simulation::run(quiet_scenario(), Mode::Proposed).unwrap();
        assert_eq!(art.metrics.legit.availability, Some(1.0));
        assert_eq!(art.metrics.runs.started, 0);
        assert_eq!(art.metrics.detection.flagged_devices, 0);
        assert!(art.metrics.legit.total_packets > 300, "two 20 pps devices over 12 s");
        // The log carries machine snapshots for the three base machines.
        let vm_records = art.records.iter().filter(|r| r.kind() == "vm").count();
        assert_eq!(vm_records, 3);
    }

    #[test]
    fn same_seed_same_digest_and_different_seed_different_digest() {
        let a = Simulation::run(quiet_scenario(), Mode::Proposed).unwrap();
        let b = Simulation::run(quiet_scenario(), Mode::Proposed).unwrap();
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.log_text, b.log_text);
        let mut other = quiet_scenario();
        other.seed = 8;
        let c = Simulation::run(other, Mode::Proposed).unwrap();
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn beacons_get_bots_quarantined_and_verdicts_drop_them() {
        let art = Simulation::run(attack_scenario(3, 200.0, false), Mode::Proposed).unwrap();
        // Beacons run 4 s..10 s; the window [4 s, 8 s) flags all three
        // bots at the 8 s tick via the watched port.
        let quarantines: Vec<_> = art
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Reroute { t, dev, to, cause, .. } if cause == "quarantine" => {
                    Some((*t, *dev, *to))
                }
                _ => None,
            })
            .collect();
        assert_eq!(quarantines.len(), 3);
        // Trigger at 8 s + one hop; rules land at step 8: T + 8L + boot.
        let expect_reroute =
            SimTime::from_micros(8_010_000 + 8 * 10_000 + 2_000_000);
        for (t, _, to) in &quarantines {
            assert_eq!(*t, expect_reroute);
            assert_eq!(*to, RouteTarget::Vm4);
        }
        // Flood starts at 10 s; three matching packets each settle it.
        assert_eq!(art.metrics.dpi.attack_verdicts, 3);
        assert_eq!(art.metrics.reroutes_by_cause["verdict-attack"], 3);
        assert_eq!(art.metrics.legit.availability, Some(1.0));
        // After the drop, flood packets die at the ingress.
        let dropped = art
            .records
            .iter()
            .filter(|r| matches!(r, LogRecord::Deliver { out: DeliveryOutcome::IngressDropped, .. }))
            .count();
        assert!(dropped > 100, "the rest of the flood is discarded, got {dropped}");
        let steps: Vec<u8> = msgs_of_run(&art.records, 1).iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![1, 2, 3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn an_overloaded_inspection_machine_crashes_and_is_restored_on_schedule() {
        // 4 bots * 6000 pps = 24000 flagged arrivals per second against a
        // 1-cpu machine: over the 2 * 10000 crash line every full window.
        let art = Simulation::run(attack_scenario(4, 6000.0, true), Mode::Proposed).unwrap();
        let crash_t = art
            .records
            .iter()
            .find_map(|r| match r {
                LogRecord::Vm { t, vm: VmId::Vm4, status: VmStatus::Crashed, .. } => Some(*t),
                _ => None,
            })
            .expect("the flood crashes the inspection machine");
        assert_eq!(crash_t, SimTime::from_secs(11), "first full flood window ends at 11 s");
        let restore_complete = art
            .records
            .iter()
            .find_map(|r| match r {
                LogRecord::RunComplete { t, run } if *run == 2 => Some(*t),
                _ => None,
            })
            .expect("restore run completes");
        // Crash + 9 hops + boot delay, to the microsecond.
        assert_eq!(restore_complete, crash_t + SimTime::from_micros(9 * 10_000 + 2_000_000));
        // The machine comes back at 13.02 s and the still-running flood
        // kills it again at 14 s, so two repair cycles happen in all.
        assert_eq!(art.metrics.vms["VM4"].crashes, 2);
        assert_eq!(art.metrics.vms["VM4"].restores, 2);
        // Each repair re-asserts quarantine for every parked bot.
        assert_eq!(art.metrics.reroutes_by_cause["requarantine"], 8);
        // The service machine never grazed any of this.
        assert_eq!(art.metrics.legit.availability, Some(1.0));
        assert!(art.metrics.vms.get("VM1").is_none_or(|m| m.crashes == 0));
    }

    #[test]
    fn baseline_blocks_attackers_at_ingress_but_keeps_inspecting_inline() {
        let art = Simulation::run(attack_scenario(3, 200.0, false), Mode::Baseline).unwrap();
        assert_eq!(art.metrics.runs.started, 0, "no management plane");
        assert_eq!(art.metrics.dpi.attack_verdicts, 3);
        assert_eq!(art.metrics.alarms_by_kind["ingress-block"], 3);
        assert!(art.metrics.reroutes_by_cause.is_empty(), "blocking is not rerouting");
        assert!(
            art.metrics.dpi.inline_inspected_packets > 0,
            "inline inspection is metered per window"
        );
        // Legit devices are also inspected until cleared.
        assert_eq!(art.metrics.dpi.cleared_verdicts, 2);
    }

    #[test]
    fn baseline_service_machine_dies_under_a_crash_flood_and_stays_down() {
        let art = Simulation::run(attack_scenario(4, 6000.0, true), Mode::Baseline).unwrap();
        let vm1 = &art.metrics.vms["VM1"];
        assert_eq!(vm1.crashes, 1);
        assert_eq!(vm1.restores, 0, "nothing repairs the service machine here");
        // Down from 11 s to the 24 s horizon.
        assert_eq!(vm1.outage_s, 13.0);
        let avail = art.metrics.legit.availability.unwrap();
        assert!(avail < 0.6, "most of the run is an outage, got {avail}");
    }

    #[test]
    fn legitimate_traffic_is_identical_with_and_without_the_attack() {
        let mut calm = quiet_scenario();
        calm.duration = SimTime::from_secs(24); // same horizon as the attack run
        let quiet = Simulation::run(calm, Mode::Proposed).unwrap();
        let noisy =
            Simulation::run(attack_scenario(3, 200.0, false), Mode::Proposed).unwrap();
        let legit_deliveries = |records: &[LogRecord]| -> Vec<String> {
            records
                .iter()
                .filter(|r| matches!(r, LogRecord::Deliver { dev, .. } if dev.0 < 100))
                .map(|r| r.to_string())
                .collect()
        };
        let a = legit_deliveries(&quiet.records);
        let b = legit_deliveries(&noisy.records);
        assert_eq!(a.len(), b.len());
        assert_eq!(a, b, "per-device streams keep bystander traffic untouched");
    }

    #[test]
    fn a_model_swap_mid_run_changes_versions_but_not_the_scored_windows() {
        let mut swapped = quiet_scenario();
        swapped.model_updates.push((
            SimTime::from_secs(6),
            DetectorModel { version: 2, ..threshold_model() },
        ));
        let plain = Simulation::run(quiet_scenario(), Mode::Proposed).unwrap();
        let with_swap = Simulation::run(swapped, Mode::Proposed).unwrap();
        let scored = |records: &[LogRecord]| -> Vec<(DeviceId, SimTime)> {
            records
                .iter()
                .filter_map(|r| match r {
                    LogRecord::Verdict { dev, win, .. } => Some((*dev, *win)),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(scored(&plain.records), scored(&with_swap.records));
        let swap = with_swap
            .records
            .iter()
            .find_map(|r| match r {
                LogRecord::Swap { old_ver, new_ver, win, .. } => Some((*old_ver, *new_ver, *win)),
                _ => None,
            })
            .expect("swap is logged");
        assert_eq!(swap, (1, 2, SimTime::from_secs(8)), "first window scored by v2 ends at 8 s");
    }
}
