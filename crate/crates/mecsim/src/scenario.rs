//! Scenario files: one TOML document describes a complete experiment:
//! the host, its machines, the detector and its model, traffic sources,
//! the attack plan, orchestration delays and the crash model.
//!
//! Loading is strict. Unknown fields fail with the field's name, model
//! files referenced by the scenario are resolved relative to the
//! scenario file and parsed eagerly, and every cross-reference (workload
//! names, device ids, attack windows) is checked before a simulation is
//! built. A [`Scenario`] value is therefore always runnable, whether it
//! came from disk or was assembled in code.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::detector::{self, DetectorModel};
use crate::dpi::{DpiConfig, Signature};
use crate::engine::SimTime;
use crate::infra::{ResourceSpec, VmId, VmRole};
use crate::netmodel::{DeviceId, DeviceProfile};
use crate::orchestrator::{Vm4Policy, Vm4Topology};
use crate::trafficgen::WorkloadProfile;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario does not parse: {0}")]
    Toml(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("model file {path}: {source}")]
    Model {
        path: PathBuf,
        source: detector::DetectorError,
    },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// Convert a seconds field to simulation time, rejecting garbage.
fn secs(field: &str, value: f64) -> Result<SimTime, ScenarioError> {
    if !value.is_finite() || value < 0.0 {
        return Err(invalid(format!(
            "{field} must be a finite non-negative number of seconds, got {value}"
        )));
    }
    Ok(SimTime::from_micros((value * 1e6).round() as u64))
}

// --- raw file shape ----------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    seed: u64,
    duration_s: f64,
    host: HostSection,
    vms: Vec<VmSection>,
    vm4: Vm4Section,
    detector: DetectorSection,
    #[serde(default)]
    flows: FlowsSection,
    dpi: DpiSection,
    #[serde(default)]
    workloads: Vec<WorkloadProfile>,
    #[serde(default)]
    device_groups: Vec<DeviceGroupSection>,
    attack: Option<AttackSection>,
    #[serde(default)]
    orchestration: OrchSection,
    #[serde(default)]
    crash_model: CrashSection,
    #[serde(default)]
    model_updates: Vec<ModelUpdateSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HostSection {
    cpu_units: u32,
    mem_units: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VmSection {
    id: String,
    role: String,
    cpu: u32,
    mem: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Vm4Section {
    mode: String,
    topology: String,
    #[serde(default = "one")]
    min_cpu: u32,
    #[serde(default = "one")]
    min_mem: u32,
    idle_stop_after_s: Option<f64>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorSection {
    model: String,
    #[serde(default = "default_window")]
    window_s: f64,
}

fn default_window() -> f64 {
    5.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowsSection {
    #[serde(default = "default_active_timeout")]
    active_timeout_s: f64,
    #[serde(default = "default_inactive_timeout")]
    inactive_timeout_s: f64,
}

fn default_active_timeout() -> f64 {
    60.0
}

fn default_inactive_timeout() -> f64 {
    15.0
}

impl Default for FlowsSection {
    fn default() -> Self {
        FlowsSection {
            active_timeout_s: default_active_timeout(),
            inactive_timeout_s: default_inactive_timeout(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DpiSection {
    attack_match_threshold: Option<u64>,
    clear_min_packets: Option<u64>,
    signatures: Vec<Signature>,
}

impl DpiSection {
    fn config(&self) -> DpiConfig {
        let defaults = DpiConfig::default();
        DpiConfig {
            attack_match_threshold: self
                .attack_match_threshold
                .unwrap_or(defaults.attack_match_threshold),
            clear_min_packets: self.clear_min_packets.unwrap_or(defaults.clear_min_packets),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceGroupSection {
    first_id: u32,
    count: u32,
    profile: DeviceProfile,
    workload: Option<String>,
    attach_at_s: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackSection {
    start_s: f64,
    stop_s: f64,
    rate_per_bot: f64,
    #[serde(default = "default_flood_port")]
    dst_port: u16,
    #[serde(default = "default_flood_length")]
    length: u16,
    #[serde(default)]
    crash_payload: bool,
    beacon_period_s: Option<f64>,
    #[serde(default)]
    beacon_lead_s: f64,
    #[serde(default = "default_beacon_port")]
    beacon_port: u16,
}

fn default_flood_port() -> u16 {
    80
}

fn default_flood_length() -> u16 {
    512
}

fn default_beacon_port() -> u16 {
    4444
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OrchSection {
    #[serde(default = "default_latency")]
    msg_latency_s: f64,
    #[serde(default = "default_boot")]
    boot_delay_s: f64,
    #[serde(default = "default_reconfig")]
    reconfig_delay_s: f64,
}

fn default_latency() -> f64 {
    0.01
}

fn default_boot() -> f64 {
    2.0
}

fn default_reconfig() -> f64 {
    0.5
}

impl Default for OrchSection {
    fn default() -> Self {
        OrchSection {
            msg_latency_s: default_latency(),
            boot_delay_s: default_boot(),
            reconfig_delay_s: default_reconfig(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CrashSection {
    #[serde(default = "default_overload")]
    overload_factor: f64,
    #[serde(default = "default_capacity_window")]
    capacity_window_s: f64,
}

fn default_overload() -> f64 {
    2.0
}

fn default_capacity_window() -> f64 {
    1.0
}

impl Default for CrashSection {
    fn default() -> Self {
        CrashSection {
            overload_factor: default_overload(),
            capacity_window_s: default_capacity_window(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelUpdateSection {
    at_s: f64,
    model: String,
}

// --- validated form ----------------------------------------------------

/// One device to attach, already expanded from its group.
#[derive(Clone, PartialEq, Debug)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub profile: DeviceProfile,
    /// Workload name; present exactly for legitimate devices.
    pub workload: Option<String>,
    pub attach_at: SimTime,
}

/// The attack plan shared by every bot and direct attacker.
#[derive(Clone, PartialEq, Debug)]
pub struct AttackPlan {
    pub start: SimTime,
    pub stop: SimTime,
    pub rate_per_bot: f64,
    pub dst_port: u16,
    pub length: u16,
    pub crash_payload: bool,
    pub beacon_period: Option<SimTime>,
    pub beacon_lead: SimTime,
    pub beacon_port: u16,
}

#[derive(Clone, Debug)]
pub struct Vm4Setup {
    pub policy: Vm4Policy,
    pub topology: Vm4Topology,
    pub min_spec: ResourceSpec,
}

#[derive(Clone, Debug)]
pub struct OrchTiming {
    pub msg_latency: SimTime,
    pub boot_delay: SimTime,
    pub reconfig_delay: SimTime,
}

#[derive(Clone, Debug)]
pub struct CrashModel {
    pub overload_factor: f64,
    pub capacity_window: SimTime,
}

/// A fully validated experiment description.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: SimTime,
    pub host_capacity: ResourceSpec,
    pub base_vms: Vec<(VmId, VmRole, ResourceSpec)>,
    pub vm4: Vm4Setup,
    pub initial_model: DetectorModel,
    pub detector_window: SimTime,
    pub flow_active_timeout: SimTime,
    pub flow_inactive_timeout: SimTime,
    pub dpi_config: DpiConfig,
    pub signatures: Vec<Signature>,
    pub workloads: BTreeMap<String, WorkloadProfile>,
    pub devices: Vec<DeviceSpec>,
    pub attack: Option<AttackPlan>,
    pub orchestration: OrchTiming,
    pub crash_model: CrashModel,
    pub model_updates: Vec<(SimTime, DetectorModel)>,
}

impl Scenario {
    /// Read and validate a scenario file; referenced model files resolve
    /// relative to it.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Scenario::parse(&text, base)
    }

    /// Parse scenario text; `base` anchors relative model paths.
    pub fn parse(text: &str, base: &Path) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Toml(e.to_string()))?;
        validate(file, base)
    }

    pub fn malicious_devices(&self) -> impl Iterator<Item = &DeviceSpec> {
        self.devices.iter().filter(|d| d.profile.is_malicious())
    }
}

fn load_model_at(base: &Path, rel: &str) -> Result<DetectorModel, ScenarioError> {
    let path = base.join(rel);
    detector::load_model(&path).map_err(|source| ScenarioError::Model { path, source })
}

fn validate(file: ScenarioFile, base: &Path) -> Result<Scenario, ScenarioError> {
    if file.name.is_empty() || file.name.contains(char::is_whitespace) {
        return Err(invalid("name must be a non-empty token without spaces"));
    }
    let duration = secs("duration_s", file.duration_s)?;
    if duration == SimTime::ZERO {
        return Err(invalid("duration_s must be positive"));
    }

    let host_capacity = ResourceSpec {
        cpu_units: file.host.cpu_units,
        mem_units: file.host.mem_units,
    };
    if host_capacity.cpu_units == 0 || host_capacity.mem_units == 0 {
        return Err(invalid("host capacity must be at least 1cpu/1mem"));
    }

    // The three base machines, exactly, with their canonical roles.
    let mut base_vms = Vec::new();
    let mut seen_vms = BTreeSet::new();
    for vm in &file.vms {
        let id = VmId::parse(&vm.id)
            .ok_or_else(|| invalid(format!("[[vms]] id {:?} is not a known machine", vm.id)))?;
        if matches!(id, VmId::Vm4 | VmId::Vm4a | VmId::Vm4b) {
            return Err(invalid(format!(
                "[[vms]] must not declare {}: the inspection machines are managed by [vm4]",
                vm.id
            )));
        }
        let role = VmRole::parse(&vm.role)
            .ok_or_else(|| invalid(format!("[[vms]] role {:?} is not a known role", vm.role)))?;
        let expected = match id {
            VmId::Vm1 => VmRole::Services,
            VmId::Vm2 => VmRole::FlowCollector,
            VmId::Vm3 => VmRole::Detector,
            _ => unreachable!("inspection ids rejected above"),
        };
        if role != expected {
            return Err(invalid(format!(
                "[[vms]] {} must have role {:?}, got {:?}",
                vm.id,
                expected.as_str(),
                vm.role
            )));
        }
        if !seen_vms.insert(id) {
            return Err(invalid(format!("[[vms]] declares {} twice", vm.id)));
        }
        if vm.cpu == 0 || vm.mem == 0 {
            return Err(invalid(format!("[[vms]] {} needs cpu and mem >= 1", vm.id)));
        }
        base_vms.push((
            id,
            role,
            ResourceSpec { cpu_units: vm.cpu, mem_units: vm.mem },
        ));
    }
    for required in [VmId::Vm1, VmId::Vm2, VmId::Vm3] {
        if !seen_vms.contains(&required) {
            return Err(invalid(format!(
                "[[vms]] must declare {}",
                required.as_str()
            )));
        }
    }

    let policy = match file.vm4.mode.as_str() {
        "on-demand" => Vm4Policy::OnDemand {
            idle_stop_after: file
                .vm4
                .idle_stop_after_s
                .map(|s| secs("vm4.idle_stop_after_s", s))
                .transpose()?,
        },
        "permanent" => {
            if file.vm4.idle_stop_after_s.is_some() {
                return Err(invalid(
                    "vm4.idle_stop_after_s only applies to mode = \"on-demand\"",
                ));
            }
            Vm4Policy::Permanent
        }
        other => {
            return Err(invalid(format!(
                "vm4.mode must be \"on-demand\" or \"permanent\", got {other:?}"
            )))
        }
    };
    let topology = match file.vm4.topology.as_str() {
        "combined" => Vm4Topology::Combined,
        "split" => Vm4Topology::Split,
        other => {
            return Err(invalid(format!(
                "vm4.topology must be \"combined\" or \"split\", got {other:?}"
            )))
        }
    };
    if file.vm4.min_cpu == 0 || file.vm4.min_mem == 0 {
        return Err(invalid("vm4.min_cpu and vm4.min_mem must be >= 1"));
    }
    let vm4 = Vm4Setup {
        policy,
        topology,
        min_spec: ResourceSpec {
            cpu_units: file.vm4.min_cpu,
            mem_units: file.vm4.min_mem,
        },
    };

    let initial_model = load_model_at(base, &file.detector.model)?;
    let detector_window = secs("detector.window_s", file.detector.window_s)?;
    if detector_window == SimTime::ZERO {
        return Err(invalid("detector.window_s must be positive"));
    }

    let flow_active_timeout = secs("flows.active_timeout_s", file.flows.active_timeout_s)?;
    let flow_inactive_timeout = secs("flows.inactive_timeout_s", file.flows.inactive_timeout_s)?;
    if flow_active_timeout == SimTime::ZERO || flow_inactive_timeout == SimTime::ZERO {
        return Err(invalid("flow timeouts must be positive"));
    }

    let mut workloads = BTreeMap::new();
    for w in file.workloads {
        crate::trafficgen::validate_profile(&w)
            .map_err(|e| invalid(format!("[[workloads]] {e}")))?;
        if workloads.insert(w.name.clone(), w).is_some() {
            return Err(invalid("[[workloads]] names must be unique"));
        }
    }

    let mut devices = Vec::new();
    let mut seen_devices = BTreeSet::new();
    let mut has_malicious = false;
    for (i, g) in file.device_groups.iter().enumerate() {
        if g.count == 0 {
            return Err(invalid(format!("[[device_groups]] #{i}: count must be >= 1")));
        }
        match (g.profile, &g.workload) {
            (DeviceProfile::Legitimate, None) => {
                return Err(invalid(format!(
                    "[[device_groups]] #{i}: legit devices need a workload"
                )))
            }
            (DeviceProfile::Legitimate, Some(name)) if !workloads.contains_key(name) => {
                return Err(invalid(format!(
                    "[[device_groups]] #{i}: workload {name:?} is not declared"
                )))
            }
            (DeviceProfile::Bot | DeviceProfile::AttackerDirect, Some(_)) => {
                return Err(invalid(format!(
                    "[[device_groups]] #{i}: attack devices do not take a workload"
                )))
            }
            _ => {}
        }
        if g.profile.is_malicious() {
            has_malicious = true;
        }
        let attach_at = g
            .attach_at_s
            .map(|s| secs("attach_at_s", s))
            .transpose()?
            .unwrap_or(SimTime::ZERO);
        for offset in 0..g.count {
            let raw = g.first_id.checked_add(offset).ok_or_else(|| {
                invalid(format!("[[device_groups]] #{i}: device id overflows"))
            })?;
            if raw > DeviceId::MAX {
                return Err(invalid(format!(
                    "[[device_groups]] #{i}: device id {raw} exceeds the {} limit",
                    DeviceId::MAX
                )));
            }
            if !seen_devices.insert(raw) {
                return Err(invalid(format!(
                    "device id {raw} appears in more than one group"
                )));
            }
            devices.push(DeviceSpec {
                id: DeviceId(raw),
                profile: g.profile,
                workload: g.workload.clone(),
                attach_at,
            });
        }
    }

    let attack = match (file.attack, has_malicious) {
        (None, true) => {
            return Err(invalid(
                "bot or attacker devices are declared but there is no [attack] section",
            ))
        }
        (Some(_), false) => {
            return Err(invalid(
                "[attack] is declared but no bot or attacker devices exist",
            ))
        }
        (None, false) => None,
        (Some(a), true) => {
            let start = secs("attack.start_s", a.start_s)?;
            let stop = secs("attack.stop_s", a.stop_s)?;
            if start >= stop {
                return Err(invalid(format!(
                    "attack window is empty: start_s {} >= stop_s {}",
                    a.start_s, a.stop_s
                )));
            }
            if !(a.rate_per_bot > 0.0) {
                return Err(invalid("attack.rate_per_bot must be positive"));
            }
            let beacon_period = a
                .beacon_period_s
                .map(|s| secs("attack.beacon_period_s", s))
                .transpose()?;
            if beacon_period == Some(SimTime::ZERO) {
                return Err(invalid("attack.beacon_period_s must be positive"));
            }
            let beacon_lead = secs("attack.beacon_lead_s", a.beacon_lead_s)?;
            if beacon_period.is_some() && beacon_lead == SimTime::ZERO {
                return Err(invalid(
                    "attack.beacon_lead_s must be positive when beacons are enabled",
                ));
            }
            Some(AttackPlan {
                start,
                stop,
                rate_per_bot: a.rate_per_bot,
                dst_port: a.dst_port,
                length: a.length,
                crash_payload: a.crash_payload,
                beacon_period,
                beacon_lead,
                beacon_port: a.beacon_port,
            })
        }
    };

    let orchestration = OrchTiming {
        msg_latency: secs("orchestration.msg_latency_s", file.orchestration.msg_latency_s)?,
        boot_delay: secs("orchestration.boot_delay_s", file.orchestration.boot_delay_s)?,
        reconfig_delay: secs(
            "orchestration.reconfig_delay_s",
            file.orchestration.reconfig_delay_s,
        )?,
    };
    if orchestration.msg_latency == SimTime::ZERO {
        return Err(invalid("orchestration.msg_latency_s must be positive"));
    }

    if !(file.crash_model.overload_factor > 0.0) {
        return Err(invalid("crash_model.overload_factor must be positive"));
    }
    let crash_model = CrashModel {
        overload_factor: file.crash_model.overload_factor,
        capacity_window: secs(
            "crash_model.capacity_window_s",
            file.crash_model.capacity_window_s,
        )?,
    };
    if crash_model.capacity_window == SimTime::ZERO {
        return Err(invalid("crash_model.capacity_window_s must be positive"));
    }

    let mut model_updates = Vec::new();
    let mut last_at = None;
    let mut last_version = initial_model.version;
    for (i, u) in file.model_updates.iter().enumerate() {
        let at = secs("model_updates.at_s", u.at_s)?;
        if let Some(prev) = last_at {
            if at <= prev {
                return Err(invalid(format!(
                    "[[model_updates]] #{i}: times must strictly increase"
                )));
            }
        }
        last_at = Some(at);
        let model = load_model_at(base, &u.model)?;
        if model.version <= last_version {
            return Err(invalid(format!(
                "[[model_updates]] #{i}: version {} does not exceed {}",
                model.version, last_version
            )));
        }
        last_version = model.version;
        model_updates.push((at, model));
    }

    let dpi_config = file.dpi.config();
    crate::dpi::DpiEngine::new(dpi_config, file.dpi.signatures.clone())
        .map_err(|e| invalid(format!("[dpi] {e}")))?;

    Ok(Scenario {
        name: file.name,
        seed: file.seed,
        duration,
        host_capacity,
        base_vms,
        vm4,
        initial_model,
        detector_window,
        flow_active_timeout,
        flow_inactive_timeout,
        dpi_config,
        signatures: file.dpi.signatures,
        workloads,
        devices,
        attack,
        orchestration,
        crash_model,
        model_updates,
    })
}
