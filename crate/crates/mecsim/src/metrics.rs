//! Post-run analysis. The report is a pure function of the event log:
//! every number here can be recomputed by parsing `events.log` again,
//! which is exactly what the verification tests do.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::engine::SimTime;
use crate::eventlog::LogRecord;
use crate::netmodel::{DeliveryOutcome, DeviceId, PayloadTag, RouteTarget};

/// Who produced the log being summarized.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunIdentity {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub digest: String,
}

/// Service quality seen by legitimate devices (ground truth from the
/// attach records, not from the detector).
#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct ServiceMetrics {
    pub total_packets: u64,
    pub served_packets: u64,
    pub degraded_packets: u64,
    pub loss_packets: u64,
    pub dropped_packets: u64,
    /// served / total; absent when no legitimate packet was sent.
    pub availability: Option<f64>,
    /// Packets of legitimate devices handled by a machine other than the
    /// main service machine (quarantined false positives).
    pub served_off_vm1: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct DetectionMetrics {
    pub first_malicious_activity_s: Option<f64>,
    pub first_flag_s: Option<f64>,
    /// First flagged verdict minus first malicious packet on the wire.
    pub detection_latency_s: Option<f64>,
    pub first_quarantine_s: Option<f64>,
    /// First quarantine reroute minus first flagged verdict.
    pub isolation_latency_s: Option<f64>,
    pub flagged_devices: u64,
    /// Flagged malicious devices over all malicious devices.
    pub true_positive_rate: Option<f64>,
    /// Flagged legitimate devices over all legitimate devices.
    pub false_positive_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct VmMetrics {
    pub crashes: u64,
    pub restores: u64,
    /// Total time spent crashed or rebooting after a crash.
    pub outage_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct FlowMetrics {
    pub exported_records: u64,
    pub exported_bytes: u64,
    pub observed_packets: u64,
    pub observed_bytes: u64,
    pub packet_ratio: Option<f64>,
    pub byte_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct DpiMetrics {
    pub attack_verdicts: u64,
    pub cleared_verdicts: u64,
    /// Packets deep-inspected on a machine that also serves traffic
    /// (only the non-orchestrated deployment reports these).
    pub inline_inspected_packets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Default)]
pub struct RunTally {
    pub started: u64,
    pub completed: u64,
    pub failed: u64,
    pub by_kind: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub identity: RunIdentity,
    pub duration_s: f64,
    pub legit: ServiceMetrics,
    pub detection: DetectionMetrics,
    pub vms: BTreeMap<String, VmMetrics>,
    pub flows: FlowMetrics,
    pub dpi: DpiMetrics,
    pub runs: RunTally,
    pub reroutes_by_cause: BTreeMap<String, u64>,
    pub alarms_by_kind: BTreeMap<String, u64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    /// Digest the log. `duration` is the run horizon (open outages are
    /// charged up to it).
    pub fn compute(records: &[LogRecord], duration: SimTime, identity: RunIdentity) -> Self {
        let mut legit_devices: BTreeSet<DeviceId> = BTreeSet::new();
        let mut malicious_devices: BTreeSet<DeviceId> = BTreeSet::new();
        let mut legit = ServiceMetrics::default();
        let mut detection = DetectionMetrics::default();
        let mut flagged: BTreeSet<DeviceId> = BTreeSet::new();
        let mut vms: BTreeMap<String, VmMetrics> = BTreeMap::new();
        // Open crash interval per machine: when the crash was observed.
        let mut down_since: BTreeMap<String, SimTime> = BTreeMap::new();
        let mut flows = FlowMetrics::default();
        let mut dpi = DpiMetrics::default();
        let mut runs = RunTally::default();
        let mut reroutes_by_cause: BTreeMap<String, u64> = BTreeMap::new();
        let mut alarms_by_kind: BTreeMap<String, u64> = BTreeMap::new();
        let mut first_malicious: Option<SimTime> = None;
        let mut first_flag: Option<SimTime> = None;
        let mut first_quarantine: Option<SimTime> = None;

        for record in records {
            match record {
                LogRecord::Attach { dev, profile, .. } => {
                    if profile.is_malicious() {
                        malicious_devices.insert(*dev);
                    } else {
                        legit_devices.insert(*dev);
                    }
                }
                LogRecord::Deliver { t, dev, vm, out, tag, .. } => {
                    if *tag != PayloadTag::Normal && first_malicious.is_none() {
                        first_malicious = Some(*t);
                    }
                    if legit_devices.contains(dev) {
                        legit.total_packets += 1;
                        match out {
                            DeliveryOutcome::Served => {
                                legit.served_packets += 1;
                                if *vm != RouteTarget::Vm1 {
                                    legit.served_off_vm1 += 1;
                                }
                            }
                            DeliveryOutcome::Degraded => legit.degraded_packets += 1,
                            DeliveryOutcome::ServiceLoss => legit.loss_packets += 1,
                            DeliveryOutcome::IngressDropped => legit.dropped_packets += 1,
                        }
                    }
                }
                LogRecord::Verdict { t, dev, flagged: is_flagged, .. } => {
                    if *is_flagged {
                        flagged.insert(*dev);
                        if first_flag.is_none() {
                            first_flag = Some(*t);
                        }
                    }
                }
                LogRecord::Reroute { t, cause, .. } => {
                    *reroutes_by_cause.entry(cause.clone()).or_insert(0) += 1;
                    if cause == "quarantine" && first_quarantine.is_none() {
                        first_quarantine = Some(*t);
                    }
                }
                LogRecord::Vm { t, vm, status, .. } => {
                    let name = vm.as_str().to_string();
                    let entry = vms.entry(name.clone()).or_default();
                    match status {
                        crate::infra::VmStatus::Crashed => {
                            entry.crashes += 1;
                            down_since.entry(name).or_insert(*t);
                        }
                        crate::infra::VmStatus::Running => {
                            if let Some(since) = down_since.remove(&name) {
                                entry.restores += 1;
                                entry.outage_s += (*t - since).as_secs_f64();
                            }
                        }
                        _ => {}
                    }
                }
                LogRecord::FlowSummary { records, exported_bytes, packets, bytes, .. } => {
                    flows.exported_records = *records;
                    flows.exported_bytes = *exported_bytes;
                    flows.observed_packets = *packets;
                    flows.observed_bytes = *bytes;
                }
                LogRecord::Dpi { decision, .. } => match decision {
                    crate::dpi::DpiDecision::Attack => dpi.attack_verdicts += 1,
                    crate::dpi::DpiDecision::Cleared => dpi.cleared_verdicts += 1,
                    crate::dpi::DpiDecision::Undecided => {}
                },
                LogRecord::Inspect { pkts, .. } => dpi.inline_inspected_packets += pkts,
                LogRecord::RunStart { kind, .. } => {
                    runs.started += 1;
                    *runs.by_kind.entry(kind.clone()).or_insert(0) += 1;
                }
                LogRecord::RunComplete { .. } => runs.completed += 1,
                LogRecord::RunFailed { .. } => runs.failed += 1,
                LogRecord::Alarm { kind, .. } => {
                    *alarms_by_kind.entry(kind.clone()).or_insert(0) += 1;
                }
                _ => {}
            }
        }

        // Machines still down at the horizon.
        for (name, since) in down_since {
            vms.entry(name).or_default().outage_s += (duration - since).as_secs_f64();
        }

        legit.availability = ratio(legit.served_packets, legit.total_packets);
        flows.packet_ratio = ratio(flows.exported_records, flows.observed_packets);
        flows.byte_ratio = (flows.observed_bytes > 0)
            .then(|| flows.exported_bytes as f64 / flows.observed_bytes as f64);

        // Subtracting in whole microseconds keeps these exact; a pair of
        // f64 conversions first would smear the low bits.
        let gap = |earlier: SimTime, later: SimTime| {
            (later.as_micros() as i64 - earlier.as_micros() as i64) as f64 / 1e6
        };
        detection.first_malicious_activity_s = first_malicious.map(SimTime::as_secs_f64);
        detection.first_flag_s = first_flag.map(SimTime::as_secs_f64);
        detection.detection_latency_s = match (first_malicious, first_flag) {
            (Some(a), Some(f)) => Some(gap(a, f)),
            _ => None,
        };
        detection.first_quarantine_s = first_quarantine.map(SimTime::as_secs_f64);
        detection.isolation_latency_s = match (first_flag, first_quarantine) {
            (Some(f), Some(q)) => Some(gap(f, q)),
            _ => None,
        };
        detection.flagged_devices = flagged.len() as u64;
        detection.true_positive_rate = ratio(
            flagged.intersection(&malicious_devices).count() as u64,
            malicious_devices.len() as u64,
        );
        detection.false_positive_rate = ratio(
            flagged.intersection(&legit_devices).count() as u64,
            legit_devices.len() as u64,
        );

        MetricsReport {
            identity,
            duration_s: duration.as_secs_f64(),
            legit,
            detection,
            vms,
            flows,
            dpi,
            runs,
            reroutes_by_cause,
            alarms_by_kind,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog;
    use crate::infra::{ResourceSpec, VmId, VmRole, VmStatus};
    use crate::netmodel::{DeviceProfile, Protocol};

    fn identity() -> RunIdentity {
        RunIdentity {
            scenario: "t".into(),
            seed: 1,
            mode: "proposed".into(),
            digest: "d".into(),
        }
    }

    fn deliver(t_us: u64, dev: u32, vm: RouteTarget, out: DeliveryOutcome, tag: PayloadTag) -> LogRecord {
        LogRecord::Deliver {
            t: SimTime::from_micros(t_us),
            dev: DeviceId(dev),
            vm,
            out,
            proto: Protocol::Udp,
            len: 100,
            tag,
            sport: 1,
            dport: 2,
        }
    }

    fn sample_records() -> Vec<LogRecord> {
        use DeliveryOutcome::*;
        use RouteTarget::*;
        vec![
            LogRecord::Attach {
                t: SimTime::ZERO,
                dev: DeviceId(1),
                profile: DeviceProfile::Legitimate,
                ip: DeviceId(1).ip(),
            },
            LogRecord::Attach {
                t: SimTime::ZERO,
                dev: DeviceId(9),
                profile: DeviceProfile::Bot,
                ip: DeviceId(9).ip(),
            },
            deliver(1_000_000, 1, Vm1, Served, PayloadTag::Normal),
            deliver(2_000_000, 9, Vm1, Served, PayloadTag::AttackSignature),
            deliver(3_000_000, 1, Vm1, Degraded, PayloadTag::Normal),
            LogRecord::Verdict {
                t: SimTime::from_secs(5),
                dev: DeviceId(9),
                src: DeviceId(9).ip(),
                win: SimTime::from_secs(5),
                flagged: true,
                score: 9.0,
                ver: 1,
                reason: Some(crate::detector::FlagReason::RateExceeded),
            },
            LogRecord::Reroute {
                t: SimTime::from_micros(5_100_000),
                dev: DeviceId(9),
                from: Vm1,
                to: Vm4,
                cause: "quarantine".into(),
            },
            deliver(6_000_000, 1, Vm1, Served, PayloadTag::Normal),
            LogRecord::Vm {
                t: SimTime::from_secs(7),
                vm: VmId::Vm4,
                status: VmStatus::Crashed,
                role: VmRole::DpiAndQuarantine,
                spec: ResourceSpec { cpu_units: 1, mem_units: 1 },
                free: ResourceSpec { cpu_units: 12, mem_units: 12 },
            },
            LogRecord::Vm {
                t: SimTime::from_secs(9),
                vm: VmId::Vm4,
                status: VmStatus::Running,
                role: VmRole::DpiAndQuarantine,
                spec: ResourceSpec { cpu_units: 1, mem_units: 1 },
                free: ResourceSpec { cpu_units: 12, mem_units: 12 },
            },
        ]
    }

    #[test]
    fn the_sample_log_digests_to_the_expected_numbers() {
        let report =
            MetricsReport::compute(&sample_records(), SimTime::from_secs(10), identity());
        assert_eq!(report.legit.total_packets, 3);
        assert_eq!(report.legit.served_packets, 2);
        assert_eq!(report.legit.availability, Some(2.0 / 3.0));
        // Bot activity starts at 2 s, flagged at 5 s, quarantined at 5.1 s.
        assert_eq!(report.detection.detection_latency_s, Some(3.0));
        assert_eq!(report.detection.isolation_latency_s, Some(0.1));
        assert_eq!(report.detection.true_positive_rate, Some(1.0));
        assert_eq!(report.detection.false_positive_rate, Some(0.0));
        let vm4 = &report.vms["VM4"];
        assert_eq!(vm4.crashes, 1);
        assert_eq!(vm4.restores, 1);
        assert_eq!(vm4.outage_s, 2.0);
        assert_eq!(report.reroutes_by_cause["quarantine"], 1);
    }

    #[test]
    fn open_outages_are_charged_to_the_horizon() {
        let mut records = sample_records();
        records.pop(); // drop the restore record
        let report = MetricsReport::compute(&records, SimTime::from_secs(10), identity());
        let vm4 = &report.vms["VM4"];
        assert_eq!(vm4.crashes, 1);
        assert_eq!(vm4.restores, 0);
        assert_eq!(vm4.outage_s, 3.0);
    }

    #[test]
    fn empty_categories_stay_none_instead_of_dividing_by_zero() {
        let report = MetricsReport::compute(&[], SimTime::from_secs(1), identity());
        assert_eq!(report.legit.availability, None);
        assert_eq!(report.detection.true_positive_rate, None);
        assert_eq!(report.detection.detection_latency_s, None);
        assert_eq!(report.flows.packet_ratio, None);
    }

    #[test]
    fn the_report_survives_a_render_parse_round_trip_of_the_log() {
        let records = sample_records();
        let text = eventlog::render_log(&records);
        let reparsed = eventlog::parse_log(&text).unwrap();
        let a = MetricsReport::compute(&records, SimTime::from_secs(10), identity());
        let b = MetricsReport::compute(&reparsed, SimTime::from_secs(10), identity());
        assert_eq!(a, b);
    }

    #[test]
    fn the_json_form_is_stable_enough_to_parse_back() {
        let report =
            MetricsReport::compute(&sample_records(), SimTime::from_secs(10), identity());
        let value: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(value["legit"]["served_packets"], 2);
        assert_eq!(value["identity"]["mode"], "proposed");
        assert!(value["detection"]["isolation_latency_s"].is_f64());
    }
}
