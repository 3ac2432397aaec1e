//! The structured event log every run writes.
//!
//! One record per line, `key=value` tokens separated by single spaces,
//! with a fixed field order per record kind:
//!
//! ```text
//! t=<micros> mod=<module> ev=<kind> <kind-specific fields...>
//! ```
//!
//! The log is the run's source of truth: the metrics report is a pure
//! digest of these records and every line parses back into the
//! [`LogRecord`] it was rendered from, so external tooling can recompute
//! anything the simulator claims. Absent optional values render as `-`.

use std::fmt;
use std::net::Ipv4Addr;

use sha2::{Digest, Sha256};

use crate::detector::FlagReason;
use crate::dpi::DpiDecision;
use crate::engine::SimTime;
use crate::infra::{ResourceSpec, VmId, VmRole, VmStatus};
use crate::netmodel::{
    DeliveryOutcome, DeviceId, DeviceProfile, PayloadTag, Protocol, RouteTarget,
};

/// A party that can send or receive an orchestration message.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Entity {
    Meo,
    Mepm,
    Vim,
    /// The virtualization infrastructure under the VIM.
    Vi,
    /// The anomaly detector (VM3).
    Detector,
    Vm(VmId),
}

impl Entity {
    pub fn as_str(self) -> &'static str {
        match self {
            Entity::Meo => "MEO",
            Entity::Mepm => "MEPM",
            Entity::Vim => "VIM",
            Entity::Vi => "VI",
            Entity::Detector => "DET",
            Entity::Vm(id) => id.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MEO" => Some(Entity::Meo),
            "MEPM" => Some(Entity::Mepm),
            "VIM" => Some(Entity::Vim),
            "VI" => Some(Entity::Vi),
            "DET" => Some(Entity::Detector),
            other => VmId::parse(other).map(Entity::Vm),
        }
    }
}

/// Everything a simulation run can report, in renderable form.
#[derive(Clone, PartialEq, Debug)]
pub enum LogRecord {
    Attach {
        t: SimTime,
        dev: DeviceId,
        profile: DeviceProfile,
        ip: Ipv4Addr,
    },
    AttackSched {
        t: SimTime,
        dev: DeviceId,
        start: SimTime,
        stop: SimTime,
        rate: f64,
        beacons: u64,
    },
    Deliver {
        t: SimTime,
        dev: DeviceId,
        vm: RouteTarget,
        out: DeliveryOutcome,
        proto: Protocol,
        len: u16,
        tag: PayloadTag,
        sport: u16,
        dport: u16,
    },
    FlowSummary {
        t: SimTime,
        records: u64,
        exported_bytes: u64,
        packets: u64,
        bytes: u64,
    },
    Verdict {
        t: SimTime,
        dev: DeviceId,
        src: Ipv4Addr,
        win: SimTime,
        flagged: bool,
        score: f64,
        ver: u32,
        reason: Option<FlagReason>,
    },
    Swap {
        t: SimTime,
        old_ver: u32,
        new_ver: u32,
        win: SimTime,
    },
    Msg {
        t: SimTime,
        run: u32,
        step: u8,
        from: Entity,
        to: Entity,
        note: String,
    },
    RunStart {
        t: SimTime,
        run: u32,
        trigger: String,
        kind: String,
        devices: Vec<DeviceId>,
    },
    RunComplete {
        t: SimTime,
        run: u32,
    },
    RunFailed {
        t: SimTime,
        run: u32,
        step: u8,
        reason: String,
    },
    Reroute {
        t: SimTime,
        dev: DeviceId,
        from: RouteTarget,
        to: RouteTarget,
        cause: String,
    },
    Dpi {
        t: SimTime,
        dev: DeviceId,
        vm: VmId,
        decision: DpiDecision,
        inspected: u64,
        evidence: Vec<(String, u64)>,
    },
    /// Per-window count of packets deep-inspected on a machine that also
    /// serves traffic (the non-orchestrated deployment).
    Inspect {
        t: SimTime,
        vm: VmId,
        pkts: u64,
    },
    Vm {
        t: SimTime,
        vm: VmId,
        status: VmStatus,
        role: VmRole,
        spec: ResourceSpec,
        free: ResourceSpec,
    },
    Alarm {
        t: SimTime,
        kind: String,
        detail: String,
    },
}

impl LogRecord {
    pub fn t(&self) -> SimTime {
        match self {
            LogRecord::Attach { t, .. }
            | LogRecord::AttackSched { t, .. }
            | LogRecord::Deliver { t, .. }
            | LogRecord::FlowSummary { t, .. }
            | LogRecord::Verdict { t, .. }
            | LogRecord::Swap { t, .. }
            | LogRecord::Msg { t, .. }
            | LogRecord::RunStart { t, .. }
            | LogRecord::RunComplete { t, .. }
            | LogRecord::RunFailed { t, .. }
            | LogRecord::Reroute { t, .. }
            | LogRecord::Dpi { t, .. }
            | LogRecord::Inspect { t, .. }
            | LogRecord::Vm { t, .. }
            | LogRecord::Alarm { t, .. } => *t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LogRecord::Attach { .. } => "attach",
            LogRecord::AttackSched { .. } => "attack-sched",
            LogRecord::Deliver { .. } => "deliver",
            LogRecord::FlowSummary { .. } => "flow-summary",
            LogRecord::Verdict { .. } => "verdict",
            LogRecord::Swap { .. } => "swap",
            LogRecord::Msg { .. } => "msg",
            LogRecord::RunStart { .. } => "run-start",
            LogRecord::RunComplete { .. } => "run-complete",
            LogRecord::RunFailed { .. } => "run-failed",
            LogRecord::Reroute { .. } => "reroute",
            LogRecord::Dpi { .. } => "dpi",
            LogRecord::Inspect { .. } => "inspect",
            LogRecord::Vm { .. } => "vm",
            LogRecord::Alarm { .. } => "alarm",
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Attach { t, dev, profile, ip } => write!(
                f,
                "t={} mod=netmodel ev=attach dev={} profile={} ip={}",
                t.as_micros(),
                dev.0,
                profile.as_str(),
                ip
            ),
            LogRecord::AttackSched { t, dev, start, stop, rate, beacons } => write!(
                f,
                "t={} mod=trafficgen ev=attack-sched dev={} start={} stop={} rate={} beacons={}",
                t.as_micros(),
                dev.0,
                start.as_micros(),
                stop.as_micros(),
                rate,
                beacons
            ),
            LogRecord::Deliver { t, dev, vm, out, proto, len, tag, sport, dport } => write!(
                f,
                "t={} mod=netmodel ev=deliver dev={} vm={} out={} proto={} len={} tag={} sport={} dport={}",
                t.as_micros(),
                dev.0,
                vm.as_str(),
                out.as_str(),
                proto.as_str(),
                len,
                tag.as_str(),
                sport,
                dport
            ),
            LogRecord::FlowSummary { t, records, exported_bytes, packets, bytes } => write!(
                f,
                "t={} mod=flowpipe ev=flow-summary records={} exported_bytes={} packets={} bytes={}",
                t.as_micros(),
                records,
                exported_bytes,
                packets,
                bytes
            ),
            LogRecord::Verdict { t, dev, src, win, flagged, score, ver, reason } => write!(
                f,
                "t={} mod=detector ev=verdict dev={} src={} win={} flagged={} score={} ver={} reason={}",
                t.as_micros(),
                dev.0,
                src,
                win.as_micros(),
                flagged,
                score,
                ver,
                reason.map_or("-", FlagReason::as_str)
            ),
            LogRecord::Swap { t, old_ver, new_ver, win } => write!(
                f,
                "t={} mod=detector ev=swap old_ver={} new_ver={} win={}",
                t.as_micros(),
                old_ver,
                new_ver,
                win.as_micros()
            ),
            LogRecord::Msg { t, run, step, from, to, note } => write!(
                f,
                "t={} mod=orchestrator ev=msg run={} step={} from={} to={} note={}",
                t.as_micros(),
                run,
                step,
                from.as_str(),
                to.as_str(),
                note
            ),
            LogRecord::RunStart { t, run, trigger, kind, devices } => {
                let devs = if devices.is_empty() {
                    "-".to_string()
                } else {
                    devices
                        .iter()
                        .map(|d| d.0.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                };
                write!(
                    f,
                    "t={} mod=orchestrator ev=run-start run={} trigger={} kind={} devices={}",
                    t.as_micros(),
                    run,
                    trigger,
                    kind,
                    devs
                )
            }
            LogRecord::RunComplete { t, run } => write!(
                f,
                "t={} mod=orchestrator ev=run-complete run={}",
                t.as_micros(),
                run
            ),
            LogRecord::RunFailed { t, run, step, reason } => write!(
                f,
                "t={} mod=orchestrator ev=run-failed run={} step={} reason={}",
                t.as_micros(),
                run,
                step,
                reason
            ),
            LogRecord::Reroute { t, dev, from, to, cause } => write!(
                f,
                "t={} mod=netmodel ev=reroute dev={} from={} to={} cause={}",
                t.as_micros(),
                dev.0,
                from.as_str(),
                to.as_str(),
                cause
            ),
            LogRecord::Dpi { t, dev, vm, decision, inspected, evidence } => {
                let ev = if evidence.is_empty() {
                    "-".to_string()
                } else {
                    evidence
                        .iter()
                        .map(|(id, n)| format!("{id}:{n}"))
                        .collect::<Vec<_>>()
                        .join(",")
                };
                write!(
                    f,
                    "t={} mod=dpi ev=dpi dev={} vm={} decision={} inspected={} evidence={}",
                    t.as_micros(),
                    dev.0,
                    vm.as_str(),
                    decision.as_str(),
                    inspected,
                    ev
                )
            }
            LogRecord::Inspect { t, vm, pkts } => write!(
                f,
                "t={} mod=dpi ev=inspect vm={} pkts={}",
                t.as_micros(),
                vm.as_str(),
                pkts
            ),
            LogRecord::Vm { t, vm, status, role, spec, free } => write!(
                f,
                "t={} mod=infra ev=vm vm={} status={} role={} cpu={} mem={} free_cpu={} free_mem={}",
                t.as_micros(),
                vm.as_str(),
                status.as_str(),
                role.as_str(),
                spec.cpu_units,
                spec.mem_units,
                free.cpu_units,
                free.mem_units
            ),
            LogRecord::Alarm { t, kind, detail } => write!(
                f,
                "t={} mod=orchestrator ev=alarm kind={} detail={}",
                t.as_micros(),
                kind,
                detail
            ),
        }
    }
}

#[derive(Debug, PartialEq, thiserror::Error)]
pub enum LogParseError {
    #[error("line {line}: missing field {field}")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: bad value for {field}: {value:?}")]
    BadValue {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: unknown record kind {kind:?}")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: token {token:?} is not key=value")]
    BadToken { line: usize, token: String },
}

struct Fields<'a> {
    line_no: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn of(line: &'a str, line_no: usize) -> Result<Self, LogParseError> {
        let mut pairs = Vec::new();
        for token in line.split(' ').filter(|t| !t.is_empty()) {
            let Some((k, v)) = token.split_once('=') else {
                return Err(LogParseError::BadToken {
                    line: line_no,
                    token: token.to_string(),
                });
            };
            pairs.push((k, v));
        }
        Ok(Fields { line_no, pairs })
    }

    fn raw(&self, field: &'static str) -> Result<&'a str, LogParseError> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == field)
            .map(|(_, v)| *v)
            .ok_or(LogParseError::MissingField {
                line: self.line_no,
                field,
            })
    }

    fn bad(&self, field: &'static str, value: &str) -> LogParseError {
        LogParseError::BadValue {
            line: self.line_no,
            field,
            value: value.to_string(),
        }
    }

    fn num<T: std::str::FromStr>(&self, field: &'static str) -> Result<T, LogParseError> {
        let raw = self.raw(field)?;
        raw.parse().map_err(|_| self.bad(field, raw))
    }

    fn time(&self, field: &'static str) -> Result<SimTime, LogParseError> {
        Ok(SimTime::from_micros(self.num(field)?))
    }

    fn device(&self, field: &'static str) -> Result<DeviceId, LogParseError> {
        Ok(DeviceId(self.num(field)?))
    }

    fn with<T>(
        &self,
        field: &'static str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, LogParseError> {
        let raw = self.raw(field)?;
        parse(raw).ok_or_else(|| self.bad(field, raw))
    }
}

/// Parse one rendered log line back into its record.
pub fn parse_line(line: &str, line_no: usize) -> Result<LogRecord, LogParseError> {
    let f = Fields::of(line, line_no)?;
    let kind = f.raw("ev")?;
    let rec = match kind {
        "attach" => LogRecord::Attach {
            t: f.time("t")?,
            dev: f.device("dev")?,
            profile: f.with("profile", DeviceProfile::parse)?,
            ip: f.num("ip")?,
        },
        "attack-sched" => LogRecord::AttackSched {
            t: f.time("t")?,
            dev: f.device("dev")?,
            start: f.time("start")?,
            stop: f.time("stop")?,
            rate: f.num("rate")?,
            beacons: f.num("beacons")?,
        },
        "deliver" => LogRecord::Deliver {
            t: f.time("t")?,
            dev: f.device("dev")?,
            vm: f.with("vm", RouteTarget::parse)?,
            out: f.with("out", DeliveryOutcome::parse)?,
            proto: f.with("proto", Protocol::parse)?,
            len: f.num("len")?,
            tag: f.with("tag", PayloadTag::parse)?,
            sport: f.num("sport")?,
            dport: f.num("dport")?,
        },
        "flow-summary" => LogRecord::FlowSummary {
            t: f.time("t")?,
            records: f.num("records")?,
            exported_bytes: f.num("exported_bytes")?,
            packets: f.num("packets")?,
            bytes: f.num("bytes")?,
        },
        "verdict" => LogRecord::Verdict {
            t: f.time("t")?,
            dev: f.device("dev")?,
            src: f.num("src")?,
            win: f.time("win")?,
            flagged: f.num("flagged")?,
            score: f.num("score")?,
            ver: f.num("ver")?,
            reason: match f.raw("reason")? {
                "-" => None,
                raw => Some(
                    FlagReason::parse(raw).ok_or_else(|| f.bad("reason", raw))?,
                ),
            },
        },
        "swap" => LogRecord::Swap {
            t: f.time("t")?,
            old_ver: f.num("old_ver")?,
            new_ver: f.num("new_ver")?,
            win: f.time("win")?,
        },
        "msg" => LogRecord::Msg {
            t: f.time("t")?,
            run: f.num("run")?,
            step: f.num("step")?,
            from: f.with("from", Entity::parse)?,
            to: f.with("to", Entity::parse)?,
            note: f.raw("note")?.to_string(),
        },
        "run-start" => LogRecord::RunStart {
            t: f.time("t")?,
            run: f.num("run")?,
            trigger: f.raw("trigger")?.to_string(),
            kind: f.raw("kind")?.to_string(),
            devices: match f.raw("devices")? {
                "-" => Vec::new(),
                raw => raw
                    .split(',')
                    .map(|d| d.parse().map(DeviceId).map_err(|_| f.bad("devices", raw)))
                    .collect::<Result<_, _>>()?,
            },
        },
        "run-complete" => LogRecord::RunComplete {
            t: f.time("t")?,
            run: f.num("run")?,
        },
        "run-failed" => LogRecord::RunFailed {
            t: f.time("t")?,
            run: f.num("run")?,
            step: f.num("step")?,
            reason: f.raw("reason")?.to_string(),
        },
        "reroute" => LogRecord::Reroute {
            t: f.time("t")?,
            dev: f.device("dev")?,
            from: f.with("from", RouteTarget::parse)?,
            to: f.with("to", RouteTarget::parse)?,
            cause: f.raw("cause")?.to_string(),
        },
        "dpi" => LogRecord::Dpi {
            t: f.time("t")?,
            dev: f.device("dev")?,
            vm: f.with("vm", VmId::parse)?,
            decision: f.with("decision", |s| match s {
                "attack" => Some(DpiDecision::Attack),
                "cleared" => Some(DpiDecision::Cleared),
                "undecided" => Some(DpiDecision::Undecided),
                _ => None,
            })?,
            inspected: f.num("inspected")?,
            evidence: match f.raw("evidence")? {
                "-" => Vec::new(),
                raw => raw
                    .split(',')
                    .map(|pair| {
                        let (id, n) = pair.split_once(':')?;
                        Some((id.to_string(), n.parse().ok()?))
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| f.bad("evidence", raw))?,
            },
        },
        "inspect" => LogRecord::Inspect {
            t: f.time("t")?,
            vm: f.with("vm", VmId::parse)?,
            pkts: f.num("pkts")?,
        },
        "vm" => LogRecord::Vm {
            t: f.time("t")?,
            vm: f.with("vm", VmId::parse)?,
            status: f.with("status", VmStatus::parse)?,
            role: f.with("role", VmRole::parse)?,
            spec: ResourceSpec {
                cpu_units: f.num("cpu")?,
                mem_units: f.num("mem")?,
            },
            free: ResourceSpec {
                cpu_units: f.num("free_cpu")?,
                mem_units: f.num("free_mem")?,
            },
        },
        "alarm" => LogRecord::Alarm {
            t: f.time("t")?,
            kind: f.raw("kind")?.to_string(),
            detail: f.raw("detail")?.to_string(),
        },
        other => {
            return Err(LogParseError::UnknownKind {
                line: line_no,
                kind: other.to_string(),
            })
        }
    };
    Ok(rec)
}

/// Parse a whole log document (one record per non-empty line).
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, LogParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

/// Render records to the on-disk log format, one line each.
pub fn render_log(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        use fmt::Write;
        writeln!(out, "{r}").expect("write to String cannot fail");
    }
    out
}

/// Hex SHA-256 of the rendered log; the determinism fingerprint of a run.
pub fn digest(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        use fmt::Write;
        write!(s, "{b:02x}").expect("write to String cannot fail");
    }
    s
}
