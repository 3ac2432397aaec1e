//! The scenario acceptance checklist.
//!
//! Ten end-to-end checks over the shipped scenario files, each printing
//! one `ok`/`FAIL` line. They cover the claims the scenarios exist to
//! demonstrate: the service machine rides through inspector crashes,
//! completed management runs speak the nine-step conversation verbatim,
//! quarantine routing is one-way and final, flow export is conservative
//! and cheap, model hot-swaps never disturb the scoring grid, crash
//! repair lands on schedule, logs reproduce bitwise under the same seed,
//! the flood is caught cleanly with wide margin, and the host capacity
//! ledger never over-commits.
//!
//! Expected values are frozen from hand derivations over the scenario
//! files (message hop counts, boot delays, window boundaries, crash
//! thresholds), and wherever possible the checks recompute a claim from
//! the raw event log instead of trusting the metrics report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mecsim::detector::{self, ModelKind};
use mecsim::engine::SimTime;
use mecsim::eventlog::{Entity, LogRecord};
use mecsim::flowpipe::FlowRecord;
use mecsim::infra::VmId;
use mecsim::infra::VmStatus;
use mecsim::netmodel::{DeliveryOutcome, RouteTarget};
use mecsim::orchestrator::Vm4Topology;
use mecsim::scenario::Scenario;
use mecsim::sim::{Mode, RunArtifacts, Simulation};

const SEED: u64 = 42;

/// Every shipped scenario.
const SCENARIOS: [&str; 7] = [
    "quiet",
    "flood",
    "flood-noclash",
    "flood-crash",
    "beacon-then-flood",
    "split-crash",
    "capacity-fail",
];

/// Scenarios whose runs isolate devices, with the exact number of
/// devices that must end up rerouted at least once.
const ISOLATING: [(&str, usize); 5] = [
    ("flood", 10),
    ("flood-noclash", 15),
    ("flood-crash", 50),
    ("beacon-then-flood", 11),
    ("split-crash", 22),
];

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load_scenario(name: &str) -> Scenario {
    let path = repo_file(&format!("scenarios/{name}.scenario"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("loading {name}: {e}"))
}

fn run_with_seed(name: &str, mode: Mode, seed: u64) -> RunArtifacts {
    let mut sc = load_scenario(name);
    sc.seed = seed;
    Simulation::run(sc, mode).unwrap_or_else(|e| panic!("running {name}: {e}"))
}

/// Seed-42 artifacts for every scenario and mode, each run once and
/// shared by all checks, with the wall-clock time the run took.
struct Lab {
    runs: BTreeMap<(&'static str, &'static str), (RunArtifacts, Duration)>,
}

impl Lab {
    fn build() -> Lab {
        let mut runs = BTreeMap::new();
        for name in SCENARIOS {
            for mode in [Mode::Proposed, Mode::Baseline] {
                let started = Instant::now();
                let art = run_with_seed(name, mode, SEED);
                runs.insert((name, mode.as_str()), (art, started.elapsed()));
            }
        }
        Lab { runs }
    }

    fn art(&self, name: &'static str, mode: Mode) -> &RunArtifacts {
        &self.runs[&(name, mode.as_str())].0
    }

    fn wall(&self, name: &'static str, mode: Mode) -> Duration {
        self.runs[&(name, mode.as_str())].1
    }
}

// --- 1: service continuity --------------------------------------------

/// The flood crashes the inspection machine three times, yet with the
/// inspection plane isolated the service machine never misses a packet.
/// The same scenario with inspection inline loses the service machine at
/// the first overload window and never gets it back.
fn service_continuity(lab: &Lab) -> Result<(), String> {
    let prop = &lab.art("flood-crash", Mode::Proposed).metrics;
    let base = &lab.art("flood-crash", Mode::Baseline).metrics;

    check!(
        prop.legit.availability == Some(1.0),
        "isolated inspection: availability {:?}, want exactly 1.0",
        prop.legit.availability
    );
    check!(
        prop.legit.loss_packets == 0 && prop.legit.degraded_packets == 0,
        "isolated inspection: {} lost and {} degraded legitimate packets",
        prop.legit.loss_packets,
        prop.legit.degraded_packets
    );
    let vm1 = &prop.vms["VM1"];
    check!(
        vm1.crashes == 0 && vm1.outage_s == 0.0,
        "isolated inspection: service machine crashed {} times, down {}s",
        vm1.crashes,
        vm1.outage_s
    );
    // The comparison only means something if the attack really was hot
    // enough to break the machine that absorbed it.
    let vm4 = &prop.vms["VM4"];
    check!(
        vm4.crashes == 3,
        "isolated inspection: inspector crashed {} times, want 3",
        vm4.crashes
    );

    let bvm1 = &base.vms["VM1"];
    check!(
        bvm1.crashes >= 1,
        "inline inspection: service machine never crashed, comparison is vacuous"
    );
    check!(
        bvm1.outage_s == 24.0,
        "inline inspection: service machine down {}s, want 24 (crash at 21s, never repaired)",
        bvm1.outage_s
    );
    match base.legit.availability {
        Some(a) => check!(
            a < 0.9,
            "inline inspection: availability {a} is too healthy for a dead service machine"
        ),
        None => return Err("inline inspection: no legitimate traffic measured".into()),
    }

    for mode in [Mode::Proposed, Mode::Baseline] {
        let wall = lab.wall("flood-crash", mode);
        check!(
            wall < Duration::from_secs(10),
            "{} arm took {:.2?}, the experiment must stay under 10s",
            mode.as_str(),
            wall
        );
    }
    Ok(())
}

// --- 2: the nine-step conversation --------------------------------------

/// Rebuild every completed run's expected message sequence from its
/// start time, kind, and the scenario's latency and delay numbers, then
/// demand the log matches line for line: party, note, and arrival time.
fn nine_step_conversation(lab: &Lab) -> Result<(), String> {
    let mut total_checked = 0u64;
    for name in SCENARIOS {
        let sc = load_scenario(name);
        let latency = sc.orchestration.msg_latency.as_micros();
        let dpi_vm = match sc.vm4.topology {
            Vm4Topology::Combined => VmId::Vm4,
            Vm4Topology::Split => VmId::Vm4a,
        };
        let art = lab.art(name, Mode::Proposed);

        let mut starts: BTreeMap<u32, (SimTime, String)> = BTreeMap::new();
        let mut completes: BTreeMap<u32, SimTime> = BTreeMap::new();
        let mut msgs: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for rec in &art.records {
            match rec {
                LogRecord::RunStart { t, run, kind, .. } => {
                    starts.insert(*run, (*t, kind.clone()));
                }
                LogRecord::RunComplete { t, run } => {
                    completes.insert(*run, *t);
                }
                LogRecord::Msg { run, .. } if *run > 0 => {
                    msgs.entry(*run).or_default().push(rec.to_string());
                }
                _ => {}
            }
        }

        let mut checked_here = 0u64;
        for (run, (start, kind)) in &starts {
            let Some(done) = completes.get(run) else {
                continue;
            };
            let delay = match kind.as_str() {
                "provision" | "restore" => sc.orchestration.boot_delay,
                "reconfigure" => sc.orchestration.reconfig_delay,
                other => return Err(format!("{name} run {run}: unknown run kind {other:?}")),
            }
            .as_micros();
            let first_note = match kind.as_str() {
                "provision" => "create-vm",
                "restore" => "restore-vm",
                _ => "resize-vm",
            };
            let fifth_note = if kind == "reconfigure" { "app-ready" } else { "install-dpi" };
            let plan: [(Entity, Entity, &str); 9] = [
                (Entity::Meo, Entity::Vim, first_note),
                (Entity::Vim, Entity::Vi, "allocate"),
                (Entity::Vim, Entity::Meo, "vm-ready"),
                (Entity::Meo, Entity::Mepm, "start-app"),
                (Entity::Mepm, Entity::Vm(dpi_vm), fifth_note),
                (Entity::Mepm, Entity::Meo, "app-started"),
                (Entity::Meo, Entity::Mepm, "apply-rules"),
                (Entity::Mepm, Entity::Detector, "reroute"),
                (Entity::Mepm, Entity::Meo, "done"),
            ];
            let expected: Vec<String> = plan
                .iter()
                .enumerate()
                .map(|(i, (from, to, note))| {
                    let step = i as u64 + 1;
                    // Steps 1 and 2 are message hops only; from step 3 on
                    // the boot or resize delay has happened.
                    let arrive =
                        start.as_micros() + step * latency + if step >= 3 { delay } else { 0 };
                    LogRecord::Msg {
                        t: SimTime::from_micros(arrive),
                        run: *run,
                        step: step as u8,
                        from: *from,
                        to: *to,
                        note: note.to_string(),
                    }
                    .to_string()
                })
                .collect();
            let got = msgs.get(run).cloned().unwrap_or_default();
            check!(
                got.len() == 9,
                "{name} run {run} ({kind}): {} protocol messages, want 9",
                got.len()
            );
            for (i, (g, e)) in got.iter().zip(&expected).enumerate() {
                check!(
                    g == e,
                    "{name} run {run} ({kind}) step {}:\n  want {e}\n  got  {g}",
                    i + 1
                );
            }
            let want_done = SimTime::from_micros(start.as_micros() + 9 * latency + delay);
            check!(
                *done == want_done,
                "{name} run {run} ({kind}): completed at {done}, want {want_done}"
            );
            checked_here += 1;
        }
        check!(
            checked_here == art.metrics.runs.completed,
            "{name}: checked {checked_here} runs but the report counts {}",
            art.metrics.runs.completed
        );
        total_checked += checked_here;

        // The deployment without a management plane must stay silent.
        let silent = lab.art(name, Mode::Baseline).records.iter().all(|r| {
            !matches!(
                r,
                LogRecord::Msg { .. } | LogRecord::RunStart { .. } | LogRecord::RunComplete { .. }
            )
        });
        check!(silent, "{name}: the inline deployment spoke the management protocol");
    }
    // flood 1, flood-noclash 1, flood-crash 4, beacon-then-flood 2,
    // split-crash 4; quiet and capacity-fail complete none.
    check!(
        total_checked == 12,
        "{total_checked} completed runs across all scenarios, want 12"
    );
    Ok(())
}

// --- 3: isolation is absolute -------------------------------------------

/// From the moment a device's first reroute is applied, not one more of
/// its packets may reach the service machine, and the number of devices
/// isolated per scenario is exactly the designed one.
fn isolation_cuts_vm1_traffic(lab: &Lab) -> Result<(), String> {
    for (name, expected) in ISOLATING {
        let art = lab.art(name, Mode::Proposed);
        let mut first_leave: BTreeMap<u32, u64> = BTreeMap::new();
        for rec in &art.records {
            if let LogRecord::Reroute { t, dev, .. } = rec {
                first_leave.entry(dev.0).or_insert(t.as_micros());
            }
        }
        check!(
            first_leave.len() == expected,
            "{name}: {} devices isolated, want {expected}",
            first_leave.len()
        );
        for rec in &art.records {
            if let LogRecord::Deliver { t, dev, vm: RouteTarget::Vm1, .. } = rec {
                if let Some(&cut) = first_leave.get(&dev.0) {
                    check!(
                        t.as_micros() < cut,
                        "{name}: device {} reached the service machine at {}us, {}us after isolation",
                        dev.0,
                        t.as_micros(),
                        t.as_micros() - cut
                    );
                }
            }
        }
    }
    Ok(())
}

// --- 4: routing is one-way ----------------------------------------------

/// Replay every reroute against the device's current position: the
/// from-field must match, the move must be one the routing state machine
/// allows, and no move may end at the service machine.
fn one_way_quarantine(lab: &Lab) -> Result<(), String> {
    for (name, _) in ISOLATING {
        let art = lab.art(name, Mode::Proposed);
        let mut route: BTreeMap<u32, RouteTarget> = BTreeMap::new();
        for rec in &art.records {
            match rec {
                LogRecord::Attach { dev, .. } => {
                    route.insert(dev.0, RouteTarget::Vm1);
                }
                LogRecord::Reroute { t, dev, from, to, cause } => {
                    let cur = *route
                        .get(&dev.0)
                        .ok_or_else(|| format!("{name}: reroute of unattached device {}", dev.0))?;
                    check!(
                        *from == cur,
                        "{name}: reroute at {t} says device {} was at {}, it was at {}",
                        dev.0,
                        from.as_str(),
                        cur.as_str()
                    );
                    check!(
                        cur.may_transition_to(*to),
                        "{name}: illegal move {} -> {} (cause {cause}) at {t}",
                        cur.as_str(),
                        to.as_str()
                    );
                    check!(
                        *to != RouteTarget::Vm1,
                        "{name}: device {} was sent back to the service machine at {t}",
                        dev.0
                    );
                    route.insert(dev.0, *to);
                }
                _ => {}
            }
        }
        // Without a management plane the only remedy is the ingress
        // block; there must be no reroute records at all.
        let none = lab
            .art(name, Mode::Baseline)
            .records
            .iter()
            .all(|r| !matches!(r, LogRecord::Reroute { .. }));
        check!(none, "{name}: the inline deployment rerouted a device");
    }
    Ok(())
}

// --- 5: flow accounting ---------------------------------------------------

/// Replay the flow dump against the delivery log: per device, sealed
/// flow records must account for exactly the packets the ingress mirror
/// saw, and the export must cost under one percent of the raw bytes.
fn flow_accounting(lab: &Lab) -> Result<(), String> {
    let art = lab.art("flood", Mode::Proposed);

    let mut mirrored: BTreeMap<u32, u64> = BTreeMap::new();
    for rec in &art.records {
        if let LogRecord::Deliver { dev, out, .. } = rec {
            // Packets dropped at the ingress never pass the mirror.
            if *out != DeliveryOutcome::IngressDropped {
                *mirrored.entry(dev.0).or_insert(0) += 1;
            }
        }
    }

    let mut summed: BTreeMap<u32, u64> = BTreeMap::new();
    let mut flow_lines = 0u64;
    for line in art.flows_text.lines() {
        let fr = FlowRecord::parse_line(line).map_err(|e| format!("flow dump: {e}"))?;
        *summed.entry(fr.src_device.0).or_insert(0) += fr.packets;
        flow_lines += 1;
    }

    for dev in mirrored.keys().chain(summed.keys()) {
        let saw = mirrored.get(dev).copied().unwrap_or(0);
        let flows = summed.get(dev).copied().unwrap_or(0);
        check!(
            saw == flows,
            "device {dev}: mirror saw {saw} packets but flows account for {flows}"
        );
    }

    let fm = &art.metrics.flows;
    check!(
        fm.exported_records == flow_lines,
        "report counts {} exported records, the dump has {flow_lines}",
        fm.exported_records
    );
    check!(
        fm.observed_packets == mirrored.values().sum::<u64>(),
        "report counts {} observed packets, the delivery log has {}",
        fm.observed_packets,
        mirrored.values().sum::<u64>()
    );
    match fm.byte_ratio {
        Some(r) => check!(
            r <= 0.01,
            "flow export cost {r:.4} of the raw bytes, the budget is 0.01"
        ),
        None => return Err("no traffic observed, ratio undefined".into()),
    }
    Ok(())
}

// --- 6: model swaps -------------------------------------------------------

/// Swap in the trained model at ten different moments of the calm
/// scenario. Scores may change; the set of scored (device, window) pairs
/// may not, and the calm scenario must stay unflagged throughout.
fn model_swap_grid(lab: &Lab) -> Result<(), String> {
    const SWAP_AT_US: [u64; 10] = [
        1_000_000, 2_500_000, 5_000_000, 7_500_000, 10_000_000, 13_200_000, 17_000_000,
        20_000_000, 28_000_000, 36_000_000,
    ];

    fn grid(records: &[LogRecord]) -> BTreeMap<(u32, u64), u32> {
        let mut g = BTreeMap::new();
        for rec in records {
            if let LogRecord::Verdict { dev, win, .. } = rec {
                *g.entry((dev.0, win.as_micros())).or_insert(0) += 1;
            }
        }
        g
    }
    fn any_flag(records: &[LogRecord]) -> bool {
        records
            .iter()
            .any(|r| matches!(r, LogRecord::Verdict { flagged: true, .. }))
    }

    let base = lab.art("quiet", Mode::Proposed);
    let base_grid = grid(&base.records);
    check!(!base_grid.is_empty(), "the calm run scored nothing at all");
    check!(!any_flag(&base.records), "the calm run flagged a device before any swap");

    let newer = detector::load_model(&repo_file("models/zscore-trained.toml"))
        .map_err(|e| format!("loading trained model: {e}"))?;
    for at in SWAP_AT_US {
        let mut sc = load_scenario("quiet");
        sc.seed = SEED;
        sc.model_updates
            .push((SimTime::from_micros(at), newer.clone()));
        let art = Simulation::run(sc, Mode::Proposed).map_err(|e| e.to_string())?;
        let swaps: Vec<(u32, u32)> = art
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Swap { old_ver, new_ver, .. } => Some((*old_ver, *new_ver)),
                _ => None,
            })
            .collect();
        check!(
            swaps == [(1, 2)],
            "swap at {at}us: swap records {swaps:?}, want exactly [(1, 2)]"
        );
        check!(
            grid(&art.records) == base_grid,
            "swap at {at}us changed which (device, window) pairs were scored"
        );
        check!(!any_flag(&art.records), "swap at {at}us made the calm run flag a device");
    }
    Ok(())
}

// --- 7: crash repair ------------------------------------------------------

/// Every inspector crash must start a repair run at the crash instant,
/// complete it exactly one boot delay plus nine message hops later, and
/// put all fifty isolated devices back behind the repaired machine at
/// the redirect step.
fn crash_repair_schedule(lab: &Lab) -> Result<(), String> {
    let sc = load_scenario("flood-crash");
    let latency = sc.orchestration.msg_latency.as_micros();
    let boot = sc.orchestration.boot_delay.as_micros();
    let art = lab.art("flood-crash", Mode::Proposed);
    let bots: BTreeSet<u32> = (100..150).collect();

    let crashes: Vec<u64> = art
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Alarm { t, kind, .. } if kind == "vm-crash" => Some(t.as_micros()),
            _ => None,
        })
        .collect();
    check!(
        crashes == [21_000_000, 24_000_000, 27_000_000],
        "inspector crashes at {crashes:?}us, want exactly 21s, 24s, 27s"
    );

    let repairs: Vec<(u32, u64, String)> = art
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::RunStart { t, run, trigger, kind, .. } if trigger == "crash" => {
                Some((*run, t.as_micros(), kind.clone()))
            }
            _ => None,
        })
        .collect();
    check!(
        repairs.len() == crashes.len(),
        "{} crashes but {} repair runs",
        crashes.len(),
        repairs.len()
    );

    for ((run, started, kind), crash) in repairs.iter().zip(&crashes) {
        check!(
            kind == "restore" && started == crash,
            "run {run}: kind {kind} started at {started}us for the crash at {crash}us"
        );
        let done = art
            .records
            .iter()
            .find_map(|r| match r {
                LogRecord::RunComplete { t, run: rr } if rr == run => Some(t.as_micros()),
                _ => None,
            })
            .ok_or_else(|| format!("repair run {run} never completed"))?;
        check!(
            done == crash + 9 * latency + boot,
            "repair run {run} completed at {done}us, want crash + boot + nine hops = {}us",
            crash + 9 * latency + boot
        );
        // The redirect step, one hop before completion, must re-isolate
        // every quarantined device onto the repaired machine.
        let redirect_at = crash + 8 * latency + boot;
        let mut redirected = BTreeSet::new();
        for rec in &art.records {
            if let LogRecord::Reroute { t, dev, from, to, cause } = rec {
                if t.as_micros() == redirect_at && cause == "requarantine" {
                    check!(
                        *from == RouteTarget::Vm4 && *to == RouteTarget::Vm4,
                        "repair run {run}: device {} re-isolated {} -> {}, want VM4 -> VM4",
                        dev.0,
                        from.as_str(),
                        to.as_str()
                    );
                    redirected.insert(dev.0);
                }
            }
        }
        check!(
            redirected == bots,
            "repair run {run}: re-isolated {} devices, want all 50 bots",
            redirected.len()
        );
    }

    let reroutes = &art.metrics.reroutes_by_cause;
    check!(
        reroutes.get("quarantine") == Some(&50) && reroutes.get("requarantine") == Some(&150),
        "reroute tallies {reroutes:?}, want 50 quarantines and 150 requarantines"
    );
    check!(
        art.metrics.vms["VM4"].restores == 3,
        "inspector restored {} times, want 3",
        art.metrics.vms["VM4"].restores
    );
    Ok(())
}

// --- 8: reproducibility ---------------------------------------------------

/// Re-running any scenario under the same seed must reproduce the log
/// bit for bit. A different seed reshuffles the traffic but leaves the
/// protocol story, message and reroute content minus timestamps, intact.
fn reproducibility(lab: &Lab) -> Result<(), String> {
    fn protocol_shape(records: &[LogRecord]) -> Vec<String> {
        let mut shape: Vec<String> = records
            .iter()
            .filter(|r| {
                matches!(
                    r,
                    LogRecord::Msg { .. }
                        | LogRecord::RunStart { .. }
                        | LogRecord::RunComplete { .. }
                        | LogRecord::RunFailed { .. }
                        | LogRecord::Reroute { .. }
                )
            })
            .map(|r| {
                let line = r.to_string();
                // Drop the leading t=... token; sort so that harmless
                // reorderings of same-content records do not matter.
                line.split_once(' ').map(|(_, rest)| rest.to_string()).unwrap_or(line)
            })
            .collect();
        shape.sort();
        shape
    }

    for name in SCENARIOS {
        for mode in [Mode::Proposed, Mode::Baseline] {
            let a = lab.art(name, mode);
            let again = run_with_seed(name, mode, SEED);
            check!(
                again.digest == a.digest,
                "{name}/{}: same seed, different log digest",
                mode.as_str()
            );
        }
        // The inline deployment never speaks the protocol, so the shape
        // comparison only says something about the orchestrated one.
        let a = lab.art(name, Mode::Proposed);
        let other = run_with_seed(name, Mode::Proposed, SEED + 1);
        check!(
            protocol_shape(&other.records) == protocol_shape(&a.records),
            "{name}: seed {} tells a different protocol story than seed {SEED}",
            SEED + 1
        );
    }
    Ok(())
}

// --- 9: detection quality --------------------------------------------------

/// On the flood scenario the trained model must flag every bot, flag no
/// legitimate device, and clear the decision threshold at least tenfold.
/// An independent rescoring of the dumped features must reproduce every
/// logged verdict and score exactly.
fn detection_quality(lab: &Lab) -> Result<(), String> {
    fn field_u64(line: &str, key: &str) -> Result<u64, String> {
        line.split_ascii_whitespace()
            .find_map(|tok| tok.strip_prefix(key))
            .ok_or_else(|| format!("feature line missing {key}: {line}"))?
            .parse::<u64>()
            .map_err(|e| format!("feature field {key}: {e}"))
    }

    let art = lab.art("flood", Mode::Proposed);
    let det = &art.metrics.detection;
    check!(
        det.true_positive_rate == Some(1.0),
        "true positive rate {:?}, want 1.0",
        det.true_positive_rate
    );
    check!(
        det.false_positive_rate == Some(0.0),
        "false positive rate {:?}, want 0.0",
        det.false_positive_rate
    );

    let model = detector::load_model(&repo_file("models/zscore-trained.toml"))
        .map_err(|e| format!("loading trained model: {e}"))?;
    let ModelKind::ZScore(p) = &model.kind else {
        return Err("trained model is not a z-score model".into());
    };

    // Rescore the dumped features from scratch.
    let mut oracle: BTreeMap<(u32, u64), (f64, bool)> = BTreeMap::new();
    for line in art.features_text.lines() {
        let nums = mecsim::flowpipe::FeatureVector::parse_numeric(line)?;
        let dev = field_u64(line, "dev=")? as u32;
        let win = field_u64(line, "win_end=")?;
        let mut worst = 0.0f64;
        for (x, stat) in nums.iter().zip(p.baseline.iter()) {
            let z = ((x - stat.mean) / stat.stddev).abs();
            if z > worst {
                worst = z;
            }
        }
        oracle.insert((dev, win), (worst, worst >= p.z_threshold));
    }

    let mut verdicts = 0usize;
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for rec in &art.records {
        if let LogRecord::Verdict { dev, win, flagged, score, ver, .. } = rec {
            check!(*ver == 2, "verdict under model version {ver}, want the trained model");
            let Some(&(oscore, oflag)) = oracle.get(&(dev.0, win.as_micros())) else {
                return Err(format!(
                    "verdict for device {} window {} has no dumped feature row",
                    dev.0,
                    win.as_micros()
                ));
            };
            check!(
                *score == oscore && *flagged == oflag,
                "device {} window {}: logged score {score} flagged {flagged}, rescored {oscore} flagged {oflag}",
                dev.0,
                win.as_micros()
            );
            let b = best.entry(dev.0).or_insert(0.0);
            if *score > *b {
                *b = *score;
            }
            verdicts += 1;
        }
    }
    check!(
        verdicts == oracle.len(),
        "{verdicts} verdicts for {} feature rows",
        oracle.len()
    );

    let sc = load_scenario("flood");
    let bots: Vec<u32> = sc.malicious_devices().map(|d| d.id.0).collect();
    check!(bots.len() == 10, "{} attacking devices in the flood scenario, want 10", bots.len());
    let mut margin = f64::INFINITY;
    for bot in &bots {
        let b = best
            .get(bot)
            .ok_or_else(|| format!("bot {bot} was never scored"))?;
        margin = margin.min(b / p.z_threshold);
    }
    check!(
        margin >= 10.0,
        "weakest bot scored only {margin:.1} times the decision threshold, want at least 10"
    );
    Ok(())
}

// --- 10: the capacity ledger -----------------------------------------------

/// Walk every machine snapshot in every log: the specs of live machines
/// may never sum past the physical host, and the reported free capacity
/// may never exceed what those specs leave over. Then the refusal path:
/// an impossible request fails its run at the allocation step with a
/// capacity alarm and zero routing side effects.
fn capacity_ledger(lab: &Lab) -> Result<(), String> {
    for name in SCENARIOS {
        let cap = load_scenario(name).host_capacity;
        for mode in [Mode::Proposed, Mode::Baseline] {
            let art = lab.art(name, mode);
            let mut state: BTreeMap<VmId, (VmStatus, u32, u32)> = BTreeMap::new();
            for rec in &art.records {
                let LogRecord::Vm { t, vm, status, spec, free, .. } = rec else {
                    continue;
                };
                state.insert(*vm, (*status, spec.cpu_units, spec.mem_units));
                let (mut cpu, mut mem) = (0u32, 0u32);
                for (st, c, m) in state.values() {
                    if *st != VmStatus::Off {
                        cpu += c;
                        mem += m;
                    }
                }
                check!(
                    cpu <= cap.cpu_units && mem <= cap.mem_units,
                    "{name}/{}: at {t} live machines hold {cpu}cpu/{mem}mem of a {}cpu/{}mem host",
                    mode.as_str(),
                    cap.cpu_units,
                    cap.mem_units
                );
                check!(
                    free.cpu_units <= cap.cpu_units - cpu && free.mem_units <= cap.mem_units - mem,
                    "{name}/{}: at {t} the ledger claims {}cpu/{}mem free, more than the placed machines allow",
                    mode.as_str(),
                    free.cpu_units,
                    free.mem_units
                );
            }
        }
    }

    let art = lab.art("capacity-fail", Mode::Proposed);
    let refused = art.records.iter().any(|r| {
        matches!(
            r,
            LogRecord::RunFailed { run: 1, step: 2, reason, .. } if reason == "resources"
        )
    });
    check!(refused, "the impossible request did not fail run 1 at the allocation step");
    let alarmed = art
        .records
        .iter()
        .any(|r| matches!(r, LogRecord::Alarm { kind, .. } if kind == "capacity"));
    check!(alarmed, "no capacity alarm was raised for the refusal");
    let rerouted = art
        .records
        .iter()
        .any(|r| matches!(r, LogRecord::Reroute { .. }));
    check!(!rerouted, "the refused run still rerouted a device");
    let runs = &art.metrics.runs;
    check!(
        runs.started == 1 && runs.completed == 0 && runs.failed == 1,
        "run tally started {} completed {} failed {}, want 1/0/1",
        runs.started,
        runs.completed,
        runs.failed
    );
    check!(
        art.metrics.legit.availability == Some(1.0),
        "the refusal disturbed legitimate service: availability {:?}",
        art.metrics.legit.availability
    );
    Ok(())
}

// --- the checklist ----------------------------------------------------------

#[test]
fn acceptance_checklist() {
    let lab = Lab::build();
    let checks: [(&str, fn(&Lab) -> Result<(), String>); 10] = [
        ("legitimate service is untouched while the inspector crashes", service_continuity),
        ("completed runs speak the nine-step conversation verbatim", nine_step_conversation),
        ("no packet reaches the service machine after isolation", isolation_cuts_vm1_traffic),
        ("quarantine routing is one-way", one_way_quarantine),
        ("flow export accounts for every mirrored packet cheaply", flow_accounting),
        ("model hot-swaps never disturb the scoring grid", model_swap_grid),
        ("crash repair lands on schedule and re-isolates every device", crash_repair_schedule),
        ("same seed reproduces logs bitwise, other seeds keep the story", reproducibility),
        ("the flood is caught in full, cleanly, with tenfold margin", detection_quality),
        ("the capacity ledger never over-commits and refusals are clean", capacity_ledger),
    ];

    let mut failures = Vec::new();
    for (i, (what, run_check)) in checks.iter().enumerate() {
        match run_check(&lab) {
            Ok(()) => println!("ok   {:>2} {what}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {what}: {why}", i + 1);
                failures.push(format!("{:>2} {what}: {why}", i + 1));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance checks failed:\n{}",
        failures.join("\n")
    );
}
