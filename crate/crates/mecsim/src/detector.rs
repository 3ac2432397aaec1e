//! The anomaly detector that scores per-source feature vectors at every
//! window tick, plus the loadable model formats and the offline trainer.
//!
//! Two model kinds are supported. `Threshold` compares each window
//! against fixed ceilings (packet rate, flows per window, minimum mean
//! packet size) and a watch-port set for command-and-control beacons.
//! `ZScore` standardises the six numeric features against a baseline
//! learned from a clean run and flags any feature moving more than
//! `z_threshold` standard deviations from its mean.
//!
//! Scoring is a pure function of (features, model): the detector holds no
//! per-device memory, so verdicts can be recomputed offline from a
//! feature dump and must match exactly.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::flowpipe::{FeatureVector, FEATURE_NAMES};
use crate::netmodel::DeviceId;

#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagReason {
    RateExceeded,
    PortScanPattern,
    BeaconPattern,
    ZScoreExceeded,
}

impl FlagReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagReason::RateExceeded => "rate",
            FlagReason::PortScanPattern => "portscan",
            FlagReason::BeaconPattern => "beacon",
            FlagReason::ZScoreExceeded => "zscore",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rate" => Some(FlagReason::RateExceeded),
            "portscan" => Some(FlagReason::PortScanPattern),
            "beacon" => Some(FlagReason::BeaconPattern),
            "zscore" => Some(FlagReason::ZScoreExceeded),
            _ => None,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdParams {
    /// Packets per second above which a source is flagged.
    pub max_pps: f64,
    /// Distinct flows in one window above which a source is flagged.
    pub max_flows_per_window: u32,
    /// Mean packet size below which a source is flagged; 0 disables.
    pub min_mean_packet_size: f64,
    /// Destination ports whose mere use flags the source.
    pub watch_ports: BTreeSet<u16>,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureStat {
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Clone, PartialEq, Debug)]
pub struct ZScoreParams {
    pub z_threshold: f64,
    /// One (mean, stddev) pair per feature, in [`FEATURE_NAMES`] order.
    pub baseline: [FeatureStat; 6],
}

#[derive(Clone, PartialEq, Debug)]
pub enum ModelKind {
    Threshold(ThresholdParams),
    ZScore(ZScoreParams),
}

#[derive(Clone, PartialEq, Debug)]
pub struct DetectorModel {
    pub version: u32,
    pub kind: ModelKind,
}

impl DetectorModel {
    pub fn kind_str(&self) -> &'static str {
        match self.kind {
            ModelKind::Threshold(_) => "threshold",
            ModelKind::ZScore(_) => "zscore",
        }
    }
}

/// One scored (source, window) pair.
#[derive(Clone, PartialEq, Debug)]
pub struct AnomalyVerdict {
    pub device: DeviceId,
    pub src_ip: std::net::Ipv4Addr,
    pub window_end: SimTime,
    pub score: f64,
    pub flagged: bool,
    pub model_version: u32,
    pub reason: Option<FlagReason>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SwapReport {
    pub old_version: u32,
    pub new_version: u32,
    /// End of the first window scored by the new model.
    pub first_window_end: SimTime,
}

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("stale model: offered version {offered} does not exceed current {current}")]
    StaleModel { current: u32, offered: u32 },
    #[error("invalid model parameters: {0}")]
    InvalidParameters(String),
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse model file: {0}")]
    Parse(String),
}

/// The scoring engine. `window` is the tumbling-window length, needed to
/// turn per-window counts into rates.
pub struct Detector {
    model: DetectorModel,
    window: SimTime,
}

impl Detector {
    pub fn new(model: DetectorModel, window: SimTime) -> Result<Self, DetectorError> {
        validate(&model)?;
        Ok(Detector { model, window })
    }

    pub fn model_version(&self) -> u32 {
        self.model.version
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    /// Score one window's feature vectors. Pure: same features and model
    /// produce the same verdicts regardless of history.
    pub fn score_window(&self, features: &[FeatureVector]) -> Vec<AnomalyVerdict> {
        features
            .iter()
            .map(|f| {
                let (score, decision_threshold, reason) =
                    score_one(&self.model.kind, f, self.window);
                let flagged = score >= decision_threshold;
                AnomalyVerdict {
                    device: f.src_device,
                    src_ip: f.src_ip,
                    window_end: f.window_end,
                    score,
                    flagged,
                    model_version: self.model.version,
                    reason: flagged.then_some(reason),
                }
            })
            .collect()
    }

    /// Install a newer model. Takes effect for every window scored after
    /// this call; the caller supplies the end of the next window for the
    /// report.
    pub fn swap_model(
        &mut self,
        new: DetectorModel,
        first_window_end: SimTime,
    ) -> Result<SwapReport, DetectorError> {
        if new.version <= self.model.version {
            return Err(DetectorError::StaleModel {
                current: self.model.version,
                offered: new.version,
            });
        }
        validate(&new)?;
        let old_version = self.model.version;
        let new_version = new.version;
        self.model = new;
        Ok(SwapReport {
            old_version,
            new_version,
            first_window_end,
        })
    }
}

/// Returns (score, decision threshold, dominant reason). Threshold
/// models score each rule as a ratio against its ceiling and take the
/// largest, so the decision boundary sits at 1.0; z-score models report
/// the worst absolute z directly and compare it against `z_threshold`.
fn score_one(
    kind: &ModelKind,
    f: &FeatureVector,
    window: SimTime,
) -> (f64, f64, FlagReason) {
    match kind {
        ModelKind::Threshold(p) => {
            let window_secs = window.as_secs_f64();
            let pps = f.total_packets as f64 / window_secs;
            // Candidate ratios in fixed precedence order; ties go to the
            // earlier entry.
            let beacon = if p.watch_ports.is_empty()
                || f.dst_ports.is_disjoint(&p.watch_ports)
            {
                0.0
            } else {
                1.0
            };
            let rate = pps / p.max_pps;
            let small = if p.min_mean_packet_size > 0.0 && f.mean_packet_size > 0.0 {
                p.min_mean_packet_size / f.mean_packet_size
            } else {
                0.0
            };
            let scan = f.flow_count as f64 / p.max_flows_per_window as f64;
            let candidates = [
                (beacon, FlagReason::BeaconPattern),
                (rate, FlagReason::RateExceeded),
                (small, FlagReason::RateExceeded),
                (scan, FlagReason::PortScanPattern),
            ];
            let mut best = candidates[0];
            for c in &candidates[1..] {
                if c.0 > best.0 {
                    best = *c;
                }
            }
            (best.0, 1.0, best.1)
        }
        ModelKind::ZScore(p) => {
            let numeric = f.numeric();
            let mut worst = 0.0f64;
            for (x, stat) in numeric.iter().zip(p.baseline.iter()) {
                let z = ((x - stat.mean) / stat.stddev).abs();
                if z > worst {
                    worst = z;
                }
            }
            (worst, p.z_threshold, FlagReason::ZScoreExceeded)
        }
    }
}

fn validate(model: &DetectorModel) -> Result<(), DetectorError> {
    if model.version == 0 {
        return Err(DetectorError::InvalidParameters(
            "version must be >= 1".into(),
        ));
    }
    match &model.kind {
        ModelKind::Threshold(p) => {
            if !(p.max_pps > 0.0) {
                return Err(DetectorError::InvalidParameters(
                    "max_pps must be positive".into(),
                ));
            }
            if p.max_flows_per_window == 0 {
                return Err(DetectorError::InvalidParameters(
                    "max_flows_per_window must be positive".into(),
                ));
            }
            if p.min_mean_packet_size < 0.0 || !p.min_mean_packet_size.is_finite() {
                return Err(DetectorError::InvalidParameters(
                    "min_mean_packet_size must be finite and non-negative".into(),
                ));
            }
        }
        ModelKind::ZScore(p) => {
            if !(p.z_threshold > 0.0) {
                return Err(DetectorError::InvalidParameters(
                    "z_threshold must be positive".into(),
                ));
            }
            for (stat, name) in p.baseline.iter().zip(FEATURE_NAMES) {
                if !(stat.stddev > 0.0) || !stat.stddev.is_finite() {
                    return Err(DetectorError::InvalidParameters(format!(
                        "stddev of {name} must be positive"
                    )));
                }
                if !stat.mean.is_finite() {
                    return Err(DetectorError::InvalidParameters(format!(
                        "mean of {name} must be finite"
                    )));
                }
            }
        }
    }
    Ok(())
}

// --- model files -----------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    kind: String,
    version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<ThresholdParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zscore: Option<ZScoreFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZScoreFile {
    z_threshold: f64,
    features: Vec<ZScoreFeatureFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZScoreFeatureFile {
    name: String,
    mean: f64,
    stddev: f64,
}

/// Parse a model document. The schema is strict: unknown fields, a kind
/// mismatch or features out of order all fail loudly.
pub fn parse_model(text: &str) -> Result<DetectorModel, DetectorError> {
    let file: ModelFile = toml::from_str(text).map_err(|e| DetectorError::Parse(e.to_string()))?;
    let kind = match (file.kind.as_str(), file.threshold, file.zscore) {
        ("threshold", Some(params), None) => ModelKind::Threshold(params),
        ("zscore", None, Some(z)) => {
            if z.features.len() != FEATURE_NAMES.len() {
                return Err(DetectorError::Parse(format!(
                    "expected {} features, found {}",
                    FEATURE_NAMES.len(),
                    z.features.len()
                )));
            }
            let mut baseline = [FeatureStat {
                mean: 0.0,
                stddev: 1.0,
            }; 6];
            for (i, (feat, name)) in z.features.iter().zip(FEATURE_NAMES).enumerate() {
                if feat.name != name {
                    return Err(DetectorError::Parse(format!(
                        "feature {i} must be named {name}, found {}",
                        feat.name
                    )));
                }
                baseline[i] = FeatureStat {
                    mean: feat.mean,
                    stddev: feat.stddev,
                };
            }
            ModelKind::ZScore(ZScoreParams {
                z_threshold: z.z_threshold,
                baseline,
            })
        }
        (kind, _, _) => {
            return Err(DetectorError::Parse(format!(
                "kind {kind:?} does not match the parameter table present"
            )))
        }
    };
    let model = DetectorModel {
        version: file.version,
        kind,
    };
    validate(&model)?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<DetectorModel, DetectorError> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

/// Serialize a model into its file form.
pub fn render_model(model: &DetectorModel) -> String {
    let file = match &model.kind {
        ModelKind::Threshold(p) => ModelFile {
            kind: "threshold".into(),
            version: model.version,
            threshold: Some(p.clone()),
            zscore: None,
        },
        ModelKind::ZScore(p) => ModelFile {
            kind: "zscore".into(),
            version: model.version,
            threshold: None,
            zscore: Some(ZScoreFile {
                z_threshold: p.z_threshold,
                features: p
                    .baseline
                    .iter()
                    .zip(FEATURE_NAMES)
                    .map(|(stat, name)| ZScoreFeatureFile {
                        name: name.into(),
                        mean: stat.mean,
                        stddev: stat.stddev,
                    })
                    .collect(),
            }),
        },
    };
    toml::to_string_pretty(&file).expect("model serialization cannot fail")
}

// --- offline trainer -------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("feature dump is empty")]
    EmptyDump,
    #[error("need at least two rows to estimate spread, found {0}")]
    TooFewRows(usize),
    #[error(
        "feature {name} is constant ({value}) across the dump; widen the clean run so every feature varies"
    )]
    DegenerateFeature { name: &'static str, value: f64 },
}

/// Fit a z-score baseline from clean-run feature rows. `version` should
/// be one greater than the model that produced the dump.
pub fn train_baseline(
    rows: &[[f64; 6]],
    z_threshold: f64,
    version: u32,
) -> Result<DetectorModel, TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyDump);
    }
    if rows.len() < 2 {
        return Err(TrainError::TooFewRows(rows.len()));
    }
    let n = rows.len() as f64;
    let mut baseline = [FeatureStat {
        mean: 0.0,
        stddev: 0.0,
    }; 6];
    for (i, stat) in baseline.iter_mut().enumerate() {
        let mean = rows.iter().map(|r| r[i]).sum::<f64>() / n;
        let ss = rows.iter().map(|r| (r[i] - mean) * (r[i] - mean)).sum::<f64>();
        let stddev = (ss / (n - 1.0)).sqrt();
        if stddev == 0.0 {
            return Err(TrainError::DegenerateFeature {
                name: FEATURE_NAMES[i],
                value: mean,
            });
        }
        *stat = FeatureStat { mean, stddev };
    }
    Ok(DetectorModel {
        version,
        kind: ModelKind::ZScore(ZScoreParams {
            z_threshold,
            baseline,
        }),
    })
}

impl fmt::Display for AnomalyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dev={} win={} flagged={} score={} ver={}",
            self.device,
            self.window_end.as_micros(),
            self.flagged,
            self.score,
            self.model_version
        )
    }
}
