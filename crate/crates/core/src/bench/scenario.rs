use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::jacobian::NoiseConfig;
use crate::par::Execution;
use crate::world::{ActuationNoise, SceneFile, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    VsLearning,
    VosvsBench,
    PickPlace,
    PickPlaceClutter,
    DynamicPlace,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::VsLearning => "vs_learning",
            Protocol::VosvsBench => "vosvs_bench",
            Protocol::PickPlace => "pick_place",
            Protocol::PickPlaceClutter => "pick_place_clutter",
            Protocol::DynamicPlace => "dynamic_place",
        }
    }

    pub fn default_trials(&self) -> usize {
        match self {
            Protocol::VsLearning => 10,
            Protocol::VosvsBench => 8,
            Protocol::PickPlace | Protocol::PickPlaceClutter => 10,
            Protocol::DynamicPlace => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    TfodOnPriorOff,
    TfodOnPriorOn,
    TfodOffPriorOn,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::TfodOnPriorOff,
        Ablation::TfodOnPriorOn,
        Ablation::TfodOffPriorOn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::TfodOnPriorOff => "tfod_on_prior_off",
            Ablation::TfodOnPriorOn => "tfod_on_prior_on",
            Ablation::TfodOffPriorOn => "tfod_off_prior_on",
        }
    }

    pub fn tfod(&self) -> bool {
        !matches!(self, Ablation::TfodOffPriorOn)
    }

    pub fn prior(&self) -> bool {
        !matches!(self, Ablation::TfodOnPriorOff)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorMode {
    #[default]
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub confidence: f64,
    /// Confidence used by arms that run without annotation.
    pub no_tfod_confidence: f64,
    pub servo_pre_depth_px: f64,
    pub servo_pre_grasp_px: f64,
    pub depth_stop_m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            confidence: 0.9,
            no_tfod_confidence: 0.1,
            servo_pre_depth_px: 10.0,
            servo_pre_grasp_px: 5.0,
            depth_stop_m: 0.2,
        }
    }
}

fn default_jitter() -> f64 {
    2.0
}

fn default_cap() -> u32 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub protocol: Protocol,
    /// Fixed layout used for every trial instead of the generated ones.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    /// Target classes; empty uses the protocol's default objects.
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub annotator: AnnotatorMode,
    /// Restrict a pick-and-place run to one arm.
    #[serde(default)]
    pub ablation: Option<Ablation>,
    /// Saved few-shot set preloaded by prior arms.
    #[serde(default)]
    pub prior_set: Option<PathBuf>,
    #[serde(default)]
    pub noise: ActuationNoise,
    #[serde(default)]
    pub learning_noise: Option<NoiseConfig>,
    #[serde(default = "default_jitter")]
    pub oracle_jitter_px: f64,
    #[serde(default)]
    pub sentry: bool,
    #[serde(default = "default_cap")]
    pub example_cap: u32,
    #[serde(default)]
    pub execution: Execution,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

impl ScenarioConfig {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            scene: None,
            objects: Vec::new(),
            trials: None,
            seed: 0,
            detector: DetectorParams::default(),
            thresholds: Thresholds::default(),
            annotator: AnnotatorMode::Oracle,
            ablation: None,
            prior_set: None,
            noise: ActuationNoise::default(),
            learning_noise: None,
            oracle_jitter_px: default_jitter(),
            sentry: false,
            example_cap: default_cap(),
            execution: Execution::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate_fields()?;
        Ok(cfg)
    }

    /// Parse a file and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ScenarioError::MissingFile(path.to_path_buf()),
            _ => ScenarioError::Io(e.to_string()),
        })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.scene, &mut cfg.prior_set].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate_files()?;
        Ok(cfg)
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or(self.protocol.default_trials())
    }

    fn validate_fields(&self) -> Result<(), ScenarioError> {
        let t = &self.thresholds;
        for (name, v) in [("confidence", t.confidence), ("no_tfod_confidence", t.no_tfod_confidence)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ScenarioError::Invalid(format!("thresholds.{name} must be in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("servo_pre_depth_px", t.servo_pre_depth_px),
            ("servo_pre_grasp_px", t.servo_pre_grasp_px),
            ("depth_stop_m", t.depth_stop_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ScenarioError::Invalid(format!("thresholds.{name} must be positive, got {v}")));
            }
        }
        if self.trials == Some(0) {
            return Err(ScenarioError::Invalid("trials must be at least 1".into()));
        }
        if !(self.oracle_jitter_px >= 0.0) {
            return Err(ScenarioError::Invalid("oracle_jitter_px must be non-negative".into()));
        }
        if self.example_cap == 0 {
            return Err(ScenarioError::Invalid("example_cap must be at least 1".into()));
        }
        self.detector
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("detector: {e}")))?;
        if self.ablation.is_some()
            && !matches!(self.protocol, Protocol::PickPlace | Protocol::PickPlaceClutter)
        {
            return Err(ScenarioError::Invalid(format!(
                "ablation applies to pick_place protocols, not {}",
                self.protocol.as_str()
            )));
        }
        for o in &self.objects {
            if super::catalog::lookup(o).is_none() && self.scene.is_none() {
                return Err(ScenarioError::Invalid(format!("unknown object class '{o}'")));
            }
        }
        if self.protocol == Protocol::DynamicPlace
            && self.objects.iter().any(|o| !o.starts_with("cup_"))
        {
            return Err(ScenarioError::Invalid("dynamic_place objects must be cups".into()));
        }
        Ok(())
    }

    pub fn validate_files(&self) -> Result<(), ScenarioError> {
        for p in [&self.scene, &self.prior_set].into_iter().flatten() {
            if !p.exists() {
                return Err(ScenarioError::MissingFile(p.clone()));
            }
        }
        if let Some(p) = &self.scene {
            SceneFile::load(p)?;
        }
        Ok(())
    }
}
