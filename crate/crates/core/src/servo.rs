//! Detection-based visual servoing and the Servo task failure monitor.

use serde::{Deserialize, Serialize};

use crate::detector::DetectionSet;
use crate::jacobian::PseudoJacobian;
use crate::robot::SimRobot;
use crate::world::{Twist, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageFeature {
    pub s: [f64; 2],
}

impl ImageFeature {
    pub fn new(x: f64, y: f64) -> Self {
        Self { s: [x, y] }
    }

    pub fn l1(&self, other: &ImageFeature) -> f64 {
        (self.s[0] - other.s[0]).abs() + (self.s[1] - other.s[1]).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureError {
    pub e: [f64; 2],
    pub s_star: [f64; 2],
}

impl FeatureError {
    pub fn max_norm(&self) -> f64 {
        self.e[0].abs().max(self.e[1].abs())
    }
}

pub fn feedback_error(s: &ImageFeature, s_star: [f64; 2]) -> FeatureError {
    FeatureError {
        e: [s.s[0] - s_star[0], s.s[1] - s_star[1]],
        s_star,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServoPhase {
    PreDepth,
    PreGrasp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoConfig {
    pub discontinuity_px: f64,
    pub missing_limit: u32,
    pub pre_depth_px: f64,
    pub pre_grasp_px: f64,
    pub max_translation_mps: f64,
    pub max_rotation_rps: f64,
    /// Desired feature; the principal point when absent.
    pub s_star: Option<[f64; 2]>,
    /// Frames before the loop gives up without converging.
    pub max_steps: u32,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            discontinuity_px: 150.0,
            missing_limit: 20,
            pre_depth_px: 10.0,
            pre_grasp_px: 5.0,
            max_translation_mps: 0.1,
            max_rotation_rps: 0.5,
            s_star: None,
            max_steps: 750,
        }
    }
}

impl ServoConfig {
    pub fn threshold(&self, phase: ServoPhase) -> f64 {
        match phase {
            ServoPhase::PreDepth => self.pre_depth_px,
            ServoPhase::PreGrasp => self.pre_grasp_px,
        }
    }
}

pub fn servo_converged(e: &FeatureError, phase: ServoPhase, cfg: &ServoConfig) -> bool {
    e.max_norm() < cfg.threshold(phase)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum ServoFailure {
    #[error("feature jumped {distance:.1} px in image {image_id}")]
    Discontinuity { image_id: u64, distance: f64 },
    #[error("target missing for {streak} frames (last image {image_id})")]
    MissingStreak { image_id: u64, streak: u32 },
}

impl ServoFailure {
    pub fn image_id(&self) -> u64 {
        match self {
            ServoFailure::Discontinuity { image_id, .. } | ServoFailure::MissingStreak { image_id, .. } => {
                *image_id
            }
        }
    }
}

/// Result of one feature extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub feature: ImageFeature,
    pub detected: bool,
}

/// Tracks the servoed feature across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ServoMonitor {
    pub s_prev: ImageFeature,
    pub missing_streak: u32,
    discontinuity_limit: f64,
    missing_limit: u32,
    detections: u32,
}

/// Nearest box labeled `label` to `to` in L1; ties go to higher confidence,
/// then to the earlier box.
pub fn nearest_box(d: &DetectionSet, label: &str, to: &ImageFeature) -> Option<(usize, ImageFeature)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, b) in d.boxes.iter().enumerate() {
        if b.class_label != label {
            continue;
        }
        let dist = (b.center.0 - to.s[0]).abs() + (b.center.1 - to.s[1]).abs();
        let better = match best {
            None => true,
            Some((_, bd, bc)) => dist < bd || (dist == bd && b.confidence > bc),
        };
        if better {
            best = Some((i, dist, b.confidence));
        }
    }
    best.map(|(i, _, _)| {
        let c = d.boxes[i].center;
        (i, ImageFeature::new(c.0, c.1))
    })
}

impl ServoMonitor {
    pub fn new(s_prev: ImageFeature, cfg: &ServoConfig) -> Self {
        Self {
            s_prev,
            missing_streak: 0,
            discontinuity_limit: cfg.discontinuity_px,
            missing_limit: cfg.missing_limit,
            detections: 0,
        }
    }

    /// Start tracking at the box nearest `s_star`. The first detection is
    /// exempt from the discontinuity check.
    pub fn initialized(s_star: [f64; 2], cfg: &ServoConfig) -> Self {
        Self::new(ImageFeature { s: s_star }, cfg)
    }

    pub fn extract_feature(&mut self, d: &DetectionSet, label: &str) -> Result<Observation, ServoFailure> {
        match nearest_box(d, label, &self.s_prev) {
            None => {
                self.missing_streak += 1;
                if self.missing_streak >= self.missing_limit {
                    return Err(ServoFailure::MissingStreak {
                        image_id: d.image_id,
                        streak: self.missing_streak,
                    });
                }
                Ok(Observation {
                    feature: self.s_prev,
                    detected: false,
                })
            }
            Some((_, s)) => {
                let dist = s.l1(&self.s_prev);
                if self.detections > 0 && dist > self.discontinuity_limit {
                    return Err(ServoFailure::Discontinuity {
                        image_id: d.image_id,
                        distance: dist,
                    });
                }
                self.detections += 1;
                self.missing_streak = 0;
                self.s_prev = s;
                Ok(Observation {
                    feature: s,
                    detected: true,
                })
            }
        }
    }
}

/// `v = -Lhat e`, clamped per axis.
pub fn control(lhat: &PseudoJacobian, e: &FeatureError, cfg: &ServoConfig) -> Twist {
    let mut v = control_unclamped(lhat, e);
    for i in 0..6 {
        let lim = if i < 3 {
            cfg.max_translation_mps
        } else {
            cfg.max_rotation_rps
        };
        v[i] = v[i].clamp(-lim, lim);
    }
    v
}

pub fn control_unclamped(lhat: &PseudoJacobian, e: &FeatureError) -> Twist {
    let ev = nalgebra::Vector2::new(e.e[0], e.e[1]);
    -(lhat.matrix() * ev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoOutcome {
    pub error: FeatureError,
    pub steps: u32,
    pub image_id: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ServoError {
    #[error(transparent)]
    Failure(#[from] ServoFailure),
    #[error("servo did not converge within {0} frames")]
    Timeout(u32),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub fn s_star(robot: &SimRobot, cfg: &ServoConfig) -> [f64; 2] {
    cfg.s_star.unwrap_or([
        robot.intrinsics.principal_point.0,
        robot.intrinsics.principal_point.1,
    ])
}

/// Closed-loop servo on `label` until the phase threshold is met.
pub fn run_servo(
    robot: &mut SimRobot,
    lhat: &PseudoJacobian,
    label: &str,
    phase: ServoPhase,
    cfg: &ServoConfig,
) -> Result<ServoOutcome, ServoError> {
    let target = s_star(robot, cfg);
    let classes = [label.to_string()];
    let mut mon = ServoMonitor::initialized(target, cfg);
    for step in 0..cfg.max_steps {
        let d = robot.observe(&classes)?;
        let obs = mon.extract_feature(&d, label)?;
        let e = feedback_error(&obs.feature, target);
        if obs.detected && servo_converged(&e, phase, cfg) {
            return Ok(ServoOutcome {
                error: e,
                steps: step,
                image_id: d.image_id,
            });
        }
        let v = if obs.detected {
            control(lhat, &e, cfg)
        } else {
            Twist::zeros()
        };
        robot.step(&v);
    }
    Err(ServoError::Timeout(cfg.max_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BoundingBox;

    fn bx(x: f64, y: f64, label: &str, conf: f64) -> BoundingBox {
        BoundingBox {
            center: (x, y),
            width: 20.0,
            height: 20.0,
            class_label: label.into(),
            confidence: conf,
        }
    }

    fn set(boxes: Vec<BoundingBox>) -> DetectionSet {
        DetectionSet {
            image_id: 11,
            boxes,
            threshold_applied: 0.9,
        }
    }

    #[test]
    fn nearest_match_wins() {
        let cfg = ServoConfig::default();
        let mut m = ServoMonitor::new(ImageFeature::new(300.0, 230.0), &cfg);
        let d = set(vec![bx(320.0, 240.0, "cup", 0.95), bx(100.0, 100.0, "cup", 0.99)]);
        let o = m.extract_feature(&d, "cup").unwrap();
        assert_eq!(o.feature.s, [320.0, 240.0]);
    }

    #[test]
    fn other_labels_ignored_and_missing_holds_previous() {
        let cfg = ServoConfig::default();
        let mut m = ServoMonitor::new(ImageFeature::new(300.0, 230.0), &cfg);
        let o = m.extract_feature(&set(vec![bx(300.0, 230.0, "bowl", 0.99)]), "cup").unwrap();
        assert!(!o.detected);
        assert_eq!(o.feature.s, [300.0, 230.0]);
        assert_eq!(m.missing_streak, 1);
    }

    #[test]
    fn jump_over_limit_is_discontinuity() {
        let cfg = ServoConfig::default();
        let mut m = ServoMonitor::new(ImageFeature::new(0.0, 0.0), &cfg);
        m.extract_feature(&set(vec![bx(1.0, 1.0, "cup", 0.95)]), "cup").unwrap();
        m.s_prev = ImageFeature::new(0.0, 0.0);
        let err = m.extract_feature(&set(vec![bx(200.0, 10.0, "cup", 0.95)]), "cup").unwrap_err();
        assert_eq!(
            err,
            ServoFailure::Discontinuity {
                image_id: 11,
                distance: 210.0
            }
        );
    }

    #[test]
    fn first_detection_is_exempt_from_jump_check() {
        let cfg = ServoConfig::default();
        let mut m = ServoMonitor::initialized([320.0, 240.0], &cfg);
        assert!(m.extract_feature(&set(vec![bx(20.0, 20.0, "cup", 0.95)]), "cup").is_ok());
    }

    #[test]
    fn missing_limit_fires_on_twentieth_frame() {
        let cfg = ServoConfig::default();
        let mut m = ServoMonitor::new(ImageFeature::new(0.0, 0.0), &cfg);
        for _ in 0..19 {
            assert!(m.extract_feature(&set(vec![]), "cup").is_ok());
        }
        assert!(matches!(
            m.extract_feature(&set(vec![]), "cup"),
            Err(ServoFailure::MissingStreak { streak: 20, .. })
        ));
    }

    #[test]
    fn tie_break_prefers_confidence_then_index() {
        let to = ImageFeature::new(100.0, 100.0);
        let d = set(vec![bx(110.0, 100.0, "cup", 0.91), bx(90.0, 100.0, "cup", 0.97)]);
        assert_eq!(nearest_box(&d, "cup", &to).unwrap().0, 1);
        let d = set(vec![bx(110.0, 100.0, "cup", 0.95), bx(90.0, 100.0, "cup", 0.95)]);
        assert_eq!(nearest_box(&d, "cup", &to).unwrap().0, 0);
    }

    #[test]
    fn feedback_error_arithmetic() {
        let e = feedback_error(&ImageFeature::new(370.0, 220.0), [320.0, 240.0]);
        assert_eq!(e.e, [50.0, -20.0]);
        let z = feedback_error(&ImageFeature::new(320.0, 240.0), [320.0, 240.0]);
        assert_eq!(z.e, [0.0, 0.0]);
    }

    #[test]
    fn convergence_thresholds() {
        let cfg = ServoConfig::default();
        let e = FeatureError {
            e: [9.0, -9.0],
            s_star: [0.0, 0.0],
        };
        assert!(servo_converged(&e, ServoPhase::PreDepth, &cfg));
        assert!(!servo_converged(&e, ServoPhase::PreGrasp, &cfg));
        let z = FeatureError {
            e: [0.0, 0.0],
            s_star: [0.0, 0.0],
        };
        assert!(servo_converged(&z, ServoPhase::PreDepth, &cfg));
        assert!(servo_converged(&z, ServoPhase::PreGrasp, &cfg));
    }

    #[test]
    fn control_matches_hand_multiply() {
        let l = PseudoJacobian::diagonal(-6e-4, 6e-4);
        let e = FeatureError {
            e: [50.0, -20.0],
            s_star: [320.0, 240.0],
        };
        let v = control(&l, &e, &ServoConfig::default());
        // -(-6e-4 * 50) = 0.03, -(6e-4 * -20) = 0.012
        assert!((v[0] - 0.030).abs() < 1e-15);
        assert!((v[1] - 0.012).abs() < 1e-15);
        for i in 2..6 {
            assert_eq!(v[i], 0.0);
        }
        let zero = control(&l, &FeatureError { e: [0.0, 0.0], s_star: [0.0, 0.0] }, &ServoConfig::default());
        assert_eq!(zero, Twist::zeros());
    }

    #[test]
    fn control_clamps_translation() {
        let l = PseudoJacobian::diagonal(-6e-4, 6e-4);
        let e = FeatureError {
            e: [1000.0, 0.0],
            s_star: [0.0, 0.0],
        };
        let v = control(&l, &e, &ServoConfig::default());
        assert_eq!(v[0], 0.1);
    }
}
