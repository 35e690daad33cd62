//! Depth from optical expansion during a straight approach.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::jacobian::PseudoJacobian;
use crate::robot::SimRobot;
use crate::servo::{control, feedback_error, nearest_box, s_star, ImageFeature, ServoConfig};
use crate::world::{CameraPose, Twist, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthObservation {
    /// Camera travel along the approach axis since the reference pose, m.
    pub travel: f64,
    /// Box size, px.
    pub size: f64,
    pub frame_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthObservationLog {
    pub observations: Vec<DepthObservation>,
    pub reference_pose: CameraPose,
}

impl DepthObservationLog {
    pub fn new(reference_pose: CameraPose) -> Self {
        Self {
            observations: Vec::new(),
            reference_pose,
        }
    }

    pub fn push(&mut self, travel: f64, size: f64, frame_id: u64) {
        self.observations.push(DepthObservation {
            travel,
            size,
            frame_id,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum DepthError {
    #[error("depth system is rank deficient (travel never changed)")]
    RankDeficient,
    #[error("depth estimate {0} m is not positive")]
    NegativeDepth(f64),
}

/// Least-squares fit of `h_i (Z0 - d_i) = c`, i.e. rows `h_i Z0 - c = h_i d_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthFit {
    /// Depth at the reference pose.
    pub z0: f64,
    /// `f` times the object's metric extent.
    pub c: f64,
    /// Depth at the latest observation.
    pub current: f64,
}

pub fn fit_depth(log: &DepthObservationLog) -> Result<DepthFit, DepthError> {
    let obs = &log.observations;
    if obs.len() < 2 {
        return Err(DepthError::RankDeficient);
    }
    let (lo, hi) = obs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), o| {
        (a.min(o.travel), b.max(o.travel))
    });
    if hi - lo <= 1e-12 {
        return Err(DepthError::RankDeficient);
    }
    let n = obs.len();
    let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { obs[i].size } else { -1.0 });
    let b = DVector::from_fn(n, |i, _| obs[i].size * obs[i].travel);
    let svd = a.svd(true, true);
    let x = svd.solve(&b, 1e-12).map_err(|_| DepthError::RankDeficient)?;
    let z0 = x[0];
    let latest = obs.last().map(|o| o.travel).unwrap_or(0.0);
    let current = z0 - latest;
    if z0 <= 0.0 || current <= 0.0 {
        return Err(DepthError::NegativeDepth(current));
    }
    Ok(DepthFit {
        z0,
        c: x[1],
        current,
    })
}

/// Current depth (reference depth minus latest travel).
pub fn ls_depth(log: &DepthObservationLog) -> Result<f64, DepthError> {
    fit_depth(log).map(|f| f.current)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub travel: f64,
    /// Estimated depth at the reference pose.
    pub reference_estimate: f64,
    /// Estimated depth at this checkpoint.
    pub current_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEstimateSeries {
    pub checkpoints: Vec<Checkpoint>,
    /// Median of the checkpoint reference-depth estimates.
    pub final_median: f64,
    /// Travel at completion.
    pub travel: f64,
    pub observations: usize,
}

impl DepthEstimateSeries {
    /// Estimated depth to the object from the final camera pose.
    pub fn final_depth(&self) -> f64 {
        self.final_median - self.travel
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("travel_m,reference_estimate_m,current_estimate_m\n");
        for c in &self.checkpoints {
            out.push_str(&format!(
                "{:.6},{:.6},{:.6}\n",
                c.travel, c.reference_estimate, c.current_estimate
            ));
        }
        out
    }
}

/// Exact median; mean of the middle pair for even counts.
pub fn median_aggregate(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthConfig {
    pub increment_m: f64,
    pub speed_mps: f64,
    pub stop_depth_m: f64,
    /// Consecutive frames without the target before the task fails.
    pub lost_frames: u32,
    pub max_increments: u32,
    /// Checkpoints required before the stop rule may fire.
    pub min_checkpoints: u32,
    /// Lateral re-servo frames between increments.
    pub reservo_frames: u32,
    /// Boxes within this many px of the border are not used.
    pub border_margin_px: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            increment_m: 0.05,
            speed_mps: 0.05,
            stop_depth_m: 0.2,
            lost_frames: 5,
            max_increments: 30,
            min_checkpoints: 3,
            reservo_frames: 25,
            border_margin_px: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DepthFailure {
    #[error("target lost during approach (last image {image_id})")]
    DetectionLost { image_id: u64 },
    #[error("estimation failed: {0}")]
    Estimation(DepthError),
    #[error(transparent)]
    World(#[from] WorldError),
}

struct Tracker {
    s_prev: ImageFeature,
    missing: u32,
}

/// Approach the target in fixed increments, refitting depth on every frame
/// and keeping the latest estimate at each increment.
pub fn run_depth_task(
    robot: &mut SimRobot,
    lhat: &PseudoJacobian,
    label: &str,
    cfg: &DepthConfig,
    servo: &ServoConfig,
) -> Result<DepthEstimateSeries, DepthFailure> {
    let reference = robot.pose();
    let target = s_star(robot, servo);
    let classes = [label.to_string()];
    let mut log = DepthObservationLog::new(reference);
    let mut tracker = Tracker {
        s_prev: ImageFeature { s: target },
        missing: 0,
    };
    let mut checkpoints = Vec::new();
    let image_size = robot.intrinsics.image_size;

    // One frame: detect, log, and return the lateral error if seen.
    let frame = |robot: &mut SimRobot, log: &mut DepthObservationLog, tracker: &mut Tracker| -> Result<Option<[f64; 2]>, DepthFailure> {
        let d = robot.observe(&classes)?;
        let travel = reference.z() - robot.pose().z();
        match nearest_box(&d, label, &tracker.s_prev) {
            Some((i, s)) if s.l1(&tracker.s_prev) <= servo.discontinuity_px => {
                tracker.missing = 0;
                tracker.s_prev = s;
                let b = &d.boxes[i];
                if !b.touches_border(image_size, cfg.border_margin_px) {
                    log.push(travel, b.size(), d.image_id);
                }
                Ok(Some(feedback_error(&s, target).e))
            }
            _ => {
                tracker.missing += 1;
                if tracker.missing >= cfg.lost_frames {
                    return Err(DepthFailure::DetectionLost { image_id: d.image_id });
                }
                Ok(None)
            }
        }
    };

    frame(robot, &mut log, &mut tracker)?;
    let steps = (cfg.increment_m / (cfg.speed_mps * robot.clock.step)).round().max(1.0) as u32;
    let vz = cfg.increment_m / (steps as f64 * robot.clock.step);
    for _ in 0..cfg.max_increments {
        let mut v = Twist::zeros();
        v[2] = -vz;
        for _ in 0..steps {
            robot.step(&v);
            frame(robot, &mut log, &mut tracker)?;
        }
        for _ in 0..cfg.reservo_frames {
            let Some(e) = frame(robot, &mut log, &mut tracker)? else {
                robot.step(&Twist::zeros());
                continue;
            };
            let fe = crate::servo::FeatureError { e, s_star: target };
            if fe.max_norm() < servo.pre_depth_px {
                break;
            }
            robot.step(&control(lhat, &fe, servo));
        }
        let fit = fit_depth(&log).map_err(DepthFailure::Estimation)?;
        let travel = reference.z() - robot.pose().z();
        let current = fit.z0 - travel;
        if current <= 0.0 {
            return Err(DepthFailure::Estimation(DepthError::NegativeDepth(current)));
        }
        checkpoints.push(Checkpoint {
            travel,
            reference_estimate: fit.z0,
            current_estimate: current,
        });
        if current < cfg.stop_depth_m && checkpoints.len() >= cfg.min_checkpoints as usize {
            let refs: Vec<f64> = checkpoints.iter().map(|c| c.reference_estimate).collect();
            return Ok(DepthEstimateSeries {
                final_median: median_aggregate(&refs).unwrap_or(fit.z0),
                checkpoints,
                travel,
                observations: log.observations.len(),
            });
        }
    }
    Err(DepthFailure::Estimation(DepthError::NegativeDepth(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log_of(pts: &[(f64, f64)]) -> DepthObservationLog {
        let mut l = DepthObservationLog::new(CameraPose::new(0.0, 0.0, 1.0, 0.0));
        for (i, (d, h)) in pts.iter().enumerate() {
            l.push(*d, *h, i as u64);
        }
        l
    }

    #[test]
    fn exact_pinhole_fit() {
        // f = 500, extent 0.1, Z0 = 0.5: h = 50 / (0.5 - d)
        let pts: Vec<(f64, f64)> = [0.0, 0.1, 0.2].iter().map(|d| (*d, 50.0 / (0.5 - d))).collect();
        let fit = fit_depth(&log_of(&pts)).unwrap();
        assert!((fit.z0 - 0.5).abs() < 1e-12);
        assert!((fit.c - 50.0).abs() < 1e-9);
        assert!((ls_depth(&log_of(&pts)).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn equal_travel_is_rank_deficient() {
        assert_eq!(
            fit_depth(&log_of(&[(0.1, 80.0), (0.1, 81.0), (0.1, 79.0)])),
            Err(DepthError::RankDeficient)
        );
        assert_eq!(fit_depth(&log_of(&[(0.0, 80.0)])), Err(DepthError::RankDeficient));
    }

    #[test]
    fn shrinking_box_gives_negative_depth() {
        assert!(matches!(
            fit_depth(&log_of(&[(0.0, 100.0), (0.1, 90.0)])),
            Err(DepthError::NegativeDepth(_))
        ));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median_aggregate(&[0.21, 0.19, 0.50]), Some(0.21));
        assert_eq!(median_aggregate(&[0.3]), Some(0.3));
        assert_eq!(median_aggregate(&[0.2, 0.3]), Some(0.25));
        assert_eq!(median_aggregate(&[]), None);
    }

    proptest! {
        #[test]
        fn fit_is_exact_on_any_schedule(
            z0 in 0.3f64..1.5,
            c in 10.0f64..200.0,
            ds in proptest::collection::vec(0.0f64..0.25, 2..12),
        ) {
            let mut ds = ds;
            ds.sort_by(|a, b| a.total_cmp(b));
            prop_assume!(ds.last().unwrap() - ds[0] > 1e-3);
            let pts: Vec<(f64, f64)> = ds.iter().map(|d| (*d, c / (z0 - d))).collect();
            let fit = fit_depth(&log_of(&pts)).unwrap();
            prop_assert!(((fit.z0 - z0) / z0).abs() < 1e-9);
        }

        #[test]
        fn extra_noiseless_rows_leave_estimate_unchanged(z0 in 0.4f64..1.2, c in 20.0f64..100.0, extra in 0.01f64..0.2) {
            let base = [(0.0, c / z0), (0.1, c / (z0 - 0.1))];
            let a = fit_depth(&log_of(&base)).unwrap().z0;
            let mut more = base.to_vec();
            more.push((extra, c / (z0 - extra)));
            let b = fit_depth(&log_of(&more)).unwrap().z0;
            prop_assert!((a - b).abs() < 1e-9 * z0);
        }

        #[test]
        fn median_resists_minority_corruption(
            clean in proptest::collection::vec(0.1f64..1.0, 3..15),
            junk in proptest::collection::vec(-100.0f64..100.0, 0..14),
        ) {
            let k = junk.len().min((clean.len() - 1) / 2);
            let mut v = clean.clone();
            let n = v.len();
            for (slot, j) in v.iter_mut().take(k).zip(junk.iter()) {
                *slot = *j;
            }
            prop_assert!(k * 2 < n);
            // only the uncorrupted tail bounds the median
            let rest = &clean[k..];
            let lo = rest.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rest.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m = median_aggregate(&v).unwrap();
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
    }
}
