//! Rotation scan, grasp selection and simulated execution.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::robot::SimRobot;
use crate::servo::{nearest_box, s_star, ImageFeature, ServoConfig};
use crate::world::{back_project, wrap_angle, CameraPose, WorldError};

pub const SCAN_RESOLUTION_RAD: f64 = std::f64::consts::PI / 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Gripper {
    pub max_width_m: f64,
    /// Objects narrower than this slip through the closed fingers.
    pub min_width_m: f64,
    /// Depth errors beyond this lose the object in transit.
    pub slip_threshold_m: f64,
    /// Pre-grasp hover height above the estimated object top.
    pub hover_m: f64,
    /// Camera-to-gripper offset in the camera frame, compensated at execution.
    pub camera_offset_m: [f64; 2],
    pub open_margin_m: f64,
}

impl Default for Gripper {
    fn default() -> Self {
        Self {
            max_width_m: 0.135,
            min_width_m: 0.002,
            slip_threshold_m: 0.03,
            hover_m: 0.16,
            camera_offset_m: [0.0, 0.0],
            open_margin_m: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSample {
    pub yaw: f64,
    pub width: f64,
    pub height: f64,
    pub center: (f64, f64),
    pub pose: CameraPose,
    pub image_id: u64,
}

impl ScanSample {
    pub fn min_extent(&self) -> f64 {
        self.width.min(self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub samples: Vec<ScanSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub resolution_rad: f64,
    /// Frames tried per sample before the scan fails.
    pub retries: u32,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            resolution_rad: SCAN_RESOLUTION_RAD,
            retries: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraspError {
    #[error("object lost during rotation scan (last image {image_id})")]
    DetectionLost { image_id: u64 },
    #[error("object too wide: {width_m:.3} m exceeds the gripper")]
    ObjectTooWide { width_m: f64 },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Yaw samples covering `[0, pi/2)` at `resolution`.
pub fn scan_angles(resolution: f64) -> Vec<f64> {
    let n = (FRAC_PI_2 / resolution - 1e-9).ceil().max(1.0) as usize;
    (0..n).map(|k| k as f64 * resolution).collect()
}

/// Rotate the camera about its optical axis, one frame per sample, and
/// record the target box at every angle. The camera keeps slewing while a
/// sample is retried, so every scan frame sees the rotation speed.
pub fn scan_rotation(
    robot: &mut SimRobot,
    label: &str,
    scan: &ScanConfig,
    servo: &ServoConfig,
) -> Result<ScanResult, GraspError> {
    let classes = [label.to_string()];
    let slew = scan.resolution_rad / robot.clock.step;
    let speed = robot.model.params().context.camera_speed(0.0, slew);
    let base = robot.pose().yaw();
    let mut track = ImageFeature { s: s_star(robot, servo) };
    let mut samples = Vec::new();
    for a in scan_angles(scan.resolution_rad) {
        robot.set_yaw(wrap_angle(base + a));
        robot.note_speed(speed);
        let mut found = None;
        let mut last = 0;
        for _ in 0..scan.retries.max(1) {
            let d = robot.observe(&classes)?;
            robot.clock.tick();
            last = d.image_id;
            if let Some((i, s)) = nearest_box(&d, label, &track) {
                found = Some((d.boxes[i].clone(), s, d.image_id));
                break;
            }
        }
        let Some((b, s, image_id)) = found else {
            return Err(GraspError::DetectionLost { image_id: last });
        };
        track = s;
        samples.push(ScanSample {
            yaw: a,
            width: b.width,
            height: b.height,
            center: b.center,
            pose: robot.pose(),
            image_id,
        });
    }
    robot.note_speed(0.0);
    Ok(ScanResult { samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPlan {
    /// Ground-plane target for the finger center.
    pub point: [f64; 2],
    /// Estimated depth of the object's top below the camera at the sample.
    pub depth: f64,
    /// World direction along which the fingers close.
    pub closing_yaw: f64,
    /// Gripper yaw, perpendicular to the closing direction.
    pub gripper_yaw: f64,
    pub expected_width_m: f64,
    pub aperture_m: f64,
    /// Estimated world height of the object's top.
    pub top_z: f64,
}

/// Pick the scan sample with the smallest box dimension and close along it.
pub fn select_grasp(
    scan: &ScanResult,
    depth: f64,
    robot: &SimRobot,
    gripper: &Gripper,
) -> Result<GraspPlan, GraspError> {
    let k = &robot.intrinsics;
    let best = scan
        .samples
        .iter()
        .min_by(|a, b| a.min_extent().total_cmp(&b.min_extent()))
        .ok_or(GraspError::DetectionLost { image_id: 0 })?;
    let px = best.min_extent();
    let width_m = px * depth / k.focal_px;
    if width_m > gripper.max_width_m {
        return Err(GraspError::ObjectTooWide { width_m });
    }
    // image x runs along world yaw, image y along yaw + pi/2
    let cam_yaw = best.pose.yaw();
    let closing_yaw = if best.width <= best.height {
        cam_yaw
    } else {
        cam_yaw + FRAC_PI_2
    };
    let p = back_project(best.center.0, best.center.1, depth, &best.pose, k);
    Ok(GraspPlan {
        point: [p[0], p[1]],
        depth,
        closing_yaw: wrap_angle(closing_yaw),
        gripper_yaw: wrap_angle(closing_yaw + FRAC_PI_2),
        expected_width_m: width_m,
        aperture_m: (width_m + gripper.open_margin_m).min(gripper.max_width_m),
        top_z: p[2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspOutcome {
    Success,
    Miss,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspReport {
    pub outcome: GraspOutcome,
    pub object_id: Option<u32>,
    /// Planned top height minus true top height.
    pub depth_error_m: f64,
    pub true_width_m: f64,
}

/// Resolve a grasp against ground truth. On success the object is moved
/// into the robot's hand.
pub fn execute_grasp(robot: &mut SimRobot, plan: &GraspPlan, gripper: &Gripper) -> GraspReport {
    let Some(obj) = robot
        .scene
        .objects
        .iter()
        .filter(|o| o.footprint_contains(plan.point))
        .max_by(|a, b| a.top_z().total_cmp(&b.top_z()))
        .cloned()
    else {
        return GraspReport {
            outcome: GraspOutcome::Miss,
            object_id: None,
            depth_error_m: 0.0,
            true_width_m: 0.0,
        };
    };
    let width = obj.shape.extent_along(obj.yaw, plan.closing_yaw);
    let depth_error = plan.top_z - obj.top_z();
    let report = |outcome| GraspReport {
        outcome,
        object_id: Some(obj.id),
        depth_error_m: depth_error,
        true_width_m: width,
    };
    let half_h = 0.5 * obj.shape.height();
    if width > gripper.max_width_m || width > plan.aperture_m || width < gripper.min_width_m {
        return report(GraspOutcome::Miss);
    }
    if depth_error.abs() >= half_h {
        return report(GraspOutcome::Miss);
    }
    if depth_error.abs() > gripper.slip_threshold_m || !obj.graspable {
        return report(GraspOutcome::Drop);
    }
    robot.grasp_object(obj.id);
    report(GraspOutcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorModel, DetectorParams};
    use crate::world::{ActuationNoise, CameraIntrinsics, Scene, SceneObject, Shape};

    fn object(shape: Shape, yaw: f64) -> SceneObject {
        SceneObject {
            id: 1,
            class_label: "thing".into(),
            shape,
            position: [0.0, 0.0],
            yaw,
            support_height: 0.0,
            graspable: true,
            clutter_group: None,
        }
    }

    fn robot_over(obj: SceneObject, z: f64) -> SimRobot {
        let mut p = DetectorParams::default();
        p.covered.jitter_px = 0.0;
        p.covered.fp_rate = 0.0;
        let model = DetectorModel::fully_trained(p, &["thing"]);
        let mut r = SimRobot::new(
            Scene::new(vec![obj]).unwrap(),
            CameraIntrinsics::default(),
            ActuationNoise::none(),
            model,
            5,
        );
        r.set_pose(CameraPose::new(0.0, 0.0, z, 0.0));
        r
    }

    fn scan(obj: SceneObject) -> ScanResult {
        let z = obj.top_z() + 0.25;
        let mut r = robot_over(obj, z);
        scan_rotation(&mut r, "thing", &ScanConfig::default(), &ServoConfig::default()).unwrap()
    }

    fn sample(yaw: f64, width: f64, height: f64) -> ScanSample {
        ScanSample {
            yaw,
            width,
            height,
            center: (320.0, 240.0),
            pose: CameraPose::new(0.0, 0.0, 0.5, yaw),
            image_id: 0,
        }
    }

    #[test]
    fn angles_cover_quarter_turn() {
        let a = scan_angles(SCAN_RESOLUTION_RAD);
        assert_eq!(a.len(), 18);
        assert_eq!(a[0], 0.0);
        assert!(*a.last().unwrap() < FRAC_PI_2);
        let b = scan_angles(0.5);
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn square_reads_equal_sides_at_every_angle() {
        let s = scan(object(Shape::Box { w: 0.06, d: 0.06, h: 0.05 }, 0.2));
        assert_eq!(s.samples.len(), 18);
        for x in &s.samples {
            assert!((x.width - x.height).abs() <= 1.0, "{x:?}");
        }
    }

    #[test]
    fn cylinder_reads_the_same_at_every_angle() {
        let s = scan(object(Shape::Cylinder { r: 0.03, h: 0.1 }, 0.0));
        let m: Vec<f64> = s.samples.iter().map(|x| x.min_extent()).collect();
        let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo <= 1.0, "{lo} {hi}");
    }

    #[test]
    fn rectangle_minimum_aligns_short_side() {
        let yaw = 0.4;
        let obj = object(Shape::Box { w: 0.12, d: 0.04, h: 0.05 }, yaw);
        let z = obj.top_z() + 0.25;
        let s = scan(obj);
        let best = s
            .samples
            .iter()
            .min_by(|a, b| a.min_extent().total_cmp(&b.min_extent()))
            .unwrap();
        // the short side is flush with an image axis when the camera yaw
        // matches the object yaw modulo a quarter turn
        let off = (best.yaw - yaw).rem_euclid(FRAC_PI_2);
        let off = off.min(FRAC_PI_2 - off);
        assert!(off <= SCAN_RESOLUTION_RAD / 2.0 + 1e-9, "off {off}");
        let ideal = 0.04 * 525.0 / (z - 0.05);
        assert!(best.min_extent() >= ideal - 1.0);
    }

    #[test]
    fn forty_pixels_at_thirty_centimetres() {
        let r = robot_over(object(Shape::Cylinder { r: 0.02, h: 0.05 }, 0.0), 0.5);
        let scan = ScanResult {
            samples: vec![sample(0.0, 40.0, 60.0)],
        };
        let plan = select_grasp(&scan, 0.3, &r, &Gripper::default()).unwrap();
        assert!((plan.expected_width_m - 40.0 * 0.3 / 525.0).abs() < 1e-15);
        assert!((plan.expected_width_m - 0.0229).abs() < 1e-4);
        assert!((plan.aperture_m - (plan.expected_width_m + 0.02)).abs() < 1e-15);
        assert_eq!(plan.closing_yaw, 0.0);
    }

    #[test]
    fn wide_object_is_rejected() {
        let r = robot_over(object(Shape::Cylinder { r: 0.02, h: 0.05 }, 0.0), 0.5);
        // 350 px at 0.3 m is 0.2 m
        let scan = ScanResult {
            samples: vec![sample(0.0, 350.0, 400.0)],
        };
        match select_grasp(&scan, 0.3, &r, &Gripper::default()) {
            Err(GraspError::ObjectTooWide { width_m }) => assert!((width_m - 0.2).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn square_tie_picks_lowest_yaw_and_width() {
        let r = robot_over(object(Shape::Cylinder { r: 0.02, h: 0.05 }, 0.0), 0.5);
        let samples = scan_angles(SCAN_RESOLUTION_RAD)
            .into_iter()
            .map(|a| sample(a, 50.0, 50.0))
            .collect();
        let plan = select_grasp(&ScanResult { samples }, 0.3, &r, &Gripper::default()).unwrap();
        assert_eq!(plan.closing_yaw, 0.0);
        assert!((plan.gripper_yaw - FRAC_PI_2).abs() < 1e-12);
    }

    fn plan_at(point: [f64; 2], top_z: f64, width: f64) -> GraspPlan {
        GraspPlan {
            point,
            depth: 0.3,
            closing_yaw: 0.0,
            gripper_yaw: FRAC_PI_2,
            expected_width_m: width,
            aperture_m: width + 0.02,
            top_z,
        }
    }

    #[test]
    fn execution_outcomes() {
        let obj = object(Shape::Box { w: 0.04, d: 0.04, h: 0.2 }, 0.0);
        let top = obj.top_z();
        let g = Gripper::default();

        let mut r = robot_over(obj.clone(), 0.5);
        let rep = execute_grasp(&mut r, &plan_at([0.0, 0.0], top, 0.04), &g);
        assert_eq!(rep.outcome, GraspOutcome::Success);
        assert_eq!(rep.object_id, Some(1));
        assert!(r.scene.get(1).is_none(), "object moves into the hand");

        let mut r = robot_over(obj.clone(), 0.5);
        let rep = execute_grasp(&mut r, &plan_at([0.08, 0.0], top, 0.04), &g);
        assert_eq!(rep.outcome, GraspOutcome::Miss);
        assert_eq!(rep.object_id, None);

        // estimate 5 cm too deep
        let mut r = robot_over(obj.clone(), 0.5);
        let rep = execute_grasp(&mut r, &plan_at([0.0, 0.0], top - 0.05, 0.04), &g);
        assert_eq!(rep.outcome, GraspOutcome::Drop);
        assert!((rep.depth_error_m + 0.05).abs() < 1e-12);

        // beyond half the height the fingers hit the floor
        let mut r = robot_over(obj, 0.5);
        let rep = execute_grasp(&mut r, &plan_at([0.0, 0.0], top - 0.11, 0.04), &g);
        assert_eq!(rep.outcome, GraspOutcome::Miss);
    }

    #[test]
    fn too_wide_never_succeeds_even_with_large_aperture() {
        let obj = object(Shape::Box { w: 0.16, d: 0.16, h: 0.1 }, 0.0);
        let top = obj.top_z();
        let mut r = robot_over(obj, 0.5);
        let mut plan = plan_at([0.0, 0.0], top, 0.16);
        plan.aperture_m = 0.5;
        let rep = execute_grasp(&mut r, &plan, &Gripper::default());
        assert_eq!(rep.outcome, GraspOutcome::Miss);
        assert!(rep.true_width_m > 0.135);
    }

    #[test]
    fn execution_is_deterministic() {
        let obj = object(Shape::Cylinder { r: 0.03, h: 0.1 }, 0.0);
        let plan = plan_at([0.01, 0.0], obj.top_z() - 0.01, 0.06);
        let a = execute_grasp(&mut robot_over(obj.clone(), 0.5), &plan, &Gripper::default());
        let b = execute_grasp(&mut robot_over(obj, 0.5), &plan, &Gripper::default());
        assert_eq!(a, b);
    }
}
