//! Pinhole projection of scene objects into ground-truth boxes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::camera::{CameraIntrinsics, CameraPose};
use super::scene::{SceneObject, Shape};
use super::WorldError;

pub const CYLINDER_RIM_SAMPLES: usize = 64;

/// Axis-aligned box in image pixels, clipped to the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub object_id: u32,
    pub class_label: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Set when clipping removed part of the projection.
    pub truncated: bool,
}

impl GroundTruthBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

/// Project a world point; returns `(u, v, depth)`.
pub fn project_point(
    p: [f64; 3],
    cam: &CameraPose,
    k: &CameraIntrinsics,
) -> Result<(f64, f64, f64), WorldError> {
    let depth = cam.z() - p[2];
    if depth <= 1e-9 {
        return Err(WorldError::DegenerateProjection(depth));
    }
    let dx = p[0] - cam.x();
    let dy = p[1] - cam.y();
    let (s, c) = cam.yaw().sin_cos();
    let a = c * dx + s * dy;
    let b = -s * dx + c * dy;
    let (cx, cy) = k.principal_point;
    Ok((cx + k.focal_px * a / depth, cy - k.focal_px * b / depth, depth))
}

/// Inverse of [`project_point`] at a known depth below the camera.
pub fn back_project(
    u: f64,
    v: f64,
    depth: f64,
    cam: &CameraPose,
    k: &CameraIntrinsics,
) -> [f64; 3] {
    let (cx, cy) = k.principal_point;
    let a = (u - cx) * depth / k.focal_px;
    let b = -(v - cy) * depth / k.focal_px;
    let (s, c) = cam.yaw().sin_cos();
    [cam.x() + c * a - s * b, cam.y() + s * a + c * b, cam.z() - depth]
}

/// Top and bottom outline points of an object in world coordinates.
pub fn outline_points(obj: &SceneObject) -> Vec<[f64; 3]> {
    let z0 = obj.support_height;
    let z1 = obj.top_z();
    let [px, py] = obj.position;
    let mut pts = Vec::new();
    match obj.shape {
        Shape::Box { w, d, .. } => {
            let (s, c) = obj.yaw.sin_cos();
            for &(lx, ly) in &[(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)] {
                let ox = lx * w;
                let oy = ly * d;
                let x = px + c * ox - s * oy;
                let y = py + s * ox + c * oy;
                pts.push([x, y, z1]);
                pts.push([x, y, z0]);
            }
        }
        Shape::Cylinder { r, .. } => {
            for i in 0..CYLINDER_RIM_SAMPLES {
                let t = obj.yaw + 2.0 * PI * i as f64 / CYLINDER_RIM_SAMPLES as f64;
                let x = px + r * t.cos();
                let y = py + r * t.sin();
                pts.push([x, y, z1]);
                pts.push([x, y, z0]);
            }
        }
    }
    pts
}

/// Axis-aligned image box of the projected shape, clipped to the frame.
///
/// Returns `Ok(None)` when the projection lies entirely outside the image.
pub fn project_object(
    obj: &SceneObject,
    cam: &CameraPose,
    k: &CameraIntrinsics,
) -> Result<Option<GroundTruthBox>, WorldError> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in outline_points(obj) {
        let (u, v, _) = project_point(p, cam, k)?;
        x_min = x_min.min(u);
        x_max = x_max.max(u);
        y_min = y_min.min(v);
        y_max = y_max.max(v);
    }
    let (w, h) = (k.width(), k.height());
    if x_max <= 0.0 || y_max <= 0.0 || x_min >= w || y_min >= h {
        return Ok(None);
    }
    let truncated = x_min < 0.0 || y_min < 0.0 || x_max > w || y_max > h;
    Ok(Some(GroundTruthBox {
        object_id: obj.id,
        class_label: obj.class_label.clone(),
        x_min: x_min.max(0.0),
        y_min: y_min.max(0.0),
        x_max: x_max.min(w),
        y_max: y_max.min(h),
        truncated,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, (320.0, 240.0), (640, 480)).unwrap()
    }

    fn object(shape: Shape, pos: [f64; 2]) -> SceneObject {
        SceneObject {
            id: 7,
            class_label: "thing".into(),
            shape,
            position: pos,
            yaw: 0.0,
            support_height: 0.0,
            graspable: true,
            clutter_group: None,
        }
    }

    #[test]
    fn square_on_axis_projects_to_100px() {
        let obj = object(Shape::Box { w: 0.1, d: 0.1, h: 0.05 }, [0.0, 0.0]);
        let cam = CameraPose::new(0.0, 0.0, 0.55, 0.0);
        let b = project_object(&obj, &cam, &k500()).unwrap().unwrap();
        assert!((b.width() - 100.0).abs() < 1e-9);
        assert!((b.height() - 100.0).abs() < 1e-9);
        let (u, v) = b.center();
        assert!((u - 320.0).abs() < 1e-9 && (v - 240.0).abs() < 1e-9);
        assert!(!b.truncated);
    }

    #[test]
    fn out_of_frame_is_absent() {
        let obj = object(Shape::Box { w: 0.1, d: 0.1, h: 0.05 }, [3.0, 0.0]);
        let cam = CameraPose::new(0.0, 0.0, 0.55, 0.0);
        assert!(project_object(&obj, &cam, &k500()).unwrap().is_none());
    }

    #[test]
    fn cylinder_top_down_is_yaw_invariant() {
        let obj = object(Shape::Cylinder { r: 0.03, h: 0.02 }, [0.0, 0.0]);
        for i in 0..12 {
            let yaw = i as f64 * 0.37;
            let cam = CameraPose::new(0.0, 0.0, 0.32, yaw);
            let b = project_object(&obj, &cam, &k500()).unwrap().unwrap();
            assert!((b.width() - 100.0).abs() < 0.2, "w={}", b.width());
            assert!((b.height() - 100.0).abs() < 0.2, "h={}", b.height());
        }
    }

    #[test]
    fn camera_below_top_is_degenerate() {
        let obj = object(Shape::Box { w: 0.1, d: 0.1, h: 0.3 }, [0.0, 0.0]);
        let cam = CameraPose::new(0.0, 0.0, 0.3, 0.0);
        assert!(matches!(
            project_object(&obj, &cam, &k500()),
            Err(WorldError::DegenerateProjection(_))
        ));
    }

    #[test]
    fn image_axis_signs_follow_camera_translation() {
        let k = k500();
        let p = [0.0, 0.0, 0.0];
        let a = project_point(p, &CameraPose::new(0.0, 0.0, 0.5, 0.0), &k).unwrap();
        let bx = project_point(p, &CameraPose::new(0.01, 0.0, 0.5, 0.0), &k).unwrap();
        let by = project_point(p, &CameraPose::new(0.0, 0.01, 0.5, 0.0), &k).unwrap();
        assert!(bx.0 < a.0, "camera +x moves the image point to -u");
        assert!(by.1 > a.1, "camera +y moves the image point to +v");
    }

    #[test]
    fn back_projection_inverts_projection() {
        let k = k500();
        let cam = CameraPose::new(0.2, -0.1, 0.8, 0.7);
        let p = [0.25, -0.05, 0.1];
        let (u, v, z) = project_point(p, &cam, &k).unwrap();
        let q = back_project(u, v, z, &cam, &k);
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn halving_depth_doubles_flat_box(w in 0.02f64..0.15, d in 0.02f64..0.15, z in 0.3f64..1.2) {
            let obj = object(Shape::Box { w, d, h: 1e-4 }, [0.0, 0.0]);
            let k = k500();
            let far = project_object(&obj, &CameraPose::new(0.0, 0.0, z, 0.0), &k).unwrap().unwrap();
            let near = project_object(&obj, &CameraPose::new(0.0, 0.0, obj.top_z() + (z - obj.top_z()) / 2.0, 0.0), &k).unwrap();
            if let Some(near) = near {
                if !near.truncated {
                    prop_assert!((near.width() - 2.0 * far.width()).abs() <= 1.0);
                    prop_assert!((near.height() - 2.0 * far.height()).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn projected_boxes_stay_in_image(x in -1.0f64..1.0, y in -1.0f64..1.0, yaw in -3.0f64..3.0, z in 0.4f64..1.5) {
            let mut obj = object(Shape::Box { w: 0.1, d: 0.05, h: 0.1 }, [x, y]);
            obj.yaw = yaw;
            let k = k500();
            if let Some(b) = project_object(&obj, &CameraPose::new(0.0, 0.0, z, 0.3), &k).unwrap() {
                prop_assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                prop_assert!(b.x_max <= 640.0 && b.y_max <= 480.0);
                prop_assert!(b.x_min <= b.x_max && b.y_min <= b.y_max);
            }
        }
    }
}
