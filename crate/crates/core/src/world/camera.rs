//! Pinhole intrinsics, camera pose and first-order pose integration.

use std::f64::consts::PI;

use nalgebra::Vector6;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::WorldError;

/// 6DOF velocity or displacement ordered `(x, y, z, roll, pitch, yaw)`.
pub type Twist = Vector6<f64>;

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub principal_point: (f64, f64),
    pub image_size: (u32, u32),
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal_px: 525.0,
            principal_point: (320.0, 240.0),
            image_size: (640, 480),
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        focal_px: f64,
        principal_point: (f64, f64),
        image_size: (u32, u32),
    ) -> Result<Self, WorldError> {
        let k = Self {
            focal_px,
            principal_point,
            image_size,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(WorldError::InvalidIntrinsics(format!(
                "focal length must be positive, got {}",
                self.focal_px
            )));
        }
        let (w, h) = (self.width(), self.height());
        let (cx, cy) = self.principal_point;
        if !(cx > 0.0 && cx < w && cy > 0.0 && cy < h) {
            return Err(WorldError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {w}x{h} image"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.image_size.0 as f64
    }

    pub fn height(&self) -> f64 {
        self.image_size.1 as f64
    }
}

/// Downward-facing camera pose in the world frame.
///
/// Roll and pitch are carried for completeness but the rig is rigid and
/// looks straight down; only yaw enters the projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub orientation: [f64; 3],
}

impl CameraPose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            position: [x, y, z],
            orientation: [0.0, 0.0, wrap_angle(yaw)],
        }
    }

    pub fn x(&self) -> f64 {
        self.position[0]
    }

    pub fn y(&self) -> f64 {
        self.position[1]
    }

    pub fn z(&self) -> f64 {
        self.position[2]
    }

    pub fn yaw(&self) -> f64 {
        self.orientation[2]
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.orientation.iter())
            .all(|v| v.is_finite())
    }
}

/// Component-wise `b - a` with the angular components wrapped.
pub fn pose_delta(a: &CameraPose, b: &CameraPose) -> Twist {
    let mut d = Twist::zeros();
    for i in 0..3 {
        d[i] = b.position[i] - a.position[i];
        d[i + 3] = wrap_angle(b.orientation[i] - a.orientation[i]);
    }
    d
}

/// Base actuation error model.
///
/// Each commanded translation axis receives a multiplicative Gaussian error
/// plus an additive floor whose standard deviation is `additive_floor_m` per
/// second of motion. Axes that are not commanded do not drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationNoise {
    pub multiplicative_sigma: f64,
    pub additive_floor_m: f64,
    /// Deterministic gain applied to commanded translation (1.0 = none).
    #[serde(default = "one")]
    pub shortfall: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ActuationNoise {
    fn default() -> Self {
        Self {
            multiplicative_sigma: 0.05,
            additive_floor_m: 0.001,
            shortfall: 1.0,
        }
    }
}

impl ActuationNoise {
    pub fn none() -> Self {
        Self {
            multiplicative_sigma: 0.0,
            additive_floor_m: 0.0,
            shortfall: 1.0,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.multiplicative_sigma == 0.0 && self.additive_floor_m == 0.0 && self.shortfall == 1.0
    }
}

/// Euler-integrate a world-frame twist for `dt` seconds.
pub fn apply_velocity<R: Rng + ?Sized>(
    cam: &CameraPose,
    v: &Twist,
    dt: f64,
    noise: Option<(&ActuationNoise, &mut R)>,
) -> CameraPose {
    let mut out = *cam;
    match noise {
        Some((n, rng)) if !n.is_noiseless() => {
            for i in 0..3 {
                let cmd = v[i] * dt;
                if cmd == 0.0 {
                    continue;
                }
                let m: f64 = rng.sample(StandardNormal);
                let a: f64 = rng.sample(StandardNormal);
                let actual = cmd * n.shortfall * (1.0 + n.multiplicative_sigma * m)
                    + n.additive_floor_m * dt.sqrt() * a;
                out.position[i] += actual;
            }
        }
        _ => {
            for i in 0..3 {
                out.position[i] += v[i] * dt;
            }
        }
    }
    for i in 0..3 {
        out.orientation[i] = wrap_angle(cam.orientation[i] + v[i + 3] * dt);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_velocity_keeps_pose() {
        let p = CameraPose::new(0.1, -0.2, 0.9, 0.3);
        let q = apply_velocity::<ChaCha8Rng>(&p, &Twist::zeros(), 0.04, None);
        assert_eq!(p, q);
    }

    #[test]
    fn euler_step_advances_x() {
        let p = CameraPose::new(0.0, 0.0, 0.5, 0.0);
        let mut v = Twist::zeros();
        v[0] = 0.05;
        let q = apply_velocity::<ChaCha8Rng>(&p, &v, 1.0, None);
        assert!((q.x() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn shortfall_scales_measured_motion() {
        let p = CameraPose::new(0.0, 0.0, 0.5, 0.0);
        let mut v = Twist::zeros();
        v[0] = 0.05;
        let noise = ActuationNoise {
            multiplicative_sigma: 0.0,
            additive_floor_m: 0.0,
            shortfall: 0.94,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = apply_velocity(&p, &v, 1.0, Some((&noise, &mut rng)));
        assert!((pose_delta(&p, &q)[0] - 0.047).abs() < 1e-12);
    }

    #[test]
    fn delta_of_identical_poses_is_zero() {
        let p = CameraPose::new(0.3, 0.2, 0.1, -1.0);
        assert_eq!(pose_delta(&p, &p), Twist::zeros());
    }

    #[test]
    fn delta_single_axis() {
        let a = CameraPose::new(0.0, 0.0, 0.5, 0.0);
        let b = CameraPose::new(0.027, 0.0, 0.5, 0.0);
        let d = pose_delta(&a, &b);
        assert!((d[0] - 0.027).abs() < 1e-15);
        assert_eq!(d.rows(1, 5).amax(), 0.0);
    }

    #[test]
    fn yaw_delta_wraps() {
        let a = CameraPose::new(0.0, 0.0, 0.5, 3.1);
        let b = CameraPose::new(0.0, 0.0, 0.5, -3.1);
        let d = pose_delta(&a, &b);
        assert!((d[5] - (2.0 * PI - 6.2)).abs() < 1e-12);
        assert!(d[5] > 0.08 && d[5] < 0.09);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, (320.0, 240.0), (640, 480)).is_err());
        assert!(CameraIntrinsics::new(500.0, (640.0, 240.0), (640, 480)).is_err());
        assert!(CameraIntrinsics::new(500.0, (320.0, 240.0), (640, 480)).is_ok());
    }
}
