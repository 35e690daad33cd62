use serde::{Deserialize, Serialize};

use crate::world::{CameraPose, SceneObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBand {
    Near,
    Mid,
    Far,
}

/// Discretized viewing condition. Every view maps to exactly one bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextBin {
    pub distance: DistanceBand,
    pub clutter: bool,
    pub blur: bool,
}

impl ContextBin {
    /// All twelve bins in sorted order.
    pub fn all() -> Vec<ContextBin> {
        let mut out = Vec::with_capacity(12);
        for distance in [DistanceBand::Near, DistanceBand::Mid, DistanceBand::Far] {
            for clutter in [false, true] {
                for blur in [false, true] {
                    out.push(ContextBin { distance, clutter, blur });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Depths strictly below this are `Near`.
    pub near_max_m: f64,
    /// Depths strictly above this are `Far`.
    pub far_min_m: f64,
    /// Camera speed above which frames are blurred.
    pub blur_speed_mps: f64,
    /// Lever arm converting angular speed into an equivalent linear speed.
    pub rotation_lever_m: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            near_max_m: 0.35,
            far_min_m: 0.8,
            blur_speed_mps: 0.15,
            rotation_lever_m: 0.1,
        }
    }
}

impl ContextConfig {
    pub fn band(&self, depth_m: f64) -> DistanceBand {
        if depth_m < self.near_max_m {
            DistanceBand::Near
        } else if depth_m > self.far_min_m {
            DistanceBand::Far
        } else {
            DistanceBand::Mid
        }
    }

    pub fn bin(&self, depth_m: f64, camera_speed: f64, clutter: bool) -> ContextBin {
        ContextBin {
            distance: self.band(depth_m),
            clutter,
            blur: camera_speed > self.blur_speed_mps,
        }
    }

    /// Scalar speed used for blur: translation plus lever-scaled rotation.
    pub fn camera_speed(&self, linear_mps: f64, angular_rps: f64) -> f64 {
        linear_mps + angular_rps.abs() * self.rotation_lever_m
    }
}

/// Bin an object's appearance from the current camera pose.
pub fn classify_context(
    obj: &SceneObject,
    cam: &CameraPose,
    recent_camera_speed: f64,
    clutter: bool,
    cfg: &ContextConfig,
) -> ContextBin {
    cfg.bin(cam.z() - obj.top_z(), recent_camera_speed, clutter)
}
