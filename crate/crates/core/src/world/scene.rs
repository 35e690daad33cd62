//! Ground-truth scene description and its JSON file form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::camera::{ActuationNoise, CameraIntrinsics};
use super::WorldError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Width along the object's local x, depth along local y, height up.
    Box { w: f64, d: f64, h: f64 },
    Cylinder { r: f64, h: f64 },
}

impl Shape {
    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { h, .. } | Shape::Cylinder { h, .. } => h,
        }
    }

    fn dims_positive(&self) -> bool {
        match *self {
            Shape::Box { w, d, h } => w > 0.0 && d > 0.0 && h > 0.0,
            Shape::Cylinder { r, h } => r > 0.0 && h > 0.0,
        }
    }

    /// Extent of the footprint along a ground-plane direction `theta`,
    /// with the object itself rotated by `yaw`.
    pub fn extent_along(&self, yaw: f64, theta: f64) -> f64 {
        match *self {
            Shape::Box { w, d, .. } => {
                let rel = theta - yaw;
                w * rel.cos().abs() + d * rel.sin().abs()
            }
            Shape::Cylinder { r, .. } => 2.0 * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class_label: String,
    pub shape: Shape,
    /// Ground-plane position of the footprint center.
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub support_height: f64,
    #[serde(default = "yes")]
    pub graspable: bool,
    #[serde(default)]
    pub clutter_group: Option<u32>,
}

fn yes() -> bool {
    true
}

impl SceneObject {
    pub fn top_z(&self) -> f64 {
        self.support_height + self.shape.height()
    }

    /// Whether a ground-plane point lies on the object's footprint.
    pub fn footprint_contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        match self.shape {
            Shape::Box { w, d, .. } => {
                let (s, c) = self.yaw.sin_cos();
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                lx.abs() <= w / 2.0 && ly.abs() <= d / 2.0
            }
            Shape::Cylinder { r, .. } => dx * dx + dy * dy <= r * r,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if !self.shape.dims_positive() {
            return Err(WorldError::InvalidScene(format!(
                "object {} ({}) has non-positive dimensions",
                self.id, self.class_label
            )));
        }
        if self.support_height < 0.0 {
            return Err(WorldError::InvalidScene(format!(
                "object {} has negative support height",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>) -> Result<Self, WorldError> {
        let scene = Self { objects };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            o.validate()?;
            if !ids.insert(o.id) {
                return Err(WorldError::InvalidScene(format!("duplicate object id {}", o.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn remove(&mut self, id: u32) -> Option<SceneObject> {
        let idx = self.objects.iter().position(|o| o.id == id)?;
        Some(self.objects.remove(idx))
    }

    /// Whether another object shares this object's clutter group.
    pub fn in_clutter(&self, id: u32) -> bool {
        let Some(obj) = self.get(id) else {
            return false;
        };
        let Some(g) = obj.clutter_group else {
            return false;
        };
        self.objects
            .iter()
            .any(|o| o.id != id && o.clutter_group == Some(g))
    }

    /// Sorted, de-duplicated class labels present in the scene.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.objects.iter().map(|o| o.class_label.clone()).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// On-disk scene definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub noise: ActuationNoise,
    #[serde(default)]
    pub seed: u64,
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| WorldError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.intrinsics.validate()?;
        file.scene()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorldError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn scene(&self) -> Result<Scene, WorldError> {
        Scene::new(self.objects.clone())
    }
}
